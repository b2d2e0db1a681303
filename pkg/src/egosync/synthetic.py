"""Seeded synthetic multi-view recordings with exact ground truth.

Each take is driven by a latent pose trajectory in ``[-1, 1]^5``:

====  =======================================
dim   meaning
====  =======================================
0     crouch depth (-1 standing, +1 deep)
1     left arm raise
2     right arm raise
3     stride (left leg forward when positive)
4     lateral torso lean
====  =======================================

Forward kinematics turn the latent pose into a 17-joint skeleton, and each
camera view is a different fixed rendering of that skeleton into a small
3-channel "feature image": Gaussian blobs at projected joints, plus a
scrolling background texture in the head-mounted view. Synchronized views
therefore share the latent trajectory and nothing else.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import artifacts
from .data import ClipRecord, write_manifest
from .skeleton import JOINT_INDEX, JOINT_NAMES, N_JOINTS, write_sequence

LATENT_DIM = 5
LATENT_BOUND = 1.0

ACTIVITY_CLASSES = ("whole_body", "vertical_movement", "hands_feet", "complex")

# Periods (frames) drawn for the latent oscillators; none divides the 25-frame
# hard-negative shift.
_FAST_PERIODS = (32.0, 45.0)
_SLOW_PERIODS = (60.0, 80.0)

# Per-class (base, amplitude, uses_slow_period) for each latent dimension.
_CLASS_PROFILES = {
    "whole_body": [(-0.8, 0.1, True), (0.0, 0.5, False), (0.0, 0.5, False),
                   (0.0, 0.8, False), (0.0, 0.15, True)],
    "vertical_movement": [(0.5, 0.4, True), (-0.3, 0.25, True), (-0.3, 0.25, True),
                          (0.0, 0.1, False), (0.0, 0.1, True)],
    "hands_feet": [(-0.6, 0.15, True), (0.1, 0.8, False), (0.1, 0.8, False),
                   (0.0, 0.4, True), (0.0, 0.1, True)],
    "complex": [(-0.2, 0.5, True), (0.0, 0.5, False), (0.0, 0.5, True),
                (0.0, 0.5, False), (0.0, 0.5, True)],
}

LEFT = ("LShoulder", "LElbow", "LWrist", "LKnee", "LAnkle", "LFoot")
RIGHT = ("RShoulder", "RElbow", "RWrist", "RKnee", "RAnkle", "RFoot")
EGO_VISIBLE = ("LElbow", "LWrist", "RElbow", "RWrist", "LKnee", "RKnee",
               "LAnkle", "RAnkle", "LFoot", "RFoot")

_WORLD_SEED = 20240917


def activity_class(activity_index):
    return ACTIVITY_CLASSES[activity_index % len(ACTIVITY_CLASSES)]


def _channel_of(name):
    if name in LEFT:
        return 0
    if name in RIGHT:
        return 1
    return 2


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1),
                     np.stack([z, c, -s], -1),
                     np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1),
                     np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1),
                     np.stack([s, c, z], -1),
                     np.stack([z, z, o], -1)], -2)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Body:
    """Per-person segment scale; everything else is shared anatomy."""

    scale: float = 1.0
    shoulder_half_width: float = 17.0


def pose_from_latent(latent, body=Body()):
    """Body-frame skeletons ``(T, 17, 3)`` for latent poses ``(T, 5)``.

    The body frame has x forward, y left, z up, and the ground at z = 0.
    """
    latent = np.clip(np.atleast_2d(np.asarray(latent, dtype=np.float64)),
                     -LATENT_BOUND, LATENT_BOUND)
    T = len(latent)
    s = body.scale
    crouch = (latent[:, 0] + 1.0) / 2.0
    arm_l = (latent[:, 1] + 1.0) / 2.0
    arm_r = (latent[:, 2] + 1.0) / 2.0
    stride = latent[:, 3]
    roll = 0.35 * latent[:, 4]
    pitch = 0.5 * crouch

    thigh, shin, foot_len = 45.0 * s, 42.0 * s, 14.0 * s
    phi_l = 0.5 * stride + 0.9 * crouch
    phi_r = -0.5 * stride + 0.9 * crouch
    knee_l = 1.6 * crouch + 0.2 * np.clip(stride, 0, None)
    knee_r = 1.6 * crouch + 0.2 * np.clip(-stride, 0, None)
    drop_l = thigh * np.cos(phi_l) + shin * np.cos(phi_l - knee_l)
    drop_r = thigh * np.cos(phi_r) + shin * np.cos(phi_r - knee_r)
    hip_z = np.maximum(drop_l, drop_r) + 8.0 * s

    J = np.zeros((T, N_JOINTS, 3))
    hip = np.stack([np.zeros(T), np.zeros(T), hip_z], -1)
    torso = _rot_x(roll) @ _rot_y(pitch)

    def on_torso(offset):
        return hip + torso @ np.asarray(offset, dtype=np.float64)

    J[:, JOINT_INDEX["Hip"]] = hip
    J[:, JOINT_INDEX["Spine"]] = on_torso([0, 0, 20 * s])
    J[:, JOINT_INDEX["Thorax"]] = on_torso([0, 0, 40 * s])
    J[:, JOINT_INDEX["Neck"]] = on_torso([0, 0, 52 * s])
    J[:, JOINT_INDEX["Head"]] = on_torso([0, 0, 65 * s])

    for side, raise_, sign in (("L", arm_l, 1.0), ("R", arm_r, -1.0)):
        shoulder = on_torso([0, sign * body.shoulder_half_width * s, 48 * s])
        theta = 2.6 * raise_
        elbow_flex = 0.3 + 0.8 * raise_
        upper = _unit(np.stack([np.sin(theta), np.full(T, sign * 0.2), -np.cos(theta)], -1))
        fore = _unit(np.stack([np.sin(theta + elbow_flex), np.full(T, sign * 0.15),
                               -np.cos(theta + elbow_flex)], -1))
        elbow = shoulder + 28.0 * s * np.einsum("tij,tj->ti", torso, upper)
        wrist = elbow + 25.0 * s * np.einsum("tij,tj->ti", torso, fore)
        J[:, JOINT_INDEX[side + "Shoulder"]] = shoulder
        J[:, JOINT_INDEX[side + "Elbow"]] = elbow
        J[:, JOINT_INDEX[side + "Wrist"]] = wrist

    foot_dir = _unit(np.array([1.0, 0.0, -0.2]))
    for side, phi, knee_bend, sign in (("L", phi_l, knee_l, 1.0), ("R", phi_r, knee_r, -1.0)):
        root = hip + np.array([0.0, sign * 9.0 * s, -5.0 * s])
        knee = root + thigh * np.stack([np.sin(phi), np.zeros(T), -np.cos(phi)], -1)
        ankle = knee + shin * np.stack([np.sin(phi - knee_bend), np.zeros(T),
                                        -np.cos(phi - knee_bend)], -1)
        J[:, JOINT_INDEX[side + "Knee"]] = knee
        J[:, JOINT_INDEX[side + "Ankle"]] = ankle
        J[:, JOINT_INDEX[side + "Foot"]] = ankle + foot_len * foot_dir
    return J


def _blobs(rows, cols, weights, channels, size, sigma):
    """Sum of isotropic Gaussians; ``rows``/``cols``/``weights`` are ``(T, J)``."""
    grid = np.arange(size, dtype=np.float64)
    gr = np.exp(-((grid[None, None, :] - rows[..., None]) ** 2) / (2 * sigma ** 2))
    gc = np.exp(-((grid[None, None, :] - cols[..., None]) ** 2) / (2 * sigma ** 2))
    # (T, J, H, W) separable outer products, weighted then routed to channels.
    img = np.einsum("tjh,tjw,tj,jc->thwc", gr, gc, weights, channels)
    return img


def _channel_matrix(names):
    m = np.zeros((len(names), 3))
    for j, name in enumerate(names):
        m[j, _channel_of(name)] = 1.0
    return m


def render_third(skeletons, view, size=16):
    """Orthographic feature image of body-frame skeletons from a fixed camera."""
    x, y, z = skeletons[..., 0], skeletons[..., 1], skeletons[..., 2]
    if view == "third_front":
        horiz, vert, depth = -y, z, x
    elif view == "third_side":
        horiz, vert, depth = x, z, -y
    elif view == "third_top":
        horiz, vert, depth = -y, x + 100.0, z - 100.0
    else:
        raise ValueError(f"not a third-person view: {view}")
    cols = (size - 1) / 2.0 + horiz / 160.0 * size
    rows = (size - 1) * (1.0 - vert / 200.0)
    weights = np.clip(0.6 + depth / 80.0, 0.2, 1.0)
    sigma = 0.8 * size / 16.0
    return _blobs(rows, cols, weights, _channel_matrix(JOINT_NAMES), size, sigma)


def _world_texture(size=64):
    rng = np.random.default_rng(_WORLD_SEED)
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3.0, mode="wrap")
    return (tex - tex.min()) / (tex.max() - tex.min())


def render_first(skeletons, latent, size=16, texture=None):
    """Head-mounted view: visible limbs in perspective over a scrolling floor."""
    latent = np.clip(latent, -LATENT_BOUND, LATENT_BOUND)
    T = len(skeletons)
    crouch = (latent[:, 0] + 1.0) / 2.0
    roll = 0.35 * latent[:, 4]
    pitch = 0.5 * crouch
    torso = _rot_x(roll) @ _rot_y(pitch)
    down = 0.9
    c_fwd = torso @ np.array([np.cos(down), 0.0, -np.sin(down)])
    c_right = torso @ np.array([0.0, -1.0, 0.0])
    c_up = torso @ np.array([np.sin(down), 0.0, np.cos(down)])

    head = skeletons[:, JOINT_INDEX["Head"]]
    idx = [JOINT_INDEX[n] for n in EGO_VISIBLE]
    rel = skeletons[:, idx] - head[:, None, :]
    depth = np.einsum("tjk,tk->tj", rel, c_fwd)
    right = np.einsum("tjk,tk->tj", rel, c_right)
    up = np.einsum("tjk,tk->tj", rel, c_up)
    visible = depth > 5.0
    safe = np.where(visible, depth, 1.0)
    focal = 0.9
    cols = (size - 1) / 2.0 + focal * right / safe * size / 2.0
    rows = (size - 1) / 2.0 - focal * up / safe * size / 2.0
    weights = np.where(visible, np.clip(60.0 / safe, 0.2, 1.0), 0.0)
    sigma = 0.8 * size / 16.0
    img = _blobs(rows, cols, weights, _channel_matrix(EGO_VISIBLE), size, sigma)

    if texture is None:
        texture = _world_texture()
    hip_z = skeletons[:, JOINT_INDEX["Hip"], 2]
    shift_c = 30.0 * roll
    shift_r = 20.0 * pitch + 0.2 * (100.0 - hip_z)
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    scale = texture.shape[0] / (2.0 * size)
    for t in range(T):
        coords = [(rr + shift_r[t]) * scale, (cc + shift_c[t]) * scale]
        img[t, :, :, 2] += 0.5 * ndimage.map_coordinates(texture, coords, order=1, mode="grid-wrap")
    return img


def latent_trajectory(activity_index, person_index, n_frames, seed):
    """Latent poses ``(n_frames, 5)`` for one take; bounded to ``[-1, 1]``."""
    cls = activity_class(activity_index)
    act = np.random.default_rng([seed, 1, activity_index])
    per = np.random.default_rng([seed, 2, person_index, activity_index])
    t = np.arange(n_frames, dtype=np.float64)
    out = np.empty((n_frames, LATENT_DIM))
    for k, (base, amp, slow) in enumerate(_CLASS_PROFILES[cls]):
        lo, hi = _SLOW_PERIODS if slow else _FAST_PERIODS
        period = act.uniform(lo, hi)
        base_k = base + act.uniform(-0.1, 0.1)
        # A second, slower harmonic keeps takes from being strictly periodic.
        period2 = act.uniform(90.0, 140.0)
        amp_k = amp * per.uniform(0.85, 1.15)
        phase, phase2 = per.uniform(0, 2 * np.pi, size=2)
        out[:, k] = (base_k + per.uniform(-0.05, 0.05)
                     + amp_k * np.sin(2 * np.pi * t / period + phase)
                     + 0.25 * amp_k * np.sin(2 * np.pi * t / period2 + phase2))
    return np.clip(out, -LATENT_BOUND, LATENT_BOUND)


@dataclass
class SyntheticDataset:
    records: list
    streams: dict
    skeletons: dict
    latents: dict
    activity_classes: dict
    splits: dict
    meta: dict = field(default_factory=dict)

    def clip_skeletons(self, record):
        """Ground-truth world skeletons for the frames of ``record``."""
        return self.skeletons[take_of(record)][record.start:record.end]

    def save(self, out_dir):
        """Write manifest, per-view streams, ground truth and run metadata."""
        for sub in ("streams", "gt", "latent"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        write_manifest(os.path.join(out_dir, "manifest.tsv"), self.records)
        for uri, frames in sorted(self.streams.items()):
            artifacts.save_tensor(os.path.join(out_dir, uri), frames)
        for take, seq in sorted(self.skeletons.items()):
            write_sequence(os.path.join(out_dir, "gt", take + ".txt"), seq)
        for take, lat in sorted(self.latents.items()):
            artifacts.save_tensor(os.path.join(out_dir, "latent", take + ".npy"), lat)
        meta = dict(self.meta, activity_classes=self.activity_classes, splits=self.splits,
                    format_version=artifacts.FORMAT_VERSION)
        with open(os.path.join(out_dir, "run.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def take_of(record):
    return f"p{record.person_id}_a{record.activity_id}_s{record.scene_id}"


def generate_synthetic_dataset(n_people, n_activities, n_frames, seed, image_size=16,
                               noise=0.02, test_fraction=0.3,
                               views=("first", "third_front")):
    """Render every (person, activity) take from every requested view.

    Each take is cut into a leading training clip and a trailing held-out
    clip per view; ``splits`` maps ``"train"``/``"test"`` to clip ids.
    """
    if min(n_people, n_activities, n_frames, image_size) < 1:
        raise ValueError("dataset sizes must be positive")
    n_train = int(round(n_frames * (1.0 - test_fraction)))
    segments = [("train", 0, n_train), ("test", n_train, n_frames)]
    segments = [s for s in segments if s[2] > s[1]]
    texture = _world_texture()
    records, streams, skeletons, latents = [], {}, {}, {}
    splits = {"train": [], "test": []}
    scene = "0"
    for p in range(n_people):
        body_rng = np.random.default_rng([seed, 3, p])
        body = Body(scale=body_rng.uniform(0.9, 1.1),
                    shoulder_half_width=body_rng.uniform(15.5, 18.5))
        for a in range(n_activities):
            take = f"p{p}_a{a}_s{scene}"
            lat = latent_trajectory(a, p, n_frames, seed)
            body_pose = pose_from_latent(lat, body)
            place = np.random.default_rng([seed, 4, p, a])
            yaw = place.uniform(-np.pi, np.pi)
            offset = np.append(place.uniform(-200, 200, size=2), 0.0)
            skeletons[take] = body_pose @ _rot_z(np.array(yaw)).T + offset
            latents[take] = lat
            for v_i, view in enumerate(views):
                if view == "first":
                    img = render_first(body_pose, lat, image_size, texture)
                else:
                    img = render_third(body_pose, view, image_size)
                view_rng = np.random.default_rng([seed, 5, p, a, v_i])
                img = img + noise * view_rng.standard_normal(img.shape)
                uri = f"streams/{take}_{view}.npy"
                streams[uri] = img.astype(np.float32)
                for split, start, end in segments:
                    clip_id = f"{take}_{view}_{split}"
                    records.append(ClipRecord(clip_id, view, str(p), str(a), scene,
                                              start, end, uri))
                    splits[split].append(clip_id)
    classes = {str(a): activity_class(a) for a in range(n_activities)}
    meta = {
        "seed": int(seed),
        "n_people": int(n_people),
        "n_activities": int(n_activities),
        "n_frames": int(n_frames),
        "image_size": int(image_size),
        "noise": float(noise),
        "test_fraction": float(test_fraction),
        "views": list(views),
    }
    return SyntheticDataset(records, streams, skeletons, latents, classes, splits, meta)


def load_synthetic_dataset(data_dir):
    """Inverse of :meth:`SyntheticDataset.save`."""
    from .data import load_manifest
    from .exceptions import MissingArtifact, VersionMismatch
    from .skeleton import read_sequence

    meta_path = os.path.join(data_dir, "run.json")
    if not os.path.exists(meta_path):
        raise MissingArtifact(f"no dataset metadata at {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    if meta.get("format_version") != artifacts.FORMAT_VERSION:
        raise VersionMismatch(
            f"dataset format {meta.get('format_version')} != {artifacts.FORMAT_VERSION}"
        )
    records = load_manifest(os.path.join(data_dir, "manifest.tsv"))
    streams = {uri: artifacts.load_tensor(os.path.join(data_dir, uri))
               for uri in sorted({r.source_uri for r in records})}
    takes = sorted({take_of(r) for r in records})
    skeletons = {t: read_sequence(os.path.join(data_dir, "gt", t + ".txt")) for t in takes}
    latents = {t: artifacts.load_tensor(os.path.join(data_dir, "latent", t + ".npy"))
               for t in takes}
    classes = meta.pop("activity_classes")
    splits = meta.pop("splits")
    meta.pop("format_version")
    return SyntheticDataset(records, streams, skeletons, latents, classes, splits, meta)
