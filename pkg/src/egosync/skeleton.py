"""17-joint skeletons: canonical alignment, scale normalization and errors.

A skeleton is a float array of shape ``(17, 3)`` in centimeters, indexed by
:data:`JOINT_NAMES`. Sequences are ``(T, 17, 3)``. The canonical body frame
puts the hip at the origin with

* x along the wearer's facing direction,
* y toward the wearer's left,
* z along the spine (hip toward thorax),

so the shoulder segment always lies in the yz plane.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DegenerateSkeleton, EmptySequence, LengthMismatch, ParseError

JOINT_NAMES = (
    "Hip",
    "Spine",
    "Thorax",
    "Neck",
    "Head",
    "LShoulder",
    "LElbow",
    "LWrist",
    "RShoulder",
    "RElbow",
    "RWrist",
    "LKnee",
    "LAnkle",
    "LFoot",
    "RKnee",
    "RAnkle",
    "RFoot",
)
N_JOINTS = len(JOINT_NAMES)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

HIP = JOINT_INDEX["Hip"]
THORAX = JOINT_INDEX["Thorax"]
L_SHOULDER = JOINT_INDEX["LShoulder"]
R_SHOULDER = JOINT_INDEX["RShoulder"]

REFERENCE_SHOULDER_CM = 30.0
# Segments shorter than this are treated as collapsed.
LENGTH_TOL_CM = 1e-3

# Report columns in the published table layout; left/right pairs are pooled.
TABLE_COLUMNS = {
    "Hip": ("Hip",),
    "Spine": ("Spine",),
    "Neck": ("Neck",),
    "Head": ("Head",),
    "Shoulders": ("LShoulder", "RShoulder"),
    "Elbows": ("LElbow", "RElbow"),
    "Wrists": ("LWrist", "RWrist"),
    "Thorax": ("Thorax",),
    "Knees": ("LKnee", "RKnee"),
    "Ankle": ("LAnkle", "RAnkle"),
    "Feet": ("LFoot", "RFoot"),
}


@dataclass(frozen=True)
class JointGroup:
    name: str
    members: tuple

    def __post_init__(self):
        bad = [m for m in self.members if not 0 <= m < N_JOINTS]
        if bad:
            raise ValueError(f"joint indices out of range: {bad}")


def _group(name, joint_names):
    return JointGroup(name, tuple(JOINT_INDEX[j] for j in joint_names))


UPPER = _group(
    "upper",
    ("Spine", "Thorax", "Neck", "Head", "LShoulder", "RShoulder",
     "LElbow", "RElbow", "LWrist", "RWrist"),
)
LOWER = _group(
    "lower",
    ("Hip", "LKnee", "RKnee", "LAnkle", "RAnkle", "LFoot", "RFoot"),
)
ALL = JointGroup("all", tuple(range(N_JOINTS)))
GROUPS = {g.name: g for g in (UPPER, LOWER, ALL)}


def check_skeleton(s):
    """Validate one skeleton and return it as a float64 ``(17, 3)`` array."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape == (3 * N_JOINTS,):
        s = s.reshape(N_JOINTS, 3)
    if s.shape != (N_JOINTS, 3):
        raise ValueError(f"expected a ({N_JOINTS}, 3) skeleton, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("skeleton has non-finite coordinates")
    return s


def check_sequence(seq):
    """Validate a skeleton sequence and return a float64 ``(T, 17, 3)`` array."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2 and seq.shape[1] == 3 * N_JOINTS:
        seq = seq.reshape(len(seq), N_JOINTS, 3)
    if seq.ndim != 3 or seq.shape[1:] != (N_JOINTS, 3):
        raise ValueError(f"expected a (T, {N_JOINTS}, 3) sequence, got shape {seq.shape}")
    if not np.all(np.isfinite(seq)):
        raise ValueError("sequence has non-finite coordinates")
    return seq


def shoulder_width(s):
    s = check_skeleton(s)
    return float(np.linalg.norm(s[L_SHOULDER] - s[R_SHOULDER]))


def body_frame(s):
    """Rotation whose rows are the canonical x, y, z axes in input coordinates."""
    s = check_skeleton(s)
    shoulder = s[L_SHOULDER] - s[R_SHOULDER]
    spine = s[THORAX] - s[HIP]
    if np.linalg.norm(shoulder) < LENGTH_TOL_CM:
        raise DegenerateSkeleton("shoulder segment is collapsed")
    if np.linalg.norm(spine) < LENGTH_TOL_CM:
        raise DegenerateSkeleton("spine segment is collapsed")
    up = spine / np.linalg.norm(spine)
    # left x up = forward; already orthogonal to the spine.
    facing = np.cross(shoulder, up)
    n = np.linalg.norm(facing)
    if n < LENGTH_TOL_CM:
        raise DegenerateSkeleton("shoulder segment is parallel to the spine")
    facing /= n
    left = np.cross(up, facing)
    return np.stack([facing, left, up])


def canonicalize(s):
    """Rigidly move ``s`` into the canonical body frame (hip at origin)."""
    s = check_skeleton(s)
    rot = body_frame(s)
    return (s - s[HIP]) @ rot.T


def normalize_scale(s, ref_shoulder=REFERENCE_SHOULDER_CM):
    """Scale uniformly about the hip so the shoulder width is ``ref_shoulder``."""
    s = check_skeleton(s)
    width = shoulder_width(s)
    if width < LENGTH_TOL_CM:
        raise DegenerateSkeleton(f"shoulder width {width:g} cm is below tolerance")
    hip = s[HIP]
    return hip + (s - hip) * (ref_shoulder / width)


def align(s, ref_shoulder=REFERENCE_SHOULDER_CM):
    """Canonicalize then scale-normalize; the form every error is measured in."""
    return normalize_scale(canonicalize(s), ref_shoulder)


def align_sequence(seq, ref_shoulder=REFERENCE_SHOULDER_CM):
    seq = check_sequence(seq)
    return np.stack([align(s, ref_shoulder) for s in seq]) if len(seq) else seq


class JointError(NamedTuple):
    per_joint: np.ndarray
    mean: float


def joint_error(pred, gt, group=ALL):
    """Per-joint Euclidean error (cm) after aligning both skeletons.

    ``mean`` averages the joints in ``group``; ``per_joint`` covers all 17.
    """
    per_joint = np.linalg.norm(align(pred) - align(gt), axis=1)
    return JointError(per_joint, float(per_joint[list(group.members)].mean()))


def sequence_error(preds, gts, group=ALL):
    """Mean over frames of the per-frame group error."""
    preds = check_sequence(preds)
    gts = check_sequence(gts)
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predicted frames vs {len(gts)} ground-truth frames")
    if len(preds) == 0:
        raise EmptySequence("cannot score an empty sequence")
    return float(np.mean([joint_error(p, g, group).mean for p, g in zip(preds, gts)]))


def error_table(preds, gts):
    """Per-column errors in the published table layout plus group averages."""
    preds = check_sequence(preds)
    gts = check_sequence(gts)
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predicted frames vs {len(gts)} ground-truth frames")
    if len(preds) == 0:
        raise EmptySequence("cannot score an empty sequence")
    per_joint = np.stack([joint_error(p, g).per_joint for p, g in zip(preds, gts)])
    per_joint = per_joint.mean(axis=0)
    row = {
        col: float(np.mean([per_joint[JOINT_INDEX[j]] for j in joints]))
        for col, joints in TABLE_COLUMNS.items()
    }
    row["UppBody"] = float(per_joint[list(UPPER.members)].mean())
    row["LowBody"] = float(per_joint[list(LOWER.members)].mean())
    row["Avg"] = float(per_joint.mean())
    return row


class SkeletonAligner(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping flat ``(n, 51)`` skeleton rows to aligned rows."""

    def __init__(self, ref_shoulder=REFERENCE_SHOULDER_CM):
        self.ref_shoulder = ref_shoulder

    def fit(self, X, y=None):
        check_sequence(X)
        return self

    def transform(self, X):
        seq = align_sequence(X, self.ref_shoulder)
        return seq.reshape(len(seq), -1)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


def _header():
    return "# " + " ".join(f"{name}.{ax}" for name in JOINT_NAMES for ax in "xyz")


def write_sequence(path, seq):
    """Write one frame per line, 51 values, after a joint-order header.

    ``%.17g`` round-trips every float64 exactly.
    """
    seq = check_sequence(seq)
    with open(path, "w") as f:
        f.write(_header() + "\n")
        for frame in seq.reshape(len(seq), -1):
            f.write(" ".join("%.17g" % v for v in frame) + "\n")


def read_sequence(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != _header():
        raise ParseError("missing or unexpected joint-order header", 1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3 * N_JOINTS:
            raise ParseError(f"expected {3 * N_JOINTS} values, found {len(fields)}", lineno)
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), N_JOINTS, 3)
