import json

import numpy as np
import pytest

from egosync.data import load_manifest, mine_positive_pairs
from egosync.exceptions import MissingArtifact, VersionMismatch
from egosync.skeleton import JOINT_INDEX, shoulder_width
from egosync.synthetic import (ACTIVITY_CLASSES, LATENT_BOUND, Body, generate_synthetic_dataset,
                               latent_trajectory, load_synthetic_dataset, pose_from_latent,
                               _world_texture, render_first, render_third,
                               take_of)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_dataset(2, 2, 60, seed=7)


def test_same_seed_is_bit_identical(small):
    again = generate_synthetic_dataset(2, 2, 60, seed=7)
    assert again.records == small.records
    for uri in small.streams:
        assert again.streams[uri].tobytes() == small.streams[uri].tobytes()
    for take in small.skeletons:
        assert again.skeletons[take].tobytes() == small.skeletons[take].tobytes()
    other = generate_synthetic_dataset(2, 2, 60, seed=8)
    assert not np.array_equal(other.latents["p0_a0_s0"], small.latents["p0_a0_s0"])


def test_layout(small):
    # 2 people x 2 activities x 2 views x 2 splits
    assert len(small.records) == 16
    assert len(mine_positive_pairs(small.records)) == 8
    frames = next(iter(small.streams.values()))
    assert frames.shape == (60, 16, 16, 3) and frames.dtype == np.float32
    assert small.activity_classes == {"0": "whole_body", "1": "vertical_movement"}
    train = [r for r in small.records if r.clip_id.endswith("_train")]
    assert {(r.start, r.end) for r in train} == {(0, 42)}


def test_latents_bounded_and_classes_cycle():
    lat = latent_trajectory(5, 1, 300, seed=0)
    assert lat.shape == (300, 5)
    assert np.abs(lat).max() <= LATENT_BOUND
    assert len(ACTIVITY_CLASSES) == 4


def test_zero_noise_streams_are_functions_of_the_latent():
    ds = generate_synthetic_dataset(1, 1, 30, seed=3, noise=0.0)
    lat = ds.latents["p0_a0_s0"]
    body_rng = np.random.default_rng([3, 3, 0])
    body = Body(scale=body_rng.uniform(0.9, 1.1), shoulder_half_width=body_rng.uniform(15.5, 18.5))
    pose = pose_from_latent(lat, body)
    np.testing.assert_array_equal(ds.streams["streams/p0_a0_s0_third_front.npy"],
                                  render_third(pose, "third_front").astype(np.float32))
    first = ds.streams["streams/p0_a0_s0_first.npy"]
    np.testing.assert_array_equal(
        first, render_first(pose, lat, 16, _world_texture()).astype(np.float32))
    # first and third views differ even though they share the trajectory
    assert not np.allclose(first, ds.streams["streams/p0_a0_s0_third_front.npy"])


def test_shifted_trajectory_mismatches_every_frame():
    lat = latent_trajectory(0, 0, 400, seed=0)
    shifted = np.linalg.norm(lat[25:] - lat[:-25], axis=1)
    assert shifted.min() > 0
    assert np.linalg.norm(lat - lat, axis=1).max() == 0


def test_ground_truth_is_articulated(small):
    skel = small.skeletons["p1_a1_s0"]
    widths = [shoulder_width(s) for s in skel]
    assert np.ptp(widths) < 1e-9  # rigid shoulder girdle
    feet = skel[:, [JOINT_INDEX["LFoot"], JOINT_INDEX["RFoot"]], 2]
    assert feet.min() > -1e-9


def test_save_load_round_trip(tmp_path, small):
    small.save(tmp_path)
    back = load_synthetic_dataset(tmp_path)
    assert back.records == small.records == load_manifest(tmp_path / "manifest.tsv")
    assert back.splits == small.splits and back.meta == small.meta
    for take, seq in small.skeletons.items():
        assert back.skeletons[take].tobytes() == seq.tobytes()
    for uri, frames in small.streams.items():
        assert back.streams[uri].tobytes() == frames.tobytes()
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["seed"] == 7 and meta["n_frames"] == 60 and meta["format_version"] == 1


def test_load_errors(tmp_path, small):
    with pytest.raises(MissingArtifact):
        load_synthetic_dataset(tmp_path / "nothing")
    small.save(tmp_path)
    meta = json.loads((tmp_path / "run.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "run.json").write_text(json.dumps(meta))
    with pytest.raises(VersionMismatch):
        load_synthetic_dataset(tmp_path)


def test_take_naming(small):
    r = small.records[0]
    assert take_of(r) == f"p{r.person_id}_a{r.activity_id}_s{r.scene_id}"
