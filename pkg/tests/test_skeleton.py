import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from egosync.exceptions import DegenerateSkeleton, EmptySequence, LengthMismatch, ParseError
from egosync.skeleton import (ALL, JOINT_INDEX, JOINT_NAMES, LOWER, N_JOINTS, TABLE_COLUMNS,
                              UPPER, SkeletonAligner, align, canonicalize, error_table,
                              joint_error, normalize_scale, read_sequence, sequence_error,
                              shoulder_width, write_sequence)

from conftest import random_pose, random_rotation, rigid


def test_joint_table():
    assert N_JOINTS == 17
    assert len(set(JOINT_NAMES)) == 17
    assert set(UPPER.members).isdisjoint(LOWER.members)
    assert set(UPPER.members) | set(LOWER.members) == set(ALL.members)
    # every published table column maps onto named joints
    assert {j for js in TABLE_COLUMNS.values() for j in js} == set(JOINT_NAMES)


def test_canonical_fixture_is_fixed_point(canonical_skeleton):
    np.testing.assert_allclose(canonicalize(canonical_skeleton), canonical_skeleton, atol=1e-12)


def test_rotated_translated_skeleton_returns_to_canonical(canonical_skeleton):
    rot_z90 = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    moved = canonical_skeleton @ rot_z90.T + np.array([10.0, 20.0, 30.0])
    assert np.abs(canonicalize(moved) - canonical_skeleton).max() < 1e-6


def test_canonical_axes_semantics(rng):
    s = canonicalize(rigid(random_pose(rng), random_rotation(rng), rng.normal(size=3) * 50))
    assert np.allclose(s[JOINT_INDEX["Hip"]], 0)
    shoulder = s[JOINT_INDEX["LShoulder"]] - s[JOINT_INDEX["RShoulder"]]
    assert abs(shoulder[0]) < 1e-9  # parallel to the yz plane
    assert shoulder[1] > 0  # left is +y
    thorax = s[JOINT_INDEX["Thorax"]]
    assert np.allclose(thorax[:2], 0, atol=1e-9) and thorax[2] > 0


def test_coincident_shoulders_raise(canonical_skeleton):
    s = canonical_skeleton.copy()
    s[JOINT_INDEX["RShoulder"]] = s[JOINT_INDEX["LShoulder"]]
    with pytest.raises(DegenerateSkeleton):
        canonicalize(s)
    with pytest.raises(DegenerateSkeleton):
        normalize_scale(s)


def test_collapsed_spine_raises(canonical_skeleton):
    s = canonical_skeleton.copy()
    s[JOINT_INDEX["Thorax"]] = s[JOINT_INDEX["Hip"]]
    with pytest.raises(DegenerateSkeleton):
        canonicalize(s)


def test_normalize_scale_examples(canonical_skeleton):
    assert shoulder_width(canonical_skeleton) == pytest.approx(30.0)
    np.testing.assert_allclose(normalize_scale(canonical_skeleton), canonical_skeleton)
    doubled = canonical_skeleton * 2.0 + np.array([1.0, 2.0, 3.0])
    hip = doubled[JOINT_INDEX["Hip"]]
    out = normalize_scale(doubled)
    np.testing.assert_allclose(out - hip, 0.5 * (doubled - hip), atol=1e-12)
    assert shoulder_width(out) == pytest.approx(30.0)


def test_wrist_displaced_along_spine(canonical_skeleton):
    pred = canonical_skeleton.copy()
    pred[JOINT_INDEX["LWrist"], 2] += 5.0
    res = joint_error(pred, canonical_skeleton)
    expected = np.zeros(17)
    expected[JOINT_INDEX["LWrist"]] = 5.0
    np.testing.assert_allclose(res.per_joint, expected, atol=1e-6)
    assert res.mean == pytest.approx(5.0 / 17)


def test_joint_error_identity_and_symmetry(rng):
    a, b = random_pose(rng), random_pose(rng)
    assert joint_error(a, a).mean == 0.0
    assert joint_error(a, b).mean == pytest.approx(joint_error(b, a).mean, abs=1e-12)


def test_group_means(canonical_skeleton):
    pred = canonical_skeleton.copy()
    pred[JOINT_INDEX["LKnee"], 2] += 7.0
    assert joint_error(pred, canonical_skeleton, UPPER).mean == 0.0
    assert joint_error(pred, canonical_skeleton, LOWER).mean == pytest.approx(1.0)


def test_sequence_error_hand_computed(canonical_skeleton):
    gt = np.stack([canonical_skeleton, canonical_skeleton])
    pred = gt.copy()
    pred[0, JOINT_INDEX["LWrist"], 2] += 2.0 * 17
    pred[1, JOINT_INDEX["LWrist"], 2] += 4.0 * 17
    # per-frame means 2.0 and 4.0
    assert sequence_error(pred, gt) == pytest.approx(3.0)
    assert sequence_error(pred[:1], gt[:1]) == pytest.approx(joint_error(pred[0], gt[0]).mean)


def test_sequence_error_errors(canonical_skeleton):
    with pytest.raises(EmptySequence):
        sequence_error(np.empty((0, 17, 3)), np.empty((0, 17, 3)))
    with pytest.raises(LengthMismatch):
        sequence_error(canonical_skeleton[None], np.stack([canonical_skeleton] * 2))


def test_error_table_layout(canonical_skeleton):
    pred = canonical_skeleton.copy()
    pred[JOINT_INDEX["LWrist"], 2] += 6.0
    row = error_table(pred[None], canonical_skeleton[None])
    assert list(row)[-3:] == ["UppBody", "LowBody", "Avg"]
    assert row["Wrists"] == pytest.approx(3.0)
    assert row["UppBody"] == pytest.approx(0.6)
    assert row["LowBody"] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 5.0))
def test_metric_invariance_property(seed, scale):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    moved = rigid(a, random_rotation(rng), rng.normal(size=3) * 100, scale)
    assert abs(joint_error(moved, b).mean - joint_error(a, b).mean) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_canonicalize_idempotent_and_rigid(seed):
    rng = np.random.default_rng(seed)
    s = rigid(random_pose(rng), random_rotation(rng), rng.normal(size=3) * 100)
    c = canonicalize(s)
    np.testing.assert_allclose(canonicalize(c), c, atol=1e-9)
    np.testing.assert_allclose(pdist(c), pdist(s), rtol=1e-9)
    n = normalize_scale(s)
    np.testing.assert_allclose(normalize_scale(n), n, atol=1e-9)


def test_aligner_transformer(rng):
    seq = random_pose(rng, 4)
    out = SkeletonAligner().fit_transform(seq.reshape(4, -1))
    assert out.shape == (4, 51)
    np.testing.assert_allclose(out[1].reshape(17, 3), align(seq[1]))
    assert SkeletonAligner().get_params() == {"ref_shoulder": 30.0}


def test_sequence_file_round_trip_is_bit_exact(tmp_path, rng):
    seq = random_pose(rng, 5) + rng.normal(size=(5, 17, 3)) * 1e-7
    path = tmp_path / "seq.txt"
    write_sequence(path, seq)
    back = read_sequence(path)
    assert back.tobytes() == seq.astype(np.float64).tobytes()
    header = path.read_text().splitlines()[0]
    assert header.startswith("# Hip.x Hip.y Hip.z Spine.x")


def test_sequence_file_parse_errors(tmp_path, rng):
    path = tmp_path / "bad.txt"
    write_sequence(path, random_pose(rng, 2))
    lines = path.read_text().splitlines()
    lines[2] = " ".join(lines[2].split()[:50])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        read_sequence(path)
    assert exc.value.lineno == 3
    (tmp_path / "nohdr.txt").write_text("1 2 3\n")
    with pytest.raises(ParseError):
        read_sequence(tmp_path / "nohdr.txt")
