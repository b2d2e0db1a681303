import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from egosync.synthetic import Body, pose_from_latent

torch.set_num_threads(1)

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(2**32)).as_matrix()


def random_pose(rng, n=None):
    """Anatomically plausible skeletons from random latent poses."""
    poses = pose_from_latent(rng.uniform(-1, 1, size=(1 if n is None else n, 5)), Body())
    return poses[0] if n is None else poses


def rigid(s, rot, shift, scale=1.0):
    return scale * (np.asarray(s) @ rot.T) + shift


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def canonical_skeleton():
    """Hand-built skeleton already in the canonical frame (hip at origin, 30 cm shoulders)."""
    s = np.zeros((17, 3))
    coords = {
        "Hip": (0, 0, 0), "Spine": (0, 0, 25), "Thorax": (0, 0, 50), "Neck": (0, 0, 58),
        "Head": (2, 0, 70), "LShoulder": (0, 15, 50), "LElbow": (5, 20, 25),
        "LWrist": (15, 20, 5), "RShoulder": (0, -15, 50), "RElbow": (0, -20, 25),
        "RWrist": (0, -22, 0), "LKnee": (5, 10, -45), "LAnkle": (0, 10, -88),
        "LFoot": (12, 10, -92), "RKnee": (0, -10, -45), "RAnkle": (-3, -10, -88),
        "RFoot": (9, -10, -92),
    }
    from egosync.skeleton import JOINT_INDEX

    for name, xyz in coords.items():
        s[JOINT_INDEX[name]] = xyz
    return s
