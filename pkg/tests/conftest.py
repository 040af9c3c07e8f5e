import numpy as np
import pytest

# verdict lines collected by the acceptance tests, one per criterion
acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)

from evmocap.body import (default_intrinsics, default_mesh, default_skeleton,
                          SkeletonPose)


@pytest.fixture(scope="session")
def model():
    return default_skeleton()


@pytest.fixture(scope="session")
def mesh(model):
    return default_mesh(model)


@pytest.fixture(scope="session")
def intrinsics():
    return default_intrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def random_pose(model, rng, scale=0.15):
    """A pose safely inside the joint limits, standing ~2.8 m from camera."""
    lo, hi = model.angle_lower, model.angle_upper
    mid = 0.5 * (lo + hi)
    span = 0.5 * (hi - lo)
    theta = mid + scale * span * rng.uniform(-1, 1, size=len(lo))
    root_rot = 0.1 * rng.standard_normal(3)
    root_t = np.array([0, 0, 2.8]) + 0.05 * rng.standard_normal(3)
    return np.concatenate([theta, root_rot, root_t])


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A short end-to-end dataset shared by the slower integration tests."""
    from evmocap.synth import synthesize_dataset
    out = tmp_path_factory.mktemp("tiny_ds")
    synthesize_dataset(out, seed=3, duration_s=0.2)
    return out
