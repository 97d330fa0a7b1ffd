import os

# keep BLAS single-threaded: the acceptance runtime criteria are single-thread
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from suitcap.geometry import Camera, CameraRig, rot_to_quat

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def look_at_camera(cam_id, position, target, focal=2400.0, image_size=(4000, 2160), dist=None):
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    z = target - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0, image_size[0] / 2], [0, focal, image_size[1] / 2], [0, 0, 1.0]])
    return Camera(
        id=cam_id,
        intrinsics=K,
        distortion=np.zeros(5) if dist is None else np.asarray(dist, dtype=float),
        rotation=rot_to_quat(R),
        translation=-R @ position,
        image_size=image_size,
    )


def ring_rig(n_cameras=4, radius=3000.0, height=1000.0, center=(0, 0, 1000.0), dist=None):
    cams = []
    for i in range(n_cameras):
        phi = 2 * np.pi * i / n_cameras
        pos = (radius * np.cos(phi), radius * np.sin(phi), height)
        cams.append(look_at_camera(i, pos, center, dist=dist))
    return CameraRig(cams)


@pytest.fixture
def rig4():
    return ring_rig(4)


@pytest.fixture
def rig16():
    return ring_rig(16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
