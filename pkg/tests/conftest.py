from __future__ import annotations

import numpy as np
import pytest

from drrreg.geometry import EulerPose, Frame, Intrinsics
from drrreg.phantoms import make_phantom
from drrreg.renderer import make_rays, render_trilinear


@pytest.fixture(scope="session")
def sphere_in_box():
    return make_phantom("sphere_in_box")


@pytest.fixture(scope="session")
def smooth():
    return make_phantom("smooth")


@pytest.fixture(scope="session")
def det256():
    return Intrinsics(1000.0, 256, 256, (1.2, 1.2), (0.0, 0.0))


@pytest.fixture(scope="session")
def det64():
    return Intrinsics(1000.0, 64, 64, (4.8, 4.8), (0.0, 0.0))


@pytest.fixture(scope="session")
def gt_pose():
    return EulerPose(15.0, -10.0, 5.0, 3.0, -700.0, -4.0)


@pytest.fixture(scope="session")
def carm():
    return Frame.carm((0.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def target64(sphere_in_box, det64, gt_pose, carm):
    v = sphere_in_box[0]
    return render_trilinear(v, make_rays(det64, carm.to_world(gt_pose)))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
