"""Shared builders for the test suite."""

import numpy as np
from scipy.spatial.transform import Rotation

from fluoronav.geometry import Intrinsics, RigidTransform


def random_rotation(rng, max_angle=None):
    if max_angle is None:
        return Rotation.random(random_state=rng).as_matrix()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def random_transform(rng, max_angle=None, max_t=100.0):
    return RigidTransform(random_rotation(rng, max_angle), rng.uniform(-max_t, max_t, 3))


def camera_facing(rng, depth=700.0, max_angle=0.3, jitter=20.0):
    """Extrinsic that puts the patient origin about ``depth`` mm in front of the source."""
    r = random_rotation(rng, max_angle)
    return RigidTransform(r, np.array([0.0, 0.0, depth]) + rng.uniform(-jitter, jitter, 3))


def small_intrinsics(sid=1000.0, spacing=1.0, size=101):
    return Intrinsics(sid, spacing, spacing, size, size)


# criterion number -> (verdict line), filled by the acceptance suite and printed at the end
ACCEPTANCE = {}


def report(n, title, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok
