import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluoronav.errors import DepthNonPositive, IntrinsicsMismatch
from fluoronav.geometry import (
    Intrinsics,
    PoseParams,
    RigidTransform,
    apply,
    build_projection,
    compose,
    decompose_projection,
    downsample_intrinsics,
    intrinsics_matrix,
    invert,
    pose_to_transform,
    project,
    project_points,
    rot_z,
    rotation_angle,
    rotation_distance,
    transform_to_pose,
    translation,
)

from _support import random_transform, small_intrinsics

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def assert_transform_close(a, b, tol):
    assert np.allclose(a.rotation, b.rotation, atol=tol)
    assert np.allclose(a.translation, b.translation, atol=tol)


# -- transforms ----------------------------------------------------------------------------


def test_compose_identity_and_inverse():
    t = random_transform(np.random.default_rng(1))
    assert_transform_close(compose(RigidTransform.identity(), t), t, 0)
    assert_transform_close(compose(t, invert(t)), RigidTransform.identity(), 1e-12)


def test_compose_quarter_turns_matches_matrix_product():
    q = RigidTransform(rot_z(np.pi / 2))
    half = compose(q, q)
    assert np.allclose(half.rotation, rot_z(np.pi / 2) @ rot_z(np.pi / 2), atol=1e-15)
    assert np.allclose(half.rotation, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_compose_applies_right_operand_first():
    a = RigidTransform(rot_z(np.pi / 2))
    b = translation(1.0, 0.0, 0.0)
    # b first: (0,0,0) -> (1,0,0), then rotate -> (0,1,0)
    assert np.allclose(apply(compose(a, b), [0.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_invert_examples():
    assert_transform_close(invert(RigidTransform.identity()), RigidTransform.identity(), 0)
    assert np.array_equal(invert(translation(1, 2, 3)).translation, [-1.0, -2.0, -3.0])


def test_apply_examples():
    assert np.array_equal(apply(RigidTransform.identity(), [5, 5, 5]), [5.0, 5.0, 5.0])
    assert np.array_equal(apply(translation(1, 2, 3), [0, 0, 0]), [1.0, 2.0, 3.0])
    assert np.allclose(apply(RigidTransform(rot_z(np.pi / 2)), [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_rigid_transform_rejects_improper_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.01)


@given(seeds)
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_transform(rng) for _ in range(3))
    assert_transform_close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-12)
    assert_transform_close(compose(invert(a), a), RigidTransform.identity(), 1e-12)
    assert_transform_close(compose(a, invert(a)), RigidTransform.identity(), 1e-12)


def test_long_compose_chain_stays_orthonormal():
    rng = np.random.default_rng(5)
    t = RigidTransform.identity()
    for _ in range(10_000):
        t = compose(t, random_transform(rng, max_t=1.0))
    r = t.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_rotation_angle_precise_near_zero_and_pi():
    assert rotation_angle(rot_z(1e-9)) == pytest.approx(1e-9, rel=1e-6)
    assert rotation_angle(rot_z(np.pi - 1e-9)) == pytest.approx(np.pi - 1e-9, abs=1e-12)
    a = random_transform(np.random.default_rng(2))
    assert rotation_distance(a, a) == 0.0


# -- intrinsics and projection -------------------------------------------------------------------


def test_intrinsics_matrix_examples():
    k = Intrinsics(1000.0, 1.0, 1.0, 1017, 1017, (508.0, 508.0))
    m = intrinsics_matrix(k)
    assert m[0, 0] == 1000.0 and m[0, 2] == 508.0
    k = Intrinsics(1100.0, 0.29, 0.29, 1017, 1017)
    assert intrinsics_matrix(k)[0, 0] == pytest.approx(1100.0 / 0.29, rel=1e-15)
    assert k.principal_point == (508.0, 508.0)
    assert intrinsics_matrix(Intrinsics(1200.0, 0.5, 0.5, 10, 10))[1, 1] == 2400.0


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1000.0, -1.0, 1.0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1000.0, 1.0, 1.0, 0, 10)


def test_project_principal_ray_and_similar_triangles():
    k = Intrinsics(1000.0, 1.0, 1.0, 1017, 1017, (508.0, 508.0))
    p = build_projection(k, RigidTransform.identity())
    assert np.allclose(project(p, [0.0, 0.0, 300.0]), [508.0, 508.0], atol=1e-12)
    f = k.focal_u
    uv = project(p, [1.0, 0.0, k.sid])
    assert uv[0] - 508.0 == pytest.approx(f * 1.0 / k.sid, rel=1e-12)


def test_project_rejects_points_at_or_behind_source():
    p = build_projection(small_intrinsics(), RigidTransform.identity())
    with pytest.raises(DepthNonPositive):
        project(p, [1.0, 1.0, 0.0])
    with pytest.raises(DepthNonPositive):
        project_points(small_intrinsics(), RigidTransform.identity(), [[0.0, 0.0, -5.0]])


def test_projection_matrix_normalisation_and_rank():
    rng = np.random.default_rng(3)
    k = small_intrinsics()
    p = build_projection(k, random_transform(rng, max_angle=0.5))
    assert np.linalg.norm(p.m[2, :3]) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.matrix_rank(p.m) == 3


def test_identity_extrinsic_gives_normalised_k():
    k = small_intrinsics()
    p = build_projection(k, RigidTransform.identity())
    assert np.allclose(p.m[:, :3], intrinsics_matrix(k), atol=1e-12)
    assert np.allclose(p.m[:, 3], 0.0)


def test_half_turn_about_z_gives_distinct_matrix():
    k = small_intrinsics()
    e = translation(0.0, 0.0, 500.0)
    e2 = compose(RigidTransform(rot_z(np.pi)), e)
    assert not np.allclose(build_projection(k, e).m, build_projection(k, e2).m)


@given(seeds)
@settings(max_examples=50)
def test_projection_consistency(seed):
    rng = np.random.default_rng(seed)
    k = Intrinsics(rng.uniform(800, 1300), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), 500, 400,
                   (rng.uniform(100, 400), rng.uniform(100, 300)))
    e = random_transform(rng, max_angle=0.5, max_t=30.0)
    e = RigidTransform(e.rotation, e.translation + [0, 0, 700])
    x = rng.uniform(-50, 50, (20, 3))
    a = project(build_projection(k, e), x)
    xs = apply(e, x)
    kk = intrinsics_matrix(k)
    h = xs @ kk.T
    assert np.abs(a - h[:, :2] / h[:, 2:]).max() < 1e-10
    assert np.abs(a - project_points(k, e, x)).max() < 1e-10


@given(seeds)
@settings(max_examples=50)
def test_decompose_round_trip(seed):
    rng = np.random.default_rng(seed)
    k = Intrinsics(1100.0, 0.29, 0.29, 1017, 1017)
    e = random_transform(rng)
    d = decompose_projection(build_projection(k, e), k)
    assert rotation_distance(d, e) < 1e-9
    assert np.linalg.norm(d.translation - e.translation) < 1e-9


def test_decompose_identity_and_wrong_focal():
    k = small_intrinsics()
    d = decompose_projection(build_projection(k, RigidTransform.identity()), k)
    assert_transform_close(d, RigidTransform.identity(), 1e-12)
    wrong = Intrinsics(k.sid * 1.1, 1.0, 1.0, k.image_width, k.image_height)
    with pytest.raises(IntrinsicsMismatch):
        decompose_projection(build_projection(wrong, translation(0, 0, 500)), k)


def test_downsample_intrinsics_matches_block_centres():
    k = Intrinsics(1100.0, 0.29, 0.29, 1017, 1017)
    c = downsample_intrinsics(k, 8)
    assert (c.image_width, c.image_height) == (127, 127)
    assert c.pixel_spacing_u == pytest.approx(0.29 * 8)
    # a world point projects onto the same physical detector spot at both levels
    e = translation(3.0, -2.0, 700.0)
    x = np.array([[10.0, 20.0, 0.0]])
    fine = project_points(k, e, x)[0]
    coarse = project_points(c, e, x)[0]
    assert np.allclose(coarse * 8 + 3.5, fine, atol=1e-9)
    assert downsample_intrinsics(k, 1) is k


# -- pose parameters -------------------------------------------------------------------------------


def test_pose_params_examples():
    z = pose_to_transform(PoseParams(np.zeros(3), np.zeros(3)))
    assert_transform_close(z, RigidTransform.identity(), 0)
    q = pose_to_transform(PoseParams([0.0, 0.0, np.pi / 2], np.zeros(3)))
    assert np.allclose(q.rotation, rot_z(np.pi / 2), atol=1e-15)


def test_pose_rotates_about_center():
    c = np.array([10.0, -5.0, 3.0])
    q = PoseParams([0.1, -0.2, 0.3], [1.0, 2.0, 3.0], c)
    t = pose_to_transform(q)
    v = np.array([2.0, 1.0, -1.0])
    assert np.allclose(apply(t, c + v), c + t.rotation @ v + q.translation, atol=1e-12)


def test_pose_round_trip_100_random():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        rv = rng.normal(size=3)
        rv *= rng.uniform(0, np.pi * 0.99) / np.linalg.norm(rv)
        q = PoseParams(rv, rng.uniform(-50, 50, 3), rng.uniform(-20, 20, 3))
        back = transform_to_pose(pose_to_transform(q), q.center)
        worst = max(worst, np.abs(back.as_vector() - q.as_vector()).max())
    assert worst < 1e-12


def test_pose_parameterisation_has_full_rank_jacobian():
    rng = np.random.default_rng(6)
    for _ in range(10):
        x0 = np.concatenate([rng.normal(scale=0.5, size=3), rng.uniform(-20, 20, 3)])
        c = rng.uniform(-10, 10, 3)

        def flat(x):
            return pose_to_transform(PoseParams(x[:3], x[3:], c)).as_matrix()[:3].ravel()

        h = 1e-6
        jac = np.stack([(flat(x0 + h * e) - flat(x0 - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
        assert np.linalg.matrix_rank(jac, tol=1e-6) == 6
