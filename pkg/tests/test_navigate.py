import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluoronav.errors import DegenerateDirection, DepthNonPositive, ParseError
from fluoronav.geometry import (
    Intrinsics,
    RigidTransform,
    apply,
    build_projection,
    compose,
    invert,
    project_points,
    rot_z,
    translation,
)
from fluoronav.navigate import (
    STREAM_HEADER,
    TrackedTool,
    bresenham,
    default_entry,
    draw_overlay,
    fg_projection,
    insertion_path,
    iter_pose_stream,
    jitter_tips,
    needle,
    predicted_tip_error,
    read_pose_stream,
    replay,
    score_roadmap,
    RoadmapOverlay,
    tip_depths,
    tool_to_image,
    tool_to_patient,
    write_pose_stream,
)
from fluoronav.phantom import DEFAULT_T_MT_FG, carm_pose, default_intrinsics, movement

from _support import random_transform

K = default_intrinsics()


def test_tool_direction_is_normalised():
    t = TrackedTool([1, 2, 3], [0, 0, 2], RigidTransform.identity())
    assert np.linalg.norm(t.direction) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DegenerateDirection):
        TrackedTool([0, 0, 0], [0, 0, 0], RigidTransform.identity())


# -- Eq. 1 / Eq. 2 chains ------------------------------------------------------------------------


def test_tip_on_principal_ray_projects_to_principal_point():
    tool = TrackedTool([0.0, 0.0, 500.0], [0.0, 0.0, 1.0], RigidTransform.identity())
    ov = tool_to_image(tool, RigidTransform.identity(), build_projection(K, RigidTransform.identity()))
    assert np.allclose(ov.tip_px, K.principal_point, atol=1e-12)


def test_tool_behind_source_raises():
    tool = TrackedTool([0.0, 0.0, -10.0], [0.0, 0.0, 1.0], RigidTransform.identity())
    with pytest.raises(DepthNonPositive):
        tool_to_image(tool, RigidTransform.identity(), build_projection(K, RigidTransform.identity()))


def test_overlay_matches_direct_composition():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t_fg_source = carm_pose(*rng.uniform(-30, 30, 2))
        tool_pose = compose(invert(DEFAULT_T_MT_FG), random_transform(rng, max_angle=1.0, max_t=30.0))
        tool = TrackedTool(rng.normal(size=3), rng.normal(size=3), tool_pose)
        ov = tool_to_image(tool, DEFAULT_T_MT_FG, fg_projection(K, t_fg_source), frame_index=7)
        chain = compose(t_fg_source, compose(DEFAULT_T_MT_FG, tool_pose))
        direct = project_points(K, chain, np.stack([tool.tip, tool.tip - 50.0 * tool.direction]))
        assert np.abs(ov.tip_px - direct[0]).max() < 1e-10
        assert np.abs(ov.shaft_px - direct[1]).max() < 1e-10
        assert ov.frame_index == 7


def test_tool_to_patient_examples():
    ident = RigidTransform.identity()
    r = tool_to_patient(needle(ident), ident, ident, ident)
    assert np.allclose(r.as_matrix(), np.eye(4))
    rng = np.random.default_rng(1)
    pose, src = random_transform(rng), random_transform(rng)
    r = tool_to_patient(needle(pose), ident, src, src)
    assert np.allclose(r.as_matrix(), pose.as_matrix(), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_tool_to_patient_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    tool_pose, mt_fg, fg_src, pat_src = (random_transform(rng) for _ in range(4))
    got = tool_to_patient(needle(tool_pose), mt_fg, fg_src, pat_src).as_matrix()
    want = np.linalg.inv(pat_src.as_matrix()) @ fg_src.as_matrix() @ mt_fg.as_matrix() @ tool_pose.as_matrix()
    assert np.abs(got - want).max() < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_roadmap_and_tracking_chains_agree(seed):
    rng = np.random.default_rng(seed)
    t_fg_source = carm_pose(*rng.uniform(-30, 30, 2))
    t_patient_source = compose(t_fg_source, movement(*rng.uniform(-10, 10, 3)))
    tool_pose = compose(invert(DEFAULT_T_MT_FG), random_transform(rng, max_angle=1.0, max_t=30.0))
    tool = needle(tool_pose)
    ov = tool_to_image(tool, DEFAULT_T_MT_FG, fg_projection(K, t_fg_source))
    in_patient = tool_to_patient(tool, DEFAULT_T_MT_FG, t_fg_source, t_patient_source)
    uv = project_points(K, t_patient_source, apply(in_patient, tool.tip)[None])[0]
    assert np.abs(uv - ov.tip_px).max() < 1e-9


# -- scoring -----------------------------------------------------------------------------------


def test_score_examples():
    tip, shaft = np.array([100.0, 100.0]), np.array([40.0, 70.0])
    zero = score_roadmap(RoadmapOverlay(tip, shaft), tip, shaft, 0.29)
    assert (zero.euclid_mm, zero.signed_x_mm, zero.signed_y_mm, zero.angle_deg) == (0.0, 0.0, 0.0, 0.0)
    off = score_roadmap(RoadmapOverlay(tip + [2.0, 0.0], shaft + [2.0, 0.0]), tip, shaft, 0.29)
    assert off.signed_x_mm == pytest.approx(0.58) and off.euclid_mm == pytest.approx(0.58)
    assert off.signed_y_mm == 0.0 and off.angle_deg < 1e-12
    r = rot_z(np.radians(1.0))[:2, :2]
    turned = tip - r @ (tip - shaft)
    e = score_roadmap(RoadmapOverlay(tip, turned), tip, shaft, 0.29)
    assert e.angle_deg == pytest.approx(1.0, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_score_components_are_consistent(seed):
    rng = np.random.default_rng(seed)
    tip, shaft = rng.uniform(0, 1000, 2), rng.uniform(0, 1000, 2)
    ov = RoadmapOverlay(rng.uniform(0, 1000, 2), rng.uniform(0, 1000, 2))
    e = score_roadmap(ov, tip, shaft, (0.29, 0.31))
    assert abs(e.euclid_mm**2 - e.signed_x_mm**2 - e.signed_y_mm**2) < 1e-9 * max(1.0, e.euclid_mm**2)
    assert 0.0 <= e.angle_deg <= 180.0


def test_score_rejects_coincident_ground_truth():
    with pytest.raises(DegenerateDirection):
        score_roadmap(RoadmapOverlay(np.zeros(2), np.ones(2)), [5.0, 5.0], [5.0, 5.0], 0.29)


# -- replay ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def insertion():
    target = np.array([12.0, 10.0, 20.0])
    times, poses = insertion_path(default_entry(target), target, RigidTransform.identity(),
                                  DEFAULT_T_MT_FG, 200)
    return times, poses


def test_insertion_path_ends_at_target(insertion):
    times, poses = insertion
    tip = apply(compose(DEFAULT_T_MT_FG, poses[-1]), np.zeros(3))
    assert np.allclose(tip, [12.0, 10.0, 20.0], atol=1e-9)
    assert times[1] == pytest.approx(0.05)
    assert len(poses) == 200


def test_noiseless_replay_scores_zero(insertion):
    _, poses = insertion
    p = fg_projection(K, carm_pose(15.0, -10.0))
    overlays, errors = replay(poses, poses, needle(), DEFAULT_T_MT_FG, p, None, K.pixel_spacing_u)
    assert len(overlays) == 200
    assert max(max(abs(e.euclid_mm), abs(e.angle_deg)) for e in errors) < 1e-9


def test_tracking_noise_propagation_matches_magnification(insertion):
    _, poses = insertion
    t_fg_source = carm_pose(0.0, 0.0)
    p = fg_projection(K, t_fg_source)
    rng = np.random.default_rng(2)
    truth = [poses[i] for i in rng.integers(0, len(poses), 10_000)]
    sigma = 0.5
    noisy = jitter_tips(truth, sigma, seed=3)
    _, errors = replay(noisy, truth, needle(), DEFAULT_T_MT_FG, p, None, K.pixel_spacing_u)
    measured = np.mean([e.euclid_mm for e in errors])
    depths = tip_depths(truth, needle(), DEFAULT_T_MT_FG, t_fg_source)
    assert measured == pytest.approx(predicted_tip_error(sigma, K, depths), rel=0.15)


def test_predicted_tip_error_formula():
    k = Intrinsics(1100.0, 0.29, 0.29, 1017, 1017)
    assert predicted_tip_error(1.0, k, 1100.0) == pytest.approx(np.sqrt(np.pi / 2))
    assert predicted_tip_error(0.5, k, [550.0, 550.0]) == pytest.approx(np.sqrt(np.pi / 2))


# -- streams and drawing --------------------------------------------------------------------------


def test_pose_stream_round_trip(tmp_path, insertion):
    times, poses = insertion
    write_pose_stream(tmp_path / "s.csv", times[:5], poses[:5])
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(STREAM_HEADER)
    t, back = read_pose_stream(tmp_path / "s.csv")
    assert np.array_equal(t, times[:5])
    for a, b in zip(back, poses[:5]):
        assert np.array_equal(a.as_matrix(), b.as_matrix())


@pytest.mark.parametrize(
    "bad_row",
    ["0.1,1,0,0,0,1,0,0,0,1,0,0", "0.1,1,0,0,0,1,0,0,0,1,0,0,x", "0.1,2,0,0,0,1,0,0,0,1,0,0,0",
     "0.1,1,0,0,0,1,0,0,0,1,0,0,nan"],
)
def test_pose_stream_errors_carry_line_numbers(tmp_path, bad_row):
    good = "0.0,1,0,0,0,1,0,0,0,1,0,0,0"
    (tmp_path / "s.csv").write_text(",".join(STREAM_HEADER) + "\n# comment\n" + good + "\n" + bad_row + "\n")
    with pytest.raises(ParseError, match="line 4"):
        list(iter_pose_stream(tmp_path / "s.csv"))


def test_bresenham_endpoints_and_connectivity():
    pts = bresenham((2.0, 3.0), (11.0, -4.0))
    assert tuple(pts[0]) == (2, 3) and tuple(pts[-1]) == (11, -4)
    assert np.abs(np.diff(pts, axis=0)).max() == 1
    assert len(bresenham((5, 5), (5, 5))) == 1


def test_draw_overlay_clips_and_marks():
    base = np.zeros((20, 20))
    img = draw_overlay(base, RoadmapOverlay(np.array([10.0, 10.0]), np.array([-30.0, 10.0])), value=2.0)
    assert img[10, 0] == 2.0 and img[10, 10] == 2.0 and img[7, 10] == 2.0
    assert not base.any()
