import numpy as np
import pytest
from scipy import ndimage

from fluoronav.errors import ParseError, PlacementFailure
from fluoronav.fiducials import detect_blobs_2d, extract_fiducials_3d
from fluoronav.geometry import Intrinsics, compose, project_points, rotation_distance
from fluoronav.imaging import trilinear_sample
from fluoronav.phantom import (
    DEFAULT_SAD,
    FIDUCIAL_THRESHOLD_HU,
    PhantomSpec,
    carm_pose,
    default_intrinsics,
    in_field,
    load_phantom_spec,
    make_fiducial_model,
    make_phantom_volume,
    make_scene,
    movement,
    read_scene,
    select_fiducials,
    write_scene,
)


@pytest.fixture(scope="module")
def phantom():
    return make_phantom_volume(PhantomSpec())


def test_default_fiducial_model():
    model = make_fiducial_model()
    assert len(model) == 19
    assert model.layer_counts() == (9, 10)
    assert model.coplanarity() > 1.0
    pos = model.positions
    assert np.abs(pos[:, :2]).max() <= 30.0
    d = np.linalg.norm(pos[:, None, :2] - pos[None, :, :2], axis=2)
    same_layer = np.array(model.layers)[:, None] == np.array(model.layers)[None, :]
    np.fill_diagonal(d, np.inf)
    assert d[same_layer].min() >= 8.0


def test_fiducial_model_is_deterministic_per_seed():
    a, b = make_fiducial_model(), make_fiducial_model()
    assert np.array_equal(a.positions, b.positions)
    c = make_fiducial_model(PhantomSpec(seed=1))
    assert not np.array_equal(a.positions, c.positions)


def test_impossible_constellation_raises_placement_failure():
    with pytest.raises(PlacementFailure):
        make_fiducial_model(PhantomSpec(fiducial_region=20.0, min_fiducial_spacing=15.0))


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(layer_separation=0.0)
    with pytest.raises(ValueError):
        PhantomSpec(dims=(40, 40, 40))


def test_named_fiducial_subsets():
    model = make_fiducial_model()
    assert select_fiducials(model, "10").layer_counts() == (5, 5)
    assert select_fiducials(model, "6").layer_counts() == (3, 3)
    assert select_fiducials(model, "5-flat").layer_counts() == (5, 0)
    assert len(select_fiducials(model, "19")) == 19
    with pytest.raises(ValueError):
        select_fiducials(model, "20")
    with pytest.raises(ValueError):
        select_fiducials(model, "ten")


def test_volume_has_exactly_the_fiducials_above_threshold(phantom):
    volume, targets = phantom
    assert volume.dims == (192, 192, 128)
    _, n = ndimage.label(volume.voxels > FIDUCIAL_THRESHOLD_HU, structure=np.ones((3, 3, 3)))
    assert n == 19
    assert len(targets) == 20


def test_fiducials_extracted_from_volume(phantom):
    volume, _ = phantom
    truth = make_fiducial_model().positions
    found = extract_fiducials_3d(volume)
    assert len(found) == 19
    d = np.linalg.norm(found[:, None, :] - truth[None, :, :], axis=2)
    assert d.min(axis=1).max() < 0.3
    assert sorted(d.argmin(axis=1)) == list(range(19))


def test_targets_lie_on_the_stent_wire(phantom):
    volume, targets = phantom
    assert trilinear_sample(volume, targets.points).min() > 1000.0


def test_residual_blobs_match_in_field_projections(ap_scene):
    assert len(detect_blobs_2d(ap_scene.residual)) == len(ap_scene.blobs_gt) == 19


def test_extreme_view_keeps_blob_count_consistent(spec):
    k = default_intrinsics()
    scene = make_scene(spec, carm_pose(30.0, 0.0), k)
    assert len(detect_blobs_2d(scene.residual)) == len(scene.blobs_gt)


def test_full_pipeline_precondition_over_envelope():
    model = make_fiducial_model()
    worst = 19
    for sid in (900.0, 1000.0, 1100.0, 1250.0):
        k = default_intrinsics(sid)
        for a in np.arange(-30, 31, 5.0):
            for o in np.arange(-30, 31, 5.0):
                uv = project_points(k, carm_pose(a, o), model.positions)
                worst = min(worst, int(in_field(k, uv).sum()))
    assert worst >= 6


def test_scene_pose_chain(spec):
    k = default_intrinsics()
    move = movement(5.0, -3.0, 2.0, (1.0, 0.0, -2.0))
    scene = make_scene(spec, carm_pose(10.0, 5.0), k, patient_fg=move)
    assert rotation_distance(scene.pose_gt, compose(carm_pose(10.0, 5.0), move)) < 1e-12
    assert scene.fluoro.pixels.shape == (1017, 1017)
    assert scene.fluoro.meta["noise_domain"] == "intensity"


def test_carm_pose_geometry():
    e = carm_pose(0.0, 0.0)
    assert np.allclose(e.translation, [0.0, 0.0, DEFAULT_SAD])
    k = default_intrinsics()
    # the isocentre always lands on the principal point
    for a, o in ((30, 0), (0, -30), (17, 23)):
        uv = project_points(k, carm_pose(a, o), [[0.0, 0.0, 0.0]])[0]
        assert np.allclose(uv, k.principal_point, atol=1e-9)


def test_scene_directory_round_trip(tmp_path, ap_scene):
    d = write_scene(ap_scene, tmp_path / "scene")
    back = read_scene(d)
    assert np.array_equal(back.volume.voxels, ap_scene.volume.voxels)
    assert np.array_equal(back.model.positions, ap_scene.model.positions)
    assert np.array_equal(back.targets.points, ap_scene.targets.points)
    assert rotation_distance(back.truth["pose_patient_source"], ap_scene.pose_gt) < 1e-12
    assert back.k == ap_scene.k
    for got, want in ((back.fluoro, ap_scene.fluoro), (back.residual, ap_scene.residual)):
        lsb = (want.pixels.max() - want.pixels.min()) / 65535
        assert np.abs(got.pixels - want.pixels).max() <= lsb


def test_phantom_spec_file(tmp_path):
    (tmp_path / "p.txt").write_text("# smaller grid\ndims = 160 160 128\nseed = 3\nfiducial_hu = 2600\n")
    spec = load_phantom_spec(tmp_path / "p.txt")
    assert spec.dims == (160, 160, 128) and spec.seed == 3 and spec.fiducial_hu == 2600.0
    (tmp_path / "q.txt").write_text("seed = 1\ncolour = red\n")
    with pytest.raises(ParseError, match="line 2"):
        load_phantom_spec(tmp_path / "q.txt")
