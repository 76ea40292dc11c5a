import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fluoronav.errors import EmptyOutput, ParseError, SizeMismatch
from fluoronav.imaging import (
    AIR_HU,
    Image2D,
    Volume3D,
    downsample_image,
    load_image,
    load_volume,
    save_image,
    save_volume,
    trilinear_sample,
)


def test_volume_invariants():
    v = Volume3D(np.zeros((2, 3, 4)), (1.0, 2.0, 3.0), (1.0, 0.0, 0.0))
    assert v.dims == (4, 3, 2)
    assert v.voxels.dtype == np.float32
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2)))


def test_image_rejects_non_finite():
    with pytest.raises(ValueError):
        Image2D(np.array([[0.0, np.nan]]))


# -- volume I/O -------------------------------------------------------------------------------


def test_volume_round_trip_zeros(tmp_path):
    v = Volume3D(np.zeros((2, 2, 2)))
    back = load_volume(save_volume(v, tmp_path / "z")[0])
    assert back.dims == v.dims and back.spacing == v.spacing and back.origin == v.origin
    assert np.array_equal(back.voxels, v.voxels)


def test_volume_round_trip_random_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume3D(rng.normal(0, 500, (64, 64, 64)), (0.37, 1.0 / 3.0, 2.5), (-12.3, 4.56, 1e-7))
    save_volume(v, tmp_path / "r")
    back = load_volume(tmp_path / "r")
    assert back.spacing == v.spacing and back.origin == v.origin
    assert back.voxels.tobytes() == v.voxels.tobytes()


def test_volume_payload_layout_is_x_fastest_little_endian(tmp_path):
    vox = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    save_volume(Volume3D(vox), tmp_path / "l")
    raw = np.frombuffer((tmp_path / "l.vraw").read_bytes(), dtype="<f4")
    assert np.array_equal(raw, np.arange(24))
    assert "dims: 4 3 2" in (tmp_path / "l.vh").read_text()


def test_volume_short_payload_raises_size_mismatch(tmp_path):
    (tmp_path / "s.vh").write_text("dims: 10 10 10\nspacing: 1 1 1\norigin: 0 0 0\n")
    (tmp_path / "s.vraw").write_bytes(np.zeros(999, "<f4").tobytes())
    with pytest.raises(SizeMismatch):
        load_volume(tmp_path / "s")


@pytest.mark.parametrize(
    "header",
    [
        "dims: 2 2\nspacing: 1 1 1\norigin: 0 0 0\n",
        "dims: 2 2 2\nspacing: 1 1 x\norigin: 0 0 0\n",
        "dims: 2 2 2\norigin: 0 0 0\n",
        "dims 2 2 2\nspacing: 1 1 1\norigin: 0 0 0\n",
        "dims: 2 2 2\nspacing: 1 -1 1\norigin: 0 0 0\n",
    ],
)
def test_volume_malformed_header_raises_parse_error(tmp_path, header):
    (tmp_path / "m.vh").write_text(header)
    (tmp_path / "m.vraw").write_bytes(np.zeros(8, "<f4").tobytes())
    with pytest.raises(ParseError):
        load_volume(tmp_path / "m")


# -- trilinear -----------------------------------------------------------------------------------


def test_trilinear_examples():
    rng = np.random.default_rng(1)
    v = Volume3D(rng.normal(size=(4, 5, 6)), (0.5, 1.0, 2.0), (10.0, -3.0, 7.0))
    ijk = np.array([3, 2, 1])
    assert trilinear_sample(v, v.index_to_world(ijk)) == pytest.approx(v.voxels[1, 2, 3], abs=1e-6)

    line = Volume3D(np.array([[[0.0, 100.0]]]))
    assert trilinear_sample(line, [0.5, 0.0, 0.0]) == pytest.approx(50.0)
    lo, hi = v.bounds()
    assert trilinear_sample(v, hi + [10.0, 0.0, 0.0]) == AIR_HU
    assert trilinear_sample(v, lo - [0.0, 0.0, 10.0]) == AIR_HU


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_trilinear_reproduces_affine_fields(seed):
    rng = np.random.default_rng(seed)
    a, b, c, d = rng.uniform(-10, 10, 4)
    spacing = rng.uniform(0.3, 2.0, 3)
    origin = rng.uniform(-20, 20, 3)
    n = (5, 6, 7)
    z, y, x = np.meshgrid(*(np.arange(m) for m in n[::-1]), indexing="ij")
    wx, wy, wz = origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]
    # float64 field then float32 storage: compare against the stored values' own affine fit
    field = a + b * wx + c * wy + d * wz
    v = Volume3D(field, tuple(spacing), tuple(origin))
    idx = rng.uniform(0, np.array(n) - 1, (50, 3))
    p = v.index_to_world(idx)
    expected = a + p @ [b, c, d]
    got = trilinear_sample(v, p)
    # float32 voxel storage bounds the agreement, not the interpolant
    assert np.abs(got - expected).max() < 1e-4 * (1 + np.abs(field).max())


def test_trilinear_affine_exact_in_float64_range():
    # integer-valued affine field is stored exactly in float32
    z, y, x = np.meshgrid(np.arange(6), np.arange(6), np.arange(6), indexing="ij")
    v = Volume3D(3 + 2 * x - y + 4 * z)
    rng = np.random.default_rng(2)
    p = rng.uniform(0, 5, (200, 3))
    assert np.abs(trilinear_sample(v, p) - (3 + 2 * p[:, 0] - p[:, 1] + 4 * p[:, 2])).max() < 1e-9


# -- downsampling --------------------------------------------------------------------------------


def test_downsample_examples():
    rng = np.random.default_rng(3)
    img = Image2D(rng.uniform(0, 10, (9, 7)), (0.3, 0.4))
    assert downsample_image(img, 1) is img
    const = downsample_image(Image2D(np.full((4, 4), 7.5)), 4)
    assert const.pixels.shape == (1, 1) and const.pixels[0, 0] == 7.5
    checker = downsample_image(Image2D(np.array([[0.0, 100.0], [100.0, 0.0]])), 2)
    assert checker.pixels[0, 0] == 50.0
    d = downsample_image(img, 3)
    assert d.pixels.shape == (3, 2)
    assert d.pixel_spacing == pytest.approx((0.9, 1.2))


def test_downsample_errors():
    with pytest.raises(EmptyOutput):
        downsample_image(Image2D(np.zeros((3, 10))), 4)
    with pytest.raises(ValueError):
        downsample_image(Image2D(np.zeros((3, 3))), 0)


@given(
    hnp.arrays(float, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=40),
               elements=st.floats(-1e3, 1e3)),
    st.integers(1, 6),
)
def test_downsample_preserves_mean_of_covered_region(pixels, factor):
    h, w = pixels.shape
    if h < factor or w < factor:
        return
    d = downsample_image(Image2D(pixels), factor)
    covered = pixels[: (h // factor) * factor, : (w // factor) * factor]
    assert abs(d.pixels.mean() - covered.mean()) < 1e-9


# -- image I/O -----------------------------------------------------------------------------------


def test_image_round_trip_zeros_and_max(tmp_path):
    for value in (0.0, 65535.0):
        img = Image2D(np.full((8, 8), value), (0.29, 0.31))
        save_image(img, tmp_path / "a")
        back = load_image(tmp_path / "a")
        assert np.array_equal(back.pixels, img.pixels)
        assert back.pixel_spacing == img.pixel_spacing


def test_image_windowed_round_trip_within_one_lsb(tmp_path):
    rng = np.random.default_rng(4)
    px = rng.uniform(0.0, 7.0, (33, 21))
    window = (0.0, 7.0)
    save_image(Image2D(px, meta={"note": "a b c"}), tmp_path / "w", window=window)
    back = load_image(tmp_path / "w")
    lsb = (window[1] - window[0]) / 65535
    assert np.abs(back.pixels - px).max() <= lsb / 2 + 1e-12
    assert back.meta == {"note": "a b c"}


def test_image_io_is_idempotent(tmp_path):
    rng = np.random.default_rng(5)
    save_image(Image2D(rng.uniform(0, 3, (10, 12))), tmp_path / "i", window=(0.0, 3.0))
    once = load_image(tmp_path / "i")
    save_image(once, tmp_path / "j", window=(0.0, 3.0))
    twice = load_image(tmp_path / "j")
    assert np.array_equal(once.pixels, twice.pixels)


def test_image_pgm_is_big_endian_16_bit(tmp_path):
    save_image(Image2D(np.array([[1.0, 258.0]])), tmp_path / "b")
    data = (tmp_path / "b.pgm").read_bytes()
    assert data.startswith(b"P5\n2 1\n65535\n")
    assert data.endswith(b"\x00\x01\x01\x02")


def test_image_errors(tmp_path):
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n65535\n" + b"\x00" * 10)
    with pytest.raises(SizeMismatch):
        load_image(tmp_path / "t")
    (tmp_path / "u.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ParseError):
        load_image(tmp_path / "u")
