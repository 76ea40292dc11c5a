"""CT volume and radiograph containers, file I/O, sampling and pyramids.

Volume files are a ``<name>.vh`` text header (``dims``, ``spacing``,
``origin``) next to a ``<name>.vraw`` payload of little-endian float32
voxels, x fastest. Images are 16-bit binary PGM (``P5``, maxval 65535,
big-endian) with a ``<name>.imeta`` sidecar holding ``pixel_spacing`` and
an optional quantisation ``window``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import EmptyOutput, ParseError, SizeMismatch

AIR_HU = -1000.0
PGM_MAX = 65535


@dataclass(frozen=True)
class Volume3D:
    """Axis-aligned voxel grid in Hounsfield units.

    ``voxels`` is stored with shape ``(nz, ny, nx)`` so that x is the
    fastest-varying axis in memory. ``origin`` is the centre of voxel
    ``(0, 0, 0)`` in mm.
    """

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError("voxels must be a non-empty 3D array")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError("spacing must be three positive values")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must be a 3-vector")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    def index_to_world(self, idx) -> np.ndarray:
        """Continuous ``(i, j, k)`` index (x, y, z order) to mm."""
        return np.asarray(idx, dtype=float) * self.spacing + np.asarray(self.origin)

    def world_to_index(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - np.asarray(self.origin)) / self.spacing

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """World-space box spanned by the voxel centres."""
        lo = np.asarray(self.origin, dtype=float)
        hi = self.index_to_world(np.asarray(self.dims) - 1)
        return lo, hi

    def center(self) -> np.ndarray:
        lo, hi = self.bounds()
        return (lo + hi) / 2.0


@dataclass(frozen=True)
class Image2D:
    """Row-major radiograph, ``pixels`` has shape ``(height, width)``."""

    pixels: np.ndarray
    pixel_spacing: Tuple[float, float] = (1.0, 1.0)
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ValueError("pixels must be a non-empty 2D array")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(
            self, "pixel_spacing", tuple(float(s) for s in self.pixel_spacing)
        )

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def trilinear_sample(v: Volume3D, p) -> np.ndarray:
    """Trilinear interpolation at world point(s) ``p`` (mm).

    Points outside the box spanned by the voxel centres read as air
    (-1000 HU). Accepts ``(3,)`` or ``(N, 3)``.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    idx = np.atleast_2d(v.world_to_index(p))
    dims = np.asarray(v.dims)
    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    out = np.full(idx.shape[0], AIR_HU)
    if np.any(inside):
        q = idx[inside]
        # clamp the lower corner so the +1 neighbour exists; singleton axes
        # collapse to the one available sample
        base = np.minimum(np.floor(q).astype(int), np.maximum(dims - 2, 0))
        frac = np.where(dims > 1, q - base, 0.0)
        nxt = np.minimum(base + 1, dims - 1)
        vox = v.voxels
        acc = np.zeros(q.shape[0])
        for cx in (0, 1):
            ix = nxt[:, 0] if cx else base[:, 0]
            wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
            for cy in (0, 1):
                iy = nxt[:, 1] if cy else base[:, 1]
                wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
                for cz in (0, 1):
                    iz = nxt[:, 2] if cz else base[:, 2]
                    wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                    acc += wx * wy * wz * vox[iz, iy, ix]
        out[inside] = acc
    return out[0] if single else out


def downsample_image(img: Image2D, factor: int) -> Image2D:
    """Block-mean downsampling; remainder rows/columns are cropped."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img
    h, w = img.height // factor, img.width // factor
    if h == 0 or w == 0:
        raise EmptyOutput(
            f"{img.width}x{img.height} image too small for factor {factor}"
        )
    block = img.pixels[: h * factor, : w * factor].reshape(h, factor, w, factor)
    su, sv = img.pixel_spacing
    return Image2D(block.mean(axis=(1, 3)), (su * factor, sv * factor), dict(img.meta))


# -- volume I/O --------------------------------------------------------------

def _volume_paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".vh", ".vraw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".vh"), p.with_name(p.name + ".vraw")


def _read_header(path: Path) -> Dict[str, str]:
    fields = {}
    text = path.read_text()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError(f"expected 'key: value', got {line!r}", n)
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    return fields


def _floats(fields, key, count, cast=float):
    if key not in fields:
        raise ParseError(f"missing key {key!r}")
    parts = fields[key].split()
    if len(parts) != count:
        raise ParseError(f"{key!r} needs {count} values, got {len(parts)}")
    try:
        return tuple(cast(x) for x in parts)
    except ValueError as exc:
        raise ParseError(f"bad number in {key!r}: {exc}") from exc


def save_volume(v: Volume3D, path) -> Tuple[Path, Path]:
    head, raw = _volume_paths(path)
    nx, ny, nz = v.dims
    lines = [
        f"dims: {nx} {ny} {nz}",
        "spacing: " + " ".join(repr(s) for s in v.spacing),
        "origin: " + " ".join(repr(o) for o in v.origin),
    ]
    head.write_text("\n".join(lines) + "\n")
    raw.write_bytes(v.voxels.astype("<f4").tobytes(order="C"))
    return head, raw


def load_volume(path) -> Volume3D:
    head, raw = _volume_paths(path)
    fields = _read_header(head)
    nx, ny, nz = _floats(fields, "dims", 3, int)
    if min(nx, ny, nz) < 1:
        raise ParseError("dims must be >= 1")
    spacing = _floats(fields, "spacing", 3)
    origin = _floats(fields, "origin", 3)
    if min(spacing) <= 0:
        raise ParseError("spacing must be positive")
    data = raw.read_bytes()
    expected = nx * ny * nz * 4
    if len(data) != expected:
        raise SizeMismatch(f"{raw}: {len(data)} bytes, expected {expected}")
    vox = np.frombuffer(data, dtype="<f4").reshape(nz, ny, nx)
    return Volume3D(vox.astype(np.float32), spacing, origin)


# -- image I/O ---------------------------------------------------------------

def _image_paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".pgm", ".imeta"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".pgm"), p.with_name(p.name + ".imeta")


def quantize(pixels: np.ndarray, window: Optional[Tuple[float, float]]) -> np.ndarray:
    if window is None:
        q = np.rint(pixels)
    else:
        lo, hi = window
        q = np.rint((pixels - lo) / (hi - lo) * PGM_MAX)
    return np.clip(q, 0, PGM_MAX).astype(np.uint16)


def dequantize(q: np.ndarray, window: Optional[Tuple[float, float]]) -> np.ndarray:
    q = q.astype(float)
    if window is None:
        return q
    lo, hi = window
    return lo + q / PGM_MAX * (hi - lo)


def save_image(img: Image2D, path, window: Optional[Tuple[float, float]] = None):
    """Write ``<name>.pgm`` and its ``.imeta`` sidecar.

    Without a window, pixels are rounded and clamped to ``[0, 65535]``.
    With ``window=(lo, hi)`` the range maps linearly onto the full 16 bits.
    Extra ``img.meta`` entries are copied into the sidecar verbatim.
    """
    pgm, meta = _image_paths(path)
    if window is not None and not window[1] > window[0]:
        raise ValueError("window must satisfy hi > lo")
    q = quantize(img.pixels, window)
    header = f"P5\n{img.width} {img.height}\n{PGM_MAX}\n".encode("ascii")
    pgm.write_bytes(header + q.astype(">u2").tobytes())
    su, sv = img.pixel_spacing
    lines = [f"pixel_spacing: {float(su)!r} {float(sv)!r}"]
    if window is not None:
        lines.append(f"window: {float(window[0])!r} {float(window[1])!r}")
    for key, value in img.meta.items():
        if key in ("pixel_spacing", "window"):
            continue
        lines.append(f"{key}: {value}")
    meta.write_text("\n".join(lines) + "\n")
    return pgm, meta


def _pgm_tokens(data: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens; return them and the
    offset of the binary payload."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        tokens.append(data[start:pos].decode("ascii", "replace"))
    return tokens, pos + 1  # single whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != "P5":
        raise ParseError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ParseError(f"{path}: bad PGM header") from exc
    if w < 1 or h < 1 or not 0 < maxval <= PGM_MAX:
        raise ParseError(f"{path}: bad PGM dimensions or maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    payload = data[offset:]
    if len(payload) != nbytes:
        raise SizeMismatch(f"{path}: {len(payload)} payload bytes, expected {nbytes}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)


def write_pgm(path, q: np.ndarray):
    q = np.asarray(q, dtype=np.uint16)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{PGM_MAX}\n".encode() + q.astype(">u2").tobytes())


def load_image(path) -> Image2D:
    pgm, meta = _image_paths(path)
    q = read_pgm(pgm)
    fields = _read_header(meta) if meta.exists() else {}
    spacing = _floats(fields, "pixel_spacing", 2) if "pixel_spacing" in fields else (1.0, 1.0)
    window = _floats(fields, "window", 2) if "window" in fields else None
    extra = {k: v for k, v in fields.items() if k not in ("pixel_spacing", "window")}
    img = Image2D(dequantize(q, window), spacing, extra)
    return img


def image_window(path) -> Optional[Tuple[float, float]]:
    """Quantisation window recorded in an image sidecar, if any."""
    _, meta = _image_paths(path)
    if not meta.exists():
        return None
    fields = _read_header(meta)
    return _floats(fields, "window", 2) if "window" in fields else None


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
