"""CT volumes: representation, procedural phantoms, slice extraction and file I/O.

Geometry convention
-------------------
``data`` is indexed ``[k, j, i]`` with ``k`` along world z (D), ``j`` along
world y (H) and ``i`` along world x (W).  All geometry works in a normalized
world frame: the volume is centered on the origin and the longest physical
extent between voxel centers spans ``[-1, 1]``.  Grids are align-corners, so
the first and last voxel centers sit exactly on the extremes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BoundsError, DataError, FormatError, ParameterError

PLANES = ("axial", "coronal", "sagittal")

# plane -> (normal axis in xyz, row axis in xyz, col axis in xyz)
_PLANE_AXES = {
    "axial": (2, 1, 0),
    "coronal": (1, 2, 0),
    "sagittal": (0, 2, 1),
}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per voxel along x, y, z
    origin: tuple = (0.0, 0.0, 0.0)   # world mm of voxel (0, 0, 0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 2:
            raise ParameterError(f"volume must be 3D with every dim >= 2, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ParameterError(f"spacing must be 3 positive values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ParameterError("origin must have 3 components")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims_xyz(self) -> np.ndarray:
        d, h, w = self.data.shape
        return np.array([w, h, d])

    @property
    def scale(self) -> float:
        """Normalized units per mm."""
        extent = (self.dims_xyz - 1) * np.asarray(self.spacing)
        return 2.0 / float(extent.max())

    @property
    def voxel_size(self) -> np.ndarray:
        """Voxel spacing in normalized units, xyz order."""
        return np.asarray(self.spacing) * self.scale

    def bounds(self):
        """(lo, hi) corners of the voxel-center hull in the normalized frame."""
        half = 0.5 * (self.dims_xyz - 1) * self.voxel_size
        return -half, half

    def axis_coords(self, axis: int, positions) -> np.ndarray:
        """Normalized coordinate of fractional voxel ``positions`` along ``axis`` (0=x, 1=y, 2=z)."""
        n = self.dims_xyz[axis]
        return (np.asarray(positions, dtype=np.float64) - 0.5 * (n - 1)) * self.voxel_size[axis]

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Map normalized xyz points to fractional (i, j, k) voxel indices."""
        points = np.asarray(points, dtype=np.float64)
        return points / self.voxel_size + 0.5 * (self.dims_xyz - 1)

    def to_mm(self, points: np.ndarray) -> np.ndarray:
        """Map normalized xyz points to world millimetres."""
        return self.to_index(points) * np.asarray(self.spacing) + np.asarray(self.origin)

    def plane_extent(self, plane: str) -> int:
        normal = _PLANE_AXES[_check_plane(plane)][0]
        return int(self.dims_xyz[normal])

    def slice_shape(self, plane: str) -> tuple:
        _, row_ax, col_ax = _PLANE_AXES[_check_plane(plane)]
        return int(self.dims_xyz[row_ax]), int(self.dims_xyz[col_ax])

    def slice_array(self, plane: str, index: int) -> np.ndarray:
        plane = _check_plane(plane)
        n = self.plane_extent(plane)
        if not 0 <= index < n:
            raise BoundsError(f"{plane} index {index} outside [0, {n})")
        if plane == "axial":
            return self.data[index, :, :]
        if plane == "coronal":
            return self.data[:, index, :]
        return self.data[:, :, index]


@dataclass(frozen=True)
class SliceSpec:
    """Target slice: plane, index along the plane normal, optional crop window.

    ``crop`` is ``(row0, col0, rows, cols)`` in native slice pixels.  ``out_res``
    of ``None`` means the native slice size.
    """
    plane: str
    index: int
    crop: tuple | None = None
    out_res: tuple | None = None


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_organs: int = 4
    body_axes: tuple = (0.42, 0.3, 0.46)
    density_ranges: dict = field(default_factory=lambda: {
        "body": (0.2, 0.35),
        "organ": (0.3, 0.7),
        "spine": (0.9, 0.9),
    })


def _check_plane(plane: str) -> str:
    if plane not in _PLANE_AXES:
        raise ParameterError(f"unknown plane {plane!r}; expected one of {PLANES}")
    return plane


def _window(vol: Volume, s: SliceSpec):
    rows_n, cols_n = vol.slice_shape(s.plane)
    if s.crop is None:
        return 0, 0, rows_n, cols_n
    r0, c0, rows, cols = (int(v) for v in s.crop)
    if rows < 1 or cols < 1 or r0 < 0 or c0 < 0 or r0 + rows > rows_n or c0 + cols > cols_n:
        raise BoundsError(f"crop {s.crop} outside {s.plane} slice of size {rows_n}x{cols_n}")
    return r0, c0, rows, cols


def _positions(start: int, count: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([start + 0.5 * (count - 1)])
    # multiply before dividing so integer nodes stay exact
    return start + np.arange(n_out) * (count - 1) / (n_out - 1)


def _interp_matrix(pos: np.ndarray, n: int) -> np.ndarray:
    """Dense linear-interpolation matrix sampling a length-``n`` signal at ``pos``."""
    i0 = np.clip(np.floor(pos).astype(int), 0, max(n - 2, 0))
    frac = pos - i0
    m = np.zeros((len(pos), n))
    rows = np.arange(len(pos))
    m[rows, i0] += 1.0 - frac
    if n > 1:
        m[rows, i0 + 1] += frac
    return m


def slice_grid(vol: Volume, s: SliceSpec, feat_res) -> np.ndarray:
    """Normalized world coordinates of the sampling points on a (cropped) slice.

    Returns an array of shape ``(H_f, W_f, 3)``.  The grid covers the crop
    window inclusively at both ends; without a crop it covers the full slice.
    """
    plane = _check_plane(s.plane)
    n = vol.plane_extent(plane)
    if not 0 <= s.index < n:
        raise BoundsError(f"{plane} index {s.index} outside [0, {n})")
    r0, c0, rows, cols = _window(vol, s)
    hf, wf = feat_res
    normal, row_ax, col_ax = _PLANE_AXES[plane]
    grid = np.empty((hf, wf, 3))
    grid[..., normal] = vol.axis_coords(normal, s.index)
    grid[..., row_ax] = vol.axis_coords(row_ax, _positions(r0, rows, hf))[:, None]
    grid[..., col_ax] = vol.axis_coords(col_ax, _positions(c0, cols, wf))[None, :]
    return grid


def extract_slice(vol: Volume, s: SliceSpec, feat_res=(16, 16)):
    """Ground-truth slice image at ``s.out_res`` plus its coordinate grid.

    The image is bilinearly resampled from the crop window (align-corners);
    with no crop and native ``out_res`` it is the raw voxel slice.
    """
    img = vol.slice_array(s.plane, s.index).astype(np.float64)
    r0, c0, rows, cols = _window(vol, s)
    h_out, w_out = s.out_res if s.out_res is not None else img.shape
    wr = _interp_matrix(_positions(r0, rows, h_out), img.shape[0])
    wc = _interp_matrix(_positions(c0, cols, w_out), img.shape[1])
    target = wr @ img @ wc.T
    return target, slice_grid(vol, s, feat_res)


def generate_phantom(spec: PhantomSpec, dims=(64, 64, 64)) -> Volume:
    """Procedural torso: body ellipsoid, random organ ellipsoids, posterior spine cylinder."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ParameterError(f"phantom dims must be 3 values each >= 16, got {dims}")
    if spec.n_organs < 0:
        raise ParameterError("n_organs must be >= 0")
    axes_frac = np.asarray(spec.body_axes, dtype=np.float64)
    if axes_frac.shape != (3,) or np.any(axes_frac <= 0) or np.any(axes_frac > 0.5):
        raise ParameterError(f"body_axes must be 3 values in (0, 0.5], got {spec.body_axes}")
    ranges = {}
    for key in ("body", "organ", "spine"):
        lo, hi = spec.density_ranges[key]
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError(f"density range for {key} must satisfy 0 <= lo <= hi <= 1")
        ranges[key] = (float(lo), float(hi))

    rng = np.random.default_rng(spec.seed)
    vol = Volume(np.zeros(dims, dtype=np.float32))
    lo, hi = vol.bounds()
    semi = axes_frac * (hi - lo)
    x = vol.axis_coords(0, np.arange(dims[2]))[None, None, :]
    y = vol.axis_coords(1, np.arange(dims[1]))[None, :, None]
    z = vol.axis_coords(2, np.arange(dims[0]))[:, None, None]

    data = np.zeros(dims, dtype=np.float32)
    body = (x / semi[0]) ** 2 + (y / semi[1]) ** 2 + (z / semi[2]) ** 2 <= 1.0
    data[body] = rng.uniform(*ranges["body"])

    pts = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    for _ in range(spec.n_organs):
        center = semi * rng.uniform(-0.5, 0.5, size=3)
        radii = semi.min() * rng.uniform(0.15, 0.4, size=3)
        rot = Rotation.random(random_state=rng).as_matrix()
        local = (pts - center) @ rot
        organ = body & (np.sum((local / radii) ** 2, axis=-1) <= 1.0)
        data[organ] = rng.uniform(*ranges["organ"])

    radius = 0.18 * min(semi[0], semi[1])
    spine = body & (x ** 2 + (y + 0.6 * semi[1]) ** 2 <= radius ** 2)
    data[spine] = rng.uniform(*ranges["spine"])
    return Volume(data)


# ----------------------------------------------------------------------------
# file I/O
# ----------------------------------------------------------------------------

def write_raw(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> None:
    """JSON header line + little-endian float32 payload (D-major, then row-major)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ParameterError("raw payload must be 3D; use shape (1, H, W) for images")
    header = {
        "dims": [int(d) for d in data.shape],
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "dtype": "f32le",
    }
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_raw(path):
    """Inverse of :func:`write_raw`; returns ``(array, header)``."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    if header.get("dtype") != "f32le" or len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: unsupported header {header}")
    expected = 4 * int(np.prod(dims))
    actual = len(blob) - nl - 1
    if actual != expected:
        raise FormatError(f"{path}: payload size mismatch, expected {expected} bytes, got {actual}")
    data = np.frombuffer(blob, dtype="<f4", offset=nl + 1).reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    return data, header


def save_volume(vol: Volume, path) -> None:
    write_raw(path, vol.data, vol.spacing, vol.origin)


def load_volume(path) -> Volume:
    data, header = read_raw(path)
    return Volume(data, tuple(header["spacing"]), tuple(header["origin"]))


def save_image_raw(path, image: np.ndarray) -> None:
    write_raw(path, np.asarray(image)[None, :, :])


def load_image_raw(path) -> np.ndarray:
    data, _ = read_raw(path)
    if data.shape[0] != 1:
        raise FormatError(f"{path}: expected an image with dims [1, H, W], got {list(data.shape)}")
    return data[0]


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi - lo <= 0:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round(255.0 * (image - lo) / (hi - lo)).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    """8-bit grayscale PNG, min-max scaled.  Row 0 is written at the top."""
    from PIL import Image

    Image.fromarray(to_uint8(image), mode="L").save(path)
