"""2D-to-3D feature placement: project slice points into a view, sample bilinearly.

Feature maps are ``(H, W, C)`` arrays spanning detector coordinates
``[-1, 1]^2`` with align-corners nodes: column ``i`` sits at
``u_x = -1 + 2 i / (W - 1)`` and row ``j`` at ``u_y = -1 + 2 j / (H - 1)``.

The operator is linear in the feature map, so it is stored as a sparse
``(n_points, H * W)`` matrix with at most four non-zeros per row.  The
backward pass is its transpose.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError
from .geometry import CameraPose, project_points, project_points_orthogonal

PADDING_MODES = ("border", "zeros")


def _snap(p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # coordinates built as -1 + 2 i / (n - 1) miss node i by a few ulps;
    # snapping restores exact node sampling
    r = np.round(p)
    return np.where(np.abs(p - r) <= tol * np.maximum(1.0, np.abs(r)), r, p)


def bilinear_weights(u: np.ndarray, height: int, width: int, padding: str = "border"):
    """Node indices ``(n, 4)`` into the flattened map and their weights ``(n, 4)``.

    ``border`` clamps coordinates to ``[-1, 1]`` first; ``zeros`` drops the
    contribution of nodes falling outside the map.
    """
    if padding not in PADDING_MODES:
        raise ParameterError(f"padding must be one of {PADDING_MODES}")
    if height < 2 or width < 2:
        raise ParameterError("feature map must be at least 2x2")
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    if padding == "border":
        u = np.clip(u, -1.0, 1.0)
    px = _snap((u[:, 0] + 1.0) * 0.5 * (width - 1))
    py = _snap((u[:, 1] + 1.0) * 0.5 * (height - 1))
    if padding == "border":
        x0 = np.minimum(np.floor(px).astype(np.int64), width - 2)
        y0 = np.minimum(np.floor(py).astype(np.int64), height - 2)
    else:
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    valid = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    w = np.where(valid, w, 0.0)
    idx = np.clip(ys, 0, height - 1) * width + np.clip(xs, 0, width - 1)
    return idx, w


def sampling_matrix(u: np.ndarray, height: int, width: int, padding: str = "border") -> sp.csr_matrix:
    idx, w = bilinear_weights(u, height, width, padding)
    n = idx.shape[0]
    rows = np.repeat(np.arange(n), 4)
    # duplicates (clamped corners) are summed by the constructor
    return sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, height * width))


def bilinear_sample(fm: np.ndarray, u, padding: str = "border") -> np.ndarray:
    """Channel vector of ``fm`` at a single detector coordinate ``u``."""
    fm = np.asarray(fm, dtype=np.float64)
    h, w, _ = fm.shape
    idx, wts = bilinear_weights(np.asarray(u)[None, :], h, w, padding)
    flat = fm.reshape(h * w, -1)
    return wts[0] @ flat[idx[0]]


def view_coordinates(pose_or_view, grid: np.ndarray, projection: str = "perspective") -> np.ndarray:
    """Detector coordinates ``(..., 2)`` of slice points for either projection model."""
    if projection == "perspective":
        if not isinstance(pose_or_view, CameraPose):
            raise ParameterError("perspective projection needs a CameraPose")
        u, _ = project_points(pose_or_view, grid)
        return u
    if projection == "orthogonal":
        view = pose_or_view.view if isinstance(pose_or_view, CameraPose) else pose_or_view
        return project_points_orthogonal(view, grid)
    raise ParameterError(f"unknown projection {projection!r}")


def resampling_operator(pose_or_view, grid: np.ndarray, fm_shape, projection: str = "perspective",
                        padding: str = "border") -> sp.csr_matrix:
    """Sparse operator taking a flattened ``(H*W, C)`` map to ``(H_f*W_f, C)`` samples."""
    h, w = fm_shape[:2]
    u = view_coordinates(pose_or_view, grid, projection)
    return sampling_matrix(u.reshape(-1, 2), h, w, padding)


def resample_local_features(fm: np.ndarray, pose: CameraPose, grid: np.ndarray,
                            padding: str = "border") -> np.ndarray:
    """Features of ``fm`` placed at every slice point by perspective projection."""
    fm = np.asarray(fm)
    h, w, c = fm.shape
    op = resampling_operator(pose, grid, fm.shape, "perspective", padding)
    return (op @ fm.reshape(h * w, c)).reshape(grid.shape[:-1] + (c,))


def resample_orthogonal(fm: np.ndarray, view: str, grid: np.ndarray,
                        padding: str = "border") -> np.ndarray:
    """Parallel-beam baseline: the map is replicated along the view axis."""
    fm = np.asarray(fm)
    h, w, c = fm.shape
    op = resampling_operator(view, grid, fm.shape, "orthogonal", padding)
    return (op @ fm.reshape(h * w, c)).reshape(grid.shape[:-1] + (c,))


def resample_backward(fm: np.ndarray, pose: CameraPose, grid: np.ndarray, upstream_grad: np.ndarray,
                      padding: str = "border") -> np.ndarray:
    """Gradient w.r.t. ``fm`` of ``<resample_local_features(fm), upstream_grad>``."""
    fm_shape = np.shape(fm)
    h, w, c = fm_shape
    upstream_grad = np.asarray(upstream_grad)
    if upstream_grad.shape != grid.shape[:-1] + (c,):
        raise ParameterError(
            f"upstream gradient shape {upstream_grad.shape} != {grid.shape[:-1] + (c,)}")
    op = resampling_operator(pose, grid, fm_shape, "perspective", padding)
    return (op.T @ upstream_grad.reshape(-1, c)).reshape(h, w, c)
