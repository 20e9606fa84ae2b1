"""Non-learned line detection: Hough peaks with non-maximum suppression."""
from __future__ import annotations

import math

import numpy as np

from htprior import hough
from htprior.errors import ConfigurationError
from htprior.hough import HoughGrid, LineParam


def nearest_bin(grid: HoughGrid, rho: float, theta: float) -> tuple[int, int]:
    """(rho bin, theta bin) nearest a line, folding theta into [0, pi) with the matching sign flip of rho."""
    turns = math.floor(theta / math.pi)
    theta -= turns * math.pi
    if turns % 2:
        rho = -rho
    t = int(round(theta / grid.theta_step))
    if t == grid.n_theta:
        t, rho = 0, -rho
    return grid.rho_bin(rho), t


def bins_close(grid: HoughGrid, a: tuple[int, int], b: tuple[int, int], tol: int = 1) -> bool:
    """True if two bins are within ``tol`` in both axes, treating theta as circular."""
    (r1, t1), (r2, t2) = a, b
    if abs(r1 - r2) <= tol and abs(t1 - t2) <= tol:
        return True
    # across the theta seam the same line has the mirrored offset
    for shift in (grid.n_theta, -grid.n_theta):
        if abs(t1 - (t2 + shift)) <= tol and abs(r1 - (grid.n_rho - 1 - r2)) <= tol:
            return True
    return False


def _suppress(acc: np.ndarray, r: int, t: int, nms_rho: int, nms_theta: int) -> None:
    R, T = acc.shape
    for dt in range(-nms_theta, nms_theta + 1):
        tt = t + dt
        rr = r
        if tt < 0 or tt >= T:
            tt %= T
            rr = R - 1 - r
        lo, hi = max(0, rr - nms_rho), min(R, rr + nms_rho + 1)
        acc[lo:hi, tt] = -np.inf


def detect_lines(image: np.ndarray, k: int = 5, nms_radius: int | tuple[int, int] = 2,
                 n_rho: int = hough.DEFAULT_N_RHO, n_theta: int = hough.DEFAULT_N_THETA) -> list[LineParam]:
    """Top-``k`` Hough peaks of a raster, strongest first.

    A blank image still yields ``k`` lines, all with score 0; callers filter by
    score.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    nms_rho, nms_theta = (nms_radius, nms_radius) if isinstance(nms_radius, int) else nms_radius
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape
    mask = hough.vote_mask_for(W, H, n_rho, n_theta)
    acc = hough.ht_forward(image[:, :, None], mask)[:, :, 0].astype(np.float64)
    grid = mask.grid
    found = []
    for _ in range(k):
        flat = int(np.argmax(acc))
        r, t = divmod(flat, grid.n_theta)
        score = acc[r, t]
        if not np.isfinite(score):
            break
        found.append(LineParam(float(grid.rho_centers[r]), float(grid.theta_samples[t]), float(score)))
        _suppress(acc, r, t, nms_rho, nms_theta)
    return found


def rasterize_line(param: LineParam, grid: HoughGrid) -> np.ndarray:
    """Binary [H, W] raster of the pixels nearest the points of an infinite line.

    Walks ``(rho cos t - i sin t, rho sin t + i cos t)`` in half-pixel steps of
    ``i`` and keeps the in-bounds pixels.
    """
    half = grid.diagonal / 2
    if abs(param.rho) > half:
        raise ConfigurationError(f"|rho| = {abs(param.rho):.3f} exceeds half the diagonal {half:.3f}")
    c, s = math.cos(param.theta), math.sin(param.theta)
    i = np.arange(-half, half + 0.5, 0.5)
    xs = np.floor(param.rho * c - i * s + (grid.width - 1) / 2 + 0.5).astype(int)
    ys = np.floor(param.rho * s + i * c + (grid.height - 1) / 2 + 0.5).astype(int)
    keep = (xs >= 0) & (xs < grid.width) & (ys >= 0) & (ys < grid.height)
    out = np.zeros((grid.height, grid.width), np.uint8)
    out[ys[keep], xs[keep]] = 1
    return out
