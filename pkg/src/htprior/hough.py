"""Hough-space discretization, the pixel/bin vote mask, and differentiable HT / IHT.

Coordinates are measured from the image center at pixel centers, so a pixel
``(x, y)`` sits at ``(x - (W-1)/2, y - (H-1)/2)``. Offsets are signed and
span ``[-d/2, d/2]`` with ``d`` the image diagonal; angles sample ``[0, pi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from htprior import kernels
from htprior.errors import ConfigurationError
from htprior.tensor import Tensor, record

DEFAULT_N_RHO = 183
DEFAULT_N_THETA = 60


@dataclass(frozen=True)
class HoughGrid:
    width: int
    height: int
    n_rho: int
    n_theta: int
    theta_samples: np.ndarray = field(repr=False, compare=False)
    rho_centers: np.ndarray = field(repr=False, compare=False)
    diagonal: float

    @property
    def rho_step(self) -> float:
        return self.diagonal / (self.n_rho - 1)

    @property
    def theta_step(self) -> float:
        return math.pi / self.n_theta

    def rho_bin(self, rho: float) -> int:
        """Index of the nearest offset center (ties go to the lower index)."""
        return _nearest_bins(np.asarray([rho], dtype=np.float64), self.rho_centers)[0]

    def theta_bin(self, theta: float) -> int:
        return int(round((theta % math.pi) / self.theta_step)) % self.n_theta


@dataclass(frozen=True)
class LineParam:
    """A line ``x cos(theta) + y sin(theta) = rho`` in centered pixel coordinates."""

    rho: float
    theta: float
    score: float = 0.0


def build_grid(width: int, height: int, n_rho: int = DEFAULT_N_RHO,
               n_theta: int = DEFAULT_N_THETA) -> HoughGrid:
    if width < 2 or height < 2:
        raise ConfigurationError(f"image must be at least 2x2, got {width}x{height}")
    if n_rho < 3:
        raise ConfigurationError(f"n_rho must be >= 3, got {n_rho}")
    if n_theta < 2:
        raise ConfigurationError(f"n_theta must be >= 2, got {n_theta}")
    diagonal = math.hypot(width, height)
    thetas = np.arange(n_theta, dtype=np.float64) * (math.pi / n_theta)
    rhos = np.linspace(-diagonal / 2, diagonal / 2, n_rho)
    thetas.setflags(write=False)
    rhos.setflags(write=False)
    return HoughGrid(width, height, n_rho, n_theta, thetas, rhos, diagonal)


def pixel_offsets(grid: HoughGrid) -> np.ndarray:
    """Signed offset of every pixel for every angle, shape [H, W, n_theta], float64."""
    xc = np.arange(grid.width, dtype=np.float64) - (grid.width - 1) / 2
    yc = np.arange(grid.height, dtype=np.float64) - (grid.height - 1) / 2
    cos = np.cos(grid.theta_samples)
    sin = np.sin(grid.theta_samples)
    return xc[None, :, None] * cos + yc[:, None, None] * sin


def _nearest_bins(rho: np.ndarray, centers: np.ndarray) -> np.ndarray:
    step = (centers[-1] - centers[0]) / (len(centers) - 1)
    guess = np.clip(np.floor((rho - centers[0]) / step + 0.5).astype(np.int64), 0, len(centers) - 1)
    best = guess.copy()
    best_dist = np.abs(rho - centers[guess])
    # rounding may land one bin off; settle it on the exact distances, lower index winning ties
    for delta in (-1, 1):
        cand = np.clip(guess + delta, 0, len(centers) - 1)
        dist = np.abs(rho - centers[cand])
        better = (dist < best_dist) | ((dist == best_dist) & (cand < best))
        best = np.where(better, cand, best)
        best_dist = np.where(better, dist, best_dist)
    return best


@dataclass(frozen=True)
class VoteMask:
    """Sparse pixel-to-bin correspondence.

    ``bin_of[y, x, t]`` is the offset bin pixel ``(x, y)`` votes into at
    angle ``t``. ``voters`` is the transpose: for flat bin ``r * n_theta + t``
    the voters are ``voters[voter_start[b]:voter_start[b + 1]]`` as flat pixel
    indices ``y * W + x``.
    """

    grid: HoughGrid
    bin_of: np.ndarray = field(repr=False)
    voter_start: np.ndarray = field(repr=False)
    voters: np.ndarray = field(repr=False)

    @property
    def total_votes(self) -> int:
        return int(self.bin_of.size)

    def voters_of(self, r: int, t: int) -> list[tuple[int, int]]:
        b = r * self.grid.n_theta + t
        flat = self.voters[self.voter_start[b]:self.voter_start[b + 1]]
        return [(int(p % self.grid.width), int(p // self.grid.width)) for p in flat]

    def dump(self, path) -> None:
        """Write one ``x y theta_index rho_bin`` line per vote, for diffing against oracles."""
        H, W, T = self.bin_of.shape
        with open(path, "w") as fh:
            for y in range(H):
                for x in range(W):
                    fh.write("".join(f"{x} {y} {t} {self.bin_of[y, x, t]}\n" for t in range(T)))


def transpose_index(bin_of: np.ndarray, n_rho: int) -> tuple[np.ndarray, np.ndarray]:
    H, W, T = bin_of.shape
    flat_bin = (bin_of.astype(np.int64) * T + np.arange(T)).reshape(H * W, T)
    pixel = np.repeat(np.arange(H * W, dtype=np.int64), T)
    keys = flat_bin.reshape(-1)
    order = np.argsort(keys, kind="stable")
    voters = pixel[order].astype(np.int32)
    counts = np.bincount(keys, minlength=n_rho * T)
    start = np.zeros(n_rho * T + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return start, voters


def build_vote_mask(grid: HoughGrid) -> VoteMask:
    bins = _nearest_bins(pixel_offsets(grid), grid.rho_centers).astype(np.int32)
    bins.setflags(write=False)
    start, voters = transpose_index(bins, grid.n_rho)
    return VoteMask(grid, bins, start, voters)


_mask_cache: dict[tuple[int, int, int, int], VoteMask] = {}


def vote_mask_for(width: int, height: int, n_rho: int = DEFAULT_N_RHO,
                  n_theta: int = DEFAULT_N_THETA) -> VoteMask:
    """Cached :func:`build_vote_mask`; masks are immutable so sharing is safe."""
    key = (width, height, n_rho, n_theta)
    if key not in _mask_cache:
        _mask_cache[key] = build_vote_mask(build_grid(width, height, n_rho, n_theta))
    return _mask_cache[key]


# ---------------------------------------------------------------------------
# Array-level transforms

def _check_image(arr: np.ndarray, mask: VoteMask):
    g = mask.grid
    if arr.ndim != 3 or arr.shape[:2] != (g.height, g.width):
        raise ConfigurationError(f"featuremap shape {arr.shape} does not match grid {g.height}x{g.width}")


def _check_hough(arr: np.ndarray, mask: VoteMask):
    g = mask.grid
    if arr.ndim != 3 or arr.shape[:2] != (g.n_rho, g.n_theta):
        raise ConfigurationError(f"Hough map shape {arr.shape} does not match grid {g.n_rho}x{g.n_theta}")


def ht_forward(F: np.ndarray, mask: VoteMask) -> np.ndarray:
    """HT(r, t, c) = (1/W) * sum of F over the pixels voting into (r, t)."""
    _check_image(F, mask)
    return kernels.vote_scatter(F, mask.bin_of, mask.grid.n_rho, 1.0 / mask.grid.width)


def iht_forward(hmap: np.ndarray, mask: VoteMask) -> np.ndarray:
    """IHT(x, y, c) = (1/n_theta) * sum over angles of the bin the pixel votes into."""
    _check_hough(hmap, mask)
    return kernels.vote_gather(hmap, mask.bin_of, 1.0 / mask.grid.n_theta)


def ht_backward(grad_out: np.ndarray, mask: VoteMask) -> np.ndarray:
    """Adjoint of :func:`ht_forward`: unnormalized backprojection scaled by 1/W."""
    _check_hough(grad_out, mask)
    return kernels.vote_gather(grad_out, mask.bin_of, 1.0 / mask.grid.width)


def iht_backward(grad_out: np.ndarray, mask: VoteMask) -> np.ndarray:
    """Adjoint of :func:`iht_forward`: scatter of grad / n_theta through the votes."""
    _check_image(grad_out, mask)
    return kernels.vote_scatter(grad_out, mask.bin_of, mask.grid.n_rho, 1.0 / mask.grid.n_theta)


# ---------------------------------------------------------------------------
# Differentiable layers

def ht(x: Tensor, mask: VoteMask) -> Tensor:
    return record(ht_forward(x.data, mask), [x], lambda g: (ht_backward(g, mask),))


def iht(x: Tensor, mask: VoteMask) -> Tensor:
    return record(iht_forward(x.data, mask), [x], lambda g: (iht_backward(g, mask),))


# ---------------------------------------------------------------------------
# Reference implementations: direct loops, no precomputed mask

def _oracle_bin(x: int, y: int, cos_t: float, sin_t: float, grid: HoughGrid) -> int:
    xc = x - (grid.width - 1) / 2
    yc = y - (grid.height - 1) / 2
    rho = xc * cos_t + yc * sin_t
    return int(np.argmin(np.abs(rho - grid.rho_centers)))


def naive_ht_oracle(F: np.ndarray, grid: HoughGrid) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    out = np.zeros((grid.n_rho, grid.n_theta, F.shape[2]))
    cs = list(zip(np.cos(grid.theta_samples).tolist(), np.sin(grid.theta_samples).tolist()))
    for y in range(grid.height):
        for x in range(grid.width):
            v = F[y, x]
            for t, (c, s) in enumerate(cs):
                out[_oracle_bin(x, y, c, s, grid), t] += v
    return out / grid.width


def naive_iht_oracle(hmap: np.ndarray, grid: HoughGrid) -> np.ndarray:
    hmap = np.asarray(hmap, dtype=np.float64)
    out = np.zeros((grid.height, grid.width, hmap.shape[2]))
    cs = list(zip(np.cos(grid.theta_samples).tolist(), np.sin(grid.theta_samples).tolist()))
    for y in range(grid.height):
        for x in range(grid.width):
            for t, (c, s) in enumerate(cs):
                out[y, x] += hmap[_oracle_bin(x, y, c, s, grid), t]
    return out / grid.n_theta
