"""Training objective terms and their gradients.

Each ``*_grad`` function returns ``(value, gradient)``; the plain functions
return the value only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

DEPTH_EPS = 1e-8


class DimMismatch(ValueError):
    pass


class TooFewGaussians(ValueError):
    pass


class NoValidPixels(ValueError):
    pass


@dataclass
class LossWeights:
    tv: float = 0.01
    knn: float = 1.0
    depth: float = 0.5
    co: float = 0.01
    cv: float = 0.001

    def __post_init__(self):
        for name in ("tv", "knn", "depth", "co", "cv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise DimMismatch(f"shape {np.shape(a)} vs {np.shape(b)}")


def loss_rgb_grad(rendered, target):
    _check_same(rendered, target)
    diff = rendered - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_rgb(rendered, target) -> float:
    return loss_rgb_grad(np.asarray(rendered, float), np.asarray(target, float))[0]


def loss_tv_grad(image):
    """Anisotropic L1 total variation averaged over all neighbour pairs."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    dv = img[1:] - img[:-1]
    dh = img[:, 1:] - img[:, :-1]
    n_pairs = dv.size + dh.size
    grad = np.zeros_like(img)
    if n_pairs == 0:
        return 0.0, grad.reshape(np.shape(image))
    value = (np.abs(dv).sum() + np.abs(dh).sum()) / n_pairs
    sv, sh = np.sign(dv) / n_pairs, np.sign(dh) / n_pairs
    grad[1:] += sv
    grad[:-1] -= sv
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    return float(value), grad.reshape(np.shape(image))


def loss_tv(image) -> float:
    return loss_tv_grad(image)[0]


# KNN deformation consistency ------------------------------------------------

@dataclass
class NeighborIndex:
    neighbors: list[np.ndarray]
    k: int

    def __post_init__(self):
        n = len(self.neighbors)
        rows = np.repeat(np.arange(n), [len(nb) for nb in self.neighbors])
        cols = np.concatenate(self.neighbors) if n else np.zeros(0, int)
        # neighbour sums, divided by the count afterwards so identical inputs cancel exactly
        self.adjacency = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        self.counts = np.array([len(nb) for nb in self.neighbors], dtype=np.float64)[:, None]

    def residual(self, positions):
        """x_i - mean_{j in N_i} x_j for every Gaussian."""
        return positions - (self.adjacency @ positions) / self.counts

    def __len__(self) -> int:
        return len(self.neighbors)

    def as_array(self) -> np.ndarray:
        return np.stack(self.neighbors)


def build_knn(positions, k: int = 8) -> NeighborIndex:
    """Exact K nearest canonical neighbours (no self loops; ties -> lower index)."""
    positions = np.asarray(getattr(positions, "positions", positions), dtype=np.float64)
    n = len(positions)
    if n < 2:
        raise TooFewGaussians("KNN needs at least two Gaussians")
    kk = min(k, n - 1)
    q = min(n, kk + 1 + 4)
    dist, idx = cKDTree(positions).query(positions, k=q)
    dist, idx = dist.reshape(n, q), idx.reshape(n, q)
    out = []
    for i in range(n):
        d, j = dist[i], idx[i]
        keep = j != i
        d, j = d[keep], j[keep]
        order = np.lexsort((j, d))
        out.append(j[order][:kk].astype(np.int64))
    return NeighborIndex(out, k)


def loss_knn_grad(positions, index: NeighborIndex):
    res = index.residual(positions)
    n = len(positions)
    value = float(np.sum(res * res) / n)
    return value, (2.0 / n) * (res - index.adjacency.T @ (res / index.counts))


def loss_knn(positions, index: NeighborIndex) -> float:
    return loss_knn_grad(np.asarray(positions, float), index)[0]


# colour regularizers ---------------------------------------------------------

def loss_color_offset_grad(delta_c):
    delta_c = np.asarray(delta_c, dtype=np.float64)
    n = len(delta_c)
    return float(np.sum(delta_c * delta_c) / n), (2.0 / n) * delta_c


def loss_color_offset(delta_c) -> float:
    return loss_color_offset_grad(delta_c)[0]


def loss_color_variance_grad(colors):
    colors = np.asarray(colors, dtype=np.float64)
    n = len(colors)
    res = colors - colors.mean(axis=0)
    return float(np.sum(res * res) / n), (2.0 / n) * res


def loss_color_variance(colors) -> float:
    return loss_color_variance_grad(colors)[0]


# depth ------------------------------------------------------------------------

def minmax_normalize(values, mask, eps: float = DEPTH_EPS):
    """Map the valid range to [0, 1]; a range below eps is treated as eps (constant maps -> 0)."""
    v = values[mask]
    lo, hi = v.min(), v.max()
    return (values - lo) / max(hi - lo, eps)


def loss_depth_grad(rendered, sup, mask=None, eps: float = DEPTH_EPS):
    """Mean L1 between min-max normalized depths over the valid pixels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    sup = np.asarray(sup, dtype=np.float64)
    _check_same(rendered, sup)
    mask = (sup > 0) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixels("depth loss needs at least one valid pixel")
    r = rendered[mask]
    s = sup[mask]
    r_lo, r_hi = r.min(), r.max()
    s_lo, s_hi = s.min(), s.max()
    live = r_hi - r_lo > eps       # below eps the guard is a constant
    span = max(r_hi - r_lo, eps)
    rn = (r - r_lo) / span
    sn = (s - s_lo) / max(s_hi - s_lo, eps)
    diff = rn - sn
    value = float(np.mean(np.abs(diff)))

    g_n = np.sign(diff) / n
    g_r = g_n / span
    g_span = -np.sum(g_n * (r - r_lo)) / span ** 2 if live else 0.0
    g_r[np.argmin(r)] += -np.sum(g_n) / span - g_span
    g_r[np.argmax(r)] += g_span
    grad = np.zeros_like(rendered)
    grad[mask] = g_r
    return value, grad


def loss_depth(rendered, sup, mask=None) -> float:
    return loss_depth_grad(rendered, sup, mask)[0]


def total_loss(terms: dict, weights: LossWeights) -> float:
    return (terms.get("rgb", 0.0)
            + weights.tv * terms.get("tv", 0.0)
            + weights.knn * terms.get("knn", 0.0)
            + weights.depth * terms.get("depth", 0.0)
            + weights.co * terms.get("co", 0.0)
            + weights.cv * terms.get("cv", 0.0))
