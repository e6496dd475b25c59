"""Image and geometric-fidelity metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .losses import DEPTH_EPS, DimMismatch, NoValidPixels, minmax_normalize


class EmptyCloud(ValueError):
    pass


PSNR_CAP = 100.0


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shape {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(img, win):
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim(a, b, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM, zero-padded Gaussian window, averaged over pixels and channels."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    win = gaussian_window(size, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, win), _blur(y, win)
        sxx = _blur(x * x, win) - mx * mx
        syy = _blur(y * y, win) - my * my
        sxy = _blur(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def _nn_dist(src, dst) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def _points(p):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud("point cloud is empty")
    return p


def percentile_nearest_rank(values, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, int(math.ceil(q / 100.0 * len(v))))
    return float(v[rank - 1])


def chamfer(p, q) -> float:
    """Symmetric mean of (non-squared) nearest-neighbour distances."""
    p, q = _points(p), _points(q)
    return 0.5 * (float(np.mean(_nn_dist(p, q))) + float(np.mean(_nn_dist(q, p))))


def hd95(p, q) -> float:
    p, q = _points(p), _points(q)
    return max(percentile_nearest_rank(_nn_dist(p, q)), percentile_nearest_rank(_nn_dist(q, p)))


def hausdorff(p, q) -> float:
    p, q = _points(p), _points(q)
    return max(float(np.max(_nn_dist(p, q))), float(np.max(_nn_dist(q, p))))


def cloud_from_gaussians(cloud, field, t: float, opacity_min: float = 0.05) -> np.ndarray:
    """Deformed Gaussian means at time t, keeping opacity >= opacity_min."""
    if field is None:
        pos = cloud.positions
    else:
        pos = field.deform(cloud, t).positions
    keep = cloud.opacities >= opacity_min
    return pos[keep].copy()


def depth_mse(rendered, truth, masks=None) -> float:
    """Per-frame min-max normalized depth MSE, averaged over frames."""
    if isinstance(rendered, np.ndarray) and rendered.ndim == 2:
        rendered, truth = [rendered], [truth]
        masks = None if masks is None else [masks]
    errs = []
    for k, (r, s) in enumerate(zip(rendered, truth)):
        r, s = _check(r, s)
        m = (s > 0) if masks is None else np.asarray(masks[k], dtype=bool)
        if not m.any():
            raise NoValidPixels(f"frame {k} has no valid depth pixel")
        rn = minmax_normalize(r, m, DEPTH_EPS)[m]
        sn = minmax_normalize(s, m, DEPTH_EPS)[m]
        errs.append(float(np.mean((rn - sn) ** 2)))
    return float(np.mean(errs))
