"""Shared builders for small scenes and brute-force reference computations."""

from __future__ import annotations

import numpy as np

from colongs.deformation import DeformationField, FieldConfig
from colongs.losses import build_knn
from colongs.scene import Camera, Frame, GaussianCloud

TINY_FIELD = dict(levels=2, spatial_res=2, temporal_res=2, features=1, width=4, depth=2,
                  embedding_dim=2)


def micro_scene(seed: int, field_kw: dict | None = None, head_noise: float = 0.02,
                trunk_noise: float = 0.3, size: int = 8, n_range=(2, 11), knn_k: int = 3):
    """A random scene of at most ten Gaussians in front of an 8x8 camera, with a perturbed field."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(*n_range))
    pos = np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(2.0, 3.0, n)]
    kw = dict(TINY_FIELD if field_kw is None else field_kw)
    cloud = GaussianCloud.create(
        pos, log_scales=rng.uniform(-2.0, -1.2, (n, 3)), rotations=rng.normal(size=(n, 4)),
        opacities=rng.uniform(0.2, 0.6, n), colors=rng.uniform(0.2, 0.8, (n, 3)),
        embedding_dim=kw["embedding_dim"])
    cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    cloud.embeddings[:] = rng.normal(size=cloud.embeddings.shape) * 0.3
    field = DeformationField.create(FieldConfig(**kw), pos, rng=rng)
    for name, value in field.params().items():
        if name.startswith("grid"):
            value += rng.normal(size=value.shape) * 0.1
        elif name.startswith("head") or name.startswith("color.w1") or name.startswith("color.b1"):
            value += rng.normal(size=value.shape) * head_noise
        else:
            value += rng.normal(size=value.shape) * trunk_noise
    f = size * 1.0
    cam = Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size,
                 t=float(rng.uniform()))
    rgb = rng.uniform(0, 1, (size, size, 3))
    depth = rng.uniform(1, 3, (size, size))
    depth[rng.uniform(size=(size, size)) < 0.2] = 0.0
    index = build_knn(pos, min(knn_k, n - 1)) if n > 1 else None
    return cloud, field, Frame(cam, rgb, depth), index


def brute_nn(src, dst):
    d = np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)


def brute_knn(points, k):
    n = len(points)
    out = []
    for i in range(n):
        d = [(float(np.sqrt(((points[i] - points[j]) ** 2).sum())), j) for j in range(n) if j != i]
        d.sort()
        out.append([j for _, j in d[:k]])
    return np.array(out)


def brute_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM by explicit window sums over a zero-padded image."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    win = np.outer(g, g)
    r = size // 2
    c1, c2 = k1 ** 2, k2 ** 2
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, ch = a.shape
    vals = []
    for c in range(ch):
        pa = np.pad(a[..., c], r)
        pb = np.pad(b[..., c], r)
        total = 0.0
        for i in range(h):
            for j in range(w):
                wa = pa[i:i + size, j:j + size]
                wb = pb[i:i + size, j:j + size]
                mx = (win * wa).sum()
                my = (win * wb).sum()
                sxx = (win * wa * wa).sum() - mx * mx
                syy = (win * wb * wb).sum() - my * my
                sxy = (win * wa * wb).sum() - mx * my
                total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(total / (h * w))
    return float(np.mean(vals))


def central_difference(f, arr, i, h0=1e-4, h_min=1e-8, f0=None):
    """Central difference of f() w.r.t. arr.flat[i].

    With f0 = f() at the current point, a stencil whose one-sided slopes agree is accepted
    after two evaluations. Otherwise the estimate is compared with one at a ten times smaller
    step, and the step shrinks while they disagree (a visibility threshold or an L1 kink
    fell inside the stencil).
    """
    flat = arr.reshape(-1)
    old = flat[i]

    def central(h):
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        return (fp - fm) / (2 * h), fp, fm

    h = h0
    c, fp, fm = central(h)
    if f0 is not None and abs((fp - f0) - (f0 - fm)) / h <= 1e-4 * abs(c) + 1e-7:
        return c
    while h > h_min:
        finer = central(h * 0.1)[0]
        if abs(c - finer) <= 1e-4 * max(abs(c), abs(finer)) + 1e-9:
            return c
        h *= 0.1
        c = finer
    return c


def grad_close(analytic, fd, rel=1e-3, abs_=1e-6) -> bool:
    return abs(analytic - fd) <= max(rel * max(abs(analytic), abs(fd)), abs_)


def tv_oracle(img):
    if img.ndim == 2:
        img = img[..., None]
    h, w, ch = img.shape
    total, pairs = 0.0, 0
    for c in range(ch):
        for i in range(h):
            for j in range(w):
                if i + 1 < h:
                    total += abs(img[i + 1, j, c] - img[i, j, c])
                    pairs += 1
                if j + 1 < w:
                    total += abs(img[i, j + 1, c] - img[i, j, c])
                    pairs += 1
    return total / pairs


def depth_oracle(r, s, mask):
    rv = [float(x) for x, m in zip(r.ravel(), mask.ravel()) if m]
    sv = [float(x) for x, m in zip(s.ravel(), mask.ravel()) if m]
    rl, rh, sl, sh = min(rv), max(rv), min(sv), max(sv)
    acc = 0.0
    for a, b in zip(rv, sv):
        acc += abs((a - rl) / max(rh - rl, 1e-8) - (b - sl) / max(sh - sl, 1e-8))
    return acc / len(rv)
