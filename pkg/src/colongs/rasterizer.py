"""Tile-based differentiable Gaussian splatting on the CPU.

Forward: EWA projection of 3D Gaussians, global depth sort, per-tile binning,
front-to-back alpha compositing of colour, expected depth and coverage.
Backward: the exact adjoint of projection and compositing, with the depth
order held fixed.  Pixel centres sit at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .scene import Camera, quaternion_to_matrix, sigmoid

ANTI_ALIAS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
FRUSTUM_MARGIN = 1.3
_N_GRAD = 10  # per-entry adjoint record: mean(2), conic(3), opacity, color(3), depth


class AuxMismatch(ValueError):
    pass


@dataclass
class Splats:
    """Projected Gaussians sorted front to back."""
    means: np.ndarray       # (M, 2) pixel coordinates
    conics: np.ndarray      # (M, 3) inverse 2D covariance (a, b, c)
    depths: np.ndarray      # (M,) view-space z
    opacities: np.ndarray   # (M,)
    colors: np.ndarray      # (M, 3)
    index: np.ndarray       # (M,) source Gaussian index
    radii: np.ndarray       # (M,) binning radius in pixels
    n_source: int
    # kept for the adjoint
    cam_points: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    jw: np.ndarray
    scales: np.ndarray
    rotmats: np.ndarray
    quats: np.ndarray

    def __len__(self) -> int:
        return len(self.depths)


@dataclass
class RenderAux:
    final_T: np.ndarray
    n_contrib: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    tile: int
    n_splats: int
    raw_depth: np.ndarray
    normalize_depth: bool


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    aux: RenderAux


@dataclass
class Gradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    means2d: np.ndarray     # d/d pixel mean, for densification statistics
    visible: np.ndarray


def _splat_radius(cov2d, opac):
    """Radius beyond which alpha < 1/255, never smaller than 3 sigma."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    cut = np.sqrt(2.0 * np.log(np.maximum(255.0 * opac, 1.0)))
    return np.sqrt(lam) * np.maximum(3.0, cut)


def project(state, camera: Camera) -> Splats:
    """Project a (deformed or canonical) cloud; culls, then sorts by depth."""
    pos = np.asarray(state.positions, dtype=np.float64)
    w = camera.rotation
    pc = pos @ w.T + camera.translation
    z = pc[:, 2]
    opac = sigmoid(np.asarray(state.opacity_logits, dtype=np.float64))
    keep = (z > camera.znear) & (z < camera.zfar) & (opac >= ALPHA_MIN)
    idx = np.nonzero(keep)[0]
    pc, z, opac = pc[idx], z[idx], opac[idx]

    quats = np.asarray(state.rotations, dtype=np.float64)[idx]
    rot = quaternion_to_matrix(quats)
    scales = np.exp(np.asarray(state.log_scales, dtype=np.float64)[idx])
    m = rot * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)

    fx, fy = camera.fx, camera.fy
    inv_z = 1.0 / z
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * pc[:, 0] * inv_z ** 2
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * pc[:, 1] * inv_z ** 2
    jw = jac @ w
    cov = jw @ cov3d @ np.swapaxes(jw, 1, 2)
    cov2d = np.stack([cov[:, 0, 0] + ANTI_ALIAS, cov[:, 0, 1], cov[:, 1, 1] + ANTI_ALIAS], axis=1)
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
    conics = np.stack([cov2d[:, 2], -cov2d[:, 1], cov2d[:, 0]], axis=1) / det[:, None]
    means = np.stack([fx * pc[:, 0] * inv_z + camera.cx, fy * pc[:, 1] * inv_z + camera.cy], axis=1)
    radii = _splat_radius(cov2d, opac)

    # mean inside the frustum widened 1.3x about the principal point, footprint touching the image
    u, v = means[:, 0], means[:, 1]
    lo_u = camera.cx - FRUSTUM_MARGIN * (camera.cx + 0.5)
    hi_u = camera.cx + FRUSTUM_MARGIN * (camera.width - 0.5 - camera.cx)
    lo_v = camera.cy - FRUSTUM_MARGIN * (camera.cy + 0.5)
    hi_v = camera.cy + FRUSTUM_MARGIN * (camera.height - 0.5 - camera.cy)
    inside = ((u >= lo_u) & (u <= hi_u) & (v >= lo_v) & (v <= hi_v)
              & (u + radii >= -0.5) & (u - radii <= camera.width - 0.5)
              & (v + radii >= -0.5) & (v - radii <= camera.height - 0.5)
              & (det > 0))
    order = np.nonzero(inside)[0]
    order = order[np.argsort(z[order], kind="stable")]
    src = idx[order]
    colors = np.asarray(state.colors, dtype=np.float64)[src]
    return Splats(
        means=np.ascontiguousarray(means[order]), conics=np.ascontiguousarray(conics[order]),
        depths=np.ascontiguousarray(z[order]), opacities=np.ascontiguousarray(opac[order]),
        colors=np.ascontiguousarray(colors), index=src, radii=radii[order], n_source=len(pos),
        cam_points=pc[order], cov3d=cov3d[order], cov2d=cov2d[order], jw=jw[order],
        scales=scales[order], rotmats=rot[order], quats=quats[order],
    )


@numba.njit(cache=True)
def _bin(means, radii, width, height, tile):
    m = means.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty, dtype=np.int64)
    rect = np.empty((m, 4), dtype=np.int64)
    for i in range(m):
        x0 = max(0, int(np.ceil(means[i, 0] - radii[i])))
        x1 = min(width - 1, int(np.floor(means[i, 0] + radii[i])))
        y0 = max(0, int(np.ceil(means[i, 1] - radii[i])))
        y1 = min(height - 1, int(np.floor(means[i, 1] + radii[i])))
        if x0 > x1 or y0 > y1:
            rect[i, 0] = 0
            rect[i, 1] = -1
            rect[i, 2] = 0
            rect[i, 3] = -1
            continue
        rect[i, 0] = x0 // tile
        rect[i, 1] = x1 // tile
        rect[i, 2] = y0 // tile
        rect[i, 3] = y1 // tile
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    for k in range(ntx * nty):
        offsets[k + 1] = offsets[k] + counts[k]
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for i in range(m):
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                k = ty * ntx + tx
                entries[fill[k]] = i
                fill[k] += 1
    return offsets, entries


@numba.njit(parallel=True, cache=True)
def _composite(means, conics, opac, colors, depths, offsets, entries, width, height, tile,
               rgb, depth, alpha, final_T, n_contrib):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    for tid in numba.prange(ntiles):
        tx = tid % ntx
        ty = tid // ntx
        start = offsets[tid]
        stop = offsets[tid + 1]
        for py in range(ty * tile, min(height, ty * tile + tile)):
            for px in range(tx * tile, min(width, tx * tile + tile)):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                d = 0.0
                a = 0.0
                last = start
                for e in range(start, stop):
                    i = entries[e]
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    al = min(ALPHA_MAX, opac[i] * np.exp(power))
                    if al < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - al)
                    if test_T < T_MIN:
                        break
                    w = al * T
                    cr += colors[i, 0] * w
                    cg += colors[i, 1] * w
                    cb += colors[i, 2] * w
                    d += depths[i] * w
                    a += w
                    T = test_T
                    last = e + 1
                rgb[py, px, 0] = cr
                rgb[py, px, 1] = cg
                rgb[py, px, 2] = cb
                depth[py, px] = d
                alpha[py, px] = a
                final_T[py, px] = T
                n_contrib[py, px] = last


@numba.njit(parallel=True, cache=True)
def _composite_backward(means, conics, opac, colors, depths, offsets, entries, width, height,
                        tile, final_T, n_contrib, g_rgb, g_depth, g_alpha, out):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    for tid in numba.prange(ntiles):
        tx = tid % ntx
        ty = tid // ntx
        start = offsets[tid]
        for py in range(ty * tile, min(height, ty * tile + tile)):
            for px in range(tx * tile, min(width, tx * tile + tile)):
                gr = g_rgb[py, px, 0]
                gg = g_rgb[py, px, 1]
                gb = g_rgb[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and ga == 0.0:
                    continue
                T = final_T[py, px]
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                acc_a = 0.0
                for e in range(n_contrib[py, px] - 1, start - 1, -1):
                    i = entries[e]
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    gauss = np.exp(power)
                    raw = opac[i] * gauss
                    al = min(ALPHA_MAX, raw)
                    if al < ALPHA_MIN:
                        continue
                    one_m = 1.0 - al
                    T = T / one_m
                    w = al * T
                    # d(sum)/d(alpha_i) = v_i T_i - (suffix sum) / (1 - alpha_i)
                    dal = (gr * (colors[i, 0] * T - acc_r / one_m)
                           + gg * (colors[i, 1] * T - acc_g / one_m)
                           + gb * (colors[i, 2] * T - acc_b / one_m)
                           + gd * (depths[i] * T - acc_d / one_m)
                           + ga * (T - acc_a / one_m))
                    acc_r += colors[i, 0] * w
                    acc_g += colors[i, 1] * w
                    acc_b += colors[i, 2] * w
                    acc_d += depths[i] * w
                    acc_a += w
                    out[e, 6] += gr * w
                    out[e, 7] += gg * w
                    out[e, 8] += gb * w
                    out[e, 9] += gd * w
                    if raw >= ALPHA_MAX:
                        continue
                    out[e, 5] += dal * gauss
                    gp = dal * raw
                    out[e, 0] += gp * (conics[i, 0] * dx + conics[i, 1] * dy)
                    out[e, 1] += gp * (conics[i, 1] * dx + conics[i, 2] * dy)
                    out[e, 2] += -0.5 * gp * dx * dx
                    out[e, 3] += -gp * dx * dy
                    out[e, 4] += -0.5 * gp * dy * dy


@numba.njit(cache=True)
def _reduce_entries(entries, per_entry, m):
    out = np.zeros((m, per_entry.shape[1]))
    for e in range(entries.shape[0]):
        i = entries[e]
        for k in range(per_entry.shape[1]):
            out[i, k] += per_entry[e, k]
    return out


def render(splats: Splats, camera: Camera, tile: int = 16, normalize_depth: bool = False) -> RenderOutput:
    h, w = camera.height, camera.width
    offsets, entries = _bin(splats.means, splats.radii, w, h, tile)
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    final_T = np.ones((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    if len(splats):
        _composite(splats.means, splats.conics, splats.opacities, splats.colors, splats.depths,
                   offsets, entries, w, h, tile, rgb, depth, alpha, final_T, n_contrib)
    else:
        n_contrib[:] = 0
    aux = RenderAux(final_T, n_contrib, offsets, entries, tile, len(splats), depth, normalize_depth)
    out_depth = depth / np.maximum(alpha, 1e-8) if normalize_depth else depth
    return RenderOutput(rgb=rgb, depth=out_depth, alpha=alpha, aux=aux)


def _conic_backward(cov2d, g_conic):
    p, q, r = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = p * r - q * q
    d2 = det * det
    ga, gb, gc = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    gp = (ga * (-r * r) + gb * (q * r) + gc * (-q * q)) / d2
    gq = (ga * (2 * q * r) + gb * (-(det + 2 * q * q)) + gc * (2 * q * p)) / d2
    gr = (ga * (-q * q) + gb * (q * p) + gc * (-p * p)) / d2
    return gp, gq, gr


def _quat_backward(q, g_rot):
    """Adjoint of quaternion_to_matrix (including its normalization)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = g_rot.reshape(-1, 9)
    dw = 2 * (-z * g[:, 1] + y * g[:, 2] + z * g[:, 3] - x * g[:, 5] - y * g[:, 6] + x * g[:, 7])
    dx = 2 * (y * g[:, 1] + z * g[:, 2] + y * g[:, 3] - 2 * x * g[:, 4] - w * g[:, 5]
              + z * g[:, 6] + w * g[:, 7] - 2 * x * g[:, 8])
    dy = 2 * (-2 * y * g[:, 0] + x * g[:, 1] + w * g[:, 2] + x * g[:, 3] + z * g[:, 5]
              - w * g[:, 6] + z * g[:, 7] - 2 * y * g[:, 8])
    dz = 2 * (-2 * z * g[:, 0] - w * g[:, 1] + x * g[:, 2] + w * g[:, 3] - 2 * z * g[:, 4]
              + y * g[:, 5] + x * g[:, 6] + y * g[:, 7])
    gn = np.stack([dw, dx, dy, dz], axis=1)
    return (gn - qn * np.sum(qn * gn, axis=1, keepdims=True)) / norm


def render_backward(grad_rgb, grad_depth, grad_alpha, output: RenderOutput, splats: Splats,
                    camera: Camera) -> Gradients:
    """Adjoint of project + render for a scalar loss with the given buffer gradients."""
    aux = output.aux
    h, w = camera.height, camera.width
    if (aux.n_splats != len(splats) or aux.final_T.shape != (h, w)
            or (len(aux.entries) and aux.entries.max() >= len(splats))):
        raise AuxMismatch("auxiliary buffers do not belong to these splats/camera")
    n = splats.n_source
    grads = Gradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                      np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n, dtype=bool))
    m = len(splats)
    if m == 0:
        return grads

    g_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    g_depth = np.ascontiguousarray(grad_depth, dtype=np.float64) if grad_depth is not None else np.zeros((h, w))
    g_alpha = np.ascontiguousarray(grad_alpha, dtype=np.float64) if grad_alpha is not None else np.zeros((h, w))
    if aux.normalize_depth:
        a = np.maximum(output.alpha, 1e-8)
        g_alpha = g_alpha - np.where(output.alpha > 1e-8, g_depth * aux.raw_depth / (a * a), 0.0)
        g_depth = g_depth / a

    per_entry = np.zeros((len(aux.entries), _N_GRAD))
    _composite_backward(splats.means, splats.conics, splats.opacities, splats.colors, splats.depths,
                        aux.offsets, aux.entries, w, h, aux.tile, aux.final_T, aux.n_contrib,
                        g_rgb, g_depth, g_alpha, per_entry)
    g = _reduce_entries(aux.entries, per_entry, m)
    g_mean, g_conic, g_op, g_col, g_z = g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9], g[:, 9].copy()

    # conic -> 2D covariance -> (3D covariance, JW)
    gp, gq, gr = _conic_backward(splats.cov2d, g_conic)
    gcov = np.empty((m, 2, 2))
    gcov[:, 0, 0] = gp
    gcov[:, 0, 1] = 0.5 * gq
    gcov[:, 1, 0] = 0.5 * gq
    gcov[:, 1, 1] = gr
    jw = splats.jw
    g_cov3d = np.swapaxes(jw, 1, 2) @ gcov @ jw
    g_jw = 2.0 * gcov @ jw @ splats.cov3d
    g_jac = g_jw @ camera.rotation.T

    pc = splats.cam_points
    fx, fy = camera.fx, camera.fy
    iz = 1.0 / pc[:, 2]
    g_pc = np.zeros((m, 3))
    g_pc[:, 0] = g_mean[:, 0] * fx * iz - g_jac[:, 0, 2] * fx * iz ** 2
    g_pc[:, 1] = g_mean[:, 1] * fy * iz - g_jac[:, 1, 2] * fy * iz ** 2
    g_pc[:, 2] = (g_z
                  - g_mean[:, 0] * fx * pc[:, 0] * iz ** 2
                  - g_mean[:, 1] * fy * pc[:, 1] * iz ** 2
                  - g_jac[:, 0, 0] * fx * iz ** 2
                  - g_jac[:, 1, 1] * fy * iz ** 2
                  + g_jac[:, 0, 2] * 2 * fx * pc[:, 0] * iz ** 3
                  + g_jac[:, 1, 2] * 2 * fy * pc[:, 1] * iz ** 3)
    g_pos = g_pc @ camera.rotation

    # 3D covariance -> scale, rotation
    mmat = splats.rotmats * splats.scales[:, None, :]
    g_m = 2.0 * (0.5 * (g_cov3d + np.swapaxes(g_cov3d, 1, 2))) @ mmat
    g_scale = np.sum(g_m * splats.rotmats, axis=1)
    g_rotm = g_m * splats.scales[:, None, :]
    g_quat = _quat_backward(splats.quats, g_rotm)

    src = splats.index
    grads.positions[src] = g_pos
    grads.log_scales[src] = g_scale * splats.scales
    grads.rotations[src] = g_quat
    grads.opacity_logits[src] = g_op * splats.opacities * (1.0 - splats.opacities)
    grads.colors[src] = g_col
    grads.means2d[src] = g_mean
    grads.visible[src] = True
    return grads


def render_state(state, camera: Camera, tile: int = 16, normalize_depth: bool = False):
    splats = project(state, camera)
    return render(splats, camera, tile=tile, normalize_depth=normalize_depth), splats
