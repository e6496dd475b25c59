"""One evaluation of the full training objective for a single frame, with gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .deformation import DeformationField, identity_view
from .losses import LossWeights, NeighborIndex
from .rasterizer import project, render, render_backward
from .scene import Frame, GaussianCloud


@dataclass
class ObjectiveOptions:
    deform: bool = True          # False: canonical cloud used as-is (warmup / frozen field)
    use_knn: bool = True
    tile: int = 16
    normalize_depth: bool = False


@dataclass
class ObjectiveResult:
    total: float
    terms: dict
    cloud_grads: dict | None = None
    field_grads: dict | None = None
    means2d_grad: np.ndarray | None = None
    visible: np.ndarray | None = None
    render: object = None
    state: object = None
    extras: dict = field(default_factory=dict)


def evaluate(cloud: GaussianCloud, field_: DeformationField | None, frame: Frame,
             index: NeighborIndex | None, weights: LossWeights,
             options: ObjectiveOptions = ObjectiveOptions(), with_grad: bool = True,
             extent: float | None = None) -> ObjectiveResult:
    cam = frame.camera
    deforming = options.deform and field_ is not None
    state = (field_.deform(cloud, cam.t, extent=extent, record=with_grad) if deforming
             else identity_view(cloud, cam.t))

    splats = project(state, cam)
    out = render(splats, cam, tile=options.tile, normalize_depth=options.normalize_depth)

    terms, grads = {}, {}
    terms["rgb"], g_rgb = losses.loss_rgb_grad(out.rgb, frame.rgb)
    terms["tv"], g_tv = losses.loss_tv_grad(out.rgb)
    mask = frame.valid_mask
    if mask.any():
        terms["depth"], g_depth = losses.loss_depth_grad(out.depth, frame.depth_sup, mask)
    else:
        terms["depth"], g_depth = 0.0, np.zeros_like(out.depth)
    use_knn = options.use_knn and index is not None and weights.knn > 0
    if use_knn:
        terms["knn"], g_knn = losses.loss_knn_grad(state.positions, index)
    else:
        terms["knn"], g_knn = 0.0, None
    terms["co"], g_co = losses.loss_color_offset_grad(state.delta_c)
    terms["cv"], g_cv = losses.loss_color_variance_grad(state.colors)
    total = losses.total_loss(terms, weights)
    result = ObjectiveResult(total=total, terms=terms, render=out, state=state)
    if not with_grad:
        return result

    grad_img = g_rgb + weights.tv * g_tv
    rg = render_backward(grad_img, weights.depth * g_depth, None, out, splats, cam)
    g_pos = rg.positions
    if use_knn:
        g_pos = g_pos + weights.knn * g_knn
    g_col = rg.colors + weights.cv * g_cv

    if deforming:
        gc, gf = field_.deform_backward(cloud, state, g_pos, rg.log_scales, rg.rotations,
                                        rg.opacity_logits, g_col, g_dc=weights.co * g_co)
    else:
        gc = {
            "positions": g_pos, "log_scales": rg.log_scales, "rotations": rg.rotations,
            "opacity_logits": rg.opacity_logits, "base_colors": g_col,
            "embeddings": np.zeros_like(cloud.embeddings),
        }
        gf = None
    result.cloud_grads = gc
    result.field_grads = gf
    result.means2d_grad = rg.means2d
    result.visible = rg.visible
    return result
