"""Optimization loop: warmup, Adam over all groups, densification, checkpoints."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .deformation import DeformationField, FieldConfig, log_scale_cap
from .losses import LossWeights, build_knn
from .objective import ObjectiveOptions, evaluate
from .optim import Adam
from .scene import Dataset, GaussianCloud, init_from_depth, load_ply, save_ply, scene_extent

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "rgb", "tv", "knn", "depth", "co", "cv", "total", "N")


class EmptyTrainSplit(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, terms: dict | None = None):
        super().__init__(f"non-finite loss at iteration {iteration}: {terms}")
        self.iteration = iteration


class GuardTripped(UserWarning):
    """Pruning would have emptied the cloud; the most opaque Gaussian was kept."""


@dataclass
class LearningRates:
    positions: float = 1.6e-4
    positions_final_factor: float = 0.01
    log_scales: float = 5e-3
    rotations: float = 1e-3
    opacity_logits: float = 5e-2
    colors: float = 2.5e-3
    embeddings: float = 1e-3
    grids: float = 1.6e-4
    mlp: float = 1.6e-5
    field_final_factor: float = 0.01    # exponential decay of grid and MLP rates over the run


@dataclass
class DensifyConfig:
    start: int = 500
    stop: int = 4000
    interval: int = 200
    grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 0.005
    percent_dense: float = 0.01
    max_scale_fraction: float = 0.1
    max_gaussians: int = 6000


@dataclass
class TrainConfig:
    iterations: int = 6000
    warmup_iterations: int = 1000
    lr: LearningRates = field(default_factory=LearningRates)
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    field: FieldConfig = field(default_factory=FieldConfig)
    knn_k: int = 8
    init_stride: int = 4
    init_max_points: int = 4000
    init_k: float = 1.0
    init_opacity: float = 0.1
    no_constraints: bool = False
    no_knn: bool = False
    no_delta_c: bool = False
    freeze_deformation: bool = False
    determinism: bool = False
    seed: int = 0
    tile: int = 8
    normalize_depth: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations > 0 and not self.warmup_iterations < self.iterations:
            raise ValueError("warmup_iterations must be smaller than iterations")
        for f in fields(LearningRates):
            if getattr(self.lr, f.name) <= 0:
                raise ValueError(f"learning rate {f.name} must be positive")

    def field_config(self) -> FieldConfig:
        flags = {"no_knn": self.no_knn, "frozen": self.freeze_deformation}
        return replace(self.field, no_constraints=self.no_constraints, no_delta_c=self.no_delta_c,
                       flags=flags)

    def effective_weights(self) -> LossWeights:
        return replace(self.weights, knn=0.0) if self.no_knn else self.weights

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["field"].pop("flags", None)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        nested = {"lr": LearningRates, "densify": DensifyConfig, "weights": LossWeights,
                  "field": FieldConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key in nested:
                sub_known = {f.name for f in fields(nested[key])}
                bad = set(value) - sub_known
                if bad:
                    raise ValueError(f"unknown keys in [{key}]: {sorted(bad)}")
                kwargs[key] = nested[key](**value)
            elif key == "betas":
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class TrainResult:
    cloud: GaussianCloud
    field: DeformationField
    log: list[dict]
    config: TrainConfig


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    source: np.ndarray       # new row -> old row, -1 for new Gaussians
    rebuild: bool
    guard_tripped: bool = False


def _unit_ball(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)


def densify_and_prune(cloud: GaussianCloud, grad_accum, grad_count, config: DensifyConfig,
                      extent: float, rng) -> DensifyResult:
    """Clone small / split large high-gradient Gaussians, then prune faint or oversized ones."""
    from .scene import quaternion_to_matrix

    n = len(cloud)
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    selected = mean_grad > config.grad_threshold
    budget = max(0, config.max_gaussians - n)
    if selected.sum() > budget:
        order = np.argsort(-mean_grad, kind="stable")[:budget]
        selected = np.zeros(n, dtype=bool)
        selected[order] = True
    scale = np.exp(cloud.log_scales)
    small = scale.max(axis=1) <= config.percent_dense * extent
    clone = np.nonzero(selected & small)[0]
    split = np.nonzero(selected & ~small)[0]

    keep = np.ones(n, dtype=bool)
    keep[split] = False
    parts = {k: [v[keep]] for k, v in cloud.params().items()}
    source = [np.nonzero(keep)[0]]

    if len(clone):
        for k, v in cloud.params().items():
            parts[k].append(v[clone])
        source.append(np.full(len(clone), -1))
    if len(split):
        parent = np.repeat(split, 2)
        rot = quaternion_to_matrix(cloud.rotations[parent])
        offs = np.einsum("nij,nj->ni", rot, scale[parent] * _unit_ball(rng, len(parent)))
        for k, v in cloud.params().items():
            child = v[parent].copy()
            if k == "positions":
                child += offs
            elif k == "log_scales":
                child -= math.log(1.6)
            parts[k].append(child)
        source.append(np.full(len(parent), -1))

    grown = GaussianCloud(**{k: np.concatenate(v) for k, v in parts.items()})
    src = np.concatenate(source)

    g_scale = np.exp(grown.log_scales).max(axis=1)
    prune = (grown.opacities < config.opacity_prune_threshold) | (g_scale > config.max_scale_fraction * extent)
    guard = False
    if prune.all():
        guard = True
        prune[np.argmax(grown.opacities)] = False
    if prune.any():
        grown = grown.subset(~prune)
        src = src[~prune]
    changed = len(clone) > 0 or len(split) > 0 or bool(prune.any())
    return DensifyResult(grown, src, changed, guard)


def _lr_table(cfg: TrainConfig, field_: DeformationField, it: int) -> dict:
    lr = cfg.lr
    frac = it / max(cfg.iterations - 1, 1)
    pos_lr = lr.positions * lr.positions_final_factor ** frac
    table = {"positions": pos_lr, "log_scales": lr.log_scales, "rotations": lr.rotations,
             "opacity_logits": lr.opacity_logits, "base_colors": lr.colors,
             "embeddings": lr.embeddings}
    decay = lr.field_final_factor ** frac
    for name in field_.params():
        table[name] = (lr.grids if name.startswith("grid.") else lr.mlp) * decay
    return table


def _project_scales(cloud: GaussianCloud, cap_fraction: float) -> None:
    cap = log_scale_cap(scene_extent(cloud), cap_fraction)
    np.minimum(cloud.log_scales, cap, out=cloud.log_scales)


def initial_cloud(dataset: Dataset, cfg: TrainConfig, rng) -> GaussianCloud:
    cloud = init_from_depth(dataset.train_frames, stride=cfg.init_stride, k_init=cfg.init_k,
                            embedding_dim=cfg.field.embedding_dim, initial_opacity=cfg.init_opacity)
    if cfg.init_max_points and len(cloud) > cfg.init_max_points:
        idx = np.sort(rng.choice(len(cloud), cfg.init_max_points, replace=False))
        cloud = cloud.subset(idx)
    return cloud


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    train_frames = dataset.train_frames
    if not train_frames:
        raise EmptyTrainSplit("dataset has no training frames")
    rng = np.random.default_rng(cfg.seed)
    cloud = initial_cloud(dataset, cfg, rng)
    field_cfg = cfg.field_config()
    field_ = DeformationField.create(field_cfg, cloud.positions, rng=np.random.default_rng(cfg.seed + 1))
    if not cfg.no_constraints:
        _project_scales(cloud, field_cfg.scale_cap_fraction)

    weights = cfg.effective_weights()
    index = build_knn(cloud, cfg.knn_k) if weights.knn > 0 and len(cloud) > 1 else None
    adam = Adam(cfg.betas, cfg.adam_eps)
    grad_accum = np.zeros(len(cloud))
    grad_count = np.zeros(len(cloud))
    rows = []
    frame_rng = np.random.default_rng(cfg.seed + 2)
    dens = cfg.densify

    for it in range(cfg.iterations):
        if cfg.determinism:
            frame = train_frames[it % len(train_frames)]
        else:
            frame = train_frames[int(frame_rng.integers(len(train_frames)))]
        deforming = not cfg.freeze_deformation and it >= cfg.warmup_iterations
        opts = ObjectiveOptions(deform=deforming, tile=cfg.tile, normalize_depth=cfg.normalize_depth)
        res = evaluate(cloud, field_, frame, index, weights, opts)
        if not np.isfinite(res.total):
            raise NonFiniteLoss(it, res.terms)

        lrs = _lr_table(cfg, field_, it)
        adam.step(cloud.params(), res.cloud_grads, lrs)
        if deforming:
            adam.step(field_.params(), res.field_grads, lrs)
        cloud.enforce_invariants()
        if not cfg.no_constraints:
            _project_scales(cloud, field_cfg.scale_cap_fraction)

        row = {"iter": it, **{k: res.terms[k] for k in ("rgb", "tv", "knn", "depth", "co", "cv")},
               "total": res.total, "N": len(cloud)}
        rows.append(row)

        if dens.start <= it < dens.stop:
            cam = frame.camera
            vis = res.visible
            g_ndc = res.means2d_grad * np.array([cam.width / 2.0, cam.height / 2.0])
            grad_accum[vis] += np.linalg.norm(g_ndc[vis], axis=1)
            grad_count[vis] += 1
            if it > dens.start and (it - dens.start) % dens.interval == 0:
                result = densify_and_prune(cloud, grad_accum, grad_count, dens, scene_extent(cloud), rng)
                if result.guard_tripped:
                    import warnings
                    warnings.warn(GuardTripped("pruning capped to keep one Gaussian"))
                if result.rebuild:
                    cloud = result.cloud
                    adam.reindex(GaussianCloud.param_names(), result.source)
                    if not cfg.no_constraints:
                        _project_scales(cloud, field_cfg.scale_cap_fraction)
                    index = (build_knn(cloud, cfg.knn_k) if weights.knn > 0 and len(cloud) > 1
                             else None)
                grad_accum = np.zeros(len(cloud))
                grad_count = np.zeros(len(cloud))

        if progress is not None:
            progress(it, row)
        if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir, it + 1, cloud, field_, rows, cfg)

    if out_dir is not None:
        save_checkpoint(out_dir, cfg.iterations, cloud, field_, rows, cfg)
    return TrainResult(cloud, field_, rows, cfg)


def format_log(rows: list[dict]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in rows:
        writer.writerow([r["iter"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:-1]] + [r["N"]])
    return buf.getvalue()


def save_checkpoint(out_dir, iteration: int, cloud, field_, rows, cfg: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(cloud, out / f"point_cloud_{iteration}.ply")
    field_.save(out / f"deform_{iteration}.bin")
    io.atomic_write_bytes(out / "train_log.csv", format_log(rows).encode("utf-8"))
    io.atomic_write_bytes(out / "config.json", json.dumps(cfg.to_dict(), indent=1).encode("utf-8"))


def latest_iteration(ckpt_dir) -> int:
    its = [int(p.stem.split("_")[-1]) for p in Path(ckpt_dir).glob("point_cloud_*.ply")]
    if not its:
        raise FileNotFoundError(f"no point_cloud_<iter>.ply in {ckpt_dir}")
    return max(its)


def load_checkpoint(ckpt_dir, iteration: int | None = None):
    ckpt_dir = Path(ckpt_dir)
    it = latest_iteration(ckpt_dir) if iteration is None else iteration
    cloud = load_ply(ckpt_dir / f"point_cloud_{it}.ply")
    field_ = DeformationField.load(ckpt_dir / f"deform_{it}.bin")
    return cloud, field_, it
