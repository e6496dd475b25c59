"""Time-conditioned deformation field over a HexPlane encoding.

The field maps (canonical Gaussian, t) to additive position / log-scale /
rotation offsets and a multiplicative colour offset.  Scale and rotation
offsets are clipped, the linear scale is capped at a fraction of the scene
extent, and opacity is left untouched unless constraints are disabled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import io
from .scene import GaussianCloud, sigmoid

MAGIC = b"CSPLATDF"
VERSION = 1
SPATIAL_PLANES = ((0, 1), (0, 2), (1, 2))
TEMPORAL_PLANES = (0, 1, 2)     # paired with t
FLAG_BITS = {"no_constraints": 1, "no_delta_c": 2, "no_knn": 4, "frozen": 8}


class MalformedCheckpoint(ValueError):
    pass


@dataclass
class FieldConfig:
    levels: int = 2
    spatial_res: int = 32
    temporal_res: int = 16
    features: int = 16
    width: int = 64
    depth: int = 2
    embedding_dim: int = 8
    tau_s: float = 0.05
    tau_r: float = 0.05
    scale_cap_fraction: float = 0.05
    no_constraints: bool = False
    no_delta_c: bool = False
    flags: dict = field(default_factory=dict)   # extra ablation bits recorded in checkpoints

    def level_res(self, level: int) -> tuple[int, int]:
        return self.spatial_res * 2 ** level, self.temporal_res * 2 ** level

    @property
    def feature_dim(self) -> int:
        return 2 * self.features * self.levels


@numba.njit(cache=True)
def _bilerp(grid, ca, cb):
    """Bilinear lookup of an (Ra, Rb, F) grid at normalized coords; also d/dca, d/dcb."""
    ra, rb, nf = grid.shape
    n = ca.shape[0]
    val = np.empty((n, nf))
    da = np.empty((n, nf))
    db = np.empty((n, nf))
    for k in range(n):
        fa = ca[k] * (ra - 1)
        fb = cb[k] * (rb - 1)
        i0 = min(int(np.floor(fa)), ra - 2)
        j0 = min(int(np.floor(fb)), rb - 2)
        wa = fa - i0
        wb = fb - j0
        for f in range(nf):
            g00 = grid[i0, j0, f]
            g10 = grid[i0 + 1, j0, f]
            g01 = grid[i0, j0 + 1, f]
            g11 = grid[i0 + 1, j0 + 1, f]
            val[k, f] = ((1 - wa) * (1 - wb) * g00 + wa * (1 - wb) * g10
                         + (1 - wa) * wb * g01 + wa * wb * g11)
            da[k, f] = ((1 - wb) * (g10 - g00) + wb * (g11 - g01)) * (ra - 1)
            db[k, f] = ((1 - wa) * (g01 - g00) + wa * (g11 - g10)) * (rb - 1)
    return val, da, db


@numba.njit(cache=True)
def _bilerp_scatter(out, ca, cb, gval):
    ra, rb, nf = out.shape
    for k in range(ca.shape[0]):
        fa = ca[k] * (ra - 1)
        fb = cb[k] * (rb - 1)
        i0 = min(int(np.floor(fa)), ra - 2)
        j0 = min(int(np.floor(fb)), rb - 2)
        wa = fa - i0
        wb = fb - j0
        for f in range(nf):
            g = gval[k, f]
            out[i0, j0, f] += (1 - wa) * (1 - wb) * g
            out[i0 + 1, j0, f] += wa * (1 - wb) * g
            out[i0, j0 + 1, f] += (1 - wa) * wb * g
            out[i0 + 1, j0 + 1, f] += wa * wb * g


class HexPlaneEncoder:
    """Six factorized planes per level: (x,y),(x,z),(y,z),(x,t),(y,t),(z,t)."""

    def __init__(self, config: FieldConfig, bbox_lo, bbox_hi, rng=None, grids=None):
        self.config = config
        self.lo = np.asarray(bbox_lo, dtype=np.float64)
        self.hi = np.asarray(bbox_hi, dtype=np.float64)
        if grids is None:
            rng = np.random.default_rng(0) if rng is None else rng
            grids = {}
            for lvl in range(config.levels):
                rs, rt = config.level_res(lvl)
                for a, b in SPATIAL_PLANES:
                    grids[self.plane_name(lvl, a, b)] = rng.uniform(0.1, 0.5, (rs, rs, config.features))
                for a in TEMPORAL_PLANES:
                    grids[self.plane_name(lvl, a, 3)] = np.ones((rs, rt, config.features))
        self.grids = grids

    @staticmethod
    def plane_name(level: int, a: int, b: int) -> str:
        axes = "xyzt"
        return f"grid.l{level}.{axes[a]}{axes[b]}"

    @classmethod
    def for_positions(cls, config, positions, rng=None, margin=0.05):
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        pad = margin * np.maximum(hi - lo, 1e-6)
        return cls(config, lo - pad, hi + pad, rng=rng)

    def normalize(self, positions):
        u = (positions - self.lo) / (self.hi - self.lo)
        inside = (u >= 0.0) & (u <= 1.0)
        return np.clip(u, 0.0, 1.0), inside

    def encode(self, positions, t, return_cache=False):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        u, inside = self.normalize(positions)
        n = len(u)
        tt = np.full(n, float(np.clip(t, 0.0, 1.0)))
        coords = [np.ascontiguousarray(u[:, 0]), np.ascontiguousarray(u[:, 1]),
                  np.ascontiguousarray(u[:, 2]), tt]
        feats, cache = [], []
        for lvl in range(self.config.levels):
            for group in (SPATIAL_PLANES, tuple((a, 3) for a in TEMPORAL_PLANES)):
                looked = [(a, b, *_bilerp(self.grids[self.plane_name(lvl, a, b)], coords[a], coords[b]))
                          for a, b in group]
                prod = looked[0][2] * looked[1][2] * looked[2][2]
                feats.append(prod)
                cache.append((lvl, looked))
        out = np.concatenate(feats, axis=1)
        if return_cache:
            return out, (coords, inside, cache)
        return out

    def backward(self, g_feat, enc_cache, grads: dict):
        """Accumulate grid gradients into `grads`; return d/d positions (N, 3)."""
        coords, inside, cache = enc_cache
        nf = self.config.features
        n = g_feat.shape[0]
        g_u = np.zeros((n, 4))
        for gi, (lvl, looked) in enumerate(cache):
            g = g_feat[:, gi * nf:(gi + 1) * nf]
            vals = [item[2] for item in looked]
            for k, (a, b, _, da, db) in enumerate(looked):
                others = vals[(k + 1) % 3] * vals[(k + 2) % 3]
                gv = np.ascontiguousarray(g * others)
                name = self.plane_name(lvl, a, b)
                _bilerp_scatter(grads[name], coords[a], coords[b], gv)
                g_u[:, a] += np.sum(gv * da, axis=1)
                g_u[:, b] += np.sum(gv * db, axis=1)
        return g_u[:, :3] * inside / (self.hi - self.lo)


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


@dataclass
class DeformedCloud:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    delta_c: np.ndarray
    rotations_prenorm: np.ndarray
    t: float
    cache: dict | None = None

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)


class DeformationField:
    def __init__(self, config: FieldConfig, encoder: HexPlaneEncoder, params: dict | None = None,
                 rng=None):
        self.config = config
        self.encoder = encoder
        if params is None:
            params = self._init_params(np.random.default_rng(0) if rng is None else rng)
        self.mlp = params

    def _init_params(self, rng):
        cfg = self.config
        p = {}
        fan = cfg.feature_dim
        for k in range(cfg.depth):
            p[f"mlp.w{k}"], p[f"mlp.b{k}"] = _linear_init(rng, fan, cfg.width)
            fan = cfg.width
        heads = [("dx", 3), ("ds", 3), ("dr", 4)]
        if cfg.no_constraints:
            heads.append(("da", 1))
        for name, dim in heads:
            p[f"head.{name}.w"] = np.zeros((cfg.width, dim))
            p[f"head.{name}.b"] = np.zeros(dim)
        p["color.w0"], p["color.b0"] = _linear_init(rng, cfg.width + cfg.embedding_dim, cfg.width)
        p["color.w1"] = np.zeros((cfg.width, 3))
        p["color.b1"] = np.zeros(3)
        return p

    @classmethod
    def create(cls, config: FieldConfig, positions, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        enc = HexPlaneEncoder.for_positions(config, positions, rng=rng)
        return cls(config, enc, rng=rng)

    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays in declaration order (grids first)."""
        return {**self.encoder.grids, **self.mlp}

    def set_params(self, values: dict) -> None:
        for k, v in values.items():
            if k in self.encoder.grids:
                self.encoder.grids[k] = v
            else:
                self.mlp[k] = v

    def copy(self) -> "DeformationField":
        enc = HexPlaneEncoder(self.config, self.encoder.lo.copy(), self.encoder.hi.copy(),
                              grids={k: v.copy() for k, v in self.encoder.grids.items()})
        return DeformationField(self.config, enc, {k: v.copy() for k, v in self.mlp.items()})

    # forward / backward --------------------------------------------------

    def deform(self, cloud: GaussianCloud, t: float, extent: float | None = None,
               record: bool = False) -> DeformedCloud:
        cfg, p = self.config, self.mlp
        feat, enc_cache = self.encoder.encode(cloud.positions, t, return_cache=True)
        acts = [feat]
        pre = []
        h = feat
        for k in range(cfg.depth):
            z = h @ p[f"mlp.w{k}"] + p[f"mlp.b{k}"]
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        dx = h @ p["head.dx.w"] + p["head.dx.b"]
        ds = h @ p["head.ds.w"] + p["head.ds.b"]
        dr = h @ p["head.dr.w"] + p["head.dr.b"]

        if cfg.no_delta_c:
            dc = np.zeros((len(cloud), 3))
            hc_in = zc = None
        else:
            hc_in = np.concatenate([h, cloud.embeddings], axis=1)
            zc = hc_in @ p["color.w0"] + p["color.b0"]
            dc = np.maximum(zc, 0.0) @ p["color.w1"] + p["color.b1"]

        if cfg.no_constraints:
            s_new = cloud.log_scales + ds
            r_pre = cloud.rotations + dr
            cap_mask = np.zeros_like(s_new, dtype=bool)
            log_cap = np.inf
            op_logit = cloud.opacity_logits + (h @ p["head.da.w"] + p["head.da.b"])[:, 0]
        else:
            s_new = bounded_add(cloud.log_scales, ds, cfg.tau_s)
            r_pre = bounded_add(cloud.rotations, dr, cfg.tau_r)
            if extent is None:
                extent = _extent(cloud.positions)
            log_cap = log_scale_cap(extent, cfg.scale_cap_fraction)
            cap_mask = s_new > log_cap
            s_new = np.where(cap_mask, log_cap, s_new)
            op_logit = cloud.opacity_logits
        r_norm = np.linalg.norm(r_pre, axis=1, keepdims=True)
        # rows with no rotation update pass through untouched (bitwise identity)
        r_same = np.all(r_pre == cloud.rotations, axis=1, keepdims=True)
        r_out = np.where(r_same, r_pre, r_pre / r_norm)
        colors_raw = cloud.base_colors * (1.0 + dc)
        colors = np.clip(colors_raw, 0.0, 1.0)

        out = DeformedCloud(
            positions=cloud.positions + dx, log_scales=s_new, rotations=r_out,
            opacity_logits=op_logit, colors=colors, delta_c=dc, rotations_prenorm=r_pre, t=t,
        )
        if record:
            out.cache = dict(enc_cache=enc_cache, acts=acts, pre=pre, ds=ds, dr=dr,
                             hc_in=hc_in, zc=zc, cap_mask=cap_mask, extent=extent,
                             r_norm=r_norm, r_same=r_same, colors_raw=colors_raw, dc=dc)
        return out

    def deform_backward(self, cloud: GaussianCloud, deformed: DeformedCloud, g_pos, g_logs,
                        g_rot, g_op, g_col, g_dc=None):
        """Adjoint of deform; gradients w.r.t. deformed outputs in, parameter gradients out.

        `g_dc` is a direct gradient on the colour offset (from its regularizer).
        Returns (canonical gradients, field gradients) as dicts of arrays.
        """
        c = deformed.cache
        if c is None:
            raise ValueError("deform_backward needs a forward pass with record=True")
        cfg, p = self.config, self.mlp
        n = len(cloud)
        gc = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        gf = {k: np.zeros_like(v) for k, v in self.params().items()}

        # colour: c' = clip(c * (1 + dc))
        pass_col = (c["colors_raw"] >= 0.0) & (c["colors_raw"] <= 1.0)
        g_raw = g_col * pass_col
        gc["base_colors"] += g_raw * (1.0 + c["dc"])
        g_dc_total = g_raw * cloud.base_colors
        if g_dc is not None:
            g_dc_total = g_dc_total + g_dc

        # rotation: r' = normalize(r + clip(dr))
        rn = deformed.rotations
        g_pre = np.where(c["r_same"], g_rot,
                         (g_rot - rn * np.sum(rn * g_rot, axis=1, keepdims=True)) / c["r_norm"])
        gc["rotations"] += g_pre

        h = c["acts"][-1]
        g_h = np.zeros_like(h)
        if cfg.no_constraints:
            g_ds = g_logs
            g_dr = g_pre
            gc["log_scales"] += g_logs
            g_da = g_op[:, None]
            gc["opacity_logits"] += g_op
            gf["head.da.w"] += h.T @ g_da
            gf["head.da.b"] += g_da.sum(axis=0)
            g_h += g_da @ p["head.da.w"].T
        else:
            g_s = np.where(c["cap_mask"], 0.0, g_logs)
            gc["log_scales"] += g_s
            g_ds = g_s * (np.abs(c["ds"]) < cfg.tau_s)
            g_dr = g_pre * (np.abs(c["dr"]) < cfg.tau_r)
            gc["opacity_logits"] += g_op
            # the cap depends on the extent of the canonical positions
            g_cap = float(np.sum(np.where(c["cap_mask"], g_logs, 0.0)))
            if g_cap != 0.0 and c["extent"] > 0:
                gc["positions"] += g_cap * _extent_grad(cloud.positions, c["extent"]) / c["extent"]
        gc["positions"] += g_pos

        for name, g in (("dx", g_pos), ("ds", g_ds), ("dr", g_dr)):
            gf[f"head.{name}.w"] += h.T @ g
            gf[f"head.{name}.b"] += g.sum(axis=0)
            g_h += g @ p[f"head.{name}.w"].T

        if not cfg.no_delta_c:
            zc = c["zc"]
            hc = np.maximum(zc, 0.0)
            gf["color.w1"] += hc.T @ g_dc_total
            gf["color.b1"] += g_dc_total.sum(axis=0)
            g_zc = (g_dc_total @ p["color.w1"].T) * (zc > 0)
            gf["color.w0"] += c["hc_in"].T @ g_zc
            gf["color.b0"] += g_zc.sum(axis=0)
            g_in = g_zc @ p["color.w0"].T
            g_h += g_in[:, :cfg.width]
            gc["embeddings"] += g_in[:, cfg.width:]

        g = g_h
        for k in range(cfg.depth - 1, -1, -1):
            g = g * (c["pre"][k] > 0)
            gf[f"mlp.w{k}"] += c["acts"][k].T @ g
            gf[f"mlp.b{k}"] += g.sum(axis=0)
            g = g @ p[f"mlp.w{k}"].T
        gc["positions"] += self.encoder.backward(g, c["enc_cache"], gf)
        return gc, gf

    # serialization --------------------------------------------------------

    def flags_word(self) -> int:
        word = 0
        if self.config.no_constraints:
            word |= FLAG_BITS["no_constraints"]
        if self.config.no_delta_c:
            word |= FLAG_BITS["no_delta_c"]
        for name, on in self.config.flags.items():
            if on and name in FLAG_BITS:
                word |= FLAG_BITS[name]
        return word

    def save(self, path) -> None:
        cfg = self.config
        header = MAGIC + struct.pack(
            "<9I2f", VERSION, cfg.levels, cfg.spatial_res, cfg.temporal_res, cfg.features,
            cfg.width, cfg.depth, cfg.embedding_dim, self.flags_word(), cfg.tau_s, cfg.tau_r)
        header += struct.pack("<f", cfg.scale_cap_fraction)
        header += np.concatenate([self.encoder.lo, self.encoder.hi]).astype("<f4").tobytes()
        body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.params().values())
        io.atomic_write_bytes(path, header + body)

    @classmethod
    def load(cls, path) -> "DeformationField":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise MalformedCheckpoint(f"{path}: bad magic")
        head = struct.calcsize("<9I2f")
        (version, levels, rs, rt, nf, width, depth, emb, flags, tau_s, tau_r) = struct.unpack(
            "<9I2f", raw[8:8 + head])
        if version != VERSION:
            raise MalformedCheckpoint(f"{path}: unsupported version {version}")
        off = 8 + head
        (cap,) = struct.unpack("<f", raw[off:off + 4])
        off += 4
        box = np.frombuffer(raw, "<f4", 6, off).astype(np.float64)
        off += 24
        extra = {name: bool(flags & bit) for name, bit in FLAG_BITS.items()
                 if name not in ("no_constraints", "no_delta_c")}
        cfg = FieldConfig(levels=levels, spatial_res=rs, temporal_res=rt, features=nf, width=width,
                          depth=depth, embedding_dim=emb, tau_s=float(tau_s), tau_r=float(tau_r),
                          scale_cap_fraction=float(cap),
                          no_constraints=bool(flags & FLAG_BITS["no_constraints"]),
                          no_delta_c=bool(flags & FLAG_BITS["no_delta_c"]), flags=extra)
        template = cls(cfg, HexPlaneEncoder(cfg, box[:3], box[3:]))
        values = {}
        for name, arr in template.params().items():
            count = arr.size
            if off + 4 * count > len(raw):
                raise MalformedCheckpoint(f"{path}: truncated at {name}")
            values[name] = np.frombuffer(raw, "<f4", count, off).astype(np.float64).reshape(arr.shape)
            off += 4 * count
        if off != len(raw):
            raise MalformedCheckpoint(f"{path}: {len(raw) - off} trailing bytes")
        template.set_params(values)
        return template

    @property
    def flags(self) -> dict[str, bool]:
        word = self.flags_word()
        return {name: bool(word & bit) for name, bit in FLAG_BITS.items()}


def bounded_add(base, delta, tau):
    """base + clip(delta, -tau, tau), nudged by ulps so |out - base| <= tau holds in floats."""
    out = base + np.clip(delta, -tau, tau)
    for _ in range(8):
        with np.errstate(invalid="ignore"):    # -inf log-scales (zero extent) compare as False
            over = (out - base) > tau
            under = (out - base) < -tau
        if not (over.any() or under.any()):
            break
        out = np.where(over, np.nextafter(out, -np.inf), out)
        out = np.where(under, np.nextafter(out, np.inf), out)
    return out


def log_scale_cap(extent: float, fraction: float = 0.05) -> float:
    """Largest log-scale whose exp() does not exceed fraction * extent."""
    limit = fraction * extent
    if limit <= 0:
        return -np.inf
    cap = np.log(limit)
    while np.exp(cap) > limit:
        cap = np.nextafter(cap, -np.inf)
    return float(cap)


def _extent(positions) -> float:
    return float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


def _extent_grad(positions, extent):
    """d extent / d positions (bbox diagonal; first argmax/argmin take the gradient)."""
    g = np.zeros_like(positions)
    span = positions.max(axis=0) - positions.min(axis=0)
    for k in range(3):
        g[np.argmax(positions[:, k]), k] += span[k] / extent
        g[np.argmin(positions[:, k]), k] -= span[k] / extent
    return g


def identity_view(cloud: GaussianCloud, t: float = 0.0) -> DeformedCloud:
    """The canonical cloud presented as a deformed state (warmup / frozen field)."""
    return DeformedCloud(
        positions=cloud.positions, log_scales=cloud.log_scales, rotations=cloud.rotations,
        opacity_logits=cloud.opacity_logits, colors=cloud.base_colors,
        delta_c=np.zeros((len(cloud), 3)), rotations_prenorm=cloud.rotations, t=t,
    )
