"""Canonical Gaussian cloud, cameras, frames and datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import io

EMBEDDING_DIM_COMMENT = "colonsplat_embedding_dim"


class NoValidDepth(ValueError):
    pass


class InvalidDataset(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4) unit quaternions, w first
    opacity_logits: np.ndarray   # (N,)
    base_colors: np.ndarray      # (N, 3) in [0, 1]
    embeddings: np.ndarray       # (N, d)

    def __post_init__(self):
        n = len(self.positions)
        if n < 1:
            raise io.InvalidCount("a GaussianCloud needs at least one Gaussian")
        for name in self.param_names():
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")

    @staticmethod
    def param_names() -> tuple[str, ...]:
        return ("positions", "log_scales", "rotations", "opacity_logits",
                "base_colors", "embeddings")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return self.base_colors

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names()}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.params().items()})

    def enforce_invariants(self) -> None:
        """Renormalize quaternions and clamp colors in place."""
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.clip(self.base_colors, 0.0, 1.0, out=self.base_colors)

    @classmethod
    def create(cls, positions, log_scales=None, rotations=None, opacities=0.1,
               colors=0.5, embedding_dim: int = 8) -> "GaussianCloud":
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = len(positions)
        if log_scales is None:
            log_scales = np.zeros((n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        opac = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        cols = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        return cls(
            positions=positions.copy(),
            log_scales=np.broadcast_to(np.asarray(log_scales, dtype=np.float64), (n, 3)).copy(),
            rotations=np.broadcast_to(np.asarray(rotations, dtype=np.float64), (n, 4)).copy(),
            opacity_logits=logit(opac).copy(),
            base_colors=cols.copy(),
            embeddings=np.zeros((n, embedding_dim)),
        )


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))      # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    znear: float = 0.01
    zfar: float = 100.0
    t: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.znear < self.zfar):
            raise ValueError("need 0 < znear < zfar")
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"timestep {self.t} outside [0, 1]")

    @property
    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def from_matrix(cls, matrix, **kwargs) -> "Camera":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(rotation=m[:3, :3], translation=m[:3, 3], **kwargs)

    @classmethod
    def looking_at(cls, eye, target, up, **kwargs) -> "Camera":
        """Camera at `eye` with optical axis towards `target` (image y follows -up)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(rotation=rot, translation=-rot @ eye, **kwargs)

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions with unit z, shape (H, W, 3); pixel centers at integers."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "t": self.t,
            "znear": self.znear, "zfar": self.zfar,
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Camera":
        return cls.from_matrix(
            rec["world_to_camera"],
            fx=float(rec["fx"]), fy=float(rec["fy"]), cx=float(rec["cx"]), cy=float(rec["cy"]),
            width=int(rec["width"]), height=int(rec["height"]), t=float(rec["t"]),
            znear=float(rec.get("znear", 0.01)), zfar=float(rec.get("zfar", 100.0)),
        )


@dataclass
class Frame:
    camera: Camera
    rgb: np.ndarray          # (H, W, 3)
    depth_sup: np.ndarray    # (H, W); <= 0 means unsupervised

    def __post_init__(self):
        shape = (self.camera.height, self.camera.width)
        if self.rgb.shape != shape + (3,) or self.depth_sup.shape != shape:
            raise ValueError(f"frame buffers do not match camera size {shape}")

    @property
    def valid_mask(self) -> np.ndarray:
        return self.depth_sup > 0


@dataclass
class Dataset:
    frames: list[Frame]
    split: list[str]
    generator: dict | None = None

    def __post_init__(self):
        if len(self.split) != len(self.frames):
            raise InvalidDataset("split tags and frames differ in length")
        ts = [f.camera.t for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise InvalidDataset("timesteps must be non-decreasing in frame order")
        if any(s not in ("train", "test") for s in self.split):
            raise InvalidDataset("split tags must be 'train' or 'test'")

    @staticmethod
    def auto_split(n: int) -> list[str]:
        return ["test" if i % 8 == 0 else "train" for i in range(n)]

    def indices(self, which: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == which]

    @property
    def train_frames(self) -> list[Frame]:
        return [self.frames[i] for i in self.indices("train")]

    @property
    def test_frames(self) -> list[Frame]:
        return [self.frames[i] for i in self.indices("test")]


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    frames, split = [], []
    for rec in manifest["frames"]:
        cam = Camera.from_json(rec)
        rgb = io.read_png(directory / rec["rgb_path"])
        depth = io.read_pfm(directory / rec["depth_path"]).astype(np.float64)
        frames.append(Frame(cam, rgb, depth))
        split.append(rec["split"])
    return Dataset(frames, split, manifest.get("generator"))


def save_manifest(directory, records: list[dict], generator: dict | None = None) -> None:
    body = {"frames": records}
    if generator is not None:
        body["generator"] = generator
    io.atomic_write_bytes(Path(directory) / "manifest.json",
                          json.dumps(body, indent=1).encode("utf-8"))


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions (..., 4) in (w, x, y, z) order; normalizes first."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))


def covariance_from(log_scale, rotation) -> np.ndarray:
    """Sigma = R diag(exp(2 s)) R^T; broadcasts over leading axes."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rot = quaternion_to_matrix(np.asarray(rotation, dtype=np.float64))
    m = rot * np.exp(log_scale)[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def scene_extent(cloud_or_positions) -> float:
    pos = getattr(cloud_or_positions, "positions", cloud_or_positions)
    pos = np.asarray(pos, dtype=np.float64)
    return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))


def backproject(frame: Frame, stride: int = 1):
    """World points and colors for every stride-th valid depth pixel."""
    cam = frame.camera
    vv, uu = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
    depth = frame.depth_sup[vv, uu]
    ok = depth > 0
    u, v, d = uu[ok].astype(np.float64), vv[ok].astype(np.float64), depth[ok]
    pc = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], axis=1)
    world = (pc - cam.translation) @ cam.rotation
    return world, frame.rgb[vv[ok], uu[ok]], np.stack([u, v], axis=1)


def _merge_duplicates(points, colors, radius):
    if radius <= 0 or len(points) < 2:
        return points, colors
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return points, colors
    n = len(points)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    counts = np.bincount(labels, minlength=n_comp)[:, None]
    merged_p = np.stack([np.bincount(labels, points[:, k], n_comp) for k in range(3)], 1) / counts
    merged_c = np.stack([np.bincount(labels, colors[:, k], n_comp) for k in range(3)], 1) / counts
    return merged_p, merged_c


def nearest_neighbor_scale(points: np.ndarray, k: int = 3, fallback: float = 1e-2) -> np.ndarray:
    """Mean distance to the k nearest other points."""
    n = len(points)
    if n < 2:
        return np.full(n, fallback)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    mean = dist[:, 1:].mean(axis=1)
    return np.where(mean > 0, mean, fallback)


def init_from_depth(frames: list[Frame], stride: int = 4, k_init: float = 1.0,
                    merge_fraction: float = 1e-4, embedding_dim: int = 8,
                    initial_opacity: float = 0.1) -> GaussianCloud:
    """Seed a cloud by back-projecting supervision depth through each frame's camera."""
    pts, cols, footprint = [], [], []
    for frame in frames:
        p, c, _ = backproject(frame, stride)
        pts.append(p)
        cols.append(c)
        if len(p):
            cam = frame.camera
            d = (p - cam.center)
            footprint.append(np.median(np.linalg.norm(d, axis=1)) * stride / cam.fx)
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(points) == 0:
        raise NoValidDepth("no pixel with positive depth in the sampled grid")
    colors = np.concatenate(cols)
    diag = scene_extent(points)
    points, colors = _merge_duplicates(points, colors, merge_fraction * diag)
    fallback = float(np.mean(footprint)) if footprint else 1e-2
    scale = k_init * nearest_neighbor_scale(points, 3, fallback=max(fallback, 1e-8))
    cloud = GaussianCloud.create(points, log_scales=np.log(scale)[:, None] * np.ones(3),
                                 opacities=initial_opacity, colors=np.clip(colors, 0, 1),
                                 embedding_dim=embedding_dim)
    return cloud


def save_ply(cloud: GaussianCloud, path) -> None:
    cols = {"x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2]}
    for k in range(3):
        cols[f"log_scale_{k}"] = cloud.log_scales[:, k]
    for k, name in enumerate(("rot_w", "rot_x", "rot_y", "rot_z")):
        cols[name] = cloud.rotations[:, k]
    cols["opacity_logit"] = cloud.opacity_logits
    for k, name in enumerate(("red", "green", "blue")):
        cols[name] = cloud.base_colors[:, k]
    for k in range(cloud.embedding_dim):
        cols[f"emb_{k}"] = cloud.embeddings[:, k]
    io.write_ply(path, cols, comments=[f"{EMBEDDING_DIM_COMMENT} {cloud.embedding_dim}"])


def load_ply(path) -> GaussianCloud:
    cols, comments = io.read_ply(path)
    dim = None
    for c in comments:
        tok = c.split()
        if len(tok) == 2 and tok[0] == EMBEDDING_DIM_COMMENT:
            dim = int(tok[1])
    if dim is None:
        dim = sum(1 for name in cols if name.startswith("emb_"))
    required = (["x", "y", "z"] + [f"log_scale_{k}" for k in range(3)]
                + ["rot_w", "rot_x", "rot_y", "rot_z", "opacity_logit", "red", "green", "blue"]
                + [f"emb_{k}" for k in range(dim)])
    missing = [name for name in required if name not in cols]
    if missing:
        raise io.MalformedPly(f"{path}: missing properties {missing}")
    n = len(cols["x"])
    if n < 1:
        raise io.InvalidCount(f"{path}: vertex count {n} (need N >= 1)")

    def stack(names):
        return np.stack([cols[k].astype(np.float64) for k in names], axis=1)

    return GaussianCloud(
        positions=stack(["x", "y", "z"]),
        log_scales=stack([f"log_scale_{k}" for k in range(3)]),
        rotations=stack(["rot_w", "rot_x", "rot_y", "rot_z"]),
        opacity_logits=cols["opacity_logit"].astype(np.float64),
        base_colors=stack(["red", "green", "blue"]),
        embeddings=stack([f"emb_{k}" for k in range(dim)]) if dim else np.zeros((n, 0)),
    )
