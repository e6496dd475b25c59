"""Procedural deforming colon: a tube with a travelling radial wave.

The wall is ``r(z, t) = r0 (1 + A sin(k z - w t))``.  Frames are produced
by an independent ray marcher (not the splatting renderer), so RGB, depth
and the per-timestep surface samples serve as ground truth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numba
import numpy as np

from . import io
from .scene import Camera, Dataset, Frame, save_manifest


class InvalidSpec(ValueError):
    pass


class CameraOutsideTube(ValueError):
    pass


@dataclass
class TubeSpec:
    length: float = 10.0
    radius: float = 1.0
    amplitude: float = 0.15
    wave_number: float = 2.0 * math.pi / 5.0
    angular_speed: float = 2.0 * math.pi
    noise_octaves: int = 3
    noise_frequency: float = 1.2
    noise_seed: int = 0
    frames: int = 64
    width: int = 64
    height: int = 64
    fov_deg: float = 110.0
    camera_start: float = 0.3
    camera_end: float = 3.0
    sway: float = 0.1
    truth_points: int = 20000

    def __post_init__(self):
        if not (0.0 <= self.amplitude < 1.0):
            raise InvalidSpec("amplitude must lie in [0, 1)")
        if self.frames < 2:
            raise InvalidSpec("need at least two frames")
        if self.radius <= 0 or self.length <= 0:
            raise InvalidSpec("tube radius and length must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidSpec("image size must be positive")
        if not (0.0 < self.fov_deg < 180.0):
            raise InvalidSpec("fov_deg must lie in (0, 180)")
        if abs(self.sway) >= self.radius * (1.0 - self.amplitude):
            raise InvalidSpec("camera sway would leave the tube")
        if not (0.0 <= self.camera_start <= self.length and 0.0 <= self.camera_end <= self.length):
            raise InvalidSpec("camera path must stay within the tube length")

    @classmethod
    def from_dict(cls, data: dict) -> "TubeSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def timestep(self, i: int) -> float:
        return i / (self.frames - 1)

    def camera(self, t: float) -> Camera:
        zc = self.camera_start + (self.camera_end - self.camera_start) * t
        eye = np.array([self.sway * math.sin(2 * math.pi * t), self.sway * (math.cos(2 * math.pi * t) - 1.0) * 0.5, zc])
        f = 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2.0)
        return Camera(fx=f, fy=f, cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0,
                      width=self.width, height=self.height, rotation=np.eye(3),
                      translation=-eye, t=t)


def surface_radius(spec: TubeSpec, z, t):
    return spec.radius * (1.0 + spec.amplitude * np.sin(spec.wave_number * np.asarray(z) - spec.angular_speed * t))


@numba.njit(cache=True)
def _march(origin, dirs, r0, amp, k, omega, length, t, tol):
    h, w = dirs.shape[0], dirs.shape[1]
    depth = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=np.bool_)
    lip = math.sqrt(1.0 + (r0 * amp * k) ** 2)
    for i in range(h):
        for j in range(w):
            dx, dy, dz = dirs[i, j, 0], dirs[i, j, 1], dirs[i, j, 2]
            dn = math.sqrt(dx * dx + dy * dy + dz * dz)
            s = 0.0
            prev = 0.0
            hit = False
            for _ in range(200000):
                px = origin[0] + s * dx
                py = origin[1] + s * dy
                pz = origin[2] + s * dz
                if pz < 0.0 or pz > length:
                    break
                f = math.sqrt(px * px + py * py) - r0 * (1.0 + amp * math.sin(k * pz - omega * t))
                if f >= 0.0:
                    hit = True
                    break
                prev = s
                s += max(-f / lip, 1e-4 * r0) / dn
            if not hit:
                continue
            lo, hi = prev, s
            while (hi - lo) * dn > tol:
                mid = 0.5 * (lo + hi)
                px = origin[0] + mid * dx
                py = origin[1] + mid * dy
                pz = origin[2] + mid * dz
                f = math.sqrt(px * px + py * py) - r0 * (1.0 + amp * math.sin(k * pz - omega * t))
                if f >= 0.0:
                    hi = mid
                else:
                    lo = mid
            s = 0.5 * (lo + hi)
            pz = origin[2] + s * dz
            if pz < 0.0 or pz > length:
                continue
            depth[i, j] = s
            valid[i, j] = True
    return depth, valid


def _hash01(ix, iy, iz, seed):
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64((int(seed) * 0x27D4EB2F165667C5) % (1 << 64)))
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(40)).astype(np.float64) / float(1 << 24)


def value_noise(points, seed: int = 0, octaves: int = 3, frequency: float = 1.0):
    """Smooth 3D value noise in [0, 1] (fractal sum of trilinear-smoothstep lattices)."""
    p = np.asarray(points, dtype=np.float64)
    total = np.zeros(len(p))
    norm = 0.0
    for o in range(octaves):
        q = p * frequency * 2.0 ** o
        base = np.floor(q)
        fr = q - base
        sm = fr * fr * (3.0 - 2.0 * fr)
        ib = base.astype(np.int64)
        acc = np.zeros(len(p))
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    v = _hash01(ib[:, 0] + cx, ib[:, 1] + cy, ib[:, 2] + cz, seed + 1013 * o)
                    wx = sm[:, 0] if cx else 1 - sm[:, 0]
                    wy = sm[:, 1] if cy else 1 - sm[:, 1]
                    wz = sm[:, 2] if cz else 1 - sm[:, 2]
                    acc += v * wx * wy * wz
        amp = 0.5 ** o
        total += amp * acc
        norm += amp
    return total / norm


_DARK = np.array([0.50, 0.18, 0.16])
_LIGHT = np.array([0.98, 0.62, 0.52])


def albedo(spec: TubeSpec, points):
    """Tissue colour attached to material coordinates (angle, axial position)."""
    phi = np.arctan2(points[:, 1], points[:, 0])
    material = np.stack([spec.radius * np.cos(phi), spec.radius * np.sin(phi), points[:, 2]], axis=1)
    n = value_noise(material, spec.noise_seed, spec.noise_octaves, spec.noise_frequency)
    n = np.clip((n - 0.5) * 1.6 + 0.5, 0.0, 1.0)
    return _DARK + (_LIGHT - _DARK) * n[:, None]


def raycast_frame(spec: TubeSpec, camera: Camera, t: float | None = None):
    """Ground-truth RGB, z-depth and validity mask for one camera."""
    t = camera.t if t is None else t
    eye = camera.center
    ez = min(max(eye[2], 0.0), spec.length)
    if not (0.0 <= eye[2] <= spec.length) or math.hypot(eye[0], eye[1]) >= float(surface_radius(spec, ez, t)):
        raise CameraOutsideTube(f"camera at {eye} is not inside the tube at t={t}")
    dirs_cam = camera.pixel_rays()
    dirs = dirs_cam @ camera.rotation          # camera -> world (R^T d)
    depth, valid = _march(eye, np.ascontiguousarray(dirs), spec.radius, spec.amplitude,
                          spec.wave_number, spec.angular_speed, spec.length, t, 1e-7 * spec.radius)
    rgb = np.zeros((camera.height, camera.width, 3))
    if valid.any():
        pts = eye + depth[valid][:, None] * dirs[valid]
        rho = np.hypot(pts[:, 0], pts[:, 1])
        drdz = spec.radius * spec.amplitude * spec.wave_number * np.cos(
            spec.wave_number * pts[:, 2] - spec.angular_speed * t)
        normal = np.stack([pts[:, 0] / rho, pts[:, 1] / rho, -drdz], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        to_cam = eye - pts
        cos = np.abs(np.sum(normal * to_cam, axis=1)) / np.linalg.norm(to_cam, axis=1)
        shade = cos / (1.0 + depth[valid] ** 2)
        rgb[valid] = np.clip(albedo(spec, pts) * shade[:, None], 0.0, 1.0)
    return rgb, np.where(valid, depth, 0.0), valid


def hit_points(camera: Camera, depth, valid):
    dirs = camera.pixel_rays() @ camera.rotation
    return camera.center + depth[valid][:, None] * dirs[valid]


def surface_residual(spec: TubeSpec, points, t):
    return np.hypot(points[:, 0], points[:, 1]) - surface_radius(spec, points[:, 2], t)


def sample_truth_cloud(spec: TubeSpec, t: float, m: int | None = None, seed: int = 0) -> np.ndarray:
    """Stratified (z, phi) samples of the wall at time t."""
    m = spec.truth_points if m is None else m
    if m < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    n_phi = max(1, int(round(math.sqrt(m * 2 * math.pi * spec.radius / spec.length))))
    n_z = max(1, m // n_phi)
    iz, ip = np.meshgrid(np.arange(n_z), np.arange(n_phi), indexing="ij")
    iz, ip = iz.ravel()[:m], ip.ravel()[:m]
    z = (iz + rng.uniform(size=len(iz))) * spec.length / n_z
    phi = (ip + rng.uniform(size=len(ip))) * 2 * math.pi / n_phi
    extra = m - len(z)
    if extra > 0:
        z = np.concatenate([z, rng.uniform(0, spec.length, extra)])
        phi = np.concatenate([phi, rng.uniform(0, 2 * math.pi, extra)])
    r = surface_radius(spec, z, t)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def stratum_diameter(spec: TubeSpec, m: int) -> float:
    n_phi = max(1, int(round(math.sqrt(m * 2 * math.pi * spec.radius / spec.length))))
    n_z = max(1, m // n_phi)
    dz = spec.length / n_z
    dphi = 2 * math.pi * spec.radius * (1 + spec.amplitude) / n_phi
    return math.hypot(dz, dphi)


def generate_dataset(spec: TubeSpec, output_dir) -> Dataset:
    out = Path(output_dir)
    try:
        out.mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    split = Dataset.auto_split(spec.frames)
    frames, records = [], []
    for i in range(spec.frames):
        t = spec.timestep(i)
        cam = spec.camera(t)
        rgb, depth, _ = raycast_frame(spec, cam, t)
        depth32 = depth.astype(np.float32)
        rgb8 = np.rint(rgb * 255.0) / 255.0
        rgb_name, depth_name = f"rgb_{i:04d}.png", f"depth_{i:04d}.pfm"
        io.write_png(out / rgb_name, rgb8)
        io.write_pfm(out / depth_name, depth32)
        io.write_points_ply(out / f"truth_{i:04d}.ply", sample_truth_cloud(spec, t, seed=spec.noise_seed + i))
        records.append({"rgb_path": rgb_name, "depth_path": depth_name, **cam.to_json(), "split": split[i]})
        frames.append(Frame(cam, rgb8, depth32.astype(np.float64)))
    save_manifest(out, records, generator=spec.to_dict())
    return Dataset(frames, split, spec.to_dict())
