"""End-to-end acceptance gates; each test records one PASS/FAIL line via conftest."""

import time
from pathlib import Path

import numpy as np
import pytest

from colongs import cli, io, metrics
from colongs.deformation import DeformationField
from colongs.losses import (LossWeights, build_knn, loss_color_offset, loss_color_variance, loss_depth,
                            loss_knn, loss_rgb, loss_tv)
from colongs.objective import evaluate
from colongs.rasterizer import project, render
from colongs.scene import Camera, scene_extent
from colongs.scenegen import TubeSpec, generate_dataset
from colongs.trainer import TrainConfig, initial_cloud, train

from conftest import record
from helpers import (brute_knn, brute_nn, brute_ssim, central_difference, depth_oracle, grad_close,
                     micro_scene, tv_oracle)

WEIGHTS = dict(tv=0.01, knn=1.0, depth=0.5, co=0.01, cv=0.001)


def _nearest_rank(values, q=95):
    v = sorted(values)
    return v[max(1, int(np.ceil(q / 100 * len(v)))) - 1]


# shared training runs ----------------------------------------------------------------

@pytest.fixture(scope="session")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for name, amp in (("static", 0.0), ("dynamic", 0.15)):
        path = root / name
        out[name] = (path, generate_dataset(TubeSpec(amplitude=amp, width=64, height=64, frames=64), path))
    return out


@pytest.fixture(scope="session")
def runs(datasets):
    cache = {}

    def get(scene, **flags):
        key = (scene, tuple(sorted(flags.items())))
        if key not in cache:
            cfg = TrainConfig.from_dict({"iterations": 6000, "seed": 0, "weights": WEIGHTS, **flags})
            t0 = time.perf_counter()
            res = train(datasets[scene][1], cfg)
            cache[key] = (res, time.perf_counter() - t0)
        return cache[key]

    return get


def _test_cds(res, path, ds):
    out = []
    for i in ds.indices("test"):
        truth = io.read_points_ply(Path(path) / f"truth_{i:04d}.ply")
        pts = metrics.cloud_from_gaussians(res.cloud, res.field, ds.frames[i].camera.t)
        out.append(metrics.chamfer(pts, truth))
    return np.array(out)


def _constraint_violations(res, n=1000, seed=0):
    cloud, f = res.cloud, res.field
    cap = f.config.scale_cap_fraction * scene_extent(cloud)
    bad = 0
    for t in np.random.default_rng(seed).uniform(0.0, 1.0, n):
        d = f.deform(cloud, float(t))
        ok = (d.opacity_logits.tobytes() == cloud.opacity_logits.tobytes()
              and np.max(np.abs(d.log_scales - cloud.log_scales)) <= f.config.tau_s
              and np.max(np.abs(d.rotations_prenorm - cloud.rotations)) <= f.config.tau_r
              and np.all(np.exp(d.log_scales) <= cap))
        bad += not ok
    return bad


# 1 ------------------------------------------------------------------------------------

def test_gradient_oracle():
    w = LossWeights(**WEIGHTS)
    t0 = time.perf_counter()
    failures, checked = [], 0
    for seed in range(100):
        cloud, field, frame, index = micro_scene(seed)
        res = evaluate(cloud, field, frame, index, w)

        def objective():
            return evaluate(cloud, field, frame, index, w, with_grad=False).total

        for params, grads in ((cloud.params(), res.cloud_grads), (field.params(), res.field_grads)):
            for name, arr in params.items():
                for i in range(arr.size):
                    fd = central_difference(objective, arr, i, h0=1e-6, f0=res.total)
                    a = grads[name].reshape(-1)[i]
                    checked += 1
                    if not grad_close(a, fd):
                        failures.append((seed, name, i, a, fd))
    elapsed = time.perf_counter() - t0
    ok = record(1, not failures and elapsed < 120,
                f"{checked} partials over 100 scenes, {len(failures)} mismatches, {elapsed:.1f}s (limit 120s)")
    assert ok, failures[:5]


# 2 ------------------------------------------------------------------------------------

_constraint_log: dict = {}


@pytest.mark.parametrize("scene,flags", [("static", {}), ("dynamic", {}), ("dynamic", {"no_knn": True})])
def test_constraint_suite(runs, scene, flags):
    res, _ = runs(scene, **flags)
    bad = _constraint_violations(res)
    key = f"{scene}{'+no_knn' if flags else ''}"
    prev_ok, prev = _constraint_log.get("joined", (True, ""))
    _constraint_log["joined"] = (prev_ok and bad == 0, f"{prev} {key}:{bad}".strip())
    ok_all, text = _constraint_log["joined"]
    record(2, ok_all, f"violations over 1000 t per run: {text}")
    assert bad == 0


# 3 ------------------------------------------------------------------------------------

def test_identity_at_init(datasets):
    _, ds = datasets["dynamic"]
    cfg = TrainConfig()
    cloud = initial_cloud(ds, cfg, np.random.default_rng(0))
    field = DeformationField.create(cfg.field_config(), cloud.positions, rng=np.random.default_rng(1))
    worst = 0.0
    for i in ds.indices("test"):
        cam = ds.frames[i].camera
        base = render(project(cloud, cam), cam)
        for t in (0.0, 0.5, 1.0):
            c = Camera.from_json(dict(cam.to_json(), t=t))
            got = render(project(field.deform(cloud, t), c), c)
            for a, b in ((got.rgb, base.rgb), (got.depth, base.depth), (got.alpha, base.alpha)):
                worst = max(worst, float(np.max(np.abs(a - b))))
    ok = record(3, worst <= 1e-6, f"max abs render difference {worst:.3e} (limit 1e-6)")
    assert ok


# 4 ------------------------------------------------------------------------------------

def test_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    p, q = rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) * 1.2 + 0.2
    dpq, dqp = brute_nn(p, q), brute_nn(q, p)
    errs = {
        "chamfer": abs(metrics.chamfer(p, q) - 0.5 * (dpq.mean() + dqp.mean())),
        "hd95": abs(metrics.hd95(p, q) - max(_nearest_rank(dpq), _nearest_rank(dqp))),
        "knn": float(np.any(build_knn(p, 8).as_array() != brute_knn(p, 8))),
    }
    ok_cloud = all(v <= 1e-9 for v in errs.values())

    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    dc, col = rng.normal(size=(20, 3)), rng.uniform(size=(20, 3))
    mean = [sum(col[:, k]) / 20 for k in range(3)]
    r, s = rng.uniform(1, 3, (16, 16)), rng.uniform(1, 3, (16, 16))
    mask = rng.uniform(size=r.shape) > 0.25
    img = {
        "psnr": abs(metrics.psnr(a, b) - 10 * np.log10(1 / mse)),
        "ssim": abs(metrics.ssim(a, b) - brute_ssim(a, b)),
        "tv": abs(loss_tv(a) - tv_oracle(a)),
        "l1": abs(loss_rgb(a, b) - sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size),
        "co": abs(loss_color_offset(dc) - sum(sum(v * v for v in row) for row in dc) / 20),
        "cv": abs(loss_color_variance(col)
                  - sum(sum((row[k] - mean[k]) ** 2 for k in range(3)) for row in col) / 20),
        "depth": abs(loss_depth(r, s, mask) - depth_oracle(r, s, mask)),
    }
    ok_img = all(v <= 1e-7 for v in img.values())
    elapsed = time.perf_counter() - t0
    worst = max({**errs, **img}.items(), key=lambda kv: kv[1])
    ok = record(4, ok_cloud and ok_img and elapsed < 60,
                f"worst error {worst[0]}={worst[1]:.2e}, {elapsed:.1f}s (limit 60s)")
    assert ok, {**errs, **img}


# 5 ------------------------------------------------------------------------------------

def test_static_fit(runs, datasets):
    res, elapsed = runs("static")
    _, ds = datasets["static"]
    ps, rendered, truth = [], [], []
    for i in ds.indices("test"):
        fr = ds.frames[i]
        out = render(project(res.field.deform(res.cloud, fr.camera.t), fr.camera), fr.camera)
        ps.append(metrics.psnr(np.clip(out.rgb, 0, 1), fr.rgb))
        rendered.append(out.depth)
        truth.append(fr.depth_sup)
    psnr, msed = float(np.mean(ps)), metrics.depth_mse(rendered, truth)
    ok = record(5, psnr >= 28.0 and msed <= 0.02 and elapsed <= 1800,
                f"test PSNR {psnr:.2f} dB (>= 28), MSE_D {msed:.4f} (<= 0.02), {elapsed / 60:.1f} min (<= 30)")
    assert ok


# 6 ------------------------------------------------------------------------------------

def test_dynamic_fidelity(runs, datasets):
    path, ds = datasets["dynamic"]
    full = _test_cds(runs("dynamic")[0], path, ds)
    frozen = _test_cds(runs("dynamic", freeze_deformation=True)[0], path, ds)
    ratios = full / frozen
    ok = record(6, bool(np.all(ratios <= 0.7)),
                f"CD full/frozen per test timestep {np.round(ratios, 3).tolist()} (each <= 0.7)")
    assert ok


# 7 ------------------------------------------------------------------------------------

def test_knn_ablation_direction(runs, datasets):
    path, ds = datasets["dynamic"]
    full = _test_cds(runs("dynamic")[0], path, ds).mean()
    no_knn = _test_cds(runs("dynamic", no_knn=True)[0], path, ds).mean()
    ok = record(7, no_knn >= 1.1 * full, f"mean CD no_knn {no_knn:.4f} vs full {full:.4f} "
                                         f"(ratio {no_knn / full:.3f}, need >= 1.1)")
    assert ok


# 8 ------------------------------------------------------------------------------------

def test_invariances():
    rng = np.random.default_rng(8)
    worst_knn = worst_depth = 0.0
    for _ in range(1000):
        n = int(rng.integers(5, 40))
        pts = rng.normal(size=(n, 3))
        idx = build_knn(pts, int(rng.integers(1, min(8, n - 1) + 1)))
        moved = pts + rng.normal(size=pts.shape) * 0.1
        base = loss_knn(moved, idx)
        shifted = loss_knn(moved + rng.normal(size=3) * 3, idx)
        worst_knn = max(worst_knn, abs(shifted - base) / base)

        shape = tuple(int(v) for v in rng.integers(4, 12, 2))
        r, s = rng.uniform(0.5, 4, shape), rng.uniform(0.5, 4, shape)
        mask = rng.uniform(size=shape) > 0.2
        mask.flat[0] = mask.flat[1] = True
        base = loss_depth(r, s, mask)
        a, b = rng.uniform(0.1, 5), rng.uniform(-2, 2)
        for got in (loss_depth(a * r + b, s, mask), loss_depth(r, a * s + b, mask)):
            worst_depth = max(worst_depth, abs(got - base) / base)
    ok = record(8, worst_knn <= 1e-10 and worst_depth <= 1e-10,
                f"worst relative change knn {worst_knn:.2e}, depth {worst_depth:.2e} (limit 1e-10)")
    assert ok


# 9 ------------------------------------------------------------------------------------

DETERMINISM_CONFIG = """
iterations = 400
warmup_iterations = 100

[densify]
start = 50
stop = 300
interval = 50
"""


def test_cli_determinism(tmp_path):
    spec = tmp_path / "spec.toml"
    spec.write_text("frames = 16\nwidth = 32\nheight = 32\ntruth_points = 500\n")
    config = tmp_path / "train.toml"
    config.write_text(DETERMINISM_CONFIG)
    assert cli.main(["gen", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    for name in ("a", "b"):
        assert cli.main(["train", "--data", str(tmp_path / "data"), "--config", str(config),
                         "--out", str(tmp_path / name), "--deterministic", "--seed", "7"]) == 0
    files = ("train_log.csv", "point_cloud_400.ply", "deform_400.bin")
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = record(9, all(same), "bit-identical: " + ", ".join(f"{f}={s}" for f, s in zip(files, same)))
    assert ok
