"""Command line entry point: gen, train, render, eval.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import math
import sys
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import io, metrics
from .deformation import MalformedCheckpoint
from .rasterizer import project, render
from .scene import Camera, InvalidDataset, load_dataset
from .scenegen import CameraOutsideTube, InvalidSpec, TubeSpec, generate_dataset
from .trainer import EmptyTrainSplit, NonFiniteLoss, TrainConfig, load_checkpoint, train

log = logging.getLogger("colongs")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
REPORT_COLUMNS = ("frame", "t", "psnr", "ssim", "cd", "hd95", "mse_d")


class UsageError(Exception):
    pass


def _read_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _describe(cls, prefix="") -> list[str]:
    lines = []
    inst = cls()
    for f in fields(cls):
        if f.name == "flags":
            continue
        value = getattr(inst, f.name)
        if is_dataclass(value):
            lines.append(f"  [{f.name}]")
            lines += _describe(type(value), prefix="    ")
        else:
            lines.append(f"{prefix or '  '}{f.name} = {value!r}")
    return lines


def _config_help() -> str:
    return "config keys (TOML, defaults shown):\n" + "\n".join(_describe(TrainConfig))


def _spec_help() -> str:
    return "spec keys (TOML, defaults shown):\n" + "\n".join(_describe(TubeSpec))


def _set_threads(n: int) -> None:
    if n and n > 0:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# commands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    data = _read_toml(args.spec)
    try:
        spec = TubeSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad spec: {exc}") from exc
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    ds = generate_dataset(spec, out)
    log.info("wrote %d frames (%d test) to %s", len(ds.frames), len(ds.indices("test")), out)
    return EXIT_OK


def build_train_config(args) -> TrainConfig:
    data = _read_toml(args.config)
    if args.no_constraints:
        data["no_constraints"] = True
    if args.no_knn:
        data["no_knn"] = True
    if args.no_delta_c:
        data["no_delta_c"] = True
    if args.freeze_deformation:
        data["freeze_deformation"] = True
    if args.deterministic:
        data["determinism"] = True
    if args.seed is not None:
        data["seed"] = args.seed
    if args.iterations is not None:
        data["iterations"] = args.iterations
        if data["iterations"] <= data.get("warmup_iterations", TrainConfig.warmup_iterations):
            data["warmup_iterations"] = max(0, data["iterations"] - 1) // 6
    if args.depth_normalize_by_alpha:
        data["normalize_depth"] = True
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    ds = load_dataset(args.data)
    every = max(1, cfg.iterations // 20) if cfg.iterations else 1

    def progress(it, row):
        if it % every == 0 or it == cfg.iterations - 1:
            log.info("iter %d total %.5f rgb %.5f N %d", it, row["total"], row["rgb"], row["N"])

    try:
        train(ds, cfg, out_dir=args.out, progress=progress)
    except EmptyTrainSplit as exc:
        raise UsageError(str(exc)) from exc
    return EXIT_OK


def _cameras(args, ds):
    kind = args.trajectory[0]
    if kind in ("train", "test"):
        if len(args.trajectory) != 1:
            raise UsageError(f"--trajectory {kind} takes no file")
        return [(i, ds.frames[i].camera) for i in ds.indices(kind)]
    if kind == "external":
        if len(args.trajectory) != 2:
            raise UsageError("--trajectory external needs a camera manifest file")
        body = json.loads(Path(args.trajectory[1]).read_text())
        recs = body["frames"] if isinstance(body, dict) else body
        try:
            return [(i, Camera.from_json(r)) for i, r in enumerate(recs)]
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad camera manifest: {exc}") from exc
    raise UsageError(f"unknown trajectory {kind!r}")


def _render_at(cloud, field_, camera, normalize_depth=False):
    state = field_.deform(cloud, camera.t)
    return render(project(state, camera), camera, normalize_depth=normalize_depth)


def cmd_render(args) -> int:
    cloud, field_, it = load_checkpoint(args.checkpoint, args.iteration)
    if args.trajectory[0] == "external":
        ds = None
    else:
        if args.data is None:
            raise UsageError("--data is required for train/test trajectories")
        ds = load_dataset(args.data)
    cams = _cameras(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, cam in cams:
        res = _render_at(cloud, field_, cam, args.depth_normalize_by_alpha)
        io.write_png(out / f"render_{k:04d}.png", np.clip(res.rgb, 0.0, 1.0))
        io.write_pfm(out / f"depth_{k:04d}.pfm", res.depth.astype(np.float32))
    log.info("rendered %d views from iteration %d into %s", len(cams), it, out)
    return EXIT_OK


def evaluate_checkpoint(cloud, field_, ds, data_dir, normalize_depth=False) -> dict:
    rows = []
    for i in ds.indices("test"):
        fr = ds.frames[i]
        res = _render_at(cloud, field_, fr.camera, normalize_depth)
        row = {"frame": i, "t": fr.camera.t,
               "psnr": metrics.psnr(np.clip(res.rgb, 0, 1), fr.rgb),
               "ssim": metrics.ssim(np.clip(res.rgb, 0, 1), fr.rgb),
               "cd": None, "hd95": None, "mse_d": None}
        if fr.valid_mask.any():
            row["mse_d"] = metrics.depth_mse(res.depth, fr.depth_sup)
        truth_path = Path(data_dir) / f"truth_{i:04d}.ply"
        if truth_path.exists():
            truth = io.read_points_ply(truth_path)
            pts = metrics.cloud_from_gaussians(cloud, field_, fr.camera.t)
            if len(pts):
                row["cd"] = metrics.chamfer(pts, truth)
                row["hd95"] = metrics.hd95(pts, truth)
        rows.append(row)
    summary = {"frame": "mean", "t": None}
    for key in REPORT_COLUMNS[2:]:
        vals = [r[key] for r in rows if r[key] is not None]
        summary[key] = float(np.mean(vals)) if vals else None
    return {"frames": rows, "summary": summary}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report: dict) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report["frames"] + [report["summary"]]:
        w.writerow([_fmt(r[k]) for k in REPORT_COLUMNS])
    return buf.getvalue()


def cmd_eval(args) -> int:
    cloud, field_, it = load_checkpoint(args.checkpoint, args.iteration)
    ds = load_dataset(args.data)
    report = evaluate_checkpoint(cloud, field_, ds, args.data, args.depth_normalize_by_alpha)
    report["iteration"] = it
    path = Path(args.report)
    io.atomic_write_bytes(path, report_csv(report).encode("utf-8"))
    io.atomic_write_bytes(path.with_suffix(".json"), json.dumps(report, indent=1).encode("utf-8"))
    s = report["summary"]
    log.info("PSNR %s SSIM %s CD %s HD95 %s MSE_D %s", *(s[k] for k in REPORT_COLUMNS[2:]))
    return EXIT_OK


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colongs", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic deforming-tube dataset",
                       epilog=_spec_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    g.add_argument("--spec", help="TOML file with scene keys (omitted keys keep defaults)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="optimize a dynamic Gaussian scene",
                       epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="TOML training config (omitted keys keep defaults)")
    t.add_argument("--out", required=True)
    t.add_argument("--no-constraints", action="store_true", help="free scale/rotation/opacity deformation")
    t.add_argument("--no-knn", action="store_true", help="disable the KNN consistency term")
    t.add_argument("--no-delta-c", action="store_true", help="disable the color offset head")
    t.add_argument("--freeze-deformation", action="store_true", help="keep the field at identity")
    t.add_argument("--deterministic", action="store_true", help="round-robin frames, reproducible run")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="override the iteration count")
    t.add_argument("--depth-normalize-by-alpha", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("render", cmd_render, "render views from a checkpoint"),
                            ("eval", cmd_eval, "evaluate a checkpoint on the test split")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--iteration", type=int, help="checkpoint iteration (default: latest)")
        s.add_argument("--data", required=(name == "eval"))
        s.add_argument("--depth-normalize-by-alpha", action="store_true")
        s.add_argument("--deterministic", action="store_true", help="accepted for symmetry; output is deterministic")
        if name == "render":
            s.add_argument("--out", required=True)
            s.add_argument("--trajectory", nargs="+", default=["test"], metavar="KIND",
                           help="train | test | external <manifest.json>")
        else:
            s.add_argument("--report", required=True, help="CSV path; a JSON twin is written alongside")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (InvalidSpec, InvalidDataset, CameraOutsideTube) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (OSError, io.MalformedPly, io.MalformedPfm, io.InvalidCount, MalformedCheckpoint,
            json.JSONDecodeError, KeyError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
