"""Command line entry point: ``distill-lab {genscene,train,render,bench}``.

Exit codes: 0 success, 1 benchmark assertion failure, 2 usage or config
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, config
from .config import ConfigError
from .field import GridFormatError, load_grid
from .imageio import read_image, write_pfm, write_png
from .prior import NoiseSchedule, corrupt
from .renderer import camera_rays, encode_normals, render, rescale_camera
from .scene import DatasetError, build_scene, generate_dataset, load_dataset, save_dataset
from .trainer import PriorSpec, TrainingProblem, load_checkpoint, train

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distill-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, iters=False, res=False, resume=False):
        sp.add_argument("--config", help="experiment JSON (schema defaults fill the rest)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--jobs", type=int, help="worker cap (DISTILL_LAB_THREADS wins)")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
        if iters:
            sp.add_argument("--iters", type=int, help="override the iteration count")
        if res:
            sp.add_argument("--res", type=int, help="output width; height keeps the aspect")
        if resume:
            sp.add_argument("--resume", help="checkpoint sidecar (.json) to continue from")

    common(sub.add_parser("genscene", help="build the ground-truth grid and render the dataset"))
    common(sub.add_parser("train", help="run the inpainting optimization"), iters=True, resume=True)
    r = sub.add_parser("render", help="render color, depth and normals of a grid or checkpoint")
    r.add_argument("checkpoint", help="checkpoint sidecar (.json) or grid (.vxg)")
    r.add_argument("--view", type=int, action="append", help="view index (repeatable)")
    common(r, res=True)
    b = sub.add_parser("bench", help="run a benchmark suite")
    b.add_argument("suite", choices=bench.SUITES)
    common(b, iters=True)
    return p


def _load_config(args) -> dict:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}", str(path)) from exc
    cfg = config.resolve(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    jobs = os.environ.get("DISTILL_LAB_THREADS")
    if jobs:
        try:
            cfg["jobs"] = int(jobs)
        except ValueError:
            raise ConfigError(f"DISTILL_LAB_THREADS must be an integer, got {jobs!r}") from None
    elif args.jobs is not None:
        cfg["jobs"] = args.jobs
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1", "jobs")
    if getattr(args, "iters", None) is not None:
        if args.iters < 1:
            raise ConfigError("--iters must be positive", "train/iterations")
        cfg["train"]["iterations"] = args.iters
        cfg["bench"]["iterations"] = args.iters
    if getattr(args, "res", None) is not None:
        if args.res < 1:
            raise ConfigError("--res must be positive", "render/resolution")
        cfg["render"]["resolution"] = args.res
    if getattr(args, "view", None):
        cfg["render"]["views"] = args.view
    return cfg


def _write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.dumps(cfg))


def _dataset(cfg: dict):
    """The configured dataset directory, else the one ``genscene`` wrote under
    the output directory, else a fresh in-memory render of the scene block."""
    if cfg.get("dataset"):
        return load_dataset(cfg["dataset"])
    written = Path(cfg["output"]) / "dataset"
    if (written / "poses.json").exists():
        return load_dataset(written)
    return _generate(cfg)


def _generate(cfg: dict, out: Path | None = None, verbose=False):
    spec = config.scene_spec(cfg)
    full = build_scene(spec, include_removable=True)
    empty = build_scene(spec, include_removable=False)
    ds = generate_dataset(full, config.camera_ring(cfg), config.mask_box(cfg), config.dataset_sampling(cfg),
                          target_grid=empty, jobs=cfg["jobs"])
    if out is not None:
        save_dataset(ds, out)
    if verbose:
        for v in range(len(ds)):
            cam = ds.cameras[v]
            print(f"view {v:02d}  {cam.width}x{cam.height}  masked {ds.masks[v].mean():.4f}")
    return ds


def _out(args, cfg: dict, default: str) -> Path:
    return Path(args.out) if args.out else Path(cfg["output"]) / default


def cmd_genscene(args, cfg) -> int:
    if "scene" not in cfg:
        raise ConfigError("missing required field 'scene'", "scene")
    config.scene_spec(cfg)
    if args.dry_run:
        return EXIT_OK
    out = _out(args, cfg, "dataset")
    _write_config(cfg, out)
    ds = _generate(cfg, out, verbose=True)
    print(f"wrote {len(ds)} views to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tcfg = config.train_config(cfg)
    if args.dry_run:
        return EXIT_OK
    out = _out(args, cfg, "train")
    _write_config(cfg, out)
    ds = _dataset(cfg)
    problem = TrainingProblem(ds, tcfg)

    def progress(rep):
        if rep.step % tcfg.log_every == 0:
            print(f"step {rep.step:6d}  loss_app {rep.loss_app:.6g}  loss_depth {rep.loss_depth:.6g}  "
                  f"grad {rep.grad_total:.4g}", flush=True)

    res = train(problem, tcfg, out, resume=args.resume, progress=progress)
    if res.status != "ok":
        print(f"error: {res.error}", file=sys.stderr)
        return EXIT_NUMERIC
    if res.evals:
        last = res.evals[-1]
        print("final " + "  ".join(f"{k} {v:.4f}" for k, v in last.items() if k != "step"))
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.dry_run:
        return EXIT_OK
    ds = _dataset(cfg)
    if ckpt.suffix == ".vxg":
        grid = load_grid(ckpt)
        sampling = ds.sampling
    else:
        grid, _, _ = load_checkpoint(ckpt)
        sampling = config.sampling(cfg)
    views = cfg["render"]["views"]
    views = list(range(len(ds))) if views is None else views
    bad = [v for v in views if not 0 <= v < len(ds)]
    if bad:
        raise UsageError(f"view index {bad[0]} is outside the pose file ({len(ds)} views)")
    out = _out(args, cfg, "render")
    _write_config(cfg, out)
    res = cfg["render"]["resolution"]
    for v in views:
        cam = ds.cameras[v] if res is None else rescale_camera(ds.cameras[v], res)
        o = render(grid, camera_rays(cam, sampling, grid), sampling, normals=True, keep_segments=False,
                   jobs=cfg["jobs"])
        stem = out / f"view_{v:02d}"
        write_pfm(f"{stem}_color.pfm", o.color)
        write_png(f"{stem}_color.png", o.color)
        write_pfm(f"{stem}_depth.pfm", o.depth)
        write_pfm(f"{stem}_normal.pfm", o.normal)
        write_png(f"{stem}_normal.png", encode_normals(o.normal))
        print(f"view {v:02d}  {cam.width}x{cam.height}  -> {stem}_*")
    return EXIT_OK


def run_suite(suite: str, cfg: dict, out: Path | None = None, progress=None) -> bench.SuiteReport:
    """Dispatch one benchmark suite from a resolved config."""
    bc = cfg["bench"]
    seed = cfg["seed"]
    if suite == "gradcheck":
        return bench.gradcheck_suite(seed, bc["gradcheck_trials"])
    if suite == "identities":
        return bench.identity_audit(seed, bc["identity_instances"])
    if suite == "variance":
        tcfg = config.train_config(cfg)
        spec = PriorSpec(**cfg["priors"]["rgb"])
        x, prior = bench.canonical_variance_fixture(bc["variance_view"], bc["variance_resolution"], spec,
                                                    config.sampling(cfg))
        x, prior = _override_variance_images(bc, x, prior, spec)
        cases = bench.default_variance_cases(bc["sds_omega"], tcfg.appearance, bc["estimators"])
        return bench.variance_suite(cases, prior, NoiseSchedule(**cfg["schedule"]), x, bc["variance_draws"],
                                    seed, tcfg.t_range, bc["variance_var_sweep"], tcfg.appearance)
    ds = _dataset(cfg)
    if bc["empty_mask"]:
        ds = bench.with_empty_masks(ds)
    tcfg = config.train_config(cfg)
    if suite == "omega3":
        return bench.omega3_sweep(ds, tcfg, bc["omega3_values"], bc["seeds"], bc["iterations"], out,
                                  progress=progress)
    if suite == "compare":
        return bench.estimator_compare(ds, tcfg, bc["estimators"], bc["seeds"], bc["iterations"], bc["sds_omega"],
                                       out, progress=progress)
    raise UsageError(f"unknown suite {suite!r}; valid suites: {', '.join(bench.SUITES)}")


def _override_variance_images(bc, x, prior, spec):
    if bc["variance_image"]:
        x = read_image(bc["variance_image"])
    if bc["variance_mean"]:
        mean = read_image(bc["variance_mean"])
        prior = replace(prior, mean_pos=mean, mean_neg=corrupt(mean, spec.negative, spec.strength))
    if x.shape != prior.shape:
        raise ConfigError(f"variance image {x.shape} and prior mean {prior.shape} differ", "bench/variance_image")
    return x, prior


def cmd_bench(args, cfg) -> int:
    if args.dry_run:
        return EXIT_OK
    out = Path(args.out) if args.out else Path("reports") / cfg["name"] / args.suite
    _write_config(cfg, out)

    def progress(row):
        print("  ".join(f"{k}={bench._cell(v)}" for k, v in row.items()), flush=True)

    report = run_suite(args.suite, cfg, out, progress)
    bench.write_report(report, out)
    sys.stdout.write(report.results.to_csv())
    if not report.passed:
        for f in report.failures:
            print(f"FAILED {json.dumps(f, default=float, sort_keys=True)}", file=sys.stderr)
        return EXIT_FAILED
    print(f"{args.suite}: all checks passed ({out})")
    return EXIT_OK


COMMANDS = {"genscene": cmd_genscene, "train": cmd_train, "render": cmd_render, "bench": cmd_bench}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        code = COMMANDS[args.command](args, cfg)
        if args.dry_run and code == EXIT_OK:
            sys.stdout.write(config.dumps(cfg))
        return code
    except (ConfigError, UsageError, DatasetError, GridFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
