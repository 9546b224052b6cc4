"""``srnam`` command line: train, degrade, invert and evaluate.

Configuration is a text file of dotted ``key=value`` lines (values parsed as
JSON when possible); ``--set key=value`` and dedicated flags override it.

Exit codes: 0 ok, 2 configuration/validation error, 3 training divergence,
4 missing or incompatible checkpoint.
"""

import argparse
import json
import logging
import re
import shutil
import sys
from pathlib import Path

import torch
import torch.nn.functional as F

from . import degrader as deg
from . import hrgen
from .errors import CheckpointError, ConfigError, DivergenceError, ManifestError, ShapeError
from .imagedata import (HR_SIZE, LR_SIZE, image_grid, load_manifest, normalize, read_png, synth_dataset,
                        write_png)
from .metrics import DarkBlobLandmarks, heatmap_metric, solution_diversity, write_report
from .naminvert import InversionOptions, load_pipeline, super_resolve

log = logging.getLogger("srnam")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4
MAX_INVERT_ITERS = 10_000

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "data.hr_manifest": None,
    "data.lr_manifest": None,
    "data.synthetic_hr": 200,
    "data.synthetic_lr": 200,
    "data.seed": 0,
    "percept.backend": "random",
    "percept.seed": 0,
    "degrader.iterations": 500_000,
    "degrader.d_steps_per_g_step": 5,
    "degrader.gp_lambda": 10.0,
    "degrader.batch_size": 64,
    "degrader.lr": 1e-3,
    "degrader.alpha": 1.0,
    "degrader.beta": 0.05,
    "degrader.gamma": 1.0,
    "degrader.delta": 1.0,
    "degrader.channels": 64,
    "degrader.noise_dim": deg.NOISE_DIM,
    "degrader.norm": True,
    "degrader.seed": None,
    "degrader.log_every": 50,
    "hrgen.resolutions": [4, 8, 16, 32, 64],
    "hrgen.epochs": [10, 20, 20, 20, 50],
    "hrgen.batch_sizes": [64, 64, 64, 32, 16],
    "hrgen.fade_fraction": 0.5,
    "hrgen.latent_dim": hrgen.LATENT_DIM,
    "hrgen.channels": list(hrgen.DEFAULT_CHANNELS),
    "hrgen.normalize_latent": True,
    "hrgen.pixel_norm": True,
    "hrgen.equalized_lr": True,
    "hrgen.minibatch_std": True,
    "hrgen.gp_lambda": 10.0,
    "hrgen.d_steps_per_g_step": 1,
    "hrgen.lr": 1e-3,
    "hrgen.betas": [0.0, 0.99],
    "hrgen.seed": None,
    "hrgen.sample_seed": 1234,
    "hrgen.log_every": 20,
    "naminvert.iterations": 400,
    "naminvert.num_solutions": 3,
    "naminvert.lr": 1e-3,
    "naminvert.init_scale": 1.0,
    "naminvert.project_sphere": False,
    "naminvert.noise_seed": None,
    "naminvert.workers": 1,
    "naminvert.seed": None,
    "metrics.sigma": 1.5,
    "checkpoints.degrader": None,
    "checkpoints.generator": None,
}


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(lines, source="<config>"):
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = parse_value(value)
    return out


def load_config(path=None, overrides=()):
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path)))
    cfg.update(parse_assignments(overrides, "--set"))
    return cfg


def seed_for(cfg, module):
    value = cfg[f"{module}.seed"]
    return int(cfg["seed"] if value is None else value)


def require_path(cfg, key):
    value = cfg[key]
    if value is None or not Path(value).exists():
        raise ConfigError(f"{key}: path does not exist: {value!r}")
    return Path(value)


def checkpoint_dir(cfg, name):
    value = cfg[f"checkpoints.{name}"]
    return Path(value) if value is not None else Path(cfg["out"]) / name


def fresh_output_dir(path, overwrite):
    """Refuse to touch an existing checkpoint unless asked to."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ConfigError(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_datasets(cfg, need_lr=True):
    seed = int(cfg["data.seed"])
    if cfg["data.hr_manifest"] is not None:
        hr = load_manifest(require_path(cfg, "data.hr_manifest"))
    else:
        hr = synth_dataset(int(cfg["data.synthetic_hr"]), HR_SIZE, seed)
    lr = None
    if need_lr:
        if cfg["data.lr_manifest"] is not None:
            lr = load_manifest(require_path(cfg, "data.lr_manifest"))
        else:
            lr = synth_dataset(int(cfg["data.synthetic_lr"]), LR_SIZE, seed + 1)
    return hr, lr


def degrader_config(cfg):
    return deg.DegraderTrainConfig(
        iterations=int(cfg["degrader.iterations"]),
        d_steps_per_g_step=int(cfg["degrader.d_steps_per_g_step"]),
        gp_lambda=float(cfg["degrader.gp_lambda"]),
        batch_size=int(cfg["degrader.batch_size"]),
        weights=deg.LossWeights(*(float(cfg[f"degrader.{k}"]) for k in ("alpha", "beta", "gamma", "delta"))),
        lr=float(cfg["degrader.lr"]),
        channels=int(cfg["degrader.channels"]),
        noise_dim=int(cfg["degrader.noise_dim"]),
        norm=bool(cfg["degrader.norm"]),
        seed=seed_for(cfg, "degrader"),
        data_seed=int(cfg["data.seed"]),
        percept_backend=cfg["percept.backend"],
        percept_seed=int(cfg["percept.seed"]),
    )


def progressive_config(cfg):
    schedule = hrgen.GrowthSchedule(cfg["hrgen.resolutions"], cfg["hrgen.epochs"],
                                    cfg["hrgen.batch_sizes"], float(cfg["hrgen.fade_fraction"]))
    return hrgen.ProgressiveTrainConfig(
        schedule=schedule,
        latent_dim=int(cfg["hrgen.latent_dim"]),
        channels=tuple(int(c) for c in cfg["hrgen.channels"]),
        normalize_latent=bool(cfg["hrgen.normalize_latent"]),
        pixel_norm=bool(cfg["hrgen.pixel_norm"]),
        equalized_lr=bool(cfg["hrgen.equalized_lr"]),
        minibatch_std=bool(cfg["hrgen.minibatch_std"]),
        gp_lambda=float(cfg["hrgen.gp_lambda"]),
        d_steps_per_g_step=int(cfg["hrgen.d_steps_per_g_step"]),
        lr=float(cfg["hrgen.lr"]),
        betas=tuple(float(b) for b in cfg["hrgen.betas"]),
        seed=seed_for(cfg, "hrgen"),
        data_seed=int(cfg["data.seed"]),
        sample_seed=int(cfg["hrgen.sample_seed"]),
    )


# --- commands ----------------------------------------------------------------

def cmd_train_degrader(cfg, args):
    train_cfg = degrader_config(cfg)
    hr, lr = load_datasets(cfg)
    out = fresh_output_dir(checkpoint_dir(cfg, "degrader"), args.overwrite)
    deg.train_degrader(train_cfg, hr, lr, out_dir=out,
                       log_every=int(cfg["degrader.log_every"]), log=log.info)
    log.info("degrader checkpoint written to %s", out)
    return EXIT_OK


def cmd_train_generator(cfg, args):
    train_cfg = progressive_config(cfg)
    hr, _ = load_datasets(cfg, need_lr=False)
    out = fresh_output_dir(checkpoint_dir(cfg, "generator"), args.overwrite)
    hrgen.train_progressive(train_cfg, hr, out_dir=out,
                            log_every=int(cfg["hrgen.log_every"]), log=log.info)
    log.info("generator checkpoints written to %s", out)
    return EXIT_OK


def read_image(path, side, flag):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{flag}: file not found: {path}")
    pixels = read_png(path)
    if pixels.shape != (3, side, side):
        raise ShapeError(f"{flag}: expected a {side}x{side} image, got {pixels.shape[2]}x{pixels.shape[1]}")
    return normalize(pixels)


def cmd_degrade(cfg, args):
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    hr = read_image(args.hr_image, HR_SIZE, "--hr-image")
    gen, _, _ = deg.load_degrader(checkpoint_dir(cfg, "degrader"))
    out = Path(cfg["out"]) / "degraded"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.hr_image).stem
    with torch.no_grad():
        for k in range(args.count):
            z = deg.sample_noise(1, gen.noise_dim, seed=args.noise_seed + k)[0]
            write_png(out / f"{stem}_lr{k}.png", deg.degrade(gen, hr, z))
    log.info("wrote %d LR samples to %s", args.count, out)
    return EXIT_OK


def _merge_report(path, new_lines, image_id):
    keep = []
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip() and json.loads(line)["id"] != image_id:
                keep.append(json.loads(line))
    rows = sorted(keep + new_lines, key=lambda r: (r["id"], r["k"]))
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def comparison_grid(lr, candidates):
    """Top row: LR input then each HR candidate. Bottom row: each re-degraded LR."""
    up = lambda x: F.interpolate(x.unsqueeze(0), size=HR_SIZE, mode="nearest")[0]
    blank = torch.full((3, HR_SIZE, HR_SIZE), -1.0)
    top = [up(lr)] + [c.hr_image for c in candidates]
    bottom = [blank] + [up(c.lr_recon) for c in candidates]
    return image_grid(torch.stack(top + bottom), len(top))


def cmd_invert(cfg, args):
    iters = int(args.iters if args.iters is not None else cfg["naminvert.iterations"])
    if not 1 <= iters <= MAX_INVERT_ITERS:
        raise ConfigError(f"--iters must be in [1, {MAX_INVERT_ITERS}], got {iters}")
    k = int(args.num_solutions if args.num_solutions is not None else cfg["naminvert.num_solutions"])
    if k < 1:
        raise ConfigError("--num-solutions must be >= 1")
    seed = args.seed if args.seed is not None else seed_for(cfg, "naminvert")
    lr = read_image(args.lr_image, LR_SIZE, "--lr-image")
    pipe, _ = load_pipeline(checkpoint_dir(cfg, "degrader"), checkpoint_dir(cfg, "generator"),
                            noise_seed=cfg["naminvert.noise_seed"])
    opts = InversionOptions(
        iterations=iters, num_solutions=k, seed=int(seed), lr=float(cfg["naminvert.lr"]),
        init_scale=float(cfg["naminvert.init_scale"]), latent_dim=pipe.latent_dim,
        project_sphere=bool(cfg["naminvert.project_sphere"]), record_trace=False,
        workers=int(cfg["naminvert.workers"]))
    candidates = super_resolve(lr, pipe, opts)
    out = Path(cfg["out"]) / "invert"
    out.mkdir(parents=True, exist_ok=True)
    image_id = Path(args.lr_image).stem
    lines = []
    for rank, cand in enumerate(candidates):
        write_png(out / f"{image_id}_sol{rank}_hr.png", cand.hr_image)
        write_png(out / f"{image_id}_sol{rank}_lr.png", cand.lr_recon)
        lines.append({"id": image_id, "k": rank, "seed": cand.seed, "iterations": iters,
                      "best_objective": cand.best_objective})
    _merge_report(out / "report.jsonl", lines, image_id)
    write_png(Path(cfg["out"]) / "grids" / f"{image_id}.png", comparison_grid(lr, candidates))
    log.info("wrote %d candidates for %s to %s", len(candidates), image_id, out)
    return EXIT_OK


_SOLUTION_RE = re.compile(r"^(?P<id>.+)_sol(?P<k>\d+)_hr\.png$")


def cmd_eval(cfg, args):
    sol_dir, ref_dir = Path(args.solutions_dir), Path(args.reference_dir)
    for flag, d in (("--solutions-dir", sol_dir), ("--reference-dir", ref_dir)):
        if not d.is_dir():
            raise ConfigError(f"{flag}: not a directory: {d}")
    solutions = {}
    for p in sorted(sol_dir.glob("*_sol*_hr.png")):
        m = _SOLUTION_RE.match(p.name)
        if m:
            solutions.setdefault(m["id"], {})[int(m["k"])] = p
    if not solutions:
        raise ConfigError(f"no <id>_sol<k>_hr.png files in {sol_dir}")
    missing = sorted(i for i in solutions if not (ref_dir / f"{i}.png").is_file())
    if missing:
        raise ConfigError(f"solution ids without a reference image in {ref_dir}: {', '.join(missing)}")
    objectives = {}
    report = sol_dir / "report.jsonl"
    if report.is_file():
        for line in report.read_text(encoding="utf-8").splitlines():
            if line.strip():
                r = json.loads(line)
                objectives[(r["id"], r["k"])] = r["best_objective"]

    backend = DarkBlobLandmarks(sigma=float(cfg["metrics.sigma"]))
    rows = []
    for image_id in sorted(solutions):
        ref = read_image(ref_dir / f"{image_id}.png", HR_SIZE, "--reference-dir")
        ref_maps = backend(ref)
        sols = {k: read_image(p, HR_SIZE, "--solutions-dir") for k, p in sorted(solutions[image_id].items())}
        diversity = solution_diversity(list(sols.values())) if len(sols) >= 2 else None
        for k, img in sols.items():
            rows.append({"id": image_id, "k": k, "heatmap_metric": heatmap_metric(backend(img), ref_maps),
                         "objective": objectives.get((image_id, k)), "diversity": diversity})
    out = Path(args.report) if args.report else Path(cfg["out"]) / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rows)
    log.info("wrote %d rows to %s", len(rows), out)
    return EXIT_OK


def cmd_synth(cfg, args):
    ds = synth_dataset(args.count, args.resolution, args.seed if args.seed is not None else cfg["seed"])
    path = ds.save(Path(args.out_dir))
    log.info("wrote %d images and %s", len(ds), path)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--out", help="output directory (config key 'out')")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="srnam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-degrader", parents=[common], help="train the HR->LR degradation model")
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train_degrader)

    p = sub.add_parser("train-generator", parents=[common], help="train the progressive HR generator")
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("degrade", parents=[common], help="sample LR images from one HR image")
    p.add_argument("--hr-image", required=True)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("invert", parents=[common], help="recover HR candidates for one LR image")
    p.add_argument("--lr-image", required=True)
    p.add_argument("-K", "--num-solutions", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", parents=[common], help="heatmap metric and diversity report")
    p.add_argument("--solutions-dir", required=True)
    p.add_argument("--reference-dir", required=True)
    p.add_argument("--report", help="CSV path (default <out>/eval.csv)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic face dataset with manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--resolution", type=int, choices=(16, 64), required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out is not None:
            cfg["out"] = args.out
        if args.seed is not None and args.command in ("train-degrader", "train-generator"):
            cfg["seed"] = args.seed
        return args.func(cfg, args)
    except (ConfigError, ManifestError, ShapeError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        log.error("checkpoint problem: %s", exc)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
