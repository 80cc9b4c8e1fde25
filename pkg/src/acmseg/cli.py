"""Command-line interface: ``acmseg <command> [options]``.

Commands
--------
synth      write a synthetic multi-instance dataset folder
train      train the backbone through the unrolled contour evolution
segment    segment a folder of images with a trained checkpoint
evolve     run the contour alone on one image from a circle, mask or SDF start
eval       score a folder of predicted masks against ground truth
gradcheck  compare tape gradients with central differences

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import acm as acm_mod
from . import autodiff as ad
from . import backbone as bb
from . import data as data_mod
from . import metrics
from . import training
from .acm import AcmConfig
from .backbone import BackboneConfig
from .training import TrainConfig

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger("acmseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """Invalid configuration file or flag combination."""


# -- configuration --------------------------------------------------------------

DATA_DEFAULTS = {"root": None, "train_fraction": 0.8, "split_seed": 0}
SECTIONS = {"backbone": BackboneConfig, "acm": AcmConfig, "train": TrainConfig, "data": None}


def _section_keys(name: str) -> set:
    cls = SECTIONS[name]
    return set(DATA_DEFAULTS) if cls is None else {f.name for f in fields(cls)}


def load_config(path) -> dict:
    """Read a TOML run config; unknown sections or keys raise :class:`ConfigError`."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config entry {section!r} must be a table")
        unknown = sorted(set(values) - _section_keys(section))
        if unknown:
            raise ConfigError(f"unknown config key {section}.{unknown[0]}")
    return raw


def build_configs(raw: dict, overrides: dict) -> tuple[BackboneConfig, AcmConfig, TrainConfig, dict]:
    """Merge TOML sections with flag overrides (flags win) into config objects."""
    merged = {s: dict(raw.get(s, {})) for s in SECTIONS}
    for (section, key), value in overrides.items():
        if value is not None:
            merged[section][key] = value
    try:
        bcfg = BackboneConfig(**merged["backbone"])
        acfg = AcmConfig(**merged["acm"])
        tcfg = TrainConfig(**merged["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    dcfg = {**DATA_DEFAULTS, **merged["data"]}
    return bcfg, acfg, tcfg, dcfg


def config_echo(bcfg, acfg, tcfg, dcfg) -> dict:
    return {"backbone": bb.config_dict(bcfg), "acm": asdict(acfg), "train": asdict(tcfg),
            "data": {k: (str(v) if isinstance(v, Path) else v) for k, v in dcfg.items()}}


def _single_thread():
    """Pin BLAS to one thread so that reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


# -- gradient checks --------------------------------------------------------------

ORACLE_DTYPE = np.longdouble


def _op_cases(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    r3 = rng.normal(size=(2, 3, 6, 6))
    r2 = rng.normal(size=(2, 2, 6, 6))
    pos = np.abs(rng.normal(size=(4, 5))) + 0.5
    r45 = rng.normal(size=(4, 5))
    return {
        "arctan": (lambda v: ad.sum(ad.arctan(v) * r45), pos - 1.0),
        "sigmoid": (lambda v: ad.sum(ad.sigmoid(v) * r45), pos - 1.0),
        "softplus": (lambda v: ad.sum(ad.softplus(v) * r45), pos - 1.0),
        "sqrt": (lambda v: ad.sum(ad.sqrt(v) * r45), pos),
        "div": (lambda v: ad.sum(ad.div(r45, v) * r45), pos),
        "square": (lambda v: ad.sum(ad.square(v) * r45), pos - 1.0),
        "central_diff": (lambda v: ad.sum(ad.central_diff(v, -1) * r45 + ad.central_diff(v, -2) * r45),
                         pos),
        "box_filter": (lambda v: ad.sum(ad.box_filter_masked(v, 1) * r45), pos),
        "conv2d": (lambda v: ad.sum(ad.conv2d(v, w, np.zeros(3), dilation=2) * r3), x),
        "batch_norm": (lambda v: ad.sum(ad.batch_norm(v, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2),
                                                      True, update_stats=False) * r2), x),
        "upsample": (lambda v: ad.sum(ad.resize(v, 2) * rng_fixed(v.shape)), x),
        "downsample": (lambda v: ad.sum(ad.resize(v, 0.5) * rng_fixed(v.shape, 0.5)), x),
    }


def rng_fixed(shape, factor=2.0):
    h, w = int(shape[-2] * factor), int(shape[-1] * factor)
    return np.random.default_rng(99).normal(size=(*shape[:-2], h, w))


def gradcheck_ops(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {name: ad.grad_check(f, x) for name, (f, x) in _op_cases(rng).items()}


def acm_gradcheck_problem(size: int = 16, seed: int = 0):
    """Noisy disk image, perturbed circle start and random weight maps."""
    rng = np.random.default_rng(seed)
    yy, xx = np.indices((size, size))
    c = (size - 1) / 2
    r = size / 3
    truth = (np.hypot(yy - c, xx - c) <= r).astype(np.float64)
    img = np.where(truth > 0, 0.8, 0.2) + rng.normal(0, 0.05, truth.shape)
    phi0 = acm_mod.circle_sdf((size, size), (c, c), r - 1) + rng.normal(0, 0.1, truth.shape)
    lam1, lam2 = rng.uniform(0.5, 1.5, size=(2, size, size))
    return img, truth, phi0, lam1, lam2


def gradcheck_acm(size: int = 16, steps: int = 5, radius: int = 3, seed: int = 0, h: float = 1e-5) -> dict:
    """Soft Dice of the unrolled contour, checked w.r.t. phi0, lambda1 and lambda2."""
    img, truth, phi0, lam1, lam2 = acm_gradcheck_problem(size, seed)
    cfg = AcmConfig(window_radius=radius)

    def loss(p, l1, l2):
        return training.soft_dice_loss(acm_mod.logits_from_levelset(
            acm_mod.evolve(p, img, l1, l2, cfg, steps=steps)), truth)

    return {
        "phi0": ad.grad_check(lambda v: loss(v, lam1, lam2), phi0, h, oracle_dtype=ORACLE_DTYPE),
        "lambda1": ad.grad_check(lambda v: loss(phi0, v, lam2), lam1, h, oracle_dtype=ORACLE_DTYPE),
        "lambda2": ad.grad_check(lambda v: loss(phi0, lam1, v), lam2, h, oracle_dtype=ORACLE_DTYPE),
    }


TINY_BACKBONE = BackboneConfig(base_channels=2, depth=2)


E2E_STEP = 1e-7


def gradcheck_e2e(size: int = 16, steps: int = 3, fraction: float = 0.01, seed: int = 0,
                  h: float = E2E_STEP, cfg: BackboneConfig = TINY_BACKBONE) -> dict:
    """Loss of backbone + unrolled contour w.r.t. a random subset of the weights.

    An untrained ReLU network outputs its bias over dead regions, so the
    initial level set has pixels where ``|grad phi|`` sits at the guard
    floor ``sqrt(GUARD) = 1e-4``.  The curvature varies on that scale
    there, so the probe step must be well below it; the default ``h`` is
    1e-7, with the differences taken in extended precision.
    """
    store = bb.init_weights(cfg, seed, dtype=np.float64)
    names = list(store.params)
    shapes = [store.params[n].shape for n in names]
    sizes = [store.params[n].size for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    theta = np.concatenate([store.params[n].ravel() for n in names]).astype(np.float64)
    spec = data_mod.SynthSpec(size=size, count=(1, 2), disk_radius=(2, max(2, size // 5)),
                              rect_side=(3, max(3, size // 3)), min_gap=1, seed=seed)
    samples = data_mod.synth_generate(spec, 2)
    X = np.stack([s.X for s in samples])[:, None]
    Y = np.stack([s.Ygt for s in samples]).astype(np.float64)
    acfg = AcmConfig(window_radius=min(3, size // 2 - 1))

    def loss(v):
        xs = X.astype(v.dtype)
        over = {n: v[int(offsets[i]):int(offsets[i + 1])].reshape(shapes[i]) for i, n in enumerate(names)}
        lam1, lam2, phi0, _ = bb.forward(store, cfg, xs, training=True, update_stats=False, overrides=over)
        phi = acm_mod.evolve(phi0, xs[:, 0], lam1, lam2, acfg, steps=steps)
        return training.soft_dice_loss(acm_mod.logits_from_levelset(phi), Y)

    rng = np.random.default_rng(seed + 1)
    k = max(1, int(round(fraction * theta.size)))
    idx = np.sort(rng.choice(theta.size, size=k, replace=False))
    err = ad.grad_check(loss, theta, h, indices=idx, oracle_dtype=ORACLE_DTYPE)
    return {"weights": err, "checked": int(k), "total": int(theta.size)}


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = data_mod.SynthSpec(size=args.size, count=(args.min_instances, args.max_instances),
                              disk_radius=tuple(args.disk_radius), rect_side=tuple(args.rect_side),
                              min_gap=args.min_gap, shapes=tuple(args.shapes), noise=args.noise, gradient=not args.no_gradient,
                              gradient_strength=args.gradient_strength, seed=args.seed)
    samples = data_mod.synth_generate(spec, args.train + args.test)
    ids = [s.id for s in samples]
    split = {"train": ids[:args.train], "test": ids[args.train:]}
    data_mod.write_folder(samples, args.out, split=split)
    print(f"wrote {len(samples)} samples to {args.out} ({args.train} train / {args.test} test)")
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {
        ("train", "ablation"): args.ablation,
        ("train", "acm_steps"): args.acm_steps,
        ("train", "seed"): args.seed,
        ("train", "precision"): args.precision,
        ("train", "epochs"): args.epochs,
        ("train", "batch_size"): args.batch_size,
        ("train", "lr"): args.lr,
        ("train", "deterministic"): True if args.deterministic else None,
        ("data", "root"): args.data,
    }


def cmd_train(args) -> int:
    bcfg, acfg, tcfg, dcfg = build_configs(load_config(args.config), _train_overrides(args))
    if dcfg["root"] is None:
        raise ConfigError("no dataset: pass --data or set data.root")
    samples = data_mod.load_folder(dcfg["root"])
    train_set, test_set = data_mod.split(samples, (dcfg["train_fraction"], 1 - dcfg["train_fraction"]),
                                         seed=dcfg["split_seed"],
                                         split_spec=data_mod.read_split_file(dcfg["root"]))
    mult = bcfg.multiple
    train_set = [data_mod.pad_sample(s, mult) for s in train_set]
    echo = config_echo(bcfg, acfg, tcfg, dcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True))
    guard = _single_thread() if tcfg.deterministic else nullcontext()
    with guard:
        best, runlog = training.train(train_set, test_set, bcfg, acfg, tcfg, out_dir=out, config_echo=echo)
    epochs = runlog.of_type("epoch")
    if epochs and epochs[-1]["eval"]:
        ev = epochs[-1]["eval"]
        print(f"final epoch: dice {ev['dice']:.4f} boundf {ev['boundf']:.4f}")
    print(f"checkpoints and runlog in {out}")
    return EXIT_OK


def _image_paths(root: Path) -> list[Path]:
    src = root / "images" if (root / "images").is_dir() else root
    if not src.is_dir():
        raise data_mod.DataError(f"input folder {root} does not exist")
    paths = [p for p in sorted(src.iterdir()) if p.suffix.lower() in data_mod.IMAGE_SUFFIXES]
    if not paths:
        raise data_mod.DataError(f"no PNG/PGM images in {src}")
    return paths


def _normalised(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a, dtype=np.float64) if hi <= lo else (a - lo) / (hi - lo)


def cmd_segment(args) -> int:
    store = bb.load_checkpoint(args.weights)
    bcfg = training.backbone_for(store)
    bb.load_checkpoint(args.weights, bcfg)  # verifies that every tensor is present
    acfg = AcmConfig(steps=args.steps, band_half_width=args.band, window_radius=args.window)
    if args.precision:
        store = store.astype(np.dtype(args.precision))
    out = Path(args.out)
    paths = _image_paths(Path(args.input))
    for p in paths:
        img = data_mod.read_image(p)
        res = training.infer(store, bcfg, img, acfg, banded=not args.no_band)
        data_mod.write_mask(out / "masks" / f"{p.stem}.png", res.mask)
        data_mod.write_image(out / "phi0" / f"{p.stem}.png", _normalised(res.phi0))
        data_mod.write_image(out / "lambda1" / f"{p.stem}.png", _normalised(res.lambda1))
        data_mod.write_image(out / "lambda2" / f"{p.stem}.png", _normalised(res.lambda2))
        (out / "raw").mkdir(parents=True, exist_ok=True)
        np.savez(out / "raw" / f"{p.stem}.npz", mask=res.mask, phi=res.phi, lambda1=res.lambda1,
                 lambda2=res.lambda2, phi0=res.phi0)
    print(f"segmented {len(paths)} images into {out}")
    return EXIT_OK


def initial_levelset(args, shape) -> np.ndarray:
    if args.init == "circle":
        center = args.center if args.center is not None else ((shape[0] - 1) / 2, (shape[1] - 1) / 2)
        radius = args.radius if args.radius is not None else min(shape) / 4
        if radius <= 0:
            raise ConfigError("--radius must be positive")
        return acm_mod.circle_sdf(shape, center, radius)
    if args.init_file is None:
        raise ConfigError(f"--init {args.init} needs --init-file")
    if args.init == "mask":
        m = data_mod.read_mask(args.init_file)
        if m.shape != shape:
            raise ConfigError(f"init mask {m.shape} does not match image {shape}")
        return data_mod.exact_signed_distance(m)
    phi = np.load(args.init_file)
    if phi.shape != shape:
        raise ConfigError(f"init SDF {phi.shape} does not match image {shape}")
    return phi.astype(np.float64)


def cmd_evolve(args) -> int:
    if args.steps < 1:
        raise ConfigError(f"--steps must be >= 1, got {args.steps}")
    try:
        acfg = AcmConfig(mu=args.mu, nu=args.nu, eps=args.eps, dt=args.dt,
                         window_radius=None if args.window == 0 else args.window,
                         band_half_width=args.band, steps=args.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    img = data_mod.read_image(args.image)
    phi0 = initial_levelset(args, img.shape)
    phi = acm_mod.evolve(phi0, img, args.lambda1, args.lambda2, acfg, banded=args.banded).data
    mask = acm_mod.interior_mask(phi)
    data_mod.write_mask(args.out, mask)
    if args.save_phi:
        np.save(args.save_phi, phi)
    if args.gt:
        print(f"dice {metrics.dice(data_mod.read_mask(args.gt), mask):.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _mask_paths(root: Path) -> dict[str, Path]:
    src = root / "masks" if (root / "masks").is_dir() else root
    if not src.is_dir():
        raise data_mod.DataError(f"mask folder {root} does not exist")
    return {p.stem: p for p in sorted(src.iterdir()) if p.suffix.lower() in data_mod.IMAGE_SUFFIXES}


def cmd_eval(args) -> int:
    preds, gts = _mask_paths(Path(args.pred)), _mask_paths(Path(args.gt))
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise data_mod.DataError(f"no prediction for: {', '.join(missing)}")
    ids = sorted(gts)
    gt = [data_mod.read_mask(gts[i]) for i in ids]
    pr = [data_mod.read_mask(preds[i]) for i in ids]
    for i, g, p in zip(ids, gt, pr):
        if g.shape != p.shape:
            raise data_mod.DataError(f"{i}: prediction {p.shape} and ground truth {g.shape} differ")
    report = metrics.evaluate(gt, pr, ids=ids, theta=args.theta)
    out = Path(args.out)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    agg = report.aggregate()
    print(" ".join(f"{k} {agg[k]:.4f}" for k in metrics.METRIC_NAMES))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.scope == "op":
        report, tol = gradcheck_ops(args.seed), 1e-5
    elif args.scope == "acm":
        report, tol = gradcheck_acm(args.size, args.steps or 5, args.radius, args.seed, args.h or 1e-5), 1e-4
    else:
        report, tol = gradcheck_e2e(args.size, args.steps or 3, args.fraction, args.seed,
                                    args.h or E2E_STEP), 1e-4
    errors = {k: v for k, v in report.items() if k not in ("checked", "total")}
    worst = float(max(errors.values()))
    for k, v in errors.items():
        print(f"{k:14s} max rel err {v:.3e}  {'ok' if v < tol else 'FAIL'}")
    result = {"scope": args.scope, "tolerance": tol, "max_rel_err": worst, "passed": bool(worst < tol),
              "report": {k: v if k in ("checked", "total") else float(v) for k, v in report.items()}}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True))
    print(f"gradcheck {args.scope}: {'PASS' if worst < tol else 'FAIL'} (worst {worst:.3e}, tol {tol:g})")
    return EXIT_OK if worst < tol else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acmseg", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset folder")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--test", type=int, default=50)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--min-instances", type=int, default=1)
    s.add_argument("--max-instances", type=int, default=4)
    s.add_argument("--disk-radius", type=int, nargs=2, default=[5, 11], metavar=("MIN", "MAX"))
    s.add_argument("--rect-side", type=int, nargs=2, default=[8, 20], metavar=("MIN", "MAX"))
    s.add_argument("--min-gap", type=int, default=3, help="minimum city-block gap between instances")
    s.add_argument("--shapes", nargs="+", default=["disk", "rect"], choices=["disk", "rect", "union"])
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--no-gradient", action="store_true", help="disable the illumination ramp")
    s.add_argument("--gradient-strength", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train backbone and contour jointly")
    t.add_argument("--config", help="TOML file with [backbone] [acm] [train] [data] tables")
    t.add_argument("--data", help="dataset folder (images/, masks/, optional split.json)")
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=["maps", "const-lambda"])
    t.add_argument("--acm-steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=["float32", "float64"])
    t.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS and no wall-clock fields in the run log")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("segment", help="segment images with a checkpoint")
    g.add_argument("--weights", required=True, help="checkpoint path (with or without .bin)")
    g.add_argument("--input", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=60)
    g.add_argument("--window", type=int, default=5)
    g.add_argument("--band", type=float, default=8.0)
    g.add_argument("--no-band", action="store_true", help="update the full grid every step")
    g.add_argument("--precision", choices=["float32", "float64"])
    g.set_defaults(func=cmd_segment)

    e = sub.add_parser("evolve", help="run the contour alone on one image")
    e.add_argument("--image", required=True)
    e.add_argument("--init", choices=["circle", "mask", "sdf"], default="circle")
    e.add_argument("--init-file", help="mask raster or .npy level set for --init mask|sdf")
    e.add_argument("--center", type=float, nargs=2, metavar=("ROW", "COL"))
    e.add_argument("--radius", type=float)
    e.add_argument("--lambda1", type=float, default=1.0)
    e.add_argument("--lambda2", type=float, default=1.0)
    e.add_argument("--mu", type=float, default=0.2)
    e.add_argument("--nu", type=float, default=0.0)
    e.add_argument("--eps", type=float, default=1.0)
    e.add_argument("--dt", type=float, default=0.5)
    e.add_argument("--window", type=int, default=5, help="local window radius; 0 selects global means")
    e.add_argument("--band", type=float, default=8.0)
    e.add_argument("--banded", action="store_true")
    e.add_argument("--steps", type=int, default=200)
    e.add_argument("--out", required=True)
    e.add_argument("--save-phi", help="also save the final level set as .npy")
    e.add_argument("--gt", help="ground-truth mask to report Dice against")
    e.set_defaults(func=cmd_evolve)

    v = sub.add_parser("eval", help="score predicted masks against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--theta", type=float, default=2.0, help="boundary matching tolerance in pixels")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="verify gradients against central differences")
    c.add_argument("scope", choices=["op", "acm", "e2e"])
    c.add_argument("--size", type=int, default=16)
    c.add_argument("--steps", type=int)
    c.add_argument("--radius", type=int, default=3)
    c.add_argument("--fraction", type=float, default=0.01)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--h", type=float, help="central-difference step (default 1e-5, or 1e-7 for e2e)")
    c.add_argument("--out", help="write the report as JSON")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ad.ShapeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
