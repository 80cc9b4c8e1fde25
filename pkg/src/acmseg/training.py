"""Joint training of the backbone through the unrolled contour evolution."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import acm as acm_mod
from . import autodiff as ad
from . import backbone as bb
from . import data as data_mod
from . import metrics
from .acm import AcmConfig
from .autodiff import Tape
from .backbone import BackboneConfig, WeightStore

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 10.0
    lr_decay_every: int = 10
    batch_size: int = 4
    epochs: int = 30
    acm_steps: int = 20
    ablation: str = "maps"
    seed: int = 0
    precision: str = "float32"
    aux_sdf_weight: float = 0.0
    dice_smooth: float = 1.0
    deterministic: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1 or self.acm_steps < 1:
            raise ValueError("epochs and acm_steps must be >= 1")
        if self.ablation not in ("maps", "const-lambda"):
            raise ValueError(f"ablation must be 'maps' or 'const-lambda', got {self.ablation!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: divide by ``lr_decay`` every ``lr_decay_every`` epochs."""
    return cfg.lr / cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def soft_dice_loss(yout, ygt, smooth: float = 1.0):
    """``1 - (2 sum(y*g) + s) / (sum(y) + sum(g) + s)``, averaged over leading axes."""
    yout = yout if isinstance(yout, ad.Array) else ad.constant(yout)
    ygt = np.asarray(ygt, dtype=yout.dtype)
    if yout.shape != ygt.shape:
        raise ad.ShapeError(f"prediction {yout.shape} and target {ygt.shape} differ")
    axes = (-2, -1)
    inter = ad.sum(yout * ygt, axis=axes)
    denom = ad.sum(yout, axis=axes) + ygt.sum(axis=axes) + smooth
    return ad.mean(1.0 - ad.div(2.0 * inter + smooth, denom, guard=0.0))


def adam_step(params: dict, grads: dict, state: WeightStore, lr: float):
    """Bias-corrected Adam; updates ``params`` and the moments in ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.adam_m.get(name)
        v = state.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.adam_m[name] = m.astype(p.dtype)
        state.adam_v[name] = v.astype(p.dtype)
        mhat = m / c1
        vhat = v / c2
        params[name] = (p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.dtype)
    return params, state


@dataclass
class RunLog:
    """Append-only training record, mirrored to a JSON-lines file when ``path`` is set."""

    records: list = field(default_factory=list)
    path: Path | None = None

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def of_type(self, kind: str) -> list:
        return [r for r in self.records if r.get("type") == kind]

    @classmethod
    def read(cls, path) -> RunLog:
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


@dataclass
class InferResult:
    mask: np.ndarray
    phi: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    phi0: np.ndarray


def _stack(samples, dtype):
    X = np.stack([s.X for s in samples]).astype(dtype)[:, None]
    Y = np.stack([s.Ygt for s in samples]).astype(dtype)
    return X, Y


def training_loss(store: WeightStore, bcfg: BackboneConfig, acfg: AcmConfig, tcfg: TrainConfig,
                  X, Y, tape: Tape | None, sdf_targets=None, update_stats: bool = True):
    """Forward pass of one minibatch: backbone -> unrolled contour -> sigmoid -> soft Dice."""
    lam1, lam2, phi0, leaves = bb.forward(store, bcfg, X, tape=tape, training=True,
                                          update_stats=update_stats)
    phi = acm_mod.evolve(phi0, X[:, 0], lam1, lam2, acfg, steps=tcfg.acm_steps)
    loss = soft_dice_loss(acm_mod.logits_from_levelset(phi), Y, tcfg.dice_smooth)
    if tcfg.aux_sdf_weight and sdf_targets is not None:
        loss = loss + tcfg.aux_sdf_weight * ad.mean(ad.square(phi0 - sdf_targets))
    return loss, leaves


def infer_batch(store: WeightStore, bcfg: BackboneConfig, images: np.ndarray, acfg: AcmConfig,
                banded: bool = True) -> list[InferResult]:
    """Segment a stack of equally sized images ``(B, H, W)``; pads/unpads internally."""
    dtype = next(iter(store.params.values())).dtype
    images = np.asarray(images, dtype=dtype)
    if images.ndim != 3:
        raise ad.ShapeError(f"expected (B, H, W) images, got {images.shape}")
    padded, pad = data_mod.pad_to_multiple(images, bcfg.multiple)
    lam1, lam2, phi0, _ = bb.forward(store, bcfg, padded[:, None], training=False)
    phi = acm_mod.evolve(phi0, padded, lam1, lam2, acfg, banded=banded)
    out = []
    for i in range(images.shape[0]):
        p = data_mod.unpad(phi.data[i], pad)
        out.append(InferResult(mask=(p > 0).astype(np.uint8), phi=p,
                               lambda1=data_mod.unpad(lam1.data[i], pad),
                               lambda2=data_mod.unpad(lam2.data[i], pad),
                               phi0=data_mod.unpad(phi0.data[i], pad)))
    return out


def infer(store: WeightStore, bcfg: BackboneConfig, image: np.ndarray, acfg: AcmConfig,
          banded: bool = True) -> InferResult:
    """Segment one image; ``mask`` is ``phi_N > 0`` and the maps are diagnostics."""
    return infer_batch(store, bcfg, np.asarray(image)[None], acfg, banded)[0]


def evaluate_store(store, bcfg, acfg, samples, theta: float = 2.0, batch: int = 16):
    report = metrics.MetricsReport()
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        results = infer_batch(store, bcfg, np.stack([s.X for s in chunk]), acfg)
        for s, r in zip(chunk, results):
            report.add(s.id, s.Ygt, r.mask, s.instances, theta)
    return report


def train(train_set, test_set, bcfg: BackboneConfig, acfg: AcmConfig, tcfg: TrainConfig,
          out_dir=None, config_echo: dict | None = None):
    """Train and return ``(best_store, runlog)``.

    Each epoch evaluates on ``test_set`` and keeps the checkpoint with the
    best held-out Dice.  A non-finite loss or gradient raises
    :class:`NumericalError`; the last good checkpoint on disk is left as is.
    """
    if not train_set:
        raise ValueError("training set is empty")
    dtype = tcfg.dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    runlog = RunLog(path=out_dir / "runlog.jsonl" if out_dir else None)
    runlog.append({"type": "config", "seed": tcfg.seed,
                   "config": config_echo or {"backbone": bb.config_dict(bcfg), "acm": asdict(acfg),
                                             "train": asdict(tcfg)}})
    store = bb.init_weights(bcfg, tcfg.seed, dtype=dtype,
                            const_lambda=tcfg.ablation == "const-lambda")
    store.meta["train"] = asdict(tcfg)
    if out_dir:
        bb.save_checkpoint(store, out_dir / "last")
    best_store, best_dice = store.copy(), -1.0
    sdf = None
    if tcfg.aux_sdf_weight:
        clamp = bcfg.phi_clamp
        sdf = [np.clip(data_mod.exact_signed_distance(s.Ygt), -clamp, clamp).astype(dtype)
               for s in train_set]

    n = len(train_set)
    step = 0
    for epoch in range(tcfg.epochs):
        lr = learning_rate(tcfg, epoch)
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            X, Y = _stack([train_set[i] for i in idx], dtype)
            targets = np.stack([sdf[i] for i in idx]) if sdf is not None else None
            t0 = time.perf_counter()
            tape = Tape()
            try:
                loss, leaves = training_loss(store, bcfg, acfg, tcfg, X, Y, tape, targets)
            except acm_mod.AcmError as exc:
                raise NumericalError(f"epoch {epoch} step {step}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
            names = list(leaves)
            grads = dict(zip(names, tape.gradient(loss, [leaves[k] for k in names])))
            gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            adam_step(store.params, grads, store, lr)
            rec = {"type": "step", "epoch": epoch, "step": step, "loss": value,
                   "grad_norm": gnorm, "lr": lr}
            if not tcfg.deterministic:
                rec["wall_time"] = time.perf_counter() - t0
            runlog.append(rec)
            step += 1

        report = evaluate_store(store, bcfg, acfg, test_set) if test_set else None
        agg = report.aggregate() if report else {}
        runlog.append({"type": "epoch", "epoch": epoch, "lr": lr, "steps": step,
                       "eval": {k: agg[k] for k in ("dice", "iou", "wcov", "boundf", "rmse")} if agg else {}})
        log.info("epoch %d lr %g dice %.4f boundf %.4f", epoch, lr,
                 agg.get("dice", float("nan")), agg.get("boundf", float("nan")))
        if out_dir:
            bb.save_checkpoint(store, out_dir / "last")
        score = agg.get("dice", -epoch)
        if score > best_dice:
            best_dice, best_store = score, store.copy()
            if out_dir:
                bb.save_checkpoint(best_store, out_dir / "best")
    return best_store, runlog


def backbone_for(store: WeightStore, default: BackboneConfig | None = None) -> BackboneConfig:
    cfg = store.meta.get("config")
    if cfg is None:
        return default or BackboneConfig()
    return BackboneConfig(**cfg)


__all__ = ["TrainConfig", "RunLog", "InferResult", "NumericalError", "soft_dice_loss",
           "adam_step", "learning_rate", "train", "infer", "infer_batch", "evaluate_store",
           "training_loss", "backbone_for"]
