"""Dilated residual encoder-decoder predicting the contour's inputs.

The network maps a grayscale batch ``X`` of shape ``(B, 1, H, W)`` to three
full-resolution maps: the interior weight ``lambda1``, the exterior weight
``lambda2`` (both softplus, hence non-negative) and the initial level set
``phi0`` (clamped to ``[-tau, tau]``).

Layout, for ``depth`` encoder resolutions:

* encoder level ``l``: two 3x3 conv layers on the previous level, plus (for
  ``l > 0``) two 3x3 conv layers on the input image resized to that level,
  summed, then a dilated residual unit (dilation 2) whose output is the skip;
* bottleneck: residual blocks with dilations 1, 2, 4 and a dilated spatial
  pyramid pooling layer (rates 1, 6, 12, 18);
* decoder: per level, bilinear upsampling, concatenation with the skip, two
  3x3 conv layers; then two more conv layers and three 1x1 heads.

Every conv layer outside the residual fusion is conv -> ReLU -> batch norm.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape


class CheckpointError(IOError):
    """A checkpoint is missing a tensor or does not match its manifest."""


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 8
    depth: int = 3
    residual_dilations: tuple[int, ...] = (1, 2, 4)
    dspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    lambda_scale: float = 1.0
    phi_clamp: float = 50.0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1:
            raise ValueError("base_channels and depth must be positive")
        object.__setattr__(self, "residual_dilations", tuple(self.residual_dilations))
        object.__setattr__(self, "dspp_rates", tuple(self.dspp_rates))

    @property
    def multiple(self) -> int:
        """Spatial dims of the input must be divisible by this."""
        return 2 ** self.depth

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class WeightStore:
    """Named parameters, batch-norm running statistics and Adam moments.

    Insertion order of ``params`` is the canonical parameter order.
    """

    params: OrderedDict = field(default_factory=OrderedDict)
    buffers: OrderedDict = field(default_factory=OrderedDict)
    adam_m: OrderedDict = field(default_factory=OrderedDict)
    adam_v: OrderedDict = field(default_factory=OrderedDict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> WeightStore:
        def dup(d):
            return OrderedDict((k, v.copy()) for k, v in d.items())

        return WeightStore(dup(self.params), dup(self.buffers), dup(self.adam_m),
                           dup(self.adam_v), self.step, json.loads(json.dumps(self.meta)))

    def astype(self, dtype) -> WeightStore:
        out = self.copy()
        for d in (out.params, out.buffers, out.adam_m, out.adam_v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return out


class _Builder:
    """Hands out parameters by name, creating them on first use when initialising."""

    def __init__(self, store: WeightStore, cfg: BackboneConfig, tape: Tape | None,
                 training: bool, update_stats: bool, rng=None, dtype=np.float32,
                 overrides: dict | None = None):
        self.store = store
        self.overrides = overrides or {}
        self.cfg = cfg
        self.tape = tape
        self.training = training
        self.update_stats = update_stats
        self.rng = rng
        self.dtype = dtype
        self.leaves: OrderedDict[str, Array] = OrderedDict()

    def param(self, name: str, shape, init: str) -> Array:
        if name in self.leaves:
            return self.leaves[name]
        if name in self.overrides:
            arr = self.overrides[name]
            if arr.shape != tuple(shape):
                raise ad.ShapeError(f"override {name!r} has shape {arr.shape}, expected {tuple(shape)}")
            self.leaves[name] = arr
            return arr
        if name not in self.store.params:
            if self.rng is None:
                raise CheckpointError(f"missing parameter tensor {name!r}")
            self.store.params[name] = self._init(shape, init)
        data = self.store.params[name]
        if data.shape != tuple(shape):
            raise CheckpointError(f"parameter {name!r} has shape {data.shape}, expected {tuple(shape)}")
        arr = self.tape.variable(data) if self.tape is not None else ad.constant(data)
        self.leaves[name] = arr
        return arr

    def buffer(self, name: str, shape, fill: float) -> np.ndarray:
        if name not in self.store.buffers:
            if self.rng is None:
                raise CheckpointError(f"missing buffer tensor {name!r}")
            self.store.buffers[name] = np.full(shape, fill, dtype=self.dtype)
        return self.store.buffers[name]

    def _init(self, shape, init):
        if init == "fan_in":
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        if init == "ones":
            return np.ones(shape, dtype=self.dtype)
        return np.zeros(shape, dtype=self.dtype)

    # -- layers -----------------------------------------------------------

    def conv(self, name, x: Array, cout: int, k: int = 3, dilation: int = 1) -> Array:
        cin = x.shape[1]
        w = self.param(f"{name}.w", (cout, cin, k, k), "fan_in")
        b = self.param(f"{name}.b", (cout,), "zeros")
        return ad.conv2d(x, w, b, dilation=dilation)

    def bn(self, name, x: Array) -> Array:
        c = x.shape[1]
        gamma = self.param(f"{name}.gamma", (c,), "ones")
        beta = self.param(f"{name}.beta", (c,), "zeros")
        rm = self.buffer(f"{name}.mean", (c,), 0.0)
        rv = self.buffer(f"{name}.var", (c,), 1.0)
        return ad.batch_norm(x, gamma, beta, rm, rv, self.training,
                             momentum=self.cfg.bn_momentum, eps=self.cfg.bn_eps,
                             update_stats=self.update_stats)

    def conv_block(self, name, x: Array, cout: int, k: int = 3, dilation: int = 1) -> Array:
        return self.bn(f"{name}.bn", ad.relu(self.conv(name, x, cout, k, dilation)))


def dilated_residual_block(b: _Builder, name: str, x: Array, channels: int, dilation: int) -> Array:
    """``relu(x + conv_d(bn(relu(conv_d(x)))))``; a 1x1 projection matches channels first."""
    if x.shape[1] != channels:
        x = b.conv(f"{name}.proj", x, channels, k=1)
    y = b.conv_block(f"{name}.conv1", x, channels, dilation=dilation)
    y = b.conv(f"{name}.conv2", y, channels, dilation=dilation)
    return ad.relu(x + y)


def dspp(b: _Builder, name: str, x: Array, channels: int, rates=(1, 6, 12, 18)) -> Array:
    """Parallel 3x3 dilated convs at ``rates``, concatenated and fused by a 1x1 conv."""
    branches = [b.conv_block(f"{name}.rate{r}", x, channels, dilation=r) for r in rates]
    return b.conv_block(f"{name}.fuse", ad.concat(branches, axis=1), channels, k=1)


def _forward(b: _Builder, x: Array, const_lambda: bool = False):
    cfg = b.cfg
    if x.ndim != 4 or x.shape[1] != 1:
        raise ad.ShapeError(f"backbone expects (B, 1, H, W) input, got {x.shape}")
    h, w = x.shape[-2:]
    if h % cfg.multiple or w % cfg.multiple:
        raise ad.ShapeError(f"input {h}x{w} is not divisible by {cfg.multiple}; pad it first")

    skips = []
    feat = x
    for level in range(cfg.depth):
        c = cfg.channels(level)
        if level > 0:
            feat = ad.downsample2(feat)
        y = b.conv_block(f"enc{level}.conv1", feat, c)
        y = b.conv_block(f"enc{level}.conv2", y, c)
        if level > 0:
            scaled = ad.resize(x, 2.0 ** -level)
            m = b.conv_block(f"enc{level}.ms1", scaled, c)
            m = b.conv_block(f"enc{level}.ms2", m, c)
            y = y + m
        feat = dilated_residual_block(b, f"enc{level}.res", y, c, dilation=2)
        skips.append(feat)

    cb = cfg.channels(cfg.depth)
    feat = ad.downsample2(feat)
    for i, d in enumerate(cfg.residual_dilations):
        feat = dilated_residual_block(b, f"mid.res{i}", feat, cb, dilation=d)
    feat = dspp(b, "mid.dspp", feat, cb, cfg.dspp_rates)

    for level in reversed(range(cfg.depth)):
        c = cfg.channels(level)
        feat = ad.concat([ad.upsample2(feat), skips[level]], axis=1)
        feat = b.conv_block(f"dec{level}.conv1", feat, c)
        feat = b.conv_block(f"dec{level}.conv2", feat, c)

    c0 = cfg.channels(0)
    feat = b.conv_block("out.conv1", feat, c0)
    feat = b.conv_block("out.conv2", feat, c0)
    bsz = x.shape[0]
    z1 = b.conv("head.lambda1", feat, 1, k=1).reshape(bsz, h, w)
    z2 = b.conv("head.lambda2", feat, 1, k=1).reshape(bsz, h, w)
    z0 = b.conv("head.phi0", feat, 1, k=1).reshape(bsz, h, w)
    if const_lambda:
        # two trainable scalars broadcast over the image replace the map heads
        lam1 = ad.softplus(b.param("const.lambda1", (), "zeros")) * cfg.lambda_scale
        lam2 = ad.softplus(b.param("const.lambda2", (), "zeros")) * cfg.lambda_scale
        ones = np.ones((bsz, h, w), dtype=x.dtype)
        lam1, lam2 = lam1 * ones, lam2 * ones
    else:
        lam1 = ad.softplus(z1) * cfg.lambda_scale
        lam2 = ad.softplus(z2) * cfg.lambda_scale
    phi0 = ad.clip(z0, -cfg.phi_clamp, cfg.phi_clamp)
    return lam1, lam2, phi0


def init_weights(cfg: BackboneConfig, seed: int = 0, dtype=np.float32,
                 const_lambda: bool = False) -> WeightStore:
    """Create parameters deterministically from ``seed``.

    The scalar ablation parameters are created last and without consuming
    random numbers, so every other tensor is identical across ablation modes.
    """
    store = WeightStore()
    rng = np.random.default_rng(seed)
    size = cfg.multiple
    b = _Builder(store, cfg, None, training=True, update_stats=False, rng=rng, dtype=dtype)
    _forward(b, ad.constant(np.zeros((2, 1, size, size), dtype=dtype)), const_lambda=False)
    if const_lambda:
        b.param("const.lambda1", (), "zeros")
        b.param("const.lambda2", (), "zeros")
    store.meta = {"config": config_dict(cfg), "seed": seed, "const_lambda": const_lambda}
    return store


def forward(store: WeightStore, cfg: BackboneConfig, x, *, tape: Tape | None = None,
            training: bool = False, update_stats: bool | None = None,
            overrides: dict | None = None):
    """Run the network.

    Returns ``(lambda1, lambda2, phi0, leaves)`` where the maps have shape
    ``(B, H, W)`` and ``leaves`` maps parameter names to the arrays used
    (tape variables when ``tape`` is given).  ``overrides`` substitutes
    arrays for named parameters, for example slices of one probe vector.
    """
    if update_stats is None:
        update_stats = training
    x = x if isinstance(x, Array) else ad.constant(x)
    b = _Builder(store, cfg, tape, training, update_stats, rng=None, dtype=x.dtype,
                 overrides=overrides)
    const_lambda = bool(store.meta.get("const_lambda", False))
    lam1, lam2, phi0 = _forward(b, x, const_lambda=const_lambda)
    return lam1, lam2, phi0, b.leaves


def config_dict(cfg: BackboneConfig) -> dict:
    d = asdict(cfg)
    d["residual_dilations"] = list(cfg.residual_dilations)
    d["dspp_rates"] = list(cfg.dspp_rates)
    return d


# -- checkpoints --------------------------------------------------------------

_GROUPS = (("param", "params"), ("buffer", "buffers"), ("adam_m", "adam_m"), ("adam_v", "adam_v"))


def _sidecar(path) -> tuple[Path, Path]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    return base.with_suffix(".bin"), base.with_suffix(".json")


def save_checkpoint(store: WeightStore, path) -> Path:
    """Write ``<path>.bin`` (little-endian arrays) and a ``<path>.json`` manifest."""
    bin_path, man_path = _sidecar(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for group, attr in _GROUPS:
            for name, arr in getattr(store, attr).items():
                le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
                raw = le.tobytes()
                fh.write(raw)
                entries.append({"group": group, "name": name, "dtype": le.dtype.str,
                                "shape": list(arr.shape), "offset": offset, "byte_len": len(raw)})
                offset += len(raw)
    manifest = {"format": "acmseg-checkpoint-1", "step": store.step,
                "config": store.meta.get("config"), "seed": store.meta.get("seed"),
                "meta": store.meta, "tensors": entries}
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return bin_path


def load_checkpoint(path, cfg: BackboneConfig | None = None) -> WeightStore:
    """Read a checkpoint; with ``cfg`` every expected tensor is verified present."""
    bin_path, man_path = _sidecar(path)
    try:
        manifest = json.loads(man_path.read_text())
        blob = bin_path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint file not found: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {man_path}: {exc}") from exc
    store = WeightStore(step=int(manifest.get("step", 0)), meta=manifest.get("meta", {}))
    groups = dict(_GROUPS)
    for e in manifest["tensors"]:
        name = e["name"]
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["byte_len"] != count * dtype.itemsize or e["offset"] + e["byte_len"] > len(blob):
            raise CheckpointError(f"tensor {name!r} is truncated or corrupt")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
        getattr(store, groups[e["group"]])[name] = arr
    if cfg is not None:
        expected = init_weights(cfg, 0, const_lambda=bool(store.meta.get("const_lambda")))
        for attr in ("params", "buffers"):
            for name, ref in getattr(expected, attr).items():
                got = getattr(store, attr).get(name)
                if got is None:
                    raise CheckpointError(f"checkpoint is missing tensor {name!r}")
                if got.shape != ref.shape:
                    raise CheckpointError(f"tensor {name!r} has shape {got.shape}, expected {ref.shape}")
    return store


def receptive_radius(cfg: BackboneConfig) -> int:
    """Chebyshev radius (input pixels) outside which inputs cannot affect an output.

    Tracks how far each feature's dependence extends beyond its own
    footprint: a 3x3 conv at scale ``s`` and dilation ``d`` adds ``s*d``,
    pooling adds nothing, bilinear upsampling from ``2s`` to ``s`` adds
    ``2s``.  Only valid for inference-mode batch norm, which is pointwise.
    """
    extent = 0
    skips = []
    for level in range(cfg.depth):
        s = 2 ** level
        extent = max(extent + 2 * s, 2 * s)
        extent += 2 * (2 * s)
        skips.append(extent)
    s = 2 ** cfg.depth
    extent += sum(2 * s * d for d in cfg.residual_dilations)
    extent += s * max(cfg.dspp_rates)
    for level in reversed(range(cfg.depth)):
        s = 2 ** level
        extent = max(extent + 2 * s, skips[level]) + 2 * s
    return extent + 2
