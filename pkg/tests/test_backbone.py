import json

import numpy as np
import pytest

from acmseg import autodiff as ad
from acmseg import backbone as bb
from acmseg.backbone import BackboneConfig, CheckpointError, WeightStore

TINY = BackboneConfig(base_channels=2, depth=2)
SMALL_FIELD = BackboneConfig(base_channels=2, depth=1, residual_dilations=(1,), dspp_rates=(1, 2))


def builder(store=None, rng=0, training=True):
    return bb._Builder(store if store is not None else WeightStore(), TINY, None, training=training,
                       update_stats=False, rng=np.random.default_rng(rng) if rng is not None else None,
                       dtype=np.float64)


def images(b=2, size=16, seed=0):
    return np.random.default_rng(seed).random((b, 1, size, size))


# -- building blocks ----------------------------------------------------------------

def test_residual_block_with_zero_weights_is_relu():
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
    b = builder()
    bb.dilated_residual_block(b, "r", ad.constant(x), 3, dilation=2)
    for k in b.store.params:
        if k.endswith(".w") or k.endswith(".b"):
            b.store.params[k][...] = 0.0
    out = bb.dilated_residual_block(builder(b.store, rng=None), "r", ad.constant(x), 3, dilation=2)
    assert np.array_equal(out.data, np.maximum(x, 0.0))


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_residual_block_keeps_spatial_shape(dilation):
    x = ad.constant(images(2, 12)[:, :, :, :])
    out = bb.dilated_residual_block(builder(), "r", x, 4, dilation)
    assert out.shape == (2, 4, 12, 12)


def test_residual_block_gradient():
    x = np.random.default_rng(2).normal(size=(2, 2, 6, 6))
    store = WeightStore()
    bb.dilated_residual_block(builder(store), "r", ad.constant(x), 2, dilation=2)
    r = np.random.default_rng(3).normal(size=(2, 2, 6, 6))

    def f(v):
        return ad.sum(bb.dilated_residual_block(builder(store, rng=None), "r", v, 2, dilation=2) * r)

    assert ad.grad_check(f, x) < 1e-5


def test_dspp_gradient_and_channels():
    x = np.random.default_rng(4).normal(size=(2, 3, 5, 5))
    store = WeightStore()
    out = bb.dspp(builder(store), "d", ad.constant(x), 4, rates=(1, 2, 3))
    assert out.shape == (2, 4, 5, 5)
    assert store.params["d.fuse.w"].shape == (4, 12, 1, 1)
    r = np.random.default_rng(5).normal(size=out.shape)

    def f(v):
        return ad.sum(bb.dspp(builder(store, rng=None), "d", v, 4, rates=(1, 2, 3)) * r)

    assert ad.grad_check(f, x) < 1e-5


def test_dspp_of_zero_input_returns_fuse_shift():
    # every branch is relu(bias = 0) = 0; the fused map is constant, so
    # batch norm returns its shift beta exactly
    store = WeightStore()
    zero = ad.constant(np.zeros((2, 3, 6, 6)))
    bb.dspp(builder(store), "d", zero, 4)
    beta = np.array([0.5, -1.0, 2.0, 0.0])
    store.params["d.fuse.bn.beta"] = beta
    out = bb.dspp(builder(store, rng=None), "d", zero, 4).data
    assert np.array_equal(out, np.broadcast_to(beta[None, :, None, None], out.shape))


# -- full network ---------------------------------------------------------------------

def test_forward_shapes_and_ranges():
    store = bb.init_weights(TINY, seed=0, dtype=np.float64)
    lam1, lam2, phi0, leaves = bb.forward(store, TINY, images(3, 16))
    for m in (lam1, lam2, phi0):
        assert m.shape == (3, 16, 16)
    assert lam1.data.min() >= 0 and lam2.data.min() >= 0
    assert set(leaves) == set(store.params)


def test_phi0_is_clamped():
    store = bb.init_weights(TINY, seed=0, dtype=np.float64)
    store.params["head.phi0.b"] = np.array([1e4])
    phi0 = bb.forward(store, TINY, images(1, 8))[2].data
    assert np.all(phi0 == TINY.phi_clamp)


def test_input_must_be_divisible():
    store = bb.init_weights(TINY, seed=0)
    with pytest.raises(ad.ShapeError, match="divisible"):
        bb.forward(store, TINY, np.zeros((1, 1, 10, 12), np.float32))
    with pytest.raises(ad.ShapeError):
        bb.forward(store, TINY, np.zeros((1, 2, 8, 8), np.float32))


def test_override_shape_is_checked():
    store = bb.init_weights(TINY, seed=0, dtype=np.float64)
    with pytest.raises(ad.ShapeError, match="head.phi0.w"):
        bb.forward(store, TINY, images(1, 8), overrides={"head.phi0.w": ad.constant(np.zeros(3))})


def test_default_size():
    store = bb.init_weights(BackboneConfig(), seed=0)
    assert store.num_params() == 493731
    assert all(p.dtype == np.float32 for p in store.params.values())


def test_forward_is_finite_for_many_seeds():
    x = images(2, 8, seed=9)
    for seed in range(100):
        store = bb.init_weights(TINY, seed=seed)
        outs = bb.forward(store, TINY, x.astype(np.float32), training=seed % 2 == 0, update_stats=False)[:3]
        assert all(np.isfinite(m.data).all() for m in outs)


def test_forward_is_deterministic():
    store = bb.init_weights(TINY, seed=3)
    x = images(2, 16).astype(np.float32)
    a = bb.forward(store, TINY, x, training=True, update_stats=False)[:3]
    b = bb.forward(store, TINY, x, training=True, update_stats=False)[:3]
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a, b))
    assert bb.init_weights(TINY, seed=3).params["enc0.conv1.w"].tobytes() == store.params["enc0.conv1.w"].tobytes()


def test_batch_statistics_update_only_when_asked():
    store = bb.init_weights(TINY, seed=0, dtype=np.float64)
    before = store.copy()
    bb.forward(store, TINY, images(2, 8), training=True, update_stats=False)
    bb.forward(store, TINY, images(2, 8), training=False)
    assert all(np.array_equal(store.buffers[k], before.buffers[k]) for k in store.buffers)
    bb.forward(store, TINY, images(2, 8), training=True)
    assert not np.array_equal(store.buffers["enc0.conv1.bn.mean"], before.buffers["enc0.conv1.bn.mean"])


def test_receptive_radius_bounds_dependence():
    cfg = SMALL_FIELD
    r = bb.receptive_radius(cfg)
    size = 2 * r + 8
    store = bb.init_weights(cfg, seed=1, dtype=np.float64)
    x = images(1, size, seed=2)
    base = bb.forward(store, cfg, x)[2].data[0]
    c = size // 2
    far = x.copy()
    far[0, 0, c, c + r + 1] += 1.0
    far[0, 0, c - r - 1, c] -= 1.0
    assert bb.forward(store, cfg, far)[2].data[0, c, c] == base[c, c]
    near = x.copy()
    near[0, 0, c, c + 1] += 1.0
    assert bb.forward(store, cfg, near)[2].data[0, c, c] != base[c, c]


def test_ablation_init_shares_every_map_tensor():
    maps = bb.init_weights(TINY, seed=5)
    const = bb.init_weights(TINY, seed=5, const_lambda=True)
    assert set(const.params) - set(maps.params) == {"const.lambda1", "const.lambda2"}
    for k, v in maps.params.items():
        assert v.tobytes() == const.params[k].tobytes()
    lam1, lam2, _, _ = bb.forward(const, TINY, images(2, 8).astype(np.float32))
    assert np.all(lam1.data == lam1.data.flat[0]) and np.allclose(lam1.data, np.log(2.0))
    assert np.array_equal(lam1.data, lam2.data)


# -- checkpoints -----------------------------------------------------------------------

def _trained_like(seed=0):
    store = bb.init_weights(TINY, seed=seed)
    rng = np.random.default_rng(seed)
    for k, v in store.params.items():
        store.adam_m[k] = rng.normal(size=v.shape).astype(v.dtype)
        store.adam_v[k] = rng.random(v.shape).astype(v.dtype)
    store.step = 17
    return store


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    store = _trained_like()
    bb.save_checkpoint(store, tmp_path / "a")
    back = bb.load_checkpoint(tmp_path / "a.bin", TINY)
    bb.save_checkpoint(back, tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert back.step == 17
    x = images(2, 16).astype(np.float32)
    for p, q in zip(bb.forward(store, TINY, x)[:3], bb.forward(back, TINY, x)[:3]):
        assert p.data.tobytes() == q.data.tobytes()


def test_checkpoint_manifest_is_little_endian(tmp_path):
    bb.save_checkpoint(_trained_like(), tmp_path / "m")
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["config"] == bb.config_dict(TINY)
    assert all(e["dtype"] in ("<f4", "<f8") for e in manifest["tensors"])
    ends = [e["offset"] + e["byte_len"] for e in manifest["tensors"]]
    assert ends[-1] == (tmp_path / "m.bin").stat().st_size


def test_checkpoint_missing_head_tensor(tmp_path):
    store = _trained_like()
    del store.params["head.lambda2.w"]
    bb.save_checkpoint(store, tmp_path / "c")
    bb.load_checkpoint(tmp_path / "c")  # structure is only verified against a config
    with pytest.raises(CheckpointError, match="head.lambda2.w"):
        bb.load_checkpoint(tmp_path / "c", TINY)


def test_checkpoint_truncated_or_missing(tmp_path):
    bb.save_checkpoint(_trained_like(), tmp_path / "t")
    blob = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        bb.load_checkpoint(tmp_path / "t")
    with pytest.raises(CheckpointError, match="not found"):
        bb.load_checkpoint(tmp_path / "absent")
    (tmp_path / "t.json").write_text("{")
    with pytest.raises(CheckpointError, match="manifest"):
        bb.load_checkpoint(tmp_path / "t")


def test_checkpoint_wrong_shape(tmp_path):
    store = _trained_like()
    store.params["head.phi0.w"] = np.zeros((1, 3, 1, 1), np.float32)
    bb.save_checkpoint(store, tmp_path / "w")
    with pytest.raises(CheckpointError, match="head.phi0.w"):
        bb.load_checkpoint(tmp_path / "w", TINY)
