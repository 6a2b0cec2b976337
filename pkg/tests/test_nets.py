import numpy as np
import pytest

from lagcast import autodiff as ad
from lagcast.advection import warp_once
from lagcast.autodiff import DiffTensor, ShapeError
from lagcast.nets import (
    LcnnModel, LupinModel, RainNetModel, UNet, UNetConfig, build_model, predict_motion, rollout_mmh,
    unet_forward,
)


def frames(seed=0, b=2, n=6, size=16):
    return np.random.default_rng(seed).random((b, n, size, size)).astype(np.float32)


def randomize(params, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    for p in params:
        p.values = (p.values + rng.normal(0, std, p.values.shape)).astype(p.values.dtype)


def test_unet_zero_head_zero_output():
    net = UNet(UNetConfig(3, 2, depth=2, base_channels=4))
    out = net(DiffTensor(np.zeros((1, 3, 8, 8), np.float32)))
    assert out.shape == (1, 2, 8, 8) and np.all(out.values == 0.0)


def test_unet_shapes_and_errors():
    cfg = UNetConfig(4, 3, depth=2, base_channels=4, zero_head=False)
    net = UNet(cfg)
    assert net(DiffTensor(frames(n=4, size=8)[:, :4])).shape == (2, 3, 8, 8)
    assert unet_forward(cfg, net.params, DiffTensor(frames(n=4, size=8))).shape == (2, 3, 8, 8)
    with pytest.raises(ValueError, match="pad"):
        net(DiffTensor(np.zeros((1, 4, 10, 10), np.float32)))
    with pytest.raises(ShapeError):
        net(DiffTensor(np.zeros((1, 5, 8, 8), np.float32)))
    with pytest.raises(ValueError):
        UNetConfig(1, 1, depth=0)


def test_parameter_names_unique():
    m = LupinModel(depth=2, base_channels=4)
    names = [p.name for p in m.parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("mf.") for n in names) and any(n.startswith("af.") for n in names)


def test_motion_bounded_and_deterministic():
    m = LupinModel(depth=2, base_channels=4, motion_cap=2.0)
    randomize(m.mf_net.parameters(), std=3.0)
    x = np.zeros((1, 6, 16, 16), np.float32)
    u1 = predict_motion(m, x)
    assert np.all(np.isfinite(u1)) and np.max(np.abs(u1)) <= 2.0
    u2 = predict_motion(m, frames(b=1) * 20)
    assert np.max(np.abs(u2)) <= 2.0
    assert predict_motion(m, frames(b=1)).tobytes() == predict_motion(m, frames(b=1)).tobytes()


def test_zero_source_is_lagrangian_persistence():
    m = LupinModel(depth=2, base_channels=4)
    randomize(m.parameters(), seed=1)
    x = DiffTensor(frames())
    y, u, s = m.step(x, zero_source=True)
    ref = ad.clamp_min(warp_once(x[:, 5:6], u), 0.0).values
    assert y.values.tobytes() == ref.tobytes()
    assert np.all(s.values == 0.0)


def test_zero_motion_zero_source_is_eulerian_persistence():
    m = LupinModel(depth=2, base_channels=4)
    x = frames()
    y, _, _ = m.step(DiffTensor(x), motion=np.zeros((2, 2, 16, 16), np.float32), zero_source=True)
    assert y.values.tobytes() == x[:, 5:6].tobytes()


def test_residual_identity_and_nonnegative():
    m = LupinModel(depth=2, base_channels=4)
    randomize(m.parameters(), seed=2)
    x = DiffTensor(frames(seed=3))
    y, u, s = m.step(x)
    warped = warp_once(x[:, 5:6], u).values
    pos = warped + s.values > 0
    np.testing.assert_allclose((y.values - warped)[pos], s.values[pos], atol=1e-6)
    assert np.all(y.values >= 0)


def test_gradient_reaches_motion_net_through_warp():
    m = LupinModel(depth=1, base_channels=2)
    randomize(m.parameters(), seed=4, std=0.2)
    x = DiffTensor(frames(seed=5))
    y, _, _ = m.step(x)
    target = DiffTensor(frames(seed=6)[:, :1])
    ad.backward(ad.mean(ad.square(ad.sub(y, target))))
    norm = sum(float(np.sum(p.grad ** 2)) for p in m.mf_net.parameters() if p.grad is not None)
    assert norm > 0


def test_rollout_equals_nested_steps():
    m = LupinModel(depth=2, base_channels=4)
    randomize(m.parameters(), seed=7)
    x = DiffTensor(frames(seed=8))
    outs = m.rollout(x, leads=3)
    w = x
    for k in range(3):
        y, _, _ = m.step(w)
        assert y.values.tobytes() == outs[k].values.tobytes()
        w = ad.concat([w[:, 1:6], y])
    with pytest.raises(ValueError):
        m.rollout(x, leads=0)


def test_zero_inputs_zero_rollout():
    for m in (LupinModel(depth=2, base_channels=4), RainNetModel(depth=2, base_channels=4)):
        outs = m.rollout(DiffTensor(np.zeros((1, 6, 16, 16), np.float32)), 6)
        assert len(outs) == 6 and all(np.all(o.values == 0) for o in outs)


def test_lcnn_zero_source_and_shapes():
    m = LcnnModel(depth=2, base_channels=4)
    x = frames(seed=9)
    motion = np.full((2, 2, 16, 16), 0.5, np.float32)
    y = m.step(DiffTensor(x), motion, zero_source=True).values
    ref = ad.clamp_min(warp_once(DiffTensor(x[:, 5:6]), DiffTensor(motion)), 0.0).values
    assert y.tobytes() == ref.tobytes()
    mm = x * 5
    shapes = {rollout_mmh(k, mm, 2, motion=motion if k.kind == "lcnn" else None).shape
              for k in (m, LupinModel(depth=2, base_channels=4), RainNetModel(depth=2, base_channels=4))}
    assert shapes == {(2, 2, 16, 16)}


def test_build_model_round_trip():
    m = LupinModel(depth=2, base_channels=4, seed=3)
    m2 = build_model(m.config())
    assert isinstance(m2, LupinModel) and m2.config() == m.config()
    with pytest.raises(ValueError):
        build_model({"kind": "trajgru"})
