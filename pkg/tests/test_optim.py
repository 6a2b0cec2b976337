import numpy as np
import pytest

from lagcast.autodiff import Parameter
from lagcast.optim import Adam, AdamState, CheckpointError, adam_step, load_params, read_checkpoint, save_checkpoint


def params(seed=0):
    rng = np.random.default_rng(seed)
    return [Parameter(rng.normal(size=(2, 3, 3, 3)).astype(np.float32), "a"),
            Parameter(rng.normal(size=(1, 2, 1, 1)).astype(np.float32), "b")]


def test_first_step_moves_by_lr():
    # bias correction makes the first update lr * sign(g) up to eps
    ps = params()
    before = [p.values.copy() for p in ps]
    grads = [np.full(p.values.shape, g, np.float32) for p, g in zip(ps, (0.3, -2.0))]
    adam_step(ps, grads, AdamState(), lr=0.01)
    np.testing.assert_allclose(ps[0].values, before[0] - 0.01, atol=1e-6)
    np.testing.assert_allclose(ps[1].values, before[1] + 0.01, atol=1e-6)


def test_matches_reference_recurrence():
    p = Parameter(np.array([1.0, -1.0], np.float64).reshape(1, 2, 1, 1), "w")
    state = AdamState()
    ref = p.values.copy()
    m = np.zeros((1, 2, 1, 1))
    v = np.zeros((1, 2, 1, 1))
    rng = np.random.default_rng(1)
    for t in range(1, 11):
        g = rng.normal(size=(1, 2, 1, 1))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step([p], [g], state, lr=1e-2)
    np.testing.assert_allclose(p.values, ref, rtol=1e-12)
    assert state.step == 10


def test_none_grad_skipped_and_unique_names():
    ps = params()
    before = ps[1].values.copy()
    adam_step(ps, [np.ones_like(ps[0].values), None], AdamState())
    assert ps[1].values.tobytes() == before.tobytes()
    with pytest.raises(ValueError):
        Adam([ps[0], Parameter(np.zeros((1, 1, 1, 2), np.float32), "a")])


def test_checkpoint_round_trip(tmp_path):
    ps = params()
    opt = Adam(ps, lr=1e-3)
    for p in ps:
        p.grad = np.ones_like(p.values)
    opt.step()
    save_checkpoint(tmp_path / "m.ckpt", ps, "lupin", {"depth": 2}, optimizer=opt, extra={"stage": "mf"})
    manifest, values, moments = read_checkpoint(tmp_path / "m.ckpt")
    assert manifest["kind"] == "lupin" and manifest["config"] == {"depth": 2}
    assert manifest["optimizer_step"] == 1 and manifest["extra"]["stage"] == "mf"
    fresh = params(seed=5)
    load_params(fresh, values)
    assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(ps, fresh))
    np.testing.assert_array_equal(moments["a"][0], opt.state.m["a"])


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", params(), "rainnet")
    save_checkpoint(tmp_path / "b.ckpt", params(), "rainnet")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params(), "lupin")
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    for name in ("magic", "short", "long"):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / f"{name}.ckpt")
    _, values, _ = read_checkpoint(path)
    with pytest.raises(CheckpointError, match="lacks"):
        load_params([Parameter(np.zeros((1, 1, 1, 2), np.float32), "c")], values)
    with pytest.raises(CheckpointError, match="shape"):
        load_params([Parameter(np.zeros((1, 1, 1, 2), np.float32), "a")], values)
