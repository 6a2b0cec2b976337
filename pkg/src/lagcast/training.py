"""Three-stage training: motion net, advection-free net, joint fine-tuning."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .advection import divergence_penalty, warp_once
from .autodiff import DiffTensor
from .fields import N_INPUTS, to_transformed
from .nets import LcnnModel, LupinModel, RainNetModel, lk_motion_batch
from .optim import Adam, load_params, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("mf", "af", "joint")


class TrainingDiverged(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.1
    gamma: float = 0.5

    def __post_init__(self):
        # 0 and 1 are accepted for ablations (pure data loss, pure regularizer)
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class StagePlan:
    stage: str
    epochs: int
    lr: float

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def frozen(self):
        return ("mf",) if self.stage == "af" else ()


@dataclass
class TrainConfig:
    beta: float = 0.1
    gamma: float = 0.5
    lr_mf: float = 1e-3
    lr_af: float = 1e-3
    lr_joint: float = 1e-4
    batch_size: int = 4
    epochs_mf: int = 20
    epochs_af: int = 20
    epochs_joint: int = 10
    steps_per_epoch: int = 0  # 0 means one pass over all training examples
    patience: int = 10
    seed: int = 0
    depth: int = 3
    base_channels: int = 16
    stages: tuple = STAGES
    mf_pairs: str = "n"  # "n" uses the target frame as the last pair, "n-1" does not
    rollout_steps: int = 1
    single_stage: bool = False
    val_limit: int = 64

    def __post_init__(self):
        LossWeights(self.beta, self.gamma)
        self.stages = tuple(self.stages)
        validate_stage_order(self.stages)
        if self.mf_pairs not in ("n", "n-1"):
            raise ValueError("mf_pairs must be 'n' or 'n-1'")
        if self.rollout_steps < 1:
            raise ValueError("rollout_steps must be >= 1")

    @property
    def weights(self):
        return LossWeights(self.beta, self.gamma)

    def plans(self):
        if self.single_stage:
            return [StagePlan("joint", self.epochs_joint, self.lr_joint)]
        table = {"mf": (self.epochs_mf, self.lr_mf), "af": (self.epochs_af, self.lr_af),
                 "joint": (self.epochs_joint, self.lr_joint)}
        return [StagePlan(s, *table[s]) for s in self.stages]

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def validate_stage_order(stages):
    idx = []
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}")
        idx.append(STAGES.index(s))
    if idx != sorted(idx) or len(set(idx)) != len(idx):
        raise ValueError(f"stages must run in order mf -> af -> joint, got {list(stages)}")


# ---------------------------------------------------------------- losses

def criterion(pred, target):
    """Mean squared error in transformed space."""
    return ad.mean(ad.square(ad.sub(pred, target)))


def loss_naive(motion, inputs, target):
    n = inputs.shape[1]
    return criterion(warp_once(inputs[:, n - 1:n], motion), target)


def loss_mf(motion, inputs, target, pairs="n"):
    """Sum over frames of the one-step extrapolation error under one motion field."""
    n = inputs.shape[1]
    if pairs == "n":
        pred = warp_once(inputs, motion)
        truth = ad.concat([inputs[:, 1:n], target])
        k = n
    else:
        pred = warp_once(inputs[:, 0:n - 1], motion)
        truth = inputs[:, 1:n]
        k = n - 1
    # mean over k frames times k == sum of per-frame MSEs
    return ad.mul_scalar(criterion(pred, truth), k)


def mf_objective(motion, inputs, target, beta, pairs="n"):
    lmf = loss_mf(motion, inputs, target, pairs)
    lpi = divergence_penalty(motion)
    total = ad.add(ad.mul_scalar(lmf, 1 - beta), ad.mul_scalar(lpi, beta))
    return total, {"loss_mf": _f(lmf), "loss_pi": _f(lpi)}


def joint_objective(l_af, l_mf, l_pi, beta, gamma):
    data = ad.add(ad.mul_scalar(l_af, 1 - gamma), ad.mul_scalar(l_mf, gamma))
    return ad.add(ad.mul_scalar(data, 1 - beta), ad.mul_scalar(l_pi, beta))


def _f(t):
    return float(t.values.reshape(()))


# ---------------------------------------------------------------- data

class WindowData:
    """One-step training examples cut from (N, T, H, W) mm/h windows."""

    def __init__(self, windows_mmh, scale, n_inputs=N_INPUTS, horizon=1):
        self.x = to_transformed(np.asarray(windows_mmh, dtype=np.float64), scale).astype(np.float32)
        self.n_inputs = n_inputs
        T = self.x.shape[1] if self.x.ndim == 4 else 0
        self.offsets = max(0, T - n_inputs - horizon + 1)
        self.horizon = horizon
        self.index = [(i, k) for i in range(len(self.x)) for k in range(self.offsets)]

    def __len__(self):
        return len(self.index)

    def batch(self, items):
        n = self.n_inputs
        xs = np.stack([self.x[i, k:k + n] for i, k in items])
        ys = np.stack([self.x[i, k + n:k + n + self.horizon] for i, k in items])
        return xs, ys

    def batches(self, rng, batch_size, limit=0):
        order = rng.permutation(len(self.index))
        n_batches = len(order) // batch_size
        if limit:
            n_batches = min(n_batches, limit)
        for b in range(n_batches):
            yield [self.index[j] for j in order[b * batch_size:(b + 1) * batch_size]], b


# ---------------------------------------------------------------- trainers

class _Frozen:
    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


def _check_finite(total, terms, stage, step):
    if not np.isfinite(total.values).all():
        raise TrainingDiverged(f"non-finite loss at stage {stage} step {step}: {terms}")


class LupinTrainer:
    """Holds a LupinModel and the optimizer of each stage."""

    def __init__(self, model: LupinModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.opt = None
        self.stage = None
        self.steps = 0

    def begin_stage(self, plan: StagePlan):
        self.stage = plan.stage
        if plan.stage == "mf":
            params = self.model.mf_net.parameters()
        elif plan.stage == "af":
            params = self.model.af_net.parameters()
        else:
            params = self.model.parameters()
        self.opt = Adam(params, lr=plan.lr)

    def _apply(self, total, terms):
        _check_finite(total, terms, self.stage, self.steps)
        self.opt.zero_grad()
        ad.backward(total)
        self.opt.step()
        self.steps += 1
        terms["loss"] = _f(total)
        return terms

    def stage1_step(self, x, y):
        """(1 - beta) * L_MF + beta * L_PI on the motion net."""
        if self.stage != "mf":
            raise RuntimeError("stage1_step requires the mf stage")
        xt, yt = DiffTensor(x), DiffTensor(y[:, :1])
        u = self.model.motion(xt)
        total, terms = mf_objective(u, xt, yt, self.config.beta, self.config.mf_pairs)
        return self._apply(total, terms)

    def _af_loss(self, x, y):
        """L_AF averaged over ``rollout_steps`` steps (1 by default)."""
        k = min(self.config.rollout_steps, y.shape[1])
        xt = DiffTensor(x)
        n = x.shape[1]
        losses = []
        first = None
        for s in range(k):
            pred, u, _ = self.model.step(xt)
            if first is None:
                first = u
            losses.append(criterion(pred, DiffTensor(y[:, s:s + 1])))
            xt = ad.concat([xt[:, 1:n], pred])
        l_af = losses[0]
        for extra in losses[1:]:
            l_af = ad.add(l_af, extra)
        return ad.mul_scalar(l_af, 1.0 / k), first

    def stage2_step(self, x, y):
        """L_AF on the advection-free net with the motion net frozen."""
        if self.stage != "af":
            raise RuntimeError("stage2_step requires the af stage")
        mf_params = self.model.mf_net.parameters()
        for p in mf_params:
            p.grad = None
        with _Frozen(mf_params):
            l_af, _ = self._af_loss(x, y)
            terms = {"loss_af": _f(l_af)}
            out = self._apply(l_af, terms)
        for p in mf_params:
            if p.grad is not None and np.any(p.grad != 0):
                raise FreezeViolation(f"frozen parameter {p.name} received a gradient")
        return out

    def stage3_step(self, x, y):
        """(1 - beta)((1 - gamma) L_AF + gamma L_MF) + beta L_PI on both nets."""
        if self.stage != "joint":
            raise RuntimeError("stage3_step requires the joint stage")
        c = self.config
        l_af, u = self._af_loss(x, y)
        xt = DiffTensor(x)
        l_mf = loss_mf(u, xt, DiffTensor(y[:, :1]), c.mf_pairs)
        l_pi = divergence_penalty(u)
        total = joint_objective(l_af, l_mf, l_pi, c.beta, c.gamma)
        terms = {"loss_af": _f(l_af), "loss_mf": _f(l_mf), "loss_pi": _f(l_pi)}
        return self._apply(total, terms)

    def step(self, x, y):
        return {"mf": self.stage1_step, "af": self.stage2_step, "joint": self.stage3_step}[self.stage](x, y)

    def validation_loss(self, x, y):
        c = self.config
        xt, yt = DiffTensor(x), DiffTensor(y[:, :1])
        with _Frozen(self.model.parameters()):
            if self.stage == "mf":
                u = self.model.motion(xt)
                total, _ = mf_objective(u, xt, yt, c.beta, c.mf_pairs)
            else:
                pred, u, _ = self.model.step(xt)
                l_af = criterion(pred, yt)
                if self.stage == "af":
                    total = l_af
                else:
                    total = joint_objective(l_af, loss_mf(u, xt, yt, c.mf_pairs), divergence_penalty(u),
                                            c.beta, c.gamma)
        return _f(total)


class DirectTrainer:
    """Single-objective trainer for the RainNet- and L-CNN-style baselines."""

    def __init__(self, model, config: TrainConfig, lr=None):
        self.model = model
        self.config = config
        self.opt = Adam(model.parameters(), lr=lr or config.lr_af)
        self.stage = "direct"
        self.steps = 0
        self.motion_cache = None

    def _predict(self, x, motion):
        if self.model.kind == "lcnn":
            return self.model.step(DiffTensor(x), motion)
        return self.model.step(DiffTensor(x))

    def step(self, x, y, motion=None):
        pred = self._predict(x, motion)
        loss = criterion(pred, DiffTensor(y[:, :1]))
        _check_finite(loss, {}, "direct", self.steps)
        self.opt.zero_grad()
        ad.backward(loss)
        self.opt.step()
        self.steps += 1
        return {"loss": _f(loss)}

    def validation_loss(self, x, y, motion=None):
        with _Frozen(self.model.parameters()):
            return _f(criterion(self._predict(x, motion), DiffTensor(y[:, :1])))


# ---------------------------------------------------------------- loops

def _snapshot(params):
    return [p.values.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.values = v.copy()


def _run_epochs(trainer, data, val, epochs, rng, config, stage, run_log, motion_of=None):
    """Run up to ``epochs`` epochs with early stopping; restores the best weights."""
    params = trainer.model.parameters()
    best = np.inf
    best_snap = _snapshot(params)
    stale = 0
    history = []
    vx, vy, vkeys = val
    for epoch in range(epochs):
        t0 = time.perf_counter()
        sums = {}
        nb = 0
        for items, _ in data.batches(rng, config.batch_size, config.steps_per_epoch):
            x, y = data.batch(items)
            if motion_of is not None:
                m = trainer.step(x, y, motion_of(items))
            else:
                m = trainer.step(x, y)
            for k, v in m.items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
        train_terms = {k: v / max(nb, 1) for k, v in sums.items()}
        if len(vx):
            if motion_of is not None:
                vloss = trainer.validation_loss(vx, vy, motion_of(vkeys, "val"))
            else:
                vloss = trainer.validation_loss(vx, vy)
        else:
            vloss = train_terms.get("loss", np.inf)
        rec = {"stage": stage, "epoch": epoch, "step": trainer.steps, **train_terms,
               "val_loss": vloss, "wall_time": time.perf_counter() - t0}
        history.append(rec)
        if run_log is not None:
            run_log.write(json.dumps(rec, sort_keys=True) + "\n")
            run_log.flush()
        log.info("%s epoch %d loss %.5f val %.5f", stage, epoch, train_terms.get("loss", np.nan), vloss)
        if vloss < best:
            best = vloss
            best_snap = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(params, best_snap)
    return history


def _val_arrays(data, limit):
    keys = [(i, 0) for i in range(min(len(data.x), limit))] if data.offsets else []
    if not keys:
        return np.zeros((0,)), np.zeros((0,)), []
    x, y = data.batch(keys)
    return x, y, keys


def train_lupin(train_windows, val_windows, config: TrainConfig, out_dir=None, model=None, run_log=None):
    """Run the configured stages; returns ``(model, history)``.

    Writes ``lupin_<stage>.ckpt`` after every stage when ``out_dir`` is given.
    """
    model = model or LupinModel(depth=config.depth, base_channels=config.base_channels, seed=config.seed)
    horizon = config.rollout_steps
    data = WindowData(train_windows, model.scale, horizon=horizon)
    vdata = WindowData(val_windows, model.scale, horizon=1)
    val = _val_arrays(vdata, config.val_limit)
    trainer = LupinTrainer(model, config)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    history = []
    for i, plan in enumerate(config.plans()):
        rng = np.random.default_rng([config.seed, i])
        trainer.begin_stage(plan)
        history += _run_epochs(trainer, data, val, plan.epochs, rng, config, plan.stage, run_log)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"lupin_{plan.stage}.ckpt", model.parameters(), model.kind,
                            model.config(), extra={"stage": plan.stage, "train_config": _cfg_dict(config)})
    return model, history


def train_baseline(kind, train_windows, val_windows, config: TrainConfig, out_dir=None, run_log=None,
                   epochs=None, motion_cache=None):
    """Train a RainNet- or L-CNN-style baseline on the one-step objective.

    For L-CNN the Lucas-Kanade field of every training window is computed once
    from its own input frames and cached (``motion_cache`` may supply it).
    """
    cls = {"rainnet": RainNetModel, "lcnn": LcnnModel}[kind]
    model = cls(depth=config.depth, base_channels=config.base_channels, seed=config.seed)
    data = WindowData(train_windows, model.scale)
    vdata = WindowData(val_windows, model.scale)
    val = _val_arrays(vdata, config.val_limit)
    trainer = DirectTrainer(model, config, lr=config.lr_af)
    motion_of = None
    if kind == "lcnn":
        cache = motion_cache if motion_cache is not None else {}
        sources = {"train": np.asarray(train_windows), "val": np.asarray(val_windows)}

        def motion_of(items, split="train"):
            out = []
            for i, k in items:
                key = (split, i, k)
                if key not in cache:
                    cache[key] = lk_motion_batch(sources[split][i, k:k + N_INPUTS][None])[0]
                out.append(cache[key])
            return np.stack(out)

    rng = np.random.default_rng([config.seed, 7])
    n_epochs = epochs if epochs is not None else config.epochs_af
    history = _run_epochs(trainer, data, val, n_epochs, rng, config, kind, run_log, motion_of)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(out_dir) / f"{kind}.ckpt", model.parameters(), model.kind, model.config(),
                        extra={"train_config": _cfg_dict(config)})
    return model, history


def _cfg_dict(config):
    d = asdict(config)
    d["stages"] = list(d["stages"])
    return d


def load_model(path):
    """Rebuild a model from a checkpoint written by the trainers."""
    from .nets import build_model

    manifest, values, _ = read_checkpoint(path)
    model = build_model(manifest["config"])
    load_params(model.parameters(), values)
    return model


def with_overrides(config: TrainConfig, **kw):
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
