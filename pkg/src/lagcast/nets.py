"""U-Nets and the nowcasting model assemblies.

All models work on frames in the transformed space ``log(1 + R) / scale``
laid out as (batch, time, H, W); conversion to mm/h happens at the edges
(see ``predict_*`` helpers).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .advection import extrapolate, temporal_difference, to_lagrangian, warp_once
from .autodiff import DiffTensor, Parameter
from .fields import N_INPUTS, from_transformed, to_transformed

NORM_SCALE = 3.0
MOTION_CAP = 10.0


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    depth: int = 3
    base_channels: int = 16
    slope: float = 0.1
    zero_head: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


class UNet:
    """Encoder (conv-conv-pool) / bottleneck / decoder (up-concat-conv-conv)."""

    def __init__(self, config: UNetConfig, prefix="unet", seed=0, dtype=np.float32):
        self.config = config
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        self.params = {}
        c = config.in_channels
        widths = [config.base_channels * 2 ** d for d in range(config.depth)]
        for d, w in enumerate(widths):
            self._conv(f"enc{d}.0", c, w, rng, dtype)
            self._conv(f"enc{d}.1", w, w, rng, dtype)
            c = w
        wb = config.base_channels * 2 ** config.depth
        self._conv("mid.0", c, wb, rng, dtype)
        self._conv("mid.1", wb, wb, rng, dtype)
        c = wb
        for d in reversed(range(config.depth)):
            self._conv(f"dec{d}.0", c + widths[d], widths[d], rng, dtype)
            self._conv(f"dec{d}.1", widths[d], widths[d], rng, dtype)
            c = widths[d]
        self._conv("head", c, config.out_channels, rng, dtype, k=1, zero=config.zero_head)

    def _conv(self, name, cin, cout, rng, dtype, k=3, zero=False):
        std = 0.0 if zero else np.sqrt(2.0 / ((1 + self.config.slope ** 2) * cin * k * k))
        w = rng.normal(0.0, 1.0, (cout, cin, k, k)) * std
        full = f"{self.prefix}.{name}"
        self.params[f"{name}.w"] = Parameter(w.astype(dtype), f"{full}.w")
        self.params[f"{name}.b"] = Parameter(np.zeros((1, cout, 1, 1), dtype), f"{full}.b")

    def parameters(self):
        return list(self.params.values())

    def _block(self, name, x, act=True):
        y = ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=1)
        return ad.leaky_relu(y, self.config.slope) if act else y

    def __call__(self, x):
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ad.ShapeError(f"unet_forward: expected {cfg.in_channels} input channels, got shape {x.shape}")
        H, W = x.shape[2:]
        f = 2 ** cfg.depth
        if H % f or W % f:
            raise ValueError(f"unet_forward: spatial size {(H, W)} not divisible by {f}; pad the input")
        skips = []
        h = x
        for d in range(cfg.depth):
            h = self._block(f"enc{d}.1", self._block(f"enc{d}.0", h))
            skips.append(h)
            h = ad.max_pool2d(h)
        h = self._block("mid.1", self._block("mid.0", h))
        for d in reversed(range(cfg.depth)):
            h = ad.concat([ad.upsample_nearest(h), skips[d]])
            h = self._block(f"dec{d}.1", self._block(f"dec{d}.0", h))
        return ad.conv2d(h, self.params["head.w"], self.params["head.b"])


def unet_forward(config, params, x):
    """Functional form: run a UNet built from ``config`` with ``params``."""
    net = UNet.__new__(UNet)
    net.config = config
    net.params = params
    return net(x)


def _as_input(x):
    return x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x, dtype=np.float32))


class LupinModel:
    """Motion-field U-Net + advection-free U-Net with a differentiable warp."""

    kind = "lupin"

    def __init__(self, n_inputs=N_INPUTS, depth=3, base_channels=16, seed=0,
                 scale=NORM_SCALE, motion_cap=MOTION_CAP, dtype=np.float32):
        if n_inputs < 2:
            raise ValueError("n_inputs must be >= 2")
        self.n_inputs = n_inputs
        self.scale = scale
        self.motion_cap = motion_cap
        self.mf_config = UNetConfig(n_inputs, 2, depth, base_channels)
        self.af_config = UNetConfig(n_inputs - 1, 1, depth, base_channels)
        self.mf_net = UNet(self.mf_config, "mf", seed=seed, dtype=dtype)
        self.af_net = UNet(self.af_config, "af", seed=seed + 1, dtype=dtype)

    def parameters(self):
        return self.mf_net.parameters() + self.af_net.parameters()

    def config(self):
        return {"kind": self.kind, "n_inputs": self.n_inputs, "depth": self.mf_config.depth,
                "base_channels": self.mf_config.base_channels, "scale": self.scale,
                "motion_cap": self.motion_cap}

    def motion(self, x):
        """Motion field (B, 2, H, W) in px/step, magnitude-capped by a scaled tanh."""
        x = _as_input(x)
        if x.shape[1] != self.n_inputs:
            raise ad.ShapeError(f"predict_motion: expected {self.n_inputs} frames, got shape {x.shape}")
        raw = self.mf_net(x)
        cap = self.motion_cap
        return ad.mul_scalar(ad.tanh(ad.mul_scalar(raw, 1.0 / cap)), cap)

    def source_sink(self, lagrangian):
        return self.af_net(temporal_difference(lagrangian))

    def step(self, x, motion=None, zero_source=False):
        """One-step nowcast; returns ``(nowcast, motion, source)``.

        ``motion`` overrides the learned field; ``zero_source`` forces S = 0.
        """
        x = _as_input(x)
        u = self.motion(x) if motion is None else _as_input(motion)
        lag = to_lagrangian(x, u, reference=self.n_inputs + 1)
        last = lag[:, self.n_inputs - 1:self.n_inputs]
        if zero_source:
            src = DiffTensor(np.zeros(last.shape, dtype=last.dtype))
            return ad.clamp_min(last, 0.0), u, src
        src = self.source_sink(lag)
        return ad.clamp_min(ad.add(last, src), 0.0), u, src

    def rollout(self, x, leads=6, **kw):
        """Iterate ``step`` in a sliding window; returns a list of nowcasts."""
        if leads < 1:
            raise ValueError("leads must be >= 1")
        x = _as_input(x)
        outs = []
        for _ in range(leads):
            y, _, _ = self.step(x, **kw)
            outs.append(y)
            x = ad.concat([x[:, 1:self.n_inputs], y])
        return outs


class RainNetModel:
    """A single U-Net predicting the next frame directly in Eulerian space."""

    kind = "rainnet"

    def __init__(self, n_inputs=N_INPUTS, depth=3, base_channels=16, seed=0,
                 scale=NORM_SCALE, dtype=np.float32):
        self.n_inputs = n_inputs
        self.scale = scale
        self.net_config = UNetConfig(n_inputs, 1, depth, base_channels)
        self.net = UNet(self.net_config, "rainnet", seed=seed, dtype=dtype)

    def parameters(self):
        return self.net.parameters()

    def config(self):
        return {"kind": self.kind, "n_inputs": self.n_inputs, "depth": self.net_config.depth,
                "base_channels": self.net_config.base_channels, "scale": self.scale}

    def step(self, x):
        return ad.clamp_min(self.net(_as_input(x)), 0.0)

    def rollout(self, x, leads=6):
        if leads < 1:
            raise ValueError("leads must be >= 1")
        x = _as_input(x)
        outs = []
        for _ in range(leads):
            y = self.step(x)
            outs.append(y)
            x = ad.concat([x[:, 1:self.n_inputs], y])
        return outs


class LcnnModel:
    """Lagrangian transform with an external (Lucas-Kanade) motion field and
    an advection-free U-Net. No gradient reaches the motion field."""

    kind = "lcnn"

    def __init__(self, n_inputs=N_INPUTS, depth=3, base_channels=16, seed=0,
                 scale=NORM_SCALE, dtype=np.float32):
        self.n_inputs = n_inputs
        self.scale = scale
        self.af_config = UNetConfig(n_inputs - 1, 1, depth, base_channels)
        self.af_net = UNet(self.af_config, "af", seed=seed + 1, dtype=dtype)

    def parameters(self):
        return self.af_net.parameters()

    def config(self):
        return {"kind": self.kind, "n_inputs": self.n_inputs, "depth": self.af_config.depth,
                "base_channels": self.af_config.base_channels, "scale": self.scale}

    def step(self, x, motion, zero_source=False):
        x = _as_input(x)
        u = DiffTensor(np.asarray(motion.values if isinstance(motion, DiffTensor) else motion, dtype=x.dtype))
        lag = to_lagrangian(x, u, reference=self.n_inputs + 1)
        last = lag[:, self.n_inputs - 1:self.n_inputs]
        if zero_source:
            return ad.clamp_min(last, 0.0)
        return ad.clamp_min(ad.add(last, self.af_net(temporal_difference(lag))), 0.0)

    def rollout(self, x, motion, leads=6):
        """The motion field estimated from the observed inputs is reused at every lead."""
        if leads < 1:
            raise ValueError("leads must be >= 1")
        x = _as_input(x)
        outs = []
        for _ in range(leads):
            y = self.step(x, motion)
            outs.append(y)
            x = ad.concat([x[:, 1:self.n_inputs], y])
        return outs


MODEL_KINDS = {"lupin": LupinModel, "rainnet": RainNetModel, "lcnn": LcnnModel}


def build_model(config):
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if kind != "lupin":
        cfg.pop("motion_cap", None)
    return MODEL_KINDS[kind](**cfg)


# ---------------------------------------------------------------- mm/h helpers

def lk_motion_batch(frames_mmh, config=None):
    """Lucas-Kanade motion for each sample of a (B, T, H, W) mm/h batch."""
    from .optical_flow import PyramidConfig, lucas_kanade_flow

    config = config or PyramidConfig()
    return np.stack([lucas_kanade_flow(f, config).motion for f in np.asarray(frames_mmh)]).astype(np.float32)


def predict_motion(model, frames_mmh):
    """(B, 2, H, W) motion for (B, n, H, W) rain-rate inputs."""
    x = to_transformed(frames_mmh, model.scale).astype(np.float32)
    return model.motion(x).values


def rollout_mmh(model, frames_mmh, leads=6, motion=None):
    """Nowcasts in mm/h, shape (B, leads, H, W)."""
    x = DiffTensor(to_transformed(np.asarray(frames_mmh, dtype=np.float64), model.scale).astype(np.float32))
    if model.kind == "lcnn":
        if motion is None:
            motion = lk_motion_batch(frames_mmh)
        outs = model.rollout(x, motion, leads)
    else:
        outs = model.rollout(x, leads)
    y = np.concatenate([o.values for o in outs], axis=1)
    return np.maximum(from_transformed(y, model.scale), 0.0)


def motion_rollout(model, x, leads=6):
    """Iterated Lagrangian persistence with a fresh learned motion per step.

    Returns ``(extrapolations, motions)`` as lists of arrays; ``x`` is in
    transformed space.
    """
    x = _as_input(x)
    n = x.shape[1]
    outs, motions = [], []
    for _ in range(leads):
        u = model.motion(x)
        y = warp_once(x[:, n - 1:n], u)
        outs.append(y.values)
        motions.append(u.values)
        x = ad.concat([x[:, 1:n], y])
    return outs, motions


def lagrangian_persistence(x, motion, leads=6):
    """Extrapolate the last input frame of ``x`` by 1..leads steps along a fixed motion."""
    x = _as_input(x)
    n = x.shape[1]
    u = _as_input(motion)
    return [extrapolate(x[:, n - 1:n], u, k).values for k in range(1, leads + 1)]


def asdict_config(cfg):
    return asdict(cfg)
