"""Adaptive moment estimation and binary checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"LNCKPT01"


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update of ``params`` (list of Parameter).

    ``grads`` is a matching list of arrays (``None`` entries are skipped).
    Returns the updated state.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        dt = p.values.dtype
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.values)
            state.v[p.name] = np.zeros_like(p.values)
        v = state.v[p.name]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        mhat = m / dt.type(c1)
        vhat = v / dt.type(c2)
        p.values -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))
    return state


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, kind, config=None, optimizer: Adam | None = None, extra=None):
    """Write parameters (and optionally Adam moments) as float32 payloads."""
    params = list(params)
    entries = [{"name": p.name, "shape": list(p.values.shape)} for p in params]
    manifest = {"kind": kind, "config": config or {}, "params": entries,
                "optimizer": optimizer is not None, "extra": extra or {}}
    blobs = [np.ascontiguousarray(p.values, dtype="<f4").tobytes() for p in params]
    if optimizer is not None:
        manifest["optimizer_step"] = optimizer.state.step
        for p in params:
            m = optimizer.state.m.get(p.name, np.zeros_like(p.values))
            v = optimizer.state.v.get(p.name, np.zeros_like(p.values))
            blobs.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
            blobs.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    hdr = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Return ``(manifest, {name: array}, optimizer moments or None)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        manifest = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    off = 12 + hlen
    values = {}

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) * 4
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(raw[off:off + n], dtype="<f4").astype(np.float32).reshape(shape)
        off += n
        return arr

    for e in manifest["params"]:
        values[e["name"]] = take(e["shape"])
    moments = None
    if manifest.get("optimizer"):
        moments = {}
        for e in manifest["params"]:
            moments[e["name"]] = (take(e["shape"]), take(e["shape"]))
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return manifest, values, moments


def load_params(params, values):
    for p in params:
        if p.name not in values:
            raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
        if values[p.name].shape != p.values.shape:
            raise CheckpointError(f"shape mismatch for {p.name}: {values[p.name].shape} vs {p.values.shape}")
        p.values = values[p.name].astype(p.values.dtype).copy()
