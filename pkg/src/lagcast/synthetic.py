"""Synthetic storms with known motion and growth.

Each storm is a sum of anisotropic Gaussian cells carried by a steady,
closed-form flow. A frame at step t is the initial analytic field evaluated
at the back-trajectory foot point of every grid cell, so advection is exact
and the only approximation in the oracles is the trajectory integrator.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fields import FieldSequence, FilterParams, RainField, is_rainy_enough, split_targets
from .stackio import write_array

PRESETS = ("translate", "growdecay", "mixed")
FLOW_KINDS = ("uniform", "rotation", "solenoidal")
SEQ_LEN = 12
CELL_SIGMA = (5.5, 7.5)  # major-axis std-dev range in px at size 32
CELL_MIN_SIGMA = 5.5
SPEED = (1.0, 3.0)  # px/step
PLACEMENT = (0.25, 0.75)  # fraction of the domain for mid-sequence cell centers


@dataclass(frozen=True)
class Cell:
    center: tuple  # (row, col) at t = 0
    sigma: tuple  # (major, minor) std-dev in px
    angle: float  # orientation of the major axis, radians
    peak: float  # mm/h
    growth: float  # fractional change per step

    def __post_init__(self):
        if not 0.5 <= self.peak <= 100.0:
            raise ValueError(f"peak intensity {self.peak} outside [0.5, 100] mm/h")


@dataclass(frozen=True)
class StormSpec:
    size: int = 64
    cells: tuple = ()
    flow: str = "uniform"
    flow_params: dict = field(default_factory=dict)
    noise: float = 0.0
    length: int = SEQ_LEN

    def __post_init__(self):
        if self.flow not in FLOW_KINDS:
            raise ValueError(f"unknown flow kind {self.flow!r}")


# ---------------------------------------------------------------- flows

def velocity(spec: StormSpec, x, y):
    """Flow velocity (vx, vy) in px/step at column ``x``, row ``y``."""
    p = spec.flow_params
    vx = np.full(np.shape(x), float(p.get("u", 0.0)))
    vy = np.full(np.shape(x), float(p.get("v", 0.0)))
    if spec.flow == "rotation":
        xc, yc = p["xc"], p["yc"]
        omega = p["omega"]
        vx = vx - omega * (y - yc)
        vy = vy + omega * (x - xc)
    elif spec.flow == "solenoidal":
        # streamfunction psi = L * sum c_ij X^i Y^j (2 <= i + j <= 3)
        # vx = dpsi/dy, vy = -dpsi/dx; degree <= 3 keeps the Sobel divergence exactly zero
        L = p["scale"]
        X = (x - p["xc"]) / L
        Y = (y - p["yc"]) / L
        c = p["coef"]
        dpsi_dx = (2 * c[0] * X + c[1] * Y + 3 * c[3] * X ** 2 + 2 * c[4] * X * Y + c[5] * Y ** 2)
        dpsi_dy = (c[1] * X + 2 * c[2] * Y + c[4] * X ** 2 + 2 * c[5] * X * Y + 3 * c[6] * Y ** 2)
        vx = vx + dpsi_dy
        vy = vy - dpsi_dx
    cap = p.get("cap")
    if cap is not None:
        speed = np.hypot(vx, vy)
        factor = np.where(speed > cap, cap / np.maximum(speed, 1e-12), 1.0)
        vx, vy = vx * factor, vy * factor
    return vx, vy


def motion_grid(spec: StormSpec):
    """True motion field on the grid, shape (2, H, W)."""
    n = spec.size
    y, x = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    vx, vy = velocity(spec, x, y)
    return np.stack([vx, vy])


def trace(spec: StormSpec, x, y, t, substeps=8):
    """Integrate positions along the flow for ``t`` steps (negative t goes back)."""
    x = np.array(x, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    n = int(round(abs(t) * substeps))
    if n == 0:
        return x, y
    h = t / n
    for _ in range(n):
        k1 = velocity(spec, x, y)
        k2 = velocity(spec, x + 0.5 * h * k1[0], y + 0.5 * h * k1[1])
        k3 = velocity(spec, x + 0.5 * h * k2[0], y + 0.5 * h * k2[1])
        k4 = velocity(spec, x + h * k3[0], y + h * k3[1])
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y = y + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return x, y


# ---------------------------------------------------------------- fields

def _cell_value(cell: Cell, x, y):
    r0, c0 = cell.center
    dx = x - c0
    dy = y - r0
    ca, sa = np.cos(cell.angle), np.sin(cell.angle)
    a = ca * dx + sa * dy
    b = -sa * dx + ca * dy
    return cell.peak * np.exp(-0.5 * ((a / cell.sigma[0]) ** 2 + (b / cell.sigma[1]) ** 2))


def latent_frames(spec: StormSpec):
    """Noise-free frames, source-sink terms and the per-step foot points.

    Returns ``(frames (T, H, W), source (T-1, H, W))`` where
    ``source[t]`` is the advection-free change that produced frame t+1.
    """
    n = spec.size
    y, x = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    frames = np.zeros((spec.length, n, n))
    source = np.zeros((spec.length - 1, n, n))
    fx, fy = x, y
    for t in range(spec.length):
        if t > 0:
            fx, fy = trace(spec, fx, fy, -1.0)
        for cell in spec.cells:
            g = _cell_value(cell, fx, fy)
            frames[t] += (1 + cell.growth) ** t * g
            if t > 0:
                source[t - 1] += ((1 + cell.growth) ** t - (1 + cell.growth) ** (t - 1)) * g
    return frames, source


def generate(spec: StormSpec, seed=0):
    """Return ``(FieldSequence, motion (T, 2, H, W), source (T-1, H, W))``."""
    frames, source = latent_frames(spec)
    if spec.noise > 0:
        rng = np.random.default_rng(seed)
        for t in range(len(frames)):
            eps = ndimage.gaussian_filter(rng.standard_normal(frames[t].shape), 1.5, mode="wrap")
            eps /= eps.std() + 1e-12
            frames[t] *= np.exp(spec.noise * eps - 0.5 * spec.noise ** 2)
    motion = np.broadcast_to(motion_grid(spec), (spec.length, 2, spec.size, spec.size)).copy()
    seq = FieldSequence.from_array(frames)
    return seq, motion, source


# ---------------------------------------------------------------- presets

def random_spec(preset, rng, size=64, length=SEQ_LEN):
    """Draw a random StormSpec for one of the corpus presets."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    scale = size / 32.0
    mid = (size - 1) / 2.0
    if preset == "translate":
        n_cells = int(rng.integers(2, 5))
        flow = "uniform"
        growth_range = (0.0, 0.0)
        noise = 0.0
    elif preset == "growdecay":
        n_cells = int(rng.integers(2, 5))
        flow = "uniform"
        growth_range = (-0.15, 0.15)
        noise = 0.0
    else:
        n_cells = int(rng.integers(3, 6))
        flow = ["rotation", "solenoidal"][int(rng.integers(0, 2))]
        growth_range = (-0.05, 0.05)
        noise = 0.03

    speed = rng.uniform(*SPEED)
    heading = rng.uniform(0, 2 * np.pi)
    params = {"u": speed * np.cos(heading), "v": speed * np.sin(heading)}
    if flow == "rotation":
        params.update(xc=mid + rng.uniform(-4, 4) * scale, yc=mid + rng.uniform(-4, 4) * scale,
                      omega=rng.choice([-1, 1]) * rng.uniform(0.02, 0.05), cap=6.0)
        params.update(u=0.3 * params["u"], v=0.3 * params["v"])
    elif flow == "solenoidal":
        coef = rng.standard_normal(7)
        params.update(xc=mid, yc=mid, scale=size / 2.0, coef=coef, cap=6.0)
        probe = StormSpec(size=size, flow=flow, flow_params={**params, "u": 0.0, "v": 0.0, "cap": None})
        vmax = np.hypot(*motion_grid(probe)).max()
        params["coef"] = coef * (rng.uniform(0.6, 1.5) / max(vmax, 1e-9))
        params.update(u=0.5 * params["u"], v=0.5 * params["v"])
    spec0 = StormSpec(size=size, flow=flow, flow_params=params, length=length)

    cells = []
    for i in range(n_cells):
        # place cells in the domain at mid-sequence, then trace back to t = 0
        r_mid = rng.uniform(*PLACEMENT) * (size - 1)
        c_mid = rng.uniform(*PLACEMENT) * (size - 1)
        c0, r0 = trace(spec0, c_mid, r_mid, -(length - 1) / 2.0)
        # broad cells keep one-step bilinear warp error small
        major = rng.uniform(*CELL_SIGMA) * scale
        minor = rng.uniform(min(CELL_MIN_SIGMA, CELL_SIGMA[0]) * scale, major)
        if preset == "growdecay":
            # alternate signs so every storm has growing and decaying cells
            mag = rng.uniform(0.05, growth_range[1])
            growth = mag if i % 2 == 0 else -mag
        else:
            growth = rng.uniform(*growth_range)
        peak = float(rng.uniform(4.0, 30.0))
        cells.append(Cell(center=(float(r0), float(c0)), sigma=(major, minor),
                          angle=float(rng.uniform(0, np.pi)), peak=peak, growth=float(growth)))
    return StormSpec(size=size, cells=tuple(cells), flow=flow, flow_params=params, noise=noise, length=length)


@dataclass
class Corpus:
    """In-memory corpus: windows of SEQ_LEN frames per split."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    test_motion: np.ndarray
    preset: str
    seed: int
    manifest: dict = field(default_factory=dict)


def make_corpus(preset, n_sequences=300, size=32, seed=0, filter_params=FilterParams()):
    """Generate ``n_sequences`` independent storms and split their windows.

    Storms are laid out on one archive timeline separated by gaps, so every
    storm contributes at most one target (its last frame).
    """
    rng = np.random.default_rng(seed)
    windows, motions, timestamps, rainy = [], [], [], []
    for k in range(n_sequences):
        spec = random_spec(preset, rng, size=size)
        seq, motion, _ = generate(spec, seed=int(rng.integers(0, 2 ** 31)))
        arr = seq.stack().astype(np.float32)
        windows.append(arr)
        motions.append(motion[0].astype(np.float32))
        t_end = k * (SEQ_LEN + 1) + SEQ_LEN - 1
        timestamps.append(t_end)
        rainy.append(is_rainy_enough(arr[-1], filter_params.pixel_threshold, filter_params.area_fraction))
    targets = [t for t, ok in zip(timestamps, rainy) if ok]
    split = split_targets(targets, filter_params)
    index = {t: i for i, t in enumerate(timestamps)}

    def pick(ts):
        if not ts:
            return np.zeros((0, SEQ_LEN, size, size), np.float32)
        return np.stack([windows[index[t]] for t in ts])

    manifest = {
        "preset": preset, "seed": seed, "size": size, "n_sequences": n_sequences,
        "seq_len": SEQ_LEN, "targets": {"train": split.train, "val": split.validation, "test": split.test},
        "filter": asdict(filter_params),
    }
    test_motion = (np.stack([motions[index[t]] for t in split.test]) if split.test
                   else np.zeros((0, 2, size, size), np.float32))
    return Corpus(pick(split.train), pick(split.validation), pick(split.test), test_motion, preset, seed, manifest)


def write_corpus(corpus: Corpus, out_dir):
    """Write train/val/test stacks (windows concatenated frame-major) and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = corpus.manifest["size"]
    for name in ("train", "val", "test"):
        arr = getattr(corpus, name)
        write_array(out / f"{name}.rfs", arr.reshape(-1, size, size), units="mm/h")
    write_array(out / "test_motion.rfs", corpus.test_motion, units="px/step")
    (out / "corpus.json").write_text(json.dumps(corpus.manifest, indent=2, sort_keys=True, default=_jsonable))
    return out


def load_corpus(data_dir):
    from .stackio import read_array

    d = Path(data_dir)
    manifest = json.loads((d / "corpus.json").read_text())
    size = manifest["size"]
    L = manifest["seq_len"]

    def load(name):
        arr, _ = read_array(d / f"{name}.rfs")
        return arr.reshape(-1, L, size, size)

    motion, _ = read_array(d / "test_motion.rfs")
    if motion.ndim == 3:  # zero-frame file
        motion = motion.reshape(0, 2, size, size)
    return Corpus(load("train"), load("val"), load("test"), motion, manifest["preset"], manifest["seed"], manifest)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def generate_sequence(preset, seed=0, size=32):
    """Single random storm for a preset: ``(FieldSequence, motion, source, spec)``."""
    rng = np.random.default_rng(seed)
    spec = random_spec(preset, rng, size=size)
    seq, motion, source = generate(spec, seed=int(rng.integers(0, 2 ** 31)))
    return seq, motion, source, spec


def as_rain_fields(arr):
    return [RainField(a) for a in arr]
