"""Radar field data model, Marshall-Palmer conversion and dataset filtering."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Z = A * R**B
MP_A = 200.0
MP_B = 1.6

DBZ_FLOOR = -32.0
"""Sentinel reflectivity for cells without rain."""
RAIN_CUTOFF = 0.01
"""Rain rates below this (mm/h) are treated as zero rain."""

STEP_MINUTES = 5
LEAD_COUNT = 11
N_INPUTS = 6
N_OUTPUTS = 6
PIXEL_THRESHOLD = 0.6  # mm/h, i.e. 0.05 mm per 5 min
AREA_FRACTION = 0.05
MIN_SIZE = 8


class FieldValidationError(ValueError):
    pass


def _check_grid(values, name):
    values = np.asarray(values)
    if values.ndim != 2:
        raise FieldValidationError(f"{name} must be 2-D, got shape {values.shape}")
    if min(values.shape) < MIN_SIZE:
        raise FieldValidationError(f"{name} must be at least {MIN_SIZE}x{MIN_SIZE}, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise FieldValidationError(f"{name} contains non-finite values")
    return values


@dataclass(frozen=True)
class RainField:
    """Rain rate in mm/h on a regular grid."""

    values: np.ndarray
    dx: float = 1.0
    timestamp: int = 0

    def __post_init__(self):
        values = _check_grid(self.values, "RainField")
        if np.any(values < 0):
            raise FieldValidationError("RainField contains negative rain rates")
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ReflectivityField:
    """Reflectivity in dBZ; no-rain cells hold ``DBZ_FLOOR``."""

    values: np.ndarray
    dx: float = 1.0
    timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", _check_grid(self.values, "ReflectivityField"))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class FieldSequence:
    fields: tuple
    step_minutes: int = STEP_MINUTES

    def __post_init__(self):
        fields = tuple(self.fields)
        object.__setattr__(self, "fields", fields)
        if not fields:
            return
        shape = fields[0].values.shape
        dx = fields[0].dx
        for prev, cur in zip(fields, fields[1:]):
            if cur.timestamp != prev.timestamp + 1:
                raise FieldValidationError(
                    f"timestamps must be consecutive, got {prev.timestamp} then {cur.timestamp}")
        for f in fields:
            if f.values.shape != shape or f.dx != dx:
                raise FieldValidationError("all fields in a sequence must share geometry")

    def __len__(self):
        return len(self.fields)

    def __getitem__(self, i):
        return self.fields[i]

    def __iter__(self):
        return iter(self.fields)

    def stack(self):
        """Values as a (frames, H, W) array."""
        if not self.fields:
            return np.zeros((0, 0, 0))
        return np.stack([f.values for f in self.fields])

    @classmethod
    def from_array(cls, arr, dx=1.0, t0=0):
        return cls(tuple(RainField(np.asarray(a), dx=dx, timestamp=t0 + i) for i, a in enumerate(arr)))


def rain_to_dbz(field: RainField) -> ReflectivityField:
    r = np.asarray(field.values, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise FieldValidationError("rain_to_dbz: non-finite rain rate")
    if np.any(r < 0):
        raise FieldValidationError("rain_to_dbz: negative rain rate")
    wet = r >= RAIN_CUTOFF
    dbz = np.full(r.shape, DBZ_FLOOR)
    dbz[wet] = 10.0 * np.log10(MP_A * r[wet] ** MP_B)
    return ReflectivityField(dbz, dx=field.dx, timestamp=field.timestamp)


def dbz_to_rain(field: ReflectivityField) -> RainField:
    dbz = np.asarray(field.values, dtype=np.float64)
    rain = (10.0 ** (dbz / 10.0) / MP_A) ** (1.0 / MP_B)
    rain[dbz <= DBZ_FLOOR] = 0.0
    return RainField(rain, dx=field.dx, timestamp=field.timestamp)


def rainy_fraction(values, pixel_threshold=PIXEL_THRESHOLD):
    values = np.asarray(values)
    return np.count_nonzero(values >= pixel_threshold) / values.size


def is_rainy_enough(field, pixel_threshold=PIXEL_THRESHOLD, area_fraction=AREA_FRACTION):
    values = field.values if isinstance(field, RainField) else np.asarray(field)
    # compare counts to avoid float rounding at the exact boundary
    return np.count_nonzero(values >= pixel_threshold) >= area_fraction * values.size - 1e-9


@dataclass(frozen=True)
class FilterParams:
    pixel_threshold: float = PIXEL_THRESHOLD
    area_fraction: float = AREA_FRACTION
    lead_count: int = LEAD_COUNT
    test_fraction: float = 0.2
    val_fraction: float = 0.15
    seed: int = 0


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    lead_count: int = LEAD_COUNT

    def all_targets(self):
        return self.train + self.validation + self.test


def split_counts(n_targets, test_fraction=0.2, val_fraction=0.15):
    """(train, validation, test) sizes before overlap pruning."""
    n_test = int(round(n_targets * test_fraction))
    n_rest = n_targets - n_test
    n_val = int(round(n_rest * val_fraction))
    return n_rest - n_val, n_val, n_test


def eligible_targets(timestamps, rainy, lead_count=LEAD_COUNT):
    """Timestamps of rainy observations whose ``lead_count`` predecessors exist."""
    present = set(int(t) for t in timestamps)
    return [int(t) for t, ok in zip(timestamps, rainy)
            if ok and all((t - k) in present for k in range(1, lead_count + 1))]


def _conflicts(target, others, lead_count):
    """True if ``target`` is a lead of any of ``others`` or vice versa."""
    return any(0 < o - target <= lead_count or 0 < target - o <= lead_count for o in others)


def build_split(archive: Sequence, params: FilterParams = FilterParams()) -> DatasetSplit:
    """Split eligible targets of a chronological archive into train/validation/test.

    ``archive`` is a chronologically ordered sequence of RainFields; gaps in
    their timestamps are allowed and simply make some targets ineligible.
    The last targets go to test; validation is drawn at random from the rest
    in contiguous runs. Conflicting targets are dropped from the
    lower-priority split (validation < train < test).
    """
    fields = list(archive)
    if len(fields) <= params.lead_count:
        raise ValueError(f"archive too short: need more than {params.lead_count} observations, got {len(fields)}")
    ts = [f.timestamp for f in fields]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("archive must be strictly chronological")
    rainy = [is_rainy_enough(f, params.pixel_threshold, params.area_fraction) for f in fields]
    targets = eligible_targets(ts, rainy, params.lead_count)
    return split_targets(targets, params)


def split_targets(targets, params: FilterParams = FilterParams()) -> DatasetSplit:
    targets = sorted(targets)
    n_train, n_val, n_test = split_counts(len(targets), params.test_fraction, params.val_fraction)
    test = targets[len(targets) - n_test:] if n_test else []
    rest = targets[:len(targets) - n_test]

    # runs of targets whose windows chain together
    runs = []
    for t in rest:
        if runs and t - runs[-1][-1] <= params.lead_count:
            runs[-1].append(t)
        else:
            runs.append([t])
    rng = np.random.default_rng(params.seed)
    val = []
    for k in rng.permutation(len(runs)):
        if len(val) >= n_val:
            break
        val.extend(runs[k][:n_val - len(val)])
    val_set = set(val)
    train = [t for t in rest if t not in val_set]

    lc = params.lead_count
    train = [t for t in train if not _conflicts(t, test, lc)]
    val = sorted(t for t in val if not _conflicts(t, test, lc) and not _conflicts(t, train, lc))
    return DatasetSplit(train=train, validation=val, test=test, lead_count=lc)


def split_violations(split: DatasetSplit, timestamps=None):
    """Brute-force check of the split invariants; returns a list of messages."""
    problems = []
    sets = {"train": split.train, "validation": split.validation, "test": split.test}
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = set(sets[a]) & set(sets[b])
            if common:
                problems.append(f"{a} and {b} share targets {sorted(common)[:5]}")
    if timestamps is not None:
        present = set(timestamps)
        for name, ts in sets.items():
            for t in ts:
                for k in range(1, split.lead_count + 1):
                    if t - k not in present:
                        problems.append(f"{name} target {t} lacks lead {t - k}")
    for a in names:
        for b in names:
            if a == b:
                continue
            for t in sets[a]:
                for u in sets[b]:
                    if 0 < u - t <= split.lead_count:
                        problems.append(f"{a} target {t} is a lead of {b} target {u}")
    return problems


def to_transformed(rain, scale):
    """log(1 + R) / scale, the space the networks work in."""
    return np.log1p(np.asarray(rain)) / scale


def from_transformed(x, scale):
    return np.expm1(np.asarray(x) * scale)
