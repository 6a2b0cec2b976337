"""Continuous and categorical nowcast scores and motion-field fitness."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .advection import divergence_np
from .autodiff import DiffTensor
from .fields import N_INPUTS, STEP_MINUTES, from_transformed, to_transformed

THRESHOLDS = (1.0, 5.0, 10.0)
CATEGORICAL = ("precision", "recall", "ets")
CSV_FIELDS = ("model", "lead_minutes", "metric", "threshold", "value")


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"geometry mismatch: prediction {pred.shape} vs target {target.shape}")
    return pred, target


def mse(pred, target):
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def me(pred, target):
    """Mean (signed) error, prediction minus target."""
    pred, target = _pair(pred, target)
    return float(np.mean(pred - target))


@dataclass
class ContingencyTable:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0
    threshold: float = 1.0
    lead: int = 0

    @property
    def total(self):
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other):
        return ContingencyTable(self.hits + other.hits, self.misses + other.misses,
                                self.false_alarms + other.false_alarms,
                                self.correct_negatives + other.correct_negatives,
                                self.threshold, self.lead)


def contingency(pred, target, threshold, lead=0):
    pred, target = _pair(pred, target)
    p = pred >= threshold
    t = target >= threshold
    return ContingencyTable(
        hits=int(np.count_nonzero(p & t)),
        misses=int(np.count_nonzero(~p & t)),
        false_alarms=int(np.count_nonzero(p & ~t)),
        correct_negatives=int(np.count_nonzero(~p & ~t)),
        threshold=threshold, lead=lead)


def precision(table):
    d = table.hits + table.false_alarms
    return table.hits / d if d else None


def recall(table):
    d = table.hits + table.misses
    return table.hits / d if d else None


def ets(table):
    """Equitable threat score; ``None`` when undefined."""
    h, m, f = table.hits, table.misses, table.false_alarms
    n = table.total
    if n == 0:
        return None
    h_random = (h + m) * (h + f) / n
    d = h + m + f - h_random
    if d == 0:
        return None
    return (h - h_random) / d


SCORES = {"precision": precision, "recall": recall, "ets": ets}


@dataclass
class ScoreReport:
    """Scores per lead: ``leads[k] = {"mse", "me", ("precision", thr), ...}``."""

    model: str
    leads: dict

    def rows(self):
        out = []
        for lead in sorted(self.leads):
            s = self.leads[lead]
            minutes = lead * STEP_MINUTES
            out.append((self.model, minutes, "mse", None, s["mse"]))
            out.append((self.model, minutes, "me", None, s["me"]))
            for thr in THRESHOLDS:
                for name in CATEGORICAL:
                    out.append((self.model, minutes, name, thr, s[(name, thr)]))
        return out


def score_nowcasts(name, pred, target, thresholds=THRESHOLDS):
    """Pool scores over samples. ``pred`` and ``target`` are (N, leads, H, W) mm/h."""
    pred, target = _pair(pred, target)
    leads = {}
    for k in range(pred.shape[1]):
        p = pred[:, k]
        t = target[:, k]
        s = {"mse": mse(p, t), "me": me(p, t)}
        for thr in thresholds:
            table = contingency(p, t, thr, lead=k + 1)
            for metric, fn in SCORES.items():
                s[(metric, thr)] = fn(table)
        leads[k + 1] = s
    return ScoreReport(name, leads)


def _fmt(v):
    if v is None:
        return "null"
    return repr(float(v))


def write_report_csv(path, reports):
    """Long-format CSV; undefined scores are written as ``null``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for rep in reports:
            for model, minutes, metric, thr, value in rep.rows():
                w.writerow([model, minutes, metric, "" if thr is None else repr(float(thr)), _fmt(value)])


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["lead_minutes"] = int(r["lead_minutes"])
        r["threshold"] = float(r["threshold"]) if r["threshold"] else None
        r["value"] = None if r["value"] == "null" else float(r["value"])
    return rows


def lead_average(reports_rows, metric, threshold=None):
    """Mean of a metric over leads, skipping undefined values."""
    vals = [r["value"] for r in reports_rows
            if r["metric"] == metric and r["threshold"] == threshold and r["value"] is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------- evaluation

def nowcast_model(model, inputs_mmh, leads=6, batch=16, motion=None):
    """Run a model's rollout over (N, n, H, W) inputs in chunks; returns mm/h."""
    from .nets import rollout_mmh

    outs = []
    for s in range(0, len(inputs_mmh), batch):
        m = None if motion is None else motion[s:s + batch]
        outs.append(rollout_mmh(model, inputs_mmh[s:s + batch], leads, motion=m))
    return np.concatenate(outs) if outs else np.zeros((0, leads) + tuple(inputs_mmh.shape[2:]))


def evaluate(models, test_windows, out_dir=None, leads=6, lk_motion=None):
    """Roll every model over the test windows and score by lead.

    ``models`` maps a display name to a model; returns the ScoreReports and
    writes ``<name>.csv`` plus ``scores_long.csv`` when ``out_dir`` is given.
    """
    test_windows = np.asarray(test_windows, dtype=np.float64)
    inputs = test_windows[:, :N_INPUTS]
    target = test_windows[:, N_INPUTS:N_INPUTS + leads]
    reports = []
    for name, model in models.items():
        motion = lk_motion if getattr(model, "kind", None) == "lcnn" else None
        pred = nowcast_model(model, inputs, leads, motion=motion)
        if pred.shape[2:] != target.shape[2:]:
            raise ValueError(f"geometry mismatch between model output {pred.shape} and data {target.shape}")
        reports.append(score_nowcasts(name, pred, target))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            write_report_csv(out / f"{rep.model}.csv", [rep])
        write_report_csv(out / "scores_long.csv", reports)
    return reports


def rainy_mask(last_input_mmh, threshold=0.1):
    return np.asarray(last_input_mmh) >= threshold


def mean_abs_divergence(motion, mask=None):
    """Mean |div u| over ``mask`` cells (one-cell border excluded). ``motion`` is (B, 2, H, W)."""
    div = np.abs(divergence_np(motion))
    interior = np.zeros(div.shape, dtype=bool)
    interior[:, 1:-1, 1:-1] = True
    if mask is not None:
        interior &= mask
    return float(div[interior].mean()) if interior.any() else 0.0


def motion_fitness(source, test_windows, leads=6, scale=3.0, rain_threshold=0.1, full_domain=False,
                   batch=16, lk_motion=None):
    """Per-lead mean |div u| and extrapolation MSE (mm/h) of a motion source.

    ``source`` is a LupinModel (a fresh field per lead from the rolling
    window), the string ``"lk"`` (one Lucas-Kanade field per sample reused at
    every lead; ``lk_motion`` may supply precomputed fields), ``"zero"``, or a
    (N, 2, H, W) array of fixed fields.
    """
    from .nets import lagrangian_persistence, lk_motion_batch, motion_rollout

    w = np.asarray(test_windows, dtype=np.float64)
    inputs = w[:, :N_INPUTS]
    target = w[:, N_INPUTS:N_INPUTS + leads]
    mask = None if full_domain else rainy_mask(inputs[:, -1], rain_threshold)
    sq = np.zeros(leads)
    count = np.zeros(leads)
    divs = [[] for _ in range(leads)]
    weights = [[] for _ in range(leads)]
    for s in range(0, len(w), batch):
        xb = to_transformed(inputs[s:s + batch], scale).astype(np.float32)
        mb = None if mask is None else mask[s:s + batch]
        if isinstance(source, str) or isinstance(source, np.ndarray):
            if isinstance(source, np.ndarray):
                fields = source[s:s + batch]
            elif source == "lk":
                fields = lk_motion[s:s + batch] if lk_motion is not None else lk_motion_batch(inputs[s:s + batch])
            elif source == "zero":
                fields = np.zeros((len(xb), 2) + xb.shape[2:], np.float32)
            else:
                raise ValueError(f"unknown motion source {source!r}")
            outs = lagrangian_persistence(xb, fields.astype(np.float32), leads)
            motions = [fields] * leads
        else:
            outs, motions = motion_rollout(source, DiffTensor(xb), leads)
        for k in range(leads):
            pred = from_transformed(outs[k][:, 0], scale)
            sq[k] += np.sum((pred - target[s:s + batch, k]) ** 2)
            count[k] += pred.size
            div = np.abs(divergence_np(motions[k]))
            sel = np.zeros(div.shape, dtype=bool)
            sel[:, 1:-1, 1:-1] = True
            if mb is not None:
                sel &= mb
            divs[k].append(div[sel].sum())
            weights[k].append(sel.sum())
    return [{"lead": k + 1,
             "mean_abs_divergence": float(np.sum(divs[k]) / max(np.sum(weights[k]), 1)),
             "extrapolation_mse": float(sq[k] / count[k])} for k in range(leads)]
