"""Command-line entry point: ``lagcast <subcommand> ...``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("lagcast")

DEFAULT_SEQUENCES = 300
DEFAULT_SIZE = 32


class CliError(Exception):
    """A user-facing failure reported as a one-line diagnostic."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- manifest

def _versions():
    import scipy

    return {"lagcast": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path, command, config, sources=None, seed=None):
    """Record the effective configuration beside a run's outputs."""
    manifest = {"command": command, "config": config, "config_hash": config_hash(config),
                "seed": seed, "versions": _versions()}
    if sources:
        manifest["config_sources"] = sources
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def _read_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"config file {p} must hold a JSON object")
    return data


def resolve_train_config(file_cfg, flags):
    """Merge flag > file > default; returns ``(TrainConfig, kind, sources)``."""
    from .training import TrainConfig

    file_cfg = dict(file_cfg)
    kind = flags.pop("model", None) or file_cfg.pop("model", "lupin")
    file_cfg.pop("model", None)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(file_cfg) - known
    if unknown:
        raise CliError(f"unknown training config keys: {sorted(unknown)}")
    merged, sources = {}, {}
    for name in sorted(known):
        if flags.get(name) is not None:
            merged[name] = flags[name]
            sources[name] = "flag"
        elif name in file_cfg:
            merged[name] = file_cfg[name]
            sources[name] = "file"
        else:
            sources[name] = "default"
    try:
        config = TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from None
    return config, kind, sources


def _config_dict(config):
    d = asdict(config)
    d["stages"] = list(d["stages"])
    return d


def _need_dir(path, what="data directory"):
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} not found: {p}")
    return p


def _need_file(path, what="file"):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _load_corpus(path):
    from .stackio import StackFormatError
    from .synthetic import load_corpus

    d = _need_dir(path)
    if not (d / "corpus.json").is_file():
        raise CliError(f"{d} holds no corpus.json; run gen-data first")
    try:
        return load_corpus(d)
    except (StackFormatError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read corpus in {d}: {exc}") from None


def _load_model(path):
    from .optim import CheckpointError
    from .training import load_model

    p = _need_file(path, "checkpoint")
    try:
        return load_model(p)
    except (CheckpointError, KeyError, ValueError, TypeError) as exc:
        raise CliError(f"cannot load checkpoint {p}: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    from .synthetic import make_corpus, write_corpus

    corpus = make_corpus(args.preset, n_sequences=args.n_sequences, size=args.size, seed=args.seed)
    out = write_corpus(corpus, args.out)
    cfg = {"preset": args.preset, "n_sequences": args.n_sequences, "size": args.size}
    write_manifest(out / "manifest.json", "gen-data", cfg, seed=args.seed)
    print(f"wrote {len(corpus.train)}/{len(corpus.val)}/{len(corpus.test)} train/val/test windows to {out}")


def _flag_values(args):
    flags = {"beta": args.beta, "gamma": args.gamma, "seed": args.seed, "model": args.model,
             "single_stage": True if args.single_stage else None}
    if args.stage and args.stage != "all":
        flags["stages"] = (args.stage,)
    return flags


def cmd_train(args):
    from .training import TrainingDiverged, train_baseline, train_lupin

    config, kind, sources = resolve_train_config(_read_config(args.config), _flag_values(args))
    if kind not in ("lupin", "rainnet", "lcnn"):
        raise CliError(f"unknown model kind {kind!r}; choose lupin, rainnet or lcnn")
    corpus = _load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if args.init is not None:
        model = _load_model(args.init)
        if model.kind != "lupin":
            raise CliError(f"--init expects a lupin checkpoint, got {model.kind}")
    elif kind == "lupin" and config.stages[0] != "mf" and not config.single_stage:
        raise CliError(f"stage {config.stages[0]} needs --init with a checkpoint from the previous stage")
    cfg = {"model": kind, **_config_dict(config), "data": str(args.data), "init": args.init}
    write_manifest(out / f"{kind}_manifest.json", "train", cfg, sources, seed=config.seed)
    try:
        with open(out / f"{kind}_run_log.jsonl", "w") as run_log:
            if kind == "lupin":
                _, history = train_lupin(corpus.train, corpus.val, config, out_dir=out, model=model,
                                         run_log=run_log)
            else:
                _, history = train_baseline(kind, corpus.train, corpus.val, config, out_dir=out,
                                            run_log=run_log)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}") from None
    last = history[-1] if history else {}
    print(f"trained {kind}: {len(history)} epochs, last val loss {last.get('val_loss', float('nan')):.6f}")


def cmd_nowcast(args):
    from .fields import N_INPUTS, FieldSequence, RainField
    from .nets import rollout_mmh
    from .stackio import StackFormatError, read_stack, write_stack

    if args.leads < 1:
        raise CliError(f"--leads must be >= 1, got {args.leads}")
    model = _load_model(args.model)
    try:
        seq = read_stack(_need_file(args.input, "input stack"))
    except StackFormatError as exc:
        raise CliError(f"cannot read {args.input}: {exc}") from None
    if len(seq) < N_INPUTS:
        raise CliError(f"input stack needs at least {N_INPUTS} frames, got {len(seq)}")
    if not isinstance(seq[0], RainField):
        raise CliError("input stack must hold rain rates in mm/h")
    frames = seq.stack()[-N_INPUTS:]
    pred = rollout_mmh(model, frames[None], args.leads)[0]
    t0 = seq[-1].timestamp + 1
    out_seq = FieldSequence(tuple(RainField(p, dx=seq[0].dx, timestamp=t0 + i) for i, p in enumerate(pred)),
                            seq.step_minutes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_stack(out_seq, out)
    cfg = {"model": str(args.model), "input": str(args.input), "leads": args.leads}
    write_manifest(out.with_name(out.name + ".manifest.json"), "nowcast", cfg)
    print(f"wrote {args.leads} nowcast frames to {out}")


def _model_names(paths):
    names, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        names.append(stem if seen[stem] == 1 else f"{stem}_{seen[stem]}")
    return names


def cmd_evaluate(args):
    from .nets import lk_motion_batch
    from .fields import N_INPUTS
    from .verification import evaluate

    corpus = _load_corpus(args.data)
    models = {name: _load_model(p) for name, p in zip(_model_names(args.models), args.models)}
    if len(corpus.test) == 0:
        raise CliError(f"{args.data} has an empty test split")
    lk = None
    if any(m.kind == "lcnn" for m in models.values()):
        lk = lk_motion_batch(corpus.test[:, :N_INPUTS])
    out = Path(args.out)
    try:
        reports = evaluate(models, corpus.test, out, leads=args.leads, lk_motion=lk)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    cfg = {"models": [str(p) for p in args.models], "data": str(args.data), "leads": args.leads}
    write_manifest(out / "manifest.json", "evaluate", cfg)
    for rep in reports:
        last = rep.leads[max(rep.leads)]
        print(f"{rep.model}: lead-{max(rep.leads)} mse {last['mse']:.4f}")


def _motion_source(token, corpus, file_cfg, args):
    """Resolve one compare-motion source to a motion_fitness argument."""
    from .training import TrainConfig, train_lupin

    if token in ("lk", "zero"):
        return token
    if "=" in token:
        name, path = token.split("=", 1)
        model = _load_model(path)
        if model.kind != "lupin":
            raise CliError(f"source {name}: checkpoint must be a lupin model")
        return model
    if token in ("mf-reg", "mf-noreg"):
        base = {k: v for k, v in file_cfg.items() if k != "model"}
        try:
            cfg = TrainConfig(**{**base, "stages": ("mf",), "single_stage": False, "seed": args.seed})
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid training config: {exc}") from None
        if token == "mf-noreg":
            cfg = TrainConfig(**{**_config_dict(cfg), "beta": 0.0})
        model, _ = train_lupin(corpus.train, corpus.val, cfg, out_dir=None)
        return model
    raise CliError(f"unknown motion source {token!r}; use lk, zero, mf-reg, mf-noreg or NAME=CKPT")


def cmd_compare_motion(args):
    import csv

    from .fields import N_INPUTS
    from .nets import lk_motion_batch
    from .verification import motion_fitness

    corpus = _load_corpus(args.data)
    file_cfg = _read_config(args.config)
    tokens = [t.strip() for t in args.sources.split(",") if t.strip()]
    if not tokens:
        raise CliError("--sources is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lk = lk_motion_batch(corpus.test[:, :N_INPUTS]) if "lk" in tokens else None
    rows = []
    for token in tokens:
        source = _motion_source(token, corpus, file_cfg, args)
        name = token.split("=", 1)[0]
        scale = getattr(source, "scale", 3.0)
        for r in motion_fitness(source, corpus.test, leads=args.leads, scale=scale, lk_motion=lk,
                                full_domain=args.full_domain):
            rows.append({"source": name, "lead_minutes": r["lead"] * 5,
                         "mean_abs_divergence": r["mean_abs_divergence"],
                         "extrapolation_mse": r["extrapolation_mse"]})
    with open(out / "motion_fitness.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    cfg = {"sources": tokens, "data": str(args.data), "leads": args.leads, "train": file_cfg,
           "full_domain": args.full_domain}
    write_manifest(out / "manifest.json", "compare-motion", cfg, seed=args.seed)
    for r in rows:
        print(f"{r['source']:>10s} +{r['lead_minutes']:>2d} min  |div u| {r['mean_abs_divergence']:.5f}"
              f"  mse {r['extrapolation_mse']:.4f}")


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(instances=args.instances, seed=args.seed)
    ok = True
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:24s} max rel err {err:.2e}")
    if not ok:
        raise CliError("gradient check failed")


# ---------------------------------------------------------------- parser

def build_parser():
    from .synthetic import PRESETS

    p = _Parser(prog="lagcast", description="Differentiable Lagrangian nowcasting on synthetic storms.")
    p.add_argument("--version", action="version", version=f"lagcast {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--preset", required=True, choices=PRESETS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-sequences", type=int, default=DEFAULT_SEQUENCES)
    g.add_argument("--size", type=int, default=DEFAULT_SIZE)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train LUPIN or a baseline")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("mf", "af", "joint", "all"), default=None)
    t.add_argument("--model", choices=("lupin", "rainnet", "lcnn"), default=None)
    t.add_argument("--init", help="lupin checkpoint to continue from")
    t.add_argument("--beta", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--single-stage", action="store_true")
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("nowcast", help="roll a trained model forward")
    n.add_argument("--model", required=True)
    n.add_argument("--input", required=True)
    n.add_argument("--leads", type=int, default=6)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_nowcast)

    e = sub.add_parser("evaluate", help="score models on the test split")
    e.add_argument("--models", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--leads", type=int, default=6)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare-motion", help="motion-field fitness by lead")
    c.add_argument("--sources", default="lk,mf-reg,mf-noreg")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.add_argument("--leads", type=int, default=6)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--full-domain", action="store_true")
    c.set_defaults(func=cmd_compare_motion)

    k = sub.add_parser("gradcheck", help="finite-difference check of every primitive (float64)")
    k.add_argument("--instances", type=int, default=20)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
