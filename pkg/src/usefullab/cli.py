"""``usefullab`` command-line runner.

Configuration is a YAML file. Every key is validated against the schema
below; unknown keys and a wrong ``schema_version`` are rejected. Output file
names depend only on the subcommand, optimizer and seed, and all files are
written atomically, so reruns with the same config overwrite byte-identical
content.

Seeds: for an experiment seed ``s`` the training set uses ``s``, the test set
``s + TEST_SEED_OFFSET`` and the weight initialization ``s``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from usefullab import __version__
from usefullab._io import atomic_write_text
from usefullab.checks import INSTANCE_CHECKS
from usefullab.cubic_cnn import InitSpec, init_weights, load_checkpoint, save_checkpoint
from usefullab.metrics import first_correct_epoch, forgetting_scores, write_forgetting_csv
from usefullab.optimizers import OptimizerConfig, TrainingError, train
from usefullab.spectral import dense_hessian, model_spectrum
from usefullab.synthgen import DistributionSpec, generate, make_basis, save_dataset
from usefullab.theory import TEST_SEED_OFFSET, TOY_SIGMA_0, Verdict, check_learning_order, run_gap_experiment
from usefullab.useful import DegenerateClustering, SeparationNotFound, UsefulConfig, run_useful

log = logging.getLogger("usefullab")

SCHEMA_VERSION = 1

TRAINING_CHECKS = ("gap", "order")
VALID_CHECKS = TRAINING_CHECKS + tuple(INSTANCE_CHECKS)

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "dataset": {
        "d": 50,
        "P": 3,
        "beta_e": 1.0,
        "beta_d": 0.2,
        "alpha": 0.9,
        "noise_std": 0.125,  # per-coordinate noise std, sigma_p / sqrt(d)
        "n": 10000,
        "test_n": 10000,
        "orthogonalize_noise": False,
    },
    "model": {"J": 40, "sigma_0": TOY_SIGMA_0, "enforce_positive_projections": False},
    "optimizer": {"kind": "gd", "eta": 0.1, "rho": 0.02, "normalize_perturbation": True, "iterations": 600},
    "useful": {"separating": "auto", "factor": 2, "window": 10, "shrink_ratio": 0.25},
    "spectrum": {"checkpoint": None, "k": 5, "steps": None, "subsample": None, "lanczos_seed": 0, "dense_oracle": False},
    "outputs": {"directory": ".", "formats": ["csv", "json"], "checkpoint_every": 0, "forgetting": False},
    "checks": ["gap"],
    "check_instances": {},
    "seeds": [0],
    "jobs": 1,
}


class ConfigError(ValueError):
    """Invalid or unreadable configuration (exit status 2)."""


# --- configuration ----------------------------------------------------------


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}' (valid: {', '.join(sorted(defaults))})")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a mapping")
            # check_instances is keyed by check name and validated separately
            out[key] = dict(value) if path == "check_instances" else _merge(defaults[key], value, path)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{p}: schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    cfg = _merge(DEFAULTS, raw, "")
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds!r}")
    unknown = [c for c in cfg["checks"] if c not in VALID_CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; valid checks: {', '.join(VALID_CHECKS)}")
    bad_inst = [c for c in cfg["check_instances"] if c not in INSTANCE_CHECKS]
    if bad_inst:
        raise ConfigError(f"check_instances has unknown check(s) {bad_inst}")
    fmts = cfg["outputs"]["formats"]
    if not fmts or any(f not in ("csv", "json") for f in fmts):
        raise ConfigError(f"outputs.formats must be a non-empty subset of [csv, json], got {fmts!r}")
    sep = cfg["useful"]["separating"]
    if sep != "auto" and not (isinstance(sep, int) and sep >= 0):
        raise ConfigError(f"useful.separating must be 'auto' or a non-negative integer, got {sep!r}")
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError(f"jobs must be a positive integer, got {cfg['jobs']!r}")
    try:
        for s in seeds:
            _dist_spec(cfg, s)
        _opt_config(cfg)
        InitSpec(cfg["model"]["sigma_0"])
        UsefulConfig(sep, cfg["useful"]["factor"], cfg["useful"]["window"], cfg["useful"]["shrink_ratio"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _dist_spec(cfg: dict, seed: int, n_key: str = "n") -> DistributionSpec:
    d = cfg["dataset"]
    return DistributionSpec(
        d=d["d"],
        P=d["P"],
        beta_e=float(d["beta_e"]),
        beta_d=float(d["beta_d"]),
        alpha=float(d["alpha"]),
        sigma_p=float(d["noise_std"]) * float(np.sqrt(d["d"])),
        n=d[n_key],
        seed=seed,
        orthogonalize_noise=bool(d["orthogonalize_noise"]),
    )


def _opt_config(cfg: dict, kind: str | None = None) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(
        kind or o["kind"], float(o["eta"]), float(o["rho"]), bool(o["normalize_perturbation"]), int(o["iterations"])
    )


def _init_spec(cfg: dict, seed: int) -> InitSpec:
    m = cfg["model"]
    return InitSpec(float(m["sigma_0"]), seed, bool(m["enforce_positive_projections"]))


def _datasets(cfg: dict, seed: int):
    basis = make_basis(cfg["dataset"]["d"])
    train_ds = generate(_dist_spec(cfg, seed), basis)
    test_ds = None
    if cfg["dataset"]["test_n"]:
        test_ds = generate(_dist_spec(cfg, seed + TEST_SEED_OFFSET, "test_n"), basis)
    return basis, train_ds, test_ds


# --- per-seed workers -------------------------------------------------------


def _gen(cfg: dict, seed: int, out: Path) -> list:
    _, ds, test = _datasets(cfg, seed)
    paths = [out / f"dataset_seed{seed}.usfl"]
    save_dataset(paths[0], ds)
    if test is not None:
        paths.append(out / f"testset_seed{seed}.usfl")
        save_dataset(paths[1], test)
    return paths


def _train(cfg: dict, seed: int, out: Path) -> list:
    basis, ds, test = _datasets(cfg, seed)
    init = _init_spec(cfg, seed)
    W0 = init_weights(init, cfg["model"]["J"], ds.spec.d, basis)
    opt = _opt_config(cfg)
    forgetting = bool(cfg["outputs"]["forgetting"])
    trace = train(
        W0, ds, opt, test_dataset=test, record_correctness=forgetting, checkpoint_every=cfg["outputs"]["checkpoint_every"]
    )
    stem = out / f"trace_{opt.kind}_seed{seed}"
    paths = trace.write(str(stem), cfg["outputs"]["formats"])
    ckpt = out / f"weights_{opt.kind}_seed{seed}.ckpt"
    save_checkpoint(ckpt, trace.final_weights, sigma_0=init.sigma_0, seed=seed, iteration=opt.iterations)
    paths.append(str(ckpt))
    for t, W in sorted(trace.checkpoints.items()):
        p = out / f"weights_{opt.kind}_seed{seed}_iter{t}.ckpt"
        save_checkpoint(p, W, sigma_0=init.sigma_0, seed=seed, iteration=t)
        paths.append(str(p))
    if forgetting:
        hist = trace.correctness_history()
        p = out / f"forgetting_{opt.kind}_seed{seed}.csv"
        write_forgetting_csv(p, forgetting_scores(hist), ds.has_fast, first_correct_epoch(hist))
        paths.append(str(p))
    return paths


def _useful(cfg: dict, seed: int, out: Path) -> list:
    basis, ds, test = _datasets(cfg, seed)
    W0 = init_weights(_init_spec(cfg, seed), cfg["model"]["J"], ds.spec.d, basis)
    u = cfg["useful"]
    ucfg = UsefulConfig(u["separating"], int(u["factor"]), int(u["window"]), float(u["shrink_ratio"]))
    opt = _opt_config(cfg)
    res = run_useful(ds, W0, opt, ucfg, test_dataset=test)
    mode = "detected" if res.plan.detected else "fixed"
    log.info("seed %d: %s separating iteration t=%d", seed, mode, res.plan.separating_iteration)
    fmts = cfg["outputs"]["formats"]
    paths = [str(out / f"plan_seed{seed}.json")]
    res.plan.write(paths[0])
    # plain baseline over the full budget from the same W0 and data
    baseline = train(W0, ds, opt, test_dataset=test)
    paths += baseline.write(str(out / f"trace_baseline_{opt.kind}_seed{seed}"), fmts)
    paths += res.final_trace.write(str(out / f"trace_useful_{opt.kind}_seed{seed}"), fmts)
    return paths


def _spectrum(cfg: dict, seed: int, out: Path) -> list:
    s = cfg["spectrum"]
    ckpt = Path(s["checkpoint"]) if s["checkpoint"] else out / f"weights_{cfg['optimizer']['kind']}_seed{seed}.ckpt"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt} (run 'usefullab train' first or set spectrum.checkpoint)")
    W, header = load_checkpoint(ckpt)
    _, ds, _ = _datasets(cfg, seed)
    if W.shape[1] != ds.spec.d:
        raise ValueError(f"checkpoint {ckpt} has d={W.shape[1]} but the dataset has d={ds.spec.d}")
    rep = model_spectrum(W, ds, k=int(s["k"]), steps=s["steps"], seed=int(s["lanczos_seed"]), subsample=s["subsample"])
    doc = rep.to_dict()
    doc["checkpoint"] = {"path": ckpt.name, **header}
    if s["dense_oracle"]:
        sub = ds if s["subsample"] is None else ds.subset(np.arange(min(s["subsample"], ds.n)))
        ref = np.linalg.eigvalsh(dense_hessian(W, sub))[::-1][: rep.eigenvalues.shape[0]]
        rel = np.abs(rep.eigenvalues - ref) / np.maximum(np.abs(ref), np.finfo(float).tiny)
        doc["dense_oracle"] = {"eigenvalues": [float(v) for v in ref], "max_relative_error": float(rel.max())}
    path = out / f"spectrum_seed{seed}.json"
    atomic_write_text(path, json.dumps(doc, sort_keys=True))
    return [str(path)]


def _verify(cfg: dict, seed: int, out: Path) -> list:
    results = []
    checks = cfg["checks"]
    gap = None
    if any(c in TRAINING_CHECKS for c in checks):
        basis = make_basis(cfg["dataset"]["d"])
        o = cfg["optimizer"]
        gap = run_gap_experiment(
            _dist_spec(cfg, seed),
            _init_spec(cfg, seed),
            float(o["eta"]),
            float(o["rho"]),
            int(o["iterations"]),
            cfg["model"]["J"],
            basis=basis,
            normalize=bool(o["normalize_perturbation"]),
        )
    for name in checks:
        if name == "gap":
            v = gap.check()
        elif name == "order":
            try:
                v = check_learning_order(gap.gd_trace, gap.sam_trace, cfg["model"]["sigma_0"], cfg["dataset"]["beta_e"])
            except RuntimeError as exc:
                v = Verdict("order", {"sigma_0": cfg["model"]["sigma_0"]}, False, float("nan"), 0, {"reason": str(exc)})
        else:
            kw = {"seed": seed}
            if name in cfg["check_instances"]:
                kw["instances"] = int(cfg["check_instances"][name])
            v = INSTANCE_CHECKS[name](**kw)
        v.params["seed"] = seed
        path = out / f"verdict_{name}_seed{seed}.json"
        v.write(path)
        log.info("seed %d: check %s %s (worst slack %s)", seed, name, "PASS" if v.passed else "FAIL", v.worst_slack)
        results.append((str(path), v.passed))
    return results


COMMANDS = {"gen": _gen, "train": _train, "useful": _useful, "spectrum": _spectrum, "verify": _verify}


def _run_seed(args):
    command, cfg, seed, out = args
    return COMMANDS[command](cfg, seed, Path(out))


def run(command: str, cfg: dict, out: Path) -> list:
    tasks = [(command, cfg, s, str(out)) for s in cfg["seeds"]]
    if cfg["jobs"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            return list(pool.map(_run_seed, tasks))
    return [_run_seed(t) for t in tasks]


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usefullab", description="Toy feature-learning experiments and checks.")
    parser.add_argument("--version", action="version", version=f"usefullab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{gen,train,useful,spectrum,verify}")
    helps = {
        "gen": "generate and save datasets",
        "train": "train GD or SAM and write traces and checkpoints",
        "useful": "run the cluster-and-upsample pipeline",
        "spectrum": "top Hessian eigenvalues of a saved checkpoint",
        "verify": "run theory checks and write verdict files",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", metavar="PATH", help="YAML config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, metavar="N", help="run only this seed")
        p.add_argument("--out", metavar="DIR", help="output directory (must exist)")
        p.add_argument("--jobs", type=int, metavar="N", help="seeds processed in parallel")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(f"--seed must be non-negative, got {args.seed}")
            cfg["seeds"] = [args.seed]
        if args.jobs is not None:
            cfg["jobs"] = args.jobs
        if args.out is not None:
            cfg["outputs"]["directory"] = args.out
        validate(cfg)
        out = Path(cfg["outputs"]["directory"])
        if not out.is_dir():
            raise ConfigError(f"output directory does not exist: {out} (create it or pass --out DIR)")
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory is not writable: {out}")
    except ConfigError as exc:
        print(f"usefullab: error: {exc}", file=sys.stderr)
        return 2

    try:
        results = run(args.command, cfg, out)
    except (DegenerateClustering, SeparationNotFound) as exc:
        print(f"usefullab: {args.command} failed: {exc}", file=sys.stderr)
        return 3
    except (TrainingError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"usefullab: {args.command} failed: {exc}", file=sys.stderr)
        return 3

    if args.command == "verify":
        flat = [r for per_seed in results for r in per_seed]
        for path, ok in flat:
            print(f"{'PASS' if ok else 'FAIL'} {path}")
        return 0 if all(ok for _, ok in flat) else 1
    for per_seed in results:
        for path in per_seed:
            print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
