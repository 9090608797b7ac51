"""Command-line entry point: ``ibnseg <train|eval|divergence|matrix|verify|gen-data>``.

Exit codes: 0 ok, 1 configuration or input error, 2 numeric divergence
during training, 3 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, RunConfig, format_config, load_config, parse_config, validate
from .data import export_dataset, gen_dataset, load_dataset, stack
from .divergence import divergence_profile
from .nn import load_checkpoint
from .training import TrainingDiverged, cross_modality_eval
from .verify import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "IBNSEG_OUT"

log = logging.getLogger("ibnseg")


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "ibnseg-out")) / command


def _out(args, command: str) -> Path:
    return Path(args.out) if args.out else default_out(command)


def _parse_assignments(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = _parse_assignments(getattr(args, "set", None))
    if overrides:
        cfg = parse_config(_merge_ini(format_config(cfg), overrides), "--set")
    if getattr(args, "policy", None):
        cfg = cfg.replace("model", policy=args.policy)
    if getattr(args, "lambda1", None) is not None:
        cfg = cfg.replace("loss", lambda1=args.lambda1)
    if getattr(args, "lambda2", None) is not None:
        cfg = cfg.replace("loss", lambda2=args.lambda2)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("train", seed=args.seed)
    return validate(cfg)


def _merge_ini(base: str, overrides: dict[str, dict[str, str]]) -> str:
    merged = configparser.ConfigParser(interpolation=None)
    merged.optionxform = str
    merged.read_string(base)
    for section, values in overrides.items():
        if not merged.has_section(section):
            merged.add_section(section)  # parse_config rejects it by name
        for k, v in values.items():
            merged.set(section, k, v)
    return "\n".join(f"[{s}]\n" + "\n".join(f"{k} = {v}" for k, v in merged.items(s)) for s in merged.sections())


def _dataset(spec: str, cfg: RunConfig) -> np.ndarray:
    """``A`` / ``B``: synthetic test split; ``DIR:A`` / ``DIR:B``: exported dataset."""
    path, sep, modality = spec.rpartition(":")
    if not sep:
        path, modality = "", spec
    modality = modality.upper()
    if modality not in ("A", "B"):
        raise ConfigError(f"dataset {spec!r}: modality must be A or B")
    if not path:
        return harness.test_split(cfg).images(modality)
    samples = load_dataset(path)
    if not samples:
        raise ConfigError(f"dataset {path} is empty")
    return stack(samples, modality)[0]


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "train")
    net, run_log = harness.train_from_config(cfg)
    harness.write_run(out, cfg, net, run_log)
    print(f"trained {cfg.model.policy} for {cfg.optim.total_iters} iterations; final loss "
          f"{run_log.losses[-1] if len(run_log.losses) else float('nan'):.6f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    try:
        net = load_checkpoint(args.checkpoint)
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from None
    if args.data:
        samples = load_dataset(args.data)
        images_a, masks = stack(samples, "A")
        res = cross_modality_eval(net, images_a, stack(samples, "B")[0], masks, cfg.data.train_modality)
    else:
        res = harness.cross_eval(cfg, net)
    text = harness.eval_csv(res)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_divergence(args) -> int:
    cfg = _config(args)
    try:
        net = load_checkpoint(args.checkpoint)
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from None
    images_a = _dataset(args.a, cfg)
    images_b = _dataset(args.b, cfg)
    probes = args.probes.split(",") if args.probes else None
    floor = cfg.report.floor if args.floor is None else args.floor
    if floor <= 0:
        raise ConfigError("--floor must be positive")
    try:
        report = divergence_profile(net, list(images_a), list(images_b), probes=probes, floor=floor,
                                    batch_size=cfg.report.batch_size,
                                    metadata={"modality_a": args.a, "modality_b": args.b,
                                              "samples_a": str(len(images_a)), "samples_b": str(len(images_b))})
    except KeyError as exc:
        raise ConfigError(f"probe mismatch: {exc.args[0]}") from None
    out = Path(args.out) if args.out else default_out("divergence") / "divergence.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    print(f"wrote {out} ({len(report.rows)} probes, mean divergence {report.mean_divergence():.6g})")
    return EXIT_OK


def _parse_lambdas(text: str) -> list[tuple[float, float]]:
    out = []
    for item in text.split(","):
        a, sep, b = item.strip().partition(":")
        if not sep:
            raise ConfigError(f"--lambdas expects l1:l2 pairs, got {item!r}")
        try:
            out.append((float(a), float(b)))
        except ValueError:
            raise ConfigError(f"--lambdas: bad number in {item!r}") from None
    return out


def _cell_dir(root: Path, cfg: RunConfig) -> Path:
    return root / "cells" / f"{cfg.model.policy}_l{cfg.loss.lambda1:g}_{cfg.loss.lambda2:g}_s{cfg.train.seed}"


def _run_matrix_cell(cfg: RunConfig, out: Path):
    try:
        return harness.run_cell(cfg, out), None
    except TrainingDiverged as exc:
        return None, (EXIT_DIVERGED, str(exc))
    except (ValueError, KeyError) as exc:
        return None, (EXIT_CONFIG, str(exc))


def cmd_matrix(args) -> int:
    base = _config(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    lambdas = _parse_lambdas(args.lambdas)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected integers, got {args.seeds!r}") from None
    if not (policies and lambdas and seeds):
        raise ConfigError("--policies, --lambdas and --seeds must be non-empty")
    cells = [harness.cell_config(base, p, lam, s) for p in policies for lam in lambdas for s in seeds]
    for cfg in cells:
        validate(cfg)
    root = _out(args, "matrix")
    root.mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_matrix_cell, cells, [_cell_dir(root, c) for c in cells]))
    else:
        results = [_run_matrix_cell(c, _cell_dir(root, c)) for c in cells]
    first_error = None
    num_classes = base.data.scene_spec().num_classes
    with open(root / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(harness.summary_header(num_classes))
        for cfg, (res, err) in zip(cells, results):
            if err is not None:
                print(f"cell {_cell_dir(root, cfg).name} failed: {err[1]}", file=sys.stderr)
                first_error = first_error or err
                continue
            writer.writerow(harness.summary_row(res))
    print(f"wrote {root / 'summary.csv'} ({len(cells)} cells)")
    return first_error[0] if first_error else EXIT_OK


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        for case in run_suite(name):
            print(case.line())
            failed += not case.passed
    print(f"{failed} failure(s)")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.n is not None and args.n < 1:
        raise ConfigError("--n must be at least 1")
    if args.split == "train":
        n, start = cfg.data.train_samples, 0
    else:
        n, start = cfg.data.test_samples, cfg.data.test_start
    n = args.n or n
    out = _out(args, "gen-data")
    export_dataset(gen_dataset(cfg.data.scene_spec(), n, cfg.data.seed, start), out)
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibnseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_flags=False):
        p.add_argument("--config", help="INI run configuration (defaults if omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--out", help=f"output location (default: ${OUT_ENV}/<command>)")
        if run_flags:
            p.add_argument("--policy")
            p.add_argument("--lambda1", type=float)
            p.add_argument("--lambda2", type=float)
            p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one model and write checkpoint + run logs")
    common(p, run_flags=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-modality mIoU of a checkpoint on the test split")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", help="exported dataset directory (default: synthetic test split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("divergence", help="per-probe feature divergence between two datasets")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--a", default="A", help="dataset for side A: A, B or DIR:A / DIR:B")
    p.add_argument("--b", default="B", help="dataset for side B")
    p.add_argument("--floor", type=float)
    p.add_argument("--probes", help="comma-separated probe names (default: all)")
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("matrix", help="policies x loss weights x seeds, one summary CSV")
    common(p)
    p.add_argument("--policies", default="PLAIN_BN,IBN_A,IBN_S")
    p.add_argument("--lambdas", default="1:0", help="comma-separated l1:l2 pairs")
    p.add_argument("--seeds", default="0")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("verify", help="run a self-check suite")
    p.add_argument("suite", choices=[*SUITES, "all"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="export a synthetic dataset")
    common(p)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
