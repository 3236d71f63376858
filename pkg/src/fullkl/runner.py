"""Experiment orchestration and CLI.

Subcommands: ``run`` (seeded multi-run experiment from a JSON config),
``compare`` (paired two-config comparison), ``verify`` (numerics
verification suite), ``gen-data`` (write a synthetic dataset as CSV).

Every output is a deterministic function of the config file: metrics CSVs
embed the canonical config JSON as a ``#``-prefixed header line, floats are
serialized losslessly via ``repr``, and line endings are fixed, so rerunning
a config reproduces byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data
from .grid import LabelGrid, make_grid
from .losses import FAMILY_FULL_KL, FAMILY_REFERENCE, LossSpec
from .model import (
    Metrics,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    derive_seeds,
    save_checkpoint,
    train_run,
)
from .verify import CheckResult, run_all_checks

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG_ERROR",
    "EXIT_FAILURE",
    "METRICS_COLUMNS",
    "ConfigError",
    "DatasetSpec",
    "RunConfig",
    "SeedOutcome",
    "ExperimentResult",
    "ComparisonResult",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "build_dataset",
    "run_experiment",
    "compare",
    "verify_suite",
    "main",
]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_FAILURE = 2

METRICS_COLUMNS = ("seed", "epoch", "split", "l_ld", "l_exp", "l_smooth", "total", "mae")
SUMMARY_METRICS = ("l_ld", "l_exp", "l_smooth", "total", "mae")


class ConfigError(Exception):
    """Invalid config file, CLI arguments, or input data (exit code 1)."""


# ---------------------------------------------------------------------------
# Config model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Dataset source: synthetic generator parameters or a CSV path."""

    kind: str
    n: int = 0
    d_in: int = 0
    sigma_range: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    path: str = ""

    def __post_init__(self):
        if self.kind == "synthetic":
            if self.n < 1 or self.d_in < 1:
                raise ValueError(f"synthetic dataset needs n >= 1 and d_in >= 1, got n={self.n!r}, d_in={self.d_in!r}")
            lo, hi = self.sigma_range
            object.__setattr__(self, "sigma_range", (float(lo), float(hi)))
        elif self.kind == "csv":
            if not self.path:
                raise ValueError("csv dataset requires a path")
        else:
            raise ValueError(f"dataset type must be 'synthetic' or 'csv', got {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    """Full experimental protocol: data source, grid, training, seeds, outputs."""

    dataset: DatasetSpec
    grid: LabelGrid
    train: TrainConfig
    seeds: tuple[int, ...]
    out_dir: Path

    def __post_init__(self):
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"seeds must be unique, got {seeds}")
        if self.grid.spacing is None:
            raise ValueError("experiments require a uniform grid")
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "out_dir", Path(self.out_dir))


def _check_keys(section, where: str, required: set, optional: set = frozenset()):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = set(section) - required - optional
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"{where}: missing key(s) {sorted(missing)}")


def config_from_dict(raw) -> RunConfig:
    """Build a validated RunConfig from the JSON structure (strict keys)."""
    _check_keys(raw, "config", {"dataset", "grid", "loss", "train", "seeds", "out_dir"})
    try:
        ds_raw = raw["dataset"]
        if not isinstance(ds_raw, dict) or "type" not in ds_raw:
            raise ConfigError("dataset: expected an object with a 'type' key")
        if ds_raw.get("type") == "synthetic":
            _check_keys(ds_raw, "dataset", {"type", "n", "d_in", "sigma_range", "seed"})
            sr = ds_raw["sigma_range"]
            if not (isinstance(sr, (list, tuple)) and len(sr) == 2):
                raise ConfigError("dataset.sigma_range: expected [lo, hi]")
            dataset = DatasetSpec(
                "synthetic",
                n=int(ds_raw["n"]),
                d_in=int(ds_raw["d_in"]),
                sigma_range=(float(sr[0]), float(sr[1])),
                seed=int(ds_raw["seed"]),
            )
        else:
            _check_keys(ds_raw, "dataset", {"type", "path"})
            dataset = DatasetSpec(ds_raw["type"], path=str(ds_raw["path"]))

        _check_keys(raw["grid"], "grid", {"start", "stop", "step"})
        grid = make_grid(float(raw["grid"]["start"]), float(raw["grid"]["stop"]), float(raw["grid"]["step"]))

        _check_keys(raw["loss"], "loss", {"family"}, {"lambda"})
        lam = raw["loss"].get("lambda")
        spec = LossSpec(str(raw["loss"]["family"]), None if lam is None else float(lam))

        train_raw = raw["train"]
        _check_keys(
            train_raw, "train", set(),
            {"epochs", "batch_size", "lr", "lr_decay_factor", "lr_decay_every", "hidden", "val_fraction"},
        )
        kwargs = {k: train_raw[k] for k in ("epochs", "batch_size", "lr_decay_every") if k in train_raw}
        kwargs = {k: int(v) for k, v in kwargs.items()}
        for k in ("lr", "lr_decay_factor", "val_fraction"):
            if k in train_raw:
                kwargs[k] = float(train_raw[k])
        if "hidden" in train_raw:
            kwargs["hidden"] = tuple(int(h) for h in train_raw["hidden"])
        train = TrainConfig(loss=spec, **kwargs)

        seeds = raw["seeds"]
        if not isinstance(seeds, list):
            raise ConfigError("seeds: expected a list of integers")
        return RunConfig(dataset, grid, train, tuple(int(s) for s in seeds), Path(str(raw["out_dir"])))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: RunConfig) -> dict:
    """Canonical, fully explicit JSON structure; inverse of config_from_dict."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        dataset = {
            "type": "synthetic", "n": ds.n, "d_in": ds.d_in,
            "sigma_range": [ds.sigma_range[0], ds.sigma_range[1]], "seed": ds.seed,
        }
    else:
        dataset = {"type": "csv", "path": ds.path}
    loss = {"family": cfg.train.loss.family}
    if cfg.train.loss.family == FAMILY_REFERENCE:
        loss["lambda"] = cfg.train.loss.lam
    t = cfg.train
    return {
        "dataset": dataset,
        "grid": {"start": cfg.grid.lo, "stop": cfg.grid.hi, "step": cfg.grid.spacing},
        "loss": loss,
        "train": {
            "epochs": t.epochs, "batch_size": t.batch_size, "lr": t.lr,
            "lr_decay_factor": t.lr_decay_factor, "lr_decay_every": t.lr_decay_every,
            "hidden": list(t.hidden), "val_fraction": t.val_fraction,
        },
        "seeds": list(cfg.seeds),
        "out_dir": str(cfg.out_dir),
    }


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(raw)


def build_dataset(spec: DatasetSpec, grid: LabelGrid) -> data.Dataset:
    """Materialize the configured dataset (generator or CSV load)."""
    try:
        if spec.kind == "synthetic":
            return data.gen_synthetic(spec.n, spec.d_in, grid, spec.sigma_range, spec.seed)
        return data.load_csv(spec.path, grid)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"cannot build dataset: {exc}") from exc


# ---------------------------------------------------------------------------
# Experiment runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedOutcome:
    """Result of one seeded run: a TrainResult, or the divergence message."""

    seed: int
    result: TrainResult | None
    error: str | None


@dataclass(frozen=True)
class ExperimentResult:
    config: RunConfig
    outcomes: tuple[SeedOutcome, ...]
    metrics_paths: tuple[Path, ...]
    checkpoint_paths: tuple[Path, ...]
    summary_path: Path | None

    @property
    def failed_seeds(self) -> tuple[int, ...]:
        return tuple(o.seed for o in self.outcomes if o.error is not None)


def _fmt(x) -> str:
    """Lossless, deterministic float-to-text (shortest round-trip repr)."""
    return repr(float(x))


def _metric_value(m: Metrics, name: str):
    if name == "mae":
        return m.mae
    return getattr(m.breakdown, name)


def _write_metrics_csv(path: Path, header_json: str, seed: int, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header_json}\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for m in history:
            b = m.breakdown
            smooth = "" if b.l_smooth is None else _fmt(b.l_smooth)
            fh.write(",".join([
                str(seed), str(m.epoch), m.split,
                _fmt(b.l_ld), _fmt(b.l_exp), smooth, _fmt(b.total), _fmt(m.mae),
            ]) + "\n")


def _write_summary_csv(path: Path, header_json: str, outcomes, epochs: int) -> None:
    """One row per epoch; across-seed mean/std of every metric for both splits."""
    oks = [o.result for o in outcomes if o.result is not None]
    columns = ["epoch"]
    for split_tag in ("train", "val"):
        for name in SUMMARY_METRICS:
            columns += [f"{split_tag}_{name}_mean", f"{split_tag}_{name}_std"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header_json}\n")
        fh.write(",".join(columns) + "\n")
        for e in range(epochs):
            row = [str(e + 1)]
            for offset, split_tag in ((0, "train"), (1, "val")):
                metrics = [r.history[2 * e + offset] for r in oks]
                assert all(m.epoch == e + 1 and m.split == split_tag for m in metrics)
                for name in SUMMARY_METRICS:
                    vals = [_metric_value(m, name) for m in metrics]
                    if any(v is None for v in vals):
                        row += ["", ""]
                    else:
                        arr = np.array(vals, dtype=np.float64)
                        row += [_fmt(arr.mean()), _fmt(arr.std())]
            fh.write(",".join(row) + "\n")


def run_experiment(cfg: RunConfig, quiet: bool = False) -> ExperimentResult:
    """Train one run per seed; write per-seed metrics CSVs, checkpoints, and a summary.

    A diverged seed is recorded (and reported) without aborting the others;
    the summary then covers the surviving seeds.
    """
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from exc
    full = build_dataset(cfg.dataset, cfg.grid)
    header_json = json.dumps(config_to_dict(cfg), sort_keys=True)
    outcomes: list[SeedOutcome] = []
    metrics_paths: list[Path] = []
    checkpoint_paths: list[Path] = []
    for seed in cfg.seeds:
        tcfg = replace(cfg.train, seed=seed)
        split_seed, _, _ = derive_seeds(seed)
        train_ds, val_ds = data.split(full, tcfg.val_fraction, split_seed)
        try:
            result = train_run(train_ds, val_ds, cfg.grid, tcfg, quiet=quiet)
        except TrainingDivergedError as exc:
            log.error("seed %d diverged: %s", seed, exc)
            outcomes.append(SeedOutcome(seed, None, str(exc)))
            continue
        mpath = out / f"metrics_seed{seed}.csv"
        _write_metrics_csv(mpath, header_json, seed, result.history)
        cpath = out / f"model_seed{seed}.ckpt"
        save_checkpoint(result.params, cpath)
        metrics_paths.append(mpath)
        checkpoint_paths.append(cpath)
        outcomes.append(SeedOutcome(seed, result, None))
        if not quiet:
            log.info("seed %d done: final val MAE %.4f", seed, _final_val_mae(result))
    summary_path = None
    if any(o.result is not None for o in outcomes):
        summary_path = out / "summary.csv"
        _write_summary_csv(summary_path, header_json, outcomes, cfg.train.epochs)
    return ExperimentResult(
        cfg, tuple(outcomes), tuple(metrics_paths), tuple(checkpoint_paths), summary_path
    )


def _final_val_mae(result: TrainResult) -> float:
    for m in reversed(result.history):
        if m.split == "val":
            return m.mae
    raise ValueError("history contains no validation metrics")


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonResult:
    """Paired per-seed final-epoch validation MAE for two configs."""

    result_a: ExperimentResult
    result_b: ExperimentResult
    seeds: tuple[int, ...]
    mae_a: tuple[float, ...]
    mae_b: tuple[float, ...]
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    rel_diff: float
    text: str
    csv_path: Path
    txt_path: Path


def compare(
    cfg_a: RunConfig,
    cfg_b: RunConfig,
    out_dir=None,
    quiet: bool = False,
) -> ComparisonResult:
    """Run both configs and pair their final-epoch validation MAEs per seed.

    Both configs must share the dataset, grid, and seed list (the paired
    protocol); the relative difference is (mean_a - mean_b) / mean_b, i.e.
    the second config is the baseline.  Writes ``comparison.csv`` and
    ``comparison.txt`` to ``out_dir`` (default: cfg_a's output directory).
    """
    da, db = config_to_dict(cfg_a), config_to_dict(cfg_b)
    for key in ("dataset", "grid", "seeds"):
        if da[key] != db[key]:
            raise ConfigError(f"compare requires identical {key!r} sections, got {da[key]} vs {db[key]}")
    res_a = run_experiment(cfg_a, quiet=quiet)
    res_b = run_experiment(cfg_b, quiet=quiet)
    bad = sorted(set(res_a.failed_seeds) | set(res_b.failed_seeds))
    if bad:
        raise TrainingDivergedError(f"cannot compare: seed(s) {bad} diverged")
    by_seed_a = {o.seed: o.result for o in res_a.outcomes}
    by_seed_b = {o.seed: o.result for o in res_b.outcomes}
    seeds = cfg_a.seeds
    mae_a = tuple(_final_val_mae(by_seed_a[s]) for s in seeds)
    mae_b = tuple(_final_val_mae(by_seed_b[s]) for s in seeds)
    arr_a, arr_b = np.array(mae_a), np.array(mae_b)
    mean_a, std_a = float(arr_a.mean()), float(arr_a.std())
    mean_b, std_b = float(arr_b.mean()), float(arr_b.std())
    if mean_a == mean_b:
        rel = 0.0
    elif mean_b != 0.0:
        rel = (mean_a - mean_b) / mean_b
    else:
        rel = float("inf")

    fam_a, fam_b = cfg_a.train.loss.family, cfg_b.train.loss.family
    lines = [
        "paired final-epoch validation MAE",
        f"config a: {fam_a} ({cfg_a.out_dir})",
        f"config b: {fam_b} ({cfg_b.out_dir})  [baseline]",
        "",
        f"{'seed':>6}  {'mae_a':>12}  {'mae_b':>12}  {'a - b':>12}",
    ]
    for s, xa, xb in zip(seeds, mae_a, mae_b):
        lines.append(f"{s:>6}  {xa:>12.6f}  {xb:>12.6f}  {xa - xb:>12.6f}")
    lines += [
        "",
        f"a: {mean_a:.6f} +/- {std_a:.6f}",
        f"b: {mean_b:.6f} +/- {std_b:.6f}",
        f"relative difference (a vs b): {rel:.6f}",
    ]
    text = "\n".join(lines) + "\n"

    out = Path(out_dir) if out_dir is not None else Path(cfg_a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "comparison.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# a: {json.dumps(da, sort_keys=True)}\n")
        fh.write(f"# b: {json.dumps(db, sort_keys=True)}\n")
        fh.write("seed,mae_a,mae_b\n")
        for s, xa, xb in zip(seeds, mae_a, mae_b):
            fh.write(f"{s},{_fmt(xa)},{_fmt(xb)}\n")
    txt_path = out / "comparison.txt"
    with open(txt_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return ComparisonResult(
        res_a, res_b, seeds, mae_a, mae_b,
        mean_a, std_a, mean_b, std_b, rel, text, csv_path, txt_path,
    )


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------

def verify_suite(print_fn=print) -> tuple[CheckResult, ...]:
    """Run all numeric checks, print one PASS/FAIL line each, return results."""
    results = run_all_checks()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print_fn(f"{status}  {r.name:<24}  max_error={r.max_error:.3e}  ({r.detail})")
    n_ok = sum(r.passed for r in results)
    print_fn(f"verification: {n_ok}/{len(results)} checks passed")
    return tuple(results)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

class _ArgumentParser(argparse.ArgumentParser):
    """argparse that exits with the config-error code on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG_ERROR, f"{self.prog}: error: {message}\n")


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"--seeds: expected a comma-separated integer list, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds: expected at least one seed")
    return seeds


def _apply_overrides(cfg: RunConfig, args, out_dir=None) -> RunConfig:
    if getattr(args, "seeds", None) is not None:
        cfg = replace(cfg, seeds=_parse_seeds(args.seeds))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=Path(out_dir))
    return cfg


def _add_common_flags(parser, with_out_dir=True, with_seeds=True):
    if with_out_dir:
        parser.add_argument("--out-dir", help="override the config's output directory")
    if with_seeds:
        parser.add_argument("--seeds", help="override the config's seed list (comma-separated)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress logging")


def _build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="fullkl",
        description="Hyperparameter-free full-KL label-distribution losses: experiments and verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a seeded experiment from a JSON config")
    p.add_argument("config", help="path to a run config (JSON)")
    _add_common_flags(p)

    p = sub.add_parser("compare", help="run two configs on the shared protocol and compare final MAE")
    p.add_argument("config_a", help="first run config (JSON)")
    p.add_argument("config_b", help="second run config (JSON; the baseline)")
    _add_common_flags(p)

    p = sub.add_parser("verify", help="run the numerics verification suite")
    _add_common_flags(p, with_out_dir=False, with_seeds=False)

    p = sub.add_parser("gen-data", help="generate the configured dataset and write it as CSV")
    p.add_argument("config", help="run config (JSON); only dataset and grid sections are used")
    p.add_argument("out_csv", help="output CSV path")
    _add_common_flags(p, with_out_dir=False, with_seeds=False)
    return parser


def _cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args, out_dir=args.out_dir)
    result = run_experiment(cfg, quiet=args.quiet)
    for o in result.outcomes:
        if o.error is not None:
            print(f"seed {o.seed}: FAILED ({o.error})")
        else:
            print(f"seed {o.seed}: final val MAE {_final_val_mae(o.result):.6f}")
    if result.summary_path is not None:
        print(f"summary: {result.summary_path}")
    return EXIT_FAILURE if result.failed_seeds else EXIT_OK


def _cmd_compare(args) -> int:
    cfg_a = load_config(args.config_a)
    cfg_b = load_config(args.config_b)
    out_dir = None
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
        cfg_a = replace(cfg_a, out_dir=out_dir / "a")
        cfg_b = replace(cfg_b, out_dir=out_dir / "b")
    cfg_a = _apply_overrides(cfg_a, args)
    cfg_b = _apply_overrides(cfg_b, args)
    result = compare(cfg_a, cfg_b, out_dir=out_dir, quiet=args.quiet)
    print(result.text, end="")
    print(f"report: {result.txt_path}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = verify_suite()
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    ds = build_dataset(cfg.dataset, cfg.grid)
    try:
        data.save_csv(ds, args.out_csv)
    except OSError as exc:
        raise ConfigError(f"cannot write {args.out_csv}: {exc}") from exc
    print(f"wrote {len(ds)} samples to {args.out_csv}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(message)s",
        force=True,
    )
    handlers = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "verify": _cmd_verify,
        "gen-data": _cmd_gen_data,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except TrainingDivergedError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
