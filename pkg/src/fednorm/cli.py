"""Declarative experiment runner: JSON config in, per-seed artifact directories out.

Subcommands: ``run``, ``partition``, ``analyze``, ``plot-data`` and ``pfl``.
Exit codes are 0 (ok), 1 (configuration error) and 2 (runtime error).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as D
from .diagnostics import FactorReport, NormReport, factor_report, write_matrix_csv
from .engine import Algorithm, FLConfig, default_snapshot_rounds, metrics_jsonl, run_federated
from .errors import ConfigError
from .model import load_checkpoint, save_checkpoint
from .pfl import pfl_evaluate, write_pfl_csv

log = logging.getLogger("fednorm")

OUT_ENV = "FEDNORM_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
MU_GRID = (0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2)
PLOT_KINDS = ("norm-curves", "heatmaps", "mu-sweep")


class ArtifactError(FileNotFoundError):
    """A run artifact needed by a later stage is missing."""


# ------------------------------------------------------------------- config

@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 16
    n_per_class: int = 100
    n_test_per_class: int = 100
    class_separation: float = 5.0
    noise_scale: float = 1.0
    train_path: str | None = None
    test_path: str | None = None
    seed: int | None = None  # None: follow the run seed


@dataclass
class PartitionSpec:
    strategy: str = "iid"
    s: int | None = None
    alpha: float | None = None
    min_per_client: int = 0
    seed: int | None = None


@dataclass
class ModelSpec:
    layer_sizes: list[int] = field(default_factory=lambda: [32, 16])


@dataclass
class TrainSpec:
    num_clients: int = 20
    fraction: float = 0.25
    rounds: int = 64
    local_epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    algorithm: str = "fedavg"
    mu: float = 0.0
    tau: float = 1.0


@dataclass
class DiagnosticsSpec:
    snapshot_every: int | None = None  # None: rounds // 16
    final_rounds: int = 0  # also snapshot each of the last k rounds
    factors: bool = True
    checkpoints: bool = True


@dataclass
class PFLSpec:
    epochs: int = 5
    lr_grid: list[float] | None = None  # None: lr, lr/10, lr/100
    unfreeze: bool = True
    batch_size: int | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    fl: TrainSpec = field(default_factory=TrainSpec)
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)
    pfl: PFLSpec | None = None
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    mu_sweep: list[float] | None = None
    base_dir: str = field(default=".", compare=False, repr=False)

    # ------------------------------------------------------------ conversion
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        sections = {"dataset": DatasetSpec, "partition": PartitionSpec, "model": ModelSpec,
                    "fl": TrainSpec, "diagnostics": DiagnosticsSpec, "pfl": PFLSpec}
        _reject_unknown(d, {f.name for f in dataclasses.fields(cls)} - {"base_dir"}, "config")
        kw: dict[str, Any] = {}
        for key, value in d.items():
            if key in sections:
                if value is None and key == "pfl":
                    kw[key] = None
                    continue
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                spec = sections[key]
                _reject_unknown(value, {f.name for f in dataclasses.fields(spec)}, key)
                kw[key] = spec(**value)
            else:
                kw[key] = value
        cfg = cls(**kw, base_dir=base_dir)
        cfg.validate()
        return cfg

    def for_seed(self, seed: int, mu: float | None = None) -> "ExperimentConfig":
        """Self-contained copy for one seed: absolute dataset paths, no sweep."""
        ds = self.dataset
        if ds.kind == "file":
            ds = dataclasses.replace(ds, train_path=str(self.resolve(ds.train_path).resolve()),
                                     test_path=str(self.resolve(ds.test_path).resolve()))
        fl = self.fl if mu is None else dataclasses.replace(self.fl, mu=mu)
        return dataclasses.replace(self, dataset=ds, fl=fl, seeds=[seed], mu_sweep=None)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # ------------------------------------------------------------ validation
    def fl_config(self, seed: int, mu: float | None = None) -> FLConfig:
        f = self.fl
        return FLConfig(num_clients=f.num_clients, fraction=f.fraction, rounds=f.rounds,
                        local_epochs=f.local_epochs, batch_size=f.batch_size, lr=f.lr,
                        algorithm=f.algorithm, mu=f.mu if mu is None else mu, tau=f.tau,
                        seed=seed, layer_sizes=tuple(self.model.layer_sizes))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        """Check every component invariant that can be checked without training."""
        if not isinstance(self.seeds, list) or not self.seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        try:
            Algorithm(self.fl.algorithm)
        except ValueError:
            raise ConfigError(f"unknown algorithm {self.fl.algorithm!r}") from None
        if not self.model.layer_sizes or any(int(v) < 1 for v in self.model.layer_sizes):
            raise ConfigError("layer_sizes must be positive")
        cfg = self.fl_config(self.seeds[0])
        head, _, _ = cfg.specs()
        if head.kind.value == "frozen_orthonormal" and self.model.layer_sizes[-1] < self._num_classes():
            raise ConfigError("frozen orthonormal head needs feature dimension >= number of classes")
        d = self.diagnostics
        if d.snapshot_every is not None and d.snapshot_every < 1:
            raise ConfigError("snapshot_every must be positive")
        if d.final_rounds < 0:
            raise ConfigError("final_rounds must be non-negative")
        if self.pfl is not None:
            if self.pfl.epochs < 1:
                raise ConfigError("pfl epochs must be positive")
            if self.pfl.lr_grid is not None and (not self.pfl.lr_grid or min(self.pfl.lr_grid) < 0):
                raise ConfigError("pfl lr_grid must be a non-empty list of non-negative rates")
        if self.mu_sweep is not None:
            if not self.mu_sweep or min(self.mu_sweep) < 0:
                raise ConfigError("mu_sweep must be a non-empty list of non-negative values")
            for mu in self.mu_sweep:
                self.fl_config(self.seeds[0], mu)
        self._validate_data()

    def _num_classes(self) -> int:
        return self.dataset.num_classes if self.dataset.kind == "synthetic" else self._train_labels().num_classes

    def _train_labels(self) -> D.Dataset:
        ds = self.dataset
        if ds.kind == "synthetic":
            y = np.repeat(np.arange(ds.num_classes), ds.n_per_class)
            return D.Dataset(np.zeros((len(y), 1)), y, ds.num_classes)
        return self.load_data(0)[0]

    def _validate_data(self) -> None:
        ds, p = self.dataset, self.partition
        if ds.kind == "synthetic":
            for name in ("num_classes", "dim", "n_per_class", "n_test_per_class"):
                if getattr(ds, name) < 1:
                    raise ConfigError(f"dataset {name} must be positive")
            if ds.class_separation <= 0 or ds.noise_scale <= 0:
                raise ConfigError("class_separation and noise_scale must be positive")
        elif ds.kind == "file":
            for name in ("train_path", "test_path"):
                path = getattr(ds, name)
                if not path:
                    raise ConfigError(f"file dataset needs {name}")
                if not self.resolve(path).is_file():
                    raise ConfigError(f"dataset file not found: {self.resolve(path)}")
        else:
            raise ConfigError(f"unknown dataset kind {ds.kind!r}")
        if p.strategy == "sharding" and p.s is None:
            raise ConfigError("sharding partition needs s")
        if p.strategy == "lda" and p.alpha is None:
            raise ConfigError("lda partition needs alpha")
        labels = self._train_labels()
        # partitioning is cheap; dry-running it surfaces divisibility and feasibility errors
        self.make_partition(labels, self.seeds[0])

    # ------------------------------------------------------------ materialize
    def load_data(self, seed: int) -> tuple[D.Dataset, D.Dataset]:
        ds = self.dataset
        if ds.kind == "file":
            return D.load_dataset_binary(self.resolve(ds.train_path)), D.load_dataset_binary(self.resolve(ds.test_path))
        s = seed if ds.seed is None else ds.seed
        train = D.gen_synthetic(ds.num_classes, ds.dim, ds.n_per_class, ds.class_separation, ds.noise_scale, s)
        test = D.gen_synthetic(ds.num_classes, ds.dim, ds.n_test_per_class, ds.class_separation,
                               ds.noise_scale, s, split="test")
        return train, test

    def make_partition(self, train: D.Dataset, seed: int) -> D.Partition:
        p = self.partition
        kw = {"s": p.s, "alpha": p.alpha, "min_per_client": p.min_per_client}
        return D.make_partition(train, p.strategy, self.fl.num_clients, seed if p.seed is None else p.seed,
                                **{k: v for k, v in kw.items() if v is not None})

    def snapshot_rounds(self) -> list[int]:
        r = self.fl.rounds
        picks = set(default_snapshot_rounds(r, self.diagnostics.snapshot_every))
        picks.update(range(max(0, r - self.diagnostics.final_rounds), r))
        return sorted(picks)


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_config(path) -> ExperimentConfig:
    """Read and fully validate a JSON experiment config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return ExperimentConfig.from_dict(raw, base_dir=str(path.parent))
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------- run

def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def _pfl_grid(config: ExperimentConfig, lr: float) -> list[float]:
    if config.pfl is not None and config.pfl.lr_grid is not None:
        return list(config.pfl.lr_grid)
    return [lr, lr * 0.1, lr * 0.01]


def run_seed(config: ExperimentConfig, seed: int, out: Path, mu: float | None = None) -> dict:
    """Train one seed and write its artifacts; errors are caught and reported."""
    sdir = _seed_dir(out, seed)
    sdir.mkdir(parents=True, exist_ok=True)
    try:
        train, test = config.load_data(seed)
        part = config.make_partition(train, seed)
        part.save(sdir / "partition.json")
        fl = config.fl_config(seed, mu)
        (sdir / "config.json").write_text(config.for_seed(seed, mu).dumps())
        snaps = config.snapshot_rounds()
        ckpt_dir = sdir / "checkpoints"
        _, loss_spec, _ = fl.specs()
        if config.diagnostics.checkpoints:
            ckpt_dir.mkdir(exist_ok=True)

        def on_round(metrics, result):
            if config.diagnostics.checkpoints and metrics.round in snaps:
                name = f"round_{metrics.round:04d}.json"
                save_checkpoint(ckpt_dir / name, result.model, loss_spec, seed)
                metrics.snapshot = f"checkpoints/{name}"

        result = run_federated(fl, train, test, part, snapshot_rounds=snaps,
                               factor_snapshots=config.diagnostics.factors, on_round=on_round)
        (sdir / "metrics.jsonl").write_text(metrics_jsonl(result.metrics))
        if config.diagnostics.checkpoints:
            save_checkpoint(ckpt_dir / "initial.json", result.initial_model, loss_spec, seed)
            save_checkpoint(ckpt_dir / "final.json", result.model, loss_spec, seed)
        _write_json(sdir / "norm_reports.json", [r.to_dict() for r in result.norm_snapshots.values()])
        _write_json(sdir / "factor_reports.json", [r.to_dict() for r in result.factor_snapshots.values()])
        if config.pfl is not None:
            _run_pfl(config, result.model, part, train, test, seed, fl, sdir)
        return {"seed": seed, "final_accuracy": result.final_accuracy, "error": None}
    except Exception as exc:  # any component error aborts only this seed
        log.error("seed %d failed: %s", seed, exc)
        (sdir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        return {"seed": seed, "final_accuracy": None, "error": f"{type(exc).__name__}: {exc}"}


def _run_pfl(config, model, part, train, test, seed, fl: FLConfig, sdir: Path) -> None:
    spec = config.pfl or PFLSpec()
    _, loss_spec, _ = fl.specs()
    rep = pfl_evaluate(model, part, train, test, spec.epochs, _pfl_grid(config, fl.lr), seed, spec.unfreeze,
                       spec.batch_size or fl.batch_size, loss_spec)
    _write_json(sdir / "pfl.json", rep.to_dict())
    rows = [(fl.algorithm.value, r) for r in rep.results] + [(f"{fl.algorithm.value}-global", rep.global_personal)]
    write_pfl_csv(rows, sdir / "pfl.csv")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


def summarize(results: Sequence[dict], mu: float | None = None) -> dict:
    finals = {str(r["seed"]): r["final_accuracy"] for r in results if r["error"] is None}
    vals = np.array(list(finals.values()), dtype=np.float64)
    out = {"seeds": [r["seed"] for r in results], "final_accuracy": finals,
           "mean": float(vals.mean()) if vals.size else None,
           "std": float(vals.std()) if vals.size else None,
           "errors": {str(r["seed"]): r["error"] for r in results if r["error"] is not None}}
    if mu is not None:
        out["mu"] = mu
    return out


def _run_one(args) -> dict:
    config, seed, out, mu = args
    return run_seed(config, seed, out, mu)


def run_experiment(config: ExperimentConfig, out: Path | None = None, parallel: int = 1) -> int:
    """Run every seed (and every swept mu); returns the process exit status."""
    out = Path(out or config.output_dir)
    jobs = []
    if config.mu_sweep is None:
        jobs.append((out, None))
    else:
        jobs += [(out / f"mu_{mu!r}", float(mu)) for mu in config.mu_sweep]
    ok = True
    for target, mu in jobs:
        target.mkdir(parents=True, exist_ok=True)
        tasks = [(config, s, target, mu) for s in config.seeds]
        if parallel > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(min(parallel, len(tasks))) as pool:
                results = list(pool.map(_run_one, tasks))
        else:
            results = [_run_one(t) for t in tasks]
        summary = summarize(results, mu)
        _write_json(target / "summary.json", summary)
        ok &= not summary["errors"]
        log.info("%s: mean final accuracy %s", target, summary["mean"])
    return EXIT_OK if ok else EXIT_RUNTIME


# ------------------------------------------------------------------ reports

def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    return path


def _seed_dirs(run_dir: Path) -> list[Path]:
    dirs = sorted(p for p in run_dir.glob("seed_*") if p.is_dir())
    return dirs or [run_dir]


def _norm_curve_rows(reports: list[NormReport]) -> list[tuple[int, str, float | None]]:
    rows = []
    for rep in reports:
        for name, value in rep.series().items():
            rows.append((rep.round, name, value))
    return rows


def emit_plot_data(run_dir, kind: str) -> list[Path]:
    """Long-format CSVs behind the figures; returns the files written."""
    run_dir = Path(run_dir)
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    _require(run_dir)
    written = []
    if kind == "mu-sweep":
        rows = []
        for sub in sorted(run_dir.glob("mu_*")):
            summary = json.loads(_require(sub / "summary.json").read_text())
            rows.append((summary["mu"], summary["mean"]))
        if not rows:
            raise ArtifactError(f"missing artifact: {run_dir}/mu_*/summary.json")
        path = run_dir / "mu_sweep.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu", "accuracy"])
            for mu, acc in sorted(rows):
                w.writerow([repr(mu), "" if acc is None else repr(acc)])
        return [path]
    for sdir in _seed_dirs(run_dir):
        plots = sdir / "plots"
        plots.mkdir(exist_ok=True)
        if kind == "norm-curves":
            raw = json.loads(_require(sdir / "norm_reports.json").read_text())
            path = plots / "norm_curves.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["round", "series", "value"])
                for r, name, value in _norm_curve_rows([NormReport.from_dict(d) for d in raw]):
                    w.writerow([r, name, "" if value is None else repr(value)])
            written.append(path)
        else:
            raw = json.loads(_require(sdir / "factor_reports.json").read_text())
            for d in raw:
                rep = FactorReport.from_dict(d)
                for name in ("weight_similarity", "inter_class_similarity"):
                    path = plots / f"{name}_round_{rep.round:04d}.csv"
                    write_matrix_csv(getattr(rep, name), path)
                    written.append(path)
    return written


def analyze(run_dir) -> list[Path]:
    """Recompute global factor reports from every saved checkpoint of every seed."""
    written = []
    for sdir in _seed_dirs(Path(run_dir)):
        config = ExperimentConfig.from_dict(json.loads(_require(sdir / "config.json").read_text()))
        seed = int(sdir.name.split("_")[-1]) if sdir.name.startswith("seed_") else config.seeds[0]
        _, test = config.load_data(seed)
        ckpts = sorted(_require(sdir / "checkpoints").glob("round_*.json"))
        if not ckpts:
            raise ArtifactError(f"missing artifact: {sdir / 'checkpoints'}/round_*.json")
        reports = []
        for path in ckpts:
            model, _, _ = load_checkpoint(path)
            reports.append(factor_report(model, test, round=int(path.stem.split("_")[-1])).to_dict())
        out = sdir / "analysis.json"
        _write_json(out, reports)
        written.append(out)
    return written


def pfl_from_run(config: ExperimentConfig, run_dir) -> int:
    """Personalize the final checkpoint of every seed in an existing run."""
    run_dir = Path(run_dir)
    for seed in config.seeds:
        sdir = _seed_dir(run_dir, seed)
        model, _, _ = load_checkpoint(_require(sdir / "checkpoints" / "final.json"))
        train, test = config.load_data(seed)
        part = D.Partition.load(_require(sdir / "partition.json"))
        _run_pfl(config, model, part, train, test, seed, config.fl_config(seed), sdir)
    return EXIT_OK


def export_partitions(config: ExperimentConfig, out: Path) -> int:
    for seed in config.seeds:
        sdir = _seed_dir(out, seed)
        sdir.mkdir(parents=True, exist_ok=True)
        train, test = config.load_data(seed)
        config.make_partition(train, seed).save(sdir / "partition.json")
        D.save_dataset_binary(train, sdir / "train.bin")
        D.save_dataset_binary(test, sdir / "test.bin")
    return EXIT_OK


# ---------------------------------------------------------------------- main

def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects a comma-separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednorm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("run", "train every seed and write artifacts"),
                           ("partition", "export partitions and datasets only"),
                           ("analyze", "recompute factor reports from checkpoints"),
                           ("plot-data", "emit long-format CSVs for plotting"),
                           ("pfl", "fine-tune the final models per client")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, required=name in ("run", "partition", "pfl"))
        p.add_argument("--seeds", type=str, help="comma-separated seed list overriding the config")
        p.add_argument("--out", type=Path, help=f"output directory (overrides ${OUT_ENV} and the config)")
        p.add_argument("--parallel", type=int, nargs="?", const=os.cpu_count() or 1, default=1,
                       help="run seeds in parallel worker processes")
        if name == "plot-data":
            p.add_argument("--kind", choices=PLOT_KINDS, required=True)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _out_dir(args, config: ExperimentConfig | None) -> Path:
    if args.out is not None:
        return args.out
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if config is None:
        raise ConfigError("no run directory: pass --out or --config")
    return Path(config.output_dir)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = parse_config(args.config) if args.config is not None else None
        if config is not None and args.seeds:
            config.seeds = _parse_seeds(args.seeds)
            config.validate()
        out = _out_dir(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return run_experiment(config, out, args.parallel)
        if args.command == "partition":
            return export_partitions(config, out)
        if args.command == "pfl":
            return pfl_from_run(config, out)
        if args.command == "analyze":
            for path in analyze(out):
                print(path)
            return EXIT_OK
        for path in emit_plot_data(out, args.kind):
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
