"""Training sweeps over regularizer weights, modes and seeds; the parent process writes every result file"""

import itertools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from consistent_evidence.core.constraints import ConstraintSpec, load_spec
from consistent_evidence.core.losses import RegMode
from consistent_evidence.core.synthdata import Dataset, GenConfig, generate, load_dataset
from consistent_evidence.core.trainer import TrainConfig, evaluate, train
from consistent_evidence.utiles import data, utiles
from consistent_evidence.utiles.utiles import ConfigError

logger = logging.getLogger(__name__)

TASK_ONLY = "task-only"

SLICES = ("omega1", "omega2", "diagonal", "grid")

DEFAULT_VALUES = (0.0, 1.0, 3.0, 10.0, 30.0)

METRIC_COLUMNS = ("r1", "r2", "acc_y", "auc_y", "acc_z")  # acc_z: mean over evidence labels


def runs_header(num_evidence: int) -> tuple[str, ...]:
    return (
        "omega1",
        "omega2",
        "mode",
        "seed",
        *METRIC_COLUMNS,
        *(f"acc_z{k}" for k in range(num_evidence)),
    )


def slice_points(kind: str, values: Iterable[float]) -> list[tuple[float, float]]:
    values = [float(v) for v in values]
    if kind == "omega1":
        return [(v, 0.0) for v in values]
    if kind == "omega2":
        return [(0.0, v) for v in values]
    if kind == "diagonal":
        return [(v, v) for v in values]
    if kind == "grid":
        return list(itertools.product(values, values))
    raise ConfigError(f"Unknown slice {kind!r}, expected one of {', '.join(SLICES)}")


@dataclass
class SweepGrid:
    points: list[tuple[float, float]]
    modes: list[str] = field(default_factory=lambda: [RegMode.HARD.value])
    seeds: tuple[int, ...] = (0, 1, 2)
    spec_path: str = data.EDEMA_SPEC_FILE
    data_path: str | None = None  # generated from gen when None
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    include_task_only: bool = False
    workers: int | None = None

    def __post_init__(self) -> None:
        if not self.points:
            raise ConfigError("Sweep grid has no points")
        if not self.seeds:
            raise ConfigError("Sweep grid has no seeds")
        for mode in self.modes:
            if mode not in (RegMode.HARD.value, RegMode.SOFT.value):
                raise ConfigError(f"Unknown mode {mode!r}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def jobs(self) -> list["RunJob"]:
        jobs = []
        if self.include_task_only:
            jobs.extend(RunJob(0.0, 0.0, TASK_ONLY, seed) for seed in self.seeds)
        for mode in self.modes:
            for omega1, omega2 in self.points:
                jobs.extend(RunJob(omega1, omega2, mode, seed) for seed in self.seeds)
        return jobs

    def to_dict(self) -> dict[str, Any]:
        return {
            "points": [list(p) for p in self.points],
            "modes": list(self.modes),
            "seeds": list(self.seeds),
            "spec": self.spec_path,
            "data": self.data_path,
            "gen": self.gen.to_dict(),
            "train": self.train.to_dict(),
            "include_task_only": self.include_task_only,
        }

    @staticmethod
    def from_dict(document: Mapping[str, Any], base_dir: str = ".") -> "SweepGrid":
        """Reads a grid document; relative paths are taken from base_dir"""
        known = {
            "slices",
            "values",
            "points",
            "modes",
            "seeds",
            "spec",
            "data",
            "gen",
            "train",
            "include_task_only",
            "workers",
        }
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"Unknown sweep settings: {', '.join(sorted(unknown))}")

        values = document.get("values", DEFAULT_VALUES)
        points = []
        for kind in document.get("slices", []):
            points.extend(slice_points(kind, values))
        for point in document.get("points", []):
            if not isinstance(point, (list, tuple)) or len(point) != 2:
                raise ConfigError(f"Grid point must be an [omega1, omega2] pair, got {point!r}")
            points.append((float(point[0]), float(point[1])))
        # repeated points across slices run once
        points = list(dict.fromkeys(points))

        train_config = TrainConfig.from_dict(document.get("train") or {})
        seeds = tuple(int(s) for s in document.get("seeds", train_config.seeds))
        modes = document.get("modes", [RegMode.HARD.value])
        if isinstance(modes, str):
            modes = [modes]

        def resolve(path: str | None) -> str | None:
            return None if path is None else os.path.join(base_dir, path)

        return SweepGrid(
            points=points,
            modes=list(modes),
            seeds=seeds,
            spec_path=resolve(document.get("spec")) or data.EDEMA_SPEC_FILE,
            data_path=resolve(document.get("data")),
            gen=GenConfig.from_dict(document.get("gen") or {}),
            train=train_config,
            include_task_only=bool(document.get("include_task_only", False)),
            workers=document.get("workers"),
        )

    @staticmethod
    def load(path: str) -> "SweepGrid":
        return SweepGrid.from_dict(utiles.load_config(path), os.path.dirname(path))


@dataclass(frozen=True)
class RunJob:
    omega1: float
    omega2: float
    mode: str
    seed: int

    def config(self, base: TrainConfig, num_evidence: int) -> TrainConfig:
        if self.mode == TASK_ONLY:
            return base.task_only(num_evidence)
        return base.with_loss(omega1=self.omega1, omega2=self.omega2, mode=RegMode(self.mode))

    def key(self) -> tuple[float, float, str, int]:
        return (self.omega1, self.omega2, self.mode, self.seed)


_context: dict[str, Any] = {}


def _init_worker(spec: ConstraintSpec, dataset: Dataset, config: TrainConfig) -> None:
    _context.update(spec=spec, dataset=dataset, config=config)


def run_job(job: RunJob) -> dict[str, Any]:
    """Trains and evaluates one grid run inside a worker; returns its runs.csv row"""
    spec, dataset = _context["spec"], _context["dataset"]
    config = job.config(_context["config"], spec.num_evidence)
    result = train(dataset.train.pairs, dataset.validation, spec, config, job.seed)
    metrics = evaluate(result.checkpoint, dataset.test, spec)
    row = {
        "omega1": job.omega1,
        "omega2": job.omega2,
        "mode": job.mode,
        "seed": job.seed,
        "r1": metrics.r1,
        "r2": metrics.r2,
        "acc_y": metrics.acc_y,
        "auc_y": metrics.auc_y,
        "acc_z": metrics.acc_z_mean,
    }
    row.update({f"acc_z{k}": a for k, a in enumerate(metrics.acc_z)})
    return row


@dataclass
class SweepCollector:
    """Gathers rows and failures in the parent process and writes them in grid order"""

    order: list[tuple[float, float, str, int]]
    rows: dict[tuple, dict[str, Any]] = field(default_factory=dict)
    failures: list[dict[str, Any]] = field(default_factory=list)

    def add(self, job: RunJob, row: dict[str, Any]) -> None:
        self.rows[job.key()] = row
        logger.info(
            "Finished %s (%g, %g) seed %d: r1 %.4f r2 %.4f acc %.4f",
            job.mode,
            job.omega1,
            job.omega2,
            job.seed,
            row["r1"],
            row["r2"],
            row["acc_y"],
        )

    def fail(self, job: RunJob, error: BaseException) -> None:
        failure = dict(zip(("omega1", "omega2", "mode", "seed"), job.key()))
        self.failures.append({**failure, "error": repr(error)})
        logger.warning("Run %s (%g, %g) seed %d failed: %s", job.mode, job.omega1, job.omega2, job.seed, error)

    def ordered_rows(self) -> list[dict[str, Any]]:
        return [self.rows[key] for key in self.order if key in self.rows]

    def ordered_failures(self) -> list[dict[str, Any]]:
        position = {key: i for i, key in enumerate(self.order)}
        return sorted(
            self.failures,
            key=lambda f: position[(f["omega1"], f["omega2"], f["mode"], f["seed"])],
        )


def aggregate_header(num_evidence: int) -> tuple[str, ...]:
    metrics = (*METRIC_COLUMNS, *(f"acc_z{k}" for k in range(num_evidence)))
    return (
        "omega1",
        "omega2",
        "mode",
        "n",
        *itertools.chain.from_iterable((f"{m}_mean", f"{m}_std") for m in metrics),
    )


def aggregate(rows: list[dict[str, Any]], num_evidence: int) -> list[dict[str, Any]]:
    """Mean and sample standard deviation across seeds (0 for a single seed)"""
    metrics = (*METRIC_COLUMNS, *(f"acc_z{k}" for k in range(num_evidence)))
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for row in rows:
        groups.setdefault((row["omega1"], row["omega2"], row["mode"]), []).append(row)

    aggregated = []
    for (omega1, omega2, mode), members in groups.items():
        entry = {"omega1": omega1, "omega2": omega2, "mode": mode, "n": len(members)}
        for metric in metrics:
            values = np.array([m[metric] for m in members], dtype=np.float64)
            entry[f"{metric}_mean"] = float(values.mean())
            entry[f"{metric}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        aggregated.append(entry)
    return aggregated


@dataclass
class SweepResult:
    rows: list[dict[str, Any]]
    aggregates: list[dict[str, Any]]
    failures: list[dict[str, Any]]

    @property
    def ok(self) -> bool:
        return not self.failures


def prepare(grid: SweepGrid) -> tuple[ConstraintSpec, Dataset]:
    spec = load_spec(grid.spec_path)
    if grid.data_path is None:
        dataset = generate(grid.gen, spec)
    else:
        dataset = load_dataset(grid.data_path, spec)
    return spec, dataset


def run_sweep(grid: SweepGrid, out_dir: str, workers: int | None = None) -> SweepResult:
    workers = workers or grid.workers or utiles.default_workers()
    spec, dataset = prepare(grid)
    jobs = grid.jobs()
    collector = SweepCollector(order=[job.key() for job in jobs])
    logger.info("Sweeping %d runs with %d workers", len(jobs), workers)

    started = time.time()
    if workers == 1:
        _init_worker(spec, dataset, grid.train)
        for job in jobs:
            try:
                collector.add(job, run_job(job))
            except Exception as e:
                collector.fail(job, e)
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(spec, dataset, grid.train)
        ) as pool:
            futures = {pool.submit(run_job, job): job for job in jobs}
            for future in as_completed(futures):
                job = futures[future]
                try:
                    collector.add(job, future.result())
                except Exception as e:
                    collector.fail(job, e)

    rows = collector.ordered_rows()
    result = SweepResult(rows, aggregate(rows, spec.num_evidence), collector.ordered_failures())
    write_result(result, spec, out_dir)
    utiles.save_json(
        {
            "grid": grid.to_dict(),
            "spec_digest": spec.digest(),
            "workers": workers,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "seconds": round(time.time() - started, 3),
        },
        os.path.join(out_dir, data.METADATA_FILE),
    )
    return result


def write_result(result: SweepResult, spec: ConstraintSpec, out_dir: str) -> None:
    header = runs_header(spec.num_evidence)
    utiles.write_csv(
        header, ([row[c] for c in header] for row in result.rows), os.path.join(out_dir, data.RUNS_CSV_FILE)
    )
    header = aggregate_header(spec.num_evidence)
    utiles.write_csv(
        header,
        ([row[c] for c in header] for row in result.aggregates),
        os.path.join(out_dir, data.AGGREGATE_CSV_FILE),
    )
    utiles.save_json(result.failures, os.path.join(out_dir, data.FAILURES_FILE))
