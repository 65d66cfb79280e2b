import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from consistent_evidence.core.constraints import (
    ConstraintSpec,
    SpecError,
    Verdict,
    check_consistent,
    validate_class,
    validate_evidence,
)
from consistent_evidence.utiles import utiles

logger = logging.getLogger(__name__)

TASK_SUM_TOLERANCE = 1e-9


class RecordError(ValueError):
    pass


@dataclass
class PredictionRecord:
    y_hat: int
    z_hat: np.ndarray
    y_true: int | None = None
    posterior: np.ndarray | None = None

    def validate(self, spec: ConstraintSpec) -> None:
        try:
            validate_class(spec, self.y_hat)
            validate_evidence(spec, self.z_hat)
            if self.y_true is not None:
                validate_class(spec, self.y_true)
        except SpecError as e:
            raise RecordError(str(e)) from e

        if self.posterior is None:
            return
        width = spec.num_classes + spec.num_evidence
        if self.posterior.shape != (width,):
            raise RecordError(f"Posterior must have length {width}, got {self.posterior.size}")
        task = self.posterior[: spec.num_classes]
        evidence = self.posterior[spec.num_classes :]
        if abs(task.sum() - 1.0) > TASK_SUM_TOLERANCE:
            raise RecordError(f"Task posterior sums to {task.sum()!r}, not 1")
        if np.any(task < 0) or np.any(evidence < 0) or np.any(evidence > 1):
            raise RecordError("Posterior probabilities must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        row = {"y_hat": int(self.y_hat), "z_hat": [int(v) for v in self.z_hat]}
        if self.y_true is not None:
            row["y_true"] = int(self.y_true)
        if self.posterior is not None:
            row["posterior"] = [float(p) for p in self.posterior]
        return row

    @staticmethod
    def from_dict(row: dict[str, Any]) -> "PredictionRecord":
        try:
            y_hat = row["y_hat"]
            z_hat = row["z_hat"]
        except KeyError as e:
            raise RecordError(f"Missing field {e.args[0]}") from None
        if not utiles.is_integer(y_hat):
            raise RecordError("y_hat must be an integer")
        if not isinstance(z_hat, list):
            raise RecordError("z_hat must be an array")
        if not all(utiles.is_integer(v) and abs(v) == 1 for v in z_hat):
            raise RecordError("z_hat must hold integers -1 or 1")

        y_true = row.get("y_true")
        if y_true is not None and not utiles.is_integer(y_true):
            raise RecordError("y_true must be an integer")
        posterior = row.get("posterior")
        if posterior is not None:
            if not isinstance(posterior, list) or not all(utiles.is_number(p) for p in posterior):
                raise RecordError("posterior must be an array of numbers")
            posterior = np.asarray(posterior, dtype=np.float64)
        return PredictionRecord(
            y_hat=y_hat, z_hat=np.asarray(z_hat, dtype=np.int8), y_true=y_true, posterior=posterior
        )


@dataclass(frozen=True)
class InconsistencyReport:
    n: int
    r1_total: float
    r2_total: float
    r1_by_class: tuple[float, ...]
    r2_by_class: tuple[float, ...]
    r1_normalized_total: float
    verdicts: dict[str, int] = field(default_factory=dict)

    @property
    def r_total(self) -> float:
        return self.r1_total + self.r2_total

    @property
    def consistent_fraction(self) -> float:
        return self.verdicts.get(Verdict.CONSISTENT.value, 0) / self.n

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "r1_total": self.r1_total,
            "r2_total": self.r2_total,
            "r_total": self.r_total,
            "r1_normalized_total": self.r1_normalized_total,
            "r1_by_class": list(self.r1_by_class),
            "r2_by_class": list(self.r2_by_class),
            "verdicts": dict(self.verdicts),
            "consistent_fraction": self.consistent_fraction,
        }

    def csv_rows(self) -> list[tuple[Any, float, float]]:
        rows = [
            (c, r1, r2) for c, (r1, r2) in enumerate(zip(self.r1_by_class, self.r2_by_class))
        ]
        rows.append(("total", self.r1_total, self.r2_total))
        return rows


REPORT_CSV_HEADER = ("class", "r1", "r2")


def r1_example(spec: ConstraintSpec, y: int, z: Sequence[int]) -> int:
    """Number of present findings that are incompatible with class y"""
    y = validate_class(spec, y)
    z = validate_evidence(spec, z)
    return sum(1 for k in spec.incompatible[y] if z[k] == 1)


def r2_example(spec: ConstraintSpec, y: int, z: Sequence[int]) -> int:
    """1 when no directly supporting finding of class y is present"""
    y = validate_class(spec, y)
    z = validate_evidence(spec, z)
    support = spec.direct_support[y]
    if not support:
        return 0
    return 1 - max(int(z[k] == 1) for k in support)


def dataset_report(spec: ConstraintSpec, records: Sequence[PredictionRecord]) -> InconsistencyReport:
    """Per-class values share the dataset denominator, so they add up to the totals"""
    if len(records) == 0:
        raise RecordError("Cannot report on an empty set of predictions")

    r1_counts = [0] * spec.num_classes
    r2_counts = [0] * spec.num_classes
    normalized = 0.0
    verdicts = Counter()
    for i, record in enumerate(records):
        try:
            record.validate(spec)
        except RecordError as e:
            raise RecordError(f"Record {i}: {e}") from e

        y = int(record.y_hat)
        r1 = r1_example(spec, y, record.z_hat)
        r1_counts[y] += r1
        r2_counts[y] += r2_example(spec, y, record.z_hat)
        if spec.incompatible[y]:
            normalized += r1 / len(spec.incompatible[y])
        verdicts[check_consistent(spec, y, record.z_hat).value] += 1

    n = len(records)
    return InconsistencyReport(
        n=n,
        r1_total=sum(r1_counts) / n,
        r2_total=sum(r2_counts) / n,
        r1_by_class=tuple(count / n for count in r1_counts),
        r2_by_class=tuple(count / n for count in r2_counts),
        r1_normalized_total=normalized / n,
        verdicts={v.value: verdicts[v.value] for v in Verdict},
    )


def _check_probabilities(spec: ConstraintSpec, probs: Sequence[float]) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (spec.num_evidence,):
        raise RecordError(f"Expected {spec.num_evidence} evidence probabilities, got {probs.size}")
    if not np.all((probs >= 0) & (probs <= 1)):
        raise RecordError("Evidence probabilities must lie in [0, 1]")
    return probs


def exact_inconsistency_probability(
    spec: ConstraintSpec, y: int, probs: Sequence[float]
) -> tuple[float, float]:
    """(P[some incompatible finding present], P[no direct finding present])
    for independent findings with P[z_k = +1] = probs[k].

    A class without direct support has insufficiency probability 1 here
    (empty product); the per-example measures exempt such classes instead.
    """
    y = validate_class(spec, y)
    probs = _check_probabilities(spec, probs)

    absent = 1.0 - probs
    p_incompatible = 1.0 - float(np.prod(absent[sorted(spec.incompatible[y])]))
    p_insufficient = float(np.prod(absent[sorted(spec.direct_support[y])]))
    return p_incompatible, p_insufficient


def union_bound(spec: ConstraintSpec, y: int, probs: Sequence[float]) -> float:
    y = validate_class(spec, y)
    probs = _check_probabilities(spec, probs)
    return float(np.sum(probs[sorted(spec.incompatible[y])]))


def min_bound(spec: ConstraintSpec, y: int, probs: Sequence[float]) -> float:
    y = validate_class(spec, y)
    probs = _check_probabilities(spec, probs)
    support = sorted(spec.direct_support[y])
    if not support:
        return 1.0
    return float(np.min(1.0 - probs[support]))


def load_predictions(path: str, spec: ConstraintSpec) -> list[PredictionRecord]:
    records = []
    for lineno, row in utiles.read_jsonl(path):
        try:
            record = PredictionRecord.from_dict(row)
            record.validate(spec)
        except RecordError as e:
            raise utiles.JsonLinesError(path, lineno, str(e)) from e
        records.append(record)
    logger.debug("Loaded %d predictions from %s", len(records), path)
    return records


def write_predictions(records: Iterable[PredictionRecord], path: str) -> None:
    utiles.write_jsonl((record.to_dict() for record in records), path)
