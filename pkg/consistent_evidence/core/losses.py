import enum
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from consistent_evidence.core import autodiff as ad
from consistent_evidence.core.constraints import ConstraintSpec
from consistent_evidence.core.model import Params, PosteriorGraph, forward
from consistent_evidence.utiles.utiles import ConfigError

TASK_LABEL = -1


class LossError(ValueError):
    pass


class RegMode(enum.Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class LossConfig:
    omega1: float = 0.0
    omega2: float = 0.0
    mode: RegMode = RegMode.HARD
    class_weights: tuple[float, ...] | None = None
    evidence_weights: tuple[tuple[float, float], ...] | None = None  # (w(z=-1), w(z=+1))

    def __post_init__(self) -> None:
        errors = []
        for name in ("omega1", "omega2"):
            omega = getattr(self, name)
            if not math.isfinite(omega) or omega < 0:
                errors.append(f"{name} must be finite and nonnegative, got {omega}")
        if self.class_weights is not None and min(self.class_weights, default=1.0) <= 0:
            errors.append("class_weights must be positive")
        if self.evidence_weights is not None:
            if any(len(pair) != 2 or min(pair) <= 0 for pair in self.evidence_weights):
                errors.append("evidence_weights must be positive (negative, positive) pairs")
        if errors:
            raise ConfigError("; ".join(errors))

    def task_weights(self, num_classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(num_classes)
        if len(self.class_weights) != num_classes:
            raise LossError(f"Expected {num_classes} class weights, got {len(self.class_weights)}")
        return np.asarray(self.class_weights, dtype=np.float64)

    def label_weights(self, k: int, z: np.ndarray) -> np.ndarray:
        """Per-example weight of evidence label k given its ±1 targets"""
        if self.evidence_weights is None:
            return np.ones(len(z))
        negative, positive = self.evidence_weights[k]
        return np.where(np.asarray(z) == 1, positive, negative)

    def to_dict(self) -> dict[str, Any]:
        return {
            "omega1": self.omega1,
            "omega2": self.omega2,
            "mode": self.mode.value,
            "class_weights": None if self.class_weights is None else list(self.class_weights),
            "evidence_weights": None
            if self.evidence_weights is None
            else [list(pair) for pair in self.evidence_weights],
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "LossConfig":
        try:
            mode = RegMode(data.get("mode", RegMode.HARD.value))
        except ValueError:
            raise ConfigError(f"mode must be hard or soft, got {data.get('mode')!r}") from None
        class_weights = data.get("class_weights")
        evidence_weights = data.get("evidence_weights")
        try:
            return LossConfig(
                omega1=float(data.get("omega1", 0.0)),
                omega2=float(data.get("omega2", 0.0)),
                mode=mode,
                class_weights=None if class_weights is None else tuple(map(float, class_weights)),
                evidence_weights=None
                if evidence_weights is None
                else tuple(tuple(map(float, pair)) for pair in evidence_weights),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Malformed loss config: {e}") from None


def class_frequencies(labels: Sequence[int], num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.intp), minlength=num_classes) / max(len(labels), 1)


def class_weights_from_labels(labels: Sequence[int], num_classes: int) -> tuple[float, ...]:
    """Inverse class frequency, rescaled to mean 1; absent classes count as one example"""
    frequencies = class_frequencies(labels, num_classes)
    inverse = 1.0 / np.maximum(frequencies, 1.0 / max(len(labels), 1))
    return tuple(float(w) for w in inverse / inverse.mean())


def evidence_weights_from_targets(
    targets: Sequence[Sequence[int]],
) -> tuple[tuple[float, float], ...]:
    """Per evidence label, inverse frequency of -1 and +1 rescaled to mean 1"""
    weights = []
    for z in targets:
        z = np.asarray(z)
        counts = np.array([np.sum(z == -1), np.sum(z == 1)])
        inverse = 1.0 / np.maximum(counts, 1)
        negative, positive = inverse / inverse.mean()
        weights.append((float(negative), float(positive)))
    return tuple(weights)


def weighted_ce_task(
    posterior: PosteriorGraph, y: Sequence[int], class_weights: np.ndarray | None = None
) -> ad.Node:
    """Batch mean of -w_y log p(y | x)"""
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    num_classes = posterior.task_log_probs.shape[1]
    weights = np.ones(num_classes) if class_weights is None else np.asarray(class_weights)

    picked = ad.take_along(posterior.task_log_probs, y)
    return -ad.mean(ad.mul(picked, weights[y]))


def weighted_ce_evidence(
    posterior: PosteriorGraph, k: int, z: Sequence[int], weights: np.ndarray | None = None
) -> ad.Node:
    """Batch mean of -w log p(z_k = z | x)"""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if not np.all(np.abs(z) == 1):
        raise LossError("Evidence targets must be -1 or +1")
    weights = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=np.float64)

    logits = ad.take(posterior.evidence_logits, k, axis=1)
    return -ad.mean(ad.mul(ad.log_sigmoid(ad.mul(logits, z)), weights))


def _class_weighting(posterior: PosteriorGraph, mode: RegMode) -> ad.Node:
    if mode is RegMode.SOFT:
        return posterior.task_probs
    onehot = np.zeros(posterior.task_log_probs.shape)
    onehot[np.arange(posterior.n), posterior.predicted_classes()] = 1.0
    return ad.constant(onehot)


def _weighted_over_classes(
    posterior: PosteriorGraph, mode: RegMode, per_class: dict[int, ad.Node]
) -> ad.Node:
    """Batch mean of sum_c weight(c) * per_class[c]; absent classes add nothing"""
    if not per_class:
        return ad.constant(0.0)
    weights = _class_weighting(posterior, mode)
    total = None
    for c, term in per_class.items():
        contribution = ad.sum(ad.mul(ad.take(weights, c, axis=1), term))
        total = contribution if total is None else ad.add(total, contribution)
    return ad.mul(total, 1.0 / posterior.n)


def _incompatibility_terms(spec: ConstraintSpec, posterior: PosteriorGraph) -> dict[int, ad.Node]:
    return {
        c: -ad.sum(ad.take(posterior.log_absent, sorted(ks), axis=1), axis=1)
        for c, ks in enumerate(spec.incompatible)
        if ks
    }


def _insufficiency_terms(spec: ConstraintSpec, posterior: PosteriorGraph) -> dict[int, ad.Node]:
    # log-sum-exp of log-probabilities stands in for the max over direct findings
    return {
        c: -ad.logsumexp(ad.take(posterior.log_present, sorted(ks), axis=1), axis=1)
        for c, ks in enumerate(spec.direct_support)
        if ks
    }


def reg_r1_hard(spec: ConstraintSpec, posterior: PosteriorGraph) -> ad.Node:
    return _weighted_over_classes(posterior, RegMode.HARD, _incompatibility_terms(spec, posterior))


def reg_r1_soft(spec: ConstraintSpec, posterior: PosteriorGraph) -> ad.Node:
    return _weighted_over_classes(posterior, RegMode.SOFT, _incompatibility_terms(spec, posterior))


def reg_r2_hard(spec: ConstraintSpec, posterior: PosteriorGraph) -> ad.Node:
    return _weighted_over_classes(posterior, RegMode.HARD, _insufficiency_terms(spec, posterior))


def reg_r2_soft(spec: ConstraintSpec, posterior: PosteriorGraph) -> ad.Node:
    return _weighted_over_classes(posterior, RegMode.SOFT, _insufficiency_terms(spec, posterior))


REGULARIZERS = {
    RegMode.HARD: (reg_r1_hard, reg_r2_hard),
    RegMode.SOFT: (reg_r1_soft, reg_r2_soft),
}


@dataclass
class Batch:
    """Examples sharing one label type: TASK_LABEL or an evidence index k"""

    x: np.ndarray  # (n, d)
    label: int
    targets: np.ndarray  # (n,) class indices, or ±1 for evidence
    weight: float = 1.0  # factor on the classification term

    def __len__(self) -> int:
        return len(self.targets)


def objective_terms(
    spec: ConstraintSpec, params: Params, batch: Batch, config: LossConfig
) -> dict[str, ad.Node]:
    """Classification term for the batch label, the two weighted regularizers and their sum"""
    if len(batch) == 0:
        raise LossError("Empty batch")
    if batch.label != TASK_LABEL and not 0 <= batch.label < spec.num_evidence:
        raise LossError(f"Unknown label {batch.label}")

    posterior = forward(params, batch.x, spec.num_classes)
    if batch.label == TASK_LABEL:
        classification = weighted_ce_task(
            posterior, batch.targets, config.task_weights(spec.num_classes)
        )
    else:
        classification = weighted_ce_evidence(
            posterior, batch.label, batch.targets, config.label_weights(batch.label, batch.targets)
        )

    terms = {"classification": classification}
    total = classification if batch.weight == 1.0 else ad.mul(classification, float(batch.weight))
    reg_r1, reg_r2 = REGULARIZERS[config.mode]
    # a zero weight keeps the regularizer out of the graph
    if config.omega1 > 0:
        terms["r1"] = reg_r1(spec, posterior)
        total = ad.add(total, ad.mul(terms["r1"], config.omega1))
    if config.omega2 > 0:
        terms["r2"] = reg_r2(spec, posterior)
        total = ad.add(total, ad.mul(terms["r2"], config.omega2))
    terms["total"] = total
    return terms


def total_objective(
    spec: ConstraintSpec, params: Params, batch: Batch, config: LossConfig
) -> ad.Node:
    return objective_terms(spec, params, batch, config)["total"]
