import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats

from consistent_evidence.core import autodiff as ad
from consistent_evidence.core.constraints import ConstraintSpec
from consistent_evidence.core.losses import (
    TASK_LABEL,
    Batch,
    LossConfig,
    class_weights_from_labels,
    evidence_weights_from_targets,
    objective_terms,
)
from consistent_evidence.core.metrics import InconsistencyReport, PredictionRecord, dataset_report
from consistent_evidence.core.model import (
    DEFAULT_HIDDEN,
    Checkpoint,
    ModelParams,
    init,
    predict,
    predict_map,
)
from consistent_evidence.core.synthdata import LabeledPair, Split
from consistent_evidence.utiles import utiles
from consistent_evidence.utiles.utiles import ConfigError

logger = logging.getLogger(__name__)

WEIGHTS_BALANCED = "balanced"


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 32
    steps: int = 6000
    hidden: int = DEFAULT_HIDDEN
    label_sampling: tuple[float, ...] | None = None  # over (task, z_0 .. z_K-1); uniform when None
    loss: LossConfig = field(default_factory=LossConfig)
    weights: str = WEIGHTS_BALANCED  # "balanced" derives loss weights from the training pairs, "none" keeps them
    eval_interval: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    reg_warmup: int = 2000  # leading steps on the classification loss alone, never selected

    def __post_init__(self) -> None:
        errors = []
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            errors.append("learning_rate must be positive")
        if self.batch_size < 1:
            errors.append("batch_size must be at least 1")
        if self.steps < 0:
            errors.append("steps must be nonnegative")
        if self.hidden < 1:
            errors.append("hidden must be positive")
        if self.reg_warmup < 0:
            errors.append("reg_warmup must be nonnegative")
        if self.eval_interval < 1:
            errors.append("eval_interval must be at least 1")
        if not self.seeds:
            errors.append("seeds must not be empty")
        if self.weights not in (WEIGHTS_BALANCED, "none"):
            errors.append(f"weights must be {WEIGHTS_BALANCED!r} or 'none'")
        if self.label_sampling is not None:
            if min(self.label_sampling, default=-1.0) < 0:
                errors.append("label_sampling entries must be nonnegative")
            elif abs(sum(self.label_sampling) - 1.0) > 1e-9:
                errors.append("label_sampling must sum to 1")
        if errors:
            raise ConfigError("; ".join(errors))

    def sampling(self, num_evidence: int) -> np.ndarray:
        if self.label_sampling is None:
            return np.full(num_evidence + 1, 1.0 / (num_evidence + 1))
        if len(self.label_sampling) != num_evidence + 1:
            raise ConfigError(
                f"label_sampling needs {num_evidence + 1} entries, got {len(self.label_sampling)}"
            )
        return np.asarray(self.label_sampling, dtype=np.float64)

    def classification_scales(self, num_evidence: int) -> np.ndarray:
        """Factor on each label's classification loss so that the expected step
        loss is the task loss plus the mean evidence loss"""
        sampling = self.sampling(num_evidence)
        coefficients = np.full(num_evidence + 1, 1.0 / max(num_evidence, 1))
        coefficients[0] = 1.0
        return np.divide(coefficients, sampling, out=np.zeros_like(sampling), where=sampling > 0)

    def task_only(self, num_evidence: int) -> "TrainConfig":
        """Baseline trained on task labels alone, without regularizers"""
        return replace(
            self,
            label_sampling=(1.0,) + (0.0,) * num_evidence,
            loss=replace(self.loss, omega1=0.0, omega2=0.0),
        )

    def with_loss(self, **changes: Any) -> "TrainConfig":
        return replace(self, loss=replace(self.loss, **changes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "hidden": self.hidden,
            "label_sampling": None if self.label_sampling is None else list(self.label_sampling),
            "loss": self.loss.to_dict(),
            "weights": self.weights,
            "eval_interval": self.eval_interval,
            "seeds": list(self.seeds),
            "reg_warmup": self.reg_warmup,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown training settings: {', '.join(sorted(unknown))}")

        values = dict(data)
        values["loss"] = LossConfig.from_dict(values.get("loss") or {})
        if values.get("label_sampling") is not None:
            values["label_sampling"] = tuple(float(p) for p in values["label_sampling"])
        if "seeds" in values:
            values["seeds"] = tuple(int(s) for s in values["seeds"])
        try:
            return TrainConfig(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from None


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros_like(params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return OptimizerState(
            m={name: np.zeros_like(a) for name, a in params.items()},
            v={name: np.zeros_like(a) for name, a in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns new arrays and a new state"""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise TrainingError(f"Gradient of {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"Non-finite gradient for {name} at step {state.step + 1}")

    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    new_params, m, v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    return new_params, replace(state, m=m, v=v, step=t)


@dataclass
class LabelPool:
    """All training pairs of one label type, stacked for batching"""

    x: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def build_pools(pairs: Sequence[LabeledPair], num_evidence: int, dim: int) -> dict[int, LabelPool]:
    grouped = {label: [] for label in [TASK_LABEL, *range(num_evidence)]}
    for pair in pairs:
        grouped[pair.label].append(pair)
    return {
        label: LabelPool(
            x=np.array([p.x for p in members], dtype=np.float64).reshape(len(members), dim),
            targets=np.array([p.target for p in members], dtype=np.intp),
        )
        for label, members in grouped.items()
    }


def loss_with_weights(config: TrainConfig, pools: Mapping[int, LabelPool], spec: ConstraintSpec) -> LossConfig:
    if config.weights != WEIGHTS_BALANCED:
        return config.loss
    loss = config.loss
    if loss.class_weights is None:
        loss = replace(
            loss, class_weights=class_weights_from_labels(pools[TASK_LABEL].targets, spec.num_classes)
        )
    if loss.evidence_weights is None:
        loss = replace(
            loss,
            evidence_weights=evidence_weights_from_targets(
                [pools[k].targets for k in range(spec.num_evidence)]
            ),
        )
    return loss


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict[str, Any]]


def task_accuracy(params: ModelParams, split: Split) -> float:
    y_hat, _ = predict_map(predict(params, split.x))
    return float(np.mean(y_hat == split.y))


def train(
    pairs: Sequence[LabeledPair],
    validation: Split,
    spec: ConstraintSpec,
    config: TrainConfig,
    seed: int,
    trace_path: str | None = None,
) -> TrainResult:
    """Trains from scratch under seed and returns the most accurate validation checkpoint"""
    if not pairs:
        raise TrainingError("No training pairs")
    if not validation.has_truth or len(validation) == 0:
        raise TrainingError("Validation split needs ground truth")

    dim = pairs[0].x.shape[0]
    pools = build_pools(pairs, spec.num_evidence, dim)
    sampling = config.sampling(spec.num_evidence)
    labels = [TASK_LABEL, *range(spec.num_evidence)]
    for label, p in zip(labels, sampling):
        if p > 0 and len(pools[label]) == 0:
            raise TrainingError(f"Label {_label_name(label)} is sampled but has no pairs")

    scales = config.classification_scales(spec.num_evidence)
    loss_config = loss_with_weights(config, pools, spec)
    warmup_config = replace(loss_config, omega1=0.0, omega2=0.0)
    if config.reg_warmup >= config.steps > 0 and (loss_config.omega1 > 0 or loss_config.omega2 > 0):
        logger.warning("reg_warmup %d covers all %d steps; regularizers never apply", config.reg_warmup, config.steps)
    rng = np.random.default_rng(seed)
    params = init(seed, dim, config.hidden, spec)
    arrays = params.arrays()
    state = OptimizerState.zeros_like(arrays)

    trace = []
    best = Checkpoint(
        params=params,
        spec_digest=spec.digest(),
        step=0,
        val_acc=task_accuracy(params, validation),
        config=replace(config, loss=loss_config).to_dict(),
    )
    _record(trace, {"step": 0, "val_acc": best.val_acc}, trace_path, append=False)

    for step in range(1, config.steps + 1):
        index = rng.choice(len(labels), p=sampling)
        label = labels[index]
        pool = pools[label]
        size = min(config.batch_size, len(pool))
        chosen = rng.choice(len(pool), size=size, replace=False)
        batch = Batch(x=pool.x[chosen], label=label, targets=pool.targets[chosen], weight=scales[index])

        warm = step <= config.reg_warmup
        leaves = {name: ad.Node(a) for name, a in arrays.items()}
        terms = objective_terms(spec, leaves, batch, warmup_config if warm else loss_config)
        loss = terms["total"].item()
        if not math.isfinite(loss):
            raise TrainingError(f"Loss diverged at step {step} ({_label_name(label)} batch)")
        ad.backward(terms["total"])
        grads = {name: leaf.grad for name, leaf in leaves.items()}
        arrays, state = adam_step(arrays, grads, state, config.learning_rate)

        if (step % config.eval_interval == 0 and not warm) or step == config.steps:
            current = params.replace(arrays)
            val_acc = task_accuracy(current, validation)
            entry = {
                "step": step,
                "label": _label_name(label),
                "loss": loss,
                **{name: node.item() for name, node in terms.items() if name != "total"},
                "val_acc": val_acc,
            }
            _record(trace, entry, trace_path)
            logger.debug("step %d loss %.4f val_acc %.4f", step, loss, val_acc)
            # strict improvement keeps the earliest of equally accurate checkpoints
            if val_acc > best.val_acc:
                best = replace(best, params=current, step=step, val_acc=val_acc)

    logger.info("Selected step %d with validation accuracy %.4f", best.step, best.val_acc)
    return TrainResult(best, trace)


def _record(trace: list, entry: dict, path: str | None, append: bool = True) -> None:
    trace.append(entry)
    if path:
        utiles.write_jsonl([entry], path, append=append)


def _label_name(label: int) -> str:
    return "task" if label == TASK_LABEL else f"z{label}"


@dataclass
class EvalMetrics:
    acc_y: float
    auc_y: float
    acc_z: tuple[float, ...]
    report: InconsistencyReport

    @property
    def r1(self) -> float:
        return self.report.r1_total

    @property
    def r2(self) -> float:
        return self.report.r2_total

    @property
    def acc_z_mean(self) -> float:
        return float(np.mean(self.acc_z))

    def to_dict(self) -> dict[str, Any]:
        return {
            "acc_y": self.acc_y,
            "auc_y": self.auc_y,
            "acc_z": list(self.acc_z),
            "report": self.report.to_dict(),
        }


def macro_auc(task_probs: np.ndarray, y: np.ndarray) -> float:
    """Mean one-vs-rest rank AUC over classes that have both positives and negatives"""
    aucs = []
    for c in range(task_probs.shape[1]):
        positive = y == c
        n_pos, n_neg = int(positive.sum()), int((~positive).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = stats.rankdata(task_probs[:, c])
        u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if not aucs:
        return 0.5
    return float(np.mean(aucs))


def predict_records(checkpoint: Checkpoint, split: Split) -> list[PredictionRecord]:
    posterior = predict(checkpoint.params, split.x)
    y_hat, z_hat = predict_map(posterior)
    return [
        PredictionRecord(
            y_hat=int(y_hat[i]),
            z_hat=z_hat[i],
            y_true=None if split.y is None else int(split.y[i]),
            posterior=posterior.row(i),
        )
        for i in range(posterior.n)
    ]


def evaluate(checkpoint: Checkpoint, split: Split, spec: ConstraintSpec) -> EvalMetrics:
    if len(split) == 0:
        raise TrainingError(f"Cannot evaluate on empty split {split.name}")
    if not split.has_truth:
        raise TrainingError(f"Split {split.name} has no ground truth")

    posterior = predict(checkpoint.params, split.x)
    y_hat, z_hat = predict_map(posterior)
    records = [PredictionRecord(int(y_hat[i]), z_hat[i]) for i in range(len(split))]
    return EvalMetrics(
        acc_y=float(np.mean(y_hat == split.y)),
        auc_y=macro_auc(posterior.task, split.y),
        acc_z=tuple(float(a) for a in np.mean(z_hat == split.z, axis=0)),
        report=dataset_report(spec, records),
    )
