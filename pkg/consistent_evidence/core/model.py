from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping

import numpy as np
from scipy import special

from consistent_evidence.core import autodiff as ad
from consistent_evidence.core.constraints import ConstraintSpec
from consistent_evidence.utiles import utiles

PARAM_NAMES = ("w1", "b1", "w2", "b2")

DEFAULT_HIDDEN = 64


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    w1: np.ndarray  # (H, d)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (C + K, H)
    b2: np.ndarray  # (C + K,)
    num_classes: int
    num_evidence: int

    def __post_init__(self) -> None:
        hidden, input_dim = self.w1.shape
        width = self.num_classes + self.num_evidence
        if self.b1.shape != (hidden,) or self.w2.shape != (width, hidden):
            raise ModelError("Parameter shapes do not describe one MLP")
        if self.b2.shape != (width,):
            raise ModelError(f"Output layer must have width {width}")
        if not all(np.all(np.isfinite(a)) for a in self.arrays().values()):
            raise ModelError("Parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def leaves(self) -> dict[str, ad.Node]:
        """Fresh trainable graph leaves holding copies of the parameters"""
        return {name: ad.Node(array) for name, array in self.arrays().items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(
            **{name: np.array(arrays[name], dtype=np.float64) for name in PARAM_NAMES},
            num_classes=self.num_classes,
            num_evidence=self.num_evidence,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_classes": self.num_classes,
            "num_evidence": self.num_evidence,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            **{name: array.reshape(-1).tolist() for name, array in self.arrays().items()},
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "ModelParams":
        try:
            C, K = int(data["num_classes"]), int(data["num_evidence"])
            d, H = int(data["input_dim"]), int(data["hidden"])
            shapes = {"w1": (H, d), "b1": (H,), "w2": (C + K, H), "b2": (C + K,)}
            arrays = {
                name: np.asarray(data[name], dtype=np.float64).reshape(shape)
                for name, shape in shapes.items()
            }
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"Malformed parameters: {e}") from None
        return ModelParams(**arrays, num_classes=C, num_evidence=K)


def init(seed: int, d: int, H: int, spec: ConstraintSpec) -> ModelParams:
    """Glorot-uniform weights, zero biases"""
    if d < 1 or H < 1:
        raise ModelError(f"Input dimension and hidden width must be positive, got {d}, {H}")

    rng = np.random.default_rng(seed)
    width = spec.num_classes + spec.num_evidence

    a1 = np.sqrt(6.0 / (d + H))
    a2 = np.sqrt(6.0 / (H + width))
    return ModelParams(
        w1=rng.uniform(-a1, a1, size=(H, d)),
        b1=np.zeros(H),
        w2=rng.uniform(-a2, a2, size=(width, H)),
        b2=np.zeros(width),
        num_classes=spec.num_classes,
        num_evidence=spec.num_evidence,
    )


@dataclass
class PosteriorBatch:
    task: np.ndarray  # (n, C), p(y = c | x)
    evidence: np.ndarray  # (n, K), p(z_k = +1 | x)

    @property
    def n(self) -> int:
        return self.task.shape[0]

    def row(self, i: int) -> np.ndarray:
        """Concatenated length C + K posterior of one example"""
        return np.concatenate([self.task[i], self.evidence[i]])


@dataclass
class PosteriorGraph:
    """Posteriors of a batch as graph nodes"""

    task_log_probs: ad.Node  # (n, C)
    evidence_logits: ad.Node  # (n, K)

    @cached_property
    def task_probs(self) -> ad.Node:
        return ad.exp(self.task_log_probs)

    @cached_property
    def log_present(self) -> ad.Node:
        """log p(z_k = +1 | x)"""
        return ad.log_sigmoid(self.evidence_logits)

    @cached_property
    def log_absent(self) -> ad.Node:
        return ad.log_sigmoid(-self.evidence_logits)

    @property
    def n(self) -> int:
        return self.task_log_probs.shape[0]

    def predicted_classes(self) -> np.ndarray:
        # read off values, so nothing downstream differentiates through the argmax
        return np.argmax(self.task_log_probs.value, axis=1)

    def to_batch(self) -> PosteriorBatch:
        return PosteriorBatch(
            task=np.exp(self.task_log_probs.value),
            evidence=special.expit(self.evidence_logits.value),
        )

    @staticmethod
    def from_probabilities(task: np.ndarray, evidence: np.ndarray) -> "PosteriorGraph":
        task = np.atleast_2d(np.asarray(task, dtype=np.float64))
        evidence = np.atleast_2d(np.asarray(evidence, dtype=np.float64))
        with np.errstate(divide="ignore"):
            return PosteriorGraph(
                task_log_probs=ad.Node(np.log(task)),
                evidence_logits=ad.Node(special.logit(evidence)),
            )


Params = ModelParams | Mapping[str, ad.Node]


def _as_nodes(params: Params) -> dict[str, ad.Node]:
    if isinstance(params, ModelParams):
        return {name: ad.constant(a) for name, a in params.arrays().items()}
    return dict(params)


def forward(params: Params, x: np.ndarray, num_classes: int | None = None) -> PosteriorGraph:
    # a single (d,) vector is a batch of one; bare graph nodes need num_classes
    if num_classes is None:
        if not isinstance(params, ModelParams):
            raise ModelError("num_classes is required with graph-node parameters")
        num_classes = params.num_classes
    nodes = _as_nodes(params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]

    input_dim = nodes["w1"].shape[1]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ModelError(f"Expected inputs of dimension {input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ModelError("Inputs must be finite")

    width = nodes["b2"].shape[0]
    hidden = ad.relu(ad.affine(x, nodes["w1"], nodes["b1"]))
    logits = ad.affine(hidden, nodes["w2"], nodes["b2"])
    return PosteriorGraph(
        task_log_probs=ad.log_softmax(ad.take(logits, list(range(num_classes)), axis=1)),
        evidence_logits=ad.take(logits, list(range(num_classes, width)), axis=1),
    )


def predict(params: ModelParams, x: np.ndarray) -> PosteriorBatch:
    return forward(params, x, params.num_classes).to_batch()


def predict_map(posterior: PosteriorBatch) -> tuple[np.ndarray, np.ndarray]:
    """MAP labels: argmax class (lowest index on ties), z_k = +1 iff p > 0.5.

    A batch gives arrays; a single example (1-d task vector) gives an int and a vector.
    """
    task = np.asarray(posterior.task)
    evidence = np.asarray(posterior.evidence)
    y_hat = np.argmax(task, axis=-1)
    z_hat = np.where(evidence > 0.5, 1, -1).astype(np.int8)
    if task.ndim == 1:
        return int(y_hat), z_hat
    return y_hat, z_hat


@dataclass
class Checkpoint:
    params: ModelParams
    spec_digest: str
    step: int = 0
    val_acc: float = 0.0
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec_digest": self.spec_digest,
            "step": self.step,
            "val_acc": self.val_acc,
            "config": self.config,
            "params": self.params.to_dict(),
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "Checkpoint":
        try:
            return Checkpoint(
                params=ModelParams.from_dict(data["params"]),
                spec_digest=str(data["spec_digest"]),
                step=int(data.get("step", 0)),
                val_acc=float(data.get("val_acc", 0.0)),
                config=dict(data.get("config", {})),
            )
        except KeyError as e:
            raise ModelError(f"Checkpoint misses field {e.args[0]}") from None

    def save(self, path: str) -> None:
        utiles.save_json(self.to_dict(), path)

    @staticmethod
    def load(path: str, spec: ConstraintSpec = None) -> "Checkpoint":
        checkpoint = Checkpoint.from_dict(utiles.load_json(path))
        if spec is not None and checkpoint.spec_digest != spec.digest():
            raise ModelError(f"{path} was trained under a different constraint spec")
        return checkpoint
