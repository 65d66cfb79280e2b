import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from consistent_evidence.core.constraints import ConstraintSpec
from consistent_evidence.core.losses import TASK_LABEL
from consistent_evidence.utiles import utiles
from consistent_evidence.utiles.utiles import ConfigError

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_train: int = 4096
    n_validation: int = 512
    n_test: int = 512
    dim: int = 16
    class_prior: tuple[float, ...] | None = None  # uniform when None
    p_extra: float = 0.3
    sigma: float = 1.5
    p_task_label: float = 1.0
    p_evidence_label: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        for name in ("n_train", "n_validation", "n_test"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be nonnegative")
        if self.dim < 1:
            errors.append("dim must be positive")
        for name in ("p_extra", "p_task_label", "p_evidence_label"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must lie in [0, 1]")
        if not math.isfinite(self.sigma) or self.sigma < 0:
            errors.append("sigma must be finite and nonnegative")
        if self.class_prior is not None:
            if min(self.class_prior, default=0.0) < 0:
                errors.append("class_prior entries must be nonnegative")
            elif abs(sum(self.class_prior) - 1.0) > 1e-9:
                errors.append("class_prior must sum to 1")
        if errors:
            raise ConfigError("; ".join(errors))

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def prior(self, spec: ConstraintSpec) -> np.ndarray:
        if self.class_prior is None:
            return np.full(spec.num_classes, 1.0 / spec.num_classes)
        if len(self.class_prior) != spec.num_classes:
            raise ConfigError(
                f"class_prior has {len(self.class_prior)} entries, spec has {spec.num_classes} classes"
            )
        return np.asarray(self.class_prior, dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        if self.class_prior is not None:
            data["class_prior"] = list(self.class_prior)
        return data

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "GenConfig":
        unknown = set(data) - set(GenConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown generation settings: {', '.join(sorted(unknown))}")
        values = dict(data)
        if values.get("class_prior") is not None:
            values["class_prior"] = tuple(float(p) for p in values["class_prior"])
        try:
            return GenConfig(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from None


@dataclass(frozen=True)
class LabeledPair:
    """One feature vector with either its task label or one evidence label"""

    example: int
    x: np.ndarray
    label: int  # TASK_LABEL or evidence index k
    target: int  # class index, or ±1


@dataclass
class Split:
    name: str
    ids: np.ndarray  # (n,) example ids, unique across splits
    x: np.ndarray  # (n, d)
    y: np.ndarray | None = None  # (n,) ground truth, when known
    z: np.ndarray | None = None  # (n, K) ground truth in ±1, when known
    pairs: list[LabeledPair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_truth(self) -> bool:
        return self.y is not None and self.z is not None


@dataclass
class Dataset:
    splits: dict[str, Split]
    config: GenConfig | None = None

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def validation(self) -> Split:
        return self.splits["validation"]

    @property
    def test(self) -> Split:
        return self.splits["test"]

    @property
    def dim(self) -> int:
        return next(iter(self.splits.values())).x.shape[1]


def sample_evidence(
    spec: ConstraintSpec, y: int, p_extra: float, rng: np.random.Generator
) -> np.ndarray:
    """Evidence consistent with class y: no incompatible finding, one random
    direct finding (when y has any), other findings present with p_extra"""
    z = -np.ones(spec.num_evidence, dtype=np.int8)
    support = sorted(spec.direct_support[y])
    chosen = None
    if support:
        chosen = support[rng.integers(len(support))]
        z[chosen] = 1

    for k in range(spec.num_evidence):
        if k == chosen or k in spec.incompatible[y]:
            continue
        if rng.random() < p_extra:
            z[k] = 1
    return z


def generate(config: GenConfig, spec: ConstraintSpec) -> Dataset:
    """x = A onehot(y) + B (z + 1) / 2 + sigma * noise, with A and B drawn once per seed"""
    rng = np.random.default_rng(config.seed)
    C, K = spec.num_classes, spec.num_evidence
    prior = config.prior(spec)

    A = rng.standard_normal((config.dim, C))
    B = rng.standard_normal((config.dim, K))

    splits = {}
    next_id = 0
    for name in SPLITS:
        n = config.split_size(name)
        y = rng.choice(C, size=n, p=prior)
        z = np.array([sample_evidence(spec, int(c), config.p_extra, rng) for c in y])
        z = z.reshape(n, K).astype(np.int8)

        onehot = np.eye(C)[y]
        noise = config.sigma * rng.standard_normal((n, config.dim))
        x = onehot @ A.T + ((z + 1) / 2) @ B.T + noise

        ids = np.arange(next_id, next_id + n)
        next_id += n
        splits[name] = Split(name, ids, x, y.astype(np.intp), z)

    dataset = Dataset(splits, config)
    dataset.train.pairs = make_pairs(dataset.train, config)
    logger.debug(
        "Generated %s examples and %d training pairs",
        "/".join(str(len(s)) for s in splits.values()),
        len(dataset.train.pairs),
    )
    return dataset


def make_pairs(split: Split, config: GenConfig) -> list[LabeledPair]:
    """Releases (x, y) with p_task_label and each (x, z_k) with p_evidence_label"""
    if not split.has_truth:
        raise DataError(f"Split {split.name} has no ground truth to draw pairs from")

    # one stream per split, independent of the feature stream
    stream = SPLITS.index(split.name) if split.name in SPLITS else len(SPLITS)
    rng = np.random.default_rng([config.seed, stream])
    K = split.z.shape[1]
    pairs = []
    for i in range(len(split)):
        example, x = int(split.ids[i]), split.x[i]
        if rng.random() < config.p_task_label:
            pairs.append(LabeledPair(example, x, TASK_LABEL, int(split.y[i])))
        for k in range(K):
            if rng.random() < config.p_evidence_label:
                pairs.append(LabeledPair(example, x, k, int(split.z[i, k])))

    if not pairs:
        raise DataError(f"No pairs were drawn from split {split.name}")
    return pairs


def save_dataset(dataset: Dataset, path: str) -> None:
    """JSON-lines: training lines hold only the released labels of an example,
    evaluation lines hold full tuples"""
    utiles.write_jsonl(_dataset_rows(dataset), path)


def _dataset_rows(dataset: Dataset) -> Iterable[dict[str, Any]]:
    for name, split in dataset.splits.items():
        if split.pairs:
            released = {}
            for pair in split.pairs:
                released.setdefault(pair.example, []).append(pair)
            positions = {int(e): i for i, e in enumerate(split.ids)}
            for example in sorted(released):
                row = {"id": example, "split": name, "x": split.x[positions[example]].tolist()}
                for pair in released[example]:
                    if pair.label == TASK_LABEL:
                        row["y"] = pair.target
                    else:
                        row.setdefault("z", {})[str(pair.label)] = pair.target
                yield row
        else:
            for i in range(len(split)):
                row = {"id": int(split.ids[i]), "split": name, "x": split.x[i].tolist()}
                if split.has_truth:
                    row["y"] = int(split.y[i])
                    row["z"] = {str(k): int(v) for k, v in enumerate(split.z[i])}
                yield row


def load_dataset(path: str, spec: ConstraintSpec) -> Dataset:
    """Reads a dataset file; train lines become pairs, other splits need full tuples"""
    rows = {name: [] for name in SPLITS}
    dim = None
    for lineno, row in utiles.read_jsonl(path):
        name = row.get("split")
        if name not in rows:
            raise utiles.JsonLinesError(path, lineno, f"unknown split {name!r}")
        x = row.get("x")
        if not isinstance(x, list) or not x or not all(utiles.is_number(v) for v in x):
            raise utiles.JsonLinesError(path, lineno, "x must be a nonempty array of numbers")
        if dim is None:
            dim = len(x)
        elif len(x) != dim:
            raise utiles.JsonLinesError(path, lineno, f"x has {len(x)} entries, earlier lines have {dim}")
        z = _parse_evidence(row.get("z", {}), spec)
        if z is None:
            raise utiles.JsonLinesError(path, lineno, "z must map evidence index to -1 or 1")
        y = row.get("y")
        if y is not None and not (utiles.is_integer(y) and 0 <= y < spec.num_classes):
            raise utiles.JsonLinesError(path, lineno, f"y must be a class index, got {y!r}")
        rows[name].append((lineno, row.get("id", lineno), x, y, z))

    splits = {}
    for name, entries in rows.items():
        ids = np.array([e[1] for e in entries], dtype=np.intp)
        x = np.array([e[2] for e in entries], dtype=np.float64)
        if not entries:
            x = x.reshape(0, dim or 0)
        split = Split(name, ids, x)
        if name == "train":
            split.pairs = [
                pair
                for i, (_, example, _, y, z) in enumerate(entries)
                for pair in _released_pairs(int(example), x[i], y, z)
            ]
        else:
            incomplete = [e[0] for e in entries if e[3] is None or len(e[4]) != spec.num_evidence]
            if incomplete:
                raise utiles.JsonLinesError(path, incomplete[0], f"{name} lines need full y and z")
            split.y = np.array([e[3] for e in entries], dtype=np.intp)
            split.z = np.array(
                [[e[4][k] for k in range(spec.num_evidence)] for e in entries], dtype=np.int8
            ).reshape(len(entries), spec.num_evidence)
        splits[name] = split

    return Dataset(splits)


def _parse_evidence(z: Any, spec: ConstraintSpec) -> dict[int, int] | None:
    if not isinstance(z, dict):
        return None
    parsed = {}
    for key, value in z.items():
        if not (isinstance(key, str) and key.isdigit()) or not utiles.is_integer(value):
            return None
        k = int(key)
        if k >= spec.num_evidence or value not in (-1, 1):
            return None
        parsed[k] = value
    return parsed


def _released_pairs(example: int, x: np.ndarray, y: int | None, z: dict[int, int]) -> list[LabeledPair]:
    pairs = [] if y is None else [LabeledPair(example, x, TASK_LABEL, y)]
    pairs.extend(LabeledPair(example, x, k, v) for k, v in sorted(z.items()))
    return pairs
