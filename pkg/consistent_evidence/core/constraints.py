import enum
import hashlib
import json
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from consistent_evidence.utiles import utiles

HIGHER_DIRECT = "higher-direct"

DERIVATION_RULES = (HIGHER_DIRECT,)


class SpecError(ValueError):
    pass


class Verdict(enum.Enum):
    CONSISTENT = "consistent"
    INCOMPATIBLE = "incompatible"
    INSUFFICIENT = "insufficient"
    BOTH = "both"


@dataclass(frozen=True)
class ConstraintSpec:
    num_classes: int
    evidence_names: tuple[str, ...]
    direct_support: tuple[frozenset[int], ...]
    incompatible: tuple[frozenset[int], ...]

    def __post_init__(self) -> None:
        errors = _check_invariants(
            self.num_classes,
            self.evidence_names,
            self.direct_support,
            self.incompatible,
        )
        if errors:
            raise SpecError("; ".join(errors))

    @property
    def num_evidence(self) -> int:
        return len(self.evidence_names)

    def evidence_index(self, name: str) -> int:
        try:
            return self.evidence_names.index(name)
        except ValueError:
            raise SpecError(f"Unknown evidence name: {name}") from None

    def support_matrix(self) -> np.ndarray:
        """C x K 0/1 matrix, row c marks direct_support(c)"""
        return _incidence(self.direct_support, self.num_evidence)

    def incompatible_matrix(self) -> np.ndarray:
        """C x K 0/1 matrix, row c marks incompatible(c)"""
        return _incidence(self.incompatible, self.num_evidence)

    def to_dict(self) -> dict[str, Any]:
        def named(sets: Sequence[frozenset[int]]) -> dict[str, list[str]]:
            return {
                str(c): [self.evidence_names[k] for k in sorted(ks)]
                for c, ks in enumerate(sets)
                if ks
            }

        return {
            "num_classes": self.num_classes,
            "evidence": list(self.evidence_names),
            "direct_support": named(self.direct_support),
            "incompatible": named(self.incompatible),
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @staticmethod
    def detailed_build(
        document: Mapping[str, Any],
    ) -> tuple["ConstraintSpec | None", list[str]]:
        """Builds spec from a constraint document and return list of errors if it's incorrect"""
        errors = []

        num_classes = document.get("num_classes")
        if isinstance(num_classes, bool) or not isinstance(num_classes, int):
            return None, ["num_classes must be an integer"]
        if num_classes < 1:
            return None, [f"num_classes must be positive, got {num_classes}"]

        names = document.get("evidence", [])
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            return None, ["evidence must be a list of strings"]

        seen = set()
        for name in names:
            if name in seen:
                errors.append(f"Duplicate evidence name: {name}")
            seen.add(name)
        if errors:
            return None, errors

        direct_support, support_errors = _read_class_map(
            document.get("direct_support", {}), "direct_support", num_classes, names
        )
        errors.extend(support_errors)

        has_incompatible = "incompatible" in document
        rule = document.get("derive")
        if has_incompatible and rule is not None:
            errors.append("Give either incompatible or derive, not both")
        elif not has_incompatible and rule is None:
            errors.append("Either incompatible or derive must be present")
        elif rule is not None and rule not in DERIVATION_RULES:
            errors.append(f"Unknown derivation rule: {rule}")

        incompatible = tuple(frozenset() for _ in range(num_classes))
        if has_incompatible:
            incompatible, incompatible_errors = _read_class_map(
                document["incompatible"], "incompatible", num_classes, names
            )
            errors.extend(incompatible_errors)

        if errors:
            return None, errors

        errors = _check_invariants(num_classes, names, direct_support, incompatible)
        if errors:
            return None, errors

        spec = ConstraintSpec(num_classes, tuple(names), direct_support, incompatible)
        if rule == HIGHER_DIRECT:
            spec = derive_incompatible(spec)
        return spec, []


def _incidence(sets: Sequence[frozenset[int]], width: int) -> np.ndarray:
    matrix = np.zeros((len(sets), width), dtype=np.float64)
    for c, ks in enumerate(sets):
        matrix[c, sorted(ks)] = 1.0
    return matrix


def _read_class_map(
    raw: Any, section: str, num_classes: int, names: Sequence[str]
) -> tuple[tuple[frozenset[int], ...], list[str]]:
    errors = []
    sets = [set() for _ in range(num_classes)]
    if not isinstance(raw, dict):
        return tuple(map(frozenset, sets)), [f"{section} must be an object"]

    index = {name: k for k, name in enumerate(names)}
    for key, members in raw.items():
        try:
            c = int(key)
        except (TypeError, ValueError):
            errors.append(f"{section}: class key {key!r} is not an integer")
            continue
        if not 0 <= c < num_classes:
            errors.append(f"{section}: class index {c} out of range [0, {num_classes})")
            continue
        if not isinstance(members, list):
            errors.append(f"{section}[{c}] must be a list")
            continue

        for member in members:
            if isinstance(member, str):
                if member not in index:
                    errors.append(f"{section}[{c}]: unknown evidence {member!r}")
                    continue
                sets[c].add(index[member])
            elif isinstance(member, int) and not isinstance(member, bool):
                if not 0 <= member < len(names):
                    errors.append(
                        f"{section}[{c}]: evidence index {member} out of range [0, {len(names)})"
                    )
                    continue
                sets[c].add(member)
            else:
                errors.append(f"{section}[{c}]: bad evidence entry {member!r}")

    return tuple(map(frozenset, sets)), errors


def _check_invariants(
    num_classes: int,
    names: Sequence[str],
    direct_support: Sequence[frozenset[int]],
    incompatible: Sequence[frozenset[int]],
) -> list[str]:
    errors = []
    if num_classes < 1:
        errors.append(f"num_classes must be positive, got {num_classes}")
    if len(set(names)) != len(names):
        errors.append("Evidence names must be distinct")
    if len(direct_support) != num_classes or len(incompatible) != num_classes:
        errors.append("Both class maps must have one entry per class")
        return errors

    num_evidence = len(names)
    for c in range(num_classes):
        for k in direct_support[c] | incompatible[c]:
            if not 0 <= k < num_evidence:
                errors.append(f"Class {c}: evidence index {k} out of range")

    owner = {}
    for c, ks in enumerate(direct_support):
        for k in sorted(ks):
            if k in owner:
                errors.append(
                    f"Evidence {names[k]!r} directly supports both class {owner[k]} and class {c}"
                )
            else:
                owner[k] = c

    for c in range(num_classes):
        overlap = direct_support[c] & incompatible[c]
        if overlap:
            listed = ", ".join(names[k] for k in sorted(overlap))
            errors.append(f"Class {c}: evidence both supports and is incompatible: {listed}")
    return errors


def parse_spec(document: str | Mapping[str, Any]) -> ConstraintSpec:
    """Parses a constraint document given as text or as an already loaded mapping"""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise SpecError(f"Constraint document is not valid JSON: {e.msg}") from e
    if not isinstance(document, Mapping):
        raise SpecError("Constraint document must be an object")

    spec, errors = ConstraintSpec.detailed_build(document)
    if spec is None:
        raise SpecError("; ".join(errors))
    return spec


def load_spec(path: str) -> ConstraintSpec:
    try:
        document = utiles.load_config(path)
    except utiles.ConfigError as e:
        raise SpecError(str(e)) from e
    return parse_spec(document)


def derive_incompatible(spec: ConstraintSpec) -> ConstraintSpec:
    """incompatible(c) is the union of direct_support over every higher class"""
    derived = [frozenset()] * spec.num_classes
    above = frozenset()
    for c in reversed(range(spec.num_classes)):
        derived[c] = above
        above = above | spec.direct_support[c]
    return replace(spec, incompatible=tuple(derived))


def evidence_vector(spec: ConstraintSpec, present: Iterable[str] = ()) -> np.ndarray:
    """+1 at the named findings, -1 elsewhere"""
    z = -np.ones(spec.num_evidence, dtype=np.int8)
    for name in present:
        z[spec.evidence_index(name)] = 1
    return z


def validate_evidence(spec: ConstraintSpec, z: Sequence[int]) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != (spec.num_evidence,):
        raise SpecError(
            f"Evidence vector has length {z.size}, spec has {spec.num_evidence} findings"
        )
    if not np.all((z == 1) | (z == -1)):
        raise SpecError("Evidence entries must be -1 or +1")
    return z


def validate_class(spec: ConstraintSpec, y: int) -> int:
    if not 0 <= y < spec.num_classes:
        raise SpecError(f"Class {y} out of range [0, {spec.num_classes})")
    return int(y)


def is_incompatible(spec: ConstraintSpec, y: int, z: np.ndarray) -> bool:
    return any(z[k] == 1 for k in spec.incompatible[y])


def is_insufficient(spec: ConstraintSpec, y: int, z: np.ndarray) -> bool:
    # classes without direct support are exempt from the sufficiency clause
    support = spec.direct_support[y]
    return bool(support) and all(z[k] == -1 for k in support)


def check_consistent(spec: ConstraintSpec, y: int, z: Sequence[int]) -> Verdict:
    y = validate_class(spec, y)
    z = validate_evidence(spec, z)

    incompatible = is_incompatible(spec, y, z)
    insufficient = is_insufficient(spec, y, z)
    if incompatible and insufficient:
        return Verdict.BOTH
    if incompatible:
        return Verdict.INCOMPATIBLE
    if insufficient:
        return Verdict.INSUFFICIENT
    return Verdict.CONSISTENT
