import logging
import os
from dataclasses import dataclass
from typing import Sequence

from consistent_evidence.harness.sweep import TASK_ONLY
from consistent_evidence.utiles import data, utiles

logger = logging.getLogger(__name__)

COMPARED = ("r1", "r2", "acc_y", "acc_z")

REPORT_HEADER = (
    "omega1",
    "omega2",
    "ref",
    "other",
    *(f"{metric}_{part}" for metric in COMPARED for part in ("ref", "other", "delta")),
)


class GridMismatchError(ValueError):
    pass


@dataclass
class Group:
    name: str
    means: dict[tuple[float, float], dict[str, float]]


def load_groups(paths: Sequence[str]) -> list[Group]:
    """Groups of one or more sweep directories, in input order.

    Task-only baselines sit at a single point and are left out.
    """
    groups: dict[str, Group] = {}
    labels = set()
    for i, path in enumerate(paths):
        if path.endswith(".csv"):
            file_path, directory = path, os.path.dirname(path)
        else:
            file_path, directory = os.path.join(path, data.AGGREGATE_CSV_FILE), path
        if not os.path.exists(file_path):
            raise FileNotFoundError(f"No aggregated results at {file_path}")
        label = os.path.basename(os.path.abspath(directory))
        if label in labels:
            label = f"{label}#{i}"
        labels.add(label)

        for row in utiles.read_csv(file_path):
            if row["mode"] == TASK_ONLY:
                continue
            name = f"{label}:{row['mode']}"
            group = groups.setdefault(name, Group(name, {}))
            point = (float(row["omega1"]), float(row["omega2"]))
            group.means[point] = {metric: float(row[f"{metric}_mean"]) for metric in COMPARED}

    if not groups:
        raise GridMismatchError("No hard or soft results among the inputs")
    return list(groups.values())


def compare(reference: Group, other: Group) -> list[list]:
    missing = [p for p in reference.means if p not in other.means]
    extra = [p for p in other.means if p not in reference.means]
    if missing or extra:
        point = (missing or extra)[0]
        where = other.name if missing else reference.name
        raise GridMismatchError(f"Grid point ({point[0]:g}, {point[1]:g}) is missing from {where}")

    rows = []
    for point in sorted(reference.means):
        ref, oth = reference.means[point], other.means[point]
        row = [point[0], point[1], reference.name, other.name]
        for metric in COMPARED:
            row.extend([ref[metric], oth[metric], oth[metric] - ref[metric]])
        rows.append(row)
    return rows


def build_report(paths: Sequence[str]) -> list[list]:
    groups = load_groups(paths)
    reference, others = groups[0], groups[1:] or groups[:1]
    logger.debug("Comparing %s against %s", ", ".join(g.name for g in others), reference.name)
    return [row for other in others for row in compare(reference, other)]


def write_report(paths: Sequence[str], out_path: str) -> list[list]:
    rows = build_report(paths)
    utiles.write_csv(REPORT_HEADER, rows, out_path)
    return rows
