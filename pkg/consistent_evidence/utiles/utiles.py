import csv
import json
import os
from typing import Any, Iterable, Iterator, Sequence

import yaml

from .data import WORKERS_ENV


class ConfigError(ValueError):
    pass


class JsonLinesError(ValueError):
    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def load_config(path: str) -> dict:
    """Reads a YAML or JSON config file into a dict"""
    with open(path, "r", encoding="utf-8") as file:
        data = yaml.safe_load(file)

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2)


def save_json(data: Any, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(path, mode="w", encoding="utf-8") as f:
        f.write(dumps(data))
        f.write("\n")


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    """Yields (line number, object) pairs, skipping blank lines"""
    with open(path, "r", encoding="utf-8") as file:
        for lineno, line in enumerate(file, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise JsonLinesError(path, lineno, e.msg) from e
            if not isinstance(obj, dict):
                raise JsonLinesError(path, lineno, "line must hold a JSON object")
            yield lineno, obj


def write_jsonl(rows: Iterable[dict], path: str, append: bool = False) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(path, mode="a" if append else "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def write_csv(header: Sequence[str], rows: Iterable[Sequence[Any]], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(path, mode="w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(cell) for cell in row])


def read_csv(path: str) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def is_integer(value: Any) -> bool:
    # JSON true/false decode to bool, a subclass of int
    return isinstance(value, int) and not isinstance(value, bool)


def is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def format_cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return f"{value}"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1, got {workers}")
    return workers
