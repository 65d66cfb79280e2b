from os.path import dirname, join

import userpaths

BASE_LANG = "en"

BASE_DIR = dirname(dirname(__file__))

RESOURCES_DIR = join(BASE_DIR, "resources")

LOCALE_DIR = join(RESOURCES_DIR, "locale")

SPECS_DIR = join(RESOURCES_DIR, "specs")

CONFIGS_DIR = join(RESOURCES_DIR, "configs")

EDEMA_SPEC_FILE = join(SPECS_DIR, "edema.json")

GEN_CONFIG_FILE = join(CONFIGS_DIR, "gen.yaml")

TRAIN_CONFIG_FILE = join(CONFIGS_DIR, "train.yaml")

DATA_DIR = join(userpaths.get_my_documents(), "consistent evidence")

RUNS_DIR = join(DATA_DIR, "runs")

WORKERS_ENV = "CONSISTENT_EVIDENCE_WORKERS"

CHECKPOINT_FILE = "checkpoint.json"

TRACE_FILE = "trace.jsonl"

METRICS_FILE = "metrics.json"

PREDICTIONS_FILE = "predictions.jsonl"

REPORT_JSON_FILE = "report.json"

REPORT_CSV_FILE = "report.csv"

RUNS_CSV_FILE = "runs.csv"

AGGREGATE_CSV_FILE = "aggregate.csv"

FAILURES_FILE = "failures.json"

METADATA_FILE = "metadata.json"

TRADEOFF_GRID_FILE = join(CONFIGS_DIR, "tradeoff.yaml")

TRADEOFF_SOFT_GRID_FILE = join(CONFIGS_DIR, "tradeoff_soft.yaml")

SLICES_GRID_FILE = join(CONFIGS_DIR, "slices.yaml")
