import argparse
import logging
import os
from typing import Sequence

from consistent_evidence.core.constraints import load_spec
from consistent_evidence.core.losses import RegMode
from consistent_evidence.core.metrics import REPORT_CSV_HEADER, dataset_report, load_predictions, write_predictions
from consistent_evidence.core.synthdata import GenConfig, generate, load_dataset, save_dataset
from consistent_evidence.core.trainer import TrainConfig, evaluate, predict_records, train
from consistent_evidence.harness import report, sweep
from consistent_evidence.utiles import data, lang, utiles

logger = logging.getLogger(__name__)


def default_out(name: str) -> str:
    return os.path.join(data.RUNS_DIR, name)


def cmd_validate(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    records = load_predictions(args.predictions, spec)
    result = dataset_report(spec, records)

    out = args.out or default_out("validate")
    utiles.save_json(result.to_dict(), os.path.join(out, data.REPORT_JSON_FILE))
    utiles.write_csv(REPORT_CSV_HEADER, result.csv_rows(), os.path.join(out, data.REPORT_CSV_FILE))
    print(lang.getlocale("validate_done", n=result.n, r1=result.r1_total, r2=result.r2_total, out=out))
    return 0


def cmd_gen(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    config = GenConfig.from_dict(utiles.load_config(args.config))
    if args.seed is not None:
        config = GenConfig.from_dict({**config.to_dict(), "seed": args.seed})
    dataset = generate(config, spec)

    out = args.out or os.path.join(data.DATA_DIR, "dataset.jsonl")
    save_dataset(dataset, out)
    print(lang.getlocale("gen_done", pairs=len(dataset.train.pairs), out=out))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    config = TrainConfig.from_dict(utiles.load_config(args.config))
    overrides = {}
    if args.omega1 is not None:
        overrides["omega1"] = args.omega1
    if args.omega2 is not None:
        overrides["omega2"] = args.omega2
    if args.mode is not None:
        overrides["mode"] = RegMode(args.mode)
    if overrides:
        config = config.with_loss(**overrides)
    seed = config.seeds[0] if args.seed is None else args.seed

    if args.data:
        dataset = load_dataset(args.data, spec)
    else:
        dataset = generate(GenConfig.from_dict(utiles.load_config(data.GEN_CONFIG_FILE)), spec)

    out = args.out or default_out("train")
    result = train(
        dataset.train.pairs,
        dataset.validation,
        spec,
        config,
        seed,
        trace_path=os.path.join(out, data.TRACE_FILE),
    )
    result.checkpoint.save(os.path.join(out, data.CHECKPOINT_FILE))
    metrics = evaluate(result.checkpoint, dataset.test, spec)
    utiles.save_json(metrics.to_dict(), os.path.join(out, data.METRICS_FILE))
    write_predictions(predict_records(result.checkpoint, dataset.test), os.path.join(out, data.PREDICTIONS_FILE))

    print(
        lang.getlocale(
            "train_done",
            step=result.checkpoint.step,
            acc=metrics.acc_y,
            r1=metrics.r1,
            r2=metrics.r2,
            out=out,
        )
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    grid = sweep.SweepGrid.load(args.grid)
    out = args.out or default_out("sweep")
    result = sweep.run_sweep(grid, out, workers=args.workers)

    print(lang.getlocale("sweep_done", runs=len(result.rows), points=len(result.aggregates), out=out))
    if not result.ok:
        print(lang.getlocale("sweep_failures", failed=len(result.failures)))
        return 1
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out = args.out or os.path.join(data.RUNS_DIR, data.REPORT_CSV_FILE)
    rows = report.write_report(args.inputs, out)
    print(lang.getlocale("report_done", rows=len(rows), out=out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consistent_evidence",
        description="Consistency-constrained multitask classification experiments",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--lang", default=data.BASE_LANG, choices=lang.languages())
    commands = parser.add_subparsers(dest="command", required=True)

    validate = commands.add_parser("validate", help="inconsistency report of a predictions file")
    validate.add_argument("--spec", default=data.EDEMA_SPEC_FILE)
    validate.add_argument("--predictions", required=True)
    validate.add_argument("--out")
    validate.set_defaults(handler=cmd_validate)

    gen = commands.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--spec", default=data.EDEMA_SPEC_FILE)
    gen.add_argument("--config", default=data.GEN_CONFIG_FILE)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")
    gen.set_defaults(handler=cmd_gen)

    train_cmd = commands.add_parser("train", help="train one model and evaluate it on the test split")
    train_cmd.add_argument("--spec", default=data.EDEMA_SPEC_FILE)
    train_cmd.add_argument("--data", help="dataset file; the default generation config is used when omitted")
    train_cmd.add_argument("--config", default=data.TRAIN_CONFIG_FILE)
    train_cmd.add_argument("--omega1", type=float)
    train_cmd.add_argument("--omega2", type=float)
    train_cmd.add_argument("--mode", choices=[m.value for m in RegMode])
    train_cmd.add_argument("--seed", type=int)
    train_cmd.add_argument("--out")
    train_cmd.set_defaults(handler=cmd_train)

    sweep_cmd = commands.add_parser("sweep", help="train over a grid of regularizer weights")
    sweep_cmd.add_argument("--grid", required=True)
    sweep_cmd.add_argument("--workers", type=int, help=f"defaults to ${data.WORKERS_ENV} or 1")
    sweep_cmd.add_argument("--out")
    sweep_cmd.set_defaults(handler=cmd_sweep)

    report_cmd = commands.add_parser("report", help="compare aggregated sweep results")
    report_cmd.add_argument("--in", dest="inputs", nargs="+", required=True)
    report_cmd.add_argument("--out")
    report_cmd.set_defaults(handler=cmd_report)

    return parser


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    lang.set_lang(args.lang)

    try:
        return args.handler(args)
    except (ValueError, OSError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(lang.getlocale("failed", command=args.command, error=e))
        return 1
