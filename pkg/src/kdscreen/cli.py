"""``kdscreen`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 undefined metric,
5 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .balance import BalanceError
from .config import ConfigError, ExperimentConfig, Stage
from .evaluation import UndefinedMetricError
from .ingest import IngestError
from .signals import SignalError
from .training import TrainingError
from .windowing import DegenerateChannelError, LeakageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_METRIC, EXIT_INTERNAL = 0, 2, 3, 4, 5

COMMANDS = {
    "synth": Stage.SYNTH,
    "preprocess": Stage.PREPROCESS,
    "pretrain": Stage.PRETRAIN,
    "finetune": Stage.FINETUNE,
    "external": Stage.EXTERNAL,
    "report": Stage.REPORT,
}

log = logging.getLogger("kdscreen")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdscreen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--arch")
        s.add_argument("--balance")
        s.add_argument("--jobs", type=int)
        s.add_argument("--events", help="event log CSV")
        s.add_argument("--signals", help="signal log CSV")
        s.add_argument("--labels", help="labels CSV")
        s.add_argument("--task-kind", dest="task_kind", choices=["fixed_text", "free_text"])
        s.add_argument("--source", help="record directory (or checkpoint) of the previous stage")
        s.add_argument("--name", help="dataset label used in reports")
        s.add_argument("--k", type=int, help="number of folds")
        s.add_argument("--epochs", type=int)
        if name == "report":
            s.add_argument("records", nargs="*", help="record directories")
            s.add_argument("--placeholders", action="store_true",
                           help="add empty rows for architectures not implemented here")
            s.add_argument("--no-figures", dest="figures", action="store_false", default=None)
        if name == "synth":
            s.add_argument("--n-pd", type=int)
            s.add_argument("--n-hc", type=int)
            s.add_argument("--prefix", help="subject id prefix")
    return p


def config_from_args(args) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    data["stage"] = COMMANDS[args.command].value
    for key in ("seed", "out", "arch", "jobs", "events", "signals", "labels", "task_kind",
                "source", "name", "k"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if args.balance is not None:
        key = "finetune_balance" if args.command == "finetune" else "balance"
        data[key] = args.balance
    if args.epochs is not None:
        data["train"] = {**data.get("train", {}), "epochs": args.epochs}
    if args.command == "report":
        if args.records:
            data["records"] = args.records
        if args.placeholders:
            data["placeholders"] = True
        if args.figures is not None:
            data["figures"] = args.figures
    if args.command == "synth":
        synth = dict(data.get("synth", {}))
        for src, dst in (("n_pd", "n_pd"), ("n_hc", "n_hc"), ("prefix", "subject_prefix")):
            v = getattr(args, src)
            if v is not None:
                synth[dst] = v
        data["synth"] = synth
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .orchestrator import run  # deferred: keeps --help fast

    try:
        cfg = config_from_args(args)
        record = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, SignalError, DegenerateChannelError, BalanceError, TrainingError,
            LeakageError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    summary = record.get("summary")
    print(json.dumps({"stage": record["stage"], "status": record["status"], "out": str(cfg.out),
                      **({"summary": summary} if summary else {})}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
