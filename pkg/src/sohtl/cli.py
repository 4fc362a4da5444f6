"""Command-line entry point: ``sohtl <subcommand> ...``.

Exit codes: 0 success, 2 invalid arguments or input data, 3 target rejected
by the similarity gate, 1 anything else. Errors go to stderr as
``error:<kind>:<message>``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

from . import dataset, evaluation, pipeline
from .cva import LagSpec
from .errors import (
    InsufficientData,
    InvalidInput,
    NotFound,
    NotTransferable,
    ParseError,
    SchemaError,
    ShapeError,
    SohError,
)
from .nn import GruConfig, TrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("layer sizes must be positive")
    return values


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1), got {v}")
    return v


def _dropout(text):
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {v}")
    return v


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, args, inputs, seeds, started):
    manifest = {
        "command_line": sys.argv[:1] + list(args.argv),
        "seeds": seeds,
        "inputs": {str(p): _file_digest(p) for p in inputs},
        "outputs": [str(out)],
        "wall_time_s": round(time.time() - started, 3),
    }
    pipeline.atomic_write(Path(str(out) + ".manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _net_args(p, hidden, dense, epochs, dropout=None):
    p.add_argument("--hidden", type=_int_list, default=hidden, metavar="H1,H2",
                   help=f"GRU layer sizes, neurons (default {','.join(map(str, hidden))})")
    p.add_argument("--dense", type=_positive_int, default=dense, help=f"dense layer size, neurons (default {dense})")
    p.add_argument("--epochs", type=_positive_int, default=epochs, help=f"training epochs (default {epochs})")
    if dropout is not None:
        p.add_argument("--dropout", type=_dropout, default=dropout,
                       help=f"dropout rate after each GRU layer, fraction (default {dropout})")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 0.001)")
    p.add_argument("--batch-size", type=_positive_int, default=16, help="mini-batch size, cycles (default 16)")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling and dropout (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sohtl", description="Transfer-learning battery SOH estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert a CSV pair into a battery file")
    p.add_argument("--cycles", required=True, help="CSV with battery_id,cycle_index,sample_index,voltage_v")
    p.add_argument("--capacity", required=True, help="CSV with battery_id,cycle_index,capacity_ah")
    p.add_argument("--id", required=True, help="battery id to extract")
    p.add_argument("--nominal", type=float, default=dataset.DEFAULT_NOMINAL_CAPACITY,
                   help="nominal capacity, Ah (default 1.1)")
    p.add_argument("--protocol", default="", help="charge protocol label (default empty)")
    p.add_argument("--out", required=True, help="battery JSON file to write")

    p = sub.add_parser("synth", help="generate a synthetic battery")
    p.add_argument("--profile", required=True, help="JSON file with SynthProfile fields")
    p.add_argument("--seed", type=int, default=None, help="overrides the profile seed (default: profile value)")
    p.add_argument("--out", required=True, help="battery JSON file to write")

    p = sub.add_parser("train-source", help="fit CVA and the source network")
    p.add_argument("--battery", required=True, help="source battery JSON file")
    p.add_argument("--p", type=_positive_int, default=32, help="past lag, samples (default 32)")
    p.add_argument("--f", type=_positive_int, default=32, help="future lag, samples (default 32)")
    p.add_argument("--beta", type=_fraction, default=0.95, help="control-limit level, fraction (default 0.95)")
    p.add_argument("--retained", type=_positive_int, default=None,
                   help="number of retained CVs (default: elbow selection)")
    _net_args(p, (300, 500), 100, 90)
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("check-similarity", help="run the T2/Q similarity gate")
    p.add_argument("--source-model", required=True, help="source model file")
    p.add_argument("--target", required=True, help="target battery JSON file")
    p.add_argument("--cycles", type=_positive_int, default=100, help="comparison window, cycles (default 100)")
    p.add_argument("--error-zone", type=float, default=0.15, help="relative error zone, fraction (default 0.15)")
    p.add_argument("--pass-fraction", type=_fraction, default=0.90,
                   help="fraction of cycles that must be inside the zone (default 0.90)")

    p = sub.add_parser("train-target", help="train the residual network on the target window")
    p.add_argument("--source-model", required=True, help="source model file")
    p.add_argument("--target", required=True, help="target battery JSON file")
    p.add_argument("--cycles", type=_positive_int, default=100, help="training window, cycles (default 100)")
    p.add_argument("--error-zone", type=float, default=0.15, help="relative error zone, fraction (default 0.15)")
    p.add_argument("--pass-fraction", type=_fraction, default=0.90, help="gate pass fraction (default 0.90)")
    _net_args(p, (300, 500), 100, 30, dropout=0.2)
    p.add_argument("--force", action="store_true", help="train even if the gate fails")
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("estimate", help="per-cycle capacity estimates")
    p.add_argument("--model", required=True, help="source or target model file")
    p.add_argument("--battery", required=True, help="battery JSON file")
    p.add_argument("--from-cycle", type=_positive_int, default=1, help="first cycle index to estimate (default 1)")
    p.add_argument("--out", required=True, help="CSV file to write")

    p = sub.add_parser("evaluate", help="source-only vs transfer error report")
    p.add_argument("--model", required=True, help="source or target model file")
    p.add_argument("--battery", required=True, help="battery JSON file with measured capacities")
    p.add_argument("--from-cycle", type=_positive_int, default=1, help="first cycle index to score (default 1)")
    p.add_argument("--report", required=True, help="report file to write")
    p.add_argument("--format", choices=["csv", "md"], default="csv", help="report format (default csv)")
    return parser


def cmd_ingest(args):
    b = dataset.load_battery(args.cycles, args.capacity, args.id, args.nominal, args.protocol)
    dataset.write_battery_json(b, args.out)
    return [args.cycles, args.capacity], {}


def cmd_synth(args):
    doc = json.loads(Path(args.profile).read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    profile = dataset.SynthProfile.from_dict(doc)
    dataset.write_battery_json(dataset.synth_battery(profile), args.out)
    return [args.profile], {"profile": profile.seed}


def cmd_train_source(args):
    battery = dataset.read_battery_json(args.battery)
    model = pipeline.train_source(
        battery,
        LagSpec(args.p, args.f),
        args.beta,
        GruConfig(1, args.hidden, args.dense, seed=args.seed),
        TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed),
        retained=args.retained,
    )
    pipeline.save_model(model, args.out)
    return [args.battery], {"network": args.seed, "shuffle": args.seed}


def cmd_check_similarity(args):
    source = pipeline.load_model(args.source_model)
    source = source.source if isinstance(source, pipeline.TargetModel) else source
    target = dataset.read_battery_json(args.target)
    verdict = pipeline.evaluate_transferability(source, target, args.cycles, args.error_zone, args.pass_fraction)
    print(verdict.render())
    return None


def cmd_train_target(args):
    source = pipeline.load_model(args.source_model)
    if not isinstance(source, pipeline.SourceModel):
        raise InvalidInput(f"{args.source_model} is not a source model")
    target = dataset.read_battery_json(args.target)
    model = pipeline.train_target(
        source,
        target,
        args.cycles,
        GruConfig(1, args.hidden, args.dense, (args.dropout,) * len(args.hidden), seed=args.seed),
        TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed),
        force=args.force,
        error_zone=args.error_zone,
        pass_fraction=args.pass_fraction,
    )
    print(model.verdict.render())
    pipeline.save_model(model, args.out)
    return [args.source_model, args.target], {"network": args.seed, "shuffle": args.seed}


def cmd_estimate(args):
    model = pipeline.load_model(args.model)
    battery = dataset.read_battery_json(args.battery)
    cycles = [c for c in battery.cycles if c.cycle_index >= args.from_cycle]
    if not cycles:
        raise InvalidInput(f"no cycles at or after {args.from_cycle}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle_index", "source_component", "residual_component", "total", "soh", "measured"])
    for c, e in zip(cycles, pipeline.estimate_cycles(model, cycles)):
        w.writerow([e.cycle_index, repr(e.source_component), repr(e.residual_component),
                    repr(e.total), repr(e.soh), repr(c.capacity)])
    pipeline.atomic_write(Path(args.out), buf.getvalue())
    return [args.model, args.battery], {}


def cmd_evaluate(args):
    model = pipeline.load_model(args.model)
    battery = dataset.read_battery_json(args.battery)
    report = evaluation.compare(model, battery, args.from_cycle)
    evaluation.emit_report(report, args.format, args.report)
    return [args.model, args.battery], {}


COMMANDS = {
    "ingest": (cmd_ingest, "out"),
    "synth": (cmd_synth, "out"),
    "train-source": (cmd_train_source, "out"),
    "check-similarity": (cmd_check_similarity, None),
    "train-target": (cmd_train_target, "out"),
    "estimate": (cmd_estimate, "out"),
    "evaluate": (cmd_evaluate, "report"),
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error:usage:{exc}", file=sys.stderr)
        return 2
    args.argv = argv
    func, out_attr = COMMANDS[args.command]
    try:
        result = func(args)
        if result is not None and out_attr is not None:
            inputs, seeds = result
            _write_manifest(getattr(args, out_attr), args, inputs, seeds, started)
    except NotTransferable as exc:
        print(f"{exc.verdict.render()}", file=sys.stdout)
        print(f"error:{exc.kind}:{exc}", file=sys.stderr)
        return 3
    except (InvalidInput, NotFound, SchemaError, ParseError, ShapeError, InsufficientData) as exc:
        print(f"error:{exc.kind}:{exc}", file=sys.stderr)
        return 2
    except SohError as exc:
        print(f"error:{exc.kind}:{exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error:io:{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
