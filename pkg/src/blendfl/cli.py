"""Command-line entry point: ``blendfl run|ablate|speedup|infer``."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

from . import nn_core
from .client import CapabilityError, ModelBundle, local_inference
from .config import ConfigError, ExperimentConfig, load_config
from .data import read_samples
from .messages import ProtocolTrace
from .orchestrator import (GRID_COLUMNS, HEADS, RunError, SplitModel, pooled_speedup, prepare_federation,
                           rounds_to_target, run_ablation_grid, run_protocol, speedup_sweep)

log = logging.getLogger("blendfl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
UNREACHED = "unreached"
SUMMARY_COLUMNS = ("protocol", "head", "rounds", "validation", "test_auroc", "test_auprc", "rounds_to_target")
SPEEDUP_COLUMNS = ("interval", "rounds_fedavg", "rounds_blendavg", "speedup")


class UsageError(Exception):
    pass


def _out_dir(cfg: ExperimentConfig, override) -> Path:
    path = Path(override or cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cell(value):
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return ""
    return repr(value) if isinstance(value, float) else value


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def _model_networks(model) -> dict:
    if isinstance(model, ModelBundle):
        return model.networks()
    if isinstance(model, SplitModel):
        nets = {"g_v": model.g_v}
        for cid, bundle in sorted(model.encoders.items()):
            for name, net in bundle.networks().items():
                nets[f"client{cid}.{name}"] = net
        return nets
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def _summary_rows(reports, protocol: str, target: float) -> list:
    final = reports[-1]
    rows = []
    for head in HEADS:
        if head not in final.test:
            continue
        rows.append({
            "protocol": protocol, "head": head, "rounds": final.round,
            "validation": final.validation.get(head),
            "test_auroc": final.test[head]["auroc"], "test_auprc": final.test[head]["auprc"],
            "rounds_to_target": rounds_to_target(reports, target, head),
        })
    return rows


# -- commands ----------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.output)
    seed = cfg.seeds[0]
    proto = cfg.protocol.model_copy(update={"seed": seed})
    rounds_path = out / "rounds.jsonl"
    status = EXIT_OK
    with open(rounds_path, "w", encoding="utf-8") as fh:
        def emit(report):
            fh.write(report.to_json() + "\n")
            fh.flush()
            return False

        try:
            fed = prepare_federation(cfg.data, cfg.partition, cfg.model, seed)
            result = run_protocol(fed, proto, until=emit)
        except RunError as exc:
            log.error("run failed: %s", exc)
            reports, model, status = exc.reports, None, EXIT_RUNTIME
        except Exception as exc:  # data preparation failures
            log.error("run failed: %s", exc)
            reports, model, status = [], None, EXIT_RUNTIME
        else:
            reports, model = result.reports, result.model

    if model is not None:
        nn_core.save_networks(out / "model.ckpt", _model_networks(model))
    if reports:
        _write_csv(out / "summary.csv", SUMMARY_COLUMNS, _summary_rows(reports, proto.protocol, proto.target))
    log.info("wrote artifacts to %s", out)
    return status


def _sweep_list(values, default, name):
    if values is None:
        return list(default)
    if not values:
        raise UsageError(f"--{name} needs at least one value")
    return values


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ratios = _sweep_list(args.ratios, cfg.ablation.ratios, "ratios")
    clients = _sweep_list(args.clients, cfg.ablation.client_counts, "clients")
    seeds = _sweep_list(args.seeds, cfg.seeds, "seeds")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise UsageError("--ratios must lie in [0, 1]")
    if any(n < 2 for n in clients):
        raise UsageError("--clients must be at least 2")
    out = _out_dir(cfg, args.output)
    rows = run_ablation_grid(cfg, ratios, clients, seeds=seeds, jobs=args.jobs)
    _write_csv(out / "grid.csv", GRID_COLUMNS, rows)
    failed = sum(1 for r in rows if r["head"] == "failed")
    if failed:
        log.error("%d cell(s) failed; see grid.csv", failed)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_speedup(args) -> int:
    cfg = load_config(args.config)
    intervals = _sweep_list(args.intervals, cfg.speedup.intervals, "intervals")
    target = cfg.speedup.target if args.target is None else args.target
    if not 0.5 < target < 1.0:
        raise UsageError("--target must lie strictly between 0.5 and 1")
    if any(i < 1 for i in intervals):
        raise UsageError("--intervals must be positive")
    max_rounds = args.max_rounds or cfg.speedup.max_rounds
    out = _out_dir(cfg, args.output)
    per_seed = [speedup_sweep(cfg, intervals, target, max_rounds, seed=s) for s in cfg.seeds]
    rows = []
    for res in pooled_speedup(per_seed):
        rows.append({
            "interval": res.interval,
            "rounds_fedavg": UNREACHED if res.rounds_fedavg is None else res.rounds_fedavg,
            "rounds_blendavg": UNREACHED if res.rounds_blendavg is None else res.rounds_blendavg,
            "speedup": UNREACHED if res.speedup is None else res.speedup,
        })
    _write_csv(out / "speedup.csv", SPEEDUP_COLUMNS, rows)
    return EXIT_OK


def load_bundle(path) -> ModelBundle:
    try:
        return ModelBundle.from_networks(nn_core.load_networks(path))
    except ValueError as exc:
        raise UsageError(f"{path}: not a local model checkpoint ({exc})") from None


def infer(bundle: ModelBundle, samples, trace: ProtocolTrace, party="client") -> list:
    """Score samples with locally held models; every step is a local trace event."""
    out = []
    for s in samples:
        for m, x in (("A", s.x_a), ("B", s.x_b)):
            enc = bundle.encoder(m)
            if x is not None and enc is not None and x.shape[0] != enc.input_dim:
                raise UsageError(f"sample {s.id}: modality {m} has {x.shape[0]} features, "
                                 f"model expects {enc.input_dim}")
        try:
            pred = local_inference(bundle, s)
        except CapabilityError as exc:
            raise UsageError(str(exc)) from None
        trace.local(0, "infer", party)
        out.append((s.id, pred))
    return out


def cmd_infer(args) -> int:
    bundle = load_bundle(args.checkpoint)
    try:
        samples = read_samples(args.samples)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    trace = ProtocolTrace()
    for sid, pred in infer(bundle, samples, trace):
        print(f"{sid}\t{pred.label}\t{pred.head}")
    log.info("server messages during inference: %d", len(trace.server_messages()))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one protocol and write rounds.jsonl, model.ckpt, summary.csv")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="override output_dir from the config")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="ratio and client-count sweep, written to grid.csv")
    p.add_argument("config")
    p.add_argument("--ratios", type=float, nargs="*")
    p.add_argument("--clients", type=int, nargs="*")
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("speedup", help="rounds-to-target of FedAvg vs BlendAvg aggregation")
    p.add_argument("config")
    p.add_argument("--intervals", type=int, nargs="*")
    p.add_argument("--target", type=float)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_speedup)

    p = sub.add_parser("infer", help="predict locally from a checkpoint, no server involved")
    p.add_argument("checkpoint")
    p.add_argument("samples")
    p.set_defaults(fn=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
