"""Protocol drivers: BlendFL, FedAvg and SplitNN, plus experiment sweeps."""
from __future__ import annotations

import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn_core
from .client import Client, ModelBundle, build_bundle, minibatches
from .config import (DataConfig, ExperimentConfig, ModelConfig, PartitionConfig, ProtocolConfig,
                     SyntheticSpec, substream, substream_seed)
from .data import generate_synthetic, holdout_split, intersect_fragmented, partition
from .messages import SERVER, ProtocolTrace
from .metrics import macro_auprc, macro_auroc
from .nn_core import Network
from .server import AggregationServer, Submission, ValidationSet, VerticalServer, evaluate_on_validation

log = logging.getLogger(__name__)

HEADS = ("multimodal", "A", "B")
GRID_COLUMNS = ("protocol", "ratio", "n_clients", "seed", "head", "auroc", "auprc", "rounds_to_target")


class RunError(RuntimeError):
    def __init__(self, message, reports=()):
        super().__init__(message)
        self.reports = list(reports)


@dataclass
class Federation:
    """Everything a run needs that is fixed before training starts."""
    datasets: list
    validation: list
    test: list
    alignment: dict
    dim_a: int
    dim_b: int
    n_classes: int
    model: ModelConfig = field(default_factory=ModelConfig)


def prepare_federation(data: DataConfig, part: PartitionConfig, model: ModelConfig, seed: int) -> Federation:
    spec = SyntheticSpec(**data.model_dump(), seed=substream_seed(seed, "data"))
    samples = generate_synthetic(spec)
    train, val, test = holdout_split(samples, part.val_fraction, part.test_fraction,
                                     substream_seed(seed, "data", 1))
    datasets = partition(train, part.n_clients, part.paired_fraction, part.fragmented_fraction,
                         substream_seed(seed, "partition"), layout=part.layout,
                         label_skew=part.label_skew)
    return Federation(datasets, val, test, intersect_fragmented(datasets),
                      data.dim_a, data.dim_b, data.n_classes, model)


@dataclass
class RoundReport:
    round: int
    protocol: str
    losses: dict = field(default_factory=dict)
    validation: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    aggregation: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), sort_keys=True)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


@dataclass
class RunResult:
    reports: list
    model: object
    trace: ProtocolTrace
    clients: list = field(default_factory=list)
    server: object = None

    def final(self) -> RoundReport:
        return self.reports[-1]


def _probe(sample_sets):
    XA = np.vstack([s.x_a for s in sample_sets])
    XB = np.vstack([s.x_b for s in sample_sets])
    y = np.array([s.label for s in sample_sets], dtype=np.int64)
    return XA, XB, y


def _test_metrics(probs_by_head: dict, y) -> dict:
    out = {}
    for head, probs in probs_by_head.items():
        out[head] = {"auroc": macro_auroc(probs, y), "auprc": macro_auprc(probs, y)}
    return out


def _bundle_probs(bundle: ModelBundle, XA, XB) -> dict:
    return {"multimodal": bundle.predict_multimodal(XA, XB),
            "A": bundle.predict("A", XA), "B": bundle.predict("B", XB)}


def _map_clients(fn, clients, parallel: bool):
    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


# -- BlendFL / FedAvg --------------------------------------------------------------

def _run_hybrid(fed: Federation, cfg: ProtocolConfig, *, vertical: bool, strategy: str,
                include_fragmented: bool, protocol: str,
                until: Optional[Callable[[RoundReport], bool]] = None) -> RunResult:
    init = build_bundle(fed.model, fed.dim_a, fed.dim_b, fed.n_classes, substream(cfg.seed, "init"))
    clients = [Client(d, init, substream(cfg.seed, "shuffle", d.client_id), include_fragmented)
               for d in fed.datasets]
    validation = ValidationSet(fed.validation)
    agg = AggregationServer(init, validation, strategy, cfg.metric)
    vserver = VerticalServer(init.g_m, fed.alignment) if vertical else None
    trace = ProtocolTrace()
    XA, XB, y = _probe(fed.test)
    reports = []
    lr, bs = cfg.lr, cfg.batch_size

    for r in range(1, cfg.epochs + 1):
        losses = {"A": [], "B": [], "M": [], "vertical": []}
        trained = {c.client_id: set() for c in clients}
        try:
            for e in range(cfg.local_epochs_per_round):
                # partial (unimodal) phase
                res = _map_clients(lambda c: {m: c.train_local_partial(m, lr, bs) for m in ("A", "B")},
                                   clients, cfg.parallel)
                for c, out in zip(clients, res):
                    for m, loss in out.items():
                        if loss is not None:
                            losses[m].append(loss)
                            trained[c.client_id].add(m)
                    trace.local(r, "partial", c.client_id)

                # fragmented (vertical) phase: one forward/backward over all aligned ids
                if vserver is not None and fed.alignment:
                    tag = (r, e)
                    for m in ("A", "B"):
                        for c in clients:
                            if c.fragmented_ids(m) and c.bundle.encoder(m) is not None:
                                fb = c.forward_fragmented(m, tag)
                                trace.message(r, "features→server", c.client_id, SERVER, fb)
                                vserver.stage(fb)
                    result = vserver.step(lr)
                    if result.loss is not None:
                        losses["vertical"].append(result.loss)
                    for gb in result.gradients:
                        trace.message(r, "grads→clients", SERVER, gb.client_id, gb)
                        clients[gb.client_id].apply_server_gradients(gb.modality, gb.grad, gb.round_tag, lr)
                        trained[gb.client_id].add(gb.modality)

                # paired phase
                res = _map_clients(lambda c: c.train_local_paired(lr, bs), clients, cfg.parallel)
                for c, loss in zip(clients, res):
                    if loss is not None:
                        losses["M"].append(loss)
                        trained[c.client_id].update({"A", "B", "M"})
                        trace.local(r, "paired", c.client_id)

            subs = []
            for c in clients:
                heads = tuple(h for h in ("A", "B", "M") if h in trained[c.client_id]
                              and (h == "M" or c.bundle.can_predict(h)))
                counts = {"A": c.n_records("A"), "B": c.n_records("B"), "M": c.n_paired()}
                subs.append(Submission(c.client_id, c.bundle, heads, counts))
                trace.message(r, "weights→server", c.client_id, SERVER, "ModelBundle")
            n_vert = len(fed.alignment) if vserver is not None else 0
            new, diag = agg.aggregate_round(subs, vserver.g_v if vserver else None, n_vert)
            if vserver is not None and cfg.vertical_sync:
                vserver.g_v = new.g_m
            for c in clients:
                c.load_globals(new)
                trace.message(r, "globals→clients", SERVER, c.client_id, "ModelBundle")
        except Exception as exc:
            raise RunError(f"round {r} failed: {exc}", reports) from exc

        report = RoundReport(
            round=r, protocol=protocol,
            losses={k: _mean(v) for k, v in losses.items()},
            validation={h: diag[k]["post_score"] for h, k in zip(HEADS, ("M", "A", "B"))},
            test=_test_metrics(_bundle_probs(new, XA, XB), y),
            aggregation=diag,
            notes={"aggregation": strategy, "vertical_aligned": n_vert},
        )
        reports.append(report)
        if until is not None and until(report):
            break
    return RunResult(reports, agg.globals, trace, clients, agg)


def run_blendfl(fed: Federation, cfg: ProtocolConfig, until=None) -> RunResult:
    """BlendFL training: partial, vertical and paired phases, then aggregation."""
    return _run_hybrid(fed, cfg, vertical=True, strategy=cfg.aggregation,
                       include_fragmented=cfg.fragmented_in_unimodal, protocol="blendfl", until=until)


def run_fedavg(fed: Federation, cfg: ProtocolConfig, until=None) -> RunResult:
    """Horizontal baseline: local training on every record, sample-weighted averaging."""
    return _run_hybrid(fed, cfg, vertical=False, strategy="fedavg", include_fragmented=True,
                       protocol="fedavg", until=until)


# -- SplitNN -------------------------------------------------------------------------

@dataclass
class SplitModel:
    """Per-client encoders plus the server-side classifier of a SplitNN run."""
    encoders: dict  # client_id -> ModelBundle holding f_a / f_b
    g_v: Network
    routes_a: tuple  # clients whose A encoder was trained
    routes_b: tuple

    def route(self, sample_id: int) -> tuple:
        return (self.routes_a[sample_id % len(self.routes_a)], self.routes_b[sample_id % len(self.routes_b)])

    def predict(self, samples) -> np.ndarray:
        """Server-mediated inference: each sample is encoded by its routed clients."""
        out = np.empty((len(samples), self.g_v.output_dim))
        groups = {}
        for i, s in enumerate(samples):
            groups.setdefault(self.route(s.id), []).append(i)
        for (ca, cb), idx in groups.items():
            XA = np.vstack([samples[i].x_a for i in idx])
            XB = np.vstack([samples[i].x_b for i in idx])
            H = np.hstack([self.encoders[ca].f_a(XA), self.encoders[cb].f_b(XB)])
            out[idx] = self.g_v(H)
        return out


def splitnn_alignment(fed: Federation) -> dict:
    table = {s.id: (d.client_id, d.client_id) for d in fed.datasets for s in d.paired}
    table.update(fed.alignment)
    return dict(sorted(table.items()))


def run_splitnn(fed: Federation, cfg: ProtocolConfig, until=None) -> RunResult:
    """Split learning over every resolvable multimodal record.

    Paired records are self-aligned, fragmented ones use the alignment table;
    partial records cannot be used and are reported as wasted.
    """
    init = build_bundle(fed.model, fed.dim_a, fed.dim_b, fed.n_classes, substream(cfg.seed, "init"))
    enc_only = ModelBundle(f_a=init.f_a, f_b=init.f_b)
    clients = [Client(d, enc_only, substream(cfg.seed, "shuffle", d.client_id)) for d in fed.datasets]
    alignment = splitnn_alignment(fed)
    if not alignment:
        raise RunError("SplitNN has no usable multimodal records")
    ids = list(alignment)
    vserver = VerticalServer(init.g_m, alignment)
    order_rng = substream(cfg.seed, "vertical-shuffle")
    trace = ProtocolTrace()
    validation = ValidationSet(fed.validation)
    XA, XB, y = _probe(fed.test)
    routes_a = tuple(sorted({a for a, _ in alignment.values()}))
    routes_b = tuple(sorted({b for _, b in alignment.values()}))
    wasted = sum(c.n_partial() for c in clients)
    reports = []

    for r in range(1, cfg.epochs + 1):
        losses = []
        try:
            for e in range(cfg.local_epochs_per_round):
                for bi, idx in enumerate(minibatches(len(ids), cfg.batch_size, order_rng)):
                    tag = (r, e, bi)
                    batch = [ids[i] for i in idx]
                    for side, m in ((0, "A"), (1, "B")):
                        owners = {}
                        for sid in batch:
                            owners.setdefault(alignment[sid][side], []).append(sid)
                        for cid in sorted(owners):
                            fb = clients[cid].forward_features(m, owners[cid], tag)
                            trace.message(r, "features→server", cid, SERVER, fb)
                            vserver.stage(fb)
                    result = vserver.step(cfg.lr)
                    losses.append(result.loss)
                    for gb in result.gradients:
                        trace.message(r, "grads→clients", SERVER, gb.client_id, gb)
                        clients[gb.client_id].apply_server_gradients(gb.modality, gb.grad, gb.round_tag, cfg.lr)
        except Exception as exc:
            raise RunError(f"round {r} failed: {exc}", reports) from exc

        model = SplitModel({c.client_id: c.bundle for c in clients}, vserver.g_v, routes_a, routes_b)
        val_probs = model.predict(fed.validation)
        report = RoundReport(
            round=r, protocol="splitnn",
            losses={"vertical": _mean(losses)},
            validation={"multimodal": evaluate_on_validation(val_probs, validation.y, cfg.metric)},
            test=_test_metrics({"multimodal": model.predict(fed.test)}, y),
            notes={"wasted_partial_records": wasted, "usable_records": len(ids),
                   "inference": "requires server classifier"},
        )
        reports.append(report)
        if until is not None and until(report):
            break
    model = SplitModel({c.client_id: c.bundle for c in clients}, vserver.g_v, routes_a, routes_b)
    return RunResult(reports, model, trace, clients, vserver)


RUNNERS = {"blendfl": run_blendfl, "fedavg": run_fedavg, "splitnn": run_splitnn}


def run_protocol(fed: Federation, cfg: ProtocolConfig, until=None) -> RunResult:
    return RUNNERS[cfg.protocol](fed, cfg, until=until)


# -- speedup ---------------------------------------------------------------------------

def rounds_to_target(reports: Sequence[RoundReport], target: float, head: str = "multimodal") -> Optional[int]:
    for rep in reports:
        score = rep.validation.get(head)
        if score is not None and score >= target:
            return rep.round
    return None


@dataclass
class SpeedupResult:
    interval: int
    rounds_fedavg: Optional[float]
    rounds_blendavg: Optional[float]

    @property
    def speedup(self) -> Optional[float]:
        if self.rounds_fedavg is None or self.rounds_blendavg is None:
            return None
        return self.rounds_fedavg / self.rounds_blendavg


def measure_speedup(fed: Federation, cfg: ProtocolConfig, target: float, max_rounds: int) -> SpeedupResult:
    """Rounds-to-target of FedAvg aggregation divided by that of BlendAvg.

    Both runs are BlendFL with identical data, seeds and schedule; only the
    aggregation rule differs.
    """
    head = cfg.target_head
    stop = lambda rep: (rep.validation.get(head) or 0.0) >= target
    rounds = {}
    for strategy in ("fedavg", "blendavg"):
        run_cfg = cfg.model_copy(update={"protocol": "blendfl", "aggregation": strategy, "epochs": max_rounds})
        rounds[strategy] = rounds_to_target(run_blendfl(fed, run_cfg, until=stop).reports, target, head)
    return SpeedupResult(cfg.local_epochs_per_round, rounds["fedavg"], rounds["blendavg"])


def speedup_sweep(exp: ExperimentConfig, intervals: Sequence[int], target: float,
                  max_rounds: int, seed: Optional[int] = None) -> list:
    seed = exp.seeds[0] if seed is None else seed
    fed = prepare_federation(exp.data, exp.partition, exp.model, seed)
    out = []
    for interval in intervals:
        cfg = exp.protocol.model_copy(update={"local_epochs_per_round": int(interval), "seed": seed})
        out.append(measure_speedup(fed, cfg, target, max_rounds))
    return out


def pooled_speedup(per_seed: Sequence[Sequence[SpeedupResult]]) -> list:
    """Median rounds-to-target per interval across seeds.

    An unreached target counts as infinitely many rounds, so the pooled value
    is unreached only when at least half of the seeds never got there.
    """
    out = []
    for results in zip(*per_seed):
        med = {}
        for key in ("rounds_fedavg", "rounds_blendavg"):
            vals = [math.inf if getattr(r, key) is None else getattr(r, key) for r in results]
            m = statistics.median(vals)
            med[key] = None if math.isinf(m) else m
        out.append(SpeedupResult(results[0].interval, **med))
    return out


# -- ablation grid -----------------------------------------------------------------------

def ablation_cells(exp: ExperimentConfig, ratios: Sequence[float], client_counts: Sequence[int]) -> list:
    """(ratio, n_clients) cells: the ratio sweep at a fixed client count, then
    the client sweep at a fixed ratio.  Duplicates are dropped."""
    ab = exp.ablation
    cells = [(float(r), ab.sweep_n_clients) for r in ratios]
    cells += [(ab.sweep_ratio, int(n)) for n in client_counts]
    seen, out = set(), []
    for cell in cells:
        if cell not in seen:
            seen.add(cell)
            out.append(cell)
    return out


def cell_partition(exp: ExperimentConfig, ratio: float, n_clients: int) -> PartitionConfig:
    share = exp.ablation.fragmented_share
    return exp.partition.model_copy(update={
        "n_clients": n_clients, "layout": "round_robin",
        "paired_fraction": ratio * (1.0 - share), "fragmented_fraction": ratio * share,
    })


def run_cell(exp: ExperimentConfig, ratio: float, n_clients: int, seed: int, protocol: str) -> list:
    """One seeded experiment; returns grid rows (one per head)."""
    base = dict(protocol=protocol, ratio=ratio, n_clients=n_clients, seed=seed)
    try:
        fed = prepare_federation(exp.data, cell_partition(exp, ratio, n_clients), exp.model, seed)
        cfg = exp.protocol.model_copy(update={"protocol": protocol, "seed": seed})
        reports = run_protocol(fed, cfg).reports
    except Exception as exc:
        log.error("cell %s failed: %s", base, exc)
        return [dict(base, head="failed", auroc=None, auprc=None, rounds_to_target=None)]
    rows = []
    final = reports[-1]
    for head in HEADS:
        metrics = final.test.get(head)
        rows.append(dict(base, head=head,
                         auroc=None if metrics is None else metrics["auroc"],
                         auprc=None if metrics is None else metrics["auprc"],
                         rounds_to_target=rounds_to_target(reports, exp.protocol.target, head)))
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def run_ablation_grid(exp: ExperimentConfig, ratios: Sequence[float], client_counts: Sequence[int],
                      seeds: Optional[Sequence[int]] = None, protocols: Optional[Sequence[str]] = None,
                      jobs: int = 1) -> list:
    """Rows for every (cell, seed, protocol, head); output order is fixed."""
    seeds = list(exp.seeds if seeds is None else seeds)
    protocols = list(exp.ablation.protocols if protocols is None else protocols)
    tasks = [(exp, ratio, n, seed, proto)
             for ratio, n in ablation_cells(exp, ratios, client_counts)
             for seed in seeds for proto in protocols]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, tasks))
    else:
        results = [_run_cell_args(t) for t in tasks]
    return [row for rows in results for row in rows]


def median_metric(rows, protocol, ratio, n_clients, head="multimodal", metric="auroc") -> Optional[float]:
    vals = [r[metric] for r in rows if r["protocol"] == protocol and r["head"] == head
            and math.isclose(r["ratio"], ratio) and r["n_clients"] == n_clients and r[metric] is not None]
    return statistics.median(vals) if vals else None
