"""Leave-one-domain-out experiments and the sweeps built on them.

A *cell* is one (unseen domain, seed) pair: federations are trained on the
remaining domains, the DAM is fitted on their feature uploads, and every
requested method is scored on the unseen test split (and on the seen test
splits, recorded separately).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ExperimentConfig, dump_config
from .fedsim import (
    FederationResult,
    LrSchedule,
    make_clients,
    param_set_to_bytes,
    run_federation,
    save_checkpoint,
)
from .metrics import EvalReport, evaluate, write_csv
from .mla import DomainAttention, FeatureExtractor, build_bank, build_extractor, mla_inference, train_dam
from .segnet import NetConfig, ParamSet, SegNet, build_segnet
from .synthdata import FederationDataset, generate
from .tensor import no_grad

log = logging.getLogger(__name__)

PLAIN_METHODS = ("fedavg-baseline", "mla-only")
MLA_METHODS = ("mla-only", "mla-bin")


class SingleDomainAttention:
    """Stand-in DAM for a federation with one seen domain: weight 1 on it."""

    def predict_proba(self, X):
        return np.ones((len(np.atleast_2d(X)), 1))


@dataclass
class CellOutcome:
    unseen: List[EvalReport]
    seen: List[EvalReport]
    logs: Dict[str, list] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)


def method_net_config(cfg: ExperimentConfig, method: str, bin_depth: Optional[int] = None,
                      block_kind: Optional[str] = None) -> NetConfig:
    """Baseline and MLA-only use the plain network; the BIN methods use the configured blocks."""
    if method in PLAIN_METHODS:
        return cfg.net_config(bin_depth=0, block_kind="plain")
    return cfg.net_config(bin_depth=bin_depth, block_kind=block_kind)


def make_dataset(cfg: ExperimentConfig, seed: int) -> FederationDataset:
    d = cfg.data
    return generate(d.domains, d.per_domain, d.image_size, seed, test_fraction=d.test_fraction,
                    structures=d.structures)


def schedule_of(cfg: ExperimentConfig) -> LrSchedule:
    f = cfg.federation
    return LrSchedule(f.lr, f.lr_step, f.lr_factor)


def train_federation(ds: FederationDataset, seen: Sequence[int], net_cfg: NetConfig,
                     cfg: ExperimentConfig, seed: int, threads: int = 1) -> FederationResult:
    by_id = {d.domain: d for d in ds.domains}
    clients = make_clients([(i, by_id[i].train_images, by_id[i].train_masks) for i in seen], net_cfg, seed)
    f = cfg.federation
    return run_federation(clients, f.rounds, net_cfg, seed, epochs_per_round=f.epochs_per_round,
                          batch_size=f.batch_size, schedule=schedule_of(cfg), threads=threads)


def fit_attention(ds: FederationDataset, seen: Sequence[int], cfg: ExperimentConfig,
                  seed: int) -> Tuple[FeatureExtractor, object]:
    m = cfg.mla
    extractor = build_extractor(m.extractor_levels, m.extractor_base_channels, seed)
    if len(seen) == 1:
        return extractor, SingleDomainAttention()
    by_id = {d.domain: d for d in ds.domains}
    bank = build_bank({i: by_id[i].train_images for i in seen}, extractor)
    dam = train_dam(bank, m.dam_epochs, m.dam_lr, seed, m.dam_hidden, m.dam_batch_size)
    return extractor, dam


def global_predictor(net: SegNet, params: ParamSet, batch_size: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    net.load_param_set(params)

    def predict(images):
        with no_grad():
            return np.concatenate([net.forward(images[s:s + batch_size], training=False).data
                                   for s in range(0, len(images), batch_size)])
    return predict


def mla_predictor(net: SegNet, local: Sequence[ParamSet], dam, extractor: FeatureExtractor,
                  cfg: ExperimentConfig) -> Callable[[np.ndarray], np.ndarray]:
    def predict(images):
        return mla_inference(local, dam, extractor, images, net, cfg.mla.granularity, cfg.mla.eval_batch_size)
    return predict


def _digest(ps: ParamSet) -> str:
    return hashlib.sha256(param_set_to_bytes(ps)).hexdigest()


def run_cell(cfg: ExperimentConfig, ds: FederationDataset, unseen: int, seed: int,
             methods: Sequence[str], seen: Optional[Sequence[int]] = None, threads: int = 1,
             bin_depth: Optional[int] = None, block_kind: Optional[str] = None,
             checkpoint_dir: Optional[Path] = None, method_labels: Optional[Dict[str, str]] = None,
             dam_override=None) -> CellOutcome:
    """Train what ``methods`` need for one held-out domain and score them."""
    if seen is None:
        seen = [d.domain for d in ds.domains if d.domain != unseen]
    if unseen in seen:
        raise ValueError(f"domain {unseen} cannot be both seen and unseen")
    labels = method_labels or {}
    by_id = {d.domain: d for d in ds.domains}
    unseen_set = {unseen: (by_id[unseen].test_images, by_id[unseen].test_masks)}
    seen_sets = {i: (by_id[i].test_images, by_id[i].test_masks) for i in seen}

    feds: Dict[NetConfig, FederationResult] = {}
    out = CellOutcome([], [])
    attention = None
    for method in methods:
        net_cfg = method_net_config(cfg, method, bin_depth, block_kind)
        if net_cfg not in feds:
            t0 = time.perf_counter()
            feds[net_cfg] = train_federation(ds, seen, net_cfg, cfg, seed, threads)
            tag = f"depth{net_cfg.bin_depth}-{net_cfg.block_kind.value}"
            log.info("unseen %d seed %d: federation %s trained in %.1fs", unseen, seed, tag,
                     time.perf_counter() - t0)
            res = feds[net_cfg]
            out.logs[tag] = [{"round": l.round, "lr": l.lr, "client_dice": l.client_dice} for l in res.logs]
            out.checksums[f"global-{tag}"] = _digest(res.global_params)
            if checkpoint_dir is not None:
                checkpoint_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(res.global_params, checkpoint_dir / f"global-{tag}-unseen{unseen}-seed{seed}.mlbn")
        res = feds[net_cfg]
        net = build_segnet(net_cfg, seed)
        if method in MLA_METHODS:
            if attention is None:
                attention = fit_attention(ds, seen, cfg, seed)
                if dam_override is not None:
                    attention = (attention[0], dam_override)
            predict = mla_predictor(net, res.local_params, attention[1], attention[0], cfg)
        else:
            predict = global_predictor(net, res.global_params)
        name = labels.get(method, method)
        out.unseen.append(evaluate(predict, unseen_set, name, unseen, seed))
        out.seen.append(evaluate(predict, seen_sets, name, unseen, seed))
    return out


@dataclass
class RunRecord:
    command: str
    config: str
    seeds: List[int]
    dataset_checksums: Dict[str, str] = field(default_factory=dict)
    cells: List[dict] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    status: str = "running"

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class RunOutput:
    unseen: List[EvalReport]
    seen: List[EvalReport]
    record: RunRecord
    extra_columns: Tuple[str, ...] = ()

    def unseen_csv(self) -> str:
        return write_csv(self.unseen, extra_columns=self.extra_columns, average=False)

    def seen_csv(self) -> str:
        return write_csv(self.seen, extra_columns=self.extra_columns)


def _write_outputs(out_dir: Optional[Path], result: RunOutput, stem: str) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in ((f"{stem}.csv", result.unseen_csv()), (f"{stem}-seen.csv", result.seen_csv())):
        (out_dir / name).write_text(text)
        result.record.outputs[name] = hashlib.sha256(text.encode()).hexdigest()
    result.record.save(out_dir / f"{stem}-manifest.json")


def run_cells(cfg: ExperimentConfig, command: str, cells: Sequence[dict], out_dir: Optional[Path] = None,
              threads: Optional[int] = None, extra_columns: Tuple[str, ...] = (),
              save_checkpoints: bool = False) -> RunOutput:
    """Run a list of cells; each dict holds ``run_cell`` keyword arguments plus
    ``seed``, ``unseen`` and optional ``extra`` column values.

    Partial results are written after every cell so a failure leaves a
    consistent prefix on disk.
    """
    threads = cfg.run.threads if threads is None else threads
    record = RunRecord(command, dump_config(cfg), list(cfg.run.seeds))
    result = RunOutput([], [], record, extra_columns)
    datasets: Dict[int, FederationDataset] = {}
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=1):
            for cell in cells:
                cell = dict(cell)
                seed, unseen, extra = cell.pop("seed"), cell.pop("unseen"), cell.pop("extra", {})
                if seed not in datasets:
                    datasets[seed] = make_dataset(cfg, seed)
                    record.dataset_checksums[str(seed)] = datasets[seed].checksum()
                ckpt = out_dir / "checkpoints" if (save_checkpoints and out_dir is not None) else None
                outcome = run_cell(cfg, datasets[seed], unseen, seed, threads=threads, checkpoint_dir=ckpt, **cell)
                for rep in outcome.unseen + outcome.seen:
                    rep.extra.update(extra)
                result.unseen.extend(outcome.unseen)
                result.seen.extend(outcome.seen)
                record.cells.append({"seed": seed, "unseen": unseen, "extra": extra,
                                     "methods": [r.method for r in outcome.unseen],
                                     "unseen_dsc": [r.rows[0].dsc for r in outcome.unseen],
                                     "logs": outcome.logs, "checksums": outcome.checksums})
                _write_outputs(out_dir, result, command)
        record.status = "ok"
    except Exception as exc:
        record.status = f"failed: {type(exc).__name__}: {exc}"
        raise
    finally:
        record.wall_clock_s = round(time.perf_counter() - t0, 3)
        _write_outputs(out_dir, result, command)
    return result


# Commands ------------------------------------------------------------------------

def loo(cfg: ExperimentConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None,
        methods: Optional[Sequence[str]] = None, save_checkpoints: bool = True) -> RunOutput:
    methods = list(methods or [cfg.run.method])
    cells = [dict(seed=s, unseen=u, methods=methods) for s in cfg.run.seeds for u in cfg.unseen_domains()]
    return run_cells(cfg, "loo", cells, out_dir, threads, save_checkpoints=save_checkpoints)


def ablate(cfg: ExperimentConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None) -> RunOutput:
    """Baseline, MLA-only, BIN-only and MLA+BIN on shared data and seeds."""
    cells = [dict(seed=s, unseen=u, methods=["fedavg-baseline", "mla-only", "bin-only", "mla-bin"])
             for s in cfg.run.seeds for u in cfg.unseen_domains()]
    return run_cells(cfg, "ablate", cells, out_dir, threads)


def sweep_bin_depth(cfg: ExperimentConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None,
                    depths: Optional[Sequence[int]] = None) -> RunOutput:
    """The configured method at every BIN depth 0..levels."""
    depths = list(range(cfg.net.levels + 1)) if depths is None else list(depths)
    method = cfg.run.method
    cells = [dict(seed=s, unseen=u, methods=[method], bin_depth=dep, extra={"bin_depth": dep})
             for dep in depths for s in cfg.run.seeds for u in cfg.unseen_domains()]
    if method in PLAIN_METHODS:
        log.warning("method %s ignores bin_depth; every depth repeats the plain network", method)
    return run_cells(cfg, "sweep-bin-depth", cells, out_dir, threads, extra_columns=("bin_depth",))


def client_subset(seen: Sequence[int], count: int, seed: int) -> List[int]:
    """Seed-deterministic subset of ``count`` seen domains, in domain order."""
    if not 1 <= count <= len(seen):
        raise ValueError(f"client count {count} outside [1, {len(seen)}]")
    rng = np.random.default_rng([seed, count])
    return sorted(int(x) for x in rng.choice(np.asarray(seen), size=count, replace=False))


def sweep_clients(cfg: ExperimentConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None,
                  counts: Optional[Sequence[int]] = None) -> RunOutput:
    """MLA-BIN and FedAvg trained on growing subsets of the seen domains."""
    k = cfg.data.domains - 1
    counts = list(range(1, k + 1)) if counts is None else list(counts)
    cells = []
    for c in counts:
        for s in cfg.run.seeds:
            for u in cfg.unseen_domains():
                seen = [d for d in range(cfg.data.domains) if d != u]
                cells.append(dict(seed=s, unseen=u, methods=["fedavg-baseline", "mla-bin"],
                                  seen=client_subset(seen, c, s), extra={"clients": c}))
    return run_cells(cfg, "sweep-clients", cells, out_dir, threads, extra_columns=("clients",))


def compare_ibn(cfg: ExperimentConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None) -> RunOutput:
    """The configured method with BIN blocks and with IBN blocks at the same depth."""
    method = cfg.run.method
    if method in PLAIN_METHODS:
        raise ValueError("compare-ibn needs a method that uses normalization blocks (bin-only or mla-bin)")
    ibn_label = method.replace("bin", "ibn")
    cells = []
    for s in cfg.run.seeds:
        for u in cfg.unseen_domains():
            cells.append(dict(seed=s, unseen=u, methods=[method], block_kind="bin"))
            cells.append(dict(seed=s, unseen=u, methods=[method], block_kind="ibn",
                              method_labels={method: ibn_label}))
    return run_cells(cfg, "compare-ibn", cells, out_dir, threads)


def evaluate_checkpoint(cfg: ExperimentConfig, params: ParamSet, net_cfg: NetConfig,
                        seeds: Sequence[int], method: str = "checkpoint") -> List[EvalReport]:
    """Score a stored global model on every domain's test split, per seed."""
    reports = []
    with threadpool_limits(limits=1):
        for s in seeds:
            ds = make_dataset(cfg, s)
            predict = global_predictor(build_segnet(net_cfg, s), params)
            reports.append(evaluate(predict, {d.domain: (d.test_images, d.test_masks) for d in ds.domains},
                                    method, None, s))
    return reports


def summarize(reports: Sequence[EvalReport]) -> Dict[str, Dict[int, float]]:
    """Mean DSC per method and seed over the reports' rows."""
    acc: Dict[str, Dict[int, List[float]]] = {}
    for r in reports:
        acc.setdefault(r.method, {}).setdefault(r.seed, []).extend(row.dsc for row in r.rows)
    return {m: {s: float(np.mean(v)) for s, v in by_seed.items()} for m, by_seed in acc.items()}
