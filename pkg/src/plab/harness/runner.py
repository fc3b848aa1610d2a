"""Run-matrix execution: pretraining cache, per-cell fine-tuning and capture, records."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..models import Model, build_model, load_checkpoint, save_checkpoint
from ..objdist import BatchSchedule, DistanceReport, distance_report
from ..objectives import PRETRAIN_ENCODER, reference_objective
from ..repmetrics import METRICS, DepthProfile, NormalizedProfile, SlopeFit, fit_locality_slope, normalize_profile, profile_from_runs
from ..stats import spearman_rho
from ..trainer import ConditionConfig, train
from .corpus import ProbeSet, corpus_hash, generate_corpus, read_corpus, split_corpus
from .experiment import ExperimentSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class RunRecord:
    """Everything needed to re-analyse one fine-tuning run without its weights.

    ``wall_time`` lives outside :meth:`payload`, so reruns compare byte-identical.
    """

    model: str
    objective: str
    condition: str
    seed: int
    spec_hash: str
    status: str = "ok"
    error: str | None = None
    pretrain: dict = field(default_factory=dict)
    probe_hash: str = ""
    loss: dict = field(default_factory=dict)
    profiles: dict[str, DepthProfile] = field(default_factory=dict)
    slopes: dict[str, SlopeFit] = field(default_factory=dict)
    normalized: NormalizedProfile | None = None
    trust_trace: dict[str, list[float]] | None = None
    wall_time: float = 0.0
    schema_version: int = SCHEMA_VERSION
    version: str = __version__

    @property
    def cell(self) -> tuple[str, str, str, int]:
        return (self.model, self.objective, self.condition, self.seed)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def payload(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "version": self.version,
            "spec_hash": self.spec_hash,
            "model": self.model,
            "objective": self.objective,
            "condition": self.condition,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "pretrain": self.pretrain,
            "probe_hash": self.probe_hash,
            "loss": self.loss,
            "profiles": {k: v.to_dict() for k, v in self.profiles.items()},
            "slopes": {k: v.to_dict() for k, v in self.slopes.items()},
            "normalized": None if self.normalized is None else list(self.normalized.fractions),
            "trust_trace": self.trust_trace,
        }

    def payload_bytes(self) -> bytes:
        return json.dumps(self.payload(), sort_keys=True).encode()

    def to_dict(self) -> dict:
        return {"payload": self.payload(), "timing": {"wall_time": self.wall_time}}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        p = d["payload"]
        if p["schema_version"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported RunRecord schema {p['schema_version']}")
        return cls(
            model=p["model"],
            objective=p["objective"],
            condition=p["condition"],
            seed=p["seed"],
            spec_hash=p["spec_hash"],
            status=p["status"],
            error=p["error"],
            pretrain=p["pretrain"],
            probe_hash=p["probe_hash"],
            loss=p["loss"],
            profiles={k: DepthProfile.from_dict(v) for k, v in p["profiles"].items()},
            slopes={k: SlopeFit(**v) for k, v in p["slopes"].items()},
            normalized=None if p["normalized"] is None else NormalizedProfile(tuple(p["normalized"])),
            trust_trace=p["trust_trace"],
            wall_time=d.get("timing", {}).get("wall_time", 0.0),
            schema_version=p["schema_version"],
            version=p["version"],
        )

    @property
    def filename(self) -> str:
        return f"{self.model}__{self.objective}__{self.condition}__s{self.seed}.json"

    def save(self, directory) -> Path:
        path = Path(directory) / self.filename
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_records(directory) -> list[RunRecord]:
    return [RunRecord.load(p) for p in sorted(Path(directory).glob("*.json"))]


def _loss_summary(losses: list[float]) -> dict:
    if not losses:
        return {"steps": 0}
    return {"steps": len(losses), "first": losses[0], "last": losses[-1], "min": min(losses), "mean": float(np.mean(losses))}


class MatrixContext:
    """Shared, read-mostly state for one spec: corpus split, probes and the pretraining cache."""

    def __init__(self, spec: ExperimentSpec, out_dir=None, use_disk_cache: bool = True):
        self.spec = spec
        self.out_dir = Path(out_dir or spec.out_dir)
        self.use_disk_cache = use_disk_cache
        c = spec.corpus
        if c.kind == "file":
            sequences = read_corpus(c.path)
        else:
            sequences = generate_corpus(c.kind, c.size, c.seed, source=c.path)
        self.corpus_hash = corpus_hash(sequences)
        self.train_corpus, probes = split_corpus(sequences, spec.probe_count, c.seed)
        self.probes, self.alt_probes = probes
        for m in spec.models:
            top = max(max(s) for s in sequences)
            if top >= m.config.n_regular:
                raise ValueError(f"corpus id {top} collides with special tokens of model {m.name}")
        self._pretrained: dict[tuple[str, int], Model] = {}
        self._locks: dict[tuple[str, int], threading.Lock] = {}
        self._guard = threading.Lock()

    def pretrain_key(self, model_name: str, seed: int) -> str:
        s = self.spec
        blob = json.dumps(
            [self.spec.model(model_name).to_dict()["config"], seed, s.pretrain_steps, s.pretrain_lr, s.batch_size, self.corpus_hash],
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def pretrain_info(self, model_name: str, seed: int) -> dict:
        cfg = self.spec.model(model_name).config
        return {
            "objective": reference_objective(cfg) if cfg.causal else PRETRAIN_ENCODER,
            "steps": self.spec.pretrain_steps,
            "lr": self.spec.pretrain_lr,
            "key": self.pretrain_key(model_name, seed),
            "corpus_hash": self.corpus_hash,
        }

    def pretrained(self, model_name: str, seed: int) -> Model:
        """Pretrained base for (model, seed); computed once, cached in memory and on disk."""
        key = (model_name, seed)
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key in self._pretrained:
                return self._pretrained[key]
            info = self.pretrain_info(model_name, seed)
            path = self.out_dir / "pretrain" / f"{model_name}__s{seed}__{info['key']}.ckpt"
            if self.use_disk_cache and path.exists():
                model = load_checkpoint(path)
            else:
                cfg = self.spec.model(model_name).config
                base = build_model(cfg, seed)
                cond = ConditionConfig("uniform", lr=self.spec.pretrain_lr, weight_decay=self.spec.weight_decay, max_grad_norm=self.spec.max_grad_norm)
                log.info("pretraining %s seed %d for %d steps", model_name, seed, self.spec.pretrain_steps)
                model = train(base, info["objective"], cond, self.train_corpus, steps=self.spec.pretrain_steps, seed=seed, batch_size=self.spec.batch_size).model
                for p in model.params.values():
                    p.trainable = True
                if self.use_disk_cache:
                    save_checkpoint(model, path)
            self._pretrained[key] = model
            return model

    def schedule(self, seed: int) -> BatchSchedule:
        s = self.spec
        return BatchSchedule.from_corpus(self.train_corpus, s.schedule_batches, s.schedule_batch_size, seed)


@dataclass
class CellResult:
    record: RunRecord
    base: Model | None = None
    tuned: Model | None = None


def run_cell(ctx: MatrixContext, cell: tuple[str, str, str, int], keep_models: bool = False) -> CellResult:
    """Fine-tune one cell and capture its profiles. Failures become a failed record."""
    model_name, objective, condition, seed = cell
    spec = ctx.spec
    record = RunRecord(model_name, objective, condition, seed, spec.spec_hash)
    start = time.perf_counter()
    try:
        record.pretrain = ctx.pretrain_info(model_name, seed)
        base = ctx.pretrained(model_name, seed)
        result = train(base, objective, spec.condition(condition), ctx.train_corpus, steps=spec.finetune_steps, seed=seed, batch_size=spec.batch_size)
        ids, mask = ctx.probes.arrays(base.config)
        record.probe_hash = ctx.probes.digest
        record.loss = _loss_summary(result.losses)
        record.profiles = profile_from_runs(base, result.model, ids, mask, spec.depths, METRICS)
        record.slopes = {m: fit_locality_slope(p) for m, p in record.profiles.items()}
        record.normalized = normalize_profile(record.profiles["cka"])
        if condition == "equal_step":
            trace: dict[str, list[float]] = {}
            for r in result.records:
                for gid, ratio in sorted(r.ratios.items()):
                    trace.setdefault(str(gid), []).append(ratio)
            record.trust_trace = trace
        out = CellResult(record, base if keep_models else None, result.model if keep_models else None)
    except Exception as exc:  # one broken cell must not sink the matrix
        log.warning("cell %s failed: %s", cell, exc)
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        out = CellResult(record)
    record.wall_time = time.perf_counter() - start
    return out


def run_matrix(spec: ExperimentSpec, *, jobs: int = 1, cells=None, ctx: MatrixContext | None = None, keep_models: bool = False, save: bool = True) -> list[CellResult]:
    """Run every cell (or the given subset); results come back in cell order regardless of ``jobs``."""
    ctx = ctx or MatrixContext(spec)
    cells = list(cells) if cells is not None else spec.cells()
    # pretrain up front so worker threads never wait on each other's bases
    bases = sorted({(c[0], c[3]) for c in cells})

    def warm(key):
        try:
            ctx.pretrained(*key)
        except Exception as exc:  # the affected cells retry and record the failure themselves
            log.warning("pretraining %s failed: %s", key, exc)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        list(pool.map(warm, bases))
        results = list(pool.map(lambda c: run_cell(ctx, c, keep_models), cells))
    if save:
        for r in results:
            r.record.save(ctx.out_dir / "records")
    return results


def run_distances(ctx: MatrixContext, model_name: str, seed: int, save: bool = True) -> DistanceReport:
    base = ctx.pretrained(model_name, seed)
    report = distance_report(base, ctx.spec.objectives_for(model_name), ctx.schedule(seed), seed=seed)
    if save:
        path = ctx.out_dir / "distances" / f"{model_name}__s{seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_json())
    return report


def load_distances(directory) -> dict[tuple[str, int], DistanceReport]:
    out = {}
    for p in sorted(Path(directory).glob("*__s*.json")):
        name, seed = p.stem.rsplit("__s", 1)
        out[(name, int(seed))] = DistanceReport.from_dict(json.loads(p.read_text()))
    return out


def second_probe_check(
    ctx: MatrixContext,
    results: list[CellResult],
    alternate: ProbeSet | None = None,
    metric: str = "procrustes",
    condition: str = "standard",
) -> dict[str, float]:
    """Per model, Spearman between objective slope orderings under the original and an alternate probe set.

    Slopes are averaged over seeds. Cells whose models were not kept are
    re-run, which reproduces them exactly.
    """
    alternate = alternate or ctx.alt_probes
    by_model: dict[str, dict[str, list[tuple[float, float]]]] = {}
    for res in results:
        rec = res.record
        if rec.condition != condition or not rec.ok:
            continue
        if res.tuned is None:
            res = run_cell(ctx, rec.cell, keep_models=True)
            if not res.record.ok:
                raise RuntimeError(f"could not recapture {rec.cell}: {res.record.error}")
        ids, mask = alternate.arrays(res.base.config)
        prof = profile_from_runs(res.base, res.tuned, ids, mask, ctx.spec.depths, (metric,))[metric]
        pair = (rec.slopes[metric].alpha, fit_locality_slope(prof).alpha)
        by_model.setdefault(rec.model, {}).setdefault(rec.objective, []).append(pair)
    out = {}
    for model, objs in by_model.items():
        if len(objs) < 3:
            raise ValueError(f"model {model}: need at least 3 objectives for a rank correlation, have {len(objs)}")
        names = sorted(objs)
        orig = [float(np.mean([p[0] for p in objs[n]])) for n in names]
        alt = [float(np.mean([p[1] for p in objs[n]])) for n in names]
        out[model] = spearman_rho(orig, alt)
    return out


def write_spec(spec: ExperimentSpec, out_dir) -> Path:
    path = Path(out_dir) / "spec.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(spec.to_json())
    return path


__all__ = [
    "CellResult",
    "MatrixContext",
    "RunRecord",
    "load_distances",
    "load_records",
    "run_cell",
    "run_distances",
    "run_matrix",
    "second_probe_check",
    "write_spec",
    "SCHEMA_VERSION",
]
