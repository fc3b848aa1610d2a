"""Training-free objective distance from last-layer loss gradients.

For each objective the same pretrained model sees the same fixed batch
schedule; per-sample gradients at the final hidden state are mean-pooled over
real tokens and stacked into an n x D matrix. Rows line up across objectives,
so matrices can be compared with Procrustes, or reduced to their mean vectors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .models import Model
from .objectives import as_kind, capture_objective_gradient, prepare_batch, reference_objective
from .repmetrics import load_matrix, procrustes_distance, save_matrix
from .stats import spearman_rho

NONZERO_THRESHOLD = 1e-12


class IncoherentGradientError(ValueError):
    """Mean gradient is zero, so its direction (and any cosine) is undefined."""


@dataclass(frozen=True)
class BatchSchedule:
    batches: tuple[tuple[tuple[int, ...], ...], ...]
    seeds: tuple[int, ...]

    @property
    def schedule_id(self) -> str:
        h = hashlib.sha256(json.dumps([self.batches, self.seeds]).encode()).hexdigest()
        return h[:16]

    @property
    def n_rows(self) -> int:
        return sum(len(b) for b in self.batches)

    @classmethod
    def from_corpus(cls, corpus, n_batches: int = 64, batch_size: int = 8, seed: int = 0) -> "BatchSchedule":
        corpus = list(corpus)
        need = n_batches * batch_size
        if len(corpus) < need:
            raise ValueError(f"schedule needs {need} sequences, corpus has {len(corpus)}")
        rng = np.random.default_rng([seed, 2000])
        idx = rng.permutation(len(corpus))[:need]
        batches = tuple(tuple(tuple(int(t) for t in corpus[i]) for i in idx[b * batch_size : (b + 1) * batch_size]) for b in range(n_batches))
        seeds = tuple(int(s) for s in rng.integers(0, 2**31 - 1, size=n_batches))
        return cls(batches, seeds)


@dataclass
class GradientMatrix:
    rows: np.ndarray
    objective: str
    schedule_id: str
    batch_index: np.ndarray  # schedule batch each row came from

    @property
    def shape(self):
        return self.rows.shape

    def subset(self, batches) -> "GradientMatrix":
        keep = np.isin(self.batch_index, np.asarray(list(batches)))
        return GradientMatrix(self.rows[keep], self.objective, self.schedule_id, self.batch_index[keep])

    def save(self, path) -> Path:
        path = save_matrix(path, self.rows, objective=self.objective, schedule_id=self.schedule_id, kind="gradient")
        np.save(str(path) + ".batches.npy", self.batch_index)
        return path

    @classmethod
    def load(cls, path) -> "GradientMatrix":
        rows, side = load_matrix(path)
        batches = np.load(str(path) + ".batches.npy")
        return cls(rows, side["objective"], side["schedule_id"], batches)


def _rows(g) -> np.ndarray:
    return g.rows if isinstance(g, GradientMatrix) else np.asarray(g, dtype=np.float64)


def collect_gradients(model: Model, objective, schedule: BatchSchedule) -> GradientMatrix:
    kind = as_kind(objective)
    kind.check_compatible(model.config)
    rows, which = [], []
    for b, (seqs, seed) in enumerate(zip(schedule.batches, schedule.seeds)):
        # masks depend only on (batch, seed): a repeated schedule entry yields repeated rows
        batch = prepare_batch(kind, seqs, np.random.default_rng(seed), model.config)
        rows.append(capture_objective_gradient(model, kind, batch))
        which.append(np.full(batch.n, b))
    return GradientMatrix(np.concatenate(rows), kind.name, schedule.schedule_id, np.concatenate(which))


def _check_pair(a, b) -> None:
    if isinstance(a, GradientMatrix) and isinstance(b, GradientMatrix) and a.schedule_id != b.schedule_id:
        raise ValueError("gradient matrices come from different batch schedules")
    if _rows(a).shape != _rows(b).shape:
        raise ValueError(f"shape mismatch {_rows(a).shape} vs {_rows(b).shape}")


def gradient_procrustes(ga, gb) -> float:
    _check_pair(ga, gb)
    return procrustes_distance(_rows(ga), _rows(gb))


def _mean_vector(g) -> np.ndarray:
    m = _rows(g).mean(axis=0)
    if not np.any(np.abs(m) > NONZERO_THRESHOLD):
        raise IncoherentGradientError("mean gradient vector is zero")
    return m


def cosine_distance_means(ga, gb) -> float:
    """1 - cos(mean_a, mean_b), in [0, 2]."""
    a, b = _mean_vector(ga), _mean_vector(gb)
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return 1.0 - min(1.0, max(-1.0, cos))


def pearson_distance_means(ga, gb) -> float:
    """1 - Pearson correlation between the mean gradient vectors."""
    a, b = _mean_vector(ga), _mean_vector(gb)
    a, b = a - a.mean(), b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise IncoherentGradientError("mean gradient vector is constant across dimensions")
    return 1.0 - float(a @ b / denom)


def jl_project(g, dim: int, seed: int = 0):
    """Random Gaussian projection G R / sqrt(k)."""
    rows = _rows(g)
    if dim >= rows.shape[1]:
        raise ValueError(f"target dimension {dim} must be below {rows.shape[1]}")
    r = np.random.default_rng([seed, dim]).normal(size=(rows.shape[1], dim))
    out = rows @ r / np.sqrt(dim)
    if isinstance(g, GradientMatrix):
        return GradientMatrix(out, g.objective, g.schedule_id, g.batch_index)
    return out


def coherence_stats(g) -> tuple[float, float, float]:
    """(mean per-sample norm, ||mean|| / mean ||g_i||, share of entries above 1e-12)."""
    rows = _rows(g)
    if rows.size == 0:
        raise ValueError("empty gradient matrix")
    norms = np.linalg.norm(rows, axis=1)
    mean_norm = float(norms.mean())
    coherence = float(np.linalg.norm(rows.mean(axis=0)) / mean_norm) if mean_norm > 0 else 0.0
    nonzero = float(np.mean(np.abs(rows) > NONZERO_THRESHOLD))
    return mean_norm, coherence, nonzero


# ---------------------------------------------------------------- reports


@dataclass
class DistanceReport:
    reference: str
    schedule_id: str
    entries: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"reference": self.reference, "schedule_id": self.schedule_id, "entries": self.entries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceReport":
        return cls(d["reference"], d["schedule_id"], d["entries"])


def _safe(fn, *args):
    try:
        return fn(*args)
    except IncoherentGradientError:
        return None


def distance_entry(ref: GradientMatrix, g: GradientMatrix, jl_dims=(128, 32), seed: int = 0) -> dict[str, float | None]:
    d = ref.rows.shape[1]
    same = g is ref
    norm_mean, coherence, nonzero = coherence_stats(g)
    entry = {
        "procrustes": 0.0 if same else gradient_procrustes(ref, g),
        "cosine_full": 0.0 if same else _safe(cosine_distance_means, ref, g),
        "pearson": 0.0 if same else _safe(pearson_distance_means, ref, g),
        "coherence": coherence,
        "norm_mean": norm_mean,
        "nonzero_fraction": nonzero,
    }
    for k in jl_dims:
        key = f"cosine_jl{k}"
        if k >= d:
            entry[key] = None
        elif same:
            entry[key] = 0.0
        else:
            entry[key] = _safe(cosine_distance_means, jl_project(ref, k, seed), jl_project(g, k, seed))
    return entry


def distance_report(model: Model, objectives, schedule: BatchSchedule, jl_dims=(128, 32), seed: int = 0, gradients: dict | None = None) -> DistanceReport:
    """Distances of every objective to the model's reference objective.

    The reference gradient is collected once and reused for every comparison.
    Pass ``gradients`` to collect into a caller-owned dict.
    """
    ref_name = reference_objective(model.config)
    grads = {} if gradients is None else gradients
    grads[ref_name] = collect_gradients(model, ref_name, schedule)
    report = DistanceReport(ref_name, schedule.schedule_id)
    for obj in [ref_name] + [o for o in objectives if o != ref_name]:
        if obj not in grads:
            grads[obj] = collect_gradients(model, obj, schedule)
        report.entries[obj] = distance_entry(grads[ref_name], grads[obj], jl_dims, seed)
    return report


def split_half_reliability(distance_fn: Callable, gradients: dict[str, GradientMatrix], reference: str, seed: int = 0) -> float:
    """Spearman agreement of objective orderings computed on two random halves of the batches."""
    if len(gradients) < 3:
        raise ValueError("split-half reliability needs at least 3 objectives")
    batches = np.unique(gradients[reference].batch_index)
    if len(batches) < 2:
        raise ValueError("need at least 2 batches to split")
    perm = np.random.default_rng([seed, 4242]).permutation(batches)
    halves = (perm[: len(perm) // 2], perm[len(perm) // 2 :])
    names = sorted(gradients)
    scores = []
    for half in halves:
        ref = gradients[reference].subset(half)
        scores.append([0.0 if n == reference else distance_fn(ref, gradients[n].subset(half)) for n in names])
    return spearman_rho(scores[0], scores[1])


def load_report(path) -> DistanceReport:
    return DistanceReport.from_dict(json.loads(Path(path).read_text()))
