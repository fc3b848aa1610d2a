"""Representational-change metrics and depth-profile analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .models import STANDARD_DEPTHS, Model, forward_hidden, pool_representation
from .stats import spearman_rho

SQRT2 = float(np.sqrt(2.0))
METRICS = ("procrustes", "cka", "rsa")


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class DepthProfile:
    depths: tuple[float, ...]
    values: tuple[float, ...]
    metric: str

    def __post_init__(self):
        if len(self.depths) != len(self.values):
            raise ValueError("depths and values differ in length")
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])):
            raise ValueError("depths must be strictly increasing")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "depths": list(self.depths), "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "DepthProfile":
        return cls(tuple(d["depths"]), tuple(d["values"]), d["metric"])


@dataclass(frozen=True)
class SlopeFit:
    alpha: float
    beta: float
    rms: float

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "rms": self.rms}


@dataclass(frozen=True)
class NormalizedProfile:
    fractions: tuple[float, ...]

    @property
    def final_concentration(self) -> float:
        return self.fractions[-1]


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an n x D matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("matrix has non-finite entries")
    return x


def center(x) -> np.ndarray:
    x = _as_matrix(x)
    return x - x.mean(axis=0, keepdims=True)


def preprocess(x) -> np.ndarray:
    """Column-center, then scale to unit Frobenius norm."""
    x = _as_matrix(x)
    if x.shape[0] < 2:
        raise DegenerateInputError("need at least 2 rows")
    xc = center(x)
    norm = np.linalg.norm(xc)
    scale = max(1.0, float(np.abs(x).max()))
    if norm <= 1e-12 * scale * np.sqrt(x.size):
        raise DegenerateInputError("matrix is constant across rows")
    return xc / norm


def procrustes_alignment(x, y) -> tuple[float, np.ndarray]:
    """(distance, R) with R the orthogonal map best aligning preprocessed Y onto preprocessed X."""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    xt, yt = preprocess(x), preprocess(y)
    u, _, vt = np.linalg.svd(yt.T @ xt)
    r = u @ vt
    return float(np.linalg.norm(xt - yt @ r)), r


def procrustes_distance(x, y) -> float:
    """||X~ - Y~ R*||_F in [0, sqrt(2)]."""
    return procrustes_alignment(x, y)[0]


def linear_cka(x, y) -> float:
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("CKA needs the same number of rows")
    xc, yc = center(x), center(y)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx <= 0.0 or yy <= 0.0:
        raise DegenerateInputError("zero-variance input to CKA")
    # Cauchy-Schwarz bounds this by 1; clamp so 1 - CKA never dips below 0 by roundoff
    return float(min(1.0, np.linalg.norm(yc.T @ xc) ** 2 / (xx * yy)))


def delta_cka(x, y) -> float:
    return 1.0 - linear_cka(x, y)


def rsa_distance(x, y) -> float:
    """1 - Spearman correlation of the condensed Euclidean distance matrices."""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("RSA needs the same number of rows")
    if x.shape[0] < 3:
        raise DegenerateInputError("RSA needs at least 3 rows")
    return 1.0 - spearman_rho(pdist(x), pdist(y))


METRIC_FNS = {"procrustes": procrustes_distance, "cka": delta_cka, "rsa": rsa_distance}


def fit_locality_slope(profile, values=None) -> SlopeFit:
    """OLS line through (depth, delta). Accepts a DepthProfile or two sequences."""
    if isinstance(profile, DepthProfile):
        d, v = profile.depths, profile.values
    else:
        d, v = profile, values
    d = np.asarray(d, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if d.shape != v.shape or d.ndim != 1:
        raise ValueError("depths and values must be 1-D and equal length")
    if len(np.unique(d)) < 2:
        raise DegenerateInputError("need at least 2 distinct depths")
    dc = d - d.mean()
    alpha = float(dc @ (v - v.mean()) / (dc @ dc))
    beta = float(v.mean() - alpha * d.mean())
    resid = v - (alpha * d + beta)
    return SlopeFit(alpha, beta, float(np.sqrt(np.mean(resid**2))))


def normalize_profile(values) -> NormalizedProfile:
    v = np.asarray(values.values if isinstance(values, DepthProfile) else values, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("profile entries must be nonnegative")
    total = v.sum()
    if total <= 0:
        raise DegenerateInputError("all-zero profile cannot be normalized")
    return NormalizedProfile(tuple(float(f) for f in v / total))


def pooled_activations(model: Model, ids, pad_mask, depths=STANDARD_DEPTHS, batch_size: int = 64) -> dict[float, np.ndarray]:
    """Mean-pooled hidden states per depth, dropout off, computed in chunks."""
    ids = np.asarray(ids)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    chunks: dict[float, list[np.ndarray]] = {d: [] for d in depths}
    for lo in range(0, len(ids), batch_size):
        hidden = forward_hidden(model, ids[lo : lo + batch_size], pad_mask[lo : lo + batch_size], depths)
        for d, h in hidden.items():
            chunks[d].append(pool_representation(h, pad_mask[lo : lo + batch_size], "mean"))
    return {d: np.concatenate(c) for d, c in chunks.items()}


def profile_from_activations(before: dict, after: dict, metrics=METRICS) -> dict[str, DepthProfile]:
    depths = tuple(sorted(before))
    out = {}
    for m in metrics:
        fn = METRIC_FNS[m]
        out[m] = DepthProfile(depths, tuple(float(fn(before[d], after[d])) for d in depths), m)
    return out


def profile_from_runs(model_before: Model, model_after: Model, probe_ids, probe_mask, depths=STANDARD_DEPTHS, metrics=METRICS) -> dict[str, DepthProfile]:
    if model_before.config != model_after.config:
        raise ValueError("before/after models have different configurations")
    before = pooled_activations(model_before, probe_ids, probe_mask, depths)
    after = pooled_activations(model_after, probe_ids, probe_mask, depths)
    return profile_from_activations(before, after, metrics)


# ---------------------------------------------------------------- matrix dumps


def save_matrix(path, matrix, **meta) -> Path:
    """Row-major little-endian f64 at ``path`` plus a JSON sidecar ``path.json`` with n, D and ``meta``."""
    path = Path(path)
    m = _as_matrix(matrix)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(m, dtype="<f8").tobytes())
    side = {"n": int(m.shape[0]), "D": int(m.shape[1]), "dtype": "<f8", "order": "row-major", **meta}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_matrix(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if arr.size != side["n"] * side["D"]:
        raise ValueError(f"{path}: expected {side['n']}x{side['D']} values, found {arr.size}")
    return arr.reshape(side["n"], side["D"]), side
