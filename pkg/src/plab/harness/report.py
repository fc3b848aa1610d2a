"""CSV tables and SVG depth-profile plots from RunRecords.

Every number written traces to a RunRecord (or DistanceReport) field. The only
values computed here are seed means/stds and the equal-step/standard ratio.
"""

from __future__ import annotations

import csv
import re
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..repmetrics import METRICS  # noqa: E402
from ..stats import StatsError, spearman_rho, summarize  # noqa: E402

NA = "NA"
PLOT_FLOOR = 1e-8  # log axes cannot show 0; such points are drawn at this floor


def _fmt(x) -> str:
    return NA if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


def _write(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)  # RFC 4180 quoting, \r\n line ends
        w.writerow(header)
        w.writerows(rows)
    return path


def equal_step_ratio(alpha_eq: float, alpha_std: float):
    """alpha_eq / alpha_std, or None when the standard slope is exactly zero."""
    if alpha_std == 0:
        return None
    return alpha_eq / alpha_std


def _mean_slopes(records, metric: str) -> dict[tuple[str, str, str], list[float]]:
    out: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    for r in records:
        if r.ok and metric in r.slopes:
            out[(r.model, r.objective, r.condition)].append(r.slopes[metric].alpha)
    return out


def slope_table(records, path) -> Path:
    rows = []
    for metric in METRICS:
        for (model, obj, cond), alphas in sorted(_mean_slopes(records, metric).items()):
            mean, std = summarize(alphas)
            rows.append([model, obj, cond, metric, _fmt(mean), _fmt(std), len(alphas)])
    return _write(Path(path), ["model", "objective", "condition", "metric", "alpha_mean", "alpha_std", "n_seeds"], rows)


def ratio_table(records, path) -> Path:
    rows = []
    for metric in METRICS:
        slopes = _mean_slopes(records, metric)
        for (model, obj, cond), alphas in sorted(slopes.items()):
            if cond != "standard" or (model, obj, "equal_step") not in slopes:
                continue
            a_std = float(np.mean(alphas))
            a_eq = float(np.mean(slopes[(model, obj, "equal_step")]))
            rows.append([model, obj, metric, _fmt(a_std), _fmt(a_eq), _fmt(equal_step_ratio(a_eq, a_std))])
    return _write(Path(path), ["model", "objective", "metric", "alpha_standard", "alpha_equal_step", "ratio"], rows)


def distance_table(records, distances, path, metric: str = "procrustes") -> tuple[Path, Path]:
    """Objective distance next to the standard-condition slope, plus per-model Spearman."""
    slopes = _mean_slopes(records, metric)
    per_model: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for (model, seed), rep in sorted(distances.items()):
        for obj, entry in rep.entries.items():
            per_model[model][obj].append(entry)
    rows, rho_rows = [], []
    for model, objs in sorted(per_model.items()):
        xs, ys = [], []
        for obj, entries in sorted(objs.items()):
            dist = float(np.mean([e["procrustes"] for e in entries]))
            cos = [e["cosine_full"] for e in entries if e["cosine_full"] is not None]
            alphas = slopes.get((model, obj, "standard"))
            alpha = float(np.mean(alphas)) if alphas else None
            rows.append([model, obj, _fmt(dist), _fmt(np.mean(cos)) if cos else NA, _fmt(alpha)])
            if alpha is not None:
                xs.append(dist)
                ys.append(alpha)
        try:
            rho = spearman_rho(xs, ys)
        except StatsError:
            rho = None
        rho_rows.append([model, _fmt(rho), len(xs)])
    p = Path(path)
    a = _write(p, ["model", "objective", "gradient_procrustes", "cosine_full", f"alpha_{metric}_standard"], rows)
    b = _write(p.with_name(p.stem + "_spearman.csv"), ["model", "spearman_rho", "n_objectives"], rho_rows)
    return a, b


def normalized_table(records, path) -> Path:
    rows, depths = [], None
    for r in records:
        if not r.ok or r.normalized is None:
            continue
        depths = depths or r.profiles["cka"].depths
        rows.append([r.model, r.objective, r.condition, r.seed, *map(_fmt, r.normalized.fractions), _fmt(r.normalized.final_concentration)])
    header = ["model", "objective", "condition", "seed", *(f"f@{d:.2f}" for d in depths or ()), "final_fraction"]
    return _write(Path(path), header, rows)


def profile_table(records, path) -> Path:
    rows, depths = [], None
    for r in records:
        if not r.ok:
            continue
        for metric, prof in r.profiles.items():
            depths = depths or prof.depths
            rows.append([r.model, r.objective, r.condition, r.seed, metric, *map(_fmt, prof.values), _fmt(r.slopes[metric].alpha)])
    header = ["model", "objective", "condition", "seed", "metric", *(f"d{d:.2f}" for d in depths or ()), "alpha"]
    return _write(Path(path), header, rows)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def plot_profiles(records, out_dir, metric: str) -> list[Path]:
    """One SVG per model: seed-mean profile per (objective, condition), log-scaled y."""
    series: dict[str, dict[tuple[str, str], list]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r.ok and metric in r.profiles:
            series[r.model][(r.objective, r.condition)].append(r.profiles[metric])
    plt.rcParams["svg.hashsalt"] = "plab"  # stable element ids across runs
    paths = []
    for model, groups in sorted(series.items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for (obj, cond), profs in sorted(groups.items()):
            depths = profs[0].depths
            vals = np.maximum(np.mean([p.values for p in profs], axis=0), PLOT_FLOOR)
            (line,) = ax.plot(depths, vals, marker="o", label=f"{obj} / {cond}")
            line.set_gid(f"series-{_slug(obj)}-{_slug(cond)}")
        ax.set_yscale("log")
        ax.set_xlabel("relative depth")
        ax.set_ylabel(f"change ({metric})")
        ax.set_title(model)
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        path = Path(out_dir) / f"profile_{_slug(model)}_{metric}.svg"
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def emit_report(records, out_dir, distances=None) -> list[Path]:
    """Write all tables and plots into ``out_dir``; returns the files written."""
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    files = [
        slope_table(records, out / "slopes.csv"),
        ratio_table(records, out / "equal_step_ratio.csv"),
        normalized_table(records, out / "normalized_profiles.csv"),
        profile_table(records, out / "depth_profiles.csv"),
    ]
    if distances:
        files.extend(distance_table(records, distances, out / "distance_slope.csv"))
    for metric in METRICS:
        files.extend(plot_profiles(records, out, metric))
    return files
