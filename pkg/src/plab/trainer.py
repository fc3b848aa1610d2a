"""AdamW fine-tuning under the six optimizer conditions.

The equal-step condition rescales every layer group's update after the AdamW
step so that ||W_new - W_old|| / ||W_old|| equals the trust ratio, keeping the
update direction that AdamW chose.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import gradcore as gc
from .models import LoRAConfig, Model, apply_lora
from .objectives import as_kind, loss_with_finals, prepare_batch

CONDITIONS = ("standard", "uniform", "lora", "frozen_ln", "frozen_interior", "equal_step")
# the five conditions that are not the equal-step control
STANDARD_CONDITIONS = CONDITIONS[:5]


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrustRatioConfig:
    tau: float = 1e-3
    eps: float = 1e-12

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("trust ratio tau must be positive")


@dataclass(frozen=True)
class ConditionConfig:
    kind: str = "standard"
    lr: float = 2e-5
    layer_decay: float = 0.95
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    trust: TrustRatioConfig = TrustRatioConfig()
    lora: LoRAConfig = LoRAConfig()
    accumulation: int = 1
    freeze_embeddings: bool = True  # frozen_interior also freezes group 0 embeddings

    def __post_init__(self):
        if self.kind not in CONDITIONS:
            raise ValueError(f"unknown condition {self.kind!r}")
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")


@dataclass
class OptimizerState:
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------- pieces


def layer_partition(model: Model, trainable_only: bool = True) -> dict[int, list[str]]:
    """Group id -> parameter names; group 0 collects everything without a layer index."""
    groups: dict[int, list[str]] = {}
    for name, p in model.params.items():
        if trainable_only and not p.trainable:
            continue
        groups.setdefault(p.layer_index or 0, []).append(name)
    return dict(sorted(groups.items()))


def layerwise_lr(base: float, group: int, n_layers: int, decay: float = 0.95) -> float:
    """base * decay^(L - layer); group 0 shares the bottom layer's rate."""
    if group == 0:
        return base * decay ** (n_layers - 1)
    if not 1 <= group <= n_layers:
        raise KeyError(f"unknown layer group {group}")
    return base * decay ** (n_layers - group)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise gc.NonFiniteError("gradient norm is not finite")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(state: OptimizerState, params: dict, grads: dict[str, np.ndarray], lrs: dict[str, float] | None = None) -> None:
    """Decoupled weight decay + bias-corrected Adam, in place on ``params`` (name -> Parameter)."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise gc.NonFiniteError(f"non-finite gradient for {name}")
        p = params[name]
        lr = state.lr if lrs is None else lrs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data * (1.0 - lr * state.weight_decay)
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = data


def equal_step_rescale(snapshots: dict[str, np.ndarray], params: dict, partition: dict[int, list[str]], trust: TrustRatioConfig) -> dict[int, float]:
    """Rescale each group's update to tau * ||W_old||. Returns the applied scale per group."""
    scales = {}
    for gid, names in partition.items():
        missing = [n for n in names if n not in snapshots or n not in params]
        if missing:
            raise KeyError(f"partition group {gid} references unknown parameters {missing}")
        upd = math.sqrt(sum(float(np.sum((params[n].data - snapshots[n]) ** 2)) for n in names))
        wn = math.sqrt(sum(float(np.sum(snapshots[n] ** 2)) for n in names))
        scale = trust.tau * wn / (upd + trust.eps)
        for n in names:
            old = snapshots[n]
            params[n].data = old + scale * (params[n].data - old)
        scales[gid] = scale
    return scales


def group_update_ratios(snapshots: dict[str, np.ndarray], params: dict, partition: dict[int, list[str]]) -> dict[int, float]:
    out = {}
    for gid, names in partition.items():
        upd = math.sqrt(sum(float(np.sum((params[n].data - snapshots[n]) ** 2)) for n in names))
        wn = math.sqrt(sum(float(np.sum(snapshots[n] ** 2)) for n in names))
        out[gid] = upd / wn if wn > 0 else float("nan")
    return out


def _is_norm_param(name: str) -> bool:
    parts = name.split(".")
    return len(parts) >= 2 and parts[-2] in ("ln1", "ln2", "ln_f")


def apply_freeze(model: Model, kind: str, freeze_embeddings: bool = True) -> dict[str, bool]:
    """Set trainable flags for a freezing condition; returns name -> trainable."""
    if kind not in CONDITIONS:
        raise ValueError(f"unknown condition {kind!r}")
    n_layers = model.config.n_layers
    for name, p in model.params.items():
        if kind == "lora":
            continue  # apply_lora already froze the base
        trainable = True
        if kind == "frozen_ln" and _is_norm_param(name):
            trainable = False
        if kind == "frozen_interior":
            layer = p.layer_index
            if layer is not None and layer <= n_layers // 2:
                trainable = False
            if freeze_embeddings and name in ("tok_emb", "pos_emb"):
                trainable = False
        p.trainable = trainable
    return {n: p.trainable for n, p in model.params.items()}


# ---------------------------------------------------------------- loop


@dataclass
class StepRecord:
    step: int
    loss: float
    ratios: dict[int, float]


@dataclass
class TrainResult:
    model: Model
    records: list[StepRecord]
    condition: ConditionConfig

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_trace(self, path) -> Path:
        """CSV rows of (step, loss, group, ratio)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "group", "ratio"])
            for r in self.records:
                for gid, ratio in sorted(r.ratios.items()):
                    w.writerow([r.step, repr(r.loss), gid, repr(ratio)])
        return path


def prepare_condition(model: Model, condition: ConditionConfig, seed: int) -> Model:
    """Copy of ``model`` with the condition's adapters and freeze mask applied."""
    if condition.kind == "lora":
        work = apply_lora(model, condition.lora, seed=seed)
    else:
        work = model.copy()
        for p in work.params.values():
            p.trainable = True
    apply_freeze(work, condition.kind, condition.freeze_embeddings)
    return work


def _learning_rates(model: Model, condition: ConditionConfig, partition) -> dict[str, float]:
    lrs = {}
    for gid, names in partition.items():
        if condition.kind == "standard":
            lr = layerwise_lr(condition.lr, gid, model.config.n_layers, condition.layer_decay)
        else:
            lr = condition.lr
        for n in names:
            lrs[n] = lr
    return lrs


def batch_order(n_sequences: int, batch_size: int, seed: int, steps: int):
    """Yield index arrays: one reshuffle per epoch, incomplete tail batches dropped."""
    per_epoch = n_sequences // batch_size
    if per_epoch == 0:
        raise TrainingError(f"corpus of {n_sequences} sequences is smaller than one batch of {batch_size}")
    step = 0
    epoch = 0
    while step < steps:
        perm = np.random.default_rng([seed, epoch]).permutation(n_sequences)
        for b in range(per_epoch):
            if step >= steps:
                return
            yield perm[b * batch_size : (b + 1) * batch_size]
            step += 1
        epoch += 1


def train(
    model: Model,
    objective,
    condition: ConditionConfig,
    corpus,
    *,
    steps: int | None = None,
    epochs: float | None = None,
    seed: int = 0,
    batch_size: int = 32,
    on_step: Callable | None = None,
    divergence_factor: float = 10.0,
    divergence_patience: int = 50,
) -> TrainResult:
    """Fine-tune a copy of ``model``; the input model is left untouched.

    ``on_step(step, snapshot, raw, params)`` is called after each optimizer step
    with the pre-step weights, the raw AdamW result and the final weights.
    """
    kind = as_kind(objective)
    kind.check_compatible(model.config)
    corpus = list(corpus)
    if steps is None:
        if epochs is None:
            raise TrainingError("give steps or epochs")
        steps = int(round(epochs * (len(corpus) // batch_size)))
    acc = condition.accumulation
    if batch_size % acc:
        raise TrainingError(f"batch size {batch_size} not divisible into {acc} micro-batches")

    work = prepare_condition(model, condition, seed)
    partition = layer_partition(work)
    params = work.params
    trainable = {n: params[n] for names in partition.values() for n in names}
    lrs = _learning_rates(work, condition, partition)
    state = OptimizerState(lr=condition.lr, weight_decay=condition.weight_decay)
    records: list[StepRecord] = []
    initial = None
    over = 0

    for step, idx in enumerate(batch_order(len(corpus), batch_size, seed, steps)):
        rng = np.random.default_rng([seed, 7919, step])
        batch = prepare_batch(kind, [corpus[i] for i in idx], rng, work.config)
        batch.sample_ids = np.arange(batch.n) + step * batch_size
        total_w = batch.weight
        grads = {n: np.zeros_like(p.data) for n, p in trainable.items()}
        loss_val = 0.0
        try:
            for micro in batch.split(acc):
                frac = micro.weight / total_w
                loss = loss_with_finals(work, kind, micro).loss
                g = gc.backward(loss, params=list(trainable.values()))
                for n in grads:
                    grads[n] += frac * g[n]
                loss_val += frac * float(loss.data)
        except gc.NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at step {step}: {exc}", [r.loss for r in records]) from exc

        if initial is None:
            initial = loss_val
        over = over + 1 if loss_val > divergence_factor * initial else 0
        if over >= divergence_patience:
            raise DivergenceError(f"loss above {divergence_factor}x initial for {over} steps", [r.loss for r in records] + [loss_val])

        grads, _ = clip_gradients(grads, condition.max_grad_norm)
        snapshot = {n: p.data.copy() for n, p in trainable.items()}
        adamw_step(state, trainable, grads, lrs)
        raw = {n: p.data.copy() for n, p in trainable.items()} if on_step is not None else None
        if condition.kind == "equal_step":
            equal_step_rescale(snapshot, trainable, partition, condition.trust)
        ratios = group_update_ratios(snapshot, trainable, partition)
        records.append(StepRecord(step, loss_val, ratios))
        if on_step is not None:
            on_step(step, snapshot, raw, {n: p.data for n, p in trainable.items()})

    return TrainResult(work, records, condition)
