"""Fine-tuning objective zoo: batch construction, losses and last-layer gradient capture."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .models import DropoutStream, Model, ModelConfig, pool_representation

ENCODER_OBJECTIVES = ("MLM", "NSP", "SpanDenoise", "SimCSE", "BarlowTwins")
CAUSAL_OBJECTIVES = ("CausalLM", "CausalSpan", "SimCSE", "BarlowTwins")
# MLM and NSP trained jointly; only used for the in-lab encoder pretraining stage
PRETRAIN_ENCODER = "MLM+NSP"
ALL_KINDS = ("MLM", "NSP", "SpanDenoise", "CausalLM", "CausalSpan", "SimCSE", "BarlowTwins", PRETRAIN_ENCODER)
CONTRASTIVE = ("SimCSE", "BarlowTwins")
_LM_KINDS = ("MLM", "SpanDenoise", "CausalLM", "CausalSpan")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveKind:
    name: str
    pooling: str | None = None  # None: cls for encoders, last token for causal models
    mask_rate: float = 0.15
    mean_span: float = 3.0
    temperature: float = 0.05
    barlow_lambda: float = 5e-3
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.name not in ALL_KINDS:
            raise ObjectiveError(f"unknown objective {self.name!r}")

    @property
    def contrastive(self) -> bool:
        return self.name in CONTRASTIVE

    def pooling_for(self, config: ModelConfig) -> str:
        if self.pooling is not None:
            return self.pooling
        return "last" if config.causal else "cls"

    def check_compatible(self, config: ModelConfig) -> None:
        if self.name in ("NSP", PRETRAIN_ENCODER) and config.causal:
            raise ObjectiveError(f"{self.name} needs a bidirectional model")
        if self.name in ("CausalLM", "CausalSpan") and not config.causal:
            raise ObjectiveError(f"{self.name} needs a causal model")


def as_kind(kind) -> ObjectiveKind:
    return kind if isinstance(kind, ObjectiveKind) else ObjectiveKind(str(kind))


def reference_objective(config: ModelConfig) -> str:
    """Pretraining objective of a model family; its objective distance is zero by definition."""
    return "CausalLM" if config.causal else "MLM"


def objectives_for(config: ModelConfig) -> tuple[str, ...]:
    return CAUSAL_OBJECTIVES if config.causal else ENCODER_OBJECTIVES


@dataclass
class Batch:
    kind: str
    ids: np.ndarray  # n x T
    pad_mask: np.ndarray  # n x T, True on real tokens
    targets: np.ndarray | None = None  # n x T, aligned to the predicting position
    target_mask: np.ndarray | None = None
    pair_labels: np.ndarray | None = None  # NSP: 0 = is-next, 1 = random
    view_seeds: tuple[int, int] | None = None
    dropout_seed: int = 0
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.ids.shape[0])

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def weight(self) -> float:
        """Count the batch loss is averaged over; lets micro-batches be recombined exactly."""
        if self.kind in _LM_KINDS:
            return float(self.target_mask.sum())
        # MLM+NSP mixes two normalizations; weighting by samples is only approximate there
        return float(self.n)

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows)

        def sub(a):
            return None if a is None else a[rows]

        return Batch(
            kind=self.kind, ids=self.ids[rows], pad_mask=self.pad_mask[rows],
            targets=sub(self.targets), target_mask=sub(self.target_mask),
            pair_labels=sub(self.pair_labels), view_seeds=self.view_seeds,
            dropout_seed=self.dropout_seed, sample_ids=self.sample_ids[rows],
        )

    def split(self, parts: int) -> list["Batch"]:
        if parts < 1 or self.n % parts:
            raise ObjectiveError(f"cannot split a batch of {self.n} into {parts} equal micro-batches")
        size = self.n // parts
        return [self.take(np.arange(i * size, (i + 1) * size)) for i in range(parts)]


# ---------------------------------------------------------------- batch construction


def _pad(rows: list[list[int]], length: int, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(rows), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), length), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def _span_positions(rng: np.random.Generator, candidates: np.ndarray, rate: float, mean_span: float) -> np.ndarray:
    """Contiguous spans with geometric lengths until ``rate`` of the candidates are covered."""
    n = len(candidates)
    if n == 0:
        return np.zeros(0, dtype=bool)
    budget = max(1, int(round(rate * n)))
    chosen = np.zeros(n, dtype=bool)
    p = 1.0 / mean_span
    for _ in range(10 * n):
        if chosen.sum() >= budget:
            break
        length = min(int(rng.geometric(p)), budget - int(chosen.sum()))
        start = int(rng.integers(0, n))
        chosen[start : start + length] = True
    return chosen


def prepare_batch(kind, sequences, rng: np.random.Generator, config: ModelConfig) -> Batch:
    """Turn raw token sequences into a padded batch for ``kind``.

    Sequences are truncated to fit ``config.max_seq`` after special tokens are
    added, and every batch is padded to exactly ``max_seq`` positions.
    """
    kind = as_kind(kind)
    kind.check_compatible(config)
    seqs = [list(map(int, s)) for s in sequences]
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ObjectiveError("empty sequence in batch")
    if kind.contrastive and len(seqs) < 2:
        raise ObjectiveError(f"{kind.name} needs at least 2 samples per batch")
    for s in seqs:
        if min(s) < 0 or max(s) >= config.n_regular:
            raise ObjectiveError(f"token ids must lie in [0, {config.n_regular})")
    T = config.max_seq
    bos = [] if config.causal else [config.cls_id]
    name = kind.name
    dropout_seed = int(rng.integers(0, 2**31 - 1))

    if name in ("NSP", PRETRAIN_ENCODER):
        n = len(seqs)
        body = (T - 3) // 2
        firsts, seconds = [], []
        for s in seqs:
            s = s[: 2 * body]
            if len(s) < 2:
                raise ObjectiveError("NSP needs sequences of at least 2 tokens")
            half = len(s) // 2
            firsts.append(s[:half])
            seconds.append(s[half:])
        labels = (rng.random(n) < 0.5).astype(np.int64)
        if n < 2:
            labels[:] = 0
        rows = []
        for i in range(n):
            second = seconds[i]
            if labels[i]:
                j = int(rng.integers(0, n - 1))
                j = j + 1 if j >= i else j
                second = seconds[j]
            rows.append([config.cls_id] + firsts[i] + [config.sep_id] + second + [config.sep_id])
        ids, pad = _pad(rows, T, config.pad_id)
        batch = Batch(name, ids, pad, pair_labels=labels, dropout_seed=dropout_seed)
        if name == PRETRAIN_ENCODER:
            content = pad & (ids < config.n_regular)
            _apply_mlm(batch, content, rng, config, kind.mask_rate)
        return batch

    rows = [bos + s[: T - len(bos)] for s in seqs]
    ids, pad = _pad(rows, T, config.pad_id)
    content = pad & (ids < config.n_regular)
    batch = Batch(name, ids, pad, dropout_seed=dropout_seed)

    if name == "CausalLM":
        targets = np.zeros_like(ids)
        targets[:, :-1] = ids[:, 1:]
        tmask = np.zeros_like(pad)
        tmask[:, :-1] = pad[:, 1:]
        batch.targets, batch.target_mask = targets, tmask
    elif name == "MLM":
        _apply_mlm(batch, content, rng, config, kind.mask_rate)
    elif name in ("SpanDenoise", "CausalSpan"):
        original = ids.copy()
        masked = np.zeros_like(pad)
        for i in range(len(rows)):
            pos = np.flatnonzero(content[i])
            if name == "CausalSpan":
                pos = pos[pos >= 1]  # position 0 has no prefix to predict it from
            masked[i, pos[_span_positions(rng, pos, kind.mask_rate, kind.mean_span)]] = True
        if not masked.any():
            raise ObjectiveError("no masked positions")
        ids[masked] = config.mask_id
        if name == "SpanDenoise":
            batch.targets, batch.target_mask = original, masked
        else:
            targets = np.zeros_like(ids)
            targets[:, :-1] = original[:, 1:]
            tmask = np.zeros_like(pad)
            tmask[:, :-1] = masked[:, 1:]
            batch.targets, batch.target_mask = targets, tmask
    elif kind.contrastive:
        batch.view_seeds = (int(rng.integers(0, 2**31 - 1)), int(rng.integers(0, 2**31 - 1)))
    return batch


def _apply_mlm(batch: Batch, content: np.ndarray, rng, config: ModelConfig, rate: float) -> None:
    """BERT-style 80/10/10 replacement of a Bernoulli(rate) subset of content positions."""
    selected = content & (rng.random(content.shape) < rate)
    if not selected.any():
        raise ObjectiveError("no masked positions")
    original = batch.ids.copy()
    roll = rng.random(content.shape)
    random_tokens = rng.integers(0, config.n_regular, size=content.shape)
    ids = batch.ids
    ids[selected & (roll < 0.8)] = config.mask_id
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    ids[swap] = random_tokens[swap]
    batch.targets, batch.target_mask = original, selected


# ---------------------------------------------------------------- losses


def lm_cross_entropy(model: Model, final: Tensor, targets: np.ndarray, target_mask: np.ndarray) -> Tensor:
    n, t, d = final.shape
    idx = np.flatnonzero(target_mask.reshape(-1))
    if idx.size == 0:
        raise ObjectiveError("no target positions")
    h = gc.slice_(gc.reshape(final, (n * t, d)), idx)
    return gc.cross_entropy(model.lm_logits(h), targets.reshape(-1)[idx])


def info_nce(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """In-batch InfoNCE on cosine similarity; row i of ``z2`` is the positive for row i of ``z1``."""
    n = z1.shape[0]
    if n < 2:
        raise ObjectiveError("InfoNCE needs at least 2 samples")
    sim = gc.matmul(gc.l2_normalize(z1), gc.transpose(gc.l2_normalize(z2))) * (1.0 / temperature)
    return gc.cross_entropy(sim, np.arange(n))


def barlow_twins(z1: Tensor, z2: Tensor, lam: float, eps: float = 1e-5) -> Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2 on the batch-standardized cross-correlation."""
    n, d = z1.shape
    if n < 2:
        raise ObjectiveError("Barlow Twins needs at least 2 samples")

    def standardize(z):
        zc = z - gc.mean(z, axis=0, keepdims=True)
        var = gc.mean(zc * zc, axis=0, keepdims=True)
        return zc * gc.pow_(var + eps, -0.5)

    c = gc.matmul(gc.transpose(standardize(z1)), standardize(z2)) * (1.0 / n)
    eye = np.eye(d)
    on = 1.0 - gc.sum_(c * eye, axis=0)
    off = c * (1.0 - eye)
    return gc.sum_(on * on) + gc.sum_(off * off) * lam


@dataclass
class LossTrace:
    loss: Tensor
    finals: list[Tensor]  # final-layer hidden state(s) feeding the loss


def _views(model: Model, batch: Batch, train: bool) -> list[Tensor]:
    seeds = batch.view_seeds if batch.view_seeds is not None else (batch.dropout_seed, batch.dropout_seed + 1)
    outs = []
    for s in seeds:
        drop = DropoutStream(s, batch.sample_ids) if train else None
        outs.append(model.forward(batch.ids, batch.pad_mask, dropout=drop).final)
    return outs


def loss_with_finals(model: Model, kind, batch: Batch, *, train: bool = True) -> LossTrace:
    kind = as_kind(kind)
    kind.check_compatible(model.config)
    if kind.name != batch.kind:
        raise ObjectiveError(f"batch was prepared for {batch.kind}, not {kind.name}")
    if kind.contrastive:
        if batch.n < 2:
            raise ObjectiveError(f"{kind.name} needs at least 2 samples per batch")
        f1, f2 = _views(model, batch, train)
        mode = kind.pooling_for(model.config)
        z1 = pool_representation(f1, batch.pad_mask, mode)
        z2 = pool_representation(f2, batch.pad_mask, mode)
        if kind.name == "SimCSE":
            loss = info_nce(z1, z2, kind.temperature)
        else:
            loss = barlow_twins(z1, z2, kind.barlow_lambda, kind.bn_eps)
        return LossTrace(loss, [f1, f2])

    drop = DropoutStream(batch.dropout_seed, batch.sample_ids) if train else None
    final = model.forward(batch.ids, batch.pad_mask, dropout=drop).final
    if kind.name in _LM_KINDS:
        loss = lm_cross_entropy(model, final, batch.targets, batch.target_mask)
    else:
        pooled = pool_representation(final, batch.pad_mask, "cls")
        loss = gc.cross_entropy(model.nsp_logits(pooled), batch.pair_labels)
        if kind.name == PRETRAIN_ENCODER:
            loss = loss + lm_cross_entropy(model, final, batch.targets, batch.target_mask)
    return LossTrace(loss, [final])


def compute_loss(model: Model, kind, batch: Batch, *, train: bool = True) -> Tensor:
    return loss_with_finals(model, kind, batch, train=train).loss


def capture_objective_gradient(model: Model, kind, batch: Batch, *, train: bool = True) -> np.ndarray:
    """Per-sample dL/dh at the final layer, mean-pooled over real tokens (n x D).

    For two-view objectives the hook gradients of both views are summed.
    """
    trace = loss_with_finals(model, kind, batch, train=train)
    hooks = [gc.register_hook(f) for f in trace.finals]
    gc.backward(trace.loss, params=[], hooks=hooks)
    g = sum(h.grad for h in hooks)
    if not np.any(g):
        raise ObjectiveError(f"{as_kind(kind).name}: zero gradient at the final layer")
    return pool_representation(g, batch.pad_mask, "mean")


def with_hparams(kind, **changes) -> ObjectiveKind:
    return replace(as_kind(kind), **changes)
