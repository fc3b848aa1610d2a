"""Tiny transformer family: sequential vs parallel blocks, causal vs bidirectional attention.

Parameters are named ``layers.<k>.<...>`` with ``k`` running 1..L so the layer
index doubles as the optimizer layer-group id; everything else (embeddings,
final norm, heads) lives in group 0.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import Parameter, Tensor

STANDARD_DEPTHS = (0.10, 0.25, 0.40, 0.60, 0.75, 0.90, 1.00)
N_SPECIAL = 4
_MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    block_type: str = "sequential"  # or "parallel"
    attention: str = "causal"  # or "bidirectional"
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq: int = 32
    tie_embeddings: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.block_type not in ("sequential", "parallel"):
            raise ConfigError(f"unknown block_type {self.block_type!r}")
        if self.attention not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.n_layers < 2:
            raise ConfigError("n_layers must be >= 2")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError("vocab too small for the special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    # special ids occupy the top of the vocabulary; bytes 0xFC-0xFF never occur in UTF-8
    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 2

    @property
    def cls_id(self) -> int:
        return self.vocab_size - 3

    @property
    def sep_id(self) -> int:
        return self.vocab_size - 4

    @property
    def n_regular(self) -> int:
        return self.vocab_size - N_SPECIAL

    @property
    def causal(self) -> bool:
        return self.attention == "causal"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class DropoutStream:
    """Per-sample dropout masks.

    Each sample draws from its own generator keyed on ``(seed, sample_id)``, so a
    sample's masks do not depend on which other samples share its batch. That
    keeps accumulated micro-batches exactly equivalent to the full batch.
    """

    def __init__(self, seed: int, sample_ids):
        self.seed = int(seed)
        self._rngs = [np.random.default_rng([self.seed, int(s)]) for s in sample_ids]

    def mask(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        n = shape[0]
        if n != len(self._rngs):
            raise gc.ShapeError(f"dropout stream has {len(self._rngs)} samples, tensor has {n}")
        return np.stack([r.random(shape[1:]) >= p for r in self._rngs])


@dataclass
class ForwardOutput:
    final: Tensor  # final-norm output, n x T x D
    hidden: dict[int, Tensor] = field(default_factory=dict)  # layer -> residual stream after that block
    blocks: dict[int, dict[str, Tensor]] = field(default_factory=dict)  # instrumented sub-outputs


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self.lora: LoRAConfig | None = None

    # ------------------------------------------------------------ access

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def copy(self) -> "Model":
        new = Model(self.config, {n: Parameter(n, p.data.copy(), p.trainable) for n, p in self.params.items()})
        new.lora = self.lora
        return new

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.params[n].data = np.array(arr, dtype=np.float64, copy=True)

    # ------------------------------------------------------------ forward

    def _linear(self, x: Tensor, prefix: str, drop: DropoutStream | None) -> Tensor:
        w = self.params[prefix]
        out = gc.matmul(x, w) + self.params[_bias_name(prefix)]
        if self.lora is not None and prefix + ".lora_a" in self.params:
            xin = x
            if drop is not None and self.lora.dropout > 0:
                xin = gc.dropout(x, drop.mask(x.shape, self.lora.dropout), self.lora.dropout)
            delta = gc.matmul(gc.matmul(xin, self.params[prefix + ".lora_a"]), self.params[prefix + ".lora_b"])
            out = out + delta * self.lora.scale
        return out

    def _drop(self, x: Tensor, drop: DropoutStream | None) -> Tensor:
        p = self.config.dropout
        if drop is None or p <= 0:
            return x
        return gc.dropout(x, drop.mask(x.shape, p), p)

    def _attention(self, x: Tensor, layer: int, bias: np.ndarray, drop) -> Tensor:
        cfg = self.config
        n, t, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        pre = f"layers.{layer}.attn."

        def heads(z):
            return gc.transpose(gc.reshape(z, (n, t, h, dh)), (0, 2, 1, 3))

        q = heads(self._linear(x, pre + "wq", drop))
        k = heads(self._linear(x, pre + "wk", drop))
        v = heads(self._linear(x, pre + "wv", drop))
        scores = gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + bias
        probs = gc.softmax(scores, axis=-1)
        ctx = gc.reshape(gc.transpose(gc.matmul(probs, v), (0, 2, 1, 3)), (n, t, d))
        return self._linear(ctx, pre + "wo", drop)

    def _mlp(self, x: Tensor, layer: int, drop) -> Tensor:
        pre = f"layers.{layer}.mlp."
        return self._linear(gc.gelu(self._linear(x, pre + "w1", drop)), pre + "w2", drop)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return gc.layernorm(x, self.params[name + ".g"], self.params[name + ".b"])

    def attention_bias(self, pad_mask: np.ndarray) -> np.ndarray:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        t = pad_mask.shape[1]
        allowed = pad_mask[:, None, None, :]
        if self.config.causal:
            allowed = allowed & np.tril(np.ones((t, t), dtype=bool))[None, None]
        return np.where(allowed, 0.0, _MASK_VALUE)

    def forward(self, ids, pad_mask=None, *, dropout: DropoutStream | None = None, capture=(), instrument: bool = False) -> ForwardOutput:
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise gc.ShapeError(f"ids must be n x T, got {ids.shape}")
        n, t = ids.shape
        if t > cfg.max_seq:
            raise gc.ShapeError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
        if pad_mask is None:
            pad_mask = np.ones_like(ids, dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if not pad_mask.any(axis=1).all():
            raise gc.ShapeError("a row is entirely padding")
        bias = self.attention_bias(pad_mask)

        x = gc.embedding(self.params["tok_emb"], ids) + self.params["pos_emb"][:t]
        x = self._drop(x, dropout)
        out = ForwardOutput(final=None)
        capture = set(capture)
        for layer in range(1, cfg.n_layers + 1):
            if cfg.block_type == "sequential":
                a = self._drop(self._attention(self._ln(x, f"layers.{layer}.ln1"), layer, bias, dropout), dropout)
                mid = x + a
                m = self._drop(self._mlp(self._ln(mid, f"layers.{layer}.ln2"), layer, dropout), dropout)
                x = mid + m
            else:
                a = self._drop(self._attention(self._ln(x, f"layers.{layer}.ln1"), layer, bias, dropout), dropout)
                m = self._drop(self._mlp(self._ln(x, f"layers.{layer}.ln2"), layer, dropout), dropout)
                x = x + a + m
            if instrument:
                out.blocks[layer] = {"attn": a, "mlp": m, "out": x}
            if layer in capture:
                out.hidden[layer] = x
        out.final = self._ln(x, "ln_f")
        return out

    def lm_logits(self, h: Tensor) -> Tensor:
        w = self.params["tok_emb"] if self.config.tie_embeddings else self.params["lm_head.w"]
        wt = gc.transpose(w) if self.config.tie_embeddings else w
        return gc.matmul(h, wt) + self.params["lm_head.b"]

    def nsp_logits(self, pooled: Tensor) -> Tensor:
        if "nsp_head.w" not in self.params:
            raise ConfigError("model has no NSP head (causal models do not carry one)")
        return gc.matmul(pooled, self.params["nsp_head.w"]) + self.params["nsp_head.b"]


def _bias_name(weight_name: str) -> str:
    head, _, tail = weight_name.rpartition(".")
    return f"{head}.b{tail[1:]}"


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = [("tok_emb", (v, d)), ("pos_emb", (config.max_seq, d))]
    for layer in range(1, config.n_layers + 1):
        p = f"layers.{layer}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, f)), (p + "mlp.b1", (f,)),
            (p + "mlp.w2", (f, d)), (p + "mlp.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,))]
    if not config.tie_embeddings:
        shapes.append(("lm_head.w", (d, v)))
    shapes.append(("lm_head.b", (v,)))
    if not config.causal:
        shapes += [("nsp_head.w", (d, 2)), ("nsp_head.b", (2,))]
    return shapes


def build_model(config: ModelConfig, seed: int) -> Model:
    """Normal(0, 0.02) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Parameter(name, data)
    return Model(config, params)


def depth_to_layer_index(depth: float, n_layers: int) -> int:
    if not 0.0 < depth <= 1.0:
        raise ConfigError(f"relative depth {depth} outside (0, 1]")
    return min(max(int(math.floor(depth * n_layers + 0.5)), 1), n_layers)


def forward_hidden(model: Model, ids, pad_mask=None, depths=STANDARD_DEPTHS) -> dict[float, np.ndarray]:
    """Hidden states at relative depths, dropout off; depth 1.0 includes the final norm."""
    n_layers = model.config.n_layers
    layers = {d: depth_to_layer_index(d, n_layers) for d in depths}
    out = model.forward(ids, pad_mask, capture=set(layers.values()))
    result = {}
    for d, layer in layers.items():
        t = out.final if layer == n_layers else out.hidden[layer]
        result[d] = t.data.copy()
    return result


def apply_lora(model: Model, lora: LoRAConfig, seed: int = 0) -> Model:
    """Copy of ``model`` with frozen base weights and trainable low-rank pairs."""
    rng = np.random.default_rng([seed, 0x10A])
    new = model.copy()
    for p in new.params.values():
        p.trainable = False
    targets = []
    for layer in range(1, model.config.n_layers + 1):
        for t in lora.targets:
            name = f"layers.{layer}.{t}"
            if name not in new.params or new.params[name].ndim != 2:
                raise ConfigError(f"unknown LoRA target {t!r}")
            targets.append(name)
    for name in targets:
        d_in, d_out = new.params[name].shape
        # kaiming-uniform-like init for A, zeros for B
        bound = 1.0 / math.sqrt(d_in)
        new.params[name + ".lora_a"] = Parameter(name + ".lora_a", rng.uniform(-bound, bound, (d_in, lora.rank)))
        new.params[name + ".lora_b"] = Parameter(name + ".lora_b", np.zeros((lora.rank, d_out)))
    new.lora = lora
    return new


def lora_parameter_count(config: ModelConfig, lora: LoRAConfig) -> int:
    shapes = dict(parameter_shapes(config))
    per_layer = sum(lora.rank * (shapes[f"layers.1.{t}"][0] + shapes[f"layers.1.{t}"][1]) for t in lora.targets)
    return per_layer * config.n_layers


def pool_weights(mask, mode: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise gc.ShapeError("cannot pool a row that is entirely padding")
    n, t = mask.shape
    if mode == "mean":
        return mask / mask.sum(axis=1, keepdims=True)
    w = np.zeros((n, t))
    if mode == "last":
        last = t - 1 - np.argmax(mask[:, ::-1], axis=1)
        w[np.arange(n), last] = 1.0
    elif mode == "cls":
        w[:, 0] = 1.0
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return w


def pool_representation(hidden, mask, mode: str = "mean"):
    """Pool n x T x D states to n x D. Returns a Tensor for Tensor input, else ndarray."""
    w = pool_weights(mask, mode)
    if isinstance(hidden, Tensor):
        return gc.weighted_pool(hidden, w)
    return np.einsum("nt,ntd->nd", w, np.asarray(hidden, dtype=np.float64))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PLABCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path) -> Path:
    """Write ``path`` (binary) and ``path.json`` (manifest).

    Layout, little-endian: 8-byte magic, u32 version, u64 header length, UTF-8
    JSON header, then each parameter as row-major f64 in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config": asdict(model.config),
        "lora": None if model.lora is None else {**asdict(model.lora), "targets": list(model.lora.targets)},
        "params": [{"name": n, "shape": list(p.shape), "trainable": p.trainable} for n, p in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[offset : offset + hlen].decode("utf-8"))
    offset += hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        params[entry["name"]] = Parameter(entry["name"], arr, entry["trainable"])
    model = Model(ModelConfig.from_dict(header["config"]), params)
    if header.get("lora"):
        model.lora = LoRAConfig(**header["lora"])
    return model


def clone_config(config: ModelConfig, **changes) -> ModelConfig:
    return dataclasses.replace(config, **changes)
