"""Synthetic and byte-level corpora, probe sets.

Corpus file format: UTF-8 text, one sequence per line, token ids as
space-separated decimal integers. Lines are never empty.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CORPUS_KINDS = ("zipf-synthetic", "byte-text")
ZIPF_EXPONENT = 1.1


def zipf_probabilities(n: int, exponent: float = ZIPF_EXPONENT) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate_corpus(
    kind: str,
    size: int,
    seed: int,
    *,
    source=None,
    vocab: int = 252,
    min_len: int = 8,
    max_len: int = 31,
    exponent: float = ZIPF_EXPONENT,
    pair_rate: float = 0.5,
) -> list[list[int]]:
    """Build ``size`` sequences.

    zipf-synthetic: token ids follow a Zipf law over ``vocab`` ids, with a
    bigram dependency for the model to learn: with probability ``pair_rate``
    the next token is the rank-neighbour of the current one (id ^ 1). Swapping
    neighbouring ranks keeps the marginal rank-frequency curve close to Zipf.

    byte-text: UTF-8 bytes of the non-blank lines of ``source``, chunked to at
    most ``max_len`` bytes.
    """
    if size <= 0:
        raise ValueError("corpus size must be positive")
    if kind == "zipf-synthetic":
        if vocab % 2:
            raise ValueError("zipf vocab must be even for rank pairing")
        rng = np.random.default_rng([seed, 1])
        probs = zipf_probabilities(vocab, exponent)
        out = []
        for _ in range(size):
            length = int(rng.integers(min_len, max_len + 1))
            draws = rng.choice(vocab, size=length, p=probs)
            pair = rng.random(length) < pair_rate
            seq = [int(draws[0])]
            for t in range(1, length):
                seq.append(seq[-1] ^ 1 if pair[t] else int(draws[t]))
            out.append(seq)
        return out
    if kind == "byte-text":
        if source is None:
            raise ValueError("byte-text corpora need a source file")
        data = Path(source).read_bytes()
        chunks = []
        for line in data.splitlines():
            line = line.strip()
            for lo in range(0, len(line), max_len):
                piece = line[lo : lo + max_len]
                if piece:
                    chunks.append(list(piece))
        if not chunks:
            raise ValueError(f"{source}: no text found")
        rng = np.random.default_rng([seed, 2])
        idx = rng.permutation(len(chunks)) if size >= len(chunks) else rng.choice(len(chunks), size=size, replace=False)
        return [chunks[i] for i in idx[:size]]
    raise ValueError(f"unknown corpus kind {kind!r}; expected one of {CORPUS_KINDS}")


def write_corpus(path, sequences) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(" ".join(str(t) for t in seq) + "\n" for seq in sequences), encoding="utf-8")
    return path


def read_corpus(path) -> list[list[int]]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            raise ValueError(f"{path}:{n}: empty sequence")
        out.append([int(t) for t in line.split()])
    return out


def corpus_hash(sequences) -> str:
    h = hashlib.sha256()
    for seq in sequences:
        h.update((" ".join(map(str, seq)) + "\n").encode())
    return h.hexdigest()[:16]


def rank_frequency_slope(sequences, top: int = 100) -> float:
    """OLS slope of log frequency against log rank over the ``top`` most frequent ids."""
    counts = np.bincount(np.concatenate([np.asarray(s) for s in sequences]))
    counts = np.sort(counts[counts > 0])[::-1][:top]
    ranks = np.arange(1, len(counts) + 1)
    return float(np.polyfit(np.log(ranks), np.log(counts), 1)[0])


@dataclass(frozen=True)
class ProbeSet:
    sequences: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def digest(self) -> str:
        return corpus_hash(self.sequences)

    def arrays(self, config) -> tuple[np.ndarray, np.ndarray]:
        """(ids, mask) padded to the model's max_seq; encoders get a leading CLS."""
        ids = np.full((len(self), config.max_seq), config.pad_id, dtype=np.int64)
        mask = np.zeros((len(self), config.max_seq), dtype=bool)
        for i, seq in enumerate(self.sequences):
            row = list(seq) if config.causal else [config.cls_id, *seq]
            row = row[: config.max_seq]
            ids[i, : len(row)] = row
            mask[i, : len(row)] = True
        return ids, mask


def split_corpus(sequences, probe_count: int, seed: int, n_probe_sets: int = 2) -> tuple[list[list[int]], list[ProbeSet]]:
    """Hold out ``n_probe_sets`` disjoint probe sets; the rest is training data."""
    need = probe_count * n_probe_sets
    if len(sequences) <= need:
        raise ValueError(f"corpus of {len(sequences)} sequences cannot hold out {need} probes")
    perm = np.random.default_rng([seed, 3]).permutation(len(sequences))
    probes = [ProbeSet(tuple(tuple(sequences[i]) for i in perm[k * probe_count : (k + 1) * probe_count])) for k in range(n_probe_sets)]
    train = [list(sequences[i]) for i in sorted(perm[need:])]
    return train, probes
