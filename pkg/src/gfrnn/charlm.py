"""Character-level language modeling: vocabulary, BPC, text generation.

Symbols are single bytes by default (a code-point mode covers decoded text
corpora). The vocabulary keeps the max_size - 1 most frequent symbols plus
an unknown token; everything else encodes to unknown. BPC is the mean
-log2 p(next symbol) over a sequence with state carried end to end.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Rng, sample_categorical
from .stack import Model, StackState, sequence_forward

VOCAB_FORMAT = "charvocab 1"


class Vocabulary:
    """Dense symbol<->index map with a trailing unknown index.

    symbols are integers: byte values in 'bytes' mode, code points in
    'codepoints' mode. Indices 0..V-2 are known symbols in frequency order,
    V-1 is unknown.
    """

    def __init__(self, symbols: list[int], freqs: list[int], mode: str = "bytes",
                 unknown_freq: int = 0):
        if mode not in ("bytes", "codepoints"):
            raise ConfigError(f"vocabulary mode: unknown value {mode!r}")
        if len(symbols) != len(set(symbols)):
            raise ConfigError("vocabulary symbols: duplicate entry")
        self.mode = mode
        self.symbols = list(symbols)
        self.freqs = list(freqs)
        self.unknown_freq = unknown_freq
        self.unknown_index = len(symbols)
        self.index_of = {s: i for i, s in enumerate(symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    def _unknown_symbol(self) -> int:
        if self.mode == "codepoints":
            return 0xFFFD
        known = set(self.symbols)
        for b in range(256):
            if b not in known:
                return b
        return 0x1A

    def encode(self, data, strict: bool = False) -> np.ndarray:
        """Symbol indices for data; with strict, symbols outside the known
        set are an error instead of mapping to the unknown index."""
        if self.mode == "bytes":
            if isinstance(data, str):
                data = data.encode("utf-8")
            raw = np.frombuffer(bytes(data), dtype=np.uint8)
        else:
            if isinstance(data, (bytes, bytearray)):
                data = bytes(data).decode("utf-8")
            raw = np.array([ord(ch) for ch in data], dtype=np.int64)
        lut_size = int(raw.max()) + 1 if raw.size else 1
        lut = np.full(lut_size, self.unknown_index, dtype=np.int64)
        for s, i in self.index_of.items():
            if s < lut_size:
                lut[s] = i
        out = lut[raw]
        if strict and out.size and (out == self.unknown_index).any():
            bad = int(raw[int(np.argmax(out == self.unknown_index))])
            raise DataError(f"symbol {bad!r} ({chr(bad)!r}) is outside the "
                            f"{self.size}-entry vocabulary")
        return out

    def decode(self, indices) -> bytes | str:
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise DataError(f"decode: index outside vocabulary of {self.size}")
        table = self.symbols + [self._unknown_symbol()]
        vals = [table[i] for i in indices]
        if self.mode == "bytes":
            return bytes(vals)
        return "".join(chr(v) for v in vals)

    def save(self, path: str):
        with open(path, "w") as f:
            f.write(f"{VOCAB_FORMAT} {self.mode}\n")
            for i, (s, c) in enumerate(zip(self.symbols, self.freqs)):
                f.write(f"{i}\t{c}\t{s:x}\n")
            f.write(f"{self.unknown_index}\t{self.unknown_freq}\tunknown\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path) as f:
            lines = f.read().splitlines()
        if not lines:
            raise DataError(f"vocabulary file {path}: empty")
        head = lines[0].rsplit(" ", 1)
        if head[0] != VOCAB_FORMAT or len(head) != 2:
            raise DataError(f"vocabulary file {path}: bad header {lines[0]!r}")
        mode = head[1]
        symbols, freqs, unknown_freq = [], [], 0
        for ln in lines[1:]:
            if not ln:
                continue
            idx_s, freq_s, sym_s = ln.split("\t")
            if sym_s == "unknown":
                if int(idx_s) != len(symbols):
                    raise DataError(f"vocabulary file {path}: unknown index out of place")
                unknown_freq = int(freq_s)
                continue
            if int(idx_s) != len(symbols):
                raise DataError(f"vocabulary file {path}: indices not dense at {ln!r}")
            symbols.append(int(sym_s, 16))
            freqs.append(int(freq_s))
        return cls(symbols, freqs, mode, unknown_freq)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "symbols": self.symbols, "freqs": self.freqs,
                "unknown_freq": self.unknown_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["symbols"], d["freqs"], d["mode"], d.get("unknown_freq", 0))


def build_vocab(raw, max_size: int, mode: str = "bytes") -> Vocabulary:
    """Keep the max_size - 1 most frequent symbols plus unknown.

    Ties break by first appearance in the corpus; fully deterministic.
    """
    if max_size < 2:
        raise ConfigError(f"max_size: must be >= 2, got {max_size}")
    if mode == "bytes":
        if isinstance(raw, str):
            raw = raw.encode("utf-8")
        data = np.frombuffer(bytes(raw), dtype=np.uint8)
        vals = data.astype(np.int64)
    else:
        if isinstance(raw, (bytes, bytearray)):
            raw = bytes(raw).decode("utf-8")
        vals = np.array([ord(ch) for ch in raw], dtype=np.int64)
    if vals.size == 0:
        raise DataError("build_vocab: empty corpus")
    uniq, first_pos, counts = np.unique(vals, return_index=True, return_counts=True)
    order = sorted(range(len(uniq)), key=lambda k: (-counts[k], first_pos[k]))
    kept = order[:max_size - 1]
    symbols = [int(uniq[k]) for k in kept]
    freqs = [int(counts[k]) for k in kept]
    unknown_freq = int(vals.size - sum(freqs))
    return Vocabulary(symbols, freqs, mode, unknown_freq)


def split_corpus(indices: np.ndarray, train_frac: float = 0.90, valid_frac: float = 0.05):
    """Contiguous train/valid/test split in source order."""
    if not (0 < train_frac < 1 and 0 < valid_frac < 1 and train_frac + valid_frac < 1):
        raise ConfigError(f"split fractions: bad ({train_frac}, {valid_frac})")
    n = len(indices)
    a = int(n * train_frac)
    b = a + int(n * valid_frac)
    train, valid, test = indices[:a], indices[a:b], indices[b:]
    if min(len(train), len(valid), len(test)) < 2:
        raise DataError(f"corpus of {n} symbols too small to split {train_frac}/{valid_frac}")
    return train, valid, test


def evaluate_bpc(model: Model, seq: np.ndarray, chunk: int = 512) -> float:
    """Mean -log2 p(next symbol), state carried across the whole sequence."""
    seq = np.asarray(seq)
    if seq.ndim != 1 or len(seq) < 2:
        raise DataError("evaluate_bpc: need a 1-D sequence of length >= 2")
    state = model.zero_state(1)
    total_nats = 0.0
    positions = len(seq) - 1
    for start in range(0, positions, chunk):
        stop = min(start + chunk, positions)
        X = seq[start:stop, None]
        Y = seq[start + 1:stop + 1, None]
        res = sequence_forward(model, X, Y, state, want_cache=False, keep_probs=False)
        total_nats += float(res.nll.sum())
        state = res.final_state
    return total_nats / (math.log(2.0) * positions)


def _temper(probs: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return probs
    logp = np.log(np.maximum(probs, 1e-300)) / temperature
    logp -= logp.max()
    q = np.exp(logp)
    return q / q.sum()


def generate_text(model: Model, vocab: Vocabulary, seed_text, n_chars: int,
                  rng: Rng, temperature: float = 1.0):
    """Feed the seed, then sample a continuation symbol by symbol.

    temperature 1.0 samples the raw softmax; 0 takes the argmax. Returns the
    generated continuation (decoded), not including the seed.
    """
    if temperature < 0:
        raise ConfigError(f"temperature: must be >= 0, got {temperature}")
    if model.cfg.output_vocab != vocab.size or model.cfg.input_vocab != vocab.size:
        raise ConfigError(
            f"model vocab {model.cfg.input_vocab}/{model.cfg.output_vocab} != "
            f"vocabulary size {vocab.size}")
    seed = vocab.encode(seed_text)
    if len(seed) == 0:
        raise DataError("generate_text: empty seed")
    res = sequence_forward(model, seed[:, None], want_cache=False)
    state = res.final_state
    probs = res.probs[-1, :, 0]
    out = np.empty(n_chars, dtype=np.int64)
    for i in range(n_chars):
        if temperature == 0.0:
            k = int(np.argmax(probs))
        else:
            k = sample_categorical(_temper(probs, temperature), rng)
        out[i] = k
        res = sequence_forward(model, np.array([[k]]), None, state, want_cache=False)
        state = res.final_state
        probs = res.probs[-1, :, 0]
    return vocab.decode(out)
