"""Multi-layer recurrent networks: single, stacked, and gated-feedback.

A gated-feedback network connects every layer at time t-1 to every layer at
time t. The connection from layer i into layer j is scaled by a learned
scalar gate (one scalar per pair per timestep per stream):

    gate(i->j) = sig(w . input_j  +  u . concat(all h at t-1))

where input_j is the vector feeding layer j's affine at time t (the raw
one-hot for j = 0, the layer below's fresh output otherwise). Only the
candidate path of a unit goes through the gated sum; GRU z/r and LSTM
i/f/o gates keep their usual inputs (same-layer recurrence by default, or
ungated all-layer recurrence when all_layer_unit_gates is set).

Everything runs on one column per stream: hidden states are (units, batch)
matrices and symbol sequences are (steps, batch) index matrices. Batch 1
reproduces the plain-vector contracts bit for bit, and the accumulation
order of every sum is fixed so the degenerate configurations (gates frozen
to one at one layer; a diagonal gate pattern over shared weights) reproduce
the plain cell and the stacked network exactly, not just approximately.

State threading is the caller's job: sequence_forward takes state0 and
returns the final state untouched by any reset policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError
from .numerics import (DEFAULT_DTYPE, Rng, add_bias, check_symbol_range,
                       log_softmax_cols, sigmoid)

ARCHS = ("single", "stacked", "gated_feedback")

_UNIT_IN_MATS = {"tanh": ["W"], "gru": ["W", "Wz", "Wr"], "lstm": ["Wc", "Wi", "Wf", "Wo"]}
_UNIT_GATE_RECS = {"tanh": [], "gru": ["Uz", "Ur"], "lstm": ["Ui", "Uf", "Uo"]}
_UNIT_CAND_REC = {"tanh": "U", "gru": "U", "lstm": "Uc"}
_UNIT_BIASES = {"tanh": ["b"], "gru": ["b", "bz", "br"], "lstm": ["bc", "bi", "bf", "bo"]}


@dataclass
class ModelConfig:
    arch: str
    unit: str
    layers: int
    units_per_layer: list[int]
    input_vocab: int
    output_vocab: int
    freeze_gates_to_one: bool = False
    stacked_skip_connections: bool = False
    all_layer_unit_gates: bool = False
    strict_no_bias: bool = False

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch: unknown value {self.arch!r}")
        if self.unit not in _UNIT_IN_MATS:
            raise ConfigError(f"unit: unknown value {self.unit!r}")
        if self.layers < 1:
            raise ConfigError(f"layers: must be >= 1, got {self.layers}")
        if self.arch == "single" and self.layers != 1:
            raise ConfigError("layers: arch 'single' requires exactly 1 layer")
        if len(self.units_per_layer) != self.layers:
            raise ConfigError(
                f"units_per_layer: expected {self.layers} entries, got {len(self.units_per_layer)}")
        if any(int(n) < 1 for n in self.units_per_layer):
            raise ConfigError("units_per_layer: every entry must be >= 1")
        if self.input_vocab < 1:
            raise ConfigError(f"input_vocab: must be >= 1, got {self.input_vocab}")
        if self.output_vocab < 0:
            raise ConfigError(f"output_vocab: must be >= 0, got {self.output_vocab}")
        if self.freeze_gates_to_one and self.arch != "gated_feedback":
            raise ConfigError("freeze_gates_to_one: only valid for arch 'gated_feedback'")
        if self.stacked_skip_connections and self.arch == "single":
            raise ConfigError("stacked_skip_connections: not valid for arch 'single'")
        if self.all_layer_unit_gates:
            if self.arch != "gated_feedback" or self.unit not in ("gru", "lstm"):
                raise ConfigError(
                    "all_layer_unit_gates: only valid for gated_feedback GRU/LSTM")
        self.units_per_layer = [int(n) for n in self.units_per_layer]
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


@dataclass
class StackState:
    """Per-layer hidden columns at one timestep; c present for LSTM only."""
    h: list[np.ndarray]
    c: list[np.ndarray] | None = None

    @property
    def batch(self) -> int:
        return self.h[0].shape[1]

    def copy(self) -> "StackState":
        return StackState([a.copy() for a in self.h],
                          None if self.c is None else [a.copy() for a in self.c])


class ParamSet:
    """Ordered name -> array store; insertion order is the flat ordering used
    by optimizers, serialization, and gradient checks."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray):
        if name in self._arrays:
            raise ConfigError(f"parameter {name!r} added twice")
        self._arrays[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __setitem__(self, name: str, array: np.ndarray):
        old = self[name]
        if old.shape != array.shape:
            raise ConfigError(f"parameter {name!r}: shape {array.shape} != {old.shape}")
        self._arrays[name] = array

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def set_flat(self, vec: np.ndarray):
        if vec.size != self.size():
            raise ConfigError(f"flat vector has {vec.size} entries, expected {self.size()}")
        off = 0
        for a in self._arrays.values():
            np.copyto(a.reshape(-1), vec[off:off + a.size].astype(a.dtype))
            off += a.size

    def new_zeros(self) -> "ParamSet":
        out = ParamSet()
        for name, a in self._arrays.items():
            out.add(name, np.zeros_like(a))
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, a in self._arrays.items():
            out.add(name, a.copy())
        return out

    def manifest(self) -> list[tuple[str, tuple[int, ...], str]]:
        return [(n, tuple(a.shape), a.dtype.str) for n, a in self._arrays.items()]

    def l2_norm(self) -> float:
        total = 0.0
        for a in self._arrays.values():
            total += float(np.dot(a.reshape(-1), a.reshape(-1)))
        return float(np.sqrt(total))


def _layer_blocks(cfg: ModelConfig, j: int):
    """Yield (name, shape, init) for layer j. init: 'mat' | 'zero' | 'one'."""
    n = cfg.units_per_layer
    below = cfg.input_vocab if j == 0 else n[j - 1]
    gf = cfg.arch == "gated_feedback"
    for w in _UNIT_IN_MATS[cfg.unit]:
        yield f"l{j}.{w}", (n[j], below), "mat"
    if cfg.stacked_skip_connections and j > 0:
        for w in _UNIT_IN_MATS[cfg.unit]:
            yield f"l{j}.{w}x", (n[j], cfg.input_vocab), "mat"
    cand = _UNIT_CAND_REC[cfg.unit]
    if gf:
        for i in range(cfg.layers):
            yield f"l{j}.{cand}{i}", (n[j], n[i]), "mat"
    else:
        yield f"l{j}.{cand}", (n[j], n[j]), "mat"
    for u in _UNIT_GATE_RECS[cfg.unit]:
        if cfg.all_layer_unit_gates:
            for i in range(cfg.layers):
                yield f"l{j}.{u}{i}", (n[j], n[i]), "mat"
        else:
            yield f"l{j}.{u}", (n[j], n[j]), "mat"
    if not cfg.strict_no_bias:
        for b in _UNIT_BIASES[cfg.unit]:
            yield f"l{j}.{b}", (n[j],), "one" if b == "bf" else "zero"


def param_shapes(cfg: ModelConfig):
    """Yield (name, shape, init) for every parameter, in flat order."""
    n = cfg.units_per_layer
    total_units = sum(n)
    for j in range(cfg.layers):
        yield from _layer_blocks(cfg, j)
    if cfg.arch == "gated_feedback":
        for j in range(cfg.layers):
            for i in range(cfg.layers):
                if j > 0:
                    yield f"g{i}>{j}.wh", (n[j - 1],), "zero"
                if j == 0 or cfg.stacked_skip_connections:
                    yield f"g{i}>{j}.wx", (cfg.input_vocab,), "zero"
                yield f"g{i}>{j}.u", (total_units,), "zero"
    if cfg.output_vocab > 0:
        read = range(cfg.layers) if cfg.stacked_skip_connections else [cfg.layers - 1]
        for j in read:
            yield f"out.W{j}", (cfg.output_vocab, n[j]), "mat"
        if not cfg.strict_no_bias:
            yield "out.b", (cfg.output_vocab,), "zero"


def count_parameters(cfg: ModelConfig) -> int:
    cfg.validate()
    return sum(int(np.prod(shape)) for _, shape, _ in param_shapes(cfg))


def count_parameter_blocks(cfg: ModelConfig) -> dict[str, int]:
    """Per-parameter sizes in flat order; values sum to count_parameters."""
    cfg.validate()
    return {name: int(np.prod(shape)) for name, shape, _ in param_shapes(cfg)}


class Model:
    """A config plus its parameters, with the forward/backward machinery."""

    def __init__(self, cfg: ModelConfig, params: ParamSet, dtype=DEFAULT_DTYPE):
        self.cfg = cfg.validate()
        self.params = params
        self.dtype = np.dtype(dtype)
        self.sizes = cfg.units_per_layer
        self.L = cfg.layers
        self.total_units = sum(self.sizes)

    @classmethod
    def build(cls, cfg: ModelConfig, seed_or_rng, dtype=DEFAULT_DTYPE) -> "Model":
        cfg.validate()
        rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
        params = ParamSet()
        for name, shape, init in param_shapes(cfg):
            if init == "mat":
                fan_in = shape[-1]
                params.add(name, rng.uniform_signed(shape, 1.0 / np.sqrt(fan_in), dtype))
            elif init == "one":
                params.add(name, np.ones(shape, dtype=dtype))
            else:
                params.add(name, np.zeros(shape, dtype=dtype))
        return cls(cfg, params, dtype)

    @property
    def read_layers(self) -> list[int]:
        if self.cfg.stacked_skip_connections:
            return list(range(self.L))
        return [self.L - 1]

    def zero_state(self, batch: int = 1) -> StackState:
        h = [np.zeros((n, batch), dtype=self.dtype) for n in self.sizes]
        c = None
        if self.cfg.unit == "lstm":
            c = [np.zeros((n, batch), dtype=self.dtype) for n in self.sizes]
        return StackState(h, c)

    def bias(self, j: int, name: str) -> np.ndarray | None:
        key = f"l{j}.{name}"
        return self.params[key] if key in self.params else None

    def _bind_gates(self):
        """Stack per-pair gate vectors into per-destination matrices.

        Rebuilt per call because optimizers mutate the underlying vectors in
        place; the stacks are copies.
        """
        p, L = self.params, self.L
        wx, wh, u = [], [], []
        for j in range(L):
            if f"g0>{j}.wx" in p:
                wx.append(np.stack([p[f"g{i}>{j}.wx"] for i in range(L)]))
            else:
                wx.append(None)
            if j > 0:
                wh.append(np.stack([p[f"g{i}>{j}.wh"] for i in range(L)]))
            else:
                wh.append(None)
            u.append(np.stack([p[f"g{i}>{j}.u"] for i in range(L)]))
        return {"wx": wx, "wh": wh, "u": u}


# ---- input representation -------------------------------------------------
# A step input is either a row of symbol indices ("idx", (batch,)) applied by
# column gather, or a dense matrix ("dense", (input_vocab, batch)) applied by
# matmul. The two agree bitwise when the dense matrix is one-hot columns.

def _x_project(mat: np.ndarray, x_rep) -> np.ndarray:
    kind, val = x_rep
    if kind == "idx":
        return mat[:, val]
    return mat @ val


def _gate_structures(model: Model, gate_override):
    """Resolve the gate mode once per sequence.

    Returns (mode, bound-or-pattern): mode 'learned' computes gates from
    parameters; 'fixed' uses a constant (L, L) pattern with no gate grads.
    """
    if model.cfg.arch != "gated_feedback":
        return "none", None
    if model.cfg.freeze_gates_to_one and gate_override is None:
        gate_override = np.ones((model.L, model.L), dtype=model.dtype)
    if gate_override is not None:
        pattern = np.asarray(gate_override, dtype=model.dtype)
        if pattern.shape != (model.L, model.L):
            raise ConfigError(
                f"gate_override: expected shape {(model.L, model.L)}, got {pattern.shape}")
        return "fixed", pattern
    return "learned", model._bind_gates()


def _forward_step(model: Model, x_rep, h_prev, c_prev, gate_mode, gate_bind,
                  mask_col, collect: bool):
    """One timestep across all layers; returns (h_out, c_out, cache|None)."""
    cfg, p = model.cfg, model.params
    L, unit = model.L, cfg.unit
    gf = cfg.arch == "gated_feedback"
    skip = cfg.stacked_skip_connections

    hstar = np.concatenate(h_prev, axis=0) if (gf and gate_mode == "learned") else None
    h_out: list[np.ndarray] = []
    c_out: list[np.ndarray] = [] if unit == "lstm" else None
    layer_caches = [] if collect else None
    gates_per_layer = [] if (gf and collect) else None

    for j in range(L):
        a = h_out[j - 1] if j > 0 else None  # post-mask output of the layer below

        def in_aff(wname: str) -> np.ndarray:
            # (W a | W[:, idx]) + skip x term; order fixed: below-part then x-part
            if j == 0:
                return _x_project(p[f"l{j}.{wname}"], x_rep)
            out = p[f"l{j}.{wname}"] @ a
            if skip:
                out = out + _x_project(p[f"l{j}.{wname}x"], x_rep)
            return out

        # cross-layer gate scalars for this destination layer
        if gf:
            if gate_mode == "fixed":
                g_j = None  # constant pattern; rows read from gate_bind
            else:
                pre_g = None
                if j > 0:
                    pre_g = gate_bind["wh"][j] @ a
                if gate_bind["wx"][j] is not None:
                    term = _x_project(gate_bind["wx"][j], x_rep)
                    pre_g = term if pre_g is None else pre_g + term
                pre_g = pre_g + gate_bind["u"][j] @ hstar
                g_j = sigmoid(pre_g)  # (L, batch)

        def cand_rec(cand: str):
            # gated sum over source layers (returns (rec, uh_list)), or the
            # plain same-layer term for stacked/single.
            if not gf:
                return p[f"l{j}.{cand}"] @ h_prev[j], None
            uh = [p[f"l{j}.{cand}{i}"] @ h_prev[i] for i in range(L)]
            rec = None
            for i in range(L):
                if gate_mode == "fixed":
                    term = gate_bind[i, j] * uh[i]
                else:
                    term = uh[i] * g_j[i][None, :]
                rec = term if rec is None else rec + term
            return rec, uh

        def unit_gate_rec(uname: str) -> np.ndarray:
            if cfg.all_layer_unit_gates:
                rec = None
                for i in range(L):
                    term = p[f"l{j}.{uname}{i}"] @ h_prev[i]
                    rec = term if rec is None else rec + term
                return rec
            return p[f"l{j}.{uname}"] @ h_prev[j]

        def biased(pre: np.ndarray, bname: str) -> np.ndarray:
            b = model.bias(j, bname)
            return pre if b is None else add_bias(pre, b)

        if unit == "tanh":
            rec, uh = cand_rec("U")
            h_raw = np.tanh(biased(in_aff("W") + rec, "b"))
            cl = {"h_raw": h_raw, "uh": uh}
        elif unit == "gru":
            z = sigmoid(biased(in_aff("Wz") + unit_gate_rec("Uz"), "bz"))
            r = sigmoid(biased(in_aff("Wr") + unit_gate_rec("Ur"), "br"))
            rec, uh = cand_rec("U")
            hc = np.tanh(biased(in_aff("W") + r * rec, "b"))
            h_raw = (1.0 - z) * h_prev[j] + z * hc
            cl = {"z": z, "r": r, "rec": rec, "hc": hc, "uh": uh}
        else:  # lstm
            i_g = sigmoid(biased(in_aff("Wi") + unit_gate_rec("Ui"), "bi"))
            f_g = sigmoid(biased(in_aff("Wf") + unit_gate_rec("Uf"), "bf"))
            o_g = sigmoid(biased(in_aff("Wo") + unit_gate_rec("Uo"), "bo"))
            rec, uh = cand_rec("Uc")
            cc = np.tanh(biased(in_aff("Wc") + rec, "bc"))
            c_raw = f_g * c_prev[j] + i_g * cc
            tc = np.tanh(c_raw)
            h_raw = o_g * tc
            cl = {"i": i_g, "f": f_g, "o": o_g, "cc": cc, "tc": tc, "uh": uh}

        if mask_col is None:
            h_j = h_raw
            c_j = c_raw if unit == "lstm" else None
        else:
            h_j = np.where(mask_col[None, :] > 0, h_raw, h_prev[j])
            c_j = (np.where(mask_col[None, :] > 0, c_raw, c_prev[j])
                   if unit == "lstm" else None)
        h_out.append(h_j)
        if unit == "lstm":
            c_out.append(c_j)
        if collect:
            layer_caches.append(cl)
            if gf:
                gates_per_layer.append(g_j if gate_mode == "learned" else None)

    cache = None
    if collect:
        cache = {"x": x_rep, "mask": mask_col, "h_prev": h_prev, "c_prev": c_prev,
                 "h_out": h_out, "hstar": hstar, "g": gates_per_layer,
                 "layers": layer_caches}
    return h_out, c_out, cache


@dataclass
class SeqResult:
    probs: np.ndarray | None
    nll: np.ndarray | None
    final_state: StackState
    cache: dict | None


def _as_step_matrix(name, seq) -> np.ndarray:
    arr = np.asarray(seq)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigError(f"{name}: expected (steps,) or (steps, batch)")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"{name}: symbol indices must be integers")
    return arr.astype(np.int64, copy=False)


def sequence_forward(model: Model, inputs, targets=None, state0: StackState | None = None,
                     mask=None, gate_override=None, want_cache: bool = True,
                     keep_probs: bool | None = None) -> SeqResult:
    """Run a sequence of symbol columns through the network.

    inputs/targets: (steps,) or (steps, batch) int arrays. mask: optional
    (steps, batch) 0/1 array; masked positions neither advance the state nor
    contribute loss. nll is the per-stream sum of -log p(target) in nats.
    state0 defaults to zeros and is never mutated.
    """
    cfg = model.cfg
    X = _as_step_matrix("inputs", inputs)
    T, B = X.shape
    if T < 1:
        raise ConfigError("inputs: empty sequence")
    check_symbol_range("inputs", X, cfg.input_vocab)
    Y = None
    if targets is not None:
        if cfg.output_vocab == 0:
            raise ConfigError("targets: model has no output head (output_vocab = 0)")
        Y = _as_step_matrix("targets", targets)
        if Y.shape != X.shape:
            raise ConfigError(f"targets: shape {Y.shape} != inputs shape {X.shape}")
        check_symbol_range("targets", Y, cfg.output_vocab)
    M = None
    if mask is not None:
        M = np.asarray(mask, dtype=model.dtype)
        if M.shape != (T, B):
            raise ConfigError(f"mask: expected shape {(T, B)}, got {M.shape}")
    if state0 is None:
        state0 = model.zero_state(B)
    if state0.batch != B:
        raise ConfigError(f"state0: batch {state0.batch} != input batch {B}")
    if keep_probs is None:
        keep_probs = Y is not None or cfg.output_vocab > 0

    gate_mode, gate_bind = _gate_structures(model, gate_override)

    h, c = state0.h, state0.c
    steps = [] if want_cache else None
    probs = (np.empty((T, cfg.output_vocab, B), dtype=model.dtype)
             if (keep_probs and cfg.output_vocab > 0) else None)
    nll = np.zeros(B, dtype=np.float64) if Y is not None else None
    out_b = model.params["out.b"] if "out.b" in model.params else None

    for t in range(T):
        x_rep = ("idx", X[t])
        m_col = M[t] if M is not None else None
        h, c, cache_t = _forward_step(model, x_rep, h, c, gate_mode, gate_bind,
                                      m_col, want_cache)
        if probs is not None or nll is not None:
            logits = None
            for j in model.read_layers:
                term = model.params[f"out.W{j}"] @ h[j]
                logits = term if logits is None else logits + term
            if out_b is not None:
                logits = add_bias(logits, out_b)
            logp = log_softmax_cols(logits)
            if probs is not None:
                np.exp(logp, out=probs[t])
            if nll is not None:
                step_nll = -logp[Y[t], np.arange(B)]
                if m_col is not None:
                    step_nll = step_nll * m_col
                nll += step_nll
        if want_cache:
            steps.append(cache_t)

    final = StackState(h, c)
    cache = None
    if want_cache:
        cache = {"steps": steps, "inputs": X, "targets": Y, "mask": M,
                 "probs": probs, "state0": state0, "gate_mode": gate_mode,
                 "gate_bind": gate_bind, "batch": B}
    return SeqResult(probs, nll, final, cache)


def sequence_backward(model: Model, cache: dict, dfinal: StackState | None = None,
                      loss_scale: float = 1.0):
    """Exact gradients for one cached forward pass.

    Returns (grads: ParamSet, grad_state0: StackState, grad_norm: float).
    Gradients flow from the per-step losses (if targets were given) and from
    dfinal (gradient arriving at the final state), through every connection,
    including the cross-layer gate parameters.
    """
    cfg, p = model.cfg, model.params
    L, unit = model.L, cfg.unit
    gf = cfg.arch == "gated_feedback"
    skip = cfg.stacked_skip_connections
    learned = cache["gate_mode"] == "learned"
    gate_bind = cache["gate_bind"]
    steps, X, Y, M = cache["steps"], cache["inputs"], cache["targets"], cache["mask"]
    probs = cache["probs"]
    T, B = X.shape
    sizes = model.sizes
    if Y is not None and probs is None:
        raise ConfigError("sequence_backward: forward was run without keep_probs")

    grads = model.params.new_zeros()
    # x-side matrices are applied by column gather; their gradients are
    # accumulated as (idx, dpre) pairs and scattered once at the end.
    scatter: dict[str, list] = {}

    def scatter_add(name, idx, dpre):
        scatter.setdefault(name, []).append((idx, dpre))

    d_gate_u = [np.zeros_like(gate_bind["u"][j]) for j in range(L)] if learned else None
    d_gate_wh = ([None] + [np.zeros_like(gate_bind["wh"][j]) for j in range(1, L)]
                 if learned else None)

    dh_carry = [np.zeros((n, B), dtype=model.dtype) for n in sizes]
    dc_carry = ([np.zeros((n, B), dtype=model.dtype) for n in sizes]
                if unit == "lstm" else None)
    if dfinal is not None:
        for j in range(L):
            dh_carry[j] = dh_carry[j] + dfinal.h[j].astype(model.dtype)
        if unit == "lstm" and dfinal.c is not None:
            for j in range(L):
                dc_carry[j] = dc_carry[j] + dfinal.c[j].astype(model.dtype)

    cols = np.arange(B)
    out_names = [f"out.W{j}" for j in model.read_layers]

    for t in range(T - 1, -1, -1):
        st = steps[t]
        m_col = st["mask"]
        dh_total = dh_carry
        dc_total = dc_carry

        if Y is not None:
            dlogits = probs[t].astype(model.dtype, copy=True)
            dlogits[Y[t], cols] -= 1.0
            if loss_scale != 1.0:
                dlogits *= loss_scale
            if m_col is not None:
                dlogits *= m_col[None, :]
            for j, name in zip(model.read_layers, out_names):
                grads[name] += dlogits @ st["h_out"][j].T
                dh_total[j] = dh_total[j] + p[name].T @ dlogits
            if "out.b" in grads._arrays:
                grads["out.b"] += dlogits.sum(axis=1)

        dh_next = [np.zeros((n, B), dtype=model.dtype) for n in sizes]
        dc_next = ([np.zeros((n, B), dtype=model.dtype) for n in sizes]
                   if unit == "lstm" else None)
        h_prev, c_prev = st["h_prev"], st["c_prev"]
        idx_t = st["x"][1]

        for j in range(L - 1, -1, -1):
            cl = st["layers"][j]
            dh = dh_total[j]
            if m_col is not None:
                keep = m_col[None, :]
                dh_step = dh * keep
                dh_next[j] += dh * (1.0 - keep)
                if unit == "lstm":
                    dc_step = dc_total[j] * keep
                    dc_next[j] += dc_total[j] * (1.0 - keep)
            else:
                dh_step = dh
                dc_step = dc_total[j] if unit == "lstm" else None

            a = st["h_out"][j - 1] if j > 0 else None

            def back_in(wname, dpre, da):
                # gradient of the layer-input affine; returns updated da
                if j == 0:
                    scatter_add(f"l{j}.{wname}", idx_t, dpre)
                    return da
                grads[f"l{j}.{wname}"] += dpre @ a.T
                if skip:
                    scatter_add(f"l{j}.{wname}x", idx_t, dpre)
                term = p[f"l{j}.{wname}"].T @ dpre
                return term if da is None else da + term

            def back_unit_gate_rec(uname, dpre):
                if cfg.all_layer_unit_gates:
                    for i in range(L):
                        grads[f"l{j}.{uname}{i}"] += dpre @ h_prev[i].T
                        dh_next[i] += p[f"l{j}.{uname}{i}"].T @ dpre
                else:
                    grads[f"l{j}.{uname}"] += dpre @ h_prev[j].T
                    dh_next[j] += p[f"l{j}.{uname}"].T @ dpre

            da = None
            if unit == "tanh":
                h_raw = cl["h_raw"]
                dpre = dh_step * (1.0 - h_raw * h_raw)
                drec = dpre
                da = back_in("W", dpre, da)
                if not cfg.strict_no_bias:
                    grads[f"l{j}.b"] += dpre.sum(axis=1)
                cand = "U"
            elif unit == "gru":
                z, r, hc, rec = cl["z"], cl["r"], cl["hc"], cl["rec"]
                dz = dh_step * (hc - h_prev[j])
                dhc = dh_step * z
                dh_next[j] += dh_step * (1.0 - z)
                dpre_c = dhc * (1.0 - hc * hc)
                dr = dpre_c * rec
                drec = dpre_c * r
                dpre_z = dz * z * (1.0 - z)
                dpre_r = dr * r * (1.0 - r)
                da = back_in("W", dpre_c, da)
                da = back_in("Wz", dpre_z, da)
                da = back_in("Wr", dpre_r, da)
                back_unit_gate_rec("Uz", dpre_z)
                back_unit_gate_rec("Ur", dpre_r)
                if not cfg.strict_no_bias:
                    grads[f"l{j}.b"] += dpre_c.sum(axis=1)
                    grads[f"l{j}.bz"] += dpre_z.sum(axis=1)
                    grads[f"l{j}.br"] += dpre_r.sum(axis=1)
                dpre = dpre_c  # candidate pre-activation drives the gated sum
                cand = "U"
            else:  # lstm
                i_g, f_g, o_g, cc, tc = cl["i"], cl["f"], cl["o"], cl["cc"], cl["tc"]
                dc_loc = dc_step + dh_step * o_g * (1.0 - tc * tc)
                do = dh_step * tc
                dcc = dc_loc * i_g
                di = dc_loc * cc
                df = dc_loc * c_prev[j]
                dc_next[j] += dc_loc * f_g
                dpre_i = di * i_g * (1.0 - i_g)
                dpre_f = df * f_g * (1.0 - f_g)
                dpre_o = do * o_g * (1.0 - o_g)
                dpre_c = dcc * (1.0 - cc * cc)
                drec = dpre_c
                da = back_in("Wc", dpre_c, da)
                da = back_in("Wi", dpre_i, da)
                da = back_in("Wf", dpre_f, da)
                da = back_in("Wo", dpre_o, da)
                back_unit_gate_rec("Ui", dpre_i)
                back_unit_gate_rec("Uf", dpre_f)
                back_unit_gate_rec("Uo", dpre_o)
                if not cfg.strict_no_bias:
                    grads[f"l{j}.bc"] += dpre_c.sum(axis=1)
                    grads[f"l{j}.bi"] += dpre_i.sum(axis=1)
                    grads[f"l{j}.bf"] += dpre_f.sum(axis=1)
                    grads[f"l{j}.bo"] += dpre_o.sum(axis=1)
                dpre = dpre_c
                cand = "Uc"

            # candidate recurrent path: gated cross-layer sum or plain term
            if gf:
                uh = cl["uh"]
                g_j = st["g"][j]  # (L, B) or None when the pattern is fixed
                dg_rows = np.empty((L, B), dtype=model.dtype) if learned else None
                for i in range(L):
                    if learned:
                        g_row = g_j[i][None, :]
                        dg_rows[i] = (drec * uh[i]).sum(axis=0)
                        tmp = drec * g_row
                    else:
                        tmp = gate_bind[i, j] * drec
                    grads[f"l{j}.{cand}{i}"] += tmp @ h_prev[i].T
                    dh_next[i] += p[f"l{j}.{cand}{i}"].T @ tmp
                if learned:
                    dpre_g = dg_rows * g_j * (1.0 - g_j)
                    d_gate_u[j] += dpre_g @ st["hstar"].T
                    dhstar = gate_bind["u"][j].T @ dpre_g
                    off = 0
                    for i in range(L):
                        dh_next[i] += dhstar[off:off + sizes[i]]
                        off += sizes[i]
                    if j > 0:
                        d_gate_wh[j] += dpre_g @ a.T
                        term = gate_bind["wh"][j].T @ dpre_g
                        da = term if da is None else da + term
                    if gate_bind["wx"][j] is not None:
                        scatter_add(f"__gwx{j}", idx_t, dpre_g)
            else:
                grads[f"l{j}.{cand}"] += drec @ h_prev[j].T
                dh_next[j] += p[f"l{j}.{cand}"].T @ drec

            if j > 0 and da is not None:
                dh_total[j - 1] = dh_total[j - 1] + da

        dh_carry = dh_next
        dc_carry = dc_next

    # batched scatters for every gather-applied matrix
    for name, entries in scatter.items():
        idx_all = np.concatenate([e[0] for e in entries])
        val_all = np.concatenate([e[1] for e in entries], axis=1)
        if name.startswith("__gwx"):
            j = int(name[5:])
            buf = np.zeros((cfg.input_vocab, L), dtype=model.dtype)
            np.add.at(buf, idx_all, val_all.T)
            dwx = buf.T
            for i in range(L):
                grads[f"g{i}>{j}.wx"] += dwx[i]
        else:
            buf = np.zeros((grads[name].shape[1], grads[name].shape[0]), dtype=model.dtype)
            np.add.at(buf, idx_all, val_all.T)
            grads[name] += buf.T

    if learned:
        for j in range(L):
            for i in range(L):
                grads[f"g{i}>{j}.u"] += d_gate_u[j][i]
                if j > 0:
                    grads[f"g{i}>{j}.wh"] += d_gate_wh[j][i]

    grad_state0 = StackState(dh_carry, dc_carry)
    grad_norm = grads.l2_norm()
    return grads, grad_state0, grad_norm


# ---- public single-step operations ----------------------------------------

def _dense_x(model: Model, x) -> tuple:
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != model.cfg.input_vocab:
        raise ConfigError(
            f"x: expected ({model.cfg.input_vocab},) or ({model.cfg.input_vocab}, batch)")
    return ("dense", x)


def _public_step(model: Model, x, state: StackState, gate_override) -> StackState:
    x_rep = _dense_x(model, x)
    gate_mode, gate_bind = _gate_structures(model, gate_override)
    h, c, _ = _forward_step(model, x_rep, state.h, state.c, gate_mode, gate_bind,
                            None, collect=False)
    return StackState(h, c)


def gf_step(model: Model, x, state: StackState, gate_override=None) -> StackState:
    """One gated-feedback timestep on a dense input column."""
    if model.cfg.arch != "gated_feedback":
        raise ConfigError(f"gf_step: model arch is {model.cfg.arch!r}")
    return _public_step(model, x, state, gate_override)


def stacked_step(model: Model, x, state: StackState) -> StackState:
    """One plain stacked (or single-layer) timestep on a dense input column."""
    if model.cfg.arch == "gated_feedback":
        raise ConfigError("stacked_step: model arch is 'gated_feedback'")
    return _public_step(model, x, state, None)


def global_gates(model: Model, bottom_inputs: list[np.ndarray],
                 h_star_prev: np.ndarray) -> np.ndarray:
    """Gate scalars for every (source i -> destination j) pair.

    bottom_inputs[j] is the vector feeding layer j's affine (length
    input_vocab for j = 0, layer j-1 units otherwise, plus input_vocab when
    skip connections are on). Returns (L, L) with [i, j] indexing, or
    (L, L, batch) for column-batched inputs.
    """
    if model.cfg.arch != "gated_feedback":
        raise ConfigError("global_gates: model arch is not 'gated_feedback'")
    bind = model._bind_gates()
    L, V = model.L, model.cfg.input_vocab
    batched = h_star_prev.ndim == 2
    B = h_star_prev.shape[1] if batched else 1
    hs = h_star_prev if batched else h_star_prev[:, None]
    out = np.empty((L, L, B), dtype=model.dtype)
    for j in range(L):
        a = np.asarray(bottom_inputs[j], dtype=model.dtype)
        if a.ndim == 1:
            a = a[:, None]
        if j > 0:
            h_dim = model.sizes[j - 1]
            pre = bind["wh"][j] @ a[:h_dim]
            if bind["wx"][j] is not None:
                pre = pre + bind["wx"][j] @ a[h_dim:h_dim + V]
        else:
            pre = bind["wx"][j] @ a[:V]
        pre = pre + bind["u"][j] @ hs
        out[:, j, :] = sigmoid(pre)
    return out if batched else out[:, :, 0]
