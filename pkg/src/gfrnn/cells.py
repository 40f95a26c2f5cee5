"""Single-layer recurrent cells: tanh, GRU, LSTM.

Reference implementations on plain vectors (or one column per stream), with
forward caches and exact hand-derived backwards. The multi-layer machinery in
stack.py composes the same arithmetic; these stand alone so the two code
paths can be checked against each other bit for bit.

Update rules:
  tanh:  h = tanh(W x + U h_prev + b)
  GRU:   z = sig(Wz x + Uz h_prev + bz)
         r = sig(Wr x + Ur h_prev + br)
         hc = tanh(W x + r * (U h_prev) + b)
         h = (1 - z) * h_prev + z * hc
  LSTM:  i, f, o = sig(W. x + U. h_prev + b.)
         cc = tanh(Wc x + Uc h_prev + bc)
         c = f * c_prev + i * cc
         h = o * tanh(c)

Parameter dataclasses hold optional biases (None means the bias term is
omitted entirely, which the strict no-bias mode uses).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import DEFAULT_DTYPE, Rng, add_bias, sigmoid

CELL_KINDS = ("tanh", "gru", "lstm")


@dataclass
class TanhParams:
    w: np.ndarray  # (units, in_dim)
    u: np.ndarray  # (units, units)
    b: np.ndarray | None = None


@dataclass
class GruParams:
    w: np.ndarray
    wz: np.ndarray
    wr: np.ndarray
    u: np.ndarray
    uz: np.ndarray
    ur: np.ndarray
    b: np.ndarray | None = None
    bz: np.ndarray | None = None
    br: np.ndarray | None = None


@dataclass
class LstmParams:
    wc: np.ndarray
    wi: np.ndarray
    wf: np.ndarray
    wo: np.ndarray
    uc: np.ndarray
    ui: np.ndarray
    uf: np.ndarray
    uo: np.ndarray
    bc: np.ndarray | None = None
    bi: np.ndarray | None = None
    bf: np.ndarray | None = None
    bo: np.ndarray | None = None


@dataclass
class CellState:
    """Hidden activation at one timestep; c is present for LSTM only."""
    h: np.ndarray
    c: np.ndarray | None = None


def init_matrix(rng: Rng, rows: int, cols: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform in [-s, s], s = 1/sqrt(fan_in), fan_in = cols."""
    return rng.uniform_signed((rows, cols), 1.0 / np.sqrt(cols), dtype)


def init_cell(kind: str, in_dim: int, units: int, rng: Rng,
              with_bias: bool = True, dtype=DEFAULT_DTYPE):
    """Fresh cell parameters. Biases start at zero except the LSTM forget
    bias, which starts at 1 so early memory defaults to carrying."""
    z = lambda: np.zeros(units, dtype=dtype) if with_bias else None
    if kind == "tanh":
        return TanhParams(init_matrix(rng, units, in_dim, dtype),
                          init_matrix(rng, units, units, dtype), z())
    if kind == "gru":
        return GruParams(
            init_matrix(rng, units, in_dim, dtype), init_matrix(rng, units, in_dim, dtype),
            init_matrix(rng, units, in_dim, dtype), init_matrix(rng, units, units, dtype),
            init_matrix(rng, units, units, dtype), init_matrix(rng, units, units, dtype),
            z(), z(), z())
    if kind == "lstm":
        p = LstmParams(
            init_matrix(rng, units, in_dim, dtype), init_matrix(rng, units, in_dim, dtype),
            init_matrix(rng, units, in_dim, dtype), init_matrix(rng, units, in_dim, dtype),
            init_matrix(rng, units, units, dtype), init_matrix(rng, units, units, dtype),
            init_matrix(rng, units, units, dtype), init_matrix(rng, units, units, dtype),
            z(), z(), z(), z())
        if p.bf is not None:
            p.bf += 1.0
        return p
    raise ConfigError(f"unknown cell kind {kind!r}")


def _pre(w, x, u, h_prev, b):
    # Literal order (W x + U h_prev) + b; stack.py matches it term for term.
    pre = (w @ x) + (u @ h_prev)
    if b is not None:
        pre = add_bias(pre, b)
    return pre


# ---- forward ----

def tanh_forward(p: TanhParams, x: np.ndarray, h_prev: np.ndarray):
    h = np.tanh(_pre(p.w, x, p.u, h_prev, p.b))
    cache = {"x": x, "h_prev": h_prev, "h": h}
    return h, cache


def gru_forward(p: GruParams, x: np.ndarray, h_prev: np.ndarray):
    z = sigmoid(_pre(p.wz, x, p.uz, h_prev, p.bz))
    r = sigmoid(_pre(p.wr, x, p.ur, h_prev, p.br))
    rec = p.u @ h_prev
    pre = (p.w @ x) + r * rec
    if p.b is not None:
        pre = add_bias(pre, p.b)
    hc = np.tanh(pre)
    h = (1.0 - z) * h_prev + z * hc
    cache = {"x": x, "h_prev": h_prev, "z": z, "r": r, "rec": rec, "hc": hc, "h": h}
    return h, cache


def lstm_forward(p: LstmParams, x: np.ndarray, state: CellState):
    h_prev, c_prev = state.h, state.c
    i = sigmoid(_pre(p.wi, x, p.ui, h_prev, p.bi))
    f = sigmoid(_pre(p.wf, x, p.uf, h_prev, p.bf))
    o = sigmoid(_pre(p.wo, x, p.uo, h_prev, p.bo))
    cc = np.tanh(_pre(p.wc, x, p.uc, h_prev, p.bc))
    c = f * c_prev + i * cc
    tc = np.tanh(c)
    h = o * tc
    cache = {"x": x, "h_prev": h_prev, "c_prev": c_prev,
             "i": i, "f": f, "o": o, "cc": cc, "c": c, "tc": tc, "h": h}
    return CellState(h, c), cache


# ---- spec-shaped steps (outputs only) ----

def tanh_step(p: TanhParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    return tanh_forward(p, x, h_prev)[0]


def gru_step(p: GruParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    return gru_forward(p, x, h_prev)[0]


def lstm_step(p: LstmParams, x: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = lstm_forward(p, x, CellState(h_prev, c_prev))[0]
    return out.h, out.c


# ---- backward ----

def _sum_cols(g):
    return g if g.ndim == 1 else g.sum(axis=1)


def tanh_backward(p: TanhParams, cache: dict, dh: np.ndarray):
    """Returns (grads dict, dx, dh_prev)."""
    x, h_prev, h = cache["x"], cache["h_prev"], cache["h"]
    dpre = dh * (1.0 - h * h)
    grads = {
        "w": dpre @ x.T if x.ndim == 2 else np.outer(dpre, x),
        "u": dpre @ h_prev.T if h_prev.ndim == 2 else np.outer(dpre, h_prev),
    }
    if p.b is not None:
        grads["b"] = _sum_cols(dpre)
    return grads, p.w.T @ dpre, p.u.T @ dpre


def gru_backward(p: GruParams, cache: dict, dh: np.ndarray):
    """Returns (grads dict, dx, dh_prev)."""
    x, h_prev = cache["x"], cache["h_prev"]
    z, r, rec, hc = cache["z"], cache["r"], cache["rec"], cache["hc"]
    outer = (lambda a, v: a @ v.T) if x.ndim == 2 else np.outer

    dz = dh * (hc - h_prev)
    dhc = dh * z
    dh_prev = dh * (1.0 - z)

    dpre = dhc * (1.0 - hc * hc)
    dr = dpre * rec
    drec = dpre * r
    dpre_z = dz * z * (1.0 - z)
    dpre_r = dr * r * (1.0 - r)

    grads = {
        "w": outer(dpre, x), "wz": outer(dpre_z, x), "wr": outer(dpre_r, x),
        "u": outer(drec, h_prev), "uz": outer(dpre_z, h_prev), "ur": outer(dpre_r, h_prev),
    }
    if p.b is not None:
        grads["b"] = _sum_cols(dpre)
        grads["bz"] = _sum_cols(dpre_z)
        grads["br"] = _sum_cols(dpre_r)
    dx = p.w.T @ dpre + p.wz.T @ dpre_z + p.wr.T @ dpre_r
    dh_prev = dh_prev + p.u.T @ drec + p.uz.T @ dpre_z + p.ur.T @ dpre_r
    return grads, dx, dh_prev


def lstm_backward(p: LstmParams, cache: dict, dh: np.ndarray, dc: np.ndarray | None = None):
    """Returns (grads dict, dx, dh_prev, dc_prev). dc is the gradient arriving
    at this step's c from outside (None means zero)."""
    x, h_prev, c_prev = cache["x"], cache["h_prev"], cache["c_prev"]
    i, f, o, cc, tc = cache["i"], cache["f"], cache["o"], cache["cc"], cache["tc"]
    outer = (lambda a, v: a @ v.T) if x.ndim == 2 else np.outer

    dc_total = dh * o * (1.0 - tc * tc)
    if dc is not None:
        dc_total = dc_total + dc
    do = dh * tc
    dcc = dc_total * i
    di = dc_total * cc
    df = dc_total * c_prev
    dc_prev = dc_total * f

    dpre_i = di * i * (1.0 - i)
    dpre_f = df * f * (1.0 - f)
    dpre_o = do * o * (1.0 - o)
    dpre_c = dcc * (1.0 - cc * cc)

    grads = {
        "wc": outer(dpre_c, x), "wi": outer(dpre_i, x),
        "wf": outer(dpre_f, x), "wo": outer(dpre_o, x),
        "uc": outer(dpre_c, h_prev), "ui": outer(dpre_i, h_prev),
        "uf": outer(dpre_f, h_prev), "uo": outer(dpre_o, h_prev),
    }
    if p.bc is not None:
        grads["bc"] = _sum_cols(dpre_c)
        grads["bi"] = _sum_cols(dpre_i)
        grads["bf"] = _sum_cols(dpre_f)
        grads["bo"] = _sum_cols(dpre_o)
    dx = p.wc.T @ dpre_c + p.wi.T @ dpre_i + p.wf.T @ dpre_f + p.wo.T @ dpre_o
    dh_prev = (p.uc.T @ dpre_c + p.ui.T @ dpre_i
               + p.uf.T @ dpre_f + p.uo.T @ dpre_o)
    return grads, dx, dh_prev, dc_prev


def cell_backward(kind: str, p, cache: dict, upstream):
    """Dispatch on kind. upstream is dh for tanh/GRU, (dh, dc) for LSTM."""
    if kind == "tanh":
        return tanh_backward(p, cache, upstream)
    if kind == "gru":
        return gru_backward(p, cache, upstream)
    if kind == "lstm":
        dh, dc = upstream if isinstance(upstream, tuple) else (upstream, None)
        return lstm_backward(p, cache, dh, dc)
    raise ConfigError(f"unknown cell kind {kind!r}")
