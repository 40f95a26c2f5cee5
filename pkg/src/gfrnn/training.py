"""Optimizers, gradient-explosion handling, and stateful minibatch training.

Two update rules cover both tasks. RMSProp with momentum:

    acc  <- rho * acc + (1 - rho) * g^2
    step <- mu * step - lr * g / sqrt(acc + eps)
    p    <- p + step

and bias-corrected Adam:

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

When the gradient norm explodes (exceeds a threshold or is non-finite) the
learning rate is halved and that update is skipped entirely; there is no
clipped apply. The threshold adapts: max(floor, rel_factor * EMA of applied
norms), both knobs configurable.

Character streams train on carried state: the corpus is cut into n_streams
contiguous tracks, update k feeds every stream its next subseq_len symbols,
and hidden state threads across updates until a scheduled reset.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .stack import Model, ParamSet, sequence_backward, sequence_forward


@dataclass
class OptimizerConfig:
    kind: str = "rmsprop_momentum"
    learning_rate: float = 0.001
    momentum: float = 0.9
    beta1: float = 0.99
    beta2: float = 0.99
    rms_decay: float = 0.95
    epsilon: float = 1e-8

    def validate(self) -> "OptimizerConfig":
        if self.kind not in ("rmsprop_momentum", "adam"):
            raise ConfigError(f"optimizer kind: unknown value {self.kind!r}")
        if not (self.learning_rate > 0):
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        for name in ("momentum", "beta1", "beta2", "rms_decay"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name}: must be in [0, 1), got {v}")
        if not (self.epsilon > 0):
            raise ConfigError(f"epsilon: must be > 0, got {self.epsilon}")
        return self

    def to_dict(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate,
                "momentum": self.momentum, "beta1": self.beta1, "beta2": self.beta2,
                "rms_decay": self.rms_decay, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d).validate()


_SLOT_NAMES = {"rmsprop_momentum": ("acc", "mom"), "adam": ("m", "v")}


@dataclass
class OptimizerState:
    kind: str
    t: int
    slots: dict  # param name -> {slot name -> array}

    def slot_names(self) -> tuple:
        return _SLOT_NAMES[self.kind]


def init_optimizer_state(cfg: OptimizerConfig, params: ParamSet) -> OptimizerState:
    cfg.validate()
    slots = {}
    for name, arr in params.items():
        slots[name] = {s: np.zeros_like(arr) for s in _SLOT_NAMES[cfg.kind]}
    return OptimizerState(cfg.kind, 0, slots)


def rmsprop_momentum_update(state: OptimizerState, params: ParamSet, grads: ParamSet,
                            cfg: OptimizerConfig, lr: float | None = None):
    if state.kind != "rmsprop_momentum":
        raise ConfigError(f"optimizer state is {state.kind!r}, not rmsprop_momentum")
    lr = cfg.learning_rate if lr is None else lr
    rho, mu, eps = cfg.rms_decay, cfg.momentum, cfg.epsilon
    for name, p in params.items():
        g = grads[name]
        sl = state.slots[name]
        sl["acc"] *= rho
        sl["acc"] += (1.0 - rho) * g * g
        sl["mom"] *= mu
        sl["mom"] -= lr * g / np.sqrt(sl["acc"] + eps)
        p += sl["mom"]
    state.t += 1


def adam_update(state: OptimizerState, params: ParamSet, grads: ParamSet,
                cfg: OptimizerConfig, lr: float | None = None):
    if state.kind != "adam":
        raise ConfigError(f"optimizer state is {state.kind!r}, not adam")
    lr = cfg.learning_rate if lr is None else lr
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.epsilon
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        sl = state.slots[name]
        sl["m"] *= b1
        sl["m"] += (1.0 - b1) * g
        sl["v"] *= b2
        sl["v"] += (1.0 - b2) * g * g
        p -= lr * (sl["m"] / c1) / (np.sqrt(sl["v"] / c2) + eps)


def apply_update(state: OptimizerState, params: ParamSet, grads: ParamSet,
                 cfg: OptimizerConfig, lr: float | None = None):
    if cfg.kind == "adam":
        adam_update(state, params, grads, cfg, lr)
    else:
        rmsprop_momentum_update(state, params, grads, cfg, lr)


def explosion_guard(grad_norm: float, lr: float, threshold: float):
    """(new_lr, apply_update): halve and skip on explosion, else unchanged."""
    if not math.isfinite(grad_norm) or grad_norm > threshold:
        return lr / 2.0, False
    return lr, True


@dataclass
class ExplosionGuard:
    """Adaptive threshold: max(floor, rel_factor * EMA of applied grad norms).

    The EMA only sees norms whose updates were applied, so one explosion
    cannot drag the threshold up after itself.
    """
    rel_factor: float = 5.0
    ema_decay: float = 0.99
    floor: float = 1000.0
    ema: float | None = None

    def threshold(self) -> float:
        if self.ema is None:
            return self.floor
        return max(self.floor, self.rel_factor * self.ema)

    def check(self, grad_norm: float, lr: float):
        return explosion_guard(grad_norm, lr, self.threshold())

    def observe(self, grad_norm: float):
        if self.ema is None:
            self.ema = float(grad_norm)
        else:
            self.ema = self.ema_decay * self.ema + (1.0 - self.ema_decay) * float(grad_norm)

    def to_dict(self) -> dict:
        return {"rel_factor": self.rel_factor, "ema_decay": self.ema_decay,
                "floor": self.floor, "ema": self.ema}

    @classmethod
    def from_dict(cls, d: dict) -> "ExplosionGuard":
        return cls(**d)


@dataclass
class BatchPlan:
    n_streams: int = 100
    subseq_len: int = 100
    reset_interval: int = 100

    def validate(self) -> "BatchPlan":
        if self.n_streams < 1:
            raise ConfigError(f"n_streams: must be >= 1, got {self.n_streams}")
        if self.subseq_len < 1:
            raise ConfigError(f"subseq_len: must be >= 1, got {self.subseq_len}")
        if self.reset_interval < 1:
            raise ConfigError(f"reset_interval: must be >= 1, got {self.reset_interval}")
        return self

    def to_dict(self) -> dict:
        return {"n_streams": self.n_streams, "subseq_len": self.subseq_len,
                "reset_interval": self.reset_interval}

    @classmethod
    def from_dict(cls, d: dict) -> "BatchPlan":
        return cls(**d).validate()


class BatchSchedule:
    """Contiguous-track partition of a symbol corpus into parallel streams.

    Stream s owns corpus[s*track_len : (s+1)*track_len]; update k reads the
    k-th subseq_len window of every track. Targets are the next symbol, with
    the symbol after the corpus end wrapping to position 0.
    """

    def __init__(self, corpus_len: int, plan: BatchPlan):
        plan.validate()
        if corpus_len < plan.n_streams * plan.subseq_len:
            raise DataError(
                f"corpus length {corpus_len} < n_streams*subseq_len = "
                f"{plan.n_streams * plan.subseq_len}; shrink the batch plan")
        self.plan = plan
        self.corpus_len = corpus_len
        self.track_len = corpus_len // plan.n_streams
        self.offsets = np.arange(plan.n_streams, dtype=np.int64) * self.track_len
        self.updates_per_epoch = self.track_len // plan.subseq_len

    def batch(self, corpus: np.ndarray, k: int):
        if not (0 <= k < self.updates_per_epoch):
            raise ConfigError(f"update index {k} outside epoch of {self.updates_per_epoch}")
        T, n = self.plan.subseq_len, self.corpus_len
        start = self.offsets + k * T  # (streams,)
        pos = start[None, :] + np.arange(T, dtype=np.int64)[:, None]
        inputs = corpus[pos]
        targets = corpus[(pos + 1) % n]
        return inputs, targets

    def reset_before(self, k: int) -> bool:
        return k % self.plan.reset_interval == 0


def make_batch_plan(corpus_len: int, plan: BatchPlan) -> BatchSchedule:
    return BatchSchedule(corpus_len, plan)


def train_epoch(model: Model, corpus: np.ndarray, schedule: BatchSchedule,
                opt_cfg: OptimizerConfig, opt_state: OptimizerState,
                guard: ExplosionGuard, lr: float, epoch: int,
                update0: int = 0, on_record=None):
    """One pass over the schedule with carried state and the explosion guard.

    Gradients are taken on the mean per-symbol loss. Returns (records, lr);
    records carry {update, epoch, nll, grad_norm, lr, applied, wall_ms} and
    the returned lr reflects any halvings.
    """
    B, T = schedule.plan.n_streams, schedule.plan.subseq_len
    state = None
    records = []
    for k in range(schedule.updates_per_epoch):
        t_start = time.perf_counter()
        if state is None or schedule.reset_before(k):
            state = model.zero_state(B)
        X, Y = schedule.batch(corpus, k)
        res = sequence_forward(model, X, Y, state)
        grads, _, grad_norm = sequence_backward(model, res.cache, loss_scale=1.0 / (B * T))
        state = res.final_state
        mean_nll = float(res.nll.sum()) / (B * T)
        lr, apply = guard.check(grad_norm, lr)
        if apply:
            apply_update(opt_state, model.params, grads, opt_cfg, lr)
            guard.observe(grad_norm)
        rec = {"update": update0 + k, "epoch": epoch, "nll": mean_nll,
               "grad_norm": float(grad_norm), "lr": lr, "applied": apply,
               "wall_ms": (time.perf_counter() - t_start) * 1000.0}
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return records, lr
