"""Versioned binary checkpoints with bit-exact round trips.

Layout: magic, format version (u32), header length (u64), canonical JSON
header, then each array's raw little-endian bytes in manifest order. The
manifest in the header is authoritative for names, shapes, and dtypes, so
a load can rebuild every array without guessing.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import CheckpointError
from .numerics import Rng
from .stack import Model, ModelConfig, ParamSet
from .training import BatchPlan, ExplosionGuard, OptimizerConfig, OptimizerState

MAGIC = b"GFRN"
FORMAT_VERSION = 1


def _le(dtype: np.dtype) -> np.dtype:
    """The little-endian variant of dtype."""
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def _manifest_entry(name: str, arr: np.ndarray):
    return [name, list(arr.shape), _le(arr.dtype).str]


def _array_streams(params: ParamSet, opt_state: OptimizerState | None):
    """Yield (name, array) for everything a checkpoint stores, in order:
    parameters first, then optimizer slots grouped slot-major."""
    for name, arr in params.items():
        yield name, arr
    if opt_state is not None:
        for slot in opt_state.slot_names():
            for name, _ in params.items():
                yield f"opt.{slot}.{name}", opt_state.slots[name][slot]


def save_checkpoint(path: str, *, task: str, models: dict, params: ParamSet,
                    opt_cfg: OptimizerConfig | None = None,
                    opt_state: OptimizerState | None = None,
                    counters: dict | None = None,
                    guard: ExplosionGuard | None = None,
                    batch_plan: BatchPlan | None = None,
                    rng: Rng | None = None,
                    vocab_dict: dict | None = None,
                    run_config: dict | None = None) -> str:
    """Write one checkpoint; returns the file's sha256 hex digest.

    models maps role -> ModelConfig ("model" for a single net, "encoder" and
    "decoder" for a pair). params holds every stored parameter (for a pair,
    the merged set with enc./dec. prefixes).
    """
    header = {
        "format": "gfrnn checkpoint",
        "version": FORMAT_VERSION,
        "task": task,
        "models": {role: cfg.to_dict() for role, cfg in models.items()},
        "manifest": [_manifest_entry(n, a) for n, a in _array_streams(params, opt_state)],
        "optimizer": None,
        "counters": dict(counters or {}),
        "guard": guard.to_dict() if guard is not None else None,
        "batch_plan": batch_plan.to_dict() if batch_plan is not None else None,
        "rng": rng.state() if rng is not None else None,
        "vocab": vocab_dict,
        "run_config": dict(run_config or {}),
    }
    if opt_state is not None:
        if opt_cfg is None:
            raise CheckpointError("optimizer state given without its config")
        header["optimizer"] = {"config": opt_cfg.to_dict(), "t": opt_state.t}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = path + ".tmp"
    digest = hashlib.sha256()
    with open(tmp, "wb") as f:
        def put(b: bytes):
            f.write(b)
            digest.update(b)
        put(MAGIC)
        put(np.array([FORMAT_VERSION], dtype="<u4").tobytes())
        put(np.array([len(blob)], dtype="<u8").tobytes())
        put(blob)
        for _, arr in _array_streams(params, opt_state):
            put(np.ascontiguousarray(arr, dtype=_le(arr.dtype)).tobytes())
    os.replace(tmp, path)
    return digest.hexdigest()


class LoadedCheckpoint:
    """Everything save_checkpoint stored, rebuilt into live objects."""

    def __init__(self, header, params, opt_cfg, opt_state, counters, guard,
                 batch_plan, rng, vocab_dict, sha256):
        self.header = header
        self.task = header["task"]
        self.model_configs = {role: ModelConfig.from_dict(d)
                              for role, d in header["models"].items()}
        self.params = params
        self.opt_cfg = opt_cfg
        self.opt_state = opt_state
        self.counters = counters
        self.guard = guard
        self.batch_plan = batch_plan
        self.rng = rng
        self.vocab_dict = vocab_dict
        self.sha256 = sha256
        self.run_config = header.get("run_config", {})

    def build_model(self, role: str = "model") -> Model:
        """Model for one role, fed by this checkpoint's arrays (shared, not
        copied, so optimizer updates keep pointing at the same storage)."""
        if role not in self.model_configs:
            raise CheckpointError(f"checkpoint has no {role!r} model "
                                  f"(roles: {sorted(self.model_configs)})")
        cfg = self.model_configs[role]
        prefix = "" if role == "model" else f"{'enc' if role == 'encoder' else 'dec'}."
        sub = ParamSet()
        for name, arr in self.params.items():
            if prefix == "":
                if not name.startswith(("enc.", "dec.")):
                    sub.add(name, arr)
            elif name.startswith(prefix):
                sub.add(name[len(prefix):], arr)
        model = Model(cfg, sub, dtype=self._dtype())
        return model

    def _dtype(self):
        return np.dtype(self.header["manifest"][0][2])


def load_checkpoint(path: str) -> LoadedCheckpoint:
    try:
        raw = open(path, "rb").read()
    except OSError as e:
        raise CheckpointError(f"checkpoint {path}: {e}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"checkpoint {path}: bad magic bytes")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path}: format version {version}, "
                              f"expected {FORMAT_VERSION}")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint {path}: corrupt header ({e})") from None

    pos = 16 + hlen
    arrays = {}
    for name, shape, dtype_str in header["manifest"]:
        dt = np.dtype(dtype_str)
        nbytes = dt.itemsize * int(np.prod(shape)) if shape else dt.itemsize
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"checkpoint {path}: truncated at array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"checkpoint {path}: {len(raw) - pos} trailing bytes")

    params = ParamSet()
    slot_arrays: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        if name.startswith("opt."):
            _, slot, pname = name.split(".", 2)
            slot_arrays.setdefault(pname, {})[slot] = arr
        else:
            params.add(name, arr)

    opt_cfg = opt_state = None
    if header.get("optimizer") is not None:
        opt_cfg = OptimizerConfig.from_dict(header["optimizer"]["config"])
        opt_state = OptimizerState(opt_cfg.kind, header["optimizer"]["t"], slot_arrays)
        want = set(opt_state.slot_names())
        for pname in params.names():
            if set(slot_arrays.get(pname, {})) != want:
                raise CheckpointError(
                    f"checkpoint {path}: optimizer slots for {pname!r} "
                    f"incomplete (want {sorted(want)})")
    elif slot_arrays:
        raise CheckpointError(f"checkpoint {path}: optimizer arrays present "
                              f"but no optimizer recorded")

    guard = None
    if header.get("guard") is not None:
        guard = ExplosionGuard.from_dict(header["guard"])
    plan = None
    if header.get("batch_plan") is not None:
        plan = BatchPlan.from_dict(header["batch_plan"])
    rng = None
    if header.get("rng") is not None:
        rng = Rng.from_state(header["rng"])
    return LoadedCheckpoint(header, params, opt_cfg, opt_state,
                            dict(header.get("counters", {})), guard, plan, rng,
                            header.get("vocab"), hashlib.sha256(raw).hexdigest())


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
