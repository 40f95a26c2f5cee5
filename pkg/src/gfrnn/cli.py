"""Command-line surface: train, eval, generate, synth, params.

A JSON config file supplies defaults, flags override it, and built-in
protocol defaults fill whatever remains. Every run writes a config snapshot
next to its outputs; reports carry the sha256 of the checkpoint they used.
Exit code 0 means no fatal error; fatal errors name the offending field or
path on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import progeval
from .charlm import Vocabulary, build_vocab, evaluate_bpc, generate_text, split_corpus
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DataError, GenerationError, GfrnnError
from .numerics import Rng
from .progeval import (EncoderDecoder, build_heatmap, encode_batch, merged_grads,
                       read_dataset, sample_dataset, seq2seq_backward,
                       seq2seq_forward, teacher_forced_accuracy,
                       write_dataset, write_heatmap_csv)
from .stack import Model, ModelConfig, count_parameter_blocks, count_parameters
from .training import (BatchPlan, BatchSchedule, ExplosionGuard, OptimizerConfig,
                       apply_update, init_optimizer_state, train_epoch)

# training protocol defaults; tests assert these stay pinned
CHARLM_PROTOCOL = {
    "optimizer": "rmsprop_momentum",
    "learning_rate": 0.001,
    "tanh_learning_rate": 5e-5,
    "momentum": 0.9,
    "n_streams": 100,
    "subseq_len": 100,
    "reset_interval": 100,
    "epochs": 100,
    "patience": 5,
    "max_vocab": 205,
}
PROGEVAL_PROTOCOL = {
    "optimizer": "adam",
    "learning_rate": 0.001,
    "beta1": 0.99,
    "beta2": 0.99,
    "minibatch": 128,
    "truncation": 50,
    "epochs": 30,
    "patience": 5,
}
# desk-scale synthesis defaults and the full-scale preset
SYNTH_DEFAULTS = {"count": 50_000, "nesting": (1, 3), "target_length": (1, 5)}
FULL_SCALE = {
    "count": 320_000,
    "nesting": (1, 5),
    "target_length": (1, 10),
    "layers": 3,
    "gru_units": 230,
    "lstm_units": 200,
}
DEFAULT_GENERATE_N = 250


# ---- plumbing ---------------------------------------------------------------

def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise ConfigError(f"--config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"--config {path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"--config {path}: expected a JSON object")
    return cfg


class _Settings:
    """Flag value if given, else config-file value, else default."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.resolved = {}

    def get(self, key, default=None):
        v = getattr(self.args, key, None)
        if v is None:
            v = self.config.get(key, default)
        self.resolved[key] = v
        return v


def _parse_units(spec, layers):
    if isinstance(spec, int):
        return [spec] * layers
    if isinstance(spec, list):
        vals = [int(v) for v in spec]
    else:
        try:
            vals = [int(v) for v in str(spec).split(",") if v != ""]
        except ValueError:
            raise ConfigError(f"--units: expected integers, got {spec!r}") from None
    if len(vals) == 1:
        vals = vals * layers
    if len(vals) != layers:
        raise ConfigError(f"--units: {len(vals)} sizes for {layers} layers")
    return vals


def _parse_range(spec, field):
    """'1,3' or '1-3' or [1,3] -> (1, 3)."""
    if isinstance(spec, (list, tuple)) and len(spec) == 2:
        return int(spec[0]), int(spec[1])
    text = str(spec).replace("-", ",")
    parts = [p for p in text.split(",") if p != ""]
    if len(parts) != 2:
        raise ConfigError(f"{field}: expected 'lo,hi', got {spec!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"{field}: expected integers, got {spec!r}") from None


def _parse_list(spec, field):
    if isinstance(spec, (list, tuple)):
        return [int(v) for v in spec]
    try:
        if "-" in str(spec):
            lo, hi = _parse_range(spec, field)
            return list(range(lo, hi + 1))
        return [int(v) for v in str(spec).split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"{field}: expected integers, got {spec!r}") from None


def _dtype_of(name):
    table = {"float64": np.float64, "float32": np.float32}
    if name not in table:
        raise ConfigError(f"--dtype: unknown value {name!r}")
    return table[name]


def _write_snapshot(path, command, resolved):
    body = {"command": command, "settings": resolved, "argv": sys.argv[1:]}
    with open(path, "w") as f:
        json.dump(body, f, sort_keys=True, indent=1, default=str)
        f.write("\n")


class _RunLogger:
    """JSON-lines records, buffered and flushed once per epoch."""

    def __init__(self, path):
        self.f = open(path, "a")

    def record(self, rec):
        self.f.write(json.dumps(rec, sort_keys=True) + "\n")

    def flush(self):
        self.f.flush()

    def close(self):
        self.f.close()


def _model_config(st, input_vocab, output_vocab, defaults):
    arch = st.get("arch", defaults.get("arch", "gated_feedback"))
    unit = st.get("unit", defaults.get("unit", "lstm"))
    layers = int(st.get("layers", defaults.get("layers", 2)))
    units = _parse_units(st.get("units", defaults.get("units", 64)), layers)
    return ModelConfig(
        arch, unit, layers, units, input_vocab, output_vocab,
        freeze_gates_to_one=bool(st.get("freeze_gates", False)),
        stacked_skip_connections=bool(st.get("skip_connections", False)),
        all_layer_unit_gates=bool(st.get("all_layer_unit_gates", False)),
        strict_no_bias=bool(st.get("strict_no_bias", False)),
    ).validate()


def _optimizer_config(st, protocol, unit):
    kind = st.get("optimizer", protocol["optimizer"])
    lr = st.get("lr")
    if lr is None:
        if unit == "tanh" and "tanh_learning_rate" in protocol:
            lr = protocol["tanh_learning_rate"]
        else:
            lr = protocol["learning_rate"]
    return OptimizerConfig(
        kind=kind,
        learning_rate=float(lr),
        momentum=float(st.get("momentum", protocol.get("momentum", 0.9))),
        beta1=float(st.get("beta1", protocol.get("beta1", 0.99))),
        beta2=float(st.get("beta2", protocol.get("beta2", 0.99))),
        rms_decay=float(st.get("rms_decay", 0.95)),
        epsilon=float(st.get("opt_epsilon", 1e-8)),
    ).validate()


def _require_seed(st):
    seed = st.get("seed")
    if seed is None:
        raise ConfigError("--seed: required (runs never default to wall-clock seeds)")
    return int(seed)


def _read_corpus(path, mode):
    try:
        raw = open(path, "rb").read()
    except OSError as e:
        raise DataError(f"--corpus: {e}") from None
    if mode == "codepoints":
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"--corpus {path}: not valid UTF-8 ({e})") from None
    return raw


# ---- train ------------------------------------------------------------------

def cmd_train(args):
    config = _load_config_file(args.config)
    st = _Settings(args, config)
    task = st.get("task")
    if task not in ("charlm", "progeval"):
        raise ConfigError(f"--task: expected charlm or progeval, got {task!r}")
    out_dir = st.get("out_dir")
    if out_dir is None:
        raise ConfigError("--out-dir: required")
    os.makedirs(out_dir, exist_ok=True)
    if task == "charlm":
        return _train_charlm(st, out_dir)
    return _train_progeval(st, out_dir)


def _early_stop_state(counters):
    best = counters.get("best_metric")
    return (float("inf") if best is None else best,
            counters.get("bad_epochs", 0), counters.get("best_epoch", -1))


def _train_charlm(st, out_dir):
    # resume restores everything trajectory-shaping from the checkpoint;
    # flags still override, at the cost of bit-exactness
    resume = st.get("resume")
    loaded = None
    rc = {}
    if resume is not None:
        loaded = load_checkpoint(resume)
        if loaded.task != "charlm":
            raise ConfigError(f"--resume: checkpoint task is {loaded.task!r}, not charlm")
        rc = loaded.run_config

    def setting(key, fallback):
        prior = rc.get(key)
        return st.get(key, fallback if prior is None else prior)

    dtype = _dtype_of(setting("dtype", "float64"))
    mode = setting("vocab_mode", "bytes")
    corpus_path = setting("corpus", None)
    if corpus_path is None:
        raise ConfigError("--corpus: required for charlm training")
    epochs = int(setting("epochs", CHARLM_PROTOCOL["epochs"]))
    patience = int(setting("patience", CHARLM_PROTOCOL["patience"]))
    if loaded is not None and loaded.batch_plan is not None:
        base_plan = loaded.batch_plan
    else:
        base_plan = BatchPlan(CHARLM_PROTOCOL["n_streams"],
                              CHARLM_PROTOCOL["subseq_len"],
                              CHARLM_PROTOCOL["reset_interval"])
    plan = BatchPlan(int(st.get("streams", base_plan.n_streams)),
                     int(st.get("subseq", base_plan.subseq_len)),
                     int(st.get("reset_interval", base_plan.reset_interval)))

    if loaded is not None:
        vocab = Vocabulary.from_dict(loaded.vocab_dict)
        raw = _read_corpus(corpus_path, vocab.mode)
        indices = vocab.encode(raw)
        model = loaded.build_model()
        opt_cfg, opt_state = loaded.opt_cfg, loaded.opt_state
        guard = loaded.guard or ExplosionGuard()
        lr = loaded.counters["lr"]
        start_epoch = loaded.counters.get("epoch", 0)
        update = loaded.counters.get("update", 0)
        run_rng = loaded.rng or Rng(0)
        best, bad, best_epoch = _early_stop_state(loaded.counters)
        seed = rc.get("seed")
    else:
        seed = _require_seed(st)
        raw = _read_corpus(corpus_path, mode)
        vocab = build_vocab(raw, int(st.get("max_vocab", CHARLM_PROTOCOL["max_vocab"])), mode)
        indices = vocab.encode(raw)
        cfg = _model_config(st, vocab.size, vocab.size, {"unit": "lstm"})
        model = Model.build(cfg, Rng(seed).child("init"), dtype)
        opt_cfg = _optimizer_config(st, CHARLM_PROTOCOL, cfg.unit)
        opt_state = init_optimizer_state(opt_cfg, model.params)
        guard = ExplosionGuard()
        lr = opt_cfg.learning_rate
        start_epoch, update = 0, 0
        run_rng = Rng(seed).child("run")
        best, bad, best_epoch = float("inf"), 0, -1

    train_idx, valid_idx, _ = split_corpus(
        indices, float(setting("train_fraction", 0.90)),
        float(setting("valid_fraction", 0.05)))
    schedule = BatchSchedule(len(train_idx), plan)

    snapshot = dict(st.resolved)
    snapshot["seed"] = seed
    _write_snapshot(os.path.join(out_dir, "config_snapshot.json"), "train", snapshot)
    log = _RunLogger(os.path.join(out_dir, "train_log.jsonl"))
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    def save(path, counters):
        return save_checkpoint(
            path, task="charlm", models={"model": model.cfg}, params=model.params,
            opt_cfg=opt_cfg, opt_state=opt_state, counters=counters, guard=guard,
            batch_plan=plan, rng=run_rng, vocab_dict=vocab.to_dict(),
            run_config=snapshot)

    stopped = ""
    sha_last = None
    for epoch in range(start_epoch, epochs):
        recs, lr = train_epoch(model, train_idx, schedule, opt_cfg, opt_state,
                               guard, lr, epoch, update0=update,
                               on_record=log.record)
        update += len(recs)
        valid_bpc = evaluate_bpc(model, valid_idx)
        improved = valid_bpc < best
        if improved:
            best, bad, best_epoch = valid_bpc, 0, epoch
        else:
            bad += 1
        counters = {"epoch": epoch + 1, "update": update, "lr": lr,
                    "best_metric": best, "bad_epochs": bad, "best_epoch": best_epoch}
        log.record({"event": "validation", "epoch": epoch, "metric": "bpc",
                    "value": valid_bpc, "best": improved})
        log.flush()
        sha_last = save(last_path, counters)
        if improved:
            save(best_path, counters)
        mean_nll = float(np.mean([r["nll"] for r in recs])) if recs else float("nan")
        print(f"epoch {epoch} train nll/char {mean_nll:.4f} valid bpc "
              f"{valid_bpc:.4f} lr {lr:.3g}{' *' if improved else ''}")
        if bad >= patience:
            stopped = f" (early stop after {patience} flat epochs)"
            break
    log.close()
    print(f"best valid bpc {best:.4f} at epoch {best_epoch}{stopped}")
    print(f"checkpoints: best {file_sha256(best_path) if os.path.exists(best_path) else 'none'} "
          f"last {sha_last or 'none'}")
    return 0


def _progeval_valid_metrics(ed, samples, truncation, minibatch):
    total_nll, total_syms = 0.0, 0
    for k in range(0, len(samples), minibatch):
        batch = encode_batch(samples[k:k + minibatch], dtype=ed.encoder.dtype)
        res = seq2seq_forward(ed, batch, truncation, want_cache=False)
        total_nll += float(res.nll.sum())
        total_syms += int(batch["dec_mask"].sum())
    acc = teacher_forced_accuracy(ed, samples, truncation, minibatch)
    return total_nll / total_syms, acc


def _train_progeval(st, out_dir):
    resume = st.get("resume")
    loaded = None
    rc = {}
    if resume is not None:
        loaded = load_checkpoint(resume)
        if loaded.task != "progeval":
            raise ConfigError(f"--resume: checkpoint task is {loaded.task!r}, not progeval")
        rc = loaded.run_config

    def setting(key, fallback):
        prior = rc.get(key)
        return st.get(key, fallback if prior is None else prior)

    dtype = _dtype_of(setting("dtype", "float64"))
    data_path = setting("data", None)
    if data_path is None:
        raise ConfigError("--data: required for progeval training")
    val_path = setting("val_data", None)
    epochs = int(setting("epochs", PROGEVAL_PROTOCOL["epochs"]))
    patience = int(setting("patience", PROGEVAL_PROTOCOL["patience"]))
    minibatch = int(setting("minibatch", PROGEVAL_PROTOCOL["minibatch"]))
    truncation = int(setting("truncation", PROGEVAL_PROTOCOL["truncation"]))

    train_samples = read_dataset(data_path)
    if val_path is not None:
        valid_samples = read_dataset(val_path)
    else:
        n_val = max(1, len(train_samples) // 20)
        valid_samples = train_samples[-n_val:]
        train_samples = train_samples[:-n_val]
    if not train_samples or not valid_samples:
        raise DataError(f"--data {data_path}: not enough samples to train and validate")

    if loaded is not None:
        ed = EncoderDecoder(loaded.build_model("encoder"), loaded.build_model("decoder"))
        opt_cfg, opt_state = loaded.opt_cfg, loaded.opt_state
        guard = loaded.guard or ExplosionGuard()
        lr = loaded.counters["lr"]
        start_epoch = loaded.counters.get("epoch", 0)
        update = loaded.counters.get("update", 0)
        run_rng = loaded.rng or Rng(0)
        best, bad, best_epoch = _early_stop_state(loaded.counters)
        seed = rc.get("seed")
    else:
        seed = _require_seed(st)
        unit = st.get("unit", "gru")
        full = bool(st.get("full_scale", False))
        defaults = {"unit": "gru", "layers": 2, "units": 64}
        if full:
            defaults = {"unit": unit, "layers": FULL_SCALE["layers"],
                        "units": FULL_SCALE["gru_units"] if unit != "lstm"
                        else FULL_SCALE["lstm_units"]}
        arch = st.get("arch", "gated_feedback")
        layers = int(st.get("layers", defaults["layers"]))
        units = _parse_units(st.get("units", defaults["units"]), layers)
        ed = EncoderDecoder.build(
            arch, unit, layers, units, Rng(seed).child("init"), dtype,
            freeze_gates_to_one=bool(st.get("freeze_gates", False)),
            stacked_skip_connections=bool(st.get("skip_connections", False)),
            all_layer_unit_gates=bool(st.get("all_layer_unit_gates", False)),
            strict_no_bias=bool(st.get("strict_no_bias", False)))
        opt_cfg = _optimizer_config(st, PROGEVAL_PROTOCOL, unit)
        opt_state = init_optimizer_state(opt_cfg, ed.params_merged())
        guard = ExplosionGuard()
        lr = opt_cfg.learning_rate
        start_epoch, update = 0, 0
        run_rng = Rng(seed).child("run")
        best, bad, best_epoch = float("inf"), 0, -1

    merged = ed.params_merged()
    snapshot = dict(st.resolved)
    snapshot["seed"] = seed
    _write_snapshot(os.path.join(out_dir, "config_snapshot.json"), "train", snapshot)
    log = _RunLogger(os.path.join(out_dir, "train_log.jsonl"))
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    def save(path, counters):
        return save_checkpoint(
            path, task="progeval",
            models={"encoder": ed.encoder.cfg, "decoder": ed.decoder.cfg},
            params=merged, opt_cfg=opt_cfg, opt_state=opt_state,
            counters=counters, guard=guard, rng=run_rng, run_config=snapshot)

    n = len(train_samples)
    stopped = ""
    sha_last = None
    for epoch in range(start_epoch, epochs):
        perm = run_rng.permutation(n)
        epoch_nll, epoch_syms = 0.0, 0
        for k0 in range(0, n, minibatch):
            t_start = time.perf_counter()
            batch_samples = [train_samples[i] for i in perm[k0:k0 + minibatch]]
            batch = encode_batch(batch_samples, dtype=ed.encoder.dtype)
            res = seq2seq_forward(ed, batch, truncation)
            n_syms = int(batch["dec_mask"].sum())
            enc_g, dec_g, grad_norm = seq2seq_backward(ed, res.cache,
                                                       loss_scale=1.0 / n_syms)
            grads = merged_grads(enc_g, dec_g)
            lr, apply = guard.check(grad_norm, lr)
            if apply:
                apply_update(opt_state, merged, grads, opt_cfg, lr)
                guard.observe(grad_norm)
            nll = float(res.nll.sum()) / n_syms
            epoch_nll += float(res.nll.sum())
            epoch_syms += n_syms
            log.record({"update": update, "epoch": epoch, "nll": nll,
                        "grad_norm": float(grad_norm), "lr": lr, "applied": apply,
                        "wall_ms": (time.perf_counter() - t_start) * 1000.0})
            update += 1
        valid_nll, valid_acc = _progeval_valid_metrics(ed, valid_samples,
                                                       truncation, minibatch)
        improved = valid_nll < best
        if improved:
            best, bad, best_epoch = valid_nll, 0, epoch
        else:
            bad += 1
        counters = {"epoch": epoch + 1, "update": update, "lr": lr,
                    "best_metric": best, "bad_epochs": bad, "best_epoch": best_epoch}
        log.record({"event": "validation", "epoch": epoch, "metric": "nll_per_symbol",
                    "value": valid_nll, "accuracy": valid_acc, "best": improved})
        log.flush()
        sha_last = save(last_path, counters)
        if improved:
            save(best_path, counters)
        print(f"epoch {epoch} train nll/sym {epoch_nll / epoch_syms:.4f} valid "
              f"nll/sym {valid_nll:.4f} acc {valid_acc:.4f} lr {lr:.3g}"
              f"{' *' if improved else ''}")
        if bad >= patience:
            stopped = f" (early stop after {patience} flat epochs)"
            break
    log.close()
    print(f"best valid nll/sym {best:.4f} at epoch {best_epoch}{stopped}")
    print(f"checkpoints: best {file_sha256(best_path) if os.path.exists(best_path) else 'none'} "
          f"last {sha_last or 'none'}")
    return 0


# ---- eval -------------------------------------------------------------------

def _load_pair(loaded):
    return EncoderDecoder(loaded.build_model("encoder"), loaded.build_model("decoder"))


def cmd_eval(args):
    config = _load_config_file(args.config)
    st = _Settings(args, config)
    ckpt_path = st.get("checkpoint")
    if ckpt_path is None:
        raise ConfigError("--checkpoint: required")
    loaded = load_checkpoint(ckpt_path)
    task = st.get("task", loaded.task)
    if task != loaded.task:
        raise ConfigError(f"--task: checkpoint {ckpt_path} was trained for "
                          f"{loaded.task!r}, not {task!r}")
    data_path = st.get("data")
    if data_path is None:
        raise ConfigError("--data: required")
    out = st.get("out", os.path.splitext(ckpt_path)[0] + ".eval.json")

    report = {"task": task, "checkpoint": ckpt_path,
              "checkpoint_sha256": loaded.sha256, "data": data_path}
    if task == "charlm":
        if loaded.vocab_dict is None:
            raise CheckpointError(f"--checkpoint {ckpt_path}: no vocabulary stored")
        vocab = Vocabulary.from_dict(loaded.vocab_dict)
        sidecar = st.get("vocab")
        if sidecar is not None:
            other = Vocabulary.load(sidecar)
            if other.to_dict() != vocab.to_dict():
                raise DataError(
                    f"vocabulary mismatch: checkpoint has {vocab.size} symbols "
                    f"({vocab.mode}), --vocab {sidecar} has {other.size} "
                    f"({other.mode})")
        model = loaded.build_model()
        if model.cfg.input_vocab != vocab.size:
            raise CheckpointError(
                f"--checkpoint {ckpt_path}: model vocab {model.cfg.input_vocab} "
                f"!= stored vocabulary size {vocab.size}")
        raw = _read_corpus(data_path, vocab.mode)
        seq = vocab.encode(raw)
        bpc = evaluate_bpc(model, seq)
        unk = float(np.mean(seq == vocab.unknown_index)) if len(seq) else 0.0
        report.update({"metric": "bpc", "value": bpc, "n_symbols": int(len(seq)),
                       "unknown_fraction": unk})
        print(f"bpc {bpc:.6f} over {len(seq)} symbols "
              f"(checkpoint {loaded.sha256[:12]})")
    else:
        ed = _load_pair(loaded)
        samples = read_dataset(data_path)
        truncation = int(st.get("truncation", PROGEVAL_PROTOCOL["truncation"]))
        minibatch = int(st.get("minibatch", PROGEVAL_PROTOCOL["minibatch"]))
        nll, acc = _progeval_valid_metrics(ed, samples, truncation, minibatch)
        report.update({"metric": "teacher_forced_accuracy", "value": acc,
                       "nll_per_symbol": nll, "n_samples": len(samples)})
        print(f"teacher-forced accuracy {acc:.4f} nll/sym {nll:.4f} over "
              f"{len(samples)} samples (checkpoint {loaded.sha256[:12]})")
        heatmap_dir = st.get("heatmap_dir")
        if heatmap_dir is not None:
            report["heatmap"] = _eval_heatmap(st, ed, loaded, heatmap_dir, truncation)

    _write_snapshot(out + ".config.json", "eval", dict(st.resolved))
    with open(out, "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
        f.write("\n")
    print(f"report: {out}")
    return 0


def _eval_heatmap(st, ed, loaded, heatmap_dir, truncation):
    os.makedirs(heatmap_dir, exist_ok=True)
    seed = _require_seed(st)
    nestings = _parse_list(st.get("nestings", "1-3"), "--nestings")
    lengths = _parse_list(st.get("lengths", "1-5"), "--lengths")
    per_cell = int(st.get("samples_per_cell", 200))
    train_scripts = set()
    train_data = st.get("train_data")
    if train_data is not None:
        train_scripts = {s.script for s in read_dataset(train_data)}
    compare = st.get("compare")
    ed_b, sha_b = ed, loaded.sha256
    if compare is not None:
        other = load_checkpoint(compare)
        if other.task != "progeval":
            raise ConfigError(f"--compare: checkpoint task is {other.task!r}")
        ed_b, sha_b = _load_pair(other), other.sha256
    grid = build_heatmap(ed, ed_b, nestings, lengths, per_cell,
                         Rng(seed).child("heatmap"), train_scripts, truncation)
    files = {}
    path_a = os.path.join(heatmap_dir, f"heatmap_{loaded.sha256[:12]}.csv")
    write_heatmap_csv(path_a, nestings, lengths, grid.acc_a)
    files["model"] = path_a
    if compare is not None:
        path_b = os.path.join(heatmap_dir, f"heatmap_{sha_b[:12]}.csv")
        write_heatmap_csv(path_b, nestings, lengths, grid.acc_b)
        path_d = os.path.join(heatmap_dir, "heatmap_diff.csv")
        write_heatmap_csv(path_d, nestings, lengths, grid.diff)
        files.update({"compare": path_b, "diff": path_d})
    print(f"heatmap: {', '.join(files.values())}")
    return files


# ---- generate ---------------------------------------------------------------

def cmd_generate(args):
    config = _load_config_file(args.config)
    st = _Settings(args, config)
    ckpt_path = st.get("checkpoint")
    if ckpt_path is None:
        raise ConfigError("--checkpoint: required")
    loaded = load_checkpoint(ckpt_path)
    if loaded.task != "charlm":
        raise ConfigError(f"--checkpoint {ckpt_path}: generation needs a charlm "
                          f"checkpoint, this one is {loaded.task!r}")
    if loaded.vocab_dict is None:
        raise CheckpointError(f"--checkpoint {ckpt_path}: no vocabulary stored")
    vocab = Vocabulary.from_dict(loaded.vocab_dict)
    model = loaded.build_model()
    seed_text = st.get("seed_text")
    if seed_text is None:
        raise ConfigError("--seed-text: required")
    n = int(st.get("n", DEFAULT_GENERATE_N))
    if n < 0:
        raise ConfigError(f"--n: must be >= 0, got {n}")
    temperature = float(st.get("temperature", 1.0))
    seed = _require_seed(st)
    try:
        vocab.encode(seed_text, strict=True)
    except DataError as e:
        raise DataError(f"--seed-text: {e}") from None
    text = generate_text(model, vocab, seed_text, n, Rng(seed).child("generate"),
                         temperature)
    rendered = text.decode("utf-8", errors="replace") if isinstance(text, bytes) else text
    out = st.get("out")
    if out is not None:
        mode_flags = "wb" if isinstance(text, bytes) else "w"
        with open(out, mode_flags) as f:
            f.write(text)
        _write_snapshot(out + ".config.json", "generate", dict(st.resolved))
        print(f"wrote {n} symbols to {out} (checkpoint {loaded.sha256[:12]})")
    else:
        sys.stdout.write(rendered + ("\n" if not rendered.endswith("\n") else ""))
    return 0


# ---- synth ------------------------------------------------------------------

def cmd_synth(args):
    config = _load_config_file(args.config)
    st = _Settings(args, config)
    out_dir = st.get("out_dir")
    if out_dir is None:
        raise ConfigError("--out-dir: required")
    os.makedirs(out_dir, exist_ok=True)
    seed = _require_seed(st)
    full = bool(st.get("full_scale", False))
    base = FULL_SCALE if full else SYNTH_DEFAULTS
    count = int(st.get("count", base["count"]))
    nesting = _parse_range(st.get("nesting", ",".join(map(str, base["nesting"]))),
                           "--nesting")
    length = _parse_range(st.get("length", ",".join(map(str, base["target_length"]))),
                          "--length")
    n_valid = int(st.get("valid_count", max(1, count // 20)))
    n_test = int(st.get("test_count", max(1, count // 20)))

    rng = Rng(seed)
    train = sample_dataset(count, nesting, length, rng.child("train"))
    train_scripts = {s.script for s in train}
    valid = sample_dataset(n_valid, nesting, length, rng.child("valid"),
                           reject_scripts=train_scripts)
    block = train_scripts | {s.script for s in valid}
    test = sample_dataset(n_test, nesting, length, rng.child("test"),
                          reject_scripts=block)

    checked = 0
    for split in (train, valid, test):
        for s in split:
            if progeval.interpret(s.script) != s.target:
                raise GenerationError(f"oracle sweep: interpreter disagrees on "
                                      f"{s.script!r}")
            if progeval.script_nesting(s.script) != s.nesting:
                raise GenerationError(f"oracle sweep: nesting label wrong on "
                                      f"{s.script!r}")
            if len(s.target.lstrip("-")) != s.target_length:
                raise GenerationError(f"oracle sweep: length label wrong on "
                                      f"{s.script!r}")
            checked += 1
    print(f"oracle sweep: {checked}/{checked} ok")

    paths = {}
    for name, split in (("train", train), ("valid", valid), ("test", test)):
        p = os.path.join(out_dir, f"{name}.tsv")
        write_dataset(p, split)
        paths[name] = {"path": p, "count": len(split), "sha256": file_sha256(p)}
        print(f"{name}: {len(split)} samples -> {p} ({paths[name]['sha256'][:12]})")
    _write_snapshot(os.path.join(out_dir, "config_snapshot.json"), "synth",
                    dict(st.resolved))
    meta = {"seed": seed, "nesting": list(nesting), "target_length": list(length),
            "files": paths}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")
    return 0


# ---- params -----------------------------------------------------------------

def cmd_params(args):
    config = _load_config_file(args.config)
    st = _Settings(args, config)
    if bool(st.get("pair", False)):
        left = _model_config(st, progeval.INPUT_VOCAB_SIZE, 0, {"unit": "gru"})
        right_st = _Settings(args, config)
        right = _model_config(right_st, progeval.OUTPUT_VOCAB_SIZE,
                              progeval.OUTPUT_VOCAB_SIZE, {"unit": "gru"})
        total = 0
        for tag, cfg in (("encoder", left), ("decoder", right)):
            sub = count_parameters(cfg)
            total += sub
            print(f"{tag}: {sub}")
        print(f"total: {total}")
        return 0
    vocab = int(st.get("vocab", 205))
    out_vocab = int(st.get("output_vocab", vocab))
    cfg = _model_config(st, vocab, out_vocab, {"unit": "lstm"})
    blocks = count_parameter_blocks(cfg)
    total = count_parameters(cfg)
    width = max(len(n) for n in blocks)
    for name, size in blocks.items():
        print(f"{name:<{width}}  {size}")
    if sum(blocks.values()) != total:
        raise GfrnnError("block breakdown does not sum to the total")
    print(f"total: {total}")
    return 0


# ---- parser -----------------------------------------------------------------

def _add_common_model_flags(p):
    p.add_argument("--arch", choices=["single", "stacked", "gated_feedback"])
    p.add_argument("--unit", choices=["tanh", "gru", "lstm"])
    p.add_argument("--layers", type=int)
    p.add_argument("--units", help="per-layer sizes, e.g. 64 or 64,48")
    p.add_argument("--strict-no-bias", dest="strict_no_bias",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--skip-connections", dest="skip_connections",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--all-layer-unit-gates", dest="all_layer_unit_gates",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--freeze-gates", dest="freeze_gates",
                   action=argparse.BooleanOptionalAction, default=None)


def build_parser():
    root = argparse.ArgumentParser(
        prog="gfrnn",
        description="Recurrent sequence models with per-layer-pair global gates")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes checkpoints and logs")
    p.add_argument("--config", help="JSON file of defaults; flags override")
    p.add_argument("--task", choices=["charlm", "progeval"])
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--dtype", choices=["float64", "float32"])
    _add_common_model_flags(p)
    p.add_argument("--optimizer", choices=["rmsprop_momentum", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--rms-decay", dest="rms_decay", type=float)
    p.add_argument("--opt-epsilon", dest="opt_epsilon", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--corpus", help="charlm corpus file")
    p.add_argument("--vocab-mode", dest="vocab_mode", choices=["bytes", "codepoints"])
    p.add_argument("--max-vocab", dest="max_vocab", type=int)
    p.add_argument("--streams", type=int)
    p.add_argument("--subseq", type=int)
    p.add_argument("--reset-interval", dest="reset_interval", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--valid-fraction", dest="valid_fraction", type=float)
    p.add_argument("--data", help="progeval training dataset")
    p.add_argument("--val-data", dest="val_data", help="progeval validation dataset")
    p.add_argument("--minibatch", type=int)
    p.add_argument("--truncation", type=int)
    p.add_argument("--full-scale", dest="full_scale",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="full-size preset: 3 layers, 230 (gru) or 200 (lstm) units")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data file")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--task", choices=["charlm", "progeval"])
    p.add_argument("--out")
    p.add_argument("--vocab", help="vocabulary sidecar to cross-check (charlm)")
    p.add_argument("--minibatch", type=int)
    p.add_argument("--truncation", type=int)
    p.add_argument("--heatmap-dir", dest="heatmap_dir")
    p.add_argument("--nestings", help="heatmap nesting cells, e.g. 1-3 or 1,2,5")
    p.add_argument("--lengths", help="heatmap length cells")
    p.add_argument("--samples-per-cell", dest="samples_per_cell", type=int)
    p.add_argument("--compare", help="second checkpoint for a difference heatmap")
    p.add_argument("--train-data", dest="train_data",
                   help="training set whose scripts heatmap cells must avoid")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample text from a charlm checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--seed-text", dest="seed_text")
    p.add_argument("--n", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the continuation here instead of stdout")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("synth", help="generate program-evaluation datasets")
    p.add_argument("--config")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--valid-count", dest="valid_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--nesting", help="difficulty range, e.g. 1,3")
    p.add_argument("--length", help="target digit-count range, e.g. 1,5")
    p.add_argument("--full-scale", dest="full_scale",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="320000 samples, nesting 1-5, lengths 1-10")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("params", help="parameter count with per-block breakdown")
    p.add_argument("--config")
    _add_common_model_flags(p)
    p.add_argument("--vocab", type=int)
    p.add_argument("--output-vocab", dest="output_vocab", type=int)
    p.add_argument("--pair", action=argparse.BooleanOptionalAction, default=None,
                   help="count an encoder/decoder pair on the program task vocabularies")
    p.set_defaults(func=cmd_params)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GfrnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
