"""Program evaluation: generate tiny integer scripts, predict their output.

A script is a few assignment/for-loop lines ending in a print statement,
drawn from a closed grammar (integers, + - *, comparisons, if/else
expressions, single-letter variables). The model never executes anything;
an exact interpreter over the same grammar provides the ground truth.

Difficulty has two axes: nesting (maximum syntactic containment depth:
binary operations, if/else expressions and for-loops each add one level;
literals and variables are depth zero; print's own parentheses are
transparent) and target length (digit characters in the printed value,
sign excluded).

The model is an encoder-decoder pair with equal layer sizes. The encoder
reads the script (41 input symbols, no output head) with sequences
left-padded so every stream ends at the last timestep; backpropagation
runs over only the final truncation window while the forward state threads
through the whole script. The decoder starts from the encoder's final
per-layer state, consumes a start token followed by teacher-forced target
symbols, and predicts each next symbol through end-of-sequence (13 output
symbols: digits, minus, end, start).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DataError, GenerationError, ParseError)
from .numerics import Rng
from .stack import (Model, ModelConfig, ParamSet, StackState, sequence_backward,
                    sequence_forward)

GRAMMAR_FILE = os.path.join(os.path.dirname(__file__), "data", "progeval_grammar_v1.txt")
GRAMMAR_VERSION = "progeval grammar 1"


def _load_grammar(path: str):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln]
    if not lines or lines[0] != GRAMMAR_VERSION:
        raise DataError(f"grammar file {path}: bad or missing version line")
    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest.split(" ")
    symbols = []
    for tok in fields["symbols"]:
        if tok == "\\n":
            symbols.append("\n")
        elif tok == "SP":
            symbols.append(" ")
        else:
            if len(tok) != 1:
                raise DataError(f"grammar file {path}: bad symbol token {tok!r}")
            symbols.append(tok)
    if len(symbols) != 41 or len(set(symbols)) != 41:
        raise DataError(f"grammar file {path}: expected 41 distinct symbols, got {len(symbols)}")
    keywords = fields["keywords"]
    identifiers = fields["identifiers"]
    for kw in keywords:
        for ch in kw:
            if ch not in symbols:
                raise DataError(f"grammar file {path}: keyword {kw!r} uses symbol outside grammar")
    for ident in identifiers:
        if len(ident) != 1 or ident not in symbols:
            raise DataError(f"grammar file {path}: bad identifier {ident!r}")
    out = fields["output"]
    if len(out) != 13:
        raise DataError(f"grammar file {path}: expected 13 output symbols, got {len(out)}")
    return symbols, keywords, identifiers, out


INPUT_SYMBOLS, KEYWORDS, IDENTIFIERS, OUTPUT_SYMBOLS = _load_grammar(GRAMMAR_FILE)
INPUT_VOCAB_SIZE = len(INPUT_SYMBOLS)   # 41
INPUT_INDEX = {ch: i for i, ch in enumerate(INPUT_SYMBOLS)}
_KEYWORD_SET = set(KEYWORDS)
_IDENT_SET = set(IDENTIFIERS)
_LETTERS = set("abcdefghijklmnopqrst")

OUTPUT_VOCAB_SIZE = 13                  # digits 0-9, '-', EOS, SOS
MINUS_ID = 10
EOS_ID = 11
SOS_ID = 12


def encode_script(text: str) -> np.ndarray:
    try:
        return np.array([INPUT_INDEX[ch] for ch in text], dtype=np.int64)
    except KeyError as e:
        raise DataError(f"script symbol {e.args[0]!r} outside the {INPUT_VOCAB_SIZE}-symbol grammar") from None


def encode_target(text: str) -> np.ndarray:
    out = []
    for ch in text:
        if ch == "-":
            out.append(MINUS_ID)
        elif "0" <= ch <= "9":
            out.append(ord(ch) - ord("0"))
        else:
            raise DataError(f"target symbol {ch!r} outside digits and minus")
    return np.array(out, dtype=np.int64)


def decode_target(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i == MINUS_ID:
            out.append("-")
        elif 0 <= i <= 9:
            out.append(chr(ord("0") + i))
        elif i == SOS_ID:
            raise DataError("decode_target: start token inside output")
        else:
            raise DataError(f"decode_target: index {i} outside output vocabulary")
    return "".join(out)


# ---- syntax tree ------------------------------------------------------------
# Nodes are tuples: ("lit", v) | ("var", name) | ("bin", op, l, r)
# | ("ternary", a, lcmp, cmpop, rcmp, b). Statements: ("assign", name, expr)
# | ("for", var, count_expr, body_assign) | ("print", expr).

def expr_depth(e) -> int:
    kind = e[0]
    if kind in ("lit", "var"):
        return 0
    if kind == "bin":
        return 1 + max(expr_depth(e[2]), expr_depth(e[3]))
    if kind == "ternary":
        return 1 + max(expr_depth(e[1]), expr_depth(e[2]),
                       expr_depth(e[4]), expr_depth(e[5]))
    raise ConfigError(f"unknown expression node {kind!r}")


def stmt_depth(s) -> int:
    kind = s[0]
    if kind == "assign":
        return expr_depth(s[2])
    if kind == "for":
        return 1 + stmt_depth(s[3])
    if kind == "print":
        return expr_depth(s[1])
    raise ConfigError(f"unknown statement node {kind!r}")


def render_expr(e, parenthesize_ternary: bool = False) -> str:
    kind = e[0]
    if kind == "lit":
        return str(e[1])
    if kind == "var":
        return e[1]
    if kind == "bin":
        l = render_expr(e[2], parenthesize_ternary=True)
        r = render_expr(e[3], parenthesize_ternary=True)
        return f"({l}{e[1]}{r})"
    a = render_expr(e[1], parenthesize_ternary=True)
    lc = render_expr(e[2], parenthesize_ternary=True)
    rc = render_expr(e[4], parenthesize_ternary=True)
    b = render_expr(e[5], parenthesize_ternary=True)
    body = f"{a} if {lc}{e[3]}{rc} else {b}"
    return f"({body})" if parenthesize_ternary else body


def render_stmt(s) -> str:
    kind = s[0]
    if kind == "assign":
        return f"{s[1]}={render_expr(s[2])}"
    if kind == "for":
        return f"for {s[1]} in range({render_expr(s[2])}):{render_stmt(s[3])}"
    return f"print({render_expr(s[1])})"


def eval_expr(e, env: dict) -> int:
    kind = e[0]
    if kind == "lit":
        return e[1]
    if kind == "var":
        if e[1] not in env:
            raise GenerationError(f"variable {e[1]!r} used before assignment")
        return env[e[1]]
    if kind == "bin":
        l, r = eval_expr(e[2], env), eval_expr(e[3], env)
        if e[1] == "+":
            return l + r
        if e[1] == "-":
            return l - r
        return l * r
    lc, rc = eval_expr(e[2], env), eval_expr(e[4], env)
    cond = lc < rc if e[3] == "<" else (lc > rc if e[3] == ">" else lc == rc)
    return eval_expr(e[1], env) if cond else eval_expr(e[5], env)


def eval_stmts(stmts: list, env: dict) -> str | None:
    out = None
    for s in stmts:
        kind = s[0]
        if kind == "assign":
            env[s[1]] = eval_expr(s[2], env)
        elif kind == "for":
            count = eval_expr(s[2], env)
            for v in range(count):
                env[s[1]] = v
                eval_stmts([s[3]], env)
        else:
            out = str(eval_expr(s[1], env))
    return out


@dataclass
class ProgramSample:
    script: str
    target: str
    nesting: int
    target_length: int


def _digits(v: int) -> int:
    return len(str(abs(v)))


def _small_expr(depth: int, env_vars: list[str], rng: Rng, mul_ok: bool = True):
    """Random expression of exactly the requested depth with small literals."""
    if depth == 0:
        if env_vars and rng.uniform() < 0.4:
            return ("var", env_vars[rng.integers(0, len(env_vars))])
        return ("lit", rng.integers(0, 10))
    roll = rng.uniform()
    if roll < 0.2 and depth >= 1:
        # if/else expression; one branch carries depth-1 so the level is exact
        deep = _small_expr(depth - 1, env_vars, rng, mul_ok)
        shallow = _small_expr(rng.integers(0, depth), env_vars, rng, mul_ok)
        a, b = (deep, shallow) if rng.uniform() < 0.5 else (shallow, deep)
        lc = _small_expr(0, env_vars, rng)
        rc = _small_expr(0, env_vars, rng)
        op = "<>="[rng.integers(0, 3)]
        op = "==" if op == "=" else op
        return ("ternary", a, lc, op, rc, b)
    if roll < 0.45 and mul_ok:
        deep = _small_expr(depth - 1, env_vars, rng, mul_ok=False)
        shallow = ("lit", rng.integers(0, 4))
        l, r = (deep, shallow) if rng.uniform() < 0.5 else (shallow, deep)
        return ("bin", "*", l, r)
    op = "+-"[rng.integers(0, 2)]
    deep = _small_expr(depth - 1, env_vars, rng, mul_ok)
    other = _small_expr(rng.integers(0, depth), env_vars, rng, mul_ok)
    l, r = (deep, other) if rng.uniform() < 0.5 else (other, deep)
    return ("bin", op, l, r)


def _prelude(nesting: int, rng: Rng):
    """Optional assignments and a for-loop; depths stay at or below nesting."""
    stmts, env_vars = [], []
    env = {}
    if rng.uniform() < 0.65:
        name = IDENTIFIERS[rng.integers(0, len(IDENTIFIERS))]
        d = rng.integers(0, min(nesting, 2) + 1)
        e = _small_expr(d, [], rng)
        stmts.append(("assign", name, e))
        env_vars.append(name)
        if rng.uniform() < 0.45 and nesting >= 2:
            loop_var = IDENTIFIERS[(IDENTIFIERS.index(name) + 1) % len(IDENTIFIERS)]
            body_depth = rng.integers(1, min(nesting - 1, 2) + 1)
            body = ("assign", name, _small_expr(body_depth, [name, loop_var], rng))
            stmts.append(("for", loop_var, ("lit", rng.integers(1, 5)), body))
            env_vars.append(loop_var)
    eval_stmts(stmts, env)
    return stmts, env_vars, env


def generate_program(nesting: int, target_length: int, rng: Rng,
                     max_tries: int = 500) -> ProgramSample:
    """Script with the exact requested nesting whose printed value has the
    exact requested digit count (sign excluded).

    The printed expression is anchored: a literal A combined with a random
    subexpression E of depth nesting-1, with A solved from a drawn target
    value so the magnitude lands in [10^(k-1), 10^k - 1] by construction.
    """
    if nesting < 1:
        raise ConfigError(f"nesting: must be >= 1, got {nesting}")
    if target_length < 1:
        raise ConfigError(f"target_length: must be >= 1, got {target_length}")
    lo = 0 if target_length == 1 else 10 ** (target_length - 1)
    hi = 10 ** target_length - 1
    for _ in range(max_tries):
        stmts, env_vars, env = _prelude(nesting, rng)
        e_sub = _small_expr(nesting - 1, env_vars, rng)
        try:
            e_val = eval_expr(e_sub, env)
        except GenerationError:
            continue
        if abs(e_val) > 10 ** 12:
            continue
        magnitude = rng.integers(lo, hi + 1)
        value = -magnitude if (rng.uniform() < 0.25 and magnitude != 0) else magnitude
        # (A+E) needs A = value-E >= 0; (A-E) needs A = value+E >= 0;
        # (E-A) needs A = E-value >= 0 and is the route to negative targets
        choices = []
        if value - e_val >= 0:
            choices.append(("+", value - e_val))
        if value + e_val >= 0:
            choices.append(("-", value + e_val))
        if e_val - value >= 0:
            choices.append(("rsub", e_val - value))
        if not choices:
            continue
        op, anchor = choices[rng.integers(0, len(choices))]
        if op == "+":
            sides = [("lit", anchor), e_sub]
            if rng.uniform() < 0.5:
                sides.reverse()
            print_expr = ("bin", "+", sides[0], sides[1])
        elif op == "-":
            print_expr = ("bin", "-", ("lit", anchor), e_sub)
        else:
            print_expr = ("bin", "-", e_sub, ("lit", anchor))
        if rng.uniform() < 0.3 and env_vars:
            # route the anchored value through a variable instead
            name = IDENTIFIERS[rng.integers(0, len(IDENTIFIERS))]
            stmts = stmts + [("assign", name, print_expr), ("print", ("var", name))]
        else:
            stmts = stmts + [("print", print_expr)]
        script = "\n".join(render_stmt(s) for s in stmts)
        measured = max(stmt_depth(s) for s in stmts)
        if measured != nesting:
            continue
        result = eval_stmts(list(stmts), {})
        if result is None or result != str(value):
            continue
        if _digits(value) != target_length:
            continue
        try:
            encode_script(script)
        except DataError:
            continue
        return ProgramSample(script, result, nesting, target_length)
    raise GenerationError(
        f"could not satisfy nesting={nesting}, target_length={target_length} "
        f"after {max_tries} tries")


# ---- interpreter (independent of the generator's evaluator) ----------------

def _tokenize(script: str) -> list[tuple[str, object]]:
    toks = []
    i, n = 0, len(script)
    while i < n:
        ch = script[i]
        if ch == " ":
            i += 1
            continue
        if ch == "\n":
            toks.append(("newline", None))
            i += 1
            continue
        if ch in _LETTERS:
            j = i
            while j < n and script[j] in _LETTERS:
                j += 1
            word = script[i:j]
            if word in _KEYWORD_SET:
                toks.append(("kw", word))
            elif len(word) == 1 and word in _IDENT_SET:
                toks.append(("id", word))
            else:
                raise ParseError(f"unknown word {word!r} at position {i}")
            i = j
            continue
        if ch.isdigit():
            j = i
            while j < n and script[j].isdigit():
                j += 1
            word = script[i:j]
            if len(word) > 1 and word[0] == "0":
                raise ParseError(f"integer with leading zero {word!r} at position {i}")
            toks.append(("int", int(word)))
            i = j
            continue
        if ch == "=" and i + 1 < n and script[i + 1] == "=":
            toks.append(("op", "=="))
            i += 2
            continue
        if ch in "()*+-:<>=":
            toks.append(("op", ch))
            i += 1
            continue
        raise ParseError(f"symbol {ch!r} at position {i} outside the grammar")
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else ("eof", None)

    def take(self, kind, value=None):
        k, v = self.peek()
        if k != kind or (value is not None and v != value):
            raise ParseError(f"expected {value or kind}, found {v!r} (token {self.pos})")
        self.pos += 1
        return v

    def script(self):
        stmts = []
        while self.peek()[0] != "eof":
            if self.peek() == ("newline", None):
                self.pos += 1
                continue
            stmts.append(self.statement())
            if self.peek()[0] not in ("newline", "eof"):
                raise ParseError(f"trailing tokens after statement (token {self.pos})")
        if not stmts:
            raise ParseError("empty script")
        for k, s in enumerate(stmts):
            if (s[0] == "print") != (k == len(stmts) - 1):
                raise ParseError("script must be exactly one print statement, last")
        return stmts

    def statement(self):
        k, v = self.peek()
        if k == "kw" and v == "print":
            self.pos += 1
            self.take("op", "(")
            e = self.expr()
            self.take("op", ")")
            return ("print", e)
        if k == "kw" and v == "for":
            self.pos += 1
            var = self.take("id")
            self.take("kw", "in")
            self.take("kw", "range")
            self.take("op", "(")
            count = self.expr()
            self.take("op", ")")
            self.take("op", ":")
            body = self.statement()
            if body[0] != "assign":
                raise ParseError("loop body must be an assignment")
            return ("for", var, count, body)
        if k == "id":
            self.pos += 1
            self.take("op", "=")
            return ("assign", v, self.expr())
        raise ParseError(f"cannot start a statement with {v!r} (token {self.pos})")

    def expr(self):
        a = self.additive()
        if self.peek() == ("kw", "if"):
            self.pos += 1
            lc = self.additive()
            k, op = self.peek()
            if k != "op" or op not in ("<", ">", "=="):
                raise ParseError(f"expected comparison, found {op!r} (token {self.pos})")
            self.pos += 1
            rc = self.additive()
            self.take("kw", "else")
            b = self.expr()
            return ("ternary", a, lc, op, rc, b)
        return a

    def additive(self):
        e = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            op = self.take("op")
            e = ("bin", op, e, self.term())
        return e

    def term(self):
        e = self.factor()
        while self.peek() == ("op", "*"):
            self.pos += 1
            e = ("bin", "*", e, self.factor())
        return e

    def factor(self):
        k, v = self.peek()
        if k == "int":
            self.pos += 1
            return ("lit", v)
        if k == "id":
            self.pos += 1
            return ("var", v)
        if k == "op" and v == "(":
            self.pos += 1
            e = self.expr()
            self.take("op", ")")
            return e
        raise ParseError(f"expected integer, variable or parenthesis, found {v!r}")


def parse_script(script: str) -> list:
    return _Parser(_tokenize(script)).script()


def _interp_expr(e, env):
    kind = e[0]
    if kind == "lit":
        return e[1]
    if kind == "var":
        if e[1] not in env:
            raise ParseError(f"variable {e[1]!r} used before assignment")
        return env[e[1]]
    if kind == "bin":
        l, r = _interp_expr(e[2], env), _interp_expr(e[3], env)
        return l + r if e[1] == "+" else (l - r if e[1] == "-" else l * r)
    lc, rc = _interp_expr(e[2], env), _interp_expr(e[4], env)
    if e[3] == "<":
        cond = lc < rc
    elif e[3] == ">":
        cond = lc > rc
    else:
        cond = lc == rc
    return _interp_expr(e[1] if cond else e[5], env)


def interpret(script: str) -> str:
    """Exact evaluation over the closed grammar; arbitrary-precision ints."""
    stmts = parse_script(script)
    env: dict = {}
    out = None
    for s in stmts:
        if s[0] == "assign":
            env[s[1]] = _interp_expr(s[2], env)
        elif s[0] == "for":
            count = _interp_expr(s[2], env)
            for v in range(count):
                env[s[1]] = v
                env[s[3][1]] = _interp_expr(s[3][2], env)
        else:
            out = str(_interp_expr(s[1], env))
    return out


def script_nesting(script: str) -> int:
    """Measured nesting of a script via the parser (generator-independent)."""
    return max(stmt_depth(s) for s in parse_script(script))


# ---- datasets ---------------------------------------------------------------

DATASET_FORMAT = "progeval dataset 1"


def sample_dataset(count: int, nesting_range: tuple[int, int],
                   length_range: tuple[int, int], rng: Rng,
                   reject_scripts: set | None = None) -> list[ProgramSample]:
    """Uniform-difficulty draws; optionally rejects scripts in a blocklist."""
    lo_n, hi_n = nesting_range
    lo_l, hi_l = length_range
    if lo_n < 1 or hi_n < lo_n or lo_l < 1 or hi_l < lo_l:
        raise ConfigError(f"bad difficulty ranges {nesting_range} {length_range}")
    out = []
    for _ in range(count):
        for _ in range(200):
            s = generate_program(rng.integers(lo_n, hi_n + 1),
                                 rng.integers(lo_l, hi_l + 1), rng)
            if reject_scripts is None or s.script not in reject_scripts:
                out.append(s)
                break
        else:
            raise GenerationError("could not draw a sample outside the blocklist")
    return out


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == "\\":
                out.append("\\")
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def write_dataset(path: str, samples: list[ProgramSample]):
    with open(path, "w") as f:
        f.write(DATASET_FORMAT + "\n")
        for s in samples:
            f.write(f"{_escape(s.script)}\t{s.target}\t{s.nesting}\t{s.target_length}\n")


def read_dataset(path: str) -> list[ProgramSample]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != DATASET_FORMAT:
        raise DataError(f"dataset file {path}: bad or missing format line")
    out = []
    for ln in lines[1:]:
        if not ln:
            continue
        parts = ln.split("\t")
        if len(parts) != 4:
            raise DataError(f"dataset file {path}: expected 4 fields, got {len(parts)}")
        out.append(ProgramSample(_unescape(parts[0]), parts[1], int(parts[2]), int(parts[3])))
    return out


def encode_batch(samples: list[ProgramSample], dtype=np.float64) -> dict:
    """Pack samples into batched index/mask arrays.

    Encoder sequences are left-padded (every script ends at the last step, so
    a fixed-size truncation window always covers each script's tail); decoder
    sequences are right-padded. Decoder input is SOS + target, decoder target
    is target + EOS. Masks are 1.0 on real positions.
    """
    if not samples:
        raise DataError("encode_batch: empty sample list")
    B = len(samples)
    enc_seqs = [encode_script(s.script) for s in samples]
    tgt_seqs = [encode_target(s.target) for s in samples]
    T_e = max(len(e) for e in enc_seqs)
    T_d = max(len(t) for t in tgt_seqs) + 1
    enc_inputs = np.zeros((T_e, B), dtype=np.int64)
    enc_mask = np.zeros((T_e, B), dtype=dtype)
    dec_inputs = np.zeros((T_d, B), dtype=np.int64)
    dec_targets = np.zeros((T_d, B), dtype=np.int64)
    dec_mask = np.zeros((T_d, B), dtype=dtype)
    for b, (e, t) in enumerate(zip(enc_seqs, tgt_seqs)):
        enc_inputs[T_e - len(e):, b] = e
        enc_mask[T_e - len(e):, b] = 1.0
        dec_inputs[0, b] = SOS_ID
        dec_inputs[1:1 + len(t), b] = t
        dec_targets[:len(t), b] = t
        dec_targets[len(t), b] = EOS_ID
        dec_mask[:len(t) + 1, b] = 1.0
    return {"enc_inputs": enc_inputs, "enc_mask": enc_mask, "dec_inputs": dec_inputs,
            "dec_targets": dec_targets, "dec_mask": dec_mask, "batch": B}


# ---- encoder-decoder --------------------------------------------------------

class EncoderDecoder:
    def __init__(self, encoder: Model, decoder: Model):
        if encoder.cfg.units_per_layer != decoder.cfg.units_per_layer:
            raise ConfigError("encoder/decoder layer sizes differ; state handoff needs equality")
        if encoder.cfg.unit != decoder.cfg.unit:
            raise ConfigError("encoder/decoder unit kinds differ")
        if encoder.cfg.output_vocab != 0:
            raise ConfigError("encoder must have no output head (output_vocab = 0)")
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def build(cls, arch: str, unit: str, layers: int, units_per_layer,
              seed_or_rng, dtype=np.float64, **flags) -> "EncoderDecoder":
        rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
        if isinstance(units_per_layer, int):
            units_per_layer = [units_per_layer] * layers
        enc_cfg = ModelConfig(arch, unit, layers, list(units_per_layer),
                              INPUT_VOCAB_SIZE, 0, **flags)
        dec_cfg = ModelConfig(arch, unit, layers, list(units_per_layer),
                              OUTPUT_VOCAB_SIZE, OUTPUT_VOCAB_SIZE, **flags)
        enc = Model.build(enc_cfg, rng.child("encoder"), dtype)
        dec = Model.build(dec_cfg, rng.child("decoder"), dtype)
        return cls(enc, dec)

    def params_merged(self) -> ParamSet:
        """One ParamSet aliasing both models' arrays, for optimizers and IO."""
        merged = ParamSet()
        for name, arr in self.encoder.params.items():
            merged.add(f"enc.{name}", arr)
        for name, arr in self.decoder.params.items():
            merged.add(f"dec.{name}", arr)
        return merged

    def count_parameters(self) -> int:
        return self.encoder.params.size() + self.decoder.params.size()


@dataclass
class Seq2SeqResult:
    probs: np.ndarray | None  # (T_d, 13, B)
    nll: np.ndarray           # (B,)
    cache: dict | None


def seq2seq_forward(ed: EncoderDecoder, batch: dict, truncation: int = 50,
                    want_cache: bool = True) -> Seq2SeqResult:
    """Encoder over the script (state threaded through truncation segments,
    cache kept only for the last one), decoder teacher-forced from SOS."""
    if truncation < 1:
        raise ConfigError(f"truncation: must be >= 1, got {truncation}")
    X, M = batch["enc_inputs"], batch["enc_mask"]
    T_e = X.shape[0]
    state = ed.encoder.zero_state(batch["batch"])
    seg_starts = list(range(0, T_e, truncation))
    enc_cache = None
    for si, s0 in enumerate(seg_starts):
        s1 = min(s0 + truncation, T_e)
        last = si == len(seg_starts) - 1
        res = sequence_forward(ed.encoder, X[s0:s1], None, state, mask=M[s0:s1],
                               want_cache=(want_cache and last), keep_probs=False)
        state = res.final_state
        if last:
            enc_cache = res.cache
    dec_res = sequence_forward(ed.decoder, batch["dec_inputs"], batch["dec_targets"],
                               state, mask=batch["dec_mask"], want_cache=want_cache)
    cache = None
    if want_cache:
        cache = {"enc_cache": enc_cache, "dec_cache": dec_res.cache}
    return Seq2SeqResult(dec_res.probs, dec_res.nll, cache)


def seq2seq_backward(ed: EncoderDecoder, cache: dict, loss_scale: float = 1.0):
    """Returns (enc_grads, dec_grads, grad_norm over both)."""
    dec_grads, dec_gs0, _ = sequence_backward(ed.decoder, cache["dec_cache"],
                                              loss_scale=loss_scale)
    enc_grads, _, _ = sequence_backward(ed.encoder, cache["enc_cache"], dfinal=dec_gs0)
    total = 0.0
    for g in (enc_grads, dec_grads):
        n = g.l2_norm()
        total += n * n
    return enc_grads, dec_grads, float(np.sqrt(total))


def merged_grads(enc_grads: ParamSet, dec_grads: ParamSet) -> ParamSet:
    merged = ParamSet()
    for name, arr in enc_grads.items():
        merged.add(f"enc.{name}", arr)
    for name, arr in dec_grads.items():
        merged.add(f"dec.{name}", arr)
    return merged


def teacher_forced_accuracy(ed: EncoderDecoder, samples: list[ProgramSample],
                            truncation: int = 50, batch_size: int = 128) -> float:
    """Fraction of target positions (end token included) where the argmax
    prediction matches, conditioned on correct prefixes."""
    if not samples:
        raise DataError("teacher_forced_accuracy: empty sample list")
    hits, total = 0, 0
    for k in range(0, len(samples), batch_size):
        batch = encode_batch(samples[k:k + batch_size], dtype=ed.encoder.dtype)
        res = seq2seq_forward(ed, batch, truncation, want_cache=False)
        pred = np.argmax(res.probs, axis=1)          # (T_d, B)
        ok = (pred == batch["dec_targets"]) & (batch["dec_mask"] > 0)
        hits += int(ok.sum())
        total += int((batch["dec_mask"] > 0).sum())
    return hits / total


@dataclass
class HeatmapGrid:
    nestings: list[int]
    lengths: list[int]
    acc_a: np.ndarray
    acc_b: np.ndarray
    diff: np.ndarray


def build_heatmap(ed_a: EncoderDecoder, ed_b: EncoderDecoder, nestings: list[int],
                  lengths: list[int], samples_per_cell: int, rng: Rng,
                  train_scripts: set | None = None, truncation: int = 50) -> HeatmapGrid:
    """Per-difficulty-cell accuracy for two models plus their difference
    (second minus first). Cell test sets are freshly generated, disjoint
    from the training scripts."""
    acc_a = np.zeros((len(nestings), len(lengths)))
    acc_b = np.zeros((len(nestings), len(lengths)))
    for i, nv in enumerate(nestings):
        for j, lv in enumerate(lengths):
            cell_rng = rng.child(f"cell{nv},{lv}")
            cell = sample_dataset(samples_per_cell, (nv, nv), (lv, lv), cell_rng,
                                  reject_scripts=train_scripts)
            acc_a[i, j] = teacher_forced_accuracy(ed_a, cell, truncation)
            acc_b[i, j] = teacher_forced_accuracy(ed_b, cell, truncation)
    return HeatmapGrid(list(nestings), list(lengths), acc_a, acc_b, acc_b - acc_a)


def write_heatmap_csv(path: str, nestings: list[int], lengths: list[int],
                      matrix: np.ndarray):
    """Header row of lengths, first column of nesting levels."""
    with open(path, "w") as f:
        f.write("nesting\\length," + ",".join(str(v) for v in lengths) + "\n")
        for i, nv in enumerate(nestings):
            f.write(str(nv) + "," + ",".join(f"{matrix[i, j]:.6f}"
                                             for j in range(len(lengths))) + "\n")
