"""Countdown-style arithmetic tasks: codec, exhaustive solver, verifier, rewards.

Arithmetic is exact over the integers. Division is allowed only when it
divides evenly; intermediate values may be zero or negative.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, GenerationTimeout

# -- codec ------------------------------------------------------------------

SPECIALS = ["<pad>", "<bos>", "<eos>", "|"]
SYMBOLS = list("0123456789") + list("+-*/") + list("(),= ")
VOCAB = SPECIALS + SYMBOLS
TOKEN_ID = {s: i for i, s in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
PAD, BOS, EOS, SEP = (TOKEN_ID[s] for s in SPECIALS)
OPS = "+-*/"


def encode(text: str) -> list[int]:
    """Map characters of ``text`` to ids (no specials)."""
    try:
        return [TOKEN_ID[ch] for ch in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None


def decode(tokens: Iterable[int]) -> str:
    out = []
    for t in tokens:
        t = int(t)
        if t == EOS:
            break
        out.append(VOCAB[t] if 0 <= t < VOCAB_SIZE else "?")
    return "".join(out)


@dataclass(frozen=True)
class CountdownInstance:
    numbers: tuple[int, ...]
    target: int
    id: int = 0

    def to_json(self) -> dict:
        return {"id": self.id, "numbers": list(self.numbers), "target": self.target}

    @classmethod
    def from_json(cls, d: dict) -> "CountdownInstance":
        return cls(numbers=tuple(int(x) for x in d["numbers"]), target=int(d["target"]),
                   id=int(d["id"]))


def encode_prompt(inst: CountdownInstance) -> list[int]:
    """``<bos>n1,n2,n3|target=``"""
    body = ",".join(str(n) for n in inst.numbers)
    return [BOS] + encode(body) + [SEP] + encode(f"{inst.target}=")


# -- solver -----------------------------------------------------------------

def _combine(a: int, b: int):
    yield a + b, "+"
    yield a - b, "-"
    yield a * b, "*"
    if b != 0 and a % b == 0:
        yield a // b, "/"


@lru_cache(maxsize=4096)
def _reach(values: tuple[int, ...]) -> dict[int, str]:
    if len(values) == 1:
        return {values[0]: str(values[0])}
    out: dict[int, str] = {}
    n = len(values)
    idx = range(n)
    seen = set()
    # every split of the multiset into two non-empty parts, both orders
    for mask in range(1, (1 << n) - 1):
        left = tuple(sorted(values[i] for i in idx if mask >> i & 1))
        right = tuple(sorted(values[i] for i in idx if not mask >> i & 1))
        if (left, right) in seen:
            continue
        seen.add((left, right))
        ra, rb = _reach(left), _reach(right)
        for va, ea in ra.items():
            for vb, eb in rb.items():
                for v, op in _combine(va, vb):
                    if v not in out:
                        out[v] = f"({ea}{op}{eb})"
    return out


def reachable(numbers: Sequence[int]) -> dict[int, str]:
    """Every value reachable using each number exactly once, with a witness expression."""
    res = _reach(tuple(sorted(int(x) for x in numbers)))
    return {v: _strip_outer(e) for v, e in res.items()}


def _strip_outer(expr: str) -> str:
    if expr.startswith("(") and expr.endswith(")"):
        depth = 0
        for i, ch in enumerate(expr):
            depth += ch == "("
            depth -= ch == ")"
            if depth == 0 and i < len(expr) - 1:
                return expr
        return expr[1:-1]
    return expr


def solve(numbers: Sequence[int], target: int) -> str | None:
    return reachable(numbers).get(int(target))


def generate_dataset(seed: int, size: int, k_range=(3, 4), num_range=(1, 20),
                     target_range=(1, 100), max_retries: int = 100) -> list[CountdownInstance]:
    """Solvable instances; index ``i`` draws from its own stream seeded by (seed, i).

    The target is drawn uniformly from the values in ``target_range`` that the
    exhaustive solver can reach from the drawn numbers.
    """
    if size < 0:
        raise ConfigError("size must be non-negative")
    k_lo, k_hi = k_range
    n_lo, n_hi = num_range
    t_lo, t_hi = target_range
    if not (1 <= k_lo <= k_hi) or not (1 <= n_lo <= n_hi) or not (1 <= t_lo <= t_hi):
        raise ConfigError("ranges must be positive and ordered")
    out = []
    for i in range(size):
        rng = np.random.default_rng([seed, i])
        for _ in range(max_retries):
            k = int(rng.integers(k_lo, k_hi + 1))
            nums = tuple(int(x) for x in rng.integers(n_lo, n_hi + 1, size=k))
            targets = sorted(v for v in reachable(nums) if t_lo <= v <= t_hi)
            if targets:
                out.append(CountdownInstance(nums, int(targets[rng.integers(len(targets))]), i))
                break
        else:
            raise GenerationTimeout(f"instance {i}: no solvable draw in {max_retries} tries")
    return out


def split(dataset: Sequence[CountdownInstance], test_size: int):
    """Last ``test_size`` instances are the test set."""
    if test_size < 0 or (test_size and test_size >= len(dataset)):
        raise ConfigError("test_size must be smaller than the dataset")
    cut = len(dataset) - test_size
    return list(dataset[:cut]), list(dataset[cut:])


# -- parsing / verification -------------------------------------------------

class _ParseError(Exception):
    pass


def _lex(text: str) -> list:
    toks, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch == " ":
            i += 1
        elif ch.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            lit = text[i:j]
            if len(lit) > 1 and lit[0] == "0":
                raise _ParseError("leading zero")
            toks.append(int(lit))
            i = j
        elif ch in OPS or ch in "()":
            toks.append(ch)
            i += 1
        else:
            raise _ParseError(f"unexpected {ch!r}")
    return toks


def _apply(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0 or a % b:
        raise _ParseError("inexact division")
    return a // b


def _parse_infix(toks: list) -> tuple[int, list[int]]:
    pos = 0
    used: list[int] = []

    def peek():
        return toks[pos] if pos < len(toks) else None

    def factor():
        nonlocal pos
        t = peek()
        if isinstance(t, int):
            pos += 1
            used.append(t)
            return t
        if t == "(":
            pos += 1
            v = expr()
            if peek() != ")":
                raise _ParseError("missing )")
            pos += 1
            return v
        raise _ParseError(f"unexpected {t!r}")

    def term():
        nonlocal pos
        v = factor()
        while peek() in ("*", "/"):
            op = toks[pos]
            pos += 1
            v = _apply(op, v, factor())
        return v

    def expr():
        nonlocal pos
        v = term()
        while peek() in ("+", "-"):
            op = toks[pos]
            pos += 1
            v = _apply(op, v, term())
        return v

    v = expr()
    if pos != len(toks):
        raise _ParseError("trailing tokens")
    return v, used


def _parse_postfix(text: str) -> tuple[int, list[int]]:
    stack: list[int] = []
    used: list[int] = []
    for tok in text.replace(",", " ").split():
        if tok in OPS:
            if len(stack) < 2:
                raise _ParseError("stack underflow")
            b, a = stack.pop(), stack.pop()
            stack.append(_apply(tok, a, b))
        elif tok.isdigit() and not (len(tok) > 1 and tok[0] == "0"):
            stack.append(int(tok))
            used.append(int(tok))
        else:
            raise _ParseError(f"bad postfix token {tok!r}")
    if len(stack) != 1:
        raise _ParseError("postfix expression does not reduce to one value")
    return stack[0], used


def _response_text(response_tokens) -> str | None:
    chars = []
    for t in response_tokens:
        t = int(t)
        if t == EOS:
            break
        if not (0 <= t < VOCAB_SIZE) or t in (PAD, BOS, SEP):
            return None
        chars.append(VOCAB[t])
    return "".join(chars)


def evaluate(response_tokens, grammar: str = "infix") -> tuple[int, list[int]] | None:
    """(value, numbers used) or None when the response is malformed."""
    text = _response_text(response_tokens)
    if not text or not text.strip():
        return None
    try:
        if grammar == "infix":
            return _parse_infix(_lex(text))
        if grammar == "postfix":
            return _parse_postfix(text)
    except (_ParseError, RecursionError):
        return None
    raise ValueError(f"unknown grammar {grammar!r}")


def well_formed(inst: CountdownInstance, response_tokens, grammar: str = "infix") -> bool:
    res = evaluate(response_tokens, grammar)
    return res is not None and sorted(res[1]) == sorted(inst.numbers)


def verify(inst: CountdownInstance, response_tokens, grammar: str = "infix") -> bool:
    """True iff the response uses each number once, divides exactly and hits the target."""
    res = evaluate(response_tokens, grammar)
    if res is None:
        return False
    value, used = res
    return sorted(used) == sorted(inst.numbers) and value == inst.target


# -- rewards ----------------------------------------------------------------

@dataclass(frozen=True)
class RewardConfig:
    L_max: int = 16
    L_cache: int = 4
    enable_overlong: bool = False
    format_bonus: float = 0.0
    grammar: str = "infix"

    def __post_init__(self):
        if not 0 < self.L_cache < self.L_max:
            raise ConfigError("need 0 < L_cache < L_max")
        if self.grammar not in ("infix", "postfix"):
            raise ConfigError("grammar must be 'infix' or 'postfix'")

    def to_dict(self) -> dict:
        return asdict(self)


def length_penalty(length: int, cfg: RewardConfig) -> float:
    """Overlong shaping: 0 up to the soft cap, linear ramp to -1 at L_max, -1 beyond."""
    soft = cfg.L_max - cfg.L_cache
    if length <= soft:
        return 0.0
    if length <= cfg.L_max:
        return float(Fraction(soft - length, cfg.L_cache))
    return -1.0


def reward(inst: CountdownInstance, response_tokens, cfg: RewardConfig) -> float:
    """Task reward (1 if verified, else ``format_bonus`` if well formed, else 0)
    plus the overlong length term when enabled."""
    tokens = list(response_tokens)
    if verify(inst, tokens, cfg.grammar):
        r = 1.0
    elif cfg.format_bonus and well_formed(inst, tokens, cfg.grammar):
        r = float(cfg.format_bonus)
    else:
        r = 0.0
    if cfg.enable_overlong:
        r += length_penalty(len(tokens), cfg)
    return r


# -- evaluation -------------------------------------------------------------

def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k) / C(n, k), exact in integer arithmetic."""
    if not (0 <= c <= n) or not (1 <= k <= n):
        raise DomainError(f"need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    if n - c < k:
        return 1.0
    return float(1 - Fraction(math.comb(n - c, k), math.comb(n, k)))


# -- demonstrations ---------------------------------------------------------

def random_expression(numbers: Sequence[int], rng) -> str:
    """A well-formed expression using each number once in a random order.

    Operators are drawn uniformly, and '/' is replaced by another operator
    whenever the division would not be exact. Used to warm-start a policy on
    the answer format; the value is generally not the target.
    """
    nums = [int(numbers[i]) for i in rng.permutation(len(numbers))]
    out = str(nums[0])
    for x in nums[1:]:
        ops = list(OPS)
        while True:
            op = ops[int(rng.integers(len(ops)))]
            trial = f"{out}{op}{x}"
            if op != "/" or _safe_value(trial) is not None:
                out = trial
                break
            ops.remove("/")
    return out


def _safe_value(text: str) -> int | None:
    try:
        return _parse_infix(_lex(text))[0]
    except _ParseError:
        return None


# -- files ------------------------------------------------------------------

def write_jsonl(instances: Iterable[CountdownInstance], path) -> str:
    lines = [json.dumps(inst.to_json(), sort_keys=True, separators=(",", ":")) for inst in instances]
    blob = ("\n".join(lines) + ("\n" if lines else "")).encode()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_jsonl(path) -> list[CountdownInstance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(CountdownInstance.from_json(json.loads(line)))
    return out
