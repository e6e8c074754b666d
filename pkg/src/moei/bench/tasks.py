"""Synthetic task families.

GI families stand in for the knowledge the backbone already has; EI families
are the new capability being added. The two domains draw from disjoint halves
of the non-special vocabulary, so anything the adapters do to GI inputs is
attributable.

GI (pretraining domain):
    fact_lookup    fixed key -> value table hidden behind random filler tokens
    modular_arith  ``a op b mod 5`` for op in {+, -, *}, with a filler prefix
    majority       do "positive" symbols outnumber "negative" ones among five? (yes / no)
    span_copy      copy the three tokens that follow a marker (gives the backbone a copy circuit)

EI (adaptation domain), one family per facet:
    perception     pick the affect label cued by lexicon words from an option list
    cognition      copy the span that follows a trigger marker
    expression     emit the response template belonging to the cued label
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from ..data import N_SPECIAL, TaskSample
from ..errors import ConfigError
from ..rng import stream

GI_FAMILIES = ("fact_lookup", "modular_arith", "majority", "span_copy")
EI_FAMILIES = ("perception", "cognition", "expression")
MODULUS = 5
N_LABELS = 4


@dataclass
class BenchSizes:
    gi_train: int = 4000
    gi_eval: int = 200
    ei_train: int = 5000
    ei_eval: int = 100

    def __post_init__(self):
        for name in ("gi_train", "gi_eval", "ei_train", "ei_eval"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"bench.{name} must be >= 1")


@dataclass
class TaskFamily:
    name: str
    domain: str
    facet: str
    metric: str
    seed: int
    train: List[TaskSample] = field(default_factory=list)
    eval: List[TaskSample] = field(default_factory=list)

    def sample(self, rng: np.random.Generator, n: int) -> List[TaskSample]:
        idx = rng.choice(len(self.train), size=n, replace=n > len(self.train))
        return [self.train[i] for i in idx]


class Lexicon:
    """Deterministic token-id allocation for all families."""

    def __init__(self, vocab_size: int = 512):
        usable = vocab_size - N_SPECIAL
        half = usable // 2
        self.gi_range = (N_SPECIAL, N_SPECIAL + half)
        self.ei_range = (N_SPECIAL + half, vocab_size)
        self._gi_next = self.gi_range[0]
        self._ei_next = self.ei_range[0]
        gi = self._take_gi
        ei = self._take_ei
        self.gi_instr = {name: gi(2) for name in GI_FAMILIES}
        self.fact_keys = gi(40)
        self.fact_values = gi(20)
        self.gi_fillers = gi(24)
        self.digits = gi(MODULUS)
        self.ops = gi(3)
        self.pos_symbols = gi(12)
        self.neg_symbols = gi(12)
        self.yes, self.no = gi(2)
        self.gi_marker = int(gi(1)[0])
        self.payload = gi(40)
        self.ei_instr = {name: ei(2) for name in EI_FAMILIES}
        self.labels = ei(N_LABELS)
        self.cues = ei(6 * N_LABELS).reshape(N_LABELS, 6)
        self.ei_fillers = ei(40)
        self.trigger = int(ei(1)[0])
        self.cause = ei(30)
        self.resp_open, self.resp_close = (int(t) for t in ei(2))
        self.resp_words = ei(2 * N_LABELS).reshape(N_LABELS, 2)

    def _take(self, which: str, n: int) -> np.ndarray:
        lo, hi = getattr(self, f"{which}_range")
        cur = getattr(self, f"_{which}_next")
        if cur + n > hi:
            raise ConfigError(f"vocabulary too small for the {which.upper()} task families")
        setattr(self, f"_{which}_next", cur + n)
        return np.arange(cur, cur + n)

    def _take_gi(self, n: int) -> np.ndarray:
        return self._take("gi", n)

    def _take_ei(self, n: int) -> np.ndarray:
        return self._take("ei", n)

    def domain_of(self, token: int) -> str:
        if self.gi_range[0] <= token < self.gi_range[1]:
            return "GI"
        if self.ei_range[0] <= token < self.ei_range[1]:
            return "EI"
        return "special"


def _pick(rng, pool, n=1, replace=True):
    return [int(t) for t in rng.choice(pool, size=n, replace=replace)]


# ---------------------------------------------------------------- GI makers
def _fact_table(lex: Lexicon, seed: int) -> Dict[int, int]:
    rng = stream(seed, "fact_table")
    values = rng.choice(lex.fact_values, size=len(lex.fact_keys))
    return {int(k): int(v) for k, v in zip(lex.fact_keys, values)}


def _make_fact(lex: Lexicon, table: Dict[int, int]) -> Callable:
    def make(rng):
        key = _pick(rng, lex.fact_keys)[0]
        return TaskSample(lex.gi_instr["fact_lookup"], _pick(rng, lex.gi_fillers, 3) + [key],
                          (table[key],), "GI", task="fact_lookup")
    return make


def _make_arith(lex: Lexicon) -> Callable:
    def make(rng):
        a, b = (int(x) for x in rng.integers(0, MODULUS, size=2))
        op = int(rng.integers(0, 3))
        value = (a + b, a - b, a * b)[op] % MODULUS
        toks = _pick(rng, lex.gi_fillers, 2) + [int(lex.digits[a]), int(lex.ops[op]), int(lex.digits[b])]
        return TaskSample(lex.gi_instr["modular_arith"], toks, (int(lex.digits[value]),), "GI",
                          task="modular_arith")
    return make


def _make_majority(lex: Lexicon) -> Callable:
    def make(rng):
        n_pos = int(rng.integers(0, 6))
        toks = _pick(rng, lex.pos_symbols, n_pos) + _pick(rng, lex.neg_symbols, 5 - n_pos)
        toks = [toks[i] for i in rng.permutation(5)]
        answer = lex.yes if n_pos >= 3 else lex.no
        return TaskSample(lex.gi_instr["majority"], toks, (int(answer),), "GI", task="majority")
    return make


def _make_span_copy(lex: Lexicon) -> Callable:
    pool = np.concatenate([lex.gi_fillers, lex.payload])

    def make(rng):
        width, span_len = 8, 3
        pos = int(rng.integers(0, width - span_len))
        toks = _pick(rng, pool, width)
        toks[pos] = lex.gi_marker
        return TaskSample(lex.gi_instr["span_copy"], toks, tuple(toks[pos + 1 : pos + 1 + span_len]), "GI",
                          task="span_copy")
    return make


# ---------------------------------------------------------------- EI makers
def _cued_input(rng, lex: Lexicon, label: int, n_fill: int) -> List[int]:
    toks = _pick(rng, lex.cues[label], 2, replace=False) + _pick(rng, lex.ei_fillers, n_fill)
    return [toks[i] for i in rng.permutation(len(toks))]


def _make_perception(lex: Lexicon) -> Callable:
    def make(rng):
        label = int(rng.integers(0, N_LABELS))
        options = [int(lex.labels[i]) for i in rng.permutation(N_LABELS)]
        return TaskSample(lex.ei_instr["perception"], _cued_input(rng, lex, label, 4),
                          (int(lex.labels[label]),), "EI", "perception", "perception", options=options)
    return make


def _make_cognition(lex: Lexicon) -> Callable:
    def make(rng):
        width, span_len = 8, 3
        pos = int(rng.integers(0, width - span_len))
        toks = _pick(rng, lex.ei_fillers, width)
        span = _pick(rng, lex.cause, span_len)
        toks[pos] = lex.trigger
        toks[pos + 1 : pos + 1 + span_len] = span
        return TaskSample(lex.ei_instr["cognition"], toks, span, "EI", "cognition", "cognition")
    return make


def _make_expression(lex: Lexicon) -> Callable:
    def make(rng):
        label = int(rng.integers(0, N_LABELS))
        w1, w2 = (int(t) for t in lex.resp_words[label])
        return TaskSample(lex.ei_instr["expression"], _cued_input(rng, lex, label, 3),
                          (lex.resp_open, w1, w2, lex.resp_close), "EI", "expression", "expression")
    return make


def _build(name, domain, facet, metric, make, seed, n_train, n_eval) -> TaskFamily:
    train_rng, eval_rng = stream(seed, name, "train"), stream(seed, name, "eval")
    train = [make(train_rng) for _ in range(n_train)]
    seen = {s.key() for s in train}
    held: List[TaskSample] = []
    attempts = 0
    while len(held) < n_eval:
        attempts += 1
        if attempts > 100 * n_eval + 1000:
            raise ConfigError(f"could not draw {n_eval} held-out samples for {name} disjoint from train")
        s = make(eval_rng)
        if s.key() not in seen:
            seen.add(s.key())
            held.append(s)
    return TaskFamily(name, domain, facet, metric, seed, train, held)


def gen_gi_tasks(seed: int, sizes: BenchSizes = None, vocab_size: int = 512) -> Dict[str, TaskFamily]:
    """Deterministic GI families; train and eval splits are string-disjoint."""
    sizes = sizes or BenchSizes()
    lex = Lexicon(vocab_size)
    makers = {
        "fact_lookup": _make_fact(lex, _fact_table(lex, seed)),
        "modular_arith": _make_arith(lex),
        "majority": _make_majority(lex),
        "span_copy": _make_span_copy(lex),
    }
    return {
        name: _build(name, "GI", "none", "accuracy", makers[name], seed, sizes.gi_train, sizes.gi_eval)
        for name in GI_FAMILIES
    }


def gen_ei_tasks(seed: int, sizes: BenchSizes = None, vocab_size: int = 512) -> Dict[str, TaskFamily]:
    """Deterministic EI families, one per facet."""
    sizes = sizes or BenchSizes()
    lex = Lexicon(vocab_size)
    makers = {
        "perception": (_make_perception(lex), "accuracy"),
        "cognition": (_make_cognition(lex), "rouge_l"),
        "expression": (_make_expression(lex), "rouge_l"),
    }
    return {
        name: _build(name, "EI", name, metric, make, seed, sizes.ei_train, sizes.ei_eval)
        for name, (make, metric) in makers.items()
    }
