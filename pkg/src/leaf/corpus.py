"""Synthetic modular-sum tasks with planted confounders.

An instruction binds 2-3 variables to digits and asks for the sum (mod
``base``) of a subset of them::

    BOS a 3 b 1 c 4 [h2] ? a c

The response works the sum out step by step and ends with the answer::

    3 + 4 = 2 ; 2 STOP

``h2`` is a distractor clause: a single hint token whose value carries no
information about the answer, except in ``student_train`` where, with
probability ``rho``, it is set to ``(answer + 1) % base``. That plants the
spurious hint -> answer association that a weak student picks up and a
teacher trained on ``teacher_train`` never sees.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SPLITS = ("teacher_train", "student_train", "eval_clean", "eval_confounded")
SCOPES = ("instruction", "response")


@dataclass(frozen=True)
class Vocab:
    """Token id layout. Ids are assigned in field order below."""

    base: int = 5
    n_vars: int = 3

    @property
    def specials(self) -> tuple[str, ...]:
        return ("BOS", "STOP", "?", "+", "=", ";")

    @property
    def names(self) -> list[str]:
        return (
            list(self.specials)
            + [str(d) for d in range(self.base)]
            + [chr(ord("a") + i) for i in range(self.n_vars)]
            + [f"h{d}" for d in range(self.base)]
        )

    @property
    def size(self) -> int:
        return len(self.specials) + 2 * self.base + self.n_vars

    def id(self, name: str) -> int:
        return self.names.index(name)

    @property
    def bos(self) -> int:
        return 0

    @property
    def stop(self) -> int:
        return 1

    @property
    def query(self) -> int:
        return 2

    @property
    def plus(self) -> int:
        return 3

    @property
    def equals(self) -> int:
        return 4

    @property
    def step_delim(self) -> int:
        return 5

    def digit(self, d: int) -> int:
        return len(self.specials) + d

    def var(self, i: int) -> int:
        return len(self.specials) + self.base + i

    def hint(self, d: int) -> int:
        return len(self.specials) + self.base + self.n_vars + d

    def is_digit(self, tok: int) -> bool:
        return self.digit(0) <= tok < self.digit(self.base)

    def is_var(self, tok: int) -> bool:
        return self.var(0) <= tok < self.var(self.n_vars)

    def is_hint(self, tok: int) -> bool:
        return self.hint(0) <= tok < self.hint(self.base)

    def decode(self, tokens: Iterable[int]) -> str:
        names = self.names
        return " ".join(names[t] for t in tokens)


@dataclass(frozen=True)
class CorpusConfig:
    base: int = 5
    n_vars: int = 3
    n_teacher_train: int = 2000
    n_student_train: int = 2000
    n_eval: int = 300
    confounder_rate: float = 0.5
    rho: float = 0.9
    response_noise_rate: float = 0.0
    shuffle_bindings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.base < 2:
            raise ValueError("base must be >= 2")
        if self.n_vars < 2:
            raise ValueError("vocab too small: need at least 2 variable names for the task layout")
        if not 0 < self.confounder_rate <= 1:
            raise ValueError("confounder_rate must lie in (0, 1]")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if not 0 <= self.response_noise_rate <= 1:
            raise ValueError("response_noise_rate must lie in [0, 1]")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.base, self.n_vars)


@dataclass(frozen=True)
class Span:
    """Half-open token interval ``[start, end)`` within ``scope``."""

    scope: str
    start: int
    end: int

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class TaskSample:
    id: str
    split: str
    instruction: list[int]
    response: list[int]
    answer: int
    planted_spans: list[Span] = field(default_factory=list)

    @property
    def confounded(self) -> bool:
        return bool(self.planted_spans)

    @property
    def tokens(self) -> list[int]:
        return self.instruction + self.response

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "instruction": list(self.instruction),
            "response": list(self.response),
            "answer": self.answer,
            "planted_spans": [asdict(s) for s in self.planted_spans],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TaskSample":
        return cls(
            id=str(doc["id"]),
            split=str(doc["split"]),
            instruction=[int(t) for t in doc["instruction"]],
            response=[int(t) for t in doc["response"]],
            answer=int(doc["answer"]),
            planted_spans=[Span(s["scope"], int(s["start"]), int(s["end"])) for s in doc["planted_spans"]],
        )


# --------------------------------------------------------------------------
# generation


@dataclass
class _Problem:
    vars: list[int]  # variable indices in binding order
    values: list[int]
    query: list[int]  # variable indices, in binding order


def _draw_problem(cfg: CorpusConfig, rng: np.random.Generator) -> _Problem:
    n = int(rng.integers(2, min(3, cfg.n_vars) + 1))
    if cfg.shuffle_bindings:
        vars_ = [int(v) for v in rng.choice(cfg.n_vars, size=n, replace=False)]
    else:
        vars_ = list(range(n))
    values = [int(v) for v in rng.integers(0, cfg.base, size=n)]
    k = int(rng.integers(2, n + 1))
    picked = sorted(rng.choice(n, size=k, replace=False).tolist())
    return _Problem(vars_, values, [vars_[i] for i in picked])


def task_rule(vocab: Vocab, instruction: list[int]) -> int:
    """Answer recomputed from the instruction, ignoring every hint token."""
    binding: dict[int, int] = {}
    query: list[int] = []
    i = 0
    seen_query = False
    while i < len(instruction):
        tok = instruction[i]
        if tok == vocab.query:
            seen_query = True
        elif vocab.is_var(tok):
            if seen_query:
                query.append(tok)
            else:
                binding[tok] = instruction[i + 1] - vocab.digit(0)
                i += 1
        i += 1
    return sum(binding[q] for q in query) % vocab.base


def _answer(cfg: CorpusConfig, p: _Problem) -> int:
    value_of = dict(zip(p.vars, p.values))
    return sum(value_of[q] for q in p.query) % cfg.base


def _instruction(vocab: Vocab, p: _Problem, hint: int | None) -> tuple[list[int], list[Span]]:
    toks = [vocab.bos]
    for v, d in zip(p.vars, p.values):
        toks += [vocab.var(v), vocab.digit(d)]
    spans = []
    if hint is not None:
        # the hint clause always sits between the bindings and the query
        spans.append(Span("instruction", len(toks), len(toks) + 1))
        toks.append(vocab.hint(hint))
    toks.append(vocab.query)
    toks += [vocab.var(q) for q in p.query]
    return toks, spans


def _response(vocab: Vocab, cfg: CorpusConfig, p: _Problem, noise: int | None) -> tuple[list[int], list[Span]]:
    value_of = dict(zip(p.vars, p.values))
    vals = [value_of[q] for q in p.query]
    toks: list[int] = []
    spans: list[Span] = []
    acc = vals[0]
    for j, v in enumerate(vals[1:]):
        nxt = (acc + v) % cfg.base
        toks += [vocab.digit(acc), vocab.plus, vocab.digit(v), vocab.equals, vocab.digit(nxt), vocab.step_delim]
        acc = nxt
        if j == 0 and noise is not None:
            # irrelevant step after the first one
            spans.append(Span("response", len(toks), len(toks) + 2))
            toks += [vocab.hint(noise), vocab.step_delim]
    toks += [vocab.digit(acc), vocab.stop]
    return toks, spans


def _hint_value(cfg: CorpusConfig, answer: int, split: str, rng: np.random.Generator) -> int:
    uniform = int(rng.integers(0, cfg.base))
    coin = rng.random()
    if split == "student_train" and coin < cfg.rho:
        return (answer + 1) % cfg.base
    return uniform


def generate_corpus(cfg: CorpusConfig) -> list[TaskSample]:
    """Deterministic in ``cfg.seed``; splits use independent sub-streams."""
    vocab = cfg.vocab
    root = np.random.SeedSequence(cfg.seed)
    streams = dict(zip(SPLITS, root.spawn(len(SPLITS))))
    corpus: list[TaskSample] = []

    for split, n in (("teacher_train", cfg.n_teacher_train), ("student_train", cfg.n_student_train)):
        rng = np.random.default_rng(streams[split])
        for i in range(n):
            p = _draw_problem(cfg, rng)
            ans = _answer(cfg, p)
            hint = _hint_value(cfg, ans, split, rng) if rng.random() < cfg.confounder_rate else None
            instr, spans = _instruction(vocab, p, hint)
            noise = None
            if split == "student_train" and len(p.query) > 2 and rng.random() < cfg.response_noise_rate:
                noise = _hint_value(cfg, ans, split, rng)
            resp, rspans = _response(vocab, cfg, p, noise)
            corpus.append(TaskSample(f"{split}-{i}", split, instr, resp, ans, spans + rspans))

    # paired eval splits: same problem, with and without a hint clause
    rng = np.random.default_rng(streams["eval_clean"])
    for i in range(cfg.n_eval):
        p = _draw_problem(cfg, rng)
        ans = _answer(cfg, p)
        hint = int(rng.integers(0, cfg.base))
        resp, _ = _response(vocab, cfg, p, None)
        clean, _ = _instruction(vocab, p, None)
        confounded, spans = _instruction(vocab, p, hint)
        corpus.append(TaskSample(f"eval_clean-{i}", "eval_clean", clean, list(resp), ans, []))
        corpus.append(TaskSample(f"eval_confounded-{i}", "eval_confounded", confounded, list(resp), ans, spans))
    return corpus


def by_split(corpus: Iterable[TaskSample], split: str) -> list[TaskSample]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [s for s in corpus if s.split == split]


def max_len(corpus: Iterable[TaskSample]) -> int:
    return max((len(s.instruction) + len(s.response) for s in corpus), default=0)


# --------------------------------------------------------------------------
# I/O


class CorpusFormatError(ValueError):
    pass


def write_corpus(corpus: Iterable[TaskSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in corpus:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[TaskSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(TaskSample.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    return out


def corpus_stats(corpus: list[TaskSample]) -> dict:
    lengths = [len(s.instruction) for s in corpus]
    counts = {sp: 0 for sp in SPLITS}
    confounded = {sp: 0 for sp in SPLITS}
    for s in corpus:
        counts[s.split] = counts.get(s.split, 0) + 1
        confounded[s.split] = confounded.get(s.split, 0) + int(s.confounded)
    return {
        "n_samples": len(corpus),
        "instruction_len_min": min(lengths) if lengths else 0,
        "instruction_len_max": max(lengths) if lengths else 0,
        "instruction_len_mean": float(np.mean(lengths)) if lengths else 0.0,
        "split_counts": counts,
        "confounded_counts": confounded,
    }
