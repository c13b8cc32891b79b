"""Confounding-token detection and counterfactual construction.

Per-token sensitivities of teacher and student are min-max normalised, their
difference is normalised again, and tokens whose normalised difference is at
most ``tau`` are flagged: the student leans on them, the teacher does not.
Maximal runs of flagged tokens become spans; each span whose deletion makes
both models produce the target becomes one counterfactual sample.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from .corpus import Span, TaskSample, Vocab

STRATEGIES = ("gradient", "random", "ppl", "none")
SPLIT_MODES = ("no-split", "2-segment", "3-segment")
SCOPE_MODES = ("instruct", "instruct+response")


@dataclass(frozen=True)
class DetectionConfig:
    tau: float = 0.10
    min_span_len: int = 1
    scope: str = "instruct"
    include_student_wrong_originals: bool = True
    reduction: str = "l2"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.min_span_len < 1:
            raise ValueError("min_span_len must be >= 1")
        if self.scope not in SCOPE_MODES:
            raise ValueError(f"scope must be one of {SCOPE_MODES}")


# --------------------------------------------------------------------------
# units: a context to condition on and a target segment to score


@dataclass
class Unit:
    """One (context, target) pair cut from a sample.

    ``n_instr`` tokens of ``context`` come from the instruction, the rest is
    a response prefix. Position 0 (BOS) is framing and is never in scope.
    """

    sample_id: str
    context: list[int]
    target: list[int]
    n_instr: int
    segment: int = 0
    planted: list[Span] = field(default_factory=list)

    @property
    def tokens(self) -> list[int]:
        return self.context + self.target

    def scope_positions(self, scope: str) -> np.ndarray:
        hi = self.n_instr if scope == "instruct" else len(self.context)
        return np.arange(1, hi)

    def planted_mask(self, positions: np.ndarray) -> np.ndarray:
        hit = np.zeros(len(self.context), dtype=bool)
        for s in self.planted:
            off = 0 if s.scope == "instruction" else self.n_instr
            lo, hi = off + s.start, off + s.end
            hit[max(lo, 0) : min(hi, len(self.context))] = True
        return hit[positions]


def split_response(sample: TaskSample, mode: str, delimiter: int | None = None) -> list[Unit]:
    """Cut the response into 1, 2 or 3 target segments.

    Cut j sits at floor(len*j/k), moved forward to just past the next
    ``delimiter`` if one occurs before the following nominal cut. A response
    shorter than k falls back to a single segment.
    """
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    k = {"no-split": 1, "2-segment": 2, "3-segment": 3}[mode]
    resp = sample.response
    n = len(resp)
    if n < k:
        k = 1
    nominal = [n * j // k for j in range(k + 1)]
    cuts = [0]
    for j in range(1, k):
        c = nominal[j]
        if delimiter is not None:
            for pos in range(c, nominal[j + 1]):
                if resp[pos] == delimiter:
                    c = pos + 1
                    break
        c = max(c, cuts[-1] + 1)
        cuts.append(min(c, n - (k - j)))
    cuts.append(n)
    units = []
    for j in range(k):
        lo, hi = cuts[j], cuts[j + 1]
        units.append(Unit(
            sample.id,
            sample.instruction + resp[:lo],
            resp[lo:hi],
            len(sample.instruction),
            j,
            [s for s in sample.planted_spans if s.scope == "instruction" or s.end <= lo],
        ))
    return units


def whole_unit(sample: TaskSample) -> Unit:
    return split_response(sample, "no-split")[0]


# --------------------------------------------------------------------------
# attribution


def minmax_normalize(v: Sequence[float]) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to all zeros."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalise an empty vector")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass
class AttributionRecord:
    sample_id: str
    segment: int
    positions: np.ndarray
    tokens: np.ndarray
    g_teacher: np.ndarray
    g_student: np.ndarray
    gn_teacher: np.ndarray
    gn_student: np.ndarray
    delta: np.ndarray
    norm_delta: np.ndarray
    flags: np.ndarray | None = None

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def attribution_from_sensitivities(
    g_teacher: Sequence[float],
    g_student: Sequence[float],
    *,
    sample_id: str = "",
    segment: int = 0,
    positions: Sequence[int] | None = None,
    tokens: Sequence[int] | None = None,
) -> AttributionRecord:
    gt = np.asarray(g_teacher, dtype=np.float64)
    gs = np.asarray(g_student, dtype=np.float64)
    if gt.shape != gs.shape:
        raise ValueError("teacher and student sensitivities differ in length")
    gn_t = minmax_normalize(gt)
    gn_s = minmax_normalize(gs)
    delta = gn_t - gn_s
    n = len(gt)
    return AttributionRecord(
        sample_id,
        segment,
        np.arange(n) if positions is None else np.asarray(positions),
        np.zeros(n, dtype=np.int64) if tokens is None else np.asarray(tokens),
        gt,
        gs,
        gn_t,
        gn_s,
        delta,
        minmax_normalize(delta),
    )


def compute_attribution(
    teacher: M.ModelParams,
    student: M.ModelParams,
    unit: Unit,
    scope: str = "instruct",
    reduction: str = "l2",
) -> AttributionRecord:
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student must share the vocabulary")
    pos = unit.scope_positions(scope)
    if pos.size == 0:
        raise ValueError(f"{unit.sample_id}: empty scope")
    toks = unit.tokens
    n = len(toks)
    ctx = np.zeros(n, dtype=bool)
    ctx[pos] = True
    tgt = np.zeros(n, dtype=bool)
    tgt[len(unit.context) :] = True
    gt = M.token_grad_norms(teacher, toks, ctx, tgt, reduction)[pos]
    gs = M.token_grad_norms(student, toks, ctx, tgt, reduction)[pos]
    return attribution_from_sensitivities(
        gt, gs, sample_id=unit.sample_id, segment=unit.segment, positions=pos,
        tokens=np.asarray(toks)[pos],
    )


def flag_confounders(record: AttributionRecord, tau: float) -> np.ndarray:
    """Inclusive threshold on the normalised teacher-minus-student difference."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return record.norm_delta <= tau


# --------------------------------------------------------------------------
# spans and pruning


def extract_spans(flags: Sequence[bool], min_len: int = 1, scope: str = "instruction") -> list[Span]:
    """Maximal runs of True, ascending, keeping runs of at least ``min_len``."""
    spans = []
    start = None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            if i - start >= min_len:
                spans.append(Span(scope, start, i))
            start = None
    return spans


def spans_to_flags(spans: Iterable[Span], n: int) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    for s in spans:
        flags[s.start : s.end] = True
    return flags


def _as_pairs(spans) -> list[tuple[int, int]]:
    out = []
    for s in spans:
        if isinstance(s, Span):
            out.append((s.start, s.end))
        else:
            out.append((int(s[0]), int(s[1])))
    return out


def prune(tokens: Sequence[int], spans) -> list[int]:
    """Delete the spanned tokens; survivors keep their order."""
    pairs = sorted(_as_pairs(spans))
    for (a0, a1), (b0, _) in zip(pairs, pairs[1:]):
        if b0 < a1:
            raise ValueError(f"overlapping spans [{a0}, {a1}) and [{b0}, ...)")
    for a, b in pairs:
        if not 0 <= a < b <= len(tokens):
            raise ValueError(f"span [{a}, {b}) out of range for length {len(tokens)}")
    keep = np.ones(len(tokens), dtype=bool)
    for a, b in pairs:
        keep[a:b] = False
    return [t for t, k in zip(tokens, keep) if k]


def context_spans(unit: Unit, record: AttributionRecord, flags: np.ndarray, min_len: int) -> list[Span]:
    """Flag runs mapped to scoped spans, cut at the instruction/response seam."""
    full = np.zeros(len(unit.context), dtype=bool)
    full[record.positions] = flags
    out = extract_spans(full[: unit.n_instr], min_len, "instruction")
    out += extract_spans(full[unit.n_instr :], min_len, "response")
    return out


def to_context_index(unit: Unit, span: Span) -> tuple[int, int]:
    off = 0 if span.scope == "instruction" else unit.n_instr
    return off + span.start, off + span.end


def prune_unit(unit: Unit, spans: Sequence[Span]) -> list[int]:
    return prune(unit.context, [to_context_index(unit, s) for s in spans])


# --------------------------------------------------------------------------
# correctness and filtering


def decode_matches(params: M.ModelParams, contexts: Sequence[list[int]], targets: Sequence[list[int]],
                   stop_token: int) -> np.ndarray:
    """Exact match of the greedy continuation against each target segment."""
    if not contexts:
        return np.zeros(0, dtype=bool)
    max_new = max(len(t) for t in targets)
    outs = M.greedy_decode_batch(params, contexts, max_new, stop_token)
    return np.array([o[len(c) : len(c) + len(t)] == list(t) for o, c, t in zip(outs, contexts, targets)])


def filter_instances(
    teacher: M.ModelParams, student: M.ModelParams, units: Sequence[Unit], stop_token: int
) -> list[Unit]:
    """Keep units the teacher gets right and the student gets wrong."""
    ctx = [u.context for u in units]
    tgt = [u.target for u in units]
    t_ok = decode_matches(teacher, ctx, tgt, stop_token)
    s_ok = decode_matches(student, ctx, tgt, stop_token)
    return [u for u, a, b in zip(units, t_ok, s_ok) if a and not b]


def verify_removal(
    teacher: M.ModelParams, student: M.ModelParams, unit: Unit, span: Span, stop_token: int
) -> bool:
    pruned = prune_unit(unit, [span])
    return bool(
        decode_matches(teacher, [pruned], [unit.target], stop_token)[0]
        and decode_matches(student, [pruned], [unit.target], stop_token)[0]
    )


# --------------------------------------------------------------------------
# baselines


def baseline_random_mask(n: int, k: int, seed: int) -> np.ndarray:
    if not 0 <= k <= n:
        raise ValueError(f"flag budget {k} outside [0, {n}]")
    rng = np.random.default_rng(seed)
    flags = np.zeros(n, dtype=bool)
    flags[rng.choice(n, size=k, replace=False)] = True
    return flags


def baseline_ppl_mask(student: M.ModelParams, unit: Unit, k: int, scope: str = "instruct") -> np.ndarray:
    """Flag the k scoped tokens the student finds least predictable."""
    pos = unit.scope_positions(scope)
    if not 0 <= k <= len(pos):
        raise ValueError(f"flag budget {k} outside [0, {len(pos)}]")
    nll = M.token_nll(student, unit.context)[pos]
    return top_k_flags(nll, k)


def top_k_flags(scores: Sequence[float], k: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    # stable sort on -score: equal scores keep ascending index order
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(len(scores), dtype=bool)
    flags[order[:k]] = True
    return flags


# --------------------------------------------------------------------------
# dataset construction


@dataclass
class CounterfactualSample:
    source_id: str
    segment: int
    span: Span
    pruned_input: list[int]
    target: list[int]
    provenance: str
    n_instr: int

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CounterfactualSample":
        return cls(
            d["source_id"], int(d["segment"]), Span(**d["span"]), list(d["pruned_input"]),
            list(d["target"]), d["provenance"], int(d["n_instr"]),
        )


@dataclass
class DetectionReport:
    strategy: str
    tau: float
    n_units: int
    n_candidates: int
    records: list[dict]
    n_spans: int
    n_accepted: int
    flagged_tokens: int
    planted_tokens: int
    hit_tokens: int

    @property
    def precision(self) -> float:
        return self.hit_tokens / self.flagged_tokens if self.flagged_tokens else 0.0

    @property
    def recall(self) -> float:
        return self.hit_tokens / self.planted_tokens if self.planted_tokens else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["precision"] = self.precision
        d["recall"] = self.recall
        return d


def materialise(unit: Unit, span: Span, provenance: str = "teacher-generated") -> CounterfactualSample:
    """The counterfactual for one accepted span of ``unit``."""
    return CounterfactualSample(
        unit.sample_id, unit.segment, span, prune_unit(unit, [span]), list(unit.target), provenance,
        unit.n_instr - (len(span) if span.scope == "instruction" else 0),
    )


def counterfactuals_from_records(records: Iterable[dict], units: Sequence[Unit]) -> list[CounterfactualSample]:
    """Rebuild the accepted counterfactuals from serialised detection records.

    Verification already required the teacher to reproduce the target on the
    pruned input, so provenance is always teacher-generated here.
    """
    index = {(u.sample_id, u.segment): u for u in units}
    out = []
    for r in records:
        unit = index[(r["sample_id"], r["segment"])]
        for sp, ok in zip(r["spans"], r["accepted"]):
            if ok:
                out.append(materialise(unit, Span(**sp)))
    return out


def compare_strategies(
    teacher: M.ModelParams,
    student: M.ModelParams,
    units: Sequence[Unit],
    cfg: DetectionConfig,
    seed: int = 0,
) -> dict[str, dict]:
    """Token-level precision/recall of gradient, random and ppl flags on the same units.

    The two baselines get the gradient method's per-unit flag budget.
    """
    rng = np.random.default_rng(seed)
    counts = {k: [0, 0, 0] for k in ("gradient", "random", "ppl")}  # flagged, planted, hit
    for unit in units:
        rec = compute_attribution(teacher, student, unit, cfg.scope, cfg.reduction)
        grad = flag_confounders(rec, cfg.tau)
        k = int(grad.sum())
        truth = unit.planted_mask(rec.positions)
        flags = {
            "gradient": grad,
            "random": baseline_random_mask(len(grad), k, int(rng.integers(2**31))),
            "ppl": baseline_ppl_mask(student, unit, k, cfg.scope),
        }
        for name, f in flags.items():
            c = counts[name]
            c[0] += int(f.sum())
            c[1] += int(truth.sum())
            c[2] += int((f & truth).sum())
    out = {}
    for name, (fl, pl, hit) in counts.items():
        out[name] = {
            "flagged_tokens": fl,
            "planted_tokens": pl,
            "hit_tokens": hit,
            "precision": hit / fl if fl else 0.0,
            "recall": hit / pl if pl else 0.0,
        }
    return out


def detect_flags(
    teacher: M.ModelParams,
    student: M.ModelParams,
    unit: Unit,
    cfg: DetectionConfig,
    strategy: str = "gradient",
    seed: int = 0,
) -> tuple[AttributionRecord, np.ndarray]:
    """Flags for one unit; baselines spend the gradient method's flag budget."""
    rec = compute_attribution(teacher, student, unit, cfg.scope, cfg.reduction)
    flags = flag_confounders(rec, cfg.tau)
    if strategy == "random":
        flags = baseline_random_mask(len(flags), int(flags.sum()), seed)
    elif strategy == "ppl":
        flags = baseline_ppl_mask(student, unit, int(flags.sum()), cfg.scope)
    elif strategy != "gradient":
        raise ValueError(f"unknown detection strategy {strategy!r}")
    rec.flags = flags
    return rec, flags


def units_for(samples: Sequence[TaskSample], split_mode: str, scope: str, delimiter: int) -> list[Unit]:
    if scope == "instruct":
        return [whole_unit(s) for s in samples]
    units: list[Unit] = []
    for s in samples:
        units.extend(split_response(s, split_mode, delimiter))
    return units


def build_counterfactual_dataset(
    teacher: M.ModelParams,
    student: M.ModelParams,
    samples: Sequence[TaskSample],
    cfg: DetectionConfig,
    vocab: Vocab,
    *,
    split_mode: str = "no-split",
    strategy: str = "gradient",
    seed: int = 0,
) -> tuple[list[CounterfactualSample], DetectionReport]:
    """filter -> attribute -> flag -> spans -> verify -> emit, one sample per accepted span."""
    units = units_for(samples, split_mode, cfg.scope, vocab.step_delim)
    candidates = filter_instances(teacher, student, units, vocab.stop)
    rng = np.random.default_rng(seed)

    out: list[CounterfactualSample] = []
    records = []
    n_spans = n_accepted = flagged = planted = hits = 0
    for unit in candidates:
        rec, flags = detect_flags(teacher, student, unit, cfg, strategy, int(rng.integers(2**31)))
        truth = unit.planted_mask(rec.positions)
        flagged += int(flags.sum())
        planted += int(truth.sum())
        hits += int((flags & truth).sum())
        spans = context_spans(unit, rec, flags, cfg.min_span_len)
        decisions = []
        for span in spans:
            ok = verify_removal(teacher, student, unit, span, vocab.stop)
            decisions.append(ok)
            if not ok:
                continue
            teacher_out = decode_matches(teacher, [prune_unit(unit, [span])], [unit.target], vocab.stop)[0]
            out.append(materialise(unit, span, "teacher-generated" if teacher_out else "gold"))
        n_spans += len(spans)
        n_accepted += sum(decisions)
        doc = rec.to_json()
        doc["spans"] = [asdict(s) for s in spans]
        doc["accepted"] = decisions
        records.append(doc)
    report = DetectionReport(strategy, cfg.tau, len(units), len(candidates), records,
                             n_spans, n_accepted, flagged, planted, hits)
    return out, report


def heatmap_rows(records: Iterable[dict]) -> list[tuple]:
    """(sample id, position, token id, g_T, g_S, normalised difference) per scoped token."""
    rows = []
    for r in records:
        for p, t, gt, gs, nd in zip(r["positions"], r["tokens"], r["g_teacher"], r["g_student"], r["norm_delta"]):
            rows.append((r["sample_id"], int(p), int(t), float(gt), float(gs), float(nd)))
    return rows
