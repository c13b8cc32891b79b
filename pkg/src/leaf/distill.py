"""Standard and counterfactual distillation with a lambda blend.

Both terms are forward KL(teacher || student) averaged over target tokens;
the counterfactual term conditions both models on the pruned input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .corpus import TaskSample
from .detection import SPLIT_MODES, STRATEGIES, CounterfactualSample, decode_matches


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.5
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    split_mode: str = "no-split"
    strategy: str = "gradient"
    include_student_wrong_originals: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.split_mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.split_mode!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class LossBreakdown:
    l_kd: float
    l_cd: float
    total: float
    n_kd_tokens: int
    n_cd_tokens: int

    def to_json(self) -> dict:
        return asdict(self)


def kl_div(p: Sequence[float], q: Sequence[float]) -> float:
    """sum p_i ln(p_i / q_i) in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# a sequence to distil on: tokens plus which of them are scored targets
Example = tuple[list[int], list[bool]]


def original_example(sample: TaskSample) -> Example:
    return sample.tokens, [False] * len(sample.instruction) + [True] * len(sample.response)


def counterfactual_example(cf: CounterfactualSample) -> Example:
    return cf.pruned_input + cf.target, [False] * len(cf.pruned_input) + [True] * len(cf.target)


def kl_graph(teacher: M.ModelParams, student: M.ModelParams, batch: Sequence[Example]) -> tuple[ad.Node, M.Graph, int]:
    """Scalar node: batch mean of per-sequence mean KL over target tokens."""
    tokens, mask = M.pad_batch([b[0] for b in batch], [b[1] for b in batch])
    w = M.target_weights(mask)
    p_t = _softmax(M.forward_logits_batch(teacher, tokens))
    g = M.build_graph(student, tokens)
    logq = ad.log_softmax_rows(g.logits)
    weight = np.zeros_like(p_t)
    weight[:, :-1, :] = w[:, :, None] * p_t[:, :-1, :]
    # KL = sum w p_t log p_t - sum w p_t log q; the first part is a constant
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(weight > 0, weight * np.log(p_t), 0.0).sum()
    cross = ad.sum_all(ad.mul(logq, ad.Node(-weight)))
    loss = ad.add(cross, ad.Node(np.asarray(ent)))
    return loss, g, int(mask[:, 1:].sum())


def _kl_value(teacher, student, batch: Sequence[Example]) -> float:
    if not batch:
        return 0.0
    return float(kl_graph(teacher, student, batch)[0].value)


def kd_loss(teacher: M.ModelParams, student: M.ModelParams, sample: TaskSample) -> float:
    return _kl_value(teacher, student, [original_example(sample)])


def cd_loss(teacher: M.ModelParams, student: M.ModelParams, cf: CounterfactualSample) -> float:
    return _kl_value(teacher, student, [counterfactual_example(cf)])


def blended_graph(
    lam: float,
    teacher: M.ModelParams,
    student: M.ModelParams,
    originals: Sequence[Example],
    counterfactuals: Sequence[Example],
) -> tuple[ad.Node, dict[str, np.ndarray], LossBreakdown]:
    """lam * L_kd + (1 - lam) * L_cd, plus student parameter gradients.

    An empty batch contributes 0 to its term (the weight is kept, so lam=1
    with no counterfactuals is plain KD).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if not originals and not counterfactuals:
        raise ValueError("both batches are empty")
    grads = {k: np.zeros_like(v) for k, v in student.arrays.items()}
    parts = []
    for weight, batch in ((lam, originals), (1.0 - lam, counterfactuals)):
        if not batch:
            parts.append((0.0, 0))
            continue
        loss, g, n = kl_graph(teacher, student, batch)
        ad.backward(loss)
        for k, node in g.params.items():
            grads[k] += weight * node.grad
        parts.append((float(loss.value), n))
    (l_kd, n_kd), (l_cd, n_cd) = parts
    total = lam * l_kd + (1.0 - lam) * l_cd
    return ad.tensor(total), grads, LossBreakdown(l_kd, l_cd, total, n_kd, n_cd)


def blended_loss(lam, teacher, student, originals, counterfactuals) -> LossBreakdown:
    return blended_graph(lam, teacher, student, originals, counterfactuals)[2]


def assemble_originals(
    student: M.ModelParams, samples: Sequence[TaskSample], include_student_wrong: bool, stop_token: int
) -> list[TaskSample]:
    if include_student_wrong or not samples:
        return list(samples)
    ok = decode_matches(student, [s.instruction for s in samples], [s.response for s in samples], stop_token)
    return [s for s, good in zip(samples, ok) if good]


@dataclass
class EpochRecord:
    epoch: int
    l_kd: float
    l_cd: float
    total: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"epoch": self.epoch, "L_kd": self.l_kd, "L_cd": self.l_cd, "L": self.total}
        d.update(self.extra)
        return d


def train_distill(
    teacher: M.ModelParams,
    student: M.ModelParams,
    originals: Sequence[TaskSample],
    counterfactuals: Sequence[CounterfactualSample],
    cfg: DistillConfig,
    *,
    stop_token: int | None = None,
    evaluate: Callable[[M.ModelParams], dict] | None = None,
) -> tuple[M.ModelParams, list[EpochRecord]]:
    """Adam on the blended loss over paired (original, counterfactual) mini-batches.

    Each step takes the next originals batch and the next counterfactual
    batch; the smaller set is cycled. Batch order comes from two sub-streams
    of ``cfg.seed`` so the originals order does not depend on whether any
    counterfactuals exist. The teacher is never modified.
    """
    student = student.copy()
    if not cfg.include_student_wrong_originals:
        if stop_token is None:
            raise ValueError("stop_token is required to drop student-wrong originals")
        originals = assemble_originals(student, originals, False, stop_token)
    orig = [original_example(s) for s in originals]
    cfs = [counterfactual_example(c) for c in counterfactuals]
    o_seq, c_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    o_rng, c_rng = np.random.default_rng(o_seq), np.random.default_rng(c_seq)
    opt = M.Adam(student, lr=cfg.lr)
    history: list[EpochRecord] = []
    c_queue: list[int] = []

    def next_cf_batch() -> list[Example]:
        nonlocal c_queue
        if not cfs:
            return []
        take = min(cfg.batch_size, len(cfs))
        while len(c_queue) < take:
            c_queue += c_rng.permutation(len(cfs)).tolist()
        idx, c_queue = c_queue[:take], c_queue[take:]
        return [cfs[i] for i in idx]

    for epoch in range(cfg.epochs):
        o_batches = M.batch_order(len(orig), cfg.batch_size, o_rng) if orig else []
        n_steps = len(o_batches) if orig else -(-len(cfs) // cfg.batch_size)
        sums = np.zeros(3)
        for step in range(n_steps):
            ob = [orig[i] for i in o_batches[step]] if orig else []
            cb = next_cf_batch()
            _, grads, br = blended_graph(cfg.lam, teacher, student, ob, cb)
            opt.step(student, grads)
            sums += (br.l_kd, br.l_cd, br.total)
        sums /= max(n_steps, 1)
        extra = evaluate(student) if evaluate else {}
        history.append(EpochRecord(epoch, float(sums[0]), float(sums[1]), float(sums[2]), extra))
    return student, history


def train_kd(
    teacher: M.ModelParams,
    student: M.ModelParams,
    originals: Sequence[TaskSample],
    cfg: DistillConfig,
) -> M.ModelParams:
    """Plain logit distillation on originals, written without the blend.

    Uses the same batch-order stream as :func:`train_distill` so the two can
    be compared step for step.
    """
    student = student.copy()
    orig = [original_example(s) for s in originals]
    o_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    o_rng = np.random.default_rng(o_seq)
    opt = M.Adam(student, lr=cfg.lr)
    for _ in range(cfg.epochs):
        for idx in M.batch_order(len(orig), cfg.batch_size, o_rng):
            loss, g, _ = kl_graph(teacher, student, [orig[i] for i in idx])
            ad.backward(loss)
            opt.step(student, {k: n.grad for k, n in g.params.items()})
    return student
