"""Miniature causal sequence model built on :mod:`leaf.autodiff`.

Token + learned position embeddings, pre-norm blocks of single-head causal
self-attention and a ReLU feed-forward layer, final layer norm and an output
projection. Sequences in a batch are right-padded; the causal mask makes the
padding invisible to every real position.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 16
    n_layers: int = 1
    max_seq_len: int = 48
    capacity: str = "student"
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_model < 4:
            raise ValueError(f"d_model must be >= 4, got {self.d_model}")
        if min(self.vocab_size, self.n_layers, self.max_seq_len, self.ff_mult) < 1:
            raise ValueError(f"non-positive size in {self}")
        if self.capacity not in ("teacher", "student"):
            raise ValueError(f"capacity must be teacher or student, got {self.capacity!r}")


def teacher_config(vocab_size: int, max_seq_len: int = 48) -> ModelConfig:
    return ModelConfig(vocab_size, d_model=64, n_layers=2, max_seq_len=max_seq_len, capacity="teacher")


def student_config(vocab_size: int, max_seq_len: int = 48) -> ModelConfig:
    return ModelConfig(vocab_size, d_model=16, n_layers=1, max_seq_len=max_seq_len, capacity="student")


def check_capacity_gap(teacher: ModelConfig, student: ModelConfig) -> None:
    if not (teacher.d_model > student.d_model and teacher.n_layers > student.n_layers):
        raise ValueError("teacher must exceed student in both d_model and n_layers")
    if teacher.vocab_size != student.vocab_size:
        raise ValueError("teacher and student must share the vocabulary")


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.config == other.config
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.d_model * cfg.ff_mult
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        shapes.update({
            f"l{i}.wq": (d, d),
            f"l{i}.wk": (d, d),
            f"l{i}.wv": (d, d),
            f"l{i}.wo": (d, d),
            f"l{i}.w1": (d, h),
            f"l{i}.b1": (h,),
            f"l{i}.w2": (h, d),
            f"l{i}.b2": (d,),
        })
    shapes["w_out"] = (d, cfg.vocab_size)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-a, a) entries with a = 1/sqrt(d_model); deterministic in seed."""
    rng = np.random.default_rng(seed)
    a = 1.0 / math.sqrt(cfg.d_model)
    arrays = {name: rng.uniform(-a, a, size=shape) for name, shape in param_shapes(cfg).items()}
    return ModelParams(cfg, arrays)


# --------------------------------------------------------------------------
# forward pass


@dataclass
class Graph:
    """Nodes of one forward pass that callers may want gradients for."""

    logits: ad.Node
    emb: ad.Node
    params: dict[str, ad.Node]


def _validate_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"token batch must be (batch, len>0), got {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")


def build_graph(params: ModelParams, tokens: np.ndarray) -> Graph:
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _validate_tokens(cfg, tokens)
    b, t = tokens.shape
    p = {k: ad.Node(v) for k, v in params.arrays.items()}

    emb = ad.gather_rows(p["tok_emb"], tokens)
    pos = ad.slice_rows(p["pos_emb"], 0, t)
    x = _add_pos(emb, pos, b)

    mask = np.triu(np.full((t, t), NEG_INF), k=1)
    mask_node = ad.Node(np.broadcast_to(mask, (b, t, t)).copy())
    scale = ad.Node(np.full((b, t, t), 1.0 / math.sqrt(cfg.d_model)))

    for i in range(cfg.n_layers):
        h = ad.layer_norm(x)
        q = h @ p[f"l{i}.wq"]
        k = h @ p[f"l{i}.wk"]
        v = h @ p[f"l{i}.wv"]
        scores = ad.add(ad.mul(q @ ad.transpose(k), scale), mask_node)
        att = ad.softmax_rows(scores)
        x = x + (att @ v) @ p[f"l{i}.wo"]
        h = ad.layer_norm(x)
        ff = ad.relu(h @ p[f"l{i}.w1"] + p[f"l{i}.b1"]) @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        x = x + ff

    logits = ad.layer_norm(x) @ p["w_out"]
    return Graph(logits, emb, p)


def _add_pos(emb: ad.Node, pos: ad.Node, batch: int) -> ad.Node:
    # position table is shared across the batch: tile it with concat so the
    # gradient flows back into the single (t, d) slice
    tiled = ad.concat_rows([ad.reshape(pos, (1,) + pos.shape)] * batch)
    return ad.add(emb, tiled)


def forward_logits(params: ModelParams, tokens: Sequence[int]) -> np.ndarray:
    """Logits of shape (len, vocab) for one sequence."""
    arr = np.asarray(tokens, dtype=np.int64)[None, :]
    return build_graph(params, arr).logits.value[0]


def forward_logits_batch(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    return build_graph(params, np.asarray(tokens, dtype=np.int64)).logits.value


def pad_batch(seqs: Sequence[Sequence[int]], masks: Sequence[Sequence[bool]] | None = None):
    """Right-pad token lists to a common length; padding positions are masked out."""
    n = max(len(s) for s in seqs)
    tokens = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        if masks is not None:
            mask[i, : len(s)] = masks[i]
    return tokens, mask


def target_weights(target_mask: np.ndarray) -> np.ndarray:
    """Per-position weights (b, t-1) for next-token prediction.

    ``target_mask[b, j]`` marks token j as a prediction target; it is scored
    from the logits at position j-1. Weights are 1/count per sequence so the
    loss is the mean over targets within a sequence, then over the batch.
    """
    m = np.asarray(target_mask, dtype=bool)[:, 1:].astype(np.float64)
    counts = m.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("every sequence needs at least one target position (position 0 cannot be a target)")
    return m / counts / m.shape[0]


def _onehot_targets(tokens: np.ndarray, vocab: int, weights: np.ndarray) -> np.ndarray:
    b, t = tokens.shape
    out = np.zeros((b, t, vocab))
    nxt = tokens[:, 1:]
    bi, ti = np.nonzero(weights)
    out[bi, ti, nxt[bi, ti]] = weights[bi, ti]
    return out


def nll_graph(params: ModelParams, tokens: np.ndarray, target_mask: np.ndarray) -> tuple[ad.Node, Graph]:
    tokens = np.asarray(tokens, dtype=np.int64)
    weights = target_weights(target_mask)
    g = build_graph(params, tokens)
    logp = ad.log_softmax_rows(g.logits)
    w = ad.Node(-_onehot_targets(tokens, params.config.vocab_size, weights))
    return ad.sum_all(ad.mul(logp, w)), g


def nll_loss(params: ModelParams, tokens: Sequence[int], target_mask: Sequence[bool]) -> float:
    """Mean over target positions of -log p(token | prefix)."""
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    mask = np.asarray(target_mask, dtype=bool)[None, :]
    if mask.shape != toks.shape:
        raise ValueError("target_mask must match token length")
    loss, _ = nll_graph(params, toks, mask)
    return float(loss.value)


def token_nll(params: ModelParams, tokens: Sequence[int]) -> np.ndarray:
    """-log p(x_j | x_<j) for j >= 1; position 0 gets 0."""
    toks = np.asarray(tokens, dtype=np.int64)
    logits = forward_logits(params, toks)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = np.zeros(len(toks))
    out[1:] = -logp[np.arange(len(toks) - 1), toks[1:]]
    return out


def token_grad_norms(
    params: ModelParams,
    tokens: Sequence[int],
    context_mask: Sequence[bool],
    target_mask: Sequence[bool],
    reduction: str = "l2",
) -> np.ndarray:
    """Per-token sensitivity: norm of dloss/d(embedding row) at each context position.

    The loss is the mean NLL over ``target_mask`` positions. Non-context
    positions report 0.
    """
    ctx = np.asarray(context_mask, dtype=bool)
    tgt = np.asarray(target_mask, dtype=bool)
    if (ctx & tgt).any():
        raise ValueError("context and target positions overlap")
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    loss, g = nll_graph(params, toks, tgt[None, :])
    ad.backward(loss)
    grad = g.emb.grad[0]
    if reduction == "l2":
        norms = np.sqrt((grad * grad).sum(axis=-1))
    elif reduction == "abs_sum":
        norms = np.abs(grad).sum(axis=-1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return np.where(ctx, norms, 0.0)


def greedy_decode(params: ModelParams, prompt: Sequence[int], max_new: int, stop_token: int) -> list[int]:
    return greedy_decode_batch(params, [prompt], max_new, stop_token)[0]


def greedy_decode_batch(
    params: ModelParams,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    stop_token: int,
) -> list[list[int]]:
    """Argmax decoding (lowest index wins ties), stopping at ``stop_token``.

    Prompts of equal length are decoded together; results come back in input
    order and include the prompt.
    """
    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        if len(p) == 0:
            raise ValueError("prompt must be non-empty")
        groups.setdefault(len(p), []).append(i)
    limit = params.config.max_seq_len
    for length in sorted(groups):
        idx = groups[length]
        seqs = np.array([list(prompts[i]) for i in idx], dtype=np.int64)
        done = np.zeros(len(idx), dtype=bool)
        for _ in range(max_new):
            if done.all() or seqs.shape[1] >= limit:
                break
            logits = forward_logits_batch(params, seqs)[:, -1, :]
            nxt = logits.argmax(axis=-1)  # argmax returns the first maximum
            nxt = np.where(done, stop_token, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == stop_token
        for row, i in enumerate(idx):
            seq = seqs[row].tolist()
            # trim the padding emitted after a row finished
            gen = seq[length:]
            if stop_token in gen:
                gen = gen[: gen.index(stop_token) + 1]
            out[i] = seq[:length] + gen
    return out  # type: ignore[return-value]


# --------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_lm(
    params: ModelParams,
    seqs: Sequence[Sequence[int]],
    target_masks: Sequence[Sequence[bool]],
    *,
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Teacher-forced NLL training in place; returns mean loss per epoch."""
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=lr)
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in batch_order(len(seqs), batch_size, rng):
            tokens, mask = pad_batch([seqs[i] for i in idx], [target_masks[i] for i in idx])
            loss, g = nll_graph(params, tokens, mask)
            ad.backward(loss)
            opt.step(params, {k: n.grad for k, n in g.params.items()})
            total += float(loss.value) * len(idx)
        history.append(total / len(seqs))
    return history


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """JSON (``.json``) keeps exact float reprs; anything else is a binary ``.npz``."""
    path = Path(path)
    if path.suffix == ".json":
        doc = {
            "format": "leaf-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(params.config),
            "params": [
                {"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
                for k, v in params.arrays.items()
            ],
        }
        path.write_text(json.dumps(doc))
    else:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                __meta__=np.array(json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(params.config),
                                              "order": list(params.arrays)})),
                **params.arrays,
            )


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if doc.get("format") != "leaf-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} leaf checkpoint")
        cfg = ModelConfig(**doc["config"])
        arrays = {p["name"]: np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]}
    else:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            cfg = ModelConfig(**meta["config"])
            arrays = {k: data[k].copy() for k in meta["order"]}
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise ValueError(f"{path}: parameter shapes do not match config")
    return ModelParams(cfg, arrays)


def iter_params(params: ModelParams) -> Iterable[tuple[str, np.ndarray]]:
    return params.arrays.items()
