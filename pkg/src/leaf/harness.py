"""Experiment pipeline behind the ``leaf`` command line.

Each stage reads the previous stage's files from a per-seed run directory
and writes its own. All randomness comes from one root seed per run through
named sub-streams, so variants built from the same seed are paired.
"""

from __future__ import annotations

import csv
import io
import json
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np
from scipy.stats import binomtest

from . import corpus as C
from . import detection as D
from . import distill as K
from . import model as M

STREAMS = ("corpus", "init-teacher", "init-student", "batch-teacher", "batch-student", "distill", "baselines")
SWEEP_AXES = ("tau", "lambda", "strategy", "splitting")
DEFAULT_GRIDS = {
    "tau": [0.05, 0.10, 0.15],
    "lambda": [0.0, 0.25, 0.5, 0.75, 1.0],
    "strategy": list(D.STRATEGIES),
    "splitting": list(D.SPLIT_MODES),
}
SWEEP_COLUMNS = (
    "axis", "value", "seed", "eval_clean_acc", "eval_confounded_acc",
    "n_counterfactuals", "precision", "recall",
)

# file -> command that produces it
PRODUCERS = {
    "corpus.jsonl": "generate",
    "teacher.json": "train-teacher",
    "student.json": "train-student",
    "detection.json": "detect",
    "counterfactuals.jsonl": "build-cf",
    "student_kd.json": "distill",
    "student_leaf.json": "distill",
}


def substream(root: int, name: str) -> int:
    """Seed for the named sub-stream of ``root``."""
    if name not in STREAMS:
        raise ValueError(f"unknown seed stream {name!r}")
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainSpec:
    d_model: int
    n_layers: int
    ff_mult: int = 4
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    # independent inits; the one with the lowest final training loss is kept
    restarts: int = 1

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class ExperimentConfig:
    corpus: dict = field(default_factory=dict)
    teacher: TrainSpec = field(default_factory=lambda: TrainSpec(64, 2, 2, 25))
    student: TrainSpec = field(default_factory=lambda: TrainSpec(16, 1, 4, 40, restarts=6))
    detection: D.DetectionConfig = field(default_factory=D.DetectionConfig)
    distill: K.DistillConfig = field(default_factory=lambda: K.DistillConfig(epochs=12))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        bad = set(self.corpus) - {f.name for f in fields(C.CorpusConfig)} | ({"seed"} & set(self.corpus))
        if bad:
            raise ValueError(f"unknown corpus keys: {sorted(bad)}")
        self.corpus_config(0)  # validate early

    def corpus_config(self, seed: int) -> C.CorpusConfig:
        return C.CorpusConfig(**self.corpus, seed=substream(seed, "corpus"))

    def to_json(self) -> dict:
        d = asdict(self)
        d["distill"].pop("seed")
        # the detection section owns this flag
        d["distill"].pop("include_student_wrong_originals")
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        base = cls()
        kw = {}
        for name in ("teacher", "student", "detection", "distill"):
            if name in doc:
                if "seed" in doc[name]:
                    raise ValueError(f"{name}.seed is derived from the run seed")
                if name == "distill" and "include_student_wrong_originals" in doc[name]:
                    raise ValueError("set include_student_wrong_originals under detection")
                try:
                    kw[name] = replace(getattr(base, name), **doc[name])
                except TypeError as e:
                    raise ValueError(f"bad {name} section: {e}") from None
        for name in ("corpus", "seeds", "out"):
            if name in doc:
                kw[name] = doc[name]
        return cls(**kw)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from e
    return ExperimentConfig.from_json(doc)


# --------------------------------------------------------------------------
# files


class MissingArtifact(FileNotFoundError):
    pass


def run_dir(out: str | Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def need(d: Path, name: str) -> Path:
    p = d / name
    if not p.exists():
        raise MissingArtifact(f"missing {p}; produce it with `leaf {PRODUCERS[name]}`")
    return p


def dump_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv(rows: Iterable[Sequence], header: Sequence[str], path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue().encode("utf-8"))


def load_schema(name: str) -> dict:
    return json.loads(resources.files("leaf").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(doc, name: str) -> None:
    jsonschema.validate(doc, load_schema(name))


def validate_sweep_csv(path: Path) -> list[dict]:
    """Parse a sweep table and check every row against the row schema."""
    schema = load_schema("sweep_row")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            typed = {k: _typed(k, v) for k, v in row.items()}
            jsonschema.validate(typed, schema)
            rows.append(typed)
    return rows


def _typed(key: str, value: str):
    if key in ("axis", "value", "seed"):
        return value
    if key == "n_counterfactuals":
        return int(float(value))
    return float(value)


# --------------------------------------------------------------------------
# metrics helpers


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    """Jaccard similarity of two token-id sets; two empty sets count as identical."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def sign_test(wins: int, losses: int) -> float:
    """One-sided paired sign test; ties are dropped before calling."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def paired_sign_test(a: Sequence[float], b: Sequence[float]) -> dict:
    """Does ``a`` beat ``b`` pair by pair?"""
    if len(a) != len(b):
        raise ValueError("paired samples differ in length")
    wins = sum(x > y for x, y in zip(a, b))
    losses = sum(x < y for x, y in zip(a, b))
    return {"wins": wins, "losses": losses, "ties": len(a) - wins - losses, "p_value": sign_test(wins, losses)}


def generate(params: M.ModelParams, contexts: Sequence[list[int]], max_new: int, stop: int) -> list[list[int]]:
    outs = M.greedy_decode_batch(params, contexts, max_new, stop)
    return [o[len(c):] for o, c in zip(outs, contexts)]


def evaluate_split(params: M.ModelParams, samples: Sequence[C.TaskSample], stop: int,
                   contexts: Sequence[list[int]] | None = None) -> dict:
    """Exact-match accuracy and Jaccard similarity of greedy outputs against gold."""
    if not samples:
        return {"accuracy": 0.0, "jaccard_mean": 0.0, "n": 0}
    ctx = [s.instruction for s in samples] if contexts is None else list(contexts)
    max_new = max(len(s.response) for s in samples)
    gens = generate(params, ctx, max_new, stop)
    hits = [g[: len(s.response)] == s.response for g, s in zip(gens, samples)]
    jac = [jaccard(g, s.response) for g, s in zip(gens, samples)]
    return {
        "accuracy": float(np.mean(hits)),
        "jaccard_mean": float(np.mean(jac)),
        "n": len(samples),
        "correct": [bool(h) for h in hits],
        "jaccard": [float(j) for j in jac],
    }


def _summary(ev: dict) -> dict:
    return {k: ev[k] for k in ("accuracy", "jaccard_mean", "n")}


# --------------------------------------------------------------------------
# stages


def _read_corpus(d: Path) -> list[C.TaskSample]:
    return C.read_corpus(need(d, "corpus.jsonl"))


def _load(d: Path, name: str) -> M.ModelParams:
    return M.load_checkpoint(need(d, name))


def _lm_data(samples: Sequence[C.TaskSample]):
    return [s.tokens for s in samples], [[False] * len(s.instruction) + [True] * len(s.response) for s in samples]


def _model_config(cfg: ExperimentConfig, role: str, vocab_size: int, max_len: int) -> M.ModelConfig:
    spec = getattr(cfg, role)
    return M.ModelConfig(vocab_size, spec.d_model, spec.n_layers, max_len, role, spec.ff_mult)


def stage_generate(cfg: ExperimentConfig, seed: int, d: Path) -> dict:
    corpus = C.generate_corpus(cfg.corpus_config(seed))
    d.mkdir(parents=True, exist_ok=True)
    C.write_corpus(corpus, d / "corpus.jsonl")
    stats = C.corpus_stats(corpus)
    dump_json(stats, d / "corpus_stats.json")
    return stats


def _train(cfg: ExperimentConfig, seed: int, d: Path, role: str) -> dict:
    corpus = _read_corpus(d)
    vocab = cfg.corpus_config(seed).vocab
    mcfg = _model_config(cfg, role, vocab.size, C.max_len(corpus))
    if role == "student":
        M.check_capacity_gap(_model_config(cfg, "teacher", vocab.size, mcfg.max_seq_len), mcfg)
    spec = getattr(cfg, role)
    split = "teacher_train" if role == "teacher" else "student_train"
    data = _lm_data(C.by_split(corpus, split))
    runs = []
    for r in range(spec.restarts):
        params = M.init_params(mcfg, substream(seed, f"init-{role}") + r)
        losses = M.train_lm(params, *data, epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr,
                            seed=substream(seed, f"batch-{role}"))
        runs.append((params, losses))
    best = min(range(len(runs)), key=lambda r: runs[r][1][-1] if runs[r][1] else 0.0)
    params, losses = runs[best]
    M.save_checkpoint(params, d / f"{role}.json")
    doc = {"role": role, "train_split": split, "epoch_loss": losses, "restart": best,
           "restart_final_loss": [rl[-1] if rl else None for _, rl in runs]}
    dump_json(doc, d / f"{role}_train.json")
    return doc


def stage_train_teacher(cfg, seed, d):
    return _train(cfg, seed, d, "teacher")


def stage_train_student(cfg, seed, d):
    return _train(cfg, seed, d, "student")


def _units(cfg: ExperimentConfig, samples, vocab, split_mode: str | None = None, scope: str | None = None):
    return D.units_for(samples, split_mode or cfg.distill.split_mode, scope or cfg.detection.scope, vocab.step_delim)


def run_detection(cfg: ExperimentConfig, seed: int, corpus, teacher, student, *,
                  det: D.DetectionConfig | None = None, strategy: str | None = None,
                  split_mode: str | None = None) -> tuple[list[D.CounterfactualSample], dict]:
    """Detection on student_train; returns counterfactuals and the report document."""
    det = det or cfg.detection
    strategy = strategy or cfg.distill.strategy
    split_mode = split_mode or cfg.distill.split_mode
    vocab = cfg.corpus_config(seed).vocab
    train = C.by_split(corpus, "student_train")
    base_seed = substream(seed, "baselines")
    if strategy == "none":
        return [], {"strategy": "none", "tau": det.tau, "split_mode": split_mode, "n_counterfactuals": 0,
                    "report": None, "quality": None}
    cfs, report = D.build_counterfactual_dataset(teacher, student, train, det, vocab,
                                                 split_mode=split_mode, strategy=strategy, seed=base_seed)
    units = _units(cfg, train, vocab, split_mode, det.scope)
    cand = D.filter_instances(teacher, student, units, vocab.stop)
    quality = D.compare_strategies(teacher, student, cand, det, base_seed)
    doc = {
        "strategy": strategy,
        "tau": det.tau,
        "split_mode": split_mode,
        "n_counterfactuals": len(cfs),
        "report": report.to_json(),
        "quality": quality,
    }
    return cfs, doc


def stage_detect(cfg: ExperimentConfig, seed: int, d: Path) -> dict:
    corpus = _read_corpus(d)
    teacher, student = _load(d, "teacher.json"), _load(d, "student.json")
    _, doc = run_detection(cfg, seed, corpus, teacher, student)
    dump_json(doc, d / "detection.json")
    records = doc["report"]["records"] if doc["report"] else []
    write_csv(D.heatmap_rows(records), ("sample_id", "position", "token_id", "g_teacher", "g_student", "norm_delta"),
              d / "heatmap.csv")
    return doc


def stage_build_cf(cfg: ExperimentConfig, seed: int, d: Path) -> dict:
    corpus = _read_corpus(d)
    doc = json.loads(need(d, "detection.json").read_text())
    vocab = cfg.corpus_config(seed).vocab
    if doc["report"] is None:
        cfs = []
    else:
        units = _units(cfg, C.by_split(corpus, "student_train"), vocab, doc["split_mode"])
        cfs = D.counterfactuals_from_records(doc["report"]["records"], units)
    lines = "".join(json.dumps(c.to_json(), sort_keys=True) + "\n" for c in cfs)
    (d / "counterfactuals.jsonl").write_text(lines)
    stats = counterfactual_stats(cfs, C.by_split(corpus, "student_train"))
    dump_json(stats, d / "counterfactual_stats.json")
    return stats


def read_counterfactuals(path: Path) -> list[D.CounterfactualSample]:
    out = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        try:
            out.append(D.CounterfactualSample.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise C.CorpusFormatError(f"{path}:{i}: {e}") from e
    return out


def counterfactual_stats(cfs: Sequence[D.CounterfactualSample], originals: Sequence[C.TaskSample]) -> dict:
    def lens(xs):
        if not xs:
            return {"min": 0, "max": 0, "mean": 0.0, "count": 0}
        return {"min": int(min(xs)), "max": int(max(xs)), "mean": float(np.mean(xs)), "count": len(xs)}

    return {
        "original": lens([len(s.instruction) for s in originals]),
        "counterfactual": lens([len(c.pruned_input) for c in cfs]),
        "provenance": {p: sum(c.provenance == p for c in cfs) for p in ("gold", "teacher-generated")},
    }


def _eval_fn(corpus, stop):
    clean = C.by_split(corpus, "eval_clean")
    conf = C.by_split(corpus, "eval_confounded")

    def ev(p: M.ModelParams) -> dict:
        return {
            "eval_clean_acc": evaluate_split(p, clean, stop)["accuracy"],
            "eval_confounded_acc": evaluate_split(p, conf, stop)["accuracy"],
        }

    return ev


def distill_variant(cfg: ExperimentConfig, seed: int, corpus, teacher, student, cfs, *,
                    lam: float, track: bool = True) -> tuple[M.ModelParams, list[dict]]:
    dcfg = replace(cfg.distill, lam=lam, seed=substream(seed, "distill"),
                   include_student_wrong_originals=cfg.detection.include_student_wrong_originals)
    vocab = cfg.corpus_config(seed).vocab
    out, hist = K.train_distill(teacher, student, C.by_split(corpus, "student_train"), cfs, dcfg,
                                stop_token=vocab.stop, evaluate=_eval_fn(corpus, vocab.stop) if track else None)
    return out, [h.to_json() for h in hist]


def stage_distill(cfg: ExperimentConfig, seed: int, d: Path) -> dict:
    corpus = _read_corpus(d)
    teacher, student = _load(d, "teacher.json"), _load(d, "student.json")
    cfs = read_counterfactuals(need(d, "counterfactuals.jsonl"))
    result = {}
    for name, lam, c in (("kd", 1.0, []), ("leaf", cfg.distill.lam, cfs)):
        params, hist = distill_variant(cfg, seed, corpus, teacher, student, c, lam=lam)
        M.save_checkpoint(params, d / f"student_{name}.json")
        validate(hist, "history")
        dump_json(hist, d / f"history_{name}.json")
        result[name] = hist[-1] if hist else {}
    return result


def stage_evaluate(cfg: ExperimentConfig, seed: int, d: Path) -> dict:
    corpus = _read_corpus(d)
    stop = cfg.corpus_config(seed).vocab.stop
    variants = {"teacher": _load(d, "teacher.json"), "student": _load(d, "student.json")}
    for name in ("kd", "leaf"):
        variants[name] = _load(d, f"student_{name}.json")
    det = json.loads(need(d, "detection.json").read_text())
    clean = C.by_split(corpus, "eval_clean")
    conf = C.by_split(corpus, "eval_confounded")
    report = {"schema": "leaf-metrics/1", "seed": seed, "variants": {}}
    for name, p in variants.items():
        c, f = evaluate_split(p, clean, stop), evaluate_split(p, conf, stop)
        report["variants"][name] = {
            "eval_clean_acc": c["accuracy"],
            "eval_confounded_acc": f["accuracy"],
            "jaccard_clean_mean": c["jaccard_mean"],
            "jaccard_confounded_mean": f["jaccard_mean"],
        }
    report["detection"] = _detection_summary(det)
    validate(report, "metrics")
    dump_json(report, d / "metrics.json")
    return report


def _detection_summary(det: dict) -> dict:
    rep = det["report"]
    return {
        "strategy": det["strategy"],
        "tau": det["tau"],
        "n_counterfactuals": det["n_counterfactuals"],
        "n_candidates": rep["n_candidates"] if rep else 0,
        "precision": rep["precision"] if rep else 0.0,
        "recall": rep["recall"] if rep else 0.0,
        "baselines": {k: {"precision": v["precision"], "recall": v["recall"]}
                      for k, v in (det["quality"] or {}).items()},
    }


def pilot_prune_eval(cfg: ExperimentConfig, seed: int, corpus, teacher, student,
                     det: D.DetectionConfig | None = None) -> dict:
    """Student accuracy on eval_confounded before and after deleting flagged spans.

    Every eval_confounded input gets the detector (no instance filter, since
    the filter would need the gold answer); all flagged spans in the
    instruction are pruned together.
    """
    det = det or cfg.detection
    stop = cfg.corpus_config(seed).vocab.stop
    conf = C.by_split(corpus, "eval_confounded")
    pruned, n_flagged, n_hit, n_planted = [], 0, 0, 0
    for s in conf:
        unit = D.whole_unit(s)
        rec = D.compute_attribution(teacher, student, unit, "instruct", det.reduction)
        flags = D.flag_confounders(rec, det.tau)
        spans = [sp for sp in D.context_spans(unit, rec, flags, det.min_span_len) if sp.scope == "instruction"]
        pruned.append(D.prune_unit(unit, spans))
        truth = unit.planted_mask(rec.positions)
        n_flagged += int(flags.sum())
        n_planted += int(truth.sum())
        n_hit += int((flags & truth).sum())
    before = evaluate_split(student, conf, stop)
    after = evaluate_split(student, conf, stop, pruned)
    return {
        "schema": "leaf-pilot/1",
        "seed": seed,
        "tau": det.tau,
        "n": len(conf),
        "acc_before": before["accuracy"],
        "acc_after": after["accuracy"],
        "delta": after["accuracy"] - before["accuracy"],
        "jaccard_before_mean": before["jaccard_mean"],
        "jaccard_after_mean": after["jaccard_mean"],
        "jaccard_shift": after["jaccard_mean"] - before["jaccard_mean"],
        "fixed": sum(b < a for b, a in zip(before["correct"], after["correct"])),
        "broken": sum(b > a for b, a in zip(before["correct"], after["correct"])),
        "precision": n_hit / n_flagged if n_flagged else 0.0,
        "recall": n_hit / n_planted if n_planted else 0.0,
    }


def stage_pilot(cfg: ExperimentConfig, seed: int, d: Path) -> dict:
    corpus = _read_corpus(d)
    teacher, student = _load(d, "teacher.json"), _load(d, "student.json")
    doc = pilot_prune_eval(cfg, seed, corpus, teacher, student)
    validate(doc, "pilot")
    dump_json(doc, d / "pilot.json")
    return doc


def sweep_cell(cfg: ExperimentConfig, seed: int, axis: str, value, corpus, teacher, student) -> dict:
    """One (value, seed) cell: detection with the varied setting, then distillation."""
    det, strategy, split, lam = cfg.detection, cfg.distill.strategy, cfg.distill.split_mode, cfg.distill.lam
    if axis == "tau":
        det = replace(det, tau=float(value))
    elif axis == "lambda":
        lam = float(value)
    elif axis == "strategy":
        strategy = str(value)
    elif axis == "splitting":
        # splitting only changes anything once response prefixes are in scope
        det = replace(det, scope="instruct+response")
        split = str(value)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    sub = replace(cfg, detection=det, distill=replace(cfg.distill, strategy=strategy, split_mode=split, lam=lam))
    cfs, doc = run_detection(sub, seed, corpus, teacher, student)
    params, _ = distill_variant(sub, seed, corpus, teacher, student, cfs, lam=lam, track=False)
    ev = _eval_fn(corpus, cfg.corpus_config(seed).vocab.stop)(params)
    rep = doc["report"]
    return {
        "axis": axis,
        "value": str(value),
        "seed": str(seed),
        **ev,
        "n_counterfactuals": len(cfs),
        "precision": rep["precision"] if rep else 0.0,
        "recall": rep["recall"] if rep else 0.0,
    }


def summarise_sweep(rows: Sequence[dict]) -> list[dict]:
    """Mean of every metric per swept value, in first-seen value order."""
    order: list[str] = []
    groups: dict[str, list[dict]] = {}
    for r in rows:
        if r["value"] not in groups:
            order.append(r["value"])
        groups.setdefault(r["value"], []).append(r)
    out = []
    for v in order:
        g = groups[v]
        row = {"axis": g[0]["axis"], "value": v, "seed": "mean"}
        for k in SWEEP_COLUMNS[3:]:
            row[k] = float(np.mean([r[k] for r in g]))
        out.append(row)
    return out


def stage_sweep(cfg: ExperimentConfig, seeds: Sequence[int], out: Path, axis: str,
                values: Sequence | None = None) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(DEFAULT_GRIDS[axis] if values is None else values)
    rows = []
    for seed in seeds:
        d = run_dir(out, seed)
        corpus = _read_corpus(d)
        teacher, student = _load(d, "teacher.json"), _load(d, "student.json")
        for v in values:
            rows.append(sweep_cell(cfg, seed, axis, v, corpus, teacher, student))
    rows.sort(key=lambda r: (values.index(_parse_value(axis, r["value"])), int(r["seed"])))
    write_csv([[r[k] for k in SWEEP_COLUMNS] for r in rows], SWEEP_COLUMNS, out / f"sweep_{axis}.csv")
    summary = summarise_sweep(rows)
    write_csv([[r[k] for k in SWEEP_COLUMNS] for r in summary], SWEEP_COLUMNS, out / f"sweep_{axis}_summary.csv")
    return rows


def _parse_value(axis: str, text: str):
    return float(text) if axis in ("tau", "lambda") else text


def parse_values(axis: str, text: str | None) -> list | None:
    if text is None:
        return None
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if axis in ("tau", "lambda"):
        return [float(v) for v in vals]
    allowed = D.STRATEGIES if axis == "strategy" else D.SPLIT_MODES
    for v in vals:
        if v not in allowed:
            raise ValueError(f"{v!r} is not a valid {axis} value; choose from {allowed}")
    return vals


STAGES = {
    "generate": stage_generate,
    "train-teacher": stage_train_teacher,
    "train-student": stage_train_student,
    "detect": stage_detect,
    "build-cf": stage_build_cf,
    "distill": stage_distill,
    "evaluate": stage_evaluate,
    "pilot-prune-eval": stage_pilot,
}
PIPELINE = ("generate", "train-teacher", "train-student", "detect", "build-cf", "distill", "evaluate",
            "pilot-prune-eval")


def run_stage(name: str, cfg: ExperimentConfig, seed: int, out: str | Path) -> dict:
    d = run_dir(out, seed)
    t0 = time.perf_counter()
    result = STAGES[name](cfg, seed, d)
    # wall-clock time lives apart from the metrics so those stay byte-stable
    timing_path = d / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    timing[name] = time.perf_counter() - t0
    dump_json(timing, timing_path)
    return result


def run_pipeline(cfg: ExperimentConfig, seed: int, out: str | Path) -> dict:
    for name in PIPELINE:
        run_stage(name, cfg, seed, out)
    return json.loads((run_dir(out, seed) / "metrics.json").read_text())
