"""Desk-scale experiments: NFE sweep and two-stage pretrain -> adapt transfer.

Metrics are toy analogs computed against the exact toy law:

* ``token_accuracy``: fraction of sampled tokens equal to the law's modal symbol
* ``tv_distance``: positionwise total variation between empirical and exact marginals
* ``mean_nll``: mean negative log-likelihood of sampled sequences under the law
* ``walltime_ms``: recorded only when timing is switched on, so reports stay
  byte-identical across runs by default

RNG streams: context ``j`` of a sweep samples from
``SeedSequence([seed, j])`` at every NFE setting (common random numbers), so
rows differ only through the number of steps.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import jsonschema
import numpy as np

from .denoiser import ExactPosteriorDenoiser, TabularDenoiser, UniformDenoiser, masked_accuracy, mean_eval_loss, tabular_train
from .dfm import LOG_FLOOR, Scheduler, sample_batch
from .errors import DomainError, TrainingDivergedError
from .toyworld import ToyConfig, ToyCorpus, context_of, gen_corpus, split_pairs, split_samples, true_conditional

DEFAULT_NFE_LIST = (1, 2, 4, 8, 16, 32, 64, 128)
CSV_FIELDS = ("nfe", "walltime_ms", "token_accuracy", "tv_distance", "mean_nll")
METRICS = ("token_accuracy", "tv_distance", "mean_nll")


def compute_tv(samples, law) -> float:
    """Mean over positions of ``0.5 * sum |empirical - exact|`` for the per-position marginals."""
    samples = np.asarray(samples)
    exact = law.marginals()
    v = exact.shape[-1]
    if samples.shape[0] == 0:
        raise DomainError("no samples")
    counts = np.zeros(exact.shape)
    for sym in range(v):
        counts[..., sym] = np.count_nonzero(samples == sym, axis=0)
    empirical = counts / samples.shape[0]
    tv = 0.5 * np.abs(empirical - exact).sum(axis=-1)
    return float(tv.mean()) if tv.size else 0.0


def positionwise_tv(samples, law) -> np.ndarray:
    samples = np.asarray(samples)
    exact = law.marginals()
    empirical = np.stack([np.mean(samples == s, axis=0) for s in range(exact.shape[-1])], axis=-1)
    return 0.5 * np.abs(empirical - exact).sum(axis=-1)


def joint_tv(samples, law) -> float:
    """Total variation between the empirical joint distribution of whole sequences and a ``JointLaw``."""
    samples = np.asarray(samples)
    flat = samples.reshape(samples.shape[0], -1)
    uniq, counts = np.unique(flat, axis=0, return_counts=True)
    emp = dict(zip(map(bytes, uniq.astype(np.int64)), counts / samples.shape[0]))
    exact = dict(zip(map(bytes, law.support.reshape(len(law.probs), -1).astype(np.int64)), law.probs))
    keys = set(emp) | set(exact)
    return 0.5 * sum(abs(emp.get(k, 0.0) - exact.get(k, 0.0)) for k in keys)


def sequence_nll(samples, law) -> np.ndarray:
    """Per-sequence NLL under a product law, each position floored like the training loss."""
    table = law.marginals()
    samples = np.asarray(samples)
    picked = np.take_along_axis(np.broadcast_to(table, samples.shape + (table.shape[-1],)), samples[..., None], -1)[..., 0]
    return -np.log(np.maximum(picked, LOG_FLOOR)).sum(axis=(-2, -1))


@dataclass(frozen=True)
class SweepConfig:
    nfe_list: tuple[int, ...] = DEFAULT_NFE_LIST
    samples: int = 500
    contexts: int = 2
    metrics: tuple[str, ...] = METRICS
    seed: int = 0
    holdout: float = 0.2
    chunk: int = 1000
    timing: bool = False

    def __post_init__(self):
        nfe = tuple(int(n) for n in self.nfe_list)
        if not nfe:
            raise DomainError("nfe list is empty")
        if min(nfe) < 1:
            raise DomainError(f"nfe values must be >= 1, got {nfe}")
        if any(b <= a for a, b in zip(nfe, nfe[1:])):
            raise DomainError(f"nfe values must be strictly increasing, got {nfe}")
        object.__setattr__(self, "nfe_list", nfe)
        if self.samples < 1 or self.contexts < 1 or self.chunk < 1:
            raise DomainError("samples, contexts and chunk must be >= 1")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise DomainError(f"unknown metrics {sorted(unknown)}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["nfe_list"] = list(self.nfe_list)
        d["metrics"] = list(self.metrics)
        return d


@dataclass
class SweepReport:
    config: SweepConfig
    rows: list[dict]
    contexts: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "kind": "nfe_sweep",
            "note": "toy analogs of quality-vs-NFE metrics; not comparable to speech metrics",
            "config": self.config.to_json(),
            "contexts": self.contexts,
            "rows": self.rows,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in self.rows:
            w.writerow(["" if row.get(k) is None else row.get(k) for k in CSV_FIELDS])
        return buf.getvalue()


def heldout_contexts(corpus: ToyCorpus, holdout: float, seed: int, limit: int) -> list[int]:
    _, held = split_pairs(corpus, holdout, seed)
    if not held:
        held = list(range(len(corpus)))
    return held[:limit]


def _context_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, j]))


def _sample_chunked(denoiser, ctx, L, nfe, sched, rng, count, chunk) -> np.ndarray:
    parts = []
    left = count
    while left > 0:
        n = min(chunk, left)
        parts.append(sample_batch(denoiser, ctx, L, nfe, sched, rng, count=n))
        left -= n
    return np.concatenate(parts)


def _sweep_row(cfg: SweepConfig, denoiser, corpus: ToyCorpus, indices, nfe: int, sched: Scheduler) -> dict:
    started = time.perf_counter()
    acc, tv, nll = [], [], []
    flagged = False
    for j in indices:
        s = corpus[j]
        ctx = context_of(s, "dub")
        law = true_conditional(corpus.config, ctx)
        draws = _sample_chunked(denoiser, ctx, s.length, nfe, sched, _context_rng(cfg.seed, j), cfg.samples, cfg.chunk)
        modal = law.marginals().argmax(axis=-1)
        acc.append(float(np.mean(draws == modal)))
        tv.append(compute_tv(draws, law))
        nll.append(float(np.mean(sequence_nll(draws, law))))
    elapsed = (time.perf_counter() - started) * 1000.0
    row = {"nfe": nfe, "walltime_ms": round(elapsed, 3) if cfg.timing else None}
    values = {"token_accuracy": float(np.mean(acc)), "tv_distance": float(np.mean(tv)), "mean_nll": float(np.mean(nll))}
    for name in METRICS:
        x = values[name] if name in cfg.metrics else None
        if x is not None and not np.isfinite(x):
            flagged = True
        row[name] = x
    row["flagged"] = flagged
    return row


def run_nfe_sweep(cfg: SweepConfig, denoiser, corpus: ToyCorpus, sched: Scheduler = Scheduler(), threads: int = 1) -> SweepReport:
    """Sample held-out dubbing contexts at every NFE setting and score against the exact law."""
    if threads < 1:
        raise DomainError(f"threads must be >= 1, got {threads}")
    indices = heldout_contexts(corpus, cfg.holdout, cfg.seed, cfg.contexts)
    if threads == 1:
        rows = [_sweep_row(cfg, denoiser, corpus, indices, nfe, sched) for nfe in cfg.nfe_list]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda n: _sweep_row(cfg, denoiser, corpus, indices, n, sched), cfg.nfe_list))
    rows.sort(key=lambda r: r["nfe"])
    return SweepReport(cfg, rows, list(indices))


@dataclass(frozen=True)
class TwoStageConfig:
    toy: ToyConfig = field(default_factory=ToyConfig)
    corpus_size: int = 60
    pretrain_steps: int = 1000
    adapt_steps: int = 1000
    lr: float = 0.5
    holdout: float = 0.2
    eval_repeats: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.pretrain_steps < 1:
            raise DomainError(f"pretrain_steps must be >= 1, got {self.pretrain_steps}")
        if self.adapt_steps < 0:
            raise DomainError(f"adapt_steps must be >= 0, got {self.adapt_steps}")
        if not self.lr >= 0:
            raise DomainError(f"lr must be >= 0, got {self.lr}")
        if self.corpus_size < 2:
            raise DomainError("corpus_size must be >= 2")

    def to_json(self) -> dict:
        d = asdict(self)
        d["toy"] = self.toy.to_json()
        return d


_ARM_SCHEMA = {
    "type": "object",
    "required": ["steps", "final_loss", "token_accuracy", "diverged", "final_digest", "trace_first", "trace_last"],
    "properties": {
        "steps": {"type": "object"},
        "final_loss": {"type": ["number", "null"]},
        "token_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "diverged": {"type": "boolean"},
        "error": {"type": "string"},
        "final_digest": {"type": ["string", "null"]},
        "pretrain_digest": {"type": ["string", "null"]},
        "trace_first": {"type": ["number", "null"]},
        "trace_last": {"type": ["number", "null"]},
    },
}

TWO_STAGE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["kind", "schema_version", "config", "eval", "arms"],
    "properties": {
        "kind": {"const": "two_stage"},
        "schema_version": {"const": 1},
        "config": {"type": "object"},
        "eval": {
            "type": "object",
            "required": ["examples", "uniform_loss", "oracle_loss"],
            "properties": {
                "examples": {"type": "integer", "minimum": 1},
                "uniform_loss": {"type": "number"},
                "oracle_loss": {"type": "number"},
            },
        },
        "arms": {
            "type": "object",
            "required": ["pretrain_adapt", "scratch"],
            "properties": {"pretrain_adapt": _ARM_SCHEMA, "scratch": _ARM_SCHEMA},
        },
    },
}


def validate_two_stage_report(report: dict):
    jsonschema.validate(report, TWO_STAGE_SCHEMA)


def state_digest(d: TabularDenoiser) -> str:
    return hashlib.sha256(json.dumps(d.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass
class TwoStageResult:
    report: dict
    pretrained: Optional[TabularDenoiser]
    adapted: Optional[TabularDenoiser]
    scratch: Optional[TabularDenoiser]


def _run_stages(stages, layout, lr, sched):
    """Train one denoiser through ``stages`` of ``(name, examples, steps, rng)``; stops at divergence."""
    d = TabularDenoiser(layout)
    trace: list[float] = []
    snapshots = {}
    error = None
    for name, examples, steps, rng in stages:
        try:
            _, part = tabular_train(d, examples, steps, lr, sched, rng)
        except TrainingDivergedError as exc:
            error = f"{name}: {exc}"
            break
        trace += part
        snapshots[name] = d.copy()
    return d, trace, snapshots, error


def _arm_summary(d, trace, error, steps, eval_examples, sched, eval_seed, repeats, pretrain=None) -> dict:
    arm = {
        "steps": steps,
        "diverged": error is not None,
        "trace_first": trace[0] if trace else None,
        "trace_last": trace[-1] if trace else None,
    }
    if error is None:
        arm["final_loss"] = mean_eval_loss(d, eval_examples, sched, eval_seed, repeats)
        arm["token_accuracy"] = masked_accuracy(d, eval_examples, sched, eval_seed)
        arm["final_digest"] = state_digest(d)
    else:
        arm.update(final_loss=None, token_accuracy=None, final_digest=None, error=error)
    if pretrain is not None:
        arm["pretrain_digest"] = state_digest(pretrain)
    return arm


def run_two_stage(cfg: TwoStageConfig, sched: Scheduler = Scheduler()) -> TwoStageResult:
    """Arm A pretrains on TTS contexts then adapts on dubbing contexts; arm B trains on dubbing only
    for the same total number of steps.  Both are scored on held-out dubbing contexts."""
    root = np.random.SeedSequence(cfg.seed)
    corpus_ss, a1, a2, b1, eval_ss = root.spawn(5)
    corpus = gen_corpus(cfg.toy, cfg.corpus_size, np.random.default_rng(corpus_ss))
    # a lookup table cannot score unseen (speaker, expression) pairs, so hold out samples instead
    train_idx, held_idx = split_samples(corpus, cfg.holdout, cfg.seed)
    tts_examples = []
    for i in train_idx:
        try:
            ctx = context_of(corpus[i], "tts", corpus)
        except DomainError:
            continue
        tts_examples.append((corpus[i].target(), ctx))
    dub_examples = [(corpus[i].target(), context_of(corpus[i], "dub")) for i in train_idx]
    eval_examples = [(corpus[i].target(), context_of(corpus[i], "dub")) for i in held_idx]
    if not tts_examples or not dub_examples:
        raise DomainError("corpus too small: no usable training contexts")
    eval_seed = int(eval_ss.generate_state(1)[0])
    lay = cfg.toy.layout

    a_stages = [
        ("pretrain", tts_examples, cfg.pretrain_steps, np.random.default_rng(a1)),
        ("adapt", dub_examples, cfg.adapt_steps, np.random.default_rng(a2)),
    ]
    adapted, trace_a, snaps_a, err_a = _run_stages(a_stages, lay, cfg.lr, sched)
    b_steps = cfg.pretrain_steps + cfg.adapt_steps
    scratch, trace_b, _, err_b = _run_stages([("scratch", dub_examples, b_steps, np.random.default_rng(b1))], lay, cfg.lr, sched)

    repeats = cfg.eval_repeats
    oracle = ExactPosteriorDenoiser.for_toy(cfg.toy)
    report = {
        "kind": "two_stage",
        "schema_version": 1,
        "config": cfg.to_json(),
        "eval": {
            "examples": len(eval_examples),
            "uniform_loss": mean_eval_loss(UniformDenoiser(lay), eval_examples, sched, eval_seed, repeats),
            "oracle_loss": mean_eval_loss(oracle, eval_examples, sched, eval_seed, repeats),
        },
        "arms": {
            "pretrain_adapt": _arm_summary(
                adapted, trace_a, err_a, {"pretrain": cfg.pretrain_steps, "adapt": cfg.adapt_steps},
                eval_examples, sched, eval_seed, repeats, pretrain=snaps_a.get("pretrain"),
            ),
            "scratch": _arm_summary(scratch, trace_b, err_b, {"scratch": b_steps}, eval_examples, sched, eval_seed, repeats),
        },
    }
    validate_two_stage_report(report)
    return TwoStageResult(report, snaps_a.get("pretrain"), adapted if err_a is None else None, scratch if err_b is None else None)
