"""Denoisers ``p_{1|t}(x_1 | x_t, c)``.

A denoiser is any object with a ``layout`` attribute and an
``evaluate(state, ctx)`` method returning posterior rows of shape
``state.tokens.shape + (v,)``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.special import softmax

from .dfm import LOG_FLOOR, PathState, Scheduler, corrupt, posterior_nll
from .errors import DomainError, TrainingDivergedError
from .laws import JointLaw, ProductLaw
from .tokens import ConditioningContext, GenerativeTarget, StreamLayout

SCHEMA_VERSION = 1


class Denoiser(Protocol):
    layout: StreamLayout

    def evaluate(self, state: PathState, ctx: ConditioningContext) -> np.ndarray: ...


class UniformDenoiser:
    def __init__(self, layout: StreamLayout):
        self.layout = layout

    def evaluate(self, state, ctx):
        return np.full(state.tokens.shape + (self.layout.v,), 1.0 / self.layout.v)


class CountingDenoiser:
    """Wraps a denoiser and counts ``evaluate`` calls."""

    def __init__(self, inner):
        self.inner = inner
        self.layout = inner.layout
        self.calls = 0

    def evaluate(self, state, ctx):
        self.calls += 1
        return self.inner.evaluate(state, ctx)


def exact_posterior(law, x_t: np.ndarray, t: float) -> np.ndarray:
    """Per-position marginals of the Bayes posterior of ``x_1`` under ``law`` given ``x_t``.

    Raises ``InconsistentEvidenceError`` when no support sequence matches ``x_t``.
    """
    return law.posterior(x_t, t)


class ExactPosteriorDenoiser:
    """Bayes-optimal denoiser for a known target law per context.

    Euler sampling unmasks positions of one step independently, so a
    trajectory can leave the support of a correlated law.  Unless ``strict``
    is set, such states read the prior marginals instead of raising.
    """

    def __init__(self, layout: StreamLayout, law_for: Callable[[ConditioningContext], object], strict: bool = False):
        self.layout = layout
        self.strict = strict
        self._law_for = law_for
        self._cache: dict = {}

    @classmethod
    def fixed(cls, law, strict: bool = False) -> "ExactPosteriorDenoiser":
        return cls(law.layout, lambda ctx: law, strict)

    @classmethod
    def for_toy(cls, cfg) -> "ExactPosteriorDenoiser":
        from .toyworld import true_conditional

        return cls(cfg.layout, lambda ctx: true_conditional(cfg, ctx))

    @classmethod
    def from_pairs(cls, layout: StreamLayout, pairs: Sequence[tuple[GenerativeTarget, ConditioningContext]]):
        """Empirical law per context from ``(target, context)`` pairs."""
        grouped: dict = {}
        for target, ctx in pairs:
            grouped.setdefault(ctx.key(), []).append(target.tokens)
        laws = {k: JointLaw.from_sequences(layout, seqs) for k, seqs in grouped.items()}

        def law_for(ctx):
            try:
                return laws[ctx.key()]
            except KeyError:
                raise DomainError("context not present in the corpus") from None

        return cls(layout, law_for)

    def law(self, ctx: ConditioningContext):
        key = ctx.key()
        if key not in self._cache:
            self._cache[key] = self._law_for(ctx)
        return self._cache[key]

    def evaluate(self, state: PathState, ctx: ConditioningContext) -> np.ndarray:
        law = self.law(ctx)
        if self.strict:
            return exact_posterior(law, state.tokens, state.time)
        return law.posterior(state.tokens, state.time, fallback=True)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    return softmax(logits, axis=-1)


class TabularDenoiser:
    """Lookup-table denoiser with a softmax over each selected logits row.

    A position's key is ``(stream, position bucket, current symbol, left
    symbol, right symbol, time bucket, speaker, prosody cue, content)``.  The
    cue and content symbols come from stream 0 of their channels; ``-1``
    stands for anything absent or off the end of the sequence.  Unseen keys
    read a shared default row.

    With ``carry_over`` (the default) a revealed position's row is the delta
    on its current symbol and only masked positions read the table.
    """

    def __init__(
        self,
        layout: StreamLayout,
        time_buckets: int = 8,
        max_position_buckets: int = 16,
        default_row: Optional[np.ndarray] = None,
        carry_over: bool = True,
    ):
        if time_buckets < 1 or max_position_buckets < 1:
            raise DomainError("bucket counts must be >= 1")
        self.layout = layout
        self.time_buckets = time_buckets
        self.max_position_buckets = max_position_buckets
        self.default_row = np.zeros(layout.v) if default_row is None else np.asarray(default_row, dtype=np.float64)
        self.carry_over = carry_over
        self.rows: dict[tuple, np.ndarray] = {}

    @property
    def key_width(self) -> int:
        return 9

    def time_bucket(self, t: float) -> int:
        return min(int(t * self.time_buckets), self.time_buckets - 1)

    def _cue_columns(self, ctx: ConditioningContext, L: int) -> tuple[np.ndarray, np.ndarray]:
        lay = self.layout
        if ctx.prosody_prior is not None:
            prior = ctx.prosody_prior
        elif ctx.reference is not None:
            modal = [np.bincount(row, minlength=lay.v + 1).argmax() for row in ctx.reference.prosody]
            prior = np.repeat(np.array(modal, dtype=np.int64)[:, None], L, axis=1)
        else:
            prior = np.full((lay.m, L), -1, dtype=np.int64)
        content = ctx.content_channel if ctx.has_content else np.full((lay.n, L), -1, dtype=np.int64)
        return prior, content

    def keys(self, state: PathState, ctx: ConditioningContext) -> np.ndarray:
        """Integer key array of shape ``state.tokens.shape + (key_width,)``."""
        x = state.tokens
        P, L = x.shape[-2:]
        if L != ctx.target_length:
            raise DomainError(f"state length {L} != context target length {ctx.target_length}")
        pad = np.full(x.shape[:-1] + (1,), -1, dtype=np.int64)
        left = np.concatenate([pad, x[..., :-1]], axis=-1)
        right = np.concatenate([x[..., 1:], pad], axis=-1)
        n_pos = min(L, self.max_position_buckets)
        prior, content = self._cue_columns(ctx, L)
        fixed = [
            np.arange(P)[:, None] * np.ones((1, L), dtype=np.int64),
            (np.arange(L) * n_pos // max(L, 1))[None, :] * np.ones((P, 1), dtype=np.int64),
        ]
        shape = x.shape
        parts = [np.broadcast_to(f, shape) for f in fixed]
        parts += [x, left, right]
        parts.append(np.full(shape, self.time_bucket(state.time), dtype=np.int64))
        parts.append(np.full(shape, ctx.speaker, dtype=np.int64))
        parts.append(np.broadcast_to(prior[0][None, :], shape))
        parts.append(np.broadcast_to(content[0][None, :], shape))
        return np.stack(parts, axis=-1)

    def _logits_for(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat = keys.reshape(-1, keys.shape[-1])
        uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        table = np.stack([self.rows.get(tuple(k), self.default_row) for k in uniq.tolist()]) if len(uniq) else np.zeros((0, self.layout.v))
        return uniq, inverse, table

    def _carry(self, state: PathState, probs: np.ndarray) -> np.ndarray:
        if not self.carry_over:
            return probs
        revealed = ~state.masked
        if revealed.any():
            probs = probs.copy()
            probs[revealed] = np.eye(self.layout.v)[state.tokens[revealed]]
        return probs

    def evaluate(self, state: PathState, ctx: ConditioningContext) -> np.ndarray:
        keys = self.keys(state, ctx)
        _, inverse, table = self._logits_for(keys)
        probs = _softmax_rows(table)[inverse].reshape(state.tokens.shape + (self.layout.v,))
        return self._carry(state, probs)

    def loss_and_grad(self, x1: GenerativeTarget, state: PathState, ctx) -> tuple[float, dict[tuple, np.ndarray]]:
        """Summed cross-entropy over all positions and its gradient w.r.t. every touched logits row."""
        if self.carry_over:
            # revealed positions are deltas on their (correct) symbol: zero loss, no gradient
            active = state.masked.reshape(-1)
        else:
            active = np.ones(state.tokens.size, dtype=bool)
        keys = self.keys(state, ctx).reshape(-1, self.key_width)[active]
        uniq, inverse, table = self._logits_for(keys)
        probs = _softmax_rows(table)[inverse]
        target = x1.tokens.reshape(-1)[active]
        nll = posterior_nll(probs, target)
        picked = probs[np.arange(target.size), target]
        g = probs.copy()
        g[np.arange(target.size), target] -= 1.0
        # the log floor makes the loss flat in the clamped region
        g[picked < LOG_FLOOR] = 0.0
        grad = np.zeros_like(table)
        np.add.at(grad, inverse, g)
        return float(nll.sum()), {tuple(k): grad[i] for i, k in enumerate(uniq.tolist())}

    def apply_gradient(self, grads: dict[tuple, np.ndarray], lr: float):
        if lr == 0:
            return  # keep unseen keys on the shared default row
        for key, g in grads.items():
            row = self.rows.get(key)
            if row is None:
                row = self.default_row.copy()
            self.rows[key] = row - lr * g

    def copy(self) -> "TabularDenoiser":
        other = TabularDenoiser(
            self.layout, self.time_buckets, self.max_position_buckets, self.default_row.copy(), self.carry_over
        )
        other.rows = {k: r.copy() for k, r in self.rows.items()}
        return other

    def same_parameters(self, other: "TabularDenoiser") -> bool:
        return (
            self.layout == other.layout
            and self.time_buckets == other.time_buckets
            and self.max_position_buckets == other.max_position_buckets
            and self.carry_over == other.carry_over
            and np.array_equal(self.default_row, other.default_row)
            and self.rows.keys() == other.rows.keys()
            and all(np.array_equal(r, other.rows[k]) for k, r in self.rows.items())
        )

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "layout": self.layout.to_json(),
            "time_buckets": self.time_buckets,
            "max_position_buckets": self.max_position_buckets,
            "carry_over": self.carry_over,
            "default_row": self.default_row.tolist(),
            "rows": [{"key": list(k), "logits": r.tolist()} for k, r in self.rows.items()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TabularDenoiser":
        if not isinstance(obj, dict):
            raise ValueError(f"denoiser JSON must be an object, got {type(obj).__name__}")
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported denoiser schema_version {obj.get('schema_version')!r}")
        d = cls(
            StreamLayout.from_json(obj["layout"]),
            int(obj["time_buckets"]),
            int(obj["max_position_buckets"]),
            obj["default_row"],
            bool(obj.get("carry_over", True)),
        )
        for entry in obj["rows"]:
            row = np.asarray(entry["logits"], dtype=np.float64)
            if row.shape != (d.layout.v,):
                raise ValueError(f"logits row has shape {row.shape}, expected ({d.layout.v},)")
            d.rows[tuple(int(x) for x in entry["key"])] = row
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TabularDenoiser":
        return cls.from_json(json.loads(Path(path).read_text()))


def tabular_train(
    d: TabularDenoiser,
    examples: Sequence[tuple[GenerativeTarget, ConditioningContext]],
    steps: int,
    lr: float,
    sched: Scheduler,
    rng: np.random.Generator,
) -> tuple[TabularDenoiser, list[float]]:
    """Plain SGD on the per-example DFM loss; mutates and returns ``d`` plus the loss trace.

    Each step picks an example, draws ``t ~ U[0, 1]``, corrupts along the
    mixture path and steps every touched row by ``-lr * (p - onehot)``.
    """
    if steps < 0:
        raise DomainError(f"steps must be >= 0, got {steps}")
    if not lr >= 0:
        raise DomainError(f"learning rate must be >= 0, got {lr}")
    if not examples:
        raise DomainError("no training examples")
    trace: list[float] = []
    for step in range(steps):
        x1, ctx = examples[int(rng.integers(len(examples)))]
        t = float(rng.uniform(0.0, 1.0))
        state = corrupt(x1, t, sched, rng)
        loss, grads = d.loss_and_grad(x1, state, ctx)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(step, loss, f"t={t:.4f}, speaker={ctx.speaker}")
        d.apply_gradient(grads, lr)
        trace.append(loss)
    return d, trace


def mean_eval_loss(denoiser, examples, sched: Scheduler, seed: int, repeats: int = 1) -> float:
    """Mean DFM loss over a fixed evaluation batch; the seed fixes every ``t`` and mask draw."""
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(repeats):
        for x1, ctx in examples:
            t = float(rng.uniform(0.0, 1.0))
            state = corrupt(x1, t, sched, rng)
            p = denoiser.evaluate(state, ctx)
            losses.append(float(posterior_nll(p, x1.tokens).sum()))
    return float(np.mean(losses))


def masked_accuracy(denoiser, examples, sched: Scheduler, seed: int) -> float:
    """Fraction of masked positions whose argmax prediction equals the clean symbol."""
    rng = np.random.default_rng(seed)
    hits = total = 0
    for x1, ctx in examples:
        t = float(rng.uniform(0.0, 1.0))
        state = corrupt(x1, t, sched, rng)
        masked = state.masked
        if not masked.any():
            continue
        pred = denoiser.evaluate(state, ctx).argmax(axis=-1)
        hits += int(np.count_nonzero((pred == x1.tokens) & masked))
        total += int(np.count_nonzero(masked))
    return hits / total if total else 0.0
