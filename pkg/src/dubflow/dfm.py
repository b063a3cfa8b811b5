"""Discrete flow matching with a mask source: scheduler, mixture path, sampler, loss.

The sampler uses mask-path kinetics: over a step ``t -> t+h`` each masked
position unmasks with probability ``(k(t+h) - k(t)) / (1 - k(t))`` and takes
a symbol drawn from the denoiser's posterior row.  Revealed positions are
never re-masked.

Symbol draws use one uniform per position, fixed at the start of a
trajectory and consumed when that position unmasks (inverse-CDF).  This is
an exact sampler for any posterior and couples trajectories that share a
seed across different NFE settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DenoiserOutputError, DomainError, ShapeError, SingularityError
from .tokens import ConditioningContext, GenerativeTarget, StreamLayout

LOG_FLOOR = 1e-12
ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Scheduler:
    family: str = "quadratic"

    def __post_init__(self):
        if self.family not in ("quadratic", "linear"):
            raise DomainError(f"unknown scheduler family {self.family!r}")

    def kappa(self, t):
        _check_time(t)
        return t * t if self.family == "quadratic" else t

    def kappa_dot(self, t):
        _check_time(t)
        if self.family == "quadratic":
            return 2.0 * t
        return np.ones_like(t) if isinstance(t, np.ndarray) else 1.0


def _check_time(t):
    if np.any(np.asarray(t) < 0.0) or np.any(np.asarray(t) > 1.0) or np.any(np.isnan(t)):
        raise DomainError(f"time must lie in [0, 1], got {t!r}")


def kappa(sched: Scheduler, t: float) -> float:
    return sched.kappa(t)


@dataclass(frozen=True, eq=False)
class PathState:
    """A point on the probability path.

    ``tokens`` has shape ``(..., m+k, L)``; leading axes index independent
    sequences that share the same time.
    """

    layout: StreamLayout
    time: float
    tokens: np.ndarray

    def __post_init__(self):
        _check_time(self.time)
        toks = np.asarray(self.tokens, dtype=np.int64)
        if toks.ndim < 2 or toks.shape[-2] != self.layout.generative_streams:
            raise ShapeError(f"state grid must be (..., {self.layout.generative_streams}, L), got {toks.shape}")
        object.__setattr__(self, "tokens", toks)

    @property
    def masked(self) -> np.ndarray:
        return self.tokens == self.layout.mask_symbol

    def as_target(self) -> GenerativeTarget:
        if self.tokens.ndim != 2:
            raise ShapeError("as_target needs a single (unbatched) state")
        return GenerativeTarget(self.layout, self.tokens)


def corrupt(x1: GenerativeTarget, t: float, sched: Scheduler, rng: np.random.Generator) -> PathState:
    """Sample ``x_t`` from the mixture path: keep each symbol w.p. k(t), else mask."""
    lay = x1.layout
    if np.any(x1.tokens == lay.mask_symbol):
        raise DomainError("corrupt expects a fully unmasked target")
    return corrupt_grid(lay, x1.tokens, t, sched, rng)


def corrupt_grid(layout: StreamLayout, x1: np.ndarray, t: float, sched: Scheduler, rng) -> PathState:
    keep = rng.random(x1.shape) < sched.kappa(t)
    return PathState(layout, t, np.where(keep, x1, layout.mask_symbol))


def velocity(p1t: np.ndarray, current: PathState, sched: Scheduler) -> np.ndarray:
    """Rate matrix rows over the extended alphabet (v data symbols, then mask).

    ``u = k'(t) / (1 - k(t)) * (p_{1|t} - delta_{x_t})``.
    """
    lay = current.layout
    p1t = np.asarray(p1t, dtype=np.float64)
    if p1t.shape != current.tokens.shape + (lay.v,):
        raise ShapeError(f"posterior shape {p1t.shape} does not match state {current.tokens.shape} x v={lay.v}")
    k = sched.kappa(current.time)
    if k >= 1.0:
        raise SingularityError(f"velocity is singular at t={current.time} (1 - kappa = 0)")
    factor = sched.kappa_dot(current.time) / (1.0 - k)
    extended = np.concatenate([p1t, np.zeros(p1t.shape[:-1] + (1,))], axis=-1)
    onehot = np.eye(lay.v + 1)[current.tokens]
    return factor * (extended - onehot)


def validate_posterior(p1t: np.ndarray, expected_shape: tuple) -> np.ndarray:
    p1t = np.asarray(p1t, dtype=np.float64)
    if p1t.shape != expected_shape:
        raise DenoiserOutputError(f"posterior shape {p1t.shape}, expected {expected_shape}")
    if not np.all(np.isfinite(p1t)):
        raise DenoiserOutputError("posterior contains non-finite entries")
    if p1t.size and p1t.min() < 0.0:
        raise DenoiserOutputError(f"posterior has negative entry {p1t.min()}")
    sums = p1t.sum(axis=-1)
    if sums.size and np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
        raise DenoiserOutputError(f"posterior rows must sum to 1, worst deviation {np.max(np.abs(sums - 1.0)):.3e}")
    return p1t


def _draw_from_rows(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    total = cdf[..., -1:]
    idx = np.sum(cdf <= (u[..., None] * total), axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def euler_step(
    state: PathState,
    p1t: np.ndarray,
    h: float,
    sched: Scheduler,
    rng: np.random.Generator,
    symbol_uniforms: Optional[np.ndarray] = None,
) -> PathState:
    """Advance ``state`` by ``h`` with mask-path kinetics."""
    if not h > 0.0:
        raise DomainError(f"step size must be positive, got {h}")
    t = state.time
    t_next = t + h
    if t_next > 1.0 + 1e-12:
        raise DomainError(f"step overshoots t=1: t={t}, h={h}")
    if abs(t_next - 1.0) <= 1e-12:
        t_next = 1.0
    k_t, k_next = sched.kappa(t), sched.kappa(t_next)
    if k_t >= 1.0:
        raise SingularityError("cannot step from t=1")
    p_unmask = (k_next - k_t) / (1.0 - k_t)

    flips = rng.random(state.tokens.shape) < p_unmask
    if symbol_uniforms is None:
        symbol_uniforms = rng.random(state.tokens.shape)
    unmask = state.masked & flips
    tokens = state.tokens.copy()
    if unmask.any():
        tokens[unmask] = _draw_from_rows(np.asarray(p1t, dtype=np.float64)[unmask], symbol_uniforms[unmask])
    return PathState(state.layout, t_next, tokens)


def sample_batch(
    denoiser,
    ctx: ConditioningContext,
    length: int,
    nfe: int,
    sched: Scheduler,
    rng: np.random.Generator,
    count: int = 1,
) -> np.ndarray:
    """Draw ``count`` sequences with ``nfe`` uniform Euler steps; returns ``(count, m+k, L)``."""
    if nfe < 1:
        raise DomainError(f"nfe must be >= 1, got {nfe}")
    lay = denoiser.layout
    shape = (count, lay.generative_streams, length)
    symbol_u = rng.random(shape)
    state = PathState(lay, 0.0, np.full(shape, lay.mask_symbol, dtype=np.int64))
    for step in range(nfe):
        t_next = 1.0 if step == nfe - 1 else (step + 1) / nfe
        p1t = validate_posterior(denoiser.evaluate(state, ctx), shape + (lay.v,))
        state = euler_step(state, p1t, t_next - state.time, sched, rng, symbol_uniforms=symbol_u)
    assert not state.masked.any()
    return state.tokens


def sample(
    denoiser,
    ctx: ConditioningContext,
    length: int,
    nfe: int,
    sched: Scheduler,
    rng: np.random.Generator,
) -> GenerativeTarget:
    grid = sample_batch(denoiser, ctx, length, nfe, sched, rng, count=1)[0]
    return GenerativeTarget(denoiser.layout, grid)


def posterior_nll(p1t: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Per-position ``-log p1t[x1]`` with the log floor applied."""
    picked = np.take_along_axis(p1t, x1[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(picked, LOG_FLOOR))


def dfm_loss_at(denoiser, x1: GenerativeTarget, state: PathState, ctx: ConditioningContext) -> float:
    """Cross-entropy summed over every position for a fixed corrupted state.

    The sum is correctly rounded (``math.fsum``), so equal per-position terms
    reproduce the closed form ``count * term`` bit for bit.
    """
    p1t = validate_posterior(denoiser.evaluate(state, ctx), x1.tokens.shape + (x1.layout.v,))
    return math.fsum(posterior_nll(p1t, x1.tokens).ravel().tolist())


def dfm_loss(denoiser, x1: GenerativeTarget, ctx: ConditioningContext, sched: Scheduler, rng: np.random.Generator) -> float:
    """One-sample estimate of the DFM objective: draw t ~ U[0,1], corrupt, score all positions."""
    t = float(rng.uniform(0.0, 1.0))
    state = corrupt(x1, t, sched, rng)
    return dfm_loss_at(denoiser, x1, state, ctx)


def uniform_loss(layout: StreamLayout, length: int) -> float:
    return layout.generative_streams * length * math.log(layout.v)
