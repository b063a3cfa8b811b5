"""Exactly-specified target distributions over ``(m+k, L)`` generative grids.

Two representations:

* ``JointLaw``: an explicit support list with probabilities.
* ``ProductLaw``: independent per-position categoricals, for targets whose
  support is too large to list but factorizes.

Both answer the Bayes question the exact denoiser needs: given a partially
masked ``x_t``, what are the posterior marginals of the clean sequence?
Under the mask channel every support sequence consistent with ``x_t`` gets
the same likelihood ``k^revealed * (1-k)^masked``, so the posterior is the
prior restricted to consistent sequences.  The channel factor only matters
when it is zero: revealed symbols at ``t=0`` or masks at ``t=1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InconsistentEvidenceError, ShapeError
from .tokens import StreamLayout


def _check_channel(masked: np.ndarray, t: float):
    if t <= 0.0 and np.any(~masked):
        raise InconsistentEvidenceError("revealed symbols are impossible at t=0")
    if t >= 1.0 and np.any(masked):
        raise InconsistentEvidenceError("masked positions are impossible at t=1")


@dataclass(frozen=True, eq=False)
class JointLaw:
    layout: StreamLayout
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        P = self.layout.generative_streams
        if support.ndim != 3 or support.shape[1] != P or support.shape[0] != probs.shape[0]:
            raise ShapeError(f"support must be (S, {P}, L) matching probs, got {support.shape} and {probs.shape}")
        if support.size and (support.min() < 0 or support.max() >= self.layout.v):
            raise DomainError("support sequences must contain data symbols only")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError(f"probabilities must be non-negative and sum to 1, sum={probs.sum()}")
        support.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_sequences(cls, layout: StreamLayout, sequences, weights=None) -> "JointLaw":
        """Empirical (or weighted) law over a collection of grids; duplicates are merged."""
        grids = [np.asarray(s, dtype=np.int64) for s in sequences]
        w = np.ones(len(grids)) if weights is None else np.asarray(weights, dtype=np.float64)
        merged: dict[bytes, list] = {}
        for g, wi in zip(grids, w):
            entry = merged.setdefault(g.tobytes(), [g, 0.0])
            entry[1] += wi
        support = np.stack([e[0] for e in merged.values()])
        probs = np.array([e[1] for e in merged.values()])
        return cls(layout, support, probs / probs.sum())

    @property
    def length(self) -> int:
        return self.support.shape[2]

    def marginals(self) -> np.ndarray:
        onehot = np.eye(self.layout.v)[self.support]
        return np.einsum("s,spld->pld", self.probs, onehot)

    def prob(self, grid) -> float:
        grid = np.asarray(grid)
        hits = np.all(self.support == grid, axis=(1, 2))
        return float(self.probs[hits].sum())

    def log_prob(self, grids: np.ndarray) -> np.ndarray:
        grids = np.asarray(grids)
        eq = np.all(grids[:, None] == self.support[None], axis=(2, 3))
        p = eq.astype(np.float64) @ self.probs
        with np.errstate(divide="ignore"):
            return np.log(p)

    def posterior(self, x_t: np.ndarray, t: float, fallback: bool = False) -> np.ndarray:
        """Posterior marginals given ``x_t``.

        A state outside the support raises, unless ``fallback`` is set: then
        masked positions get the prior marginals and revealed ones a delta.
        Such states arise when correlated positions unmask in the same step.
        """
        x_t = np.asarray(x_t)
        mask = self.layout.mask_symbol
        masked = x_t == mask
        _check_channel(masked, t)
        batch_shape = x_t.shape[:-2]
        flat = x_t.reshape((-1,) + x_t.shape[-2:])
        fm = flat == mask
        consistent = np.all(fm[:, None] | (flat[:, None] == self.support[None]), axis=(2, 3))
        weights = consistent * self.probs[None]
        totals = weights.sum(axis=1)
        lost = totals <= 0.0
        if lost.any():
            if not fallback:
                raise InconsistentEvidenceError("observed state is inconsistent with every support sequence")
            weights[lost] = self.probs
            totals[lost] = 1.0
        weights = weights / totals[:, None]
        onehot = np.eye(self.layout.v)[self.support]
        post = np.einsum("bs,spld->bpld", weights, onehot)
        if lost.any():
            rows = post[lost]
            revealed = ~fm[lost]
            rows[revealed] = np.eye(self.layout.v)[flat[lost][revealed]]
            post[lost] = rows
        return post.reshape(batch_shape + post.shape[1:])


@dataclass(frozen=True, eq=False)
class ProductLaw:
    layout: StreamLayout
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        P = self.layout.generative_streams
        if table.ndim != 3 or table.shape[0] != P or table.shape[2] != self.layout.v:
            raise ShapeError(f"marginal table must be ({P}, L, {self.layout.v}), got {table.shape}")
        if np.any(table < 0) or (table.size and np.max(np.abs(table.sum(-1) - 1.0)) > 1e-12):
            raise DomainError("every marginal row must be a probability distribution")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def length(self) -> int:
        return self.table.shape[1]

    def marginals(self) -> np.ndarray:
        return self.table

    def log_prob(self, grids: np.ndarray) -> np.ndarray:
        grids = np.asarray(grids)
        picked = np.take_along_axis(np.broadcast_to(self.table, grids.shape + (self.layout.v,)), grids[..., None], -1)[..., 0]
        with np.errstate(divide="ignore"):
            return np.log(picked).sum(axis=(-2, -1))

    def prob(self, grid) -> float:
        return float(np.exp(self.log_prob(np.asarray(grid)[None])[0]))

    def support_sizes(self) -> np.ndarray:
        return np.count_nonzero(self.table > 0, axis=-1)

    def support_size(self) -> int:
        return math.prod(int(s) for s in self.support_sizes().ravel())

    def enumerate_support(self, limit: int = 1 << 20) -> JointLaw:
        """Expand into an explicit ``JointLaw`` (refuses supports larger than ``limit``)."""
        size = self.support_size()
        if size > limit:
            raise DomainError(f"support of {size} sequences exceeds enumeration limit {limit}")
        P, L, _ = self.table.shape
        symbols = [np.flatnonzero(self.table[p, i] > 0) for p in range(P) for i in range(L)]
        grids = np.zeros((1, P * L), dtype=np.int64)
        probs = np.ones(1)
        for pos, syms in enumerate(symbols):
            p, i = divmod(pos, L)
            grids = np.repeat(grids, len(syms), axis=0)
            grids[:, pos] = np.tile(syms, len(grids) // len(syms))
            probs = np.repeat(probs, len(syms)) * np.tile(self.table[p, i, syms], len(probs))
        return JointLaw(self.layout, grids.reshape(-1, P, L), probs / probs.sum())

    def posterior(self, x_t: np.ndarray, t: float, fallback: bool = False) -> np.ndarray:
        # positions are independent, so ``fallback`` never changes the answer;
        # a revealed zero-probability symbol is still an error
        x_t = np.asarray(x_t)
        mask = self.layout.mask_symbol
        masked = x_t == mask
        _check_channel(masked, t)
        revealed = np.where(masked, 0, x_t)
        prior = np.broadcast_to(self.table, x_t.shape + (self.layout.v,))
        hit = np.take_along_axis(prior, revealed[..., None], -1)[..., 0]
        if np.any(~masked & (hit <= 0.0)):
            raise InconsistentEvidenceError("a revealed symbol has zero probability under the target law")
        post = np.array(prior)
        rev = ~masked
        if rev.any():
            post[rev] = np.eye(self.layout.v)[x_t[rev]]
        return post
