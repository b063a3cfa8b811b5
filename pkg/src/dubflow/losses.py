"""Auxiliary and composite training objectives."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .errors import DomainError, ShapeError

BLANK = 0


def ctc_feasible(T: int, target) -> bool:
    """A target needs one frame per label plus a blank between each repeated pair."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats <= T


def ctc_loss(logp, target) -> float:
    """Negative log-likelihood of ``target`` under CTC, blank at index 0.

    Returns ``math.inf`` when no alignment of length ``T`` can emit the target.
    """
    logp = np.asarray(logp, dtype=np.float64)
    if logp.ndim != 2:
        raise ShapeError(f"log-prob table must be T x (P+1), got {logp.shape}")
    T, V = logp.shape
    target = [int(s) for s in target]
    if any(not 1 <= s < V for s in target):
        raise DomainError(f"target symbols must lie in [1, {V - 1}], got {target}")
    if T == 0 or not ctc_feasible(T, target):
        return math.inf
    if not target:
        return float(-logp[:, BLANK].sum())

    ext = [BLANK]
    for s in target:
        ext += [s, BLANK]
    S = len(ext)
    ext = np.array(ext)
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full(S, -np.inf)
    alpha[0] = logp[0, BLANK]
    if S > 1:
        alpha[1] = logp[0, ext[1]]
    for t in range(1, T):
        prev1 = np.concatenate([[-np.inf], alpha[:-1]])
        prev2 = np.concatenate([[-np.inf, -np.inf], alpha[:-2]])
        prev2 = np.where(can_skip, prev2, -np.inf)
        alpha = np.logaddexp(np.logaddexp(alpha, prev1), prev2) + logp[t, ext]
    return float(-np.logaddexp(alpha[-1], alpha[-2]))


def pool(features) -> np.ndarray:
    """Time-average a ``(T, D)`` feature sequence."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError(f"pool needs a non-empty (T, D) sequence, got shape {x.shape}")
    return x.mean(axis=0)


def distill_loss(teacher_pooled, student_pooled) -> float:
    """Batch mean of ``1 - cos(teacher, student)``; accepts ``(D,)`` or ``(B, D)``."""
    a = np.atleast_2d(np.asarray(teacher_pooled, dtype=np.float64))
    b = np.atleast_2d(np.asarray(student_pooled, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"teacher {a.shape} and student {b.shape} differ in shape")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("cosine similarity is undefined for zero-norm features")
    cos = np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)
    return float(np.mean(1.0 - cos))


def content_ce(logits, target) -> float:
    """Mean cross-entropy over all ``n * L`` content positions."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 3 or target.shape != logits.shape[:2]:
        raise ShapeError(f"logits (n, L, v) {logits.shape} do not match target {target.shape}")
    if target.size == 0:
        raise DomainError("content cross-entropy over zero positions is undefined")
    v = logits.shape[2]
    if target.min() < 0 or target.max() >= v:
        raise DomainError(f"target symbols must lie in [0, {v})")
    logq = log_softmax(logits, axis=-1)
    return float(-np.take_along_axis(logq, target[..., None], axis=-1).mean())


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    ``lambda5``/``lambda6`` scale the video-text and speech-text alignment
    losses; ``lambda1..lambda4`` scale content CE, CTC, distillation and DFM.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 1.0
    lambda5: float = 0.001
    lambda6: float = 0.001

    def __post_init__(self):
        for name, w in self.__dict__.items():
            if not (w >= 0 and math.isfinite(w)):
                raise DomainError(f"{name} must be a finite non-negative weight, got {w}")


COMPONENT_FIELDS = ("l_vt", "l_st", "l_c", "l_ctc", "l_distill", "l_dfm")


@dataclass(frozen=True)
class LossBreakdown:
    l_vt: float
    l_st: float
    l_c: float
    l_ctc: float
    l_distill: float
    l_dfm: float
    total: float
    infeasible: tuple[str, ...] = field(default=())

    def to_json(self) -> str:
        def enc(x):
            return x if math.isfinite(x) else "inf"

        d = {name: enc(getattr(self, name)) for name in COMPONENT_FIELDS + ("total",)}
        if self.infeasible:
            d["infeasible"] = list(self.infeasible)
        return json.dumps(d)


def total_loss(components: dict, w: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum ``l5*VT + l6*ST + l1*c + l2*CTC + l3*distill + l4*DFM``.

    A component equal to ``+inf`` (infeasible CTC) is flagged; it makes the
    total infinite only when its weight is positive, so no NaN is produced.
    """
    weights = {
        "l_vt": w.lambda5,
        "l_st": w.lambda6,
        "l_c": w.lambda1,
        "l_ctc": w.lambda2,
        "l_distill": w.lambda3,
        "l_dfm": w.lambda4,
    }
    missing = set(COMPONENT_FIELDS) - set(components)
    if missing:
        raise DomainError(f"missing loss components {sorted(missing)}")
    values = {name: float(components[name]) for name in COMPONENT_FIELDS}
    flagged = []
    total = 0.0
    for name in COMPONENT_FIELDS:
        x = values[name]
        if math.isnan(x) or x == -math.inf:
            raise DomainError(f"component {name} is {x}")
        if x == math.inf:
            flagged.append(name)
            if weights[name] > 0:
                total = math.inf
            continue
        total += weights[name] * x
    return LossBreakdown(**values, total=total, infeasible=tuple(flagged))
