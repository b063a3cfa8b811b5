"""Alignment math between phonemes and frame/token sequences.

Durations are integer beats; one beat spans 5 video frames and 16 speech
tokens, which is the fixed 5:16 frame-to-token ratio.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, ShapeError

FRAMES_PER_BEAT = 5
TOKENS_PER_BEAT = 16
DEFAULT_TAU = 0.1

_UNIT_RATE = {"frames": FRAMES_PER_BEAT, "tokens": TOKENS_PER_BEAT}


@dataclass(frozen=True)
class DurationTable:
    beats: tuple[int, ...]

    def __post_init__(self):
        beats = tuple(int(b) for b in self.beats)
        if any(b < 1 for b in beats):
            raise DomainError(f"durations must be >= 1 beat, got {beats}")
        object.__setattr__(self, "beats", beats)

    @property
    def frames(self) -> int:
        return FRAMES_PER_BEAT * sum(self.beats)

    @property
    def tokens(self) -> int:
        return TOKENS_PER_BEAT * sum(self.beats)

    def counts(self, unit: str) -> list[int]:
        return [_UNIT_RATE[_check_unit(unit)] * b for b in self.beats]


def _check_unit(unit: str) -> str:
    if unit not in _UNIT_RATE:
        raise DomainError(f"unit must be 'frames' or 'tokens', got {unit!r}")
    return unit


def alignment_from_counts(counts) -> np.ndarray:
    """Binary ``rows x N`` matrix where column ``j`` covers ``counts[j]`` consecutive rows."""
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts):
        raise DomainError(f"every phoneme needs at least one row, got counts {counts}")
    cols = np.repeat(np.arange(len(counts)), counts)
    M = np.zeros((cols.size, len(counts)), dtype=np.int64)
    M[np.arange(cols.size), cols] = 1
    return M


def build_alignment_matrix(d: DurationTable, unit: str = "frames") -> np.ndarray:
    return alignment_from_counts(d.counts(unit))


def check_alignment(M: np.ndarray):
    M = np.asarray(M)
    if M.ndim != 2:
        raise ShapeError(f"alignment matrix must be 2-D, got shape {M.shape}")
    if not np.isin(M, (0, 1)).all():
        raise DomainError("alignment matrix must be binary")
    if M.shape[0] and not np.all(M.sum(axis=1) == 1):
        raise DomainError("each row of the alignment matrix needs exactly one 1")


def contrastive_alignment_loss(A, M, tau: float = DEFAULT_TAU) -> float:
    """Two-sided contrastive alignment loss, summed (not averaged) over columns and rows.

    Column term: for each phoneme, ``-log`` of the softmax mass (over rows)
    that falls on its aligned rows.  Row term: for each frame/token, ``-log``
    of the softmax mass (over phonemes) on its aligned phoneme.
    """
    A = np.asarray(A, dtype=np.float64)
    M = np.asarray(M)
    if A.shape != M.shape or A.ndim != 2:
        raise ShapeError(f"score grid {A.shape} and alignment {M.shape} must be equal 2-D shapes")
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    if not np.all(np.isfinite(A)):
        raise DomainError("attention scores must be finite")
    check_alignment(M)
    S = A / tau
    aligned = np.where(M.astype(bool), S, -np.inf)
    col = logsumexp(S, axis=0) - logsumexp(aligned, axis=0)
    row = logsumexp(S, axis=1) - logsumexp(aligned, axis=1)
    # clamp tiny negative rounding from logsumexp differences
    return float(max(col.sum() + row.sum(), 0.0))


def mas(log_scores) -> np.ndarray:
    """Monotonic alignment search.

    Returns, for every row, the column index on the best-scoring monotonic
    path from ``(0, 0)`` to ``(rows-1, N-1)`` whose column advances by 0 or 1
    per row.  Among tied optimal paths the column advances as early as
    possible: backtracking leaves a column only when the advancing
    predecessor ``(i-1, j-1)`` scores strictly higher or is the only option.
    """
    S = np.asarray(log_scores, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeError(f"score grid must be 2-D, got {S.shape}")
    R, N = S.shape
    if N < 1 or R < N:
        raise DomainError(f"no monotonic path: {R} rows for {N} columns")
    Q = np.full((R, N), -np.inf)
    Q[0, 0] = S[0, 0]
    for i in range(1, R):
        diag = np.concatenate([[-np.inf], Q[i - 1, :-1]])
        Q[i] = np.maximum(Q[i - 1], diag) + S[i]
    path = np.zeros(R, dtype=np.int64)
    j = N - 1
    for i in range(R - 1, -1, -1):
        path[i] = j
        if i > 0 and j > 0 and (j == i or Q[i - 1, j - 1] > Q[i - 1, j]):
            j -= 1
    return path


def path_score(log_scores, path) -> float:
    S = np.asarray(log_scores, dtype=np.float64)
    return float(S[np.arange(len(path)), path].sum())


def check_path(path, N: int):
    path = np.asarray(path)
    if path.size == 0:
        raise DomainError("empty path")
    if path[0] != 0 or path[-1] != N - 1:
        raise DomainError("path must start at column 0 and end at column N-1")
    if not np.all(np.isin(np.diff(path), (0, 1))):
        raise DomainError("consecutive path entries must differ by 0 or 1")


def path_to_durations(path, N: int) -> list[int]:
    path = np.asarray(path, dtype=np.int64)
    check_path(path, N)
    return np.bincount(path, minlength=N).tolist()


def path_to_matrix(path, N: int) -> np.ndarray:
    return alignment_from_counts(path_to_durations(path, N))


def duration_expand(phonemes, counts) -> list:
    """Repeat ``phonemes[j]`` ``counts[j]`` times, in order."""
    if len(phonemes) != len(counts):
        raise ShapeError(f"{len(phonemes)} phonemes but {len(counts)} counts")
    out = []
    for p, c in zip(phonemes, counts):
        if c < 0:
            raise DomainError(f"negative count {c}")
        out.extend([p] * int(c))
    return out


def frames_to_tokens(F: int) -> int:
    if F < 0 or F % FRAMES_PER_BEAT:
        raise DomainError(f"frame count {F} is not a non-negative multiple of {FRAMES_PER_BEAT}")
    return F // FRAMES_PER_BEAT * TOKENS_PER_BEAT


def tokens_to_frames(L: int) -> int:
    if L < 0 or L % TOKENS_PER_BEAT:
        raise DomainError(f"token count {L} is not a non-negative multiple of {TOKENS_PER_BEAT}")
    return L // TOKENS_PER_BEAT * FRAMES_PER_BEAT


def token_to_frame_index(i: int, num_tokens: int) -> int:
    if not 0 <= i < num_tokens:
        raise DomainError(f"token index {i} out of range [0, {num_tokens})")
    return i * FRAMES_PER_BEAT // TOKENS_PER_BEAT


def matrix_to_json(M) -> str:
    return json.dumps({"rows": int(np.shape(M)[0]), "cols": int(np.shape(M)[1]), "data": np.asarray(M).tolist()})


def path_to_json(path) -> str:
    return json.dumps({"path": np.asarray(path).tolist()})
