"""Factorized token data model: stream layout, token grids and conditioning context.

Grids are ``numpy`` integer arrays of shape ``(streams, length)``.  Every
array stored on these value types is made read-only so instances can be
shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Union

import numpy as np

from .errors import DomainError, ShapeError


class _Absent:
    """Marker for a conditioning channel that is deliberately withheld."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSENT"

    def __reduce__(self):
        return (_Absent, ())


ABSENT = _Absent()


def _frozen_grid(grid, rows: int, name: str) -> np.ndarray:
    arr = np.array(grid, dtype=np.int64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(rows, 0)
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise ShapeError(f"{name}: expected {rows} x L grid, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StreamLayout:
    m: int = 1
    n: int = 2
    k: int = 3
    v: int = 1024

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.k < 1:
            raise DomainError(f"stream counts must be >= 1, got m={self.m} n={self.n} k={self.k}")
        if self.v < 2:
            raise DomainError(f"vocabulary size must be >= 2, got {self.v}")

    @property
    def mask_symbol(self) -> int:
        return self.v

    @property
    def generative_streams(self) -> int:
        return self.m + self.k

    def to_json(self) -> dict:
        return {"m": self.m, "n": self.n, "k": self.k, "v": self.v}

    @classmethod
    def from_json(cls, obj: dict) -> "StreamLayout":
        return cls(int(obj["m"]), int(obj["n"]), int(obj["k"]), int(obj["v"]))


def check_symbols(layout: StreamLayout, grid: np.ndarray, name: str = "grid", allow_mask: bool = True):
    """Raise DomainError unless every entry is a data symbol (or the mask, if allowed)."""
    hi = layout.v if allow_mask else layout.v - 1
    if grid.size and (grid.min() < 0 or grid.max() > hi):
        raise DomainError(f"{name}: symbols must lie in [0, {hi}], got range [{grid.min()}, {grid.max()}]")


@dataclass(frozen=True, eq=False)
class FactorizedTokens:
    layout: StreamLayout
    prosody: np.ndarray
    content: np.ndarray
    acoustic: np.ndarray

    def __post_init__(self):
        lay = self.layout
        object.__setattr__(self, "prosody", _frozen_grid(self.prosody, lay.m, "prosody"))
        object.__setattr__(self, "content", _frozen_grid(self.content, lay.n, "content"))
        object.__setattr__(self, "acoustic", _frozen_grid(self.acoustic, lay.k, "acoustic"))
        lengths = {self.prosody.shape[1], self.content.shape[1], self.acoustic.shape[1]}
        if len(lengths) != 1:
            raise ShapeError(f"streams disagree on length: {sorted(lengths)}")
        for name in ("prosody", "content", "acoustic"):
            check_symbols(lay, getattr(self, name), name)

    @property
    def length(self) -> int:
        return self.prosody.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FactorizedTokens):
            return NotImplemented
        return (
            self.layout == other.layout
            and np.array_equal(self.prosody, other.prosody)
            and np.array_equal(self.content, other.content)
            and np.array_equal(self.acoustic, other.acoustic)
        )

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "layout": self.layout.to_json(),
            "length": self.length,
            "prosody": self.prosody.tolist(),
            "content": self.content.tolist(),
            "acoustic": self.acoustic.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FactorizedTokens":
        layout = StreamLayout.from_json(obj["layout"])
        tokens = cls(layout, obj["prosody"], obj["content"], obj["acoustic"])
        if tokens.length != int(obj["length"]):
            raise ShapeError(f"declared length {obj['length']} != grid length {tokens.length}")
        return tokens


@dataclass(frozen=True, eq=False)
class GenerativeTarget:
    """The prosody and acoustic streams stacked as one ``(m+k, L)`` grid, prosody first."""

    layout: StreamLayout
    tokens: np.ndarray

    def __post_init__(self):
        grid = _frozen_grid(self.tokens, self.layout.generative_streams, "target")
        check_symbols(self.layout, grid, "target")
        object.__setattr__(self, "tokens", grid)

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_positions(self) -> int:
        return self.tokens.size

    def __eq__(self, other):
        if not isinstance(other, GenerativeTarget):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.tokens, other.tokens)

    __hash__ = None

    def to_json(self) -> dict:
        prosody, acoustic = split_target(self)
        return {
            "layout": self.layout.to_json(),
            "length": self.length,
            "prosody": prosody.tolist(),
            "acoustic": acoustic.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GenerativeTarget":
        layout = StreamLayout.from_json(obj["layout"])
        target = concat_target(layout, obj["prosody"], obj["acoustic"])
        if target.length != int(obj["length"]):
            raise ShapeError(f"declared length {obj['length']} != grid length {target.length}")
        return target


def concat_target(layout: StreamLayout, prosody, acoustic) -> GenerativeTarget:
    prosody = _frozen_grid(prosody, layout.m, "prosody")
    acoustic = _frozen_grid(acoustic, layout.k, "acoustic")
    if prosody.shape[1] != acoustic.shape[1]:
        raise ShapeError(f"prosody length {prosody.shape[1]} != acoustic length {acoustic.shape[1]}")
    return GenerativeTarget(layout, np.concatenate([prosody, acoustic], axis=0))


def split_target(target: GenerativeTarget) -> tuple[np.ndarray, np.ndarray]:
    m = target.layout.m
    return target.tokens[:m], target.tokens[m:]


def mask_fraction(target: GenerativeTarget) -> float:
    if target.num_positions == 0:
        return 0.0
    return float(np.count_nonzero(target.tokens == target.layout.mask_symbol)) / target.num_positions


def all_mask(layout: StreamLayout, length: int) -> GenerativeTarget:
    return GenerativeTarget(layout, np.full((layout.generative_streams, length), layout.mask_symbol))


GridOrAbsent = Union[np.ndarray, _Absent]


@dataclass(frozen=True, eq=False)
class ConditioningContext:
    """Structured condition for the denoiser.

    ``reference`` drives prosody in TTS mode, ``prosody_prior`` in dubbing
    mode.  ``content_channel`` is either an ``n x L`` grid or ``ABSENT``.
    """

    layout: StreamLayout
    speaker: int
    target_length: int
    reference: Optional[FactorizedTokens] = None
    prosody_prior: Optional[np.ndarray] = None
    content_channel: Any = ABSENT

    def __post_init__(self):
        lay = self.layout
        if self.speaker < 0:
            raise DomainError(f"speaker id must be non-negative, got {self.speaker}")
        if self.target_length < 0:
            raise DomainError(f"negative target length {self.target_length}")
        if self.reference is not None and self.prosody_prior is not None:
            raise DomainError("reference and prosody_prior are mutually exclusive")
        if self.reference is not None and self.reference.layout != lay:
            raise DomainError("reference layout differs from context layout")
        if self.prosody_prior is not None:
            prior = _frozen_grid(self.prosody_prior, lay.m, "prosody_prior")
            check_symbols(lay, prior, "prosody_prior", allow_mask=False)
            if prior.shape[1] != self.target_length:
                raise ShapeError(f"prosody_prior length {prior.shape[1]} != target length {self.target_length}")
            object.__setattr__(self, "prosody_prior", prior)
        if self.content_channel is not ABSENT:
            content = _frozen_grid(self.content_channel, lay.n, "content_channel")
            check_symbols(lay, content, "content_channel", allow_mask=False)
            if content.shape[1] != self.target_length:
                raise ShapeError(f"content_channel length {content.shape[1]} != target length {self.target_length}")
            object.__setattr__(self, "content_channel", content)

    @property
    def mode(self) -> str:
        if self.reference is not None:
            return "tts"
        if self.prosody_prior is not None:
            return "dub"
        return "unconditional"

    @property
    def has_content(self) -> bool:
        return self.content_channel is not ABSENT

    def key(self) -> tuple:
        """Hashable identity of the context, used for caching."""
        ref = None
        if self.reference is not None:
            r = self.reference
            ref = (r.prosody.tobytes(), r.content.tobytes(), r.acoustic.tobytes(), r.length)
        prior = None if self.prosody_prior is None else self.prosody_prior.tobytes()
        content = None if not self.has_content else self.content_channel.tobytes()
        return (self.layout, self.speaker, self.target_length, ref, prior, content)

    def __eq__(self, other):
        if not isinstance(other, ConditioningContext):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def to_json(self) -> dict:
        return {
            "layout": self.layout.to_json(),
            "speaker": self.speaker,
            "length": self.target_length,
            "reference": None if self.reference is None else self.reference.to_json(),
            "prosody_prior": None if self.prosody_prior is None else self.prosody_prior.tolist(),
            "content_channel": "ABSENT" if not self.has_content else self.content_channel.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConditioningContext":
        content = obj.get("content_channel", "ABSENT")
        ref = obj.get("reference")
        return cls(
            layout=StreamLayout.from_json(obj["layout"]),
            speaker=int(obj["speaker"]),
            target_length=int(obj["length"]),
            reference=None if ref is None else FactorizedTokens.from_json(ref),
            prosody_prior=obj.get("prosody_prior"),
            content_channel=ABSENT if content == "ABSENT" else content,
        )
