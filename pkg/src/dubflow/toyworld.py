"""Synthetic dubbing corpus with a known generative law.

Each sample has ``N`` phonemes with integer durations in beats.  One beat is
5 video frames and 16 speech tokens, so every sample honours the 5:16
frame-to-token ratio exactly.  Token streams follow:

* content stream 0 at token ``i``: the phoneme governing ``i``
* content stream 1: ``(phoneme + i) mod v``
* prosody: i.i.d. per position, ``2e`` or ``2e+1`` with the configured weights
  (expression ``e``)
* acoustic stream ``r``: ``(content0 + speaker + r) mod v``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .alignment import FRAMES_PER_BEAT, TOKENS_PER_BEAT, duration_expand
from .errors import ConfigError, DomainError, ShapeError
from .laws import ProductLaw
from .tokens import ABSENT, ConditioningContext, FactorizedTokens, StreamLayout, concat_target, GenerativeTarget

CORPUS_SUFFIX = ".toyc.jsonl"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ToyConfig:
    phonemes: int = 4
    expressions: int = 3
    speakers: int = 3
    layout: StreamLayout = field(default_factory=lambda: StreamLayout(1, 2, 3, 8))
    num_phonemes: tuple[int, int] = (2, 4)
    duration_beats: tuple[int, int] = (1, 3)
    prosody_weights: tuple[float, float] = (0.7, 0.3)
    seed: int = 0

    def __post_init__(self):
        v = self.layout.v
        if min(self.phonemes, self.expressions, self.speakers) < 1:
            raise ConfigError("phonemes, expressions and speakers must all be >= 1")
        if v < max(self.phonemes, self.expressions, self.speakers) + 2:
            raise ConfigError(
                f"invariant v >= max(P, E, S) + 2 violated: v={v}, "
                f"P={self.phonemes}, E={self.expressions}, S={self.speakers}"
            )
        if 2 * self.expressions > v:
            raise ConfigError(f"invariant 2*E <= v violated (prosody symbols 2e, 2e+1 must be data symbols): E={self.expressions}, v={v}")
        lo, hi = self.num_phonemes
        if not 1 <= lo <= hi:
            raise ConfigError(f"num_phonemes range must be non-empty and >= 1, got {self.num_phonemes}")
        lo, hi = self.duration_beats
        if not 1 <= lo <= hi:
            raise ConfigError(f"duration_beats range must be non-empty and >= 1, got {self.duration_beats}")
        w = self.prosody_weights
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ConfigError(f"prosody_weights must be two non-negative numbers summing to 1, got {w}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["layout"] = self.layout.to_json()
        d["num_phonemes"] = list(self.num_phonemes)
        d["duration_beats"] = list(self.duration_beats)
        d["prosody_weights"] = list(self.prosody_weights)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ToyConfig":
        obj = dict(obj)
        obj.pop("schema_version", None)
        obj.pop("count", None)
        if "layout" in obj:
            obj["layout"] = StreamLayout.from_json(obj["layout"])
        for name in ("num_phonemes", "duration_beats", "prosody_weights"):
            if name in obj:
                obj[name] = tuple(obj[name])
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class ToySample:
    phonemes: tuple[int, ...]
    durations: tuple[int, ...]
    expression: int
    speaker: int
    tokens: FactorizedTokens

    @property
    def frames(self) -> int:
        return FRAMES_PER_BEAT * sum(self.durations)

    @property
    def length(self) -> int:
        return self.tokens.length

    def target(self) -> GenerativeTarget:
        return concat_target(self.tokens.layout, self.tokens.prosody, self.tokens.acoustic)

    def __eq__(self, other):
        if not isinstance(other, ToySample):
            return NotImplemented
        return (
            self.phonemes == other.phonemes
            and self.durations == other.durations
            and self.expression == other.expression
            and self.speaker == other.speaker
            and self.tokens == other.tokens
        )

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "phonemes": list(self.phonemes),
            "durations": list(self.durations),
            "expression": self.expression,
            "speaker": self.speaker,
            "frames": self.frames,
            "tokens": self.tokens.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToySample":
        return cls(
            phonemes=tuple(int(p) for p in obj["phonemes"]),
            durations=tuple(int(d) for d in obj["durations"]),
            expression=int(obj["expression"]),
            speaker=int(obj["speaker"]),
            tokens=FactorizedTokens.from_json(obj["tokens"]),
        )


@dataclass(frozen=True, eq=False)
class ToyCorpus:
    config: ToyConfig
    samples: tuple[ToySample, ...]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def by_pair(self) -> dict[tuple[int, int], list[int]]:
        """Sample indices grouped by ``(speaker, expression)``."""
        index: dict[tuple[int, int], list[int]] = {}
        for i, s in enumerate(self.samples):
            index.setdefault((s.speaker, s.expression), []).append(i)
        return index

    def __eq__(self, other):
        if not isinstance(other, ToyCorpus):
            return NotImplemented
        return self.config == other.config and list(self.samples) == list(other.samples)

    __hash__ = None


def content_grid(layout: StreamLayout, phonemes, durations) -> np.ndarray:
    per_token = np.asarray(duration_expand(list(phonemes), [TOKENS_PER_BEAT * d for d in durations]), dtype=np.int64)
    idx = np.arange(per_token.size)
    rows = [per_token, (per_token + idx) % layout.v]
    # streams beyond the two defined ones repeat the offset rule with a larger stride
    for s in range(2, layout.n):
        rows.append((per_token + s * idx) % layout.v)
    return np.stack(rows[: layout.n]) if layout.n else np.zeros((0, per_token.size), dtype=np.int64)


def acoustic_grid(layout: StreamLayout, content0: np.ndarray, speaker: int) -> np.ndarray:
    return np.stack([(content0 + speaker + r) % layout.v for r in range(layout.k)])


def make_sample(cfg: ToyConfig, phonemes, durations, expression: int, speaker: int, rng: np.random.Generator) -> ToySample:
    lay = cfg.layout
    content = content_grid(lay, phonemes, durations)
    L = content.shape[1]
    offsets = (rng.random((lay.m, L)) >= cfg.prosody_weights[0]).astype(np.int64)
    prosody = 2 * expression + offsets
    acoustic = acoustic_grid(lay, content[0], speaker)
    tokens = FactorizedTokens(lay, prosody, content, acoustic)
    return ToySample(tuple(int(p) for p in phonemes), tuple(int(d) for d in durations), expression, speaker, tokens)


def gen_corpus(cfg: ToyConfig, count: int, rng: Optional[np.random.Generator] = None) -> ToyCorpus:
    """Draw ``count`` samples from the toy law (seeded from ``cfg.seed`` when ``rng`` is None)."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    samples = []
    for _ in range(count):
        N = int(rng.integers(cfg.num_phonemes[0], cfg.num_phonemes[1] + 1))
        phonemes = rng.integers(0, cfg.phonemes, size=N)
        durations = rng.integers(cfg.duration_beats[0], cfg.duration_beats[1] + 1, size=N)
        expression = int(rng.integers(0, cfg.expressions))
        speaker = int(rng.integers(0, cfg.speakers))
        samples.append(make_sample(cfg, phonemes, durations, expression, speaker, rng))
    return ToyCorpus(cfg, tuple(samples))


def verify_sample(cfg: ToyConfig, s: ToySample) -> tuple[bool, list[str]]:
    """Check every law invariant; returns ``(ok, violations)`` and never raises."""
    lay = cfg.layout
    out: list[str] = []
    tok = s.tokens
    if tok.layout != lay:
        return False, [f"layout {tok.layout} != config layout {lay}"]
    if len(s.phonemes) != len(s.durations):
        return False, [f"{len(s.phonemes)} phonemes but {len(s.durations)} durations"]
    if not cfg.num_phonemes[0] <= len(s.phonemes) <= cfg.num_phonemes[1]:
        out.append(f"phoneme count {len(s.phonemes)} outside {cfg.num_phonemes}")
    for j, d in enumerate(s.durations):
        if not cfg.duration_beats[0] <= d <= cfg.duration_beats[1]:
            out.append(f"duration[{j}]={d} outside {cfg.duration_beats}")
    for j, p in enumerate(s.phonemes):
        if not 0 <= p < cfg.phonemes:
            out.append(f"phoneme[{j}]={p} outside [0, {cfg.phonemes})")
    if not 0 <= s.expression < cfg.expressions:
        out.append(f"expression {s.expression} outside [0, {cfg.expressions})")
    if not 0 <= s.speaker < cfg.speakers:
        out.append(f"speaker {s.speaker} outside [0, {cfg.speakers})")
    expected_L = TOKENS_PER_BEAT * sum(s.durations)
    if tok.length != expected_L:
        out.append(f"length violation: L={tok.length} but 16*sum(d)={expected_L}")
        return False, out
    if 5 * tok.length != 16 * s.frames:
        out.append(f"ratio violation: L={tok.length}, F={s.frames}")

    def compare(name, actual, expected):
        for r, i in zip(*np.nonzero(actual != expected)):
            out.append(f"{name}[{r},{i}]={actual[r, i]} expected {expected[r, i]}")

    if all(0 <= p < cfg.phonemes for p in s.phonemes):
        content = content_grid(lay, s.phonemes, s.durations)
        compare("content", tok.content, content)
        compare("acoustic", tok.acoustic, acoustic_grid(lay, content[0], s.speaker))
    allowed = np.isin(tok.prosody, [2 * s.expression, 2 * s.expression + 1])
    for r, i in zip(*np.nonzero(~allowed)):
        out.append(f"prosody[{r},{i}]={tok.prosody[r, i]} not in {{{2 * s.expression}, {2 * s.expression + 1}}}")
    return not out, out


def _modal_prosody(layout: StreamLayout, prosody: np.ndarray) -> np.ndarray:
    return np.array([np.bincount(row, minlength=layout.v).argmax() for row in prosody], dtype=np.int64)


def context_of(s: ToySample, mode: str, corpus: Optional[ToyCorpus] = None) -> ConditioningContext:
    """Conditioning for ``s``.

    ``dub``: prosody prior = modal expression symbol over the whole target,
    content channel = the sample's content grid.
    ``tts``: reference = another sample of the same speaker (same expression
    preferred, corpus order), content channel ABSENT.
    """
    lay = s.tokens.layout
    L = s.length
    if mode == "dub":
        prior = np.full((lay.m, L), 2 * s.expression, dtype=np.int64)
        return ConditioningContext(lay, s.speaker, L, prosody_prior=prior, content_channel=s.tokens.content)
    if mode == "tts":
        if corpus is None:
            raise DomainError("tts mode needs the corpus to pick a reference")
        same_speaker = [o for o in corpus if o is not s and o.speaker == s.speaker]
        if not same_speaker:
            raise DomainError(f"no same-speaker reference available for speaker {s.speaker}")
        same_expr = [o for o in same_speaker if o.expression == s.expression]
        ref = (same_expr or same_speaker)[0]
        return ConditioningContext(lay, s.speaker, L, reference=ref.tokens, content_channel=ABSENT)
    raise DomainError(f"unknown mode {mode!r}")


def context_expression(cfg: ToyConfig, ctx: ConditioningContext) -> int:
    """Expression id carried by a context's prosody cue."""
    if ctx.prosody_prior is not None:
        symbols = np.unique(ctx.prosody_prior)
    elif ctx.reference is not None:
        symbols = _modal_prosody(cfg.layout, ctx.reference.prosody)
    else:
        raise DomainError("context carries no prosody cue")
    expressions = np.unique(symbols // 2)
    if expressions.size != 1:
        raise DomainError(f"prosody cue mixes expressions {expressions.tolist()}")
    e = int(expressions[0])
    if not 0 <= e < cfg.expressions:
        raise DomainError(f"unknown expression {e}")
    return e


def true_conditional(cfg: ToyConfig, ctx: ConditioningContext, content: Optional[np.ndarray] = None) -> ProductLaw:
    """Exact target law ``q(prosody, acoustic | ctx, content)`` as a product of per-position marginals.

    ``content`` defaults to the context's content channel.
    """
    lay = cfg.layout
    if not 0 <= ctx.speaker < cfg.speakers:
        raise DomainError(f"unknown speaker {ctx.speaker}")
    e = context_expression(cfg, ctx)
    if content is None:
        if not ctx.has_content:
            raise DomainError("content channel is ABSENT; pass the target content explicitly")
        content = ctx.content_channel
    content = np.asarray(content, dtype=np.int64)
    L = ctx.target_length
    if content.shape != (lay.n, L):
        raise ShapeError(f"content grid must be ({lay.n}, {L}), got {content.shape}")
    table = np.zeros((lay.generative_streams, L, lay.v))
    table[: lay.m, :, 2 * e] += cfg.prosody_weights[0]
    table[: lay.m, :, 2 * e + 1] += cfg.prosody_weights[1]
    acoustic = acoustic_grid(lay, content[0], ctx.speaker)
    for r in range(lay.k):
        table[lay.m + r, np.arange(L), acoustic[r]] = 1.0
    return ProductLaw(lay, table)


def write_corpus(path, corpus: ToyCorpus) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        header = {"schema_version": SCHEMA_VERSION, "config": corpus.config.to_json(), "count": len(corpus)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in corpus:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    return path


def read_corpus(path) -> ToyCorpus:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty corpus file")
    header = json.loads(lines[0])
    cfg = ToyConfig.from_json(header["config"])
    samples = tuple(ToySample.from_json(json.loads(line)) for line in lines[1:] if line.strip())
    if "count" in header and header["count"] != len(samples):
        raise ValueError(f"{path}: header declares {header['count']} samples, found {len(samples)}")
    return ToyCorpus(cfg, samples)


def split_pairs(corpus: ToyCorpus, holdout: float = 0.2, seed: int = 0) -> tuple[list[int], list[int]]:
    """Split sample indices by ``(speaker, expression)`` pair; ``holdout`` of the pairs go to evaluation."""
    pairs = sorted(corpus.by_pair())
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_eval = max(1, int(round(holdout * len(pairs)))) if len(pairs) > 1 else 0
    eval_pairs = {pairs[i] for i in order[:n_eval]}
    train, held = [], []
    for i, s in enumerate(corpus):
        (held if (s.speaker, s.expression) in eval_pairs else train).append(i)
    return train, held


def split_samples(corpus: ToyCorpus, holdout: float = 0.2, seed: int = 0) -> tuple[list[int], list[int]]:
    """Random sample-level split; ``holdout`` of the samples (at least one) go to evaluation."""
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_eval = min(len(corpus) - 1, max(1, int(round(holdout * len(corpus)))))
    return sorted(order[n_eval:].tolist()), sorted(order[:n_eval].tolist())


def training_examples(corpus: ToyCorpus, indices: Iterable[int], mode: str) -> list[tuple[GenerativeTarget, ConditioningContext]]:
    return [(corpus[i].target(), context_of(corpus[i], mode, corpus)) for i in indices]
