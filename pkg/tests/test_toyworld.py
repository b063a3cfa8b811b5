import hashlib
import json
import math
import time

import numpy as np
import pytest

from dubflow.errors import ConfigError, DomainError
from dubflow.tokens import ABSENT, FactorizedTokens, StreamLayout
from dubflow.toyworld import (
    ToyConfig,
    ToySample,
    context_of,
    gen_corpus,
    read_corpus,
    split_pairs,
    split_samples,
    true_conditional,
    verify_sample,
    write_corpus,
)


def test_every_sample_obeys_the_law(toy_cfg):
    corpus = gen_corpus(toy_cfg, 200)
    for s in corpus:
        ok, problems = verify_sample(toy_cfg, s)
        assert ok, problems
        assert 5 * s.length == 16 * s.frames


def test_fixed_shape_config():
    cfg = ToyConfig(phonemes=2, num_phonemes=(2, 2), duration_beats=(1, 1))
    for s in gen_corpus(cfg, 20):
        assert s.frames == 10 and s.length == 32


def test_content_and_acoustic_formulas(toy_cfg):
    s = gen_corpus(toy_cfg, 1)[0]
    v = toy_cfg.layout.v
    governing = np.repeat(s.phonemes, [16 * d for d in s.durations])
    assert np.array_equal(s.tokens.content[0], governing)
    assert np.array_equal(s.tokens.content[1], (governing + np.arange(s.length)) % v)
    for r in range(toy_cfg.layout.k):
        assert np.array_equal(s.tokens.acoustic[r], (governing + s.speaker + r) % v)


def test_generation_is_deterministic(toy_cfg, tmp_path):
    digests = []
    for name in ("a", "b"):
        path = write_corpus(tmp_path / f"{name}.toyc.jsonl", gen_corpus(toy_cfg, 30))
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_corpus_file_round_trip(toy_cfg, tmp_path):
    corpus = gen_corpus(toy_cfg, 12)
    path = write_corpus(tmp_path / "c.toyc.jsonl", corpus)
    lines = path.read_text().splitlines()
    assert len(lines) == 13 and json.loads(lines[0])["count"] == 12
    assert read_corpus(path) == corpus


def test_corpus_count_mismatch(toy_cfg, tmp_path):
    path = write_corpus(tmp_path / "c.toyc.jsonl", gen_corpus(toy_cfg, 3))
    path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(ValueError):
        read_corpus(path)


def test_prosody_frequencies():
    cfg = ToyConfig(num_phonemes=(4, 4), duration_beats=(3, 3), seed=5)
    corpus = gen_corpus(cfg, 600)
    hits = total = 0
    for s in corpus:
        hits += int(np.count_nonzero(s.tokens.prosody == 2 * s.expression))
        total += s.tokens.prosody.size
    assert total >= 100_000
    assert abs(hits / total - 0.7) < 0.01


@pytest.mark.parametrize(
    "kwargs,needle",
    [
        (dict(layout=StreamLayout(1, 2, 3, 4)), "v >= max(P, E, S) + 2"),
        (dict(num_phonemes=(3, 2)), "num_phonemes"),
        (dict(duration_beats=(0, 2)), "duration_beats"),
        (dict(prosody_weights=(0.5, 0.6)), "prosody_weights"),
    ],
)
def test_config_invariants(kwargs, needle):
    with pytest.raises(ConfigError) as info:
        ToyConfig(**kwargs)
    assert needle in str(info.value)


def test_verify_flags_corrupted_acoustic(toy_cfg):
    s = gen_corpus(toy_cfg, 1)[0]
    acoustic = s.tokens.acoustic.copy()
    acoustic[1, 3] = (acoustic[1, 3] + 1) % toy_cfg.layout.v
    bad = ToySample(s.phonemes, s.durations, s.expression, s.speaker,
                    FactorizedTokens(s.tokens.layout, s.tokens.prosody, s.tokens.content, acoustic))
    ok, problems = verify_sample(toy_cfg, bad)
    assert not ok and len(problems) == 1 and problems[0].startswith("acoustic[1,3]")


def test_verify_flags_length(toy_cfg):
    s = gen_corpus(toy_cfg, 1)[0]
    t = s.tokens
    short = FactorizedTokens(t.layout, t.prosody[:, :-1], t.content[:, :-1], t.acoustic[:, :-1])
    ok, problems = verify_sample(toy_cfg, ToySample(s.phonemes, s.durations, s.expression, s.speaker, short))
    assert not ok and "length violation" in problems[0]


def test_dub_context(toy_cfg, toy_corpus):
    s = toy_corpus[0]
    ctx = context_of(s, "dub")
    assert ctx.mode == "dub" and ctx.reference is None and ctx.target_length == s.length
    assert (ctx.prosody_prior == 2 * s.expression).all()
    assert np.array_equal(ctx.content_channel, s.tokens.content)


def test_tts_context(toy_cfg, toy_corpus):
    s = toy_corpus[0]
    ctx = context_of(s, "tts", toy_corpus)
    assert ctx.mode == "tts" and ctx.content_channel is ABSENT and ctx.target_length == s.length
    assert ctx.reference is not s.tokens
    others = [o for o in toy_corpus if o is not s and o.speaker == s.speaker]
    assert any(o.tokens == ctx.reference for o in others)


def test_tts_needs_same_speaker(toy_cfg):
    corpus = gen_corpus(toy_cfg, 1)
    with pytest.raises(DomainError):
        context_of(corpus[0], "tts", corpus)


def test_true_conditional_structure(toy_cfg, toy_corpus):
    s = toy_corpus[3]
    law = true_conditional(toy_cfg, context_of(s, "dub"))
    L, e = s.length, s.expression
    table = law.marginals()
    assert np.allclose(table[0, :, 2 * e], 0.7) and np.allclose(table[0, :, 2 * e + 1], 0.3)
    assert (law.support_sizes()[1:] == 1).all()
    modal = np.vstack([np.full((1, L), 2 * e), s.tokens.acoustic])
    assert math.isclose(law.prob(modal), 0.7**L, rel_tol=1e-12)
    assert law.prob(s.target().tokens) > 0


def test_true_conditional_needs_content(toy_cfg, toy_corpus):
    ctx = context_of(toy_corpus[0], "tts", toy_corpus)
    with pytest.raises(DomainError):
        true_conditional(toy_cfg, ctx)
    law = true_conditional(toy_cfg, ctx, content=toy_corpus[0].tokens.content)
    assert law.length == toy_corpus[0].length


def test_true_conditional_is_fast(toy_cfg):
    s = max(gen_corpus(toy_cfg, 50), key=lambda x: x.length)
    start = time.perf_counter()
    law = true_conditional(toy_cfg, context_of(s, "dub"))
    marg = law.marginals()
    assert time.perf_counter() - start < 1.0
    assert marg.shape == (4, s.length, 8)


def test_pair_split_holds_out_whole_pairs(toy_corpus):
    train, held = split_pairs(toy_corpus, 0.2, seed=0)
    pair = lambda i: (toy_corpus[i].speaker, toy_corpus[i].expression)
    assert held and train and not {pair(i) for i in train} & {pair(i) for i in held}
    assert sorted(train + held) == list(range(len(toy_corpus)))


def test_sample_split(toy_corpus):
    train, held = split_samples(toy_corpus, 0.25, seed=1)
    assert len(held) == 6 and sorted(train + held) == list(range(len(toy_corpus)))
