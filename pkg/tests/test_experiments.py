import copy
import csv
import io
import json
import math

import jsonschema
import numpy as np
import pytest

from dubflow.denoiser import ExactPosteriorDenoiser, UniformDenoiser
from dubflow.errors import DomainError
from dubflow.experiments import (
    CSV_FIELDS,
    DEFAULT_NFE_LIST,
    SweepConfig,
    TwoStageConfig,
    compute_tv,
    run_nfe_sweep,
    run_two_stage,
    validate_two_stage_report,
)
from dubflow.laws import ProductLaw
from dubflow.tokens import StreamLayout
from dubflow.toyworld import ToyConfig, gen_corpus

BIN = StreamLayout(m=1, n=1, k=1, v=2)


def _law(p):
    return ProductLaw(BIN, np.array([[[p, 1 - p]], [[1.0, 0.0]]]))


def test_tv_of_constant_samples():
    samples = np.zeros((100, 2, 1), dtype=int)
    # stream 0 is a fair coin (TV 0.5), stream 1 is matched exactly (TV 0)
    assert math.isclose(compute_tv(samples, _law(0.5)), 0.25)
    one_stream = ProductLaw(StreamLayout(m=1, n=1, k=1, v=2), np.array([[[0.5, 0.5]], [[0.5, 0.5]]]))
    assert math.isclose(compute_tv(samples, one_stream), 0.5)


def test_tv_zero_for_exact_frequencies():
    samples = np.zeros((8, 2, 1), dtype=int)
    samples[6:, 0, 0] = 1
    assert compute_tv(samples, _law(0.75)) == 0.0


def test_tv_concentrates():
    r = np.random.default_rng(0)
    samples = np.zeros((10_000, 2, 1), dtype=int)
    samples[:, 0, 0] = r.random(10_000) >= 0.7
    assert compute_tv(samples, _law(0.7)) < 0.03


@pytest.mark.parametrize("nfe", [(), (0, 1), (4, 2), (2, 2)])
def test_sweep_config_validation(nfe):
    with pytest.raises(DomainError):
        SweepConfig(nfe_list=nfe)


def test_default_nfe_list():
    assert SweepConfig().nfe_list == DEFAULT_NFE_LIST == (1, 2, 4, 8, 16, 32, 64, 128)


@pytest.fixture(scope="module")
def sweep_world():
    cfg = ToyConfig()
    return cfg, gen_corpus(cfg, 40)


def test_single_row_sweep(sweep_world):
    cfg, corpus = sweep_world
    report = run_nfe_sweep(SweepConfig(nfe_list=(1,), samples=50), ExactPosteriorDenoiser.for_toy(cfg), corpus)
    assert len(report.rows) == 1 and report.rows[0]["nfe"] == 1


def test_sweep_report_is_reproducible(sweep_world):
    cfg, corpus = sweep_world
    sc = SweepConfig(nfe_list=(1, 4, 16), samples=80, seed=3)
    a = run_nfe_sweep(sc, ExactPosteriorDenoiser.for_toy(cfg), corpus)
    b = run_nfe_sweep(sc, ExactPosteriorDenoiser.for_toy(cfg), corpus, threads=3)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()


def test_sweep_rows_and_csv(sweep_world):
    cfg, corpus = sweep_world
    report = run_nfe_sweep(SweepConfig(nfe_list=(2, 8), samples=40), UniformDenoiser(cfg.layout), corpus)
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == CSV_FIELDS and [int(r["nfe"]) for r in rows] == [2, 8]
    for row in report.rows:
        assert all(math.isfinite(row[m]) for m in ("token_accuracy", "tv_distance", "mean_nll"))
    payload = json.loads(report.to_json())
    assert payload["config"]["nfe_list"] == [2, 8] and payload["rows"] == report.rows


def test_oracle_beats_uniform_in_sweep(sweep_world):
    cfg, corpus = sweep_world
    sc = SweepConfig(nfe_list=(8,), samples=100)
    exact = run_nfe_sweep(sc, ExactPosteriorDenoiser.for_toy(cfg), corpus).rows[0]
    uniform = run_nfe_sweep(sc, UniformDenoiser(cfg.layout), corpus).rows[0]
    assert exact["mean_nll"] < uniform["mean_nll"] and exact["tv_distance"] < uniform["tv_distance"]


def test_timing_is_opt_in(sweep_world):
    cfg, corpus = sweep_world
    d = ExactPosteriorDenoiser.for_toy(cfg)
    quiet = run_nfe_sweep(SweepConfig(nfe_list=(1,), samples=10), d, corpus)
    timed = run_nfe_sweep(SweepConfig(nfe_list=(1,), samples=10, timing=True), d, corpus)
    assert quiet.rows[0]["walltime_ms"] is None and timed.rows[0]["walltime_ms"] >= 0


SMALL = TwoStageConfig(corpus_size=24, pretrain_steps=150, adapt_steps=150, eval_repeats=1, seed=2)


def test_two_stage_small_run():
    result = run_two_stage(SMALL)
    report = result.report
    validate_two_stage_report(report)
    for arm in report["arms"].values():
        assert not arm["diverged"] and math.isfinite(arm["final_loss"])
    assert report["arms"]["scratch"]["steps"] == {"scratch": 300}
    assert report["eval"]["oracle_loss"] < report["eval"]["uniform_loss"]


def test_zero_adaptation_keeps_pretrained_state():
    cfg = TwoStageConfig(corpus_size=24, pretrain_steps=100, adapt_steps=0, eval_repeats=1)
    result = run_two_stage(cfg)
    arm = result.report["arms"]["pretrain_adapt"]
    assert arm["final_digest"] == arm["pretrain_digest"]
    assert result.adapted.same_parameters(result.pretrained)


def test_two_stage_is_reproducible():
    assert run_two_stage(SMALL).report == run_two_stage(SMALL).report


def test_schema_rejects_malformed_report():
    report = copy.deepcopy(run_two_stage(TwoStageConfig(corpus_size=12, pretrain_steps=5, adapt_steps=5, eval_repeats=1)).report)
    del report["arms"]["scratch"]
    with pytest.raises(jsonschema.ValidationError):
        validate_two_stage_report(report)


@pytest.mark.parametrize("kw", [dict(pretrain_steps=0), dict(adapt_steps=-1), dict(lr=-1.0), dict(corpus_size=1)])
def test_two_stage_config_validation(kw):
    with pytest.raises(DomainError):
        TwoStageConfig(**kw)
