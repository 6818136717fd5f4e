import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import det_brute_force

from streamkws.data import CorpusSpec, generate_corpus
from streamkws.evaluation import (BENCH_HEADER, contains_run, det_csv, det_curve, evaluate_ftm, evaluate_vtd,
                                  ftr_at_frr, prefix_score, run_bench)
from streamkws.model import ModelConfig, forward_full, init_params
from streamkws.runtime import tail_score

scores = st.lists(st.floats(0, 1), min_size=1, max_size=20)


@settings(max_examples=60, deadline=None)
@given(scores, scores)
def test_det_curve_matches_brute_force(pos, neg):
    points = det_curve(pos, neg)
    thresholds = [p.threshold for p in points]
    assert thresholds == sorted(thresholds)
    for p in points:
        assert (p.false_trigger_rate, p.frr) == pytest.approx(det_brute_force(pos, neg, p.threshold))
    frr = [p.frr for p in points]
    assert all(b >= a for a, b in zip(frr, frr[1:]))
    assert points[0].frr == 0.0 and points[-1].false_trigger_rate == 0.0


def test_ftr_at_frr_and_csv():
    points = det_curve([0.9, 0.8, 0.7], [0.1, 0.75, 0.2])
    assert ftr_at_frr(points, 0.01) == pytest.approx(1 / 3)
    assert ftr_at_frr(points, 0.34) == 0.0
    text = det_csv(points)
    assert text.splitlines()[0] == "threshold,false_trigger_rate,frr"
    assert text.splitlines()[-1] == "inf,0.0,1.0"
    with pytest.raises(ValueError):
        det_curve([], [0.1])


def test_contains_run():
    assert contains_run([5, 0, 1, 2, 3], [0, 1, 2, 3])
    assert not contains_run([0, 1, 3, 2], [0, 1, 2, 3])


@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, ffn_dim=8, lstm_hidden=4, shift=4, precision="f64")
    corpus = generate_corpus(CorpusSpec(n_true=6, n_confusable=6, n_negative=4))
    return cfg, init_params(cfg, 0), corpus.train


def test_prefix_score_streaming_and_vanilla_agree_with_full_pass(small_model):
    cfg, params, utts = small_model
    x = utts[0].features
    full = forward_full(x[:17], params, cfg).phrase_positive_prob()
    assert prefix_score(params, cfg, x, 17) == pytest.approx(tail_score(full), abs=1e-10)
    vcfg = cfg.replace(shift=0)
    assert prefix_score(params, vcfg, x, 17) == pytest.approx(
        tail_score(forward_full(x[:17], params, vcfg).phrase_positive_prob()))


def test_evaluate_ftm_and_vtd(small_model):
    cfg, params, utts = small_model
    res = evaluate_ftm(params, cfg, utts, 6)
    assert len(res.scores) == len(utts) and 0.0 <= res.ftr_at_1pct <= 1.0
    with pytest.raises(ValueError):
        evaluate_ftm(params, cfg, utts, -1)
    vtd = evaluate_vtd(params, cfg, utts, (0, 1, 2, 3))
    assert vtd.n_target + vtd.n_nontarget == len(utts)


def test_run_bench_rows(small_model):
    cfg, params, _ = small_model
    rows = run_bench(params, cfg, [16, 40], repeats=2)
    assert [r.mode for r in rows] == ["full-pass", "streaming"] * 2
    assert rows[1].state_bytes == rows[3].state_bytes
    assert rows[0].block_median is None and rows[1].block_median > 0
    assert len(rows[1].csv_row().split(",")) == len(BENCH_HEADER.split(","))
    with pytest.raises(ValueError):
        run_bench(params, cfg, [40, 16])
    with pytest.raises(ValueError):
        run_bench(params, cfg.replace(shift=0), [16, 40])
