import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import central_difference, ctc_loss_enumerate, frame_ce_definition

from streamkws.exceptions import ShapeError
from streamkws.losses import ctc_greedy_decode, ctc_loss, frame_ce_loss, log_softmax_backward
from streamkws.tensor import log_softmax


def _random_log_probs(rng, t_len, n_cls):
    return log_softmax(rng.normal(scale=2.0, size=(t_len, n_cls)))


def test_ctc_uniform_two_frames():
    # paths "aa", "a-", "-a" out of four equally likely ones
    loss, _ = ctc_loss(np.log(np.full((2, 2), 0.5)), [0])
    assert loss == pytest.approx(-math.log(0.75), abs=1e-14)


def test_ctc_empty_target_is_all_blank():
    lp = _random_log_probs(np.random.default_rng(0), 4, 3)
    loss, _ = ctc_loss(lp, [])
    assert loss == pytest.approx(-lp[:, -1].sum(), abs=1e-12)


def test_ctc_single_frame_single_label_is_feasible():
    lp = _random_log_probs(np.random.default_rng(1), 1, 3)
    loss, _ = ctc_loss(lp, [1])
    assert loss == pytest.approx(-lp[0, 1], abs=1e-12)


def test_ctc_infeasible_targets():
    lp = _random_log_probs(np.random.default_rng(2), 2, 3)
    loss, grad = ctc_loss(lp, [0, 0])  # repeats need a blank in between: 3 frames minimum
    assert math.isinf(loss) and not grad.any()
    loss, grad = ctc_loss(np.zeros((0, 3)), [0])
    assert math.isinf(loss)
    assert ctc_loss(np.zeros((0, 3)), [])[0] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.lists(st.integers(0, 2), max_size=3), st.integers(0, 10_000))
def test_ctc_matches_enumeration(t_len, vocab, labels, seed):
    labels = [l % vocab for l in labels]
    lp = _random_log_probs(np.random.default_rng(seed), t_len, vocab + 1)
    ref = ctc_loss_enumerate(lp, labels)
    loss, _ = ctc_loss(lp, labels)
    if math.isinf(ref):
        assert math.isinf(loss)
    else:
        assert loss == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("labels", [[0], [1, 1], [0, 2, 1], [2, 2, 2]])
def test_ctc_gradient_finite_differences(labels):
    lp = np.random.default_rng(7).normal(size=(7, 4))
    _, grad = ctc_loss(lp, labels)
    np.testing.assert_allclose(grad, central_difference(lambda: ctc_loss(lp, labels)[0], lp), atol=1e-7)


def test_ctc_gradient_through_log_softmax():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(6, 4))
    labels = [1, 0]
    _, g = ctc_loss(log_softmax(logits), labels)
    analytic = log_softmax_backward(g, log_softmax(logits))
    numeric = central_difference(lambda: ctc_loss(log_softmax(logits), labels)[0], logits)
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_ctc_rejects_bad_input():
    with pytest.raises(ShapeError):
        ctc_loss(np.zeros(3), [0])
    with pytest.raises(ValueError):
        ctc_loss(np.zeros((3, 3)), [2])  # column 2 is the blank


def test_greedy_decode():
    blank = 3
    best = [0, 0, blank, 0, 1, 1, blank, blank, 2]
    lp = np.full((len(best), 4), -5.0)
    lp[np.arange(len(best)), best] = 0.0
    assert ctc_greedy_decode(lp) == [0, 0, 1, 2]
    assert ctc_greedy_decode(np.zeros((0, 4))) == []


def test_frame_ce_matches_definition_and_gradient():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(5, 3))
    weights = [0.5, 2.0, 1.0]
    loss, grad = frame_ce_loss(logits, 1, weights)
    assert loss == pytest.approx(frame_ce_definition(logits, 1, weights), abs=1e-12)
    np.testing.assert_allclose(grad, central_difference(lambda: frame_ce_loss(logits, 1, weights)[0], logits),
                               atol=1e-8)
    with pytest.raises(ValueError):
        frame_ce_loss(logits, 3)
    with pytest.raises(ShapeError):
        frame_ce_loss(np.zeros((0, 2)), 0)


@pytest.mark.parametrize("t_len,vocab,labels", [(3, 2, [0]), (4, 2, [0, 1]), (5, 3, [2, 2]), (4, 1, [0, 0])])
def test_ctc_uniform_equals_path_count(t_len, vocab, labels):
    import itertools
    n_cls = vocab + 1
    count = 0
    for path in itertools.product(range(n_cls), repeat=t_len):
        collapsed = [k for j, k in enumerate(path) if k != vocab and (j == 0 or path[j - 1] != k)]
        count += collapsed == labels
    loss, _ = ctc_loss(np.full((t_len, n_cls), -np.log(n_cls)), labels)
    assert loss == pytest.approx(-np.log(count / n_cls ** t_len), abs=1e-12)
