import numpy as np
import pytest
from sklearn.base import clone

from streamkws.data import CorpusSpec, generate_corpus
from streamkws.estimator import StreamingTriggerDetector
from streamkws.exceptions import ShapeError
from streamkws.validation import check_phrase_labels, check_sequences, check_token_lists

SMALL = dict(d_model=8, n_heads=2, n_layers=1, ffn_dim=8, lstm_hidden=4, shift=4, epochs=2, precision="f64")


@pytest.fixture(scope="module")
def fitted():
    corpus = generate_corpus(CorpusSpec(n_true=10, n_confusable=10, n_negative=4))
    X = [u.features for u in corpus.train]
    y = [u.phrase_label for u in corpus.train]
    tokens = [u.tokens for u in corpus.train]
    return StreamingTriggerDetector(**SMALL).fit(X, y, tokens=tokens), X, y


def test_params_round_trip_and_clone():
    est = StreamingTriggerDetector(**SMALL)
    assert est.get_params()["shift"] == 4
    est.set_params(shift=2)
    assert clone(est).get_params() == est.get_params()


def test_fitted_api(fitted):
    est, X, y = fitted
    proba = est.predict_proba(X[:3])
    assert proba.shape == (3, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X).tolist()) <= {0, 1}
    assert 0.0 <= est.score(X, y) <= 1.0
    emb = est.transform(X[:2])
    assert emb[0].shape == (len(X[0]), 8)
    assert len(est.metrics_) == 2


def test_stream_session_agrees_with_decision_function(fitted):
    est, X, _ = fitted
    session = est.stream(threshold=0.0)
    session.push(X[0])
    session.finish()
    assert session.smoothed_score() == pytest.approx(est.decision_function(X[:1])[0], abs=1e-10)


def test_checkpoint_round_trip(tmp_path, fitted):
    est, X, _ = fitted
    est.save(tmp_path / "m.ckpt")
    back = StreamingTriggerDetector.from_checkpoint(tmp_path / "m.ckpt", epochs=2)
    np.testing.assert_array_equal(back.decision_function(X[:4]), est.decision_function(X[:4]))


def test_fit_without_tokens_uses_phrase_loss_only():
    rng = np.random.default_rng(0)
    X = [rng.normal(size=(12, 3)) for _ in range(6)]
    est = StreamingTriggerDetector(**SMALL).fit(X, [0, 1] * 3)
    assert est.config_.lambda_ctc == 0.0


def test_unfitted_and_bad_input(fitted):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        StreamingTriggerDetector().predict([np.zeros((3, 2))])
    est = fitted[0]
    with pytest.raises(ShapeError):
        est.predict([np.zeros((3, 5))])


def test_validation_helpers():
    with pytest.raises(ShapeError):
        check_sequences(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        check_sequences([np.zeros((3, 2)), np.zeros((3, 4))])
    with pytest.raises(ValueError):
        check_sequences([np.array([[np.nan]])])
    with pytest.raises(ShapeError):
        check_sequences([np.zeros((0, 2))])
    assert len(check_sequences(np.zeros((2, 3, 4)))) == 2
    with pytest.raises(ValueError):
        check_phrase_labels([0, 2], 2)
    with pytest.raises(ShapeError):
        check_phrase_labels([0, 1], 3)
    with pytest.raises(ValueError):
        check_token_lists([[9]], 1, vocab_size=8)
