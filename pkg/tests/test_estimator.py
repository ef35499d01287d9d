import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from bwmark.dataset import DatasetConfig, generate_flows
from bwmark.estimator import BMNetClassifier, FlowSerializer, MaskedPretrainer
from bwmark.waveform import ValidationError

TINY = dict(d_model=8, n_state=4, n_layers=1)


def _trivial(rng, n=160):
    X = rng.integers(0, 2, (n, 4, 16)).astype(np.float32)
    y = rng.integers(0, 4, n)
    X[:, :, 0] = (y > 0)[:, None]
    return X, y


def test_serializer_shapes():
    flows = generate_flows(DatasetConfig(flows_per_class=1, trace={"M": 8}), 0)
    X = FlowSerializer(M=8).fit_transform(flows)
    assert X.shape == (4, 8, 512) and set(np.unique(X)) <= {0, 1}
    with pytest.raises(ValidationError):
        FlowSerializer().transform([1, 2])


def test_pretrainer_features(rng):
    X, _ = _trivial(rng, 40)
    pre = MaskedPretrainer(steps=5, batch_size=8, **TINY).fit(X)
    assert len(pre.loss_curve_) == 5
    assert pre.transform(X).shape == (40, 8)
    with pytest.raises(ValidationError):
        pre.transform(X[:, :, :8])


def test_classifier_binary_and_proba(rng):
    X, y = _trivial(rng)
    clf = BMNetClassifier(n_classes=2, epochs=15, batch_size=16, lr=1e-2, **TINY).fit(X[:120], y[:120])
    assert clf.score(X[120:], y[120:]) >= 0.95
    P = clf.predict_proba(X[120:])
    np.testing.assert_allclose(P.sum(1), 1, atol=1e-6)
    assert set(clf.predict(X)) <= {0, 1}


def test_classifier_from_pretrained(rng):
    X, y = _trivial(rng, 60)
    pre = MaskedPretrainer(steps=3, batch_size=8, **TINY).fit(X)
    clf = BMNetClassifier(pretrained=pre, epochs=1, batch_size=16).fit(X, y)
    assert clf.encoder_config_.d_model == 8 and clf.classes_.tolist() == [0, 1, 2, 3]
    # the pretrained backbone itself is left untouched
    assert MaskedPretrainer(steps=3, batch_size=8, **TINY).fit(X).params_["W_proj"].equal(
        pre.params_["W_proj"])


def test_sklearn_protocol(rng):
    clf = BMNetClassifier(epochs=3)
    assert clone(clf).get_params() == clf.get_params()
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((1, 4, 16)))
    with pytest.raises(NotFittedError):
        BMNetClassifier(pretrained=MaskedPretrainer()).fit(np.zeros((4, 4, 16)), [0, 1, 2, 3])
    with pytest.raises(ValidationError):
        clf.fit(np.full((4, 4, 16), 2.0), [0, 1, 2, 3])
    with pytest.raises(ValidationError):
        clf.fit(np.zeros((4, 16)), [0, 1, 2, 3])
    with pytest.raises(ValidationError):
        clf.fit(np.zeros((4, 4, 16)), [0, 1])


def test_pipeline_end_to_end():
    flows = generate_flows(DatasetConfig(flows_per_class=4, trace={"M": 8}), 0)
    y = np.array([f.label for f in flows])
    pipe = make_pipeline(FlowSerializer(M=8), BMNetClassifier(n_classes=2, epochs=1, **TINY))
    pipe.fit(flows, y)
    assert pipe.predict(flows).shape == (16,)
