import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.metrics import precision_recall_fscore_support

from bwmark import training as T
from bwmark.encoder import EncoderConfig
from bwmark.waveform import ValidationError

SMALL = EncoderConfig(L_s=8, d_model=8, n_state=4, n_layers=1, n_tokens_max=8, seed=0)


def _trivial(rng, n=200):
    """Class 1 iff every token's first bit is set; otherwise bits are noise."""
    X = rng.integers(0, 2, (n, 4, 8)).astype(np.float32)
    y = rng.integers(0, 2, n)
    X[:, :, 0] = y[:, None]
    return X, y


def test_split_is_stratified_disjoint_and_seeded():
    ids = [f"f{i:03d}" for i in range(100)]
    y = np.repeat([0, 1, 2, 3], 25)
    tr, te = T.split_flows(ids, y, seed=3)
    assert len(tr) == 80 and len(te) == 20 and not set(tr) & set(te)
    lab = dict(zip(ids, y))
    assert np.bincount([lab[i] for i in te]).tolist() == [5, 5, 5, 5]
    assert (tr, te) == T.split_flows(ids, y, seed=3)
    assert (tr, te) != T.split_flows(ids, y, seed=4)
    assert tr == sorted(tr)


def test_split_errors():
    with pytest.raises(ValidationError, match="fewer than 2"):
        T.split_flows(["a", "b", "c"], [0, 0, 1])
    with pytest.raises(ValidationError):
        T.split_flows(["a", "a"], [0, 0])
    with pytest.raises(ValidationError):
        T.split_flows(["a", "b"], [0, 0], train_frac=1.0)


def test_collapse_labels():
    assert T.collapse_labels([0, 1, 2, 3], 2).tolist() == [0, 1, 1, 1]
    assert T.collapse_labels([0, 3], 4).tolist() == [0, 3]
    with pytest.raises(ValidationError):
        T.collapse_labels([0], 3)


def test_lr_schedule():
    cfg = T.TrainConfig(base_lr=1.0, warmup_steps=2)
    assert T._lr_at(cfg, 0, 10) == 0.5 and T._lr_at(cfg, 1, 10) == 1.0
    assert T._lr_at(cfg, 2, 10) == pytest.approx(1.0)
    assert T._lr_at(T.TrainConfig(base_lr=1.0), 10, 10) == pytest.approx(0.0, abs=1e-12)


def test_config_roundtrip_and_validation():
    cfg = T.TrainConfig("finetune", epochs=3, optimizer="sgd")
    assert T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in (dict(stage="x"), dict(optimizer="lbfgs"), dict(mask_ratio=1.5), dict(batch_size=0)):
        with pytest.raises(ValidationError):
            T.TrainConfig(**bad)


def test_binary_confusion_metrics():
    rep = T.report_from_confusion([[982, 4], [3, 986]])
    for k in ("precision", "recall", "f1"):
        assert round(100 * rep.weighted[k], 2) == 99.65
    assert rep.accuracy == pytest.approx(1968 / 1975)


def test_metrics_hand_example():
    rep = T.report_from_confusion([[2, 0], [1, 1]])
    np.testing.assert_allclose(rep.precision, [2 / 3, 1])
    np.testing.assert_allclose(rep.recall, [1, 0.5])
    np.testing.assert_allclose(rep.f1, [0.8, 2 / 3])
    assert rep.macro["f1"] == pytest.approx((0.8 + 2 / 3) / 2)


def test_metrics_zero_division():
    rep = T.report_from_confusion([[3, 0], [2, 0]])
    assert rep.precision[1] == 0 and rep.f1[1] == 0
    with pytest.raises(ValidationError):
        T.report_from_confusion([[0, 0], [0, 0]])
    with pytest.raises(ValidationError):
        T.evaluate_predictions([], [], 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_metrics_agree_with_sklearn(pairs):
    yt, yp = map(np.array, zip(*pairs))
    rep = T.evaluate_predictions(yt, yp, 4)
    for avg in ("macro", "weighted"):
        p, r, f, _ = precision_recall_fscore_support(yt, yp, labels=range(4), average=avg,
                                                     zero_division=0)
        got = getattr(rep, avg)
        assert got["precision"] == pytest.approx(p) and got["recall"] == pytest.approx(r)
        assert got["f1"] == pytest.approx(f)


def test_report_serialization():
    rep = T.report_from_confusion([[5, 1], [0, 4]], ["natural", "watermarked"])
    d = json.loads(rep.to_json())
    assert d["accuracy"] == 0.9 and d["labels"] == ["natural", "watermarked"]
    assert rep.to_csv().splitlines()[0].startswith("class")
    assert "5,1" in rep.confusion_csv()


def test_steps_to_accuracy():
    log = [{"step": 25, "accuracy": 0.9}, {"step": 50, "accuracy": 0.96}]
    assert T.steps_to_accuracy(log, 0.95) == 50
    assert T.steps_to_accuracy(log, 0.99) is None


def test_pretrain_learns_zero_corpus():
    X = np.zeros((64, 4, 8), np.float32)
    res = T.run_pretrain(T.TrainConfig(steps=200, batch_size=16, base_lr=1e-2), X, SMALL, X_heldout=X)
    assert res.eval_log[-1]["heldout_mse"] < 0.01
    assert res.eval_log[-1]["heldout_mse"] < res.eval_log[0]["heldout_mse"]


def test_zero_step_pretrain_is_init():
    from bwmark.encoder import init_params
    res = T.run_pretrain(T.TrainConfig(steps=0), np.zeros((4, 4, 8), np.float32), SMALL)
    init = init_params(SMALL)
    assert all(torch.equal(res.params[k], init[k]) for k in init) and res.losses == []


def test_finetune_trivial_dataset(rng):
    X, y = _trivial(rng)
    cfg = T.TrainConfig("finetune", epochs=15, batch_size=16, base_lr=1e-2)
    res = T.run_finetune(None, cfg, X[:150], y[:150], 2, SMALL)
    assert T.evaluate(res.params, X[150:], y[150:], 2).accuracy >= 0.99


def test_frozen_backbone_beats_chance(rng):
    X, y = _trivial(rng)
    base = T.run_pretrain(T.TrainConfig(steps=100, batch_size=16, base_lr=1e-2), X[:150], SMALL).params
    before = {k: v.detach().clone() for k, v in base.items() if k.startswith("layers.")}
    cfg = T.TrainConfig("finetune", epochs=20, batch_size=16, base_lr=3e-2, freeze_backbone=True)
    res = T.run_finetune(base, cfg, X[:150], y[:150], 2, SMALL)
    assert all(torch.equal(before[k], res.params[k]) for k in before)
    assert T.evaluate(res.params, X[150:], y[150:], 2).accuracy > 0.6


def test_random_labels_near_chance(rng):
    X = rng.integers(0, 2, (300, 4, 8)).astype(np.float32)
    y = rng.integers(0, 2, 300)
    cfg = T.TrainConfig("finetune", epochs=5, batch_size=16, base_lr=1e-2)
    res = T.run_finetune(None, cfg, X[:200], y[:200], 2, SMALL)
    acc = T.evaluate(res.params, X[200:], y[200:], 2).accuracy
    assert 0.3 < acc < 0.7


def test_finetune_is_deterministic_and_logs(rng):
    X, y = _trivial(rng, 64)
    cfg = T.TrainConfig("finetune", epochs=2, batch_size=16, eval_every=2, seed=5)
    a = T.run_finetune(None, cfg, X, y, 2, SMALL, X, y)
    b = T.run_finetune(None, cfg, X, y, 2, SMALL, X, y)
    assert a.losses == b.losses and len(a.losses) == 8
    assert [e["step"] for e in a.eval_log] == [2, 4, 6, 8]
    assert a.loss_csv().splitlines()[0] == "step,loss"


def test_finetune_missing_class(rng):
    X, _ = _trivial(rng, 20)
    with pytest.raises(ValidationError, match="absent"):
        T.run_finetune(None, T.TrainConfig("finetune", epochs=1), X, np.zeros(20, int), 2, SMALL)


def test_pretrain_rejects_empty():
    with pytest.raises(ValidationError):
        T.run_pretrain(T.TrainConfig(steps=1), np.zeros((0, 4, 8)), SMALL)
