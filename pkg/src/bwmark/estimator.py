"""scikit-learn style wrappers around serialization, pre-training and classification."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import encoder as enc
from . import training as T
from .encoder import EncoderConfig
from .trace import FlowTrace, flows_to_strides
from .waveform import ValidationError


def _check_strides(X, L_s=None) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValidationError(f"expected strides of shape (n, N, L_s), got {X.shape}")
    if L_s is not None and X.shape[2] != L_s:
        raise ValidationError(f"stride length {X.shape[2]} != {L_s}")
    if X.size and not np.isin(X, (0, 1)).all():
        raise ValidationError("strides must be 0/1 bits")
    return X.astype(np.float32, copy=False)


class FlowSerializer(TransformerMixin, BaseEstimator):
    """Flows -> bit strides of shape ``(n, N, L_s)``. Stateless."""

    def __init__(self, M=64, H=52, P=12, L_s=512, anonymize=True):
        self.M = M
        self.H = H
        self.P = P
        self.L_s = L_s
        self.anonymize = anonymize

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        flows = list(X)
        if not all(isinstance(f, FlowTrace) for f in flows):
            raise ValidationError("FlowSerializer expects FlowTrace objects")
        return flows_to_strides(flows, self.M, self.H, self.P, self.L_s, anonymize=self.anonymize)


class _EncoderEstimator(BaseEstimator):
    def _enc_cfg(self, L_s):
        return EncoderConfig(L_s=L_s, d_model=self.d_model, n_state=self.n_state,
                             n_layers=self.n_layers, seed=self.random_state)


class MaskedPretrainer(TransformerMixin, _EncoderEstimator):
    """Masked-reconstruction pre-training; ``transform`` returns pooled features."""

    def __init__(self, d_model=32, n_state=8, n_layers=2, steps=1500, batch_size=32,
                 lr=1e-3, mask_ratio=0.9, optimizer="adamw", random_state=0):
        self.d_model = d_model
        self.n_state = n_state
        self.n_layers = n_layers
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.mask_ratio = mask_ratio
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_strides(X)
        cfg = T.TrainConfig("pretrain", steps=self.steps, batch_size=self.batch_size,
                            base_lr=self.lr, mask_ratio=self.mask_ratio,
                            optimizer=self.optimizer, seed=self.random_state)
        res = T.run_pretrain(cfg, X, self._enc_cfg(X.shape[2]))
        self.params_ = res.params
        self.encoder_config_ = res.encoder_config
        self.loss_curve_ = res.losses
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = _check_strides(X, self.encoder_config_.L_s)
        with torch.no_grad():
            h = enc.encode(enc.embed(torch.as_tensor(X), self.params_), self.params_,
                           self.encoder_config_)
        return h.mean(1).numpy()


class BMNetClassifier(ClassifierMixin, _EncoderEstimator):
    """Selective-scan flow classifier.

    ``pretrained`` may be a fitted :class:`MaskedPretrainer` (its backbone is
    copied) or ``None`` to train from scratch. ``n_classes=2`` merges all
    modulated labels into class 1.
    """

    def __init__(self, n_classes=4, pretrained=None, d_model=32, n_state=8, n_layers=2,
                 epochs=20, batch_size=32, lr=5e-3, optimizer="adamw", freeze_backbone=False,
                 random_state=0):
        self.n_classes = n_classes
        self.pretrained = pretrained
        self.d_model = d_model
        self.n_state = n_state
        self.n_layers = n_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.freeze_backbone = freeze_backbone
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_strides(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValidationError("X and y lengths differ")
        base, enc_cfg = None, self._enc_cfg(X.shape[2])
        if self.pretrained is not None:
            if not hasattr(self.pretrained, "params_"):
                raise NotFittedError("pretrained MaskedPretrainer is not fitted")
            base = self.pretrained.params_.clone()
            enc_cfg = self.pretrained.encoder_config_
        cfg = T.TrainConfig("finetune", epochs=self.epochs, batch_size=self.batch_size,
                            base_lr=self.lr, optimizer=self.optimizer,
                            freeze_backbone=self.freeze_backbone, seed=self.random_state)
        res = T.run_finetune(base, cfg, X, y, self.n_classes, enc_cfg)
        self.params_ = res.params
        self.encoder_config_ = replace(res.encoder_config, n_classes=self.n_classes)
        self.classes_ = np.arange(self.n_classes)
        self.loss_curve_ = res.losses
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return T.predict_logits(self.params_, _check_strides(X, self.encoder_config_.L_s),
                                self.encoder_config_)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[self.decision_function(X).argmax(1)]

    def score(self, X, y, sample_weight=None):
        # accuracy in the task's label space
        return super().score(X, T.collapse_labels(y, self.n_classes), sample_weight)
