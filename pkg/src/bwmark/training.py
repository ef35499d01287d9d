"""Two-stage training (masked pre-training, then fine-tuning), flow-level splits and metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import encoder as enc
from .encoder import EncoderConfig, EncoderParams
from .waveform import ValidationError

log = logging.getLogger(__name__)

CLASS_LABELS_4 = ("natural", "sine", "square", "triangle")
CLASS_LABELS_2 = ("natural", "watermarked")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 5000
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1e-3
    mask_ratio: float = 0.9
    optimizer: str = "adamw"
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 0
    freeze_backbone: bool = False
    balanced: bool = True
    eval_every: int = 0
    seed: int = 0
    pretrain_checkpoint: str | None = None
    output_checkpoint: str | None = None

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValidationError("stage must be 'pretrain' or 'finetune'")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValidationError("base_lr must be > 0")
        if self.stage == "pretrain" and not 0 < self.mask_ratio < 1:
            raise ValidationError("mask_ratio must be in (0, 1)")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValidationError("optimizer must be 'adamw' or 'sgd'")
        if self.steps < 0 or self.epochs < 0:
            raise ValidationError("steps and epochs must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    # full-scale schedule
    "paper-vi-c": {
        "pretrain": TrainConfig("pretrain", steps=150_000, batch_size=128, base_lr=1e-3, mask_ratio=0.9),
        "finetune": TrainConfig("finetune", epochs=120, batch_size=128, base_lr=2e-3),
    },
    # single-core schedule: about 3 min pre-training and 1.5 min per fine-tune
    "desk": {
        "pretrain": TrainConfig("pretrain", steps=1500, batch_size=32, base_lr=1e-3, mask_ratio=0.9),
        "finetune": TrainConfig("finetune", epochs=20, batch_size=32, base_lr=5e-3),
    },
}


# ---------------------------------------------------------------------------
# splitting

def split_flows(flow_ids: Sequence[str], labels: Sequence[int], train_frac: float = 0.8,
                seed: int = 0) -> tuple[list[str], list[str]]:
    """Label-stratified, flow-level train/test split.

    Each class contributes ``round(train_frac * n_class)`` flows to training
    (at least one to each side). Returned id lists are sorted.
    """
    flow_ids = list(flow_ids)
    labels = np.asarray(labels)
    if len(flow_ids) < 2:
        raise ValidationError("need at least 2 flows to split")
    if len(set(flow_ids)) != len(flow_ids):
        raise ValidationError("duplicate flow ids")
    if not 0 < train_frac < 1:
        raise ValidationError("train_frac must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        ids = sorted(fid for fid, lab in zip(flow_ids, labels) if lab == c)
        if len(ids) < 2:
            raise ValidationError(f"class {c} has fewer than 2 flows; cannot stratify")
        ids = [ids[i] for i in rng.permutation(len(ids))]
        k = min(max(int(round(train_frac * len(ids))), 1), len(ids) - 1)
        train += ids[:k]
        test += ids[k:]
    assert not set(train) & set(test)
    return sorted(train), sorted(test)


def collapse_labels(y, n_classes: int) -> np.ndarray:
    """Map labels to the task's label space: 2 classes merge every modulation into 1."""
    y = np.asarray(y, dtype=np.int64)
    if n_classes == 2:
        return (y > 0).astype(np.int64)
    if n_classes == 4:
        return y
    raise ValidationError("n_classes must be 2 or 4")


# ---------------------------------------------------------------------------
# optimization

def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    t = (step - cfg.warmup_steps) / max(total - cfg.warmup_steps, 1)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * min(t, 1.0)))


def _make_optimizer(cfg: TrainConfig, tensors):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(tensors, lr=cfg.base_lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(tensors, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


@dataclass
class TrainResult:
    params: EncoderParams
    encoder_config: EncoderConfig
    losses: list = field(default_factory=list)
    eval_log: list = field(default_factory=list)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, l in enumerate(self.losses):
            w.writerow([i, repr(float(l))])
        return buf.getvalue()


def run_pretrain(cfg: TrainConfig, X, enc_cfg: EncoderConfig, X_heldout=None,
                 params: EncoderParams | None = None) -> TrainResult:
    """Masked-token reconstruction training of the backbone.

    ``X`` is a stride array ``(n, N, L_s)``; labels are not used. Batches,
    masks and initialization all derive from ``cfg.seed``.
    """
    if cfg.stage != "pretrain":
        cfg = replace(cfg, stage="pretrain")
    X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValidationError("empty pretraining corpus")
    params = params.clone(requires_grad=True) if params is not None else enc.init_params(enc_cfg)
    rng = np.random.default_rng(cfg.seed)
    names = [k for k in params if not k.startswith("cls_")]
    opt = _make_optimizer(cfg, [params[k] for k in names])
    result = TrainResult(params, enc_cfg)
    heldout_mask = None
    if X_heldout is not None:
        X_heldout = torch.as_tensor(np.asarray(X_heldout), dtype=torch.float32)
        heldout_mask = enc.sample_mask(np.random.default_rng(cfg.seed + 1), X_heldout.shape[0],
                                       X_heldout.shape[1], cfg.mask_ratio)
        result.eval_log.append({"step": 0, "heldout_mse": _heldout_mse(params, X_heldout, heldout_mask, cfg, enc_cfg)})
    for step in range(cfg.steps):
        idx = rng.choice(X.shape[0], size=min(cfg.batch_size, X.shape[0]), replace=False)
        loss = enc.masked_pretrain_loss(X[idx], cfg.mask_ratio, params, rng, enc_cfg)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        for g in opt.param_groups:
            g["lr"] = _lr_at(cfg, step, cfg.steps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
        if cfg.eval_every and X_heldout is not None and (step + 1) % cfg.eval_every == 0:
            result.eval_log.append({"step": step + 1,
                                    "heldout_mse": _heldout_mse(params, X_heldout, heldout_mask, cfg, enc_cfg)})
    if X_heldout is not None and (not result.eval_log or result.eval_log[-1]["step"] != cfg.steps):
        result.eval_log.append({"step": cfg.steps,
                                "heldout_mse": _heldout_mse(params, X_heldout, heldout_mask, cfg, enc_cfg)})
    return result


def _heldout_mse(params, X, mask, cfg, enc_cfg, chunk=256):
    with torch.no_grad():
        tot, cnt = 0.0, 0
        for i in range(0, X.shape[0], chunk):
            m = mask[i:i + chunk]
            recon = enc.forward(X[i:i + chunk], params, "reconstruct", enc_cfg, token_mask=m)
            tot += enc.masked_mse(recon, X[i:i + chunk], m).item() * m.sum()
            cnt += m.sum()
    return tot / cnt


def run_finetune(params: EncoderParams | None, cfg: TrainConfig, X, y, n_classes: int,
                 enc_cfg: EncoderConfig, X_eval=None, y_eval=None) -> TrainResult:
    """Attach a fresh ``n_classes`` head and train with cross-entropy.

    ``params=None`` trains from random initialization. Labels are collapsed
    to the task's label space first. With ``eval_every`` and an eval set,
    accuracy is logged during training.
    """
    if cfg.stage != "finetune":
        cfg = replace(cfg, stage="finetune")
    y = collapse_labels(y, n_classes)
    missing = set(range(n_classes)) - set(y.tolist())
    if missing:
        raise ValidationError(f"classes {sorted(missing)} absent from training set")
    enc_cfg = replace(enc_cfg, n_classes=n_classes)
    base = params if params is not None else enc.init_params(replace(enc_cfg, seed=cfg.seed))
    params = enc.new_classifier_head(base, n_classes, seed=cfg.seed)
    X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    yt = torch.as_tensor(y)
    rng = np.random.default_rng(cfg.seed)
    # inverse-frequency weights: the binary task merges three classes into one
    counts = np.bincount(y, minlength=n_classes)
    class_weight = torch.as_tensor(len(y) / (n_classes * counts), dtype=torch.float32) if cfg.balanced else None
    trainable = [k for k in params if k.startswith("cls_") or not (cfg.freeze_backbone or k.startswith("recon_") or k == "mask_token")]
    for k in params:
        params[k].requires_grad_(k in trainable)
    opt = _make_optimizer(cfg, [params[k] for k in trainable])
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.steps if cfg.steps and cfg.epochs == 0 else cfg.epochs * steps_per_epoch
    result = TrainResult(params, enc_cfg)
    if X_eval is not None:
        y_eval_c = collapse_labels(y_eval, n_classes)
    step = 0
    while step < total:
        order = rng.permutation(n)
        for s in range(0, n, bs):
            if step >= total:
                break
            idx = order[s:s + bs]
            loss = enc.cross_entropy(enc.forward(X[idx], params, "classify", enc_cfg), yt[idx],
                                    class_weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step)
            for g in opt.param_groups:
                g["lr"] = _lr_at(cfg, step, total)
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.losses.append(loss.item())
            step += 1
            if cfg.eval_every and X_eval is not None and step % cfg.eval_every == 0:
                pred = predict(params, X_eval, enc_cfg)
                result.eval_log.append({"step": step, "accuracy": float(np.mean(pred == y_eval_c))})
    for k in params:
        params[k].requires_grad_(True)
    return result


def predict_logits(params: EncoderParams, X, enc_cfg: EncoderConfig | None = None, chunk=256) -> np.ndarray:
    X = torch.as_tensor(np.asarray(X), dtype=params["W_proj"].dtype)
    out = []
    with torch.no_grad():
        for i in range(0, X.shape[0], chunk):
            out.append(enc.forward(X[i:i + chunk], params, "classify", enc_cfg).numpy())
    return np.concatenate(out) if out else np.zeros((0, params["cls_head"].shape[1]))


def predict(params: EncoderParams, X, enc_cfg: EncoderConfig | None = None) -> np.ndarray:
    return predict_logits(params, X, enc_cfg).argmax(-1)


def steps_to_accuracy(eval_log: list, target: float) -> int | None:
    """First logged step whose accuracy reaches ``target`` (None if never)."""
    for e in eval_log:
        if e["accuracy"] >= target:
            return e["step"]
    return None


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    labels: list
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict
    weighted: dict

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "per_class": {str(lab): {"precision": float(p), "recall": float(r), "f1": float(f),
                                     "support": int(s)}
                          for lab, p, r, f, s in zip(self.labels, self.precision, self.recall,
                                                     self.f1, self.support)},
            "accuracy": self.accuracy,
            "macro": self.macro,
            "weighted": self.weighted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for lab, p, r, f, s in zip(self.labels, self.precision, self.recall, self.f1, self.support):
            w.writerow([lab, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}", int(s)])
        w.writerow(["macro", f"{self.macro['precision']:.6f}", f"{self.macro['recall']:.6f}",
                    f"{self.macro['f1']:.6f}", int(self.support.sum())])
        w.writerow(["weighted", f"{self.weighted['precision']:.6f}", f"{self.weighted['recall']:.6f}",
                    f"{self.weighted['f1']:.6f}", int(self.support.sum())])
        w.writerow(["accuracy", "", "", f"{self.accuracy:.6f}", int(self.support.sum())])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.labels])
        for lab, row in zip(self.labels, self.confusion):
            w.writerow([lab, *map(int, row)])
        return buf.getvalue()


def _safe_div(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def report_from_confusion(confusion, labels=None) -> MetricsReport:
    """Per-class, macro and support-weighted precision/recall/F1 from a count matrix.

    Rows are true classes, columns predictions. F1 is 0 where P + R = 0.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0:
        raise ValidationError("confusion must be a nonempty square count matrix")
    labels = list(labels) if labels is not None else list(range(cm.shape[0]))
    tp = np.diag(cm).astype(float)
    support = cm.sum(1)
    precision = _safe_div(tp, cm.sum(0))
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    w = support / support.sum()
    return MetricsReport(
        labels=labels, confusion=cm, precision=precision, recall=recall, f1=f1, support=support,
        accuracy=float(tp.sum() / cm.sum()),
        macro={"precision": float(precision.mean()), "recall": float(recall.mean()),
               "f1": float(f1.mean())},
        weighted={"precision": float(w @ precision), "recall": float(w @ recall),
                  "f1": float(w @ f1)},
    )


def evaluate_predictions(y_true, y_pred, n_classes: int, labels=None) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValidationError("empty test set")
    cm = np.zeros((n_classes, n_classes), np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    if labels is None:
        labels = CLASS_LABELS_2 if n_classes == 2 else CLASS_LABELS_4 if n_classes == 4 else None
    return report_from_confusion(cm, labels)


def evaluate(params: EncoderParams, X, y, n_classes: int, enc_cfg: EncoderConfig | None = None) -> MetricsReport:
    """Metrics of a trained classifier on a held-out set (labels collapsed to the task)."""
    y = collapse_labels(y, n_classes)
    return evaluate_predictions(y, predict(params, X, enc_cfg), n_classes)
