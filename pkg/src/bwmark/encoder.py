"""Selective state-space traffic encoder.

Tokens are stride vectors of serialized flow bits. Each layer runs a
diagonal, input-selective state-space recurrence discretized with a
zero-order hold; a mean-pooled classification head and a per-token
reconstruction head sit on top.

Everything here is functional: parameters live in :class:`EncoderParams`
(a name -> tensor mapping) and every op takes them explicitly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .waveform import ValidationError

ZOH_EPS = 1e-8


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    L_s: int = 512
    d_model: int = 64
    n_state: int = 16
    n_layers: int = 2
    n_tokens_max: int = 128
    n_classes: int = 4
    seed: int = 0
    residual: bool = True
    prenorm: bool = True

    def __post_init__(self):
        for name in ("L_s", "d_model", "n_state", "n_layers", "n_tokens_max"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class EncoderParams(dict):
    """Ordered mapping of parameter name to tensor.

    Per-layer tensors are named ``layers.<i>.<name>``. Use :meth:`layer` to
    get a view of one layer's tensors under their short names.
    """

    def layer(self, i: int) -> dict:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    @property
    def n_layers(self) -> int:
        return len({k.split(".")[1] for k in self if k.startswith("layers.")})

    def clone(self, requires_grad: bool | None = None) -> "EncoderParams":
        out = EncoderParams()
        for k, v in self.items():
            t = v.detach().clone()
            if requires_grad if requires_grad is not None else v.requires_grad:
                t.requires_grad_(True)
            out[k] = t
        return out

    def to(self, dtype) -> "EncoderParams":
        out = EncoderParams()
        for k, v in self.items():
            t = v.detach().to(dtype)
            out[k] = t.requires_grad_(v.requires_grad)
        return out

    def requires_grad_(self, flag: bool = True) -> "EncoderParams":
        for v in self.values():
            v.requires_grad_(flag)
        return self


def init_params(cfg: EncoderConfig, dtype=torch.float32) -> EncoderParams:
    g = torch.Generator().manual_seed(cfg.seed)

    def randn(*shape, scale):
        return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).to(dtype)

    d, n = cfg.d_model, cfg.n_state
    p = EncoderParams()
    p["W_proj"] = randn(cfg.L_s, d, scale=1.0 / math.sqrt(cfg.L_s))
    p["pos"] = randn(cfg.n_tokens_max, d, scale=0.02)
    p["mask_token"] = randn(d, scale=0.02)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "norm_g"] = torch.ones(d, dtype=dtype)
        p[pre + "norm_b"] = torch.zeros(d, dtype=dtype)
        p[pre + "A_log"] = torch.log(torch.arange(1, n + 1, dtype=torch.float64)).repeat(d, 1).to(dtype)
        p[pre + "W_B"] = randn(d, n, scale=1.0 / math.sqrt(d))
        p[pre + "W_C"] = randn(d, n, scale=1.0 / math.sqrt(d))
        p[pre + "W_delta"] = randn(d, 1, scale=0.1 / math.sqrt(d))
        # softplus(b) = 0.05
        p[pre + "b_delta"] = torch.full((1,), math.log(math.expm1(0.05)), dtype=dtype)
    p["norm_f_g"] = torch.ones(d, dtype=dtype)
    p["norm_f_b"] = torch.zeros(d, dtype=dtype)
    p["cls_head"] = randn(d, cfg.n_classes, scale=1.0 / math.sqrt(d))
    p["cls_bias"] = torch.zeros(cfg.n_classes, dtype=dtype)
    p["recon_head"] = randn(d, cfg.L_s, scale=1.0 / math.sqrt(d))
    p["recon_bias"] = torch.zeros(cfg.L_s, dtype=dtype)
    return p.requires_grad_(True)


def new_classifier_head(params: EncoderParams, n_classes: int, seed: int = 0) -> EncoderParams:
    """Copy of ``params`` with a freshly initialized ``n_classes``-way head."""
    out = params.clone(requires_grad=True)
    d = out["cls_head"].shape[0]
    g = torch.Generator().manual_seed(seed + 7919)
    dtype = out["cls_head"].dtype
    out["cls_head"] = (torch.randn(d, n_classes, generator=g, dtype=torch.float64)
                       / math.sqrt(d)).to(dtype).requires_grad_(True)
    out["cls_bias"] = torch.zeros(n_classes, dtype=dtype).requires_grad_(True)
    return out


# ---------------------------------------------------------------------------
# building blocks

def _as_tensor(x, params) -> torch.Tensor:
    ref = params["W_proj"]
    if isinstance(x, torch.Tensor):
        return x.to(ref.dtype)
    # numpy arrays carry a byte-stride tuple under the same name
    strides = x if isinstance(x, np.ndarray) else getattr(x, "strides", x)
    return torch.as_tensor(np.asarray(strides), dtype=ref.dtype)


def embed(strides, params: EncoderParams) -> torch.Tensor:
    """Project stride tokens and add positional embeddings: ``x_i = s_i W_proj + pos_i``."""
    s = _as_tensor(strides, params)
    N = s.shape[-2]
    if N > params["pos"].shape[0]:
        raise ValidationError("sequence exceeds positional table")
    return s @ params["W_proj"] + params["pos"][:N]


def discretize(A, B, delta):
    """Zero-order-hold discretization of ``h' = A h + B x`` over a step ``delta``.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta A)`` and
    ``B_bar = (exp(delta A) - 1) / A * B``; for ``|A| <= ZOH_EPS`` the limit
    ``delta * B`` is used. Works elementwise on floats or tensors.
    """
    if not isinstance(delta, torch.Tensor) and not isinstance(A, torch.Tensor):
        if delta < 0:
            raise ValidationError("delta must be >= 0")
        A_bar = math.exp(delta * A)
        if abs(A) <= ZOH_EPS:
            return A_bar, delta * B
        return A_bar, math.expm1(delta * A) / A * B
    delta = torch.as_tensor(delta)
    A = torch.as_tensor(A, dtype=delta.dtype)
    if torch.any(delta < 0):
        raise ValidationError("delta must be >= 0")
    dA = delta * A
    small = A.abs() <= ZOH_EPS
    safe_A = torch.where(small, torch.ones_like(A), A)
    factor = torch.where(small, delta * torch.ones_like(dA), torch.expm1(dA) / safe_A)
    return torch.exp(dA), factor * B


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def selection(u, lp):
    """Input-dependent ``B_t``, ``C_t`` and ``delta_t`` for tokens ``u``."""
    B_t = u @ lp["W_B"]
    C_t = u @ lp["W_C"]
    delta_t = F.softplus(u @ lp["W_delta"] + lp["b_delta"])
    return B_t, C_t, delta_t


def selective_scan(x: torch.Tensor, lp: dict) -> torch.Tensor:
    """Run the selective recurrence over tokens ``x`` of shape ``(..., N, d)``.

    ``h_t = A_bar_t * h_{t-1} + B_bar_t * x_t`` per channel and state with
    ``h_0 = 0``, and ``y_t[d] = sum_n C_t[n] h_t[d, n]``.
    """
    A = -torch.exp(lp["A_log"])  # (d, n)
    B_t, C_t, delta_t = selection(x, lp)
    dA = delta_t.unsqueeze(-1) * A  # (..., N, d, n)
    A_bar = torch.exp(dA)
    small = A.abs() <= ZOH_EPS
    safe_A = torch.where(small, torch.ones_like(A), A)
    factor = torch.where(small, delta_t.unsqueeze(-1).expand_as(dA), torch.expm1(dA) / safe_A)
    Bx = factor * B_t.unsqueeze(-2) * x.unsqueeze(-1)  # B_bar_t * x_t
    # unbind once: per-step slicing would make backward O(N^2) in memory traffic
    A_steps, Bx_steps, C_steps = A_bar.unbind(-3), Bx.unbind(-3), C_t.unbind(-2)
    h = torch.zeros_like(Bx[..., 0, :, :])
    ys = []
    for a, bx, c in zip(A_steps, Bx_steps, C_steps):
        h = a * h + bx
        ys.append((h * c.unsqueeze(-2)).sum(-1))
    y = torch.stack(ys, dim=-2) if ys else torch.zeros_like(x)
    if not torch.isfinite(y).all():
        raise NumericError("numeric overflow in scan")
    return y


def encode(x: torch.Tensor, params: EncoderParams, cfg: EncoderConfig | None = None) -> torch.Tensor:
    residual = cfg.residual if cfg else True
    prenorm = cfg.prenorm if cfg else True
    for i in range(params.n_layers):
        lp = params.layer(i)
        u = layer_norm(x, lp["norm_g"], lp["norm_b"]) if prenorm else x
        y = selective_scan(u, lp)
        x = x + y if residual else y
    if prenorm:
        x = layer_norm(x, params["norm_f_g"], params["norm_f_b"])
    return x


def forward(strides, params: EncoderParams, mode: str = "classify",
            cfg: EncoderConfig | None = None, token_mask=None) -> torch.Tensor:
    """Logits ``(..., n_classes)`` for ``mode='classify'`` or per-token bit
    reconstructions ``(..., N, L_s)`` for ``mode='reconstruct'``.

    ``token_mask`` (bool, ``(..., N)``) replaces the selected token
    embeddings by the mask token before the positional term.
    """
    x = embed(strides, params)
    if token_mask is not None:
        N = x.shape[-2]
        m = torch.as_tensor(token_mask, dtype=torch.bool).unsqueeze(-1)
        x = torch.where(m, params["mask_token"] + params["pos"][:N], x)
    z = encode(x, params, cfg)
    if mode == "classify":
        return z.mean(-2) @ params["cls_head"] + params["cls_bias"]
    if mode == "reconstruct":
        return z @ params["recon_head"] + params["recon_bias"]
    raise ValidationError(f"unknown mode {mode!r}")


def softmax(z):
    z = torch.as_tensor(z)
    return torch.softmax(z, dim=-1)


def cross_entropy(logits, y, class_weight=None) -> torch.Tensor:
    """Mean of ``-log softmax(z)[y]`` via log-sum-exp.

    With ``class_weight`` the mean is weighted by the weight of each sample's class.
    """
    logits = torch.as_tensor(logits)
    y = torch.as_tensor(y, dtype=torch.long)
    k = logits.shape[-1]
    if torch.any(y < 0) or torch.any(y >= k):
        raise ValidationError(f"class id out of range 0..{k - 1}")
    if logits.ndim == 1:
        logits, y = logits[None], y.reshape(1)
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, y.reshape(-1, 1)).squeeze(-1)
    if class_weight is None:
        return (lse - picked).mean()
    w = torch.as_tensor(class_weight, dtype=logits.dtype)[y]
    return ((lse - picked) * w).sum() / w.sum()


def sample_mask(rng: np.random.Generator, batch: int, N: int, mask_ratio: float) -> np.ndarray:
    if not 0 < mask_ratio < 1:
        raise ValidationError("mask_ratio must be in (0, 1)")
    if N == 0:
        raise ValidationError("cannot mask an empty sequence")
    k = math.ceil(mask_ratio * N)
    mask = np.zeros((batch, N), bool)
    for b in range(batch):
        mask[b, rng.choice(N, size=k, replace=False)] = True
    return mask


def masked_mse(recon, bits, mask) -> torch.Tensor:
    """Mean squared error over the masked token positions only."""
    bits = torch.as_tensor(np.asarray(bits) if not isinstance(bits, torch.Tensor) else bits,
                           dtype=recon.dtype)
    m = torch.as_tensor(mask, dtype=recon.dtype).unsqueeze(-1)
    return ((recon - bits) ** 2 * m).sum() / (m.sum() * recon.shape[-1])


def masked_pretrain_loss(strides, mask_ratio: float, params: EncoderParams,
                         rng: np.random.Generator, cfg: EncoderConfig | None = None,
                         mask=None) -> torch.Tensor:
    s = _as_tensor(strides, params)
    batched = s.ndim == 3
    if not batched:
        s = s[None]
    if mask is None:
        mask = sample_mask(rng, s.shape[0], s.shape[1], mask_ratio)
    mask = np.asarray(mask).reshape(s.shape[0], s.shape[1])
    recon = forward(s, params, "reconstruct", cfg, token_mask=mask)
    return masked_mse(recon, s, mask)


def objective_loss(batch, params: EncoderParams, objective: str, cfg=None, mask_ratio=0.9,
                   rng=None, mask=None) -> torch.Tensor:
    """Scalar loss of a batch: ``objective`` is ``'ce'`` (batch = (strides, labels)) or ``'mse'``."""
    if objective == "ce":
        strides, y = batch
        return cross_entropy(forward(strides, params, "classify", cfg), y)
    if objective == "mse":
        strides = batch[0] if isinstance(batch, tuple) else batch
        return masked_pretrain_loss(strides, mask_ratio, params, rng, cfg, mask=mask)
    raise ValidationError(f"unknown objective {objective!r}")


def gradients(batch, params: EncoderParams, objective: str, cfg=None, **kw) -> dict:
    """Reverse-mode gradient of the scalar objective w.r.t. every tensor in ``params``.

    Parameters the objective does not touch get an exact zero gradient.
    """
    loss = objective_loss(batch, params, objective, cfg, **kw)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}


# ---------------------------------------------------------------------------
# checkpoints: manifest JSON + little-endian fp32 blob

def save_checkpoint(params: EncoderParams, cfg: EncoderConfig, path, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, offset, blob = {}, 0, bytearray()
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blob += arr.tobytes()
        offset += arr.nbytes
    manifest = {"config": cfg.to_dict(), "tensors": tensors, "extra": extra or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "params.bin").write_bytes(bytes(blob))


def load_checkpoint(path, cfg: EncoderConfig | None = None, dtype=torch.float32):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    stored = EncoderConfig.from_dict(manifest["config"])
    cfg = cfg or stored
    blob = (path / "params.bin").read_bytes()
    expected = init_params(cfg, dtype=torch.float32)
    params = EncoderParams()
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        if name != "cls_head" and name != "cls_bias":
            if name not in expected or tuple(expected[name].shape) != shape:
                raise ValidationError(f"checkpoint tensor {name} has shape {shape}, "
                                      f"config expects {tuple(expected[name].shape) if name in expected else None}")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=meta["offset"]).reshape(shape)
        params[name] = torch.tensor(arr, dtype=dtype).requires_grad_(True)
    missing = set(expected) - set(params)
    if missing:
        raise ValidationError(f"checkpoint missing tensors {sorted(missing)}")
    return params, stored, manifest.get("extra", {})
