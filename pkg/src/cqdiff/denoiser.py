"""Conditional noise estimator: a 2D transformer over the time and attribute axes.

The target x_t has shape (B, T, 2), with RSRP and SINR as the two attribute
channels. Each scalar becomes a d_model token. Every layer first runs
self-attention along time, separately for each channel. It then runs
self-attention across the two channels, separately for each time step.
Condition features are lifted to d_model and added at the input of every
layer. The diffusion-step embedding is added once, at the input projection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .scenario import ConditionSeries, DatasetRecord

AOI_ORDER = ("urban", "suburb", "rural")
N_CONDITION_FEATURES = 4 + len(AOI_ORDER)


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_mult: int = 4
    step_embed_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "ff_mult", "step_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.step_embed_dim % 2:
            raise ValueError("step_embed_dim must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NormStats:
    """Z-score statistics. Targets are (RSRP, SINR); conditions are (log10 d, h_bs, log10 f, p_t)."""

    target_mean: np.ndarray
    target_std: np.ndarray
    cond_mean: np.ndarray
    cond_std: np.ndarray

    def __post_init__(self):
        for name in ("target_mean", "target_std", "cond_mean", "cond_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.target_std <= 0) or np.any(self.cond_std <= 0):
            raise ValueError("normalization stdev must be > 0")

    @classmethod
    def fit(cls, records: list[DatasetRecord]) -> "NormStats":
        targets = np.concatenate([r.real.as_matrix() for r in records])
        raw = np.concatenate([_raw_condition_matrix(r.conditions) for r in records])
        return cls(targets.mean(0), _safe_std(targets), raw.mean(0), _safe_std(raw))

    def normalize_target(self, x):
        return (np.asarray(x) - self.target_mean) / self.target_std

    def denormalize_target(self, z):
        return np.asarray(z) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("target_mean", "target_std", "cond_mean", "cond_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: d[k] for k in ("target_mean", "target_std", "cond_mean", "cond_std")})


def _safe_std(x):
    # constant features (e.g. a single transmit power) would otherwise divide by zero
    std = x.std(0)
    return np.where(std > 0, std, 1.0)


def _raw_condition_matrix(c: ConditionSeries) -> np.ndarray:
    return np.stack([np.log10(c.d), c.h_bs, np.log10(c.f), c.p_t], axis=1)


def condition_features(conditions: ConditionSeries, norm: NormStats) -> np.ndarray:
    """T x 7 matrix: z-scored (log10 d, h_bs, log10 f, p_t) plus one-hot AOI."""
    raw = (_raw_condition_matrix(conditions) - norm.cond_mean) / norm.cond_std
    onehot = np.zeros((len(conditions), len(AOI_ORDER)))
    onehot[:, AOI_ORDER.index(conditions.aoi.value)] = 1.0
    return np.concatenate([raw, onehot], axis=1)


def sinusoidal_encoding(positions, dim: int) -> torch.Tensor:
    """(len(positions), dim) table of interleaved-by-half sin/cos features."""
    pos = torch.as_tensor(positions, dtype=torch.float64).reshape(-1, 1)
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = pos * freq
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def softmax_rows(scores: torch.Tensor) -> torch.Tensor:
    shifted = scores - scores.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("key dimension must be > 0")
    if k.shape[-1] != d_k or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    return softmax_rows(q @ k.transpose(-2, -1) / math.sqrt(d_k)) @ v


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-6) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x):  # (N, L, d)
        n, length, d = x.shape
        h = self.n_heads

        def split(t):
            return t.reshape(n, length, h, d // h).transpose(1, 2)

        y = attention(split(self.q(x)), split(self.k(x)), split(self.v(x)))
        return self.out(y.transpose(1, 2).reshape(n, length, d))


class AxisBlock(nn.Module):
    """Post-norm transformer encoder block acting on the second-to-last token axis."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ff_mult * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.ff_mult * cfg.d_model, cfg.d_model),
        )
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        x = self.norm1(x + self.drop(self.attn(x)))
        return self.norm2(x + self.drop(self.ff(x)))


class Denoiser(nn.Module):
    """epsilon_theta(x_t, t | conditions) on normalized (B, T, 2) targets."""

    def __init__(self, config: DenoiserConfig | None = None, norm: NormStats | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        self.norm = norm
        self.use_positional = True
        d = cfg.d_model
        self.input_proj = nn.Linear(1, d)
        self.attribute_embedding = nn.Parameter(torch.empty(2, d))
        self.step_mlp = nn.Sequential(nn.Linear(cfg.step_embed_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.cond_proj = nn.ModuleList(nn.Linear(N_CONDITION_FEATURES, d) for _ in range(cfg.n_layers))
        self.time_blocks = nn.ModuleList(AxisBlock(cfg) for _ in range(cfg.n_layers))
        self.attr_blocks = nn.ModuleList(AxisBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(d, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif name.startswith(("time_blocks", "attr_blocks")) and ".norm" in name:
                nn.init.ones_(p)
            else:
                fan_out, fan_in = p.shape
                a = math.sqrt(6.0 / (fan_in + fan_out))
                nn.init.uniform_(p, -a, a)

    def step_embedding(self, t: torch.Tensor) -> torch.Tensor:
        enc = sinusoidal_encoding(t, self.config.step_embed_dim).to(self.input_proj.weight.dtype)
        return self.step_mlp(enc)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x_t.ndim != 3 or x_t.shape[-1] != 2:
            raise ValueError(f"x_t must have shape (B, T, 2), got {tuple(x_t.shape)}")
        b, length, _ = x_t.shape
        if tuple(cond.shape) != (b, length, N_CONDITION_FEATURES):
            raise ValueError(f"conditions must have shape ({b}, {length}, {N_CONDITION_FEATURES}), got {tuple(cond.shape)}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if not (torch.isfinite(x_t).all() and torch.isfinite(cond).all()):
            raise ValueError("denoiser inputs must be finite")
        d = self.config.d_model

        h = self.input_proj(x_t.unsqueeze(-1)) + self.attribute_embedding
        h = h + self.step_embedding(t)[:, None, None, :]
        pos = sinusoidal_encoding(torch.arange(length), d).to(h.dtype)
        if not self.use_positional:
            pos = torch.zeros_like(pos)
        for lift, time_block, attr_block in zip(self.cond_proj, self.time_blocks, self.attr_blocks):
            h = h + lift(cond)[:, :, None, :]
            # time axis: (B, 2, T, d) folded to (B*2, T, d)
            ht = (h.permute(0, 2, 1, 3) + pos).reshape(b * 2, length, d)
            h = time_block(ht).reshape(b, 2, length, d).permute(0, 2, 1, 3)
            # attribute axis: (B*T, 2, d)
            h = attr_block(h.reshape(b * length, 2, d)).reshape(b, length, 2, d)
        return self.head(h).squeeze(-1)


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter of ``model``."""
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    missing = [n for n, g in zip(names, grads) if g is None]
    if missing:
        raise ValueError(f"parameters not recorded in the loss graph: {missing}")
    return dict(zip(names, grads))


def denoise(x_t, t: int, conditions: ConditionSeries, model: Denoiser) -> np.ndarray:
    """Single-series convenience wrapper: normalized T x 2 in, T x 2 noise estimate out."""
    if model.norm is None:
        raise ValueError("model has no normalization statistics")
    dtype = model.input_proj.weight.dtype
    x = torch.as_tensor(np.asarray(x_t), dtype=dtype)[None]
    cond = torch.as_tensor(condition_features(conditions, model.norm), dtype=dtype)[None]
    with torch.no_grad():
        return model(x, torch.tensor([t]), cond)[0].to(torch.float64).numpy()


class EpsAdapter:
    """Expose a trained Denoiser as the numpy ``model(x_t, t, cond)`` callable the sampler expects."""

    def __init__(self, model: Denoiser, cond: torch.Tensor):
        self.model = model
        self.dtype = model.input_proj.weight.dtype
        self.cond = torch.as_tensor(cond, dtype=self.dtype)

    def __call__(self, x_t, t, _conditions=None):
        x = torch.as_tensor(np.asarray(x_t), dtype=self.dtype)
        with torch.no_grad():
            out = self.model(x, torch.full((x.shape[0],), int(t)), self.cond)
        return out.to(torch.float64).numpy()
