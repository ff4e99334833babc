"""Functional transformer encoder on top of torch tensors.

Parameters live in a :class:`ParamSet` (a name -> tensor mapping) and every op is
a plain function of ``(inputs, params, config)``. Autograd supplies the
backward pass; :func:`grad_check` verifies it against central differences.

Layout conventions: images are channel-last ``(B, H, W, C)``; tokens are
``(B, N, D)`` in row-major patch order; linear weights are stored ``(in, out)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, Iterator, Mapping, MutableMapping

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    window: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("in_channels", "image_size", "patch_size", "embed_dim", "heads", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.grid % self.window:
            raise ConfigError(f"grid side {self.grid} not divisible by window {self.window}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def shift_for_block(self, i: int) -> int:
        # a single window covering the grid has nothing to shift against
        if self.depth < 2 or i % 2 == 0 or self.window >= self.grid:
            return 0
        return self.window // 2

    def to_dict(self) -> dict:
        return asdict(self)


class ParamSet(MutableMapping):
    """Named tensors with a fixed, name-sorted iteration order."""

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None):
        self._t: dict[str, torch.Tensor] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value: torch.Tensor) -> None:
        if not isinstance(value, torch.Tensor):
            raise TypeError(f"{name}: expected a tensor, got {type(value).__name__}")
        old = self._t.get(name)
        if old is not None and old.shape != value.shape:
            raise ShapeError(f"{name}: shape is fixed at {tuple(old.shape)}, got {tuple(value.shape)}")
        self._t[name] = value

    def __delitem__(self, name: str) -> None:
        del self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self) -> int:
        return len(self._t)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.numel()} values)"

    def numel(self) -> int:
        return sum(t.numel() for t in self._t.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(self[k].shape) for k in self}

    def sub(self, prefix: str) -> "ParamSet":
        """View of the tensors under ``prefix`` with the prefix stripped (tensors are shared)."""
        return ParamSet({k[len(prefix) :]: v for k, v in self._t.items() if k.startswith(prefix)})

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._t.items()})

    def clone(self) -> "ParamSet":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return self.map(lambda t: t.detach().to(dtype).clone())

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for t in self._t.values():
            t.requires_grad_(flag)
        return self

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self._t.values())


# -- initialization ------------------------------------------------------------


def trunc_normal(shape, gen: torch.Generator, dtype, std: float = INIT_STD) -> torch.Tensor:
    t = torch.empty(shape, dtype=torch.float64)
    torch.nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t.to(dtype)


def init_linear(prefix: str, d_in: int, d_out: int, gen: torch.Generator, dtype) -> dict[str, torch.Tensor]:
    return {
        f"{prefix}.weight": trunc_normal((d_in, d_out), gen, dtype),
        f"{prefix}.bias": torch.zeros(d_out, dtype=dtype),
    }


def init_encoder_params(cfg: EncoderConfig, gen: torch.Generator, dtype=torch.float32) -> ParamSet:
    D, w = cfg.embed_dim, cfg.window
    p = {}
    p.update(init_linear("patch_embed", cfg.patch_dim, D, gen, dtype))
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        p[f"{b}.norm1.weight"] = torch.ones(D, dtype=dtype)
        p[f"{b}.norm1.bias"] = torch.zeros(D, dtype=dtype)
        p[f"{b}.attn.qkv.weight"] = trunc_normal((D, 3 * D), gen, dtype)
        # key bias is omitted: softmax is invariant to it, so its gradient is identically zero
        p[f"{b}.attn.q_bias"] = torch.zeros(D, dtype=dtype)
        p[f"{b}.attn.v_bias"] = torch.zeros(D, dtype=dtype)
        p[f"{b}.attn.rel_bias"] = trunc_normal((cfg.heads, (2 * w - 1) ** 2), gen, dtype)
        p.update(init_linear(f"{b}.attn.proj", D, D, gen, dtype))
        p[f"{b}.norm2.weight"] = torch.ones(D, dtype=dtype)
        p[f"{b}.norm2.bias"] = torch.zeros(D, dtype=dtype)
        p.update(init_linear(f"{b}.mlp.fc1", D, cfg.hidden_dim, gen, dtype))
        p.update(init_linear(f"{b}.mlp.fc2", cfg.hidden_dim, D, gen, dtype))
    p["norm.weight"] = torch.ones(D, dtype=dtype)
    p["norm.bias"] = torch.zeros(D, dtype=dtype)
    return ParamSet(p)


# -- primitive ops -------------------------------------------------------------


def linear(x: torch.Tensor, params: Mapping[str, torch.Tensor], prefix: str) -> torch.Tensor:
    w = params[f"{prefix}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + params[f"{prefix}.bias"]


def layer_norm(x: torch.Tensor, params: Mapping[str, torch.Tensor], prefix: str) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), params[f"{prefix}.weight"], params[f"{prefix}.bias"], LN_EPS)


def _as_batch(image: torch.Tensor, cfg: EncoderConfig) -> torch.Tensor:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
    if image.dim() != 4 or tuple(image.shape[1:]) != expected:
        raise ShapeError(f"expected image (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(image.shape)}")
    return image


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, N, p*p*C); each patch flattened in (row, col, channel) order."""
    B, H, W, C = images.shape
    p = patch_size
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} not divisible into {p}x{p} patches")
    x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(tokens: torch.Tensor, patch_size: int, channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify` for square grids."""
    B, N, P = tokens.shape
    g = math.isqrt(N)
    p = patch_size
    if g * g != N or P != p * p * channels:
        raise ShapeError(f"cannot unpatchify {tuple(tokens.shape)} with patch {p} and {channels} channels")
    x = tokens.reshape(B, g, g, p, p, channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * p, g * p, channels)


def patch_embed(image: torch.Tensor, params: Mapping[str, torch.Tensor], cfg: EncoderConfig) -> torch.Tensor:
    """Linear projection of non-overlapping patches, tokens in row-major grid order.

    Accepts a single ``(H, W, C)`` image or a ``(B, H, W, C)`` batch and returns
    ``(grid**2, D)`` or ``(B, grid**2, D)`` accordingly.
    """
    single = image.dim() == 3
    x = linear(patchify(_as_batch(image, cfg), cfg.patch_size), params, "patch_embed")
    return x[0] if single else x


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> torch.Tensor:
    """(w*w, w*w) index into a (2w-1)**2 relative offset table."""
    ys, xs = torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
    coords = torch.stack([ys.flatten(), xs.flatten()])
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@lru_cache(maxsize=None)
def shift_attention_mask(grid: int, window: int, shift: int) -> torch.Tensor | None:
    """Boolean (num_windows, w*w, w*w), True where a cyclically-shifted pair must not attend."""
    if shift == 0:
        return None
    region = torch.zeros(grid, grid, dtype=torch.long)
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    win = window_partition(region[None, :, :, None], window).squeeze(-1)
    return win[:, None, :] != win[:, :, None]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, g, g, D) -> (B * nW, w*w, D)."""
    B, g, _, D = x.shape
    x = x.reshape(B, g // window, window, g // window, window, D).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, D)


def window_reverse(windows: torch.Tensor, window: int, grid: int) -> torch.Tensor:
    D = windows.shape[-1]
    n = grid // window
    x = windows.reshape(-1, n, n, window, window, D).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, grid, grid, D)


def window_attention(
    x: torch.Tensor, params: Mapping[str, torch.Tensor], prefix: str, cfg: EncoderConfig, shift: int
) -> torch.Tensor:
    """Multi-head self-attention inside non-overlapping windows of a (B, N, D) token grid."""
    B, N, D = x.shape
    g, w, h = cfg.grid, cfg.window, cfg.heads
    hd = D // h
    grid_x = x.reshape(B, g, g, D)
    if shift:
        grid_x = torch.roll(grid_x, shifts=(-shift, -shift), dims=(1, 2))
    win = window_partition(grid_x, w)  # (B*nW, T, D)
    T = w * w
    q_bias, v_bias = params[f"{prefix}.q_bias"], params[f"{prefix}.v_bias"]
    qkv_bias = torch.cat([q_bias, torch.zeros_like(q_bias), v_bias])
    qkv = (win @ params[f"{prefix}.qkv.weight"] + qkv_bias).reshape(-1, T, 3, h, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q * hd**-0.5) @ k.transpose(-2, -1)  # (B*nW, h, T, T)
    bias = params[f"{prefix}.rel_bias"][:, relative_position_index(w)]
    logits = logits + bias[None]
    blocked = shift_attention_mask(g, w, shift)
    if blocked is not None:
        nW = blocked.shape[0]
        logits = logits.reshape(B, nW, h, T, T).masked_fill(blocked[None, :, None], float("-inf"))
        logits = logits.reshape(-1, h, T, T)
    out = (logits.softmax(dim=-1) @ v).transpose(1, 2).reshape(-1, T, D)
    out = linear(out, params, f"{prefix}.proj")
    grid_out = window_reverse(out, w, g)
    if shift:
        grid_out = torch.roll(grid_out, shifts=(shift, shift), dims=(1, 2))
    return grid_out.reshape(B, N, D)


def transformer_block(
    x: torch.Tensor, params: Mapping[str, torch.Tensor], i: int, cfg: EncoderConfig
) -> torch.Tensor:
    b = f"blocks.{i}"
    x = x + window_attention(layer_norm(x, params, f"{b}.norm1"), params, f"{b}.attn", cfg, cfg.shift_for_block(i))
    hdn = F.gelu(linear(layer_norm(x, params, f"{b}.norm2"), params, f"{b}.mlp.fc1"))
    return x + linear(hdn, params, f"{b}.mlp.fc2")


def apply_mask_token(tokens: torch.Tensor, mask: torch.Tensor | None, mask_token: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return tokens
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.dim() == 1:
        mask = mask.expand(tokens.shape[0], -1)
    if tuple(mask.shape) != tuple(tokens.shape[:2]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match token grid {tuple(tokens.shape[:2])}")
    if mask_token.shape != tokens.shape[-1:]:
        raise ShapeError(f"mask token width {tuple(mask_token.shape)} != embed dim {tokens.shape[-1]}")
    return torch.where(mask[..., None], mask_token.to(tokens.dtype), tokens)


def encoder_forward(
    tokens: torch.Tensor,
    mask: torch.Tensor | None,
    mask_token: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    cfg: EncoderConfig,
) -> torch.Tensor:
    """Substitute masked tokens, run ``depth`` windowed blocks, apply the final norm.

    ``mask`` is ``(B, N)`` or ``(N,)`` boolean with True meaning masked, or None.
    """
    single = tokens.dim() == 2
    if single:
        tokens = tokens.unsqueeze(0)
        if mask is not None:
            mask = torch.as_tensor(mask).reshape(1, -1)
    if tokens.dim() != 3 or tokens.shape[1] != cfg.num_tokens or tokens.shape[2] != cfg.embed_dim:
        raise ShapeError(
            f"expected tokens (B, {cfg.num_tokens}, {cfg.embed_dim}), got {tuple(tokens.shape)}"
        )
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.dim() == 3:
            mask = mask.reshape(mask.shape[0], -1)
    x = apply_mask_token(tokens, mask, mask_token)
    for i in range(cfg.depth):
        x = transformer_block(x, params, i, cfg)
    x = layer_norm(x, params, "norm")
    return x[0] if single else x


def encode_image(
    image: torch.Tensor,
    mask: torch.Tensor | None,
    mask_token: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    cfg: EncoderConfig,
) -> torch.Tensor:
    return encoder_forward(patch_embed(image, params, cfg), mask, mask_token, params, cfg)


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float  # max over named tensors of the norm-based relative error
    per_param: dict[str, float]
    max_elementwise: float  # diagnostic: worst single-element relative error
    worst: tuple[str, int, float, float] | None  # name, flat index, analytic, numeric


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def numeric_gradient(
    loss_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet, name: str, eps: float
) -> torch.Tensor:
    """Central differences (f(x+eps) - f(x-eps)) / (2 eps) for every element of one tensor."""
    t = params[name]
    flat = t.view(-1)
    out = torch.empty(flat.numel(), dtype=torch.float64)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = loss_fn(params).item()
            flat[i] = orig - eps
            f_minus = loss_fn(params).item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            out[i] = (f_plus - f_minus) / (2 * eps)
    return out.reshape(t.shape)


def grad_check_report(
    loss_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet, eps: float = 1e-5
) -> GradCheckResult:
    """Compare autograd gradients with central finite differences for every tensor.

    The error of a tensor is ``|a - n| / max(|a|, |n|, 1e-8)`` with ``|.|`` the L2
    norm over its elements. Elementwise errors are reported for diagnosis only:
    they are dominated by finite-difference roundoff wherever a gradient element
    is near zero. ``params`` is not modified.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = params.clone().requires_grad_(True)
    names = list(work)
    loss = loss_fn(work)
    if loss.numel() != 1:
        raise ShapeError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, [work[n] for n in names], allow_unused=True)

    per_param: dict[str, float] = {}
    worst, worst_el = None, 0.0
    for name, g in zip(names, grads):
        analytic = torch.zeros(work[name].shape, dtype=torch.float64) if g is None else g.detach().double()
        numeric = numeric_gradient(loss_fn, work, name, eps)
        per_param[name] = float((analytic - numeric).norm()) / max(
            float(analytic.norm()), float(numeric.norm()), 1e-8
        )
        a_flat, n_flat = analytic.reshape(-1), numeric.reshape(-1)
        for i in range(a_flat.numel()):
            r = _rel(a_flat[i].item(), n_flat[i].item())
            if r > worst_el:
                worst_el, worst = r, (name, i, a_flat[i].item(), n_flat[i].item())
    return GradCheckResult(max(per_param.values(), default=0.0), per_param, worst_el, worst)


def grad_check(loss_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet, eps: float = 1e-5) -> float:
    """Max over parameter tensors of the relative analytic vs central-difference gradient error."""
    return grad_check_report(loss_fn, params, eps).max_rel_error
