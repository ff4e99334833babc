"""Dual-encoder masked image model: one encoder per modality, fused twin decoders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .nn_core import (
    EncoderConfig,
    ParamSet,
    trunc_normal,
    encoder_forward,
    init_encoder_params,
    init_linear,
    linear,
    patch_embed,
    unpatchify,
)

MODALITIES = ("rgb", "dsm")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PatchMask:
    grid: np.ndarray  # (g, g) bool, True = masked
    mask_unit: int = 1

    @property
    def masked_count(self) -> int:
        return int(self.grid.sum())

    @property
    def ratio(self) -> float:
        return self.masked_count / self.grid.size


def sample_mask(grid_side: int, ratio: float, mask_unit: int = 1, seed=None) -> PatchMask:
    """Mask whole ``mask_unit``-sided blocks, chosen uniformly without replacement.

    The number of masked patches is the multiple of ``mask_unit**2`` closest to
    ``round(ratio * grid_side**2)`` (halves round up). ``seed`` may be an int or
    a ``numpy.random.Generator``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    if mask_unit < 1 or grid_side % mask_unit:
        raise ConfigError(f"grid side {grid_side} is not a multiple of mask unit {mask_unit}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    side = grid_side // mask_unit
    n_blocks = side * side
    target = round_half_up(ratio * grid_side * grid_side)
    k = min(n_blocks, round_half_up(target / (mask_unit * mask_unit)))
    chosen = np.zeros(n_blocks, dtype=bool)
    chosen[rng.choice(n_blocks, size=k, replace=False)] = True
    blocks = chosen.reshape(side, side)
    grid = np.kron(blocks, np.ones((mask_unit, mask_unit), dtype=bool)).astype(bool)
    return PatchMask(grid=grid, mask_unit=mask_unit)


def fuse_features(f_rgb: torch.Tensor, f_dsm: torch.Tensor) -> torch.Tensor:
    """Per-token channel concatenation, RGB channels first."""
    if f_rgb.shape[:-1] != f_dsm.shape[:-1]:
        raise ShapeError(f"cannot fuse features of shape {tuple(f_rgb.shape)} and {tuple(f_dsm.shape)}")
    return torch.cat([f_rgb, f_dsm], dim=-1)


def pool_embedding(features: torch.Tensor) -> torch.Tensor:
    """Mean over tokens, then L2 normalization (an all-zero mean stays zero)."""
    if features.shape[-2] < 1:
        raise ShapeError("cannot pool zero tokens")
    if not bool(torch.isfinite(features).all()):
        raise FloatingPointError("non-finite features passed to pool_embedding")
    m = features.mean(dim=-2)
    norm = m.norm(dim=-1, keepdim=True)
    return m / torch.where(norm > 0, norm, torch.ones_like(norm))


@dataclass
class ForwardOutput:
    recon_rgb: torch.Tensor
    recon_dsm: torch.Tensor
    feat_rgb: torch.Tensor
    feat_dsm: torch.Tensor


class DualMIMModel:
    """Parameters plus encoder configs of the dual model.

    Tensor names: ``rgb_encoder.*``, ``dsm_encoder.*``, ``rgb_mask_token``,
    ``dsm_mask_token``, ``rgb_decoder.{weight,bias}``, ``dsm_decoder.{weight,bias}``.
    """

    def __init__(self, rgb_cfg: EncoderConfig, dsm_cfg: EncoderConfig, params: ParamSet):
        if rgb_cfg.in_channels != 3 or dsm_cfg.in_channels != 1:
            raise ConfigError("RGB encoder needs 3 input channels and DSM encoder 1")
        if rgb_cfg.grid != dsm_cfg.grid:
            raise ConfigError(f"encoders must share a patch grid: {rgb_cfg.grid} vs {dsm_cfg.grid}")
        self.rgb_cfg = rgb_cfg
        self.dsm_cfg = dsm_cfg
        self.params = params
        self.validate()

    @property
    def fused_dim(self) -> int:
        return self.rgb_cfg.embed_dim + self.dsm_cfg.embed_dim

    def config(self, modality: str) -> EncoderConfig:
        return {"rgb": self.rgb_cfg, "dsm": self.dsm_cfg}[modality]

    def encoder_params(self, modality: str) -> ParamSet:
        return self.params.sub(f"{modality}_encoder.")

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return model_shapes(self.rgb_cfg, self.dsm_cfg)

    def validate(self) -> None:
        want = self.expected_shapes()
        have = self.params.shapes()
        missing = sorted(set(want) - set(have))
        unknown = sorted(set(have) - set(want))
        if missing:
            raise ConfigError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        if unknown:
            raise ConfigError(f"unknown tensors: {unknown[:5]}{'...' if len(unknown) > 5 else ''}")
        for name, shape in want.items():
            if have[name] != shape:
                raise ShapeError(f"tensor {name!r} has shape {have[name]}, config requires {shape}")

    def with_params(self, params: ParamSet) -> "DualMIMModel":
        return DualMIMModel(self.rgb_cfg, self.dsm_cfg, params)


def _init_tensors(rgb_cfg: EncoderConfig, dsm_cfg: EncoderConfig, gen: torch.Generator, dtype) -> dict:
    t = {}
    for mod, cfg in (("rgb", rgb_cfg), ("dsm", dsm_cfg)):
        t.update({f"{mod}_encoder.{k}": v for k, v in init_encoder_params(cfg, gen, dtype).items()})
        t[f"{mod}_mask_token"] = trunc_normal((cfg.embed_dim,), gen, dtype)
    fused = rgb_cfg.embed_dim + dsm_cfg.embed_dim
    t.update(init_linear("rgb_decoder", fused, rgb_cfg.patch_dim, gen, dtype))
    t.update(init_linear("dsm_decoder", fused, dsm_cfg.patch_dim, gen, dtype))
    return t


def model_shapes(rgb_cfg: EncoderConfig, dsm_cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every tensor a dual model with these configs owns."""
    ref = _init_tensors(rgb_cfg, dsm_cfg, torch.Generator().manual_seed(0), torch.float32)
    return {k: tuple(ref[k].shape) for k in sorted(ref)}


def init_model(
    rgb_cfg: EncoderConfig, dsm_cfg: EncoderConfig, seed: int = 0, dtype=torch.float32
) -> DualMIMModel:
    gen = torch.Generator().manual_seed(seed)
    return DualMIMModel(rgb_cfg, dsm_cfg, ParamSet(_init_tensors(rgb_cfg, dsm_cfg, gen, dtype)))


def _mask_tensor(mask, batch: int, cfg: EncoderConfig) -> torch.Tensor | None:
    if mask is None:
        return None
    if isinstance(mask, PatchMask):
        mask = mask.grid
    if isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], PatchMask):
        mask = np.stack([m.grid for m in mask])
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask, dtype=torch.bool)
    if m.dim() == 2 and tuple(m.shape) == (cfg.grid, cfg.grid):
        m = m.reshape(1, -1).expand(batch, -1)
    elif m.dim() == 3:
        m = m.reshape(m.shape[0], -1)
    if tuple(m.shape) != (batch, cfg.num_tokens):
        raise ShapeError(f"mask of shape {tuple(m.shape)} does not fit a {cfg.grid}x{cfg.grid} grid for batch {batch}")
    return m


def encode(model: DualMIMModel, modality: str, image: torch.Tensor, mask=None, params: ParamSet | None = None):
    params = model.params if params is None else params
    cfg = model.config(modality)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    enc = params.sub(f"{modality}_encoder.")
    tokens = patch_embed(image, enc, cfg)
    m = _mask_tensor(mask, image.shape[0], cfg)
    return encoder_forward(tokens, m, params[f"{modality}_mask_token"], enc, cfg)


def decode(params: ParamSet, modality: str, fused: torch.Tensor, cfg: EncoderConfig) -> torch.Tensor:
    return unpatchify(linear(fused, params, f"{modality}_decoder"), cfg.patch_size, cfg.in_channels)


def forward(
    rgb_norm: torch.Tensor,
    dsm_norm: torch.Tensor,
    mask_rgb,
    mask_dsm,
    model: DualMIMModel,
    params: ParamSet | None = None,
) -> ForwardOutput:
    """Masked encoding of both modalities, channel fusion and per-modality reconstruction.

    Inputs are normalized ``(B, H, W, C)`` tensors (a single unbatched image is
    accepted). ``params`` overrides ``model.params``, which is how gradients are
    taken with respect to a detached copy.
    """
    params = model.params if params is None else params
    if rgb_norm.dim() == 3:
        rgb_norm, dsm_norm = rgb_norm.unsqueeze(0), dsm_norm.unsqueeze(0)
    if rgb_norm.shape[:3] != dsm_norm.shape[:3]:
        raise ShapeError(f"rgb {tuple(rgb_norm.shape)} and dsm {tuple(dsm_norm.shape)} are not co-registered")
    f_rgb = encode(model, "rgb", rgb_norm, mask_rgb, params)
    f_dsm = encode(model, "dsm", dsm_norm, mask_dsm, params)
    fused = fuse_features(f_rgb, f_dsm)
    return ForwardOutput(
        recon_rgb=decode(params, "rgb", fused, model.rgb_cfg),
        recon_dsm=decode(params, "dsm", fused, model.dsm_cfg),
        feat_rgb=f_rgb,
        feat_dsm=f_dsm,
    )
