"""Pre-training objectives: masked L1 reconstruction, InfoNCE alignment, weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError

COUNT_MODES = ("pixel_channel", "pixel")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.05
    tau: float = 0.07
    symmetric_nce: bool = True
    count_mode: str = "pixel_channel"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.count_mode not in COUNT_MODES:
            raise ConfigError(f"count_mode must be one of {COUNT_MODES}, got {self.count_mode!r}")


@dataclass
class MaskedBatch:
    """Targets, reconstructions and masks of both modalities.

    Masks are boolean and broadcast against the pixel arrays, so a ``(B, H, W, 1)``
    mask covers all channels of a ``(B, H, W, 3)`` image. ``count_mode`` decides
    what the denominator counts: every masked value (``"pixel_channel"``, an RGB
    pixel weighs 3 and a DSM pixel 1) or every masked pixel (``"pixel"``).
    """

    x_rgb: torch.Tensor
    r_rgb: torch.Tensor
    mask_rgb: torch.Tensor
    x_dsm: torch.Tensor
    r_dsm: torch.Tensor
    mask_dsm: torch.Tensor
    count_mode: str = "pixel_channel"

    def _expanded(self, mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        try:
            return torch.broadcast_to(torch.as_tensor(mask, dtype=torch.bool), like.shape)
        except RuntimeError:
            raise ShapeError(f"mask {tuple(mask.shape)} does not broadcast to {tuple(like.shape)}") from None

    @property
    def n_masked(self) -> int:
        if self.count_mode == "pixel_channel":
            return int(self._expanded(self.mask_rgb, self.x_rgb).sum() + self._expanded(self.mask_dsm, self.x_dsm).sum())
        if self.count_mode == "pixel":
            return int(torch.as_tensor(self.mask_rgb).sum() + torch.as_tensor(self.mask_dsm).sum())
        raise ConfigError(f"unknown count_mode {self.count_mode!r}")


def pixel_mask(patch_mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, g, g) or (B, g*g) patch mask -> (B, g*p, g*p, 1) pixel mask."""
    m = torch.as_tensor(patch_mask, dtype=torch.bool)
    if m.dim() == 2:
        g = int(round(m.shape[1] ** 0.5))
        m = m.reshape(m.shape[0], g, g)
    m = m.repeat_interleave(patch_size, dim=1).repeat_interleave(patch_size, dim=2)
    return m[..., None]


def mim_loss(batch: MaskedBatch) -> torch.Tensor:
    """Sum of absolute errors over masked values of both modalities divided by the masked count."""
    for x, r in ((batch.x_rgb, batch.r_rgb), (batch.x_dsm, batch.r_dsm)):
        if x.shape != r.shape:
            raise ShapeError(f"target {tuple(x.shape)} and reconstruction {tuple(r.shape)} differ")
    n = batch.n_masked
    if n == 0:
        raise ValueError("masked L1 loss is undefined when nothing is masked")
    m_rgb = batch._expanded(batch.mask_rgb, batch.x_rgb)
    m_dsm = batch._expanded(batch.mask_dsm, batch.x_dsm)
    err_rgb = torch.where(m_rgb, (batch.x_rgb - batch.r_rgb).abs(), torch.zeros_like(batch.r_rgb)).sum()
    err_dsm = torch.where(m_dsm, (batch.x_dsm - batch.r_dsm).abs(), torch.zeros_like(batch.r_dsm)).sum()
    return (err_rgb + err_dsm) / n


def infonce_loss(
    z_rgb: torch.Tensor, z_dsm: torch.Tensor, config: LossConfig | None = None, *, tau=None, symmetric=None
) -> torch.Tensor:
    """InfoNCE over a batch of paired embeddings.

    Row ``i`` of ``z_rgb`` is the anchor, row ``i`` of ``z_dsm`` its positive and the
    other rows of ``z_dsm`` the negatives; the positive stays in the denominator.
    With ``symmetric`` the DSM-anchored direction is averaged in. Embeddings are
    expected unit-norm (or zero), so the dot product is the cosine similarity.
    """
    config = config or LossConfig()
    tau = config.tau if tau is None else tau
    symmetric = config.symmetric_nce if symmetric is None else symmetric
    if z_rgb.dim() != 2 or z_rgb.shape != z_dsm.shape:
        raise ShapeError(f"embedding batches must be matching (B, C): {tuple(z_rgb.shape)} vs {tuple(z_dsm.shape)}")
    if z_rgb.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 to have negatives")
    logits = (z_rgb @ z_dsm.T) / tau
    pos = logits.diagonal()
    loss = (torch.logsumexp(logits, dim=1) - pos).mean()
    if symmetric:
        loss = 0.5 * (loss + (torch.logsumexp(logits, dim=0) - pos).mean())
    return loss


def total_loss(mim, nce, config: LossConfig | None = None, *, alpha=None):
    alpha = (config or LossConfig()).alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * mim + alpha * nce
