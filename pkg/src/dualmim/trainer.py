"""Pre-training loop, optimizer, augmentation and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import config as cfgtext
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged, VersionMismatchError
from .losses import LossConfig, MaskedBatch, infonce_loss, mim_loss, pixel_mask, total_loss
from .model import DualMIMModel, forward, init_model, model_shapes, pool_embedding, sample_mask
from .nn_core import EncoderConfig, ParamSet
from .synthdata import PairedTile
from .tileio import NormStats, compute_all_stats, normalize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_p: float = 0.5
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError(f"flip_p must be in [0, 1], got {self.flip_p}")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ConfigError("crop scale range must satisfy 0 < min <= max <= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 5e-4
    warmup_epochs: int = 0
    mask_ratio: float = 0.6
    mask_unit: int = 1
    shared_mask: bool = False
    image_size: int = 64
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0
    adamw: AdamWConfig = AdamWConfig()
    augment: AugmentConfig = AugmentConfig()
    loss: LossConfig = LossConfig()
    # 2-pixel patches: at 64x64 this is a 32x32 token grid
    rgb_encoder: EncoderConfig = EncoderConfig(in_channels=3, patch_size=2)
    dsm_encoder: EncoderConfig = EncoderConfig(in_channels=1, patch_size=2)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must satisfy 0 <= warmup < epochs, got {self.warmup_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.rgb_encoder.in_channels != 3 or self.dsm_encoder.in_channels != 1:
            raise ConfigError("rgb_encoder.in_channels must be 3 and dsm_encoder.in_channels 1")
        for name in ("rgb_encoder", "dsm_encoder"):
            enc = getattr(self, name)
            if enc.image_size != self.image_size:
                raise ConfigError(f"{name}.image_size {enc.image_size} != image_size {self.image_size}")
            if enc.grid % self.mask_unit:
                raise ConfigError(f"{name} grid {enc.grid} is not a multiple of mask_unit {self.mask_unit}")

    def to_text(self) -> str:
        return cfgtext.to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cfgtext.apply_items(cls(), cfgtext.parse_config_text(text))

    def with_encoders(self, **changes) -> "TrainConfig":
        """Apply the same EncoderConfig changes to both encoders."""
        return dataclasses.replace(
            self,
            rgb_encoder=dataclasses.replace(self.rgb_encoder, **changes),
            dsm_encoder=dataclasses.replace(self.dsm_encoder, **changes),
        )


# -- schedule and optimizer ------------------------------------------------------


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay from ``base_lr`` to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(total_steps * config.warmup_epochs / config.epochs))
    if step < warmup:
        return config.base_lr * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return config.base_lr
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    m: torch.Tensor,
    v: torch.Tensor,
    step: int,
    lr: float,
    hyper: AdamWConfig,
    decay: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One AdamW update with decoupled weight decay; ``step`` counts from 1.

    Returns the new ``(param, m, v)``; the inputs are not modified.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"param {tuple(param.shape)} and grad {tuple(grad.shape)} differ")
    if not bool(torch.isfinite(grad).all()):
        raise FloatingPointError("non-finite gradient passed to adamw_step")
    b1, b2 = hyper.beta1, hyper.beta2
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    wd = hyper.weight_decay if decay else 0.0
    update = m_hat / (v_hat.sqrt() + hyper.eps) + wd * param
    return param - lr * update, m, v


def decays(name: str, tensor: torch.Tensor) -> bool:
    """Weight decay applies to projection matrices only (not biases, norms, tokens, bias tables)."""
    return name.endswith(".weight") and tensor.dim() >= 2


def optimizer_update(params: ParamSet, grads: dict, state: AdamState, lr: float, hyper: AdamWConfig) -> None:
    state.step += 1
    with torch.no_grad():
        for name in params:
            p = params[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            new_p, state.m[name], state.v[name] = adamw_step(
                p, grads[name], state.m[name], state.v[name], state.step, lr, hyper, decays(name, p)
            )
            params[name] = new_p


# -- augmentation ------------------------------------------------------------------


def _resize(x: np.ndarray, size: int, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1)[None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    else:
        out = F.interpolate(t, size=(size, size), mode="nearest-exact")
    return out[0].permute(1, 2, 0).numpy()


def augment_pair(
    rgb: np.ndarray, dsm: np.ndarray, labels: np.ndarray, seed, config: AugmentConfig | TrainConfig, image_size=None
):
    """Sample one flip + crop and apply it identically to all three rasters.

    Crops cover a fraction of the area drawn from the configured scale range with
    aspect ratio in [3/4, 4/3], and are resized back to ``image_size`` (bilinear
    for rgb/dsm, nearest for labels). ``seed`` is an int or a numpy Generator.
    """
    if isinstance(config, TrainConfig):
        image_size = config.image_size if image_size is None else image_size
        config = config.augment
    H, W = labels.shape
    image_size = H if image_size is None else image_size
    if not (rgb.shape[:2] == dsm.shape[:2] == (H, W)):
        raise ShapeError("augment_pair needs co-registered rasters")
    if not config.enabled:
        if image_size != H or H != W:
            raise ShapeError("augmentation disabled but the tile is not image_size square")
        return rgb.copy(), dsm.copy(), labels.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = rng.random() < config.flip_p
    scale = rng.uniform(config.crop_scale_min, config.crop_scale_max)
    log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3))
    area = scale * H * W
    ratio = math.exp(log_ratio)
    ch = min(H, max(1, int(round(math.sqrt(area / ratio)))))
    cw = min(W, max(1, int(round(math.sqrt(area * ratio)))))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))

    sl = (slice(top, top + ch), slice(left, left + cw))
    r, d, lab = rgb[sl], dsm[sl], labels[sl]
    if flip:
        r, d, lab = r[:, ::-1], d[:, ::-1], lab[:, ::-1]
    if (ch, cw) == (image_size, image_size):
        return r.copy(), d.copy(), lab.copy()
    r = _resize(r, image_size, "bilinear")
    d = _resize(d, image_size, "bilinear")
    lab = _resize(lab[..., None].astype(np.float32), image_size, "nearest")[..., 0].astype(labels.dtype)
    return r, d, lab


# -- training ----------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    mim: float
    nce: float
    total: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.mim!r}\t{self.nce!r}\t{self.total!r}\t{self.lr!r}\n"


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamSet
    opt_state: AdamState
    epoch: int
    metrics: list[EpochMetrics]

    def model(self) -> DualMIMModel:
        return DualMIMModel(self.config.rgb_encoder, self.config.dsm_encoder, self.params)


@dataclass
class StepResult:
    mim: float
    nce: float
    total: float


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k & 0xFFFFFFFF for k in keys]))


def prepare_batch(
    tiles: Sequence[PairedTile], config: TrainConfig, rng: np.random.Generator, augment: bool = True
) -> dict[str, torch.Tensor]:
    """Augment normalized tiles and draw per-sample masks for both modalities."""
    grid = config.rgb_encoder.grid
    rgbs, dsms, m_rgb, m_dsm = [], [], [], []
    aug_cfg = config.augment if augment else dataclasses.replace(config.augment, enabled=False)
    for t in tiles:
        r, d, _ = augment_pair(t.rgb, t.dsm, t.labels, rng, aug_cfg, config.image_size)
        rgbs.append(r)
        dsms.append(d)
        mr = sample_mask(grid, config.mask_ratio, config.mask_unit, rng).grid
        md = mr if config.shared_mask else sample_mask(grid, config.mask_ratio, config.mask_unit, rng).grid
        m_rgb.append(mr)
        m_dsm.append(md)
    return {
        "rgb": torch.from_numpy(np.stack(rgbs).astype(np.float32)),
        "dsm": torch.from_numpy(np.stack(dsms).astype(np.float32)),
        "mask_rgb": torch.from_numpy(np.stack(m_rgb)),
        "mask_dsm": torch.from_numpy(np.stack(m_dsm)),
    }


def batch_losses(
    model: DualMIMModel, params: ParamSet, batch: dict, loss_cfg: LossConfig
) -> tuple[torch.Tensor, torch.Tensor | None]:
    out = forward(batch["rgb"], batch["dsm"], batch["mask_rgb"], batch["mask_dsm"], model, params)
    p = model.rgb_cfg.patch_size
    mb = MaskedBatch(
        batch["rgb"], out.recon_rgb, pixel_mask(batch["mask_rgb"], p),
        batch["dsm"], out.recon_dsm, pixel_mask(batch["mask_dsm"], p),
        count_mode=loss_cfg.count_mode,
    )
    mim = mim_loss(mb)
    nce = None
    if batch["rgb"].shape[0] >= 2:
        nce = infonce_loss(pool_embedding(out.feat_rgb), pool_embedding(out.feat_dsm), loss_cfg)
    return mim, nce


def train_step(
    model: DualMIMModel,
    batch: dict,
    config: TrainConfig,
    state: AdamState,
    lr: float,
    include_nce: bool = True,
    where: tuple[int, int] = (0, 0),
) -> StepResult:
    """Forward, backward and AdamW update of ``model.params`` in place.

    ``include_nce=False`` builds the objective from the reconstruction term alone.
    """
    params = model.params
    work = ParamSet({k: params[k].detach().requires_grad_(True) for k in params})
    try:
        mim, nce = batch_losses(model, work, batch, config.loss)
    except FloatingPointError as exc:
        nan = float("nan")
        raise TrainingDiverged(where[0], where[1], {"mim": nan, "nce": nan, "total": nan}) from exc
    if include_nce and nce is not None:
        total = total_loss(mim, nce, config.loss)
    else:
        if include_nce and config.loss.alpha > 0:
            raise ValueError("the contrastive term needs a batch of at least 2")
        total = (1.0 - config.loss.alpha) * mim if include_nce else mim
    nce_val = float("nan") if nce is None else nce.item()
    parts = {"mim": mim.item(), "nce": nce_val, "total": total.item()}
    if not (math.isfinite(parts["mim"]) and math.isfinite(parts["total"])):
        raise TrainingDiverged(where[0], where[1], parts)
    names = list(work)
    grads = torch.autograd.grad(total, [work[n] for n in names], allow_unused=True)
    grads = {n: (torch.zeros_like(work[n]) if g is None else g) for n, g in zip(names, grads)}
    optimizer_update(params, grads, state, lr, config.adamw)
    return StepResult(parts["mim"], nce_val, parts["total"])


def batches_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def normalize_all(tiles: Sequence[PairedTile], stats: dict[str, NormStats]) -> list[PairedTile]:
    missing = sorted({t.city for t in tiles} - set(stats))
    if missing:
        raise ConfigError(f"no normalization statistics for cities {missing}")
    return [normalize(t, stats[t.city]) for t in tiles]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    metrics: list[EpochMetrics]
    stats: dict[str, NormStats]


def pretrain(
    tiles: Sequence[PairedTile] | str | os.PathLike,
    config: TrainConfig,
    stats: dict[str, NormStats] | None = None,
    *,
    out_dir: str | os.PathLike | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> PretrainResult:
    """Pre-train a dual model from scratch on raw (un-normalized) tiles.

    ``tiles`` may be a manifest path. When ``out_dir`` is given the metric log
    (``metrics.tsv``) and periodic/final checkpoints are written there.
    """
    from .tileio import load_dataset

    if isinstance(tiles, (str, os.PathLike)):
        tiles = load_dataset(tiles)
    tiles = list(tiles)
    if not tiles:
        raise ValueError("pretrain needs a non-empty dataset")
    torch.set_num_threads(config.threads)
    stats = compute_all_stats(tiles) if stats is None else stats
    data = normalize_all(tiles, stats)

    model = init_model(config.rgb_encoder, config.dsm_encoder, seed=config.seed)
    state = AdamState()
    n = len(data)
    bs = min(config.batch_size, n)
    per_epoch = batches_per_epoch(n, bs)
    total_steps = config.epochs * per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.tsv").write_text("", encoding="utf-8")

    metrics: list[EpochMetrics] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = _rng(config.seed, 1, epoch).permutation(n)
        sums = np.zeros(3)
        lr = 0.0
        for b in range(per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            batch = prepare_batch([data[i] for i in idx], config, _rng(config.seed, 2, epoch, b))
            lr = lr_at(step, total_steps, config)
            res = train_step(model, batch, config, state, lr, where=(epoch, b))
            sums += (res.mim, res.nce, res.total)
            step += 1
        mim, nce, tot = sums / per_epoch
        em = EpochMetrics(epoch, float(mim), float(nce), float(tot), lr)
        metrics.append(em)
        logger.info("epoch %d mim %.4f nce %.4f total %.4f lr %.2e", epoch, mim, nce, tot, lr)
        if on_epoch is not None:
            on_epoch(em)
        if out_dir is not None:
            with open(out_dir / "metrics.tsv", "a", encoding="utf-8", newline="\n") as fh:
                fh.write(em.line())
            if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch != config.epochs:
                ck = Checkpoint(config, model.params.clone(), _copy_state(state), epoch, list(metrics))
                save_checkpoint(ck, out_dir / f"checkpoint_{epoch:04d}.fmck")

    ckpt = Checkpoint(config, model.params, state, config.epochs, metrics)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint_final.fmck")
    return PretrainResult(ckpt, metrics, stats)


def _copy_state(s: AdamState) -> AdamState:
    return AdamState(s.step, {k: v.clone() for k, v in s.m.items()}, {k: v.clone() for k, v in s.v.items()})


def read_metric_log(path) -> list[EpochMetrics]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"metric log line {lineno}: expected 5 fields", offset=lineno)
        out.append(EpochMetrics(int(parts[0]), *(float(p) for p in parts[1:])))
    return out


# -- checkpoint format -------------------------------------------------------------
#
#   magic b"FMCK" | u16 version
#   u32 len + UTF-8 config text (key = value lines)
#   u32 epoch
#   u32 count, then tensor records                 (model parameters)
#   u64 optimizer step | u32 count, tensor records (first moments, then second moments)
#   u32 count, then (u32 epoch, f64 mim, f64 nce, f64 total, f64 lr) metric records
#
# tensor record: u16 name length | name UTF-8 | u8 ndim | u32 dims... | f32 data
# All little-endian.

CKPT_MAGIC = b"FMCK"
CKPT_VERSION = 1
_METRIC = struct.Struct("<Idddd")


def _write_tensor(fh, name: str, t: torch.Tensor) -> None:
    raw = name.encode("utf-8")
    arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    text = ckpt.config.to_text().encode("utf-8")
    fh.write(struct.pack("<I", len(text)) + text)
    fh.write(struct.pack("<I", ckpt.epoch))
    fh.write(struct.pack("<I", len(ckpt.params)))
    for name in ckpt.params:
        _write_tensor(fh, name, ckpt.params[name])
    names = sorted(ckpt.opt_state.m)
    fh.write(struct.pack("<QI", ckpt.opt_state.step, 2 * len(names)))
    for name in names:
        _write_tensor(fh, "m:" + name, ckpt.opt_state.m[name])
    for name in names:
        _write_tensor(fh, "v:" + name, ckpt.opt_state.v[name])
    fh.write(struct.pack("<I", len(ckpt.metrics)))
    for m in ckpt.metrics:
        fh.write(_METRIC.pack(m.epoch, m.mim, m.nce, m.total, m.lr))
    return fh.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.off)
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def tensor(self) -> tuple[str, torch.Tensor]:
        (n,) = self.unpack("<H", "tensor name length")
        name = self.take(n, "tensor name").decode("utf-8")
        (ndim,) = self.unpack("<B", f"rank of {name}")
        shape = self.unpack(f"<{ndim}I", f"shape of {name}") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
        return name, torch.from_numpy(data.astype(np.float32))


def decode_checkpoint(buf: bytes, expected: TrainConfig | None = None) -> Checkpoint:
    """Parse and validate a checkpoint.

    Tensor names and shapes are checked against the encoder configs stored in the
    checkpoint; when ``expected`` is given its encoder configs must match too.
    """
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})", offset=4)
    (n,) = r.unpack("<I", "config length")
    config = TrainConfig.from_text(r.take(n, "config").decode("utf-8"))
    if expected is not None:
        for name in ("rgb_encoder", "dsm_encoder"):
            if getattr(expected, name) != getattr(config, name):
                raise ConfigError(
                    f"checkpoint {name} {getattr(config, name)} does not match expected {getattr(expected, name)}"
                )
    (epoch,) = r.unpack("<I", "epoch")

    want = model_shapes(config.rgb_encoder, config.dsm_encoder)
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        name, t = r.tensor()
        _check_tensor(name, t, want, params)
        params[name] = t
    missing = sorted(set(want) - set(params))
    if missing:
        raise FormatError(f"checkpoint lacks tensors {missing[:5]}")

    step, count = r.unpack("<QI", "optimizer header")
    m, v = {}, {}
    for _ in range(count):
        name, t = r.tensor()
        kind, _, base = name.partition(":")
        if kind not in ("m", "v"):
            raise FormatError(f"unknown optimizer tensor {name!r}")
        target = m if kind == "m" else v
        _check_tensor(base, t, want, target)
        target[base] = t
    if set(m) != set(v):
        raise FormatError("optimizer first/second moments cover different tensors")

    (count,) = r.unpack("<I", "metric count")
    metrics = [EpochMetrics(*r.unpack(_METRIC.format, "metric record")) for _ in range(count)]
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes in checkpoint", offset=r.off)
    return Checkpoint(config, ParamSet(params), AdamState(step, m, v), epoch, metrics)


def _check_tensor(name: str, t: torch.Tensor, want: dict, seen: dict) -> None:
    if name not in want:
        raise FormatError(f"unknown tensor {name!r} in checkpoint")
    if name in seen:
        raise FormatError(f"duplicate tensor {name!r} in checkpoint")
    if tuple(t.shape) != want[name]:
        raise ShapeError(f"tensor {name!r} has shape {tuple(t.shape)}, config requires {want[name]}")


def load_checkpoint(path, expected: TrainConfig | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected)
