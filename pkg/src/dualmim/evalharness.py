"""Downstream evaluation of frozen encoders: linear probe, per-patch segmentation, ablation grid."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .losses import MaskedBatch, mim_loss, pixel_mask
from .model import DualMIMModel, encode, forward, fuse_features, init_model, pool_embedding, sample_mask
from .nn_core import ParamSet, patchify
from .synthdata import NUM_CLASSES, PairedTile, dominant_label
from .tileio import NormStats, compute_all_stats
from .trainer import AdamWConfig, Checkpoint, TrainConfig, _rng, adamw_step, normalize_all, pretrain

logger = logging.getLogger(__name__)

MODES = ("rgb", "dsm", "rgb+dsm")
INITS = ("random", "mim", "mim+contrastive")
METRICS = ("probe_accuracy", "seg_miou")


@dataclass(frozen=True)
class EvalConfig:
    """Budget of the linear heads trained on frozen features.

    Both heads start from zero weights. The probe is trained full-batch, the
    segmentation head on seeded minibatches of token rows. The seed picks the
    80/20 tile split and the minibatches.
    """

    seeds: tuple[int, ...] = (0, 1, 2)
    train_fraction: float = 0.8
    probe_steps: int = 300
    probe_lr: float = 0.05
    seg_steps: int = 300
    seg_lr: float = 0.05
    seg_batch: int = 4096
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one evaluation seed is required")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        for name in ("probe_steps", "seg_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


# -- metrics -------------------------------------------------------------------------


def confusion(pred: np.ndarray, target: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    target = np.asarray(target).ravel().astype(np.int64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction has {pred.size} elements, target {target.size}")
    return np.bincount(target * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(pred: np.ndarray, target: np.ndarray, num_classes: int = NUM_CLASSES) -> float:
    """Mean over classes of |pred ∩ target| / |pred ∪ target|.

    A class absent from both prediction and target has no defined IoU and is
    left out of the mean.
    """
    cm = confusion(pred, target, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise ValueError("empty prediction and target")
    return float(np.mean(inter[present] / union[present]))


def accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred).ravel(), np.asarray(target).ravel()
    return float((pred == target).mean())


# -- frozen features -------------------------------------------------------------------


def _model_of(source) -> DualMIMModel:
    if isinstance(source, Checkpoint):
        return source.model()
    if isinstance(source, DualMIMModel):
        return source
    raise TypeError(f"expected a Checkpoint or DualMIMModel, got {type(source).__name__}")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"modality must be one of {MODES}, got {mode!r}")


def _stack(tiles: Sequence[PairedTile], mode: str) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    if not tiles:
        raise ValueError("no tiles to evaluate")
    rgb = dsm = None
    if mode in ("rgb", "rgb+dsm"):
        if any(t.rgb is None for t in tiles):
            raise ValueError("RGB data missing for an rgb evaluation")
        rgb = torch.from_numpy(np.stack([t.rgb for t in tiles]).astype(np.float32))
    if mode in ("dsm", "rgb+dsm"):
        if any(t.dsm is None for t in tiles):
            raise ValueError("DSM data missing for a dsm evaluation")
        dsm = torch.from_numpy(np.stack([t.dsm for t in tiles]).astype(np.float32))
    return rgb, dsm


@torch.no_grad()
def token_features(model: DualMIMModel, tiles: Sequence[PairedTile], mode: str, chunk: int = 64) -> torch.Tensor:
    """Unmasked encoder output per token, (B, N, D); the two encoders are fused for ``rgb+dsm``.

    ``tiles`` must already be normalized.
    """
    _check_mode(mode)
    rgb, dsm = _stack(tiles, mode)
    out = []
    for s in range(0, len(tiles), chunk):
        parts = []
        if rgb is not None:
            parts.append(encode(model, "rgb", rgb[s : s + chunk]))
        if dsm is not None:
            parts.append(encode(model, "dsm", dsm[s : s + chunk]))
        out.append(parts[0] if len(parts) == 1 else fuse_features(*parts))
    return torch.cat(out)


@torch.no_grad()
def pooled_features(model: DualMIMModel, tiles: Sequence[PairedTile], mode: str) -> torch.Tensor:
    """Pooled unit embedding per tile; for ``rgb+dsm`` the two pooled embeddings side by side."""
    _check_mode(mode)
    if mode == "rgb+dsm":
        return torch.cat([pooled_features(model, tiles, "rgb"), pooled_features(model, tiles, "dsm")], dim=1)
    return pool_embedding(token_features(model, tiles, mode))


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seeded tile-level split; both parts are non-empty."""
    if n < 2:
        raise ValueError("need at least 2 tiles to split")
    order = _rng(seed, 7).permutation(n)
    k = min(n - 1, max(1, int(round(train_fraction * n))))
    return np.sort(order[:k]), np.sort(order[k:])


def _standardize(train: torch.Tensor, *others: torch.Tensor) -> list[torch.Tensor]:
    dims = tuple(range(train.dim() - 1))
    mu = train.mean(dim=dims, keepdim=True)
    sd = train.std(dim=dims, keepdim=True, unbiased=False).clamp_min(1e-6)
    return [(x - mu) / sd for x in (train, *others)]


def fit_linear(
    x: torch.Tensor,
    y: torch.Tensor,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    d_out: int,
    steps: int,
    lr: float,
    weight_decay: float,
    batch: int | None = None,
    seed: int = 0,
) -> ParamSet:
    """AdamW on a zero-initialized linear map ``x @ W + b``.

    Rows of ``x``/``y`` are examples. With ``batch`` each step uses that many rows
    drawn with a seeded generator, otherwise every step is full-batch.
    """
    d_in = x.shape[-1]
    head = ParamSet({"weight": torch.zeros(d_in, d_out, dtype=x.dtype), "bias": torch.zeros(d_out, dtype=x.dtype)})
    hyper = AdamWConfig(weight_decay=weight_decay)
    m = {k: torch.zeros_like(v) for k, v in head.items()}
    v = {k: torch.zeros_like(t) for k, t in head.items()}
    gen = torch.Generator().manual_seed(seed)
    n = x.shape[0]
    for step in range(1, steps + 1):
        if batch is not None and batch < n:
            idx = torch.randint(0, n, (batch,), generator=gen)
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        w = head["weight"].requires_grad_(True)
        b = head["bias"].requires_grad_(True)
        gw, gb = torch.autograd.grad(loss_fn(xb @ w + b, yb), [w, b])
        for name, g in (("weight", gw), ("bias", gb)):
            p, m[name], v[name] = adamw_step(
                head[name].detach(), g, m[name], v[name], step, lr, hyper, decay=(name == "weight")
            )
            head[name] = p
    return head.map(lambda t: t.detach())


# -- linear probe -------------------------------------------------------------------------


def tile_classes(tiles: Sequence[PairedTile]) -> np.ndarray:
    return np.array([dominant_label(t.labels) for t in tiles], dtype=np.int64)


def probe_features(features: torch.Tensor, labels: np.ndarray, seeds, config: EvalConfig | None = None) -> list[float]:
    """Held-out accuracy of a multinomial logistic regression per seed on fixed features."""
    config = config or EvalConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("linear probe needs at least two classes in the labeled set")
    if features.shape[0] != labels.shape[0]:
        raise ValueError(f"{features.shape[0]} feature rows for {labels.shape[0]} labels")
    y_all = torch.from_numpy(labels)
    k = max(NUM_CLASSES, int(labels.max()) + 1)
    out = []
    for seed in seeds:
        tr, te = split_indices(len(labels), seed, config.train_fraction)
        x_tr, x_te = _standardize(features[tr].double(), features[te].double())
        head = fit_linear(
            x_tr, y_all[tr], F.cross_entropy, k, config.probe_steps, config.probe_lr, config.weight_decay, seed=seed
        )
        pred = (x_te @ head["weight"] + head["bias"]).argmax(dim=1).numpy()
        out.append(accuracy(pred, labels[te]))
    return out


def linear_probe(
    source,
    tiles: Sequence[PairedTile],
    modality: str,
    seeds=(0, 1, 2),
    stats: dict[str, NormStats] | None = None,
    config: EvalConfig | None = None,
) -> list[float]:
    """Frozen-encoder tile classification (dominant pixel class) accuracy per seed.

    ``tiles`` are raw; ``stats`` defaults to statistics of ``tiles`` themselves.
    """
    model = _model_of(source)
    stats = compute_all_stats(tiles) if stats is None else stats
    labels = tile_classes(tiles)
    if len(np.unique(labels)) < 2:
        raise ValueError("linear probe needs at least two classes in the labeled set")
    feats = pooled_features(model, normalize_all(tiles, stats), modality)
    return probe_features(feats, labels, seeds, config)


# -- segmentation ------------------------------------------------------------------------


def token_labels(tiles: Sequence[PairedTile], patch_size: int) -> torch.Tensor:
    """(B, H, W) labels -> (B, N, p*p) in the patchify pixel order."""
    lab = torch.from_numpy(np.stack([t.labels for t in tiles]).astype(np.int64))[..., None]
    return patchify(lab, patch_size)


def _pixel_ce(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(z.reshape(-1, NUM_CLASSES), y.reshape(-1))


def segment_features(
    features: torch.Tensor, tiles: Sequence[PairedTile], patch_size: int, seeds, config: EvalConfig | None = None
) -> list[float]:
    """mIoU on held-out tiles of a per-token linear head to ``p*p*classes`` logits, per seed."""
    config = config or EvalConfig()
    labels = token_labels(tiles, patch_size)
    pp = patch_size * patch_size
    if features.shape[:2] != labels.shape[:2]:
        raise ValueError(f"features {tuple(features.shape)} do not match labels {tuple(labels.shape)}")
    out = []
    for seed in seeds:
        tr, te = split_indices(len(tiles), seed, config.train_fraction)
        x_tr, x_te = _standardize(features[tr].float(), features[te].float())
        x_tr = x_tr.reshape(-1, x_tr.shape[-1])
        y_tr = labels[tr].reshape(-1, pp)
        head = fit_linear(
            x_tr, y_tr, _pixel_ce, pp * NUM_CLASSES, config.seg_steps, config.seg_lr, config.weight_decay,
            batch=config.seg_batch, seed=seed,
        )
        logits = x_te @ head["weight"] + head["bias"]
        pred = logits.reshape(*logits.shape[:2], pp, NUM_CLASSES).argmax(dim=-1)
        out.append(miou(pred.numpy(), labels[te].numpy()))
    return out


def segment_eval(
    source,
    tiles: Sequence[PairedTile],
    mode: str,
    seeds=(0, 1, 2),
    stats: dict[str, NormStats] | None = None,
    config: EvalConfig | None = None,
) -> list[float]:
    """Frozen-encoder per-pixel ground/low/tall segmentation mIoU per seed."""
    model = _model_of(source)
    stats = compute_all_stats(tiles) if stats is None else stats
    feats = token_features(model, normalize_all(tiles, stats), mode)
    return segment_features(feats, tiles, model.rgb_cfg.patch_size, seeds, config)


# -- representation diagnostics --------------------------------------------------------------


@torch.no_grad()
def alignment_gap(source, tiles: Sequence[PairedTile], stats: dict[str, NormStats] | None = None) -> dict[str, float]:
    """Mean cosine similarity of matched RGB/DSM embeddings minus that of mismatched pairs."""
    model = _model_of(source)
    stats = compute_all_stats(tiles) if stats is None else stats
    data = normalize_all(tiles, stats)
    if len(data) < 2:
        raise ValueError("alignment gap needs at least two tiles")
    sim = pooled_features(model, data, "rgb") @ pooled_features(model, data, "dsm").T
    n = sim.shape[0]
    pos = sim.diagonal().mean().item()
    neg = ((sim.sum() - sim.diagonal().sum()) / (n * n - n)).item()
    return {"positive": pos, "negative": neg, "gap": pos - neg}


@torch.no_grad()
def reconstruction_error(
    source,
    tiles: Sequence[PairedTile],
    stats: dict[str, NormStats],
    mask_ratio: float = 0.6,
    mask_seed: int = 0,
) -> float:
    """Masked L1 reconstruction error on normalized tiles with seeded masks."""
    model = _model_of(source)
    data = normalize_all(tiles, stats)
    rgb, dsm = _stack(data, "rgb+dsm")
    grid, p = model.rgb_cfg.grid, model.rgb_cfg.patch_size
    rng = _rng(mask_seed, 11)
    m_rgb = torch.from_numpy(np.stack([sample_mask(grid, mask_ratio, 1, rng).grid for _ in data]))
    m_dsm = torch.from_numpy(np.stack([sample_mask(grid, mask_ratio, 1, rng).grid for _ in data]))
    out = forward(rgb, dsm, m_rgb, m_dsm, model)
    return mim_loss(MaskedBatch(rgb, out.recon_rgb, pixel_mask(m_rgb, p), dsm, out.recon_dsm, pixel_mask(m_dsm, p))).item()


# -- ablation ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    """Synthetic corpora: the pre-training set and an independent labeled evaluation set."""

    tiles_per_city: int = 86
    train_tiles: int = 256
    eval_tiles_per_city: int = 100
    seed: int = 11
    eval_seed: int = 2024

    def __post_init__(self):
        if self.tiles_per_city < 1 or self.eval_tiles_per_city < 1 or self.train_tiles < 1:
            raise ConfigError("tile counts must be positive")


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    inits: tuple[str, ...] = INITS
    modalities: tuple[str, ...] = MODES
    contrastive_alpha: float = 0.05

    def __post_init__(self):
        bad = [i for i in self.inits if i not in INITS] + [m for m in self.modalities if m not in MODES]
        if bad:
            raise ConfigError(f"unknown ablation inits/modalities: {bad}")


@dataclass
class Cell:
    init: str
    modality: str
    seeds: list[int]
    probe_accuracy: list[float]
    seg_miou: list[float]

    def values(self, metric: str) -> list[float]:
        return getattr(self, metric)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def std(self, metric: str) -> float:
        return float(np.std(self.values(metric)))


@dataclass
class AblationTable:
    cells: dict[tuple[str, str], Cell]

    def __getitem__(self, key: tuple[str, str]) -> Cell:
        return self.cells[key]

    def keys(self) -> list[tuple[str, str]]:
        return list(self.cells)

    def records(self) -> list[str]:
        lines = []
        for (init, mod), cell in self.cells.items():
            for metric in METRICS:
                for seed, value in zip(cell.seeds, cell.values(metric)):
                    lines.append(f"{init}\t{mod}\t{metric}\t{seed}\t{value!r}")
        return lines

    def report(self) -> str:
        head = f"{'init':<16}{'modality':<10}{'probe acc':>18}{'seg mIoU':>18}"
        rows = [head, "-" * len(head)]
        for (init, mod), c in self.cells.items():
            pa = f"{100 * c.mean('probe_accuracy'):.2f} ± {100 * c.std('probe_accuracy'):.2f}"
            sm = f"{100 * c.mean('seg_miou'):.2f} ± {100 * c.std('seg_miou'):.2f}"
            rows.append(f"{init:<16}{mod:<10}{pa:>18}{sm:>18}")
        return "\n".join(rows) + "\n"


def ablation_corpora(data: DataConfig, image_size: int, patch_size: int):
    from .synthdata import DEFAULT_PRESETS, generate_corpus

    presets = list(DEFAULT_PRESETS.values())
    train = generate_corpus(presets, data.tiles_per_city, image_size, data.seed, patch_size)[: data.train_tiles]
    held = generate_corpus(presets, data.eval_tiles_per_city, image_size, data.eval_seed, patch_size)
    return train, held


def variant_config(config: AblationConfig, init: str) -> TrainConfig:
    alpha = 0.0 if init == "mim" else config.contrastive_alpha
    return dataclasses.replace(config.train, loss=dataclasses.replace(config.train.loss, alpha=alpha))


def run_ablation(
    config: AblationConfig | None = None,
    *,
    checkpoints: dict[str, Checkpoint] | None = None,
    corpora: tuple[list[PairedTile], list[PairedTile]] | None = None,
    on_pretrained: Callable[[str, Checkpoint], None] | None = None,
) -> AblationTable:
    """Evaluate every (init, modality) cell with the same evaluation seeds.

    Pre-trained variants come from ``checkpoints`` when given, otherwise they are
    trained here. Normalization statistics always come from the pre-training corpus.
    """
    config = config or AblationConfig()
    enc = config.train.rgb_encoder
    train, held = corpora or ablation_corpora(config.data, config.train.image_size, enc.patch_size)
    stats = compute_all_stats(train)
    checkpoints = dict(checkpoints or {})
    models: dict[str, DualMIMModel] = {}
    for init in config.inits:
        if init == "random":
            models[init] = init_model(config.train.rgb_encoder, config.train.dsm_encoder, seed=config.train.seed)
            continue
        if init not in checkpoints:
            logger.info("pre-training variant %s", init)
            checkpoints[init] = pretrain(train, variant_config(config, init), stats).checkpoint
            if on_pretrained is not None:
                on_pretrained(init, checkpoints[init])
        models[init] = checkpoints[init].model()

    data = normalize_all(held, stats)
    classes = tile_classes(held)
    seeds = list(config.eval.seeds)
    cells = {}
    for init in config.inits:
        for mod in config.modalities:
            model = models[init]
            probe = probe_features(pooled_features(model, data, mod), classes, seeds, config.eval)
            seg = segment_features(token_features(model, data, mod), held, enc.patch_size, seeds, config.eval)
            cells[(init, mod)] = Cell(init, mod, seeds, probe, seg)
            logger.info("%s/%s probe %.4f seg %.4f", init, mod, np.mean(probe), np.mean(seg))
    return AblationTable(cells)
