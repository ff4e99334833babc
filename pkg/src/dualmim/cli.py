"""``dualmim`` command line: corpus generation, statistics, pre-training, evaluation, panels."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgtext
from .errors import ConfigError, TrainingDiverged
from .evalharness import (
    MODES,
    AblationConfig,
    DataConfig,
    EvalConfig,
    ablation_corpora,
    linear_probe,
    run_ablation,
    segment_eval,
    variant_config,
)
from .model import DualMIMModel, forward, init_model, sample_mask
from .synthdata import PairedTile
from .tileio import NormStats, compute_all_stats, denormalize, load_dataset, normalize, read_stats, save_dataset, write_stats
from .trainer import Checkpoint, TrainConfig, load_checkpoint, pretrain, save_checkpoint

logger = logging.getLogger("dualmim")

MID_GRAY = 128


# -- run configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Training keys at top level (``epochs``, ``loss.alpha``), plus ``data.*`` and ``eval.*``."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        sections: dict[str, dict[str, str]] = {"train": {}, "data": {}, "eval": {}}
        for key, value in items.items():
            head, _, rest = key.partition(".")
            if head in ("data", "eval") and rest:
                sections[head][rest] = value
            else:
                sections["train"][key] = value
        return cls(
            train=cfgtext.apply_items(TrainConfig(), sections["train"]),
            data=cfgtext.apply_items(DataConfig(), sections["data"], "data."),
            eval=cfgtext.apply_items(EvalConfig(), sections["eval"], "eval."),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_items(cfgtext.parse_config_text(Path(path).read_text(encoding="utf-8")))

    def to_text(self) -> str:
        return cfgtext.to_text(self.train) + cfgtext.to_text(self.data, "data.") + cfgtext.to_text(self.eval, "eval.")

    def ablation(self, modalities=MODES) -> AblationConfig:
        return AblationConfig(train=self.train, data=self.data, eval=self.eval, modalities=tuple(modalities))


@dataclass
class RunManifest:
    config_path: str
    out_dir: str
    command: str
    seed: int
    version: str = __version__
    threads: int = 1

    def write(self, path) -> None:
        rows = [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]
        Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in rows), encoding="utf-8", newline="\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        kv = dict(line.split("\t", 1) for line in Path(path).read_text(encoding="utf-8").splitlines() if line)
        return cls(kv["config_path"], kv["out_dir"], kv["command"], int(kv["seed"]), kv["version"], int(kv["threads"]))


# -- reconstruction panels ---------------------------------------------------------------


def to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) for (H, W, 3) uint8 or PGM (P5) for (H, W) uint8."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write image of shape {image.shape}")
    h, w = image.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    magic, dims, maxval, payload = parts
    w, h = (int(v) for v in dims.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError("unsupported PNM header")
    shape = (h, w, 3) if magic == b"P6" else (h, w)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def write_panels(
    truth: PairedTile, recon: PairedTile, mask_rgb: np.ndarray, mask_dsm: np.ndarray, patch_size: int, out_prefix
) -> list[Path]:
    """Write ``{prefix}_rgb.ppm`` and ``{prefix}_dsm.pgm`` triptychs from raw-unit tiles.

    Panels: ground truth | input with masked patches at mid-gray | reconstruction.
    RGB reflectance maps to bytes by x255; heights by 255 / (max true height of the tile).
    """
    if truth.rgb.shape != recon.rgb.shape or truth.dsm.shape != recon.dsm.shape:
        raise ValueError("reconstruction does not match the tile shape")
    h, w = truth.labels.shape
    out_prefix = Path(out_prefix)
    paths = []
    top = float(truth.dsm.max())
    dsm_scale = 255.0 / top if top > 0 else 1.0
    for mod, mask, scale in (("rgb", mask_rgb, 255.0), ("dsm", mask_dsm, dsm_scale)):
        gt = to_bytes(getattr(truth, mod) * scale)
        rc = to_bytes(getattr(recon, mod) * scale)
        px = np.kron(np.asarray(mask, dtype=bool), np.ones((patch_size, patch_size), dtype=bool))
        if px.shape != (h, w):
            raise ValueError(f"mask {np.shape(mask)} with patch {patch_size} does not cover a {h}x{w} tile")
        masked = gt.copy()
        masked[px] = MID_GRAY
        panel = np.concatenate([gt, masked, rc], axis=1)
        if mod == "dsm":
            panel = panel[..., 0]
        path = out_prefix.with_name(f"{out_prefix.name}_{mod}.{'ppm' if mod == 'rgb' else 'pgm'}")
        write_ppm(path, panel)
        paths.append(path)
    return paths


@torch.no_grad()
def dump_reconstruction_panel(
    source: Checkpoint | DualMIMModel,
    tile: PairedTile,
    stats: NormStats,
    mask_seeds=(0, 1),
    out_prefix="recon",
    mask_ratio: float | None = None,
) -> list[Path]:
    """Mask a raw tile, reconstruct it with the model and write the triptychs.

    ``mask_seeds`` gives the RGB and DSM mask seeds (one int seeds both).
    """
    if isinstance(source, Checkpoint):
        ratio = source.config.mask_ratio if mask_ratio is None else mask_ratio
        model = source.model()
    else:
        ratio = 0.6 if mask_ratio is None else mask_ratio
        model = source
    cfg = model.rgb_cfg
    if tile.labels.shape != (cfg.image_size, cfg.image_size):
        raise ValueError(f"tile {tile.labels.shape} does not fit a model for {cfg.image_size}x{cfg.image_size} input")
    s_rgb, s_dsm = (mask_seeds, mask_seeds) if isinstance(mask_seeds, int) else mask_seeds
    m_rgb = sample_mask(cfg.grid, ratio, 1, s_rgb).grid
    m_dsm = sample_mask(cfg.grid, ratio, 1, s_dsm).grid
    n = normalize(tile, stats)
    out = forward(torch.from_numpy(n.rgb), torch.from_numpy(n.dsm), m_rgb, m_dsm, model)
    recon = denormalize(n.replace(rgb=out.recon_rgb[0].numpy(), dsm=out.recon_dsm[0].numpy()), stats)
    return write_panels(tile, recon, m_rgb, m_dsm, cfg.patch_size, out_prefix)


# -- commands -----------------------------------------------------------------------------


def _tiles(args, run: RunConfig, split: str) -> list[PairedTile]:
    if args.data:
        return load_dataset(args.data)
    train, held = ablation_corpora(run.data, run.train.image_size, run.train.rgb_encoder.patch_size)
    return train if split == "train" else held


def _stats_for(args, ckpt_path: str | None, fallback: list[PairedTile]) -> dict[str, NormStats]:
    if args.stats:
        return read_stats(args.stats)
    if ckpt_path:
        beside = Path(ckpt_path).with_name("stats.txt")
        if beside.exists():
            return read_stats(beside)
    return compute_all_stats(fallback)


def _write_records(path: Path, label: str, mode: str, metric: str, seeds, values) -> None:
    lines = [f"{label}\t{mode}\t{metric}\t{s}\t{v!r}\n" for s, v in zip(seeds, values)]
    path.write_text("".join(lines), encoding="utf-8", newline="\n")


def cmd_synth(args, run: RunConfig, out: Path) -> list[Path]:
    train, held = ablation_corpora(run.data, run.train.image_size, run.train.rgb_encoder.patch_size)
    return [save_dataset(train, out / "train"), save_dataset(held, out / "eval")]


def cmd_stats(args, run: RunConfig, out: Path) -> list[Path]:
    path = out / "stats.txt"
    write_stats(compute_all_stats(_tiles(args, run, "train")).values(), path)
    return [path]


def cmd_pretrain(args, run: RunConfig, out: Path) -> list[Path]:
    tiles = _tiles(args, run, "train")
    stats = read_stats(args.stats) if args.stats else compute_all_stats(tiles)
    write_stats(stats.values(), out / "stats.txt")
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8", newline="\n")
    pretrain(tiles, run.train, stats, out_dir=out)
    return [out / "stats.txt", out / "metrics.tsv", out / "checkpoint_final.fmck"]


def _model_for(args, run: RunConfig):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        return ckpt, "checkpoint"
    return init_model(run.train.rgb_encoder, run.train.dsm_encoder, seed=run.train.seed), "random"


def cmd_probe(args, run: RunConfig, out: Path) -> list[Path]:
    tiles = _tiles(args, run, "eval")
    source, label = _model_for(args, run)
    mode = args.modality or "rgb"
    seeds = list(run.eval.seeds)
    acc = linear_probe(source, tiles, mode, seeds, _stats_for(args, args.checkpoint, tiles), run.eval)
    path = out / "probe.tsv"
    _write_records(path, label, mode, "probe_accuracy", seeds, acc)
    print(f"probe {mode}: mean accuracy {np.mean(acc):.4f} over seeds {seeds}")
    return [path]


def cmd_segment(args, run: RunConfig, out: Path) -> list[Path]:
    tiles = _tiles(args, run, "eval")
    source, label = _model_for(args, run)
    mode = args.modality or "rgb+dsm"
    seeds = list(run.eval.seeds)
    scores = segment_eval(source, tiles, mode, seeds, _stats_for(args, args.checkpoint, tiles), run.eval)
    path = out / "segment.tsv"
    _write_records(path, label, mode, "seg_miou", seeds, scores)
    print(f"segment {mode}: mean mIoU {np.mean(scores):.4f} over seeds {seeds}")
    return [path]


def cmd_ablate(args, run: RunConfig, out: Path) -> list[Path]:
    modalities = (args.modality,) if args.modality else MODES
    config = run.ablation(modalities)
    written = []

    def keep(init: str, ckpt: Checkpoint) -> None:
        path = out / f"checkpoint_{init.replace('+', '_')}.fmck"
        save_checkpoint(ckpt, path)
        written.append(path)

    table = run_ablation(config, on_pretrained=keep)
    (out / "report.txt").write_text(table.report(), encoding="utf-8", newline="\n")
    (out / "records.tsv").write_text("".join(r + "\n" for r in table.records()), encoding="utf-8", newline="\n")
    print(table.report(), end="")
    return written + [out / "report.txt", out / "records.tsv"]


def cmd_reconstruct(args, run: RunConfig, out: Path) -> list[Path]:
    if not args.checkpoint:
        raise ConfigError("reconstruct needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    tiles = _tiles(args, run, "eval")
    if not 0 <= args.tile < len(tiles):
        raise ConfigError(f"--tile {args.tile} outside [0, {len(tiles)})")
    tile = tiles[args.tile]
    stats = _stats_for(args, args.checkpoint, tiles)
    if tile.city not in stats:
        raise ConfigError(f"no statistics for city {tile.city!r}")
    return dump_reconstruction_panel(
        ckpt, tile, stats[tile.city], (args.mask_seed, args.mask_seed + 1), out / f"tile{args.tile:04d}"
    )


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "segment": cmd_segment,
    "ablate": cmd_ablate,
    "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the training/initialization seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, help="torch intra-op threads (1 = deterministic)")
    common.add_argument("--modality", choices=MODES)
    common.add_argument("--data", help="dataset manifest (default: generate the synthetic corpus)")
    common.add_argument("--stats", help="normalization statistics file")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualmim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate the training and evaluation corpora",
        "stats": "per-city normalization statistics",
        "pretrain": "dual-encoder masked image pre-training",
        "probe": "frozen-encoder linear probe (tile classes)",
        "segment": "frozen-encoder per-patch segmentation",
        "ablate": "full init x modality ablation grid",
        "reconstruct": "masked reconstruction panels (PPM/PGM)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "reconstruct":
            p.add_argument("--tile", type=int, default=0, help="index into the evaluation tiles")
            p.add_argument("--mask-seed", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        changes["threads"] = args.threads
    if changes:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, **changes))
    return run


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        run = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        torch.set_num_threads(run.train.threads)
        RunManifest(
            config_path=str(args.config or ""),
            out_dir=str(out),
            command=args.command,
            seed=run.train.seed,
            threads=run.train.threads,
        ).write(out / "run_manifest.tsv")
        outputs = COMMANDS[args.command](args, run, out)
    except (ValueError, OSError, TrainingDiverged) as exc:
        print(f"dualmim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    missing = [str(p) for p in outputs if not Path(p).is_file()]
    if missing:
        print(f"dualmim {args.command}: outputs not written: {missing}", file=sys.stderr)
        return 1
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
