"""Tile container format, dataset manifests and per-city normalization statistics.

Container layout (all integers little-endian)::

    magic    4 bytes   b"FMT1"
    version  u16
    width    u32
    height   u32
    rgb      f32[H*W*3]  row-major, channel last
    dsm      f32[H*W]
    labels   u8[H*W]
    city     u32 byte length + UTF-8 bytes

The tile id is not stored in the container; it travels in the manifest.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, VersionMismatchError
from .synthdata import PairedTile

MAGIC = b"FMT1"
VERSION = 1
SIGMA_FLOOR = 1e-6

_HEADER = struct.Struct("<4sHII")


def encode_tile(tile: PairedTile) -> bytes:
    h, w = tile.labels.shape
    rgb = np.ascontiguousarray(tile.rgb, dtype="<f4")
    dsm = np.ascontiguousarray(tile.dsm, dtype="<f4").reshape(h, w)
    labels = np.ascontiguousarray(tile.labels, dtype=np.uint8)
    if rgb.shape != (h, w, 3) or labels.shape != (h, w):
        raise FormatError(f"tile arrays disagree on size: rgb {rgb.shape}, dsm {tile.dsm.shape}, labels {labels.shape}")
    city = tile.city.encode("utf-8")
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, w, h),
            rgb.tobytes(),
            dsm.tobytes(),
            labels.tobytes(),
            struct.pack("<I", len(city)),
            city,
        ]
    )


def decode_tile(buf: bytes, tile_id: int = 0) -> PairedTile:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    magic, version, w, h = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported tile version {version} (expected {VERSION})", offset=4)
    off = _HEADER.size
    n = w * h

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(buf):
            raise FormatError(f"truncated {what} payload: need {nbytes} bytes, have {len(buf) - off}", offset=off)
        chunk = buf[off : off + nbytes]
        off += nbytes
        return chunk

    rgb = np.frombuffer(take(12 * n, "rgb"), dtype="<f4").reshape(h, w, 3).astype(np.float32)
    dsm = np.frombuffer(take(4 * n, "dsm"), dtype="<f4").reshape(h, w, 1).astype(np.float32)
    labels = np.frombuffer(take(n, "labels"), dtype=np.uint8).reshape(h, w).copy()
    (city_len,) = struct.unpack("<I", take(4, "city length"))
    city = take(city_len, "city").decode("utf-8")
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off)
    return PairedTile(rgb=rgb, dsm=dsm, labels=labels, city=city, tile_id=tile_id)


def write_tile(tile: PairedTile, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tile(tile))
    os.replace(tmp, path)


def read_tile(path, tile_id: int = 0) -> PairedTile:
    return decode_tile(Path(path).read_bytes(), tile_id=tile_id)


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    city: str
    tile_id: int


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    lines = [f"{e.path}\t{e.city}\t{e.tile_id}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"manifest line {lineno}: expected 3 tab-separated fields", offset=lineno)
        try:
            tile_id = int(parts[2])
        except ValueError:
            raise FormatError(f"manifest line {lineno}: bad tile id {parts[2]!r}", offset=lineno) from None
        entries.append(ManifestEntry(parts[0], parts[1], tile_id))
    return entries


def save_dataset(tiles: Iterable[PairedTile], directory) -> Path:
    """Write every tile under ``directory/tiles/`` and a ``manifest.tsv`` next to it."""
    directory = Path(directory)
    (directory / "tiles").mkdir(parents=True, exist_ok=True)
    entries = []
    for t in tiles:
        rel = f"tiles/{t.city}_{t.tile_id:06d}.fmt"
        write_tile(t, directory / rel)
        entries.append(ManifestEntry(rel, t.city, t.tile_id))
    manifest = directory / "manifest.tsv"
    write_manifest(entries, manifest)
    return manifest


def load_dataset(manifest_path) -> list[PairedTile]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    tiles = []
    for e in read_manifest(manifest_path):
        t = read_tile(root / e.path, tile_id=e.tile_id)
        if t.city != e.city:
            raise FormatError(f"{e.path}: manifest says city {e.city!r}, file says {t.city!r}")
        tiles.append(t)
    return tiles


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    city: str
    mu_rgb: tuple[float, float, float]
    sigma_rgb: tuple[float, float, float]
    mu_dsm: float
    sigma_dsm: float

    def rgb_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mu_rgb, dtype=np.float64), np.asarray(self.sigma_rgb, dtype=np.float64)


def compute_city_stats(
    tiles: Iterable[PairedTile], city: str, per_channel_rgb: bool = True, sigma_floor: float = SIGMA_FLOOR
) -> NormStats:
    """Population mean and standard deviation over every pixel of a city's tiles.

    With ``per_channel_rgb=False`` the three RGB channels share one pooled
    mean/std pair.
    """
    tiles = list(tiles)
    if not tiles:
        raise ValueError("cannot compute statistics from an empty tile list")
    others = {t.city for t in tiles} - {city}
    if others:
        raise ValueError(f"tiles from other cities mixed into stats for {city!r}: {sorted(others)}")

    rgb = np.concatenate([t.rgb.reshape(-1, 3) for t in tiles]).astype(np.float64)
    dsm = np.concatenate([t.dsm.reshape(-1) for t in tiles]).astype(np.float64)
    if per_channel_rgb:
        mu_rgb = rgb.mean(axis=0)
        sg_rgb = rgb.std(axis=0)
    else:
        mu_rgb = np.full(3, rgb.mean())
        sg_rgb = np.full(3, rgb.std())
    sg_rgb = np.maximum(sg_rgb, sigma_floor)
    return NormStats(
        city=city,
        mu_rgb=tuple(float(v) for v in mu_rgb),
        sigma_rgb=tuple(float(v) for v in sg_rgb),
        mu_dsm=float(dsm.mean()),
        sigma_dsm=float(max(dsm.std(), sigma_floor)),
    )


def compute_all_stats(tiles: Iterable[PairedTile], **kw) -> dict[str, NormStats]:
    by_city: dict[str, list[PairedTile]] = {}
    for t in tiles:
        by_city.setdefault(t.city, []).append(t)
    return {c: compute_city_stats(ts, c, **kw) for c, ts in sorted(by_city.items())}


def _check_city(tile: PairedTile, stats: NormStats) -> None:
    if tile.city != stats.city:
        raise ValueError(f"tile from {tile.city!r} cannot use statistics of {stats.city!r}")


def normalize(tile: PairedTile, stats: NormStats) -> PairedTile:
    _check_city(tile, stats)
    mu, sg = stats.rgb_arrays()
    rgb = ((tile.rgb - mu) / sg).astype(np.float32)
    dsm = ((tile.dsm - stats.mu_dsm) / stats.sigma_dsm).astype(np.float32)
    return tile.replace(rgb=rgb, dsm=dsm)


def denormalize(tile: PairedTile, stats: NormStats) -> PairedTile:
    _check_city(tile, stats)
    mu, sg = stats.rgb_arrays()
    rgb = (tile.rgb * sg + mu).astype(np.float32)
    dsm = (tile.dsm * stats.sigma_dsm + stats.mu_dsm).astype(np.float32)
    return tile.replace(rgb=rgb, dsm=dsm)


def write_stats(stats: Iterable[NormStats], path) -> None:
    lines = []
    for s in stats:
        vals = [*s.mu_rgb, *s.sigma_rgb, s.mu_dsm, s.sigma_dsm]
        lines.append(" ".join([s.city, *(repr(float(v)) for v in vals)]) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_stats(path) -> dict[str, NormStats]:
    out: dict[str, NormStats] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 9:
            raise FormatError(f"stats line {lineno}: expected 9 fields, got {len(parts)}", offset=lineno)
        try:
            v = [float(x) for x in parts[1:]]
        except ValueError:
            raise FormatError(f"stats line {lineno}: non-numeric value", offset=lineno) from None
        if not all(math.isfinite(x) for x in v):
            raise FormatError(f"stats line {lineno}: non-finite value", offset=lineno)
        city = parts[0]
        if city in out:
            raise FormatError(f"stats line {lineno}: duplicate city {city!r}", offset=lineno)
        out[city] = NormStats(city, tuple(v[0:3]), tuple(v[3:6]), v[6], v[7])
    return out
