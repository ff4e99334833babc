"""Procedural city tiles: a DSM of box/gable buildings and its shaded RGB rendering.

Every tile is a pure function of ``(preset, seed, tile index)``, so corpora can be
regenerated bit-for-bit instead of being shipped.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

GROUND = 0
LOW = 1
TALL = 2
NUM_CLASSES = 3

# meters per pixel
GROUND_SAMPLE_DISTANCE = 1.5
AMBIENT = 0.25
NOISE_STD = 0.01
ROOF_PITCH_DEG = 20.0
MAX_COVERAGE = 0.8


@dataclass(frozen=True)
class CityPreset:
    name: str
    building_density: float
    height_range: tuple[float, float]
    albedo_seed_range: tuple[int, int]
    sun_azimuth: float
    sun_elevation: float

    def __post_init__(self):
        if not 0.0 <= self.building_density <= 1.0:
            raise ConfigError(f"building_density must be in [0, 1], got {self.building_density}")
        lo, hi = self.height_range
        if not 0.0 <= lo < hi:
            raise ConfigError(f"height_range must satisfy 0 <= min < max, got {self.height_range}")
        a_lo, a_hi = self.albedo_seed_range
        if not 0 <= a_lo <= a_hi <= 255:
            raise ConfigError(f"albedo_seed_range must lie in [0, 255], got {self.albedo_seed_range}")
        if any(ch.isspace() for ch in self.name) or not self.name:
            raise ConfigError(f"city name must be non-empty without whitespace: {self.name!r}")

    @property
    def tall_threshold(self) -> float:
        return 0.5 * (self.height_range[0] + self.height_range[1])

    def sun_vector(self) -> np.ndarray:
        """Unit vector pointing at the sun; x to the east (columns), y to the south (rows)."""
        az = math.radians(self.sun_azimuth)
        el = math.radians(self.sun_elevation)
        return np.array([math.sin(az) * math.cos(el), -math.cos(az) * math.cos(el), math.sin(el)])


# All three share a 12 m tall threshold so labels mean the same thing across cities.
DEFAULT_PRESETS: dict[str, CityPreset] = {
    p.name: p
    for p in (
        CityPreset("aldermoor", 0.30, (2.0, 22.0), (70, 200), 135.0, 40.0),
        CityPreset("brackwater", 0.45, (0.0, 24.0), (90, 230), 160.0, 55.0),
        CityPreset("corvenna", 0.55, (4.0, 20.0), (50, 180), 210.0, 35.0),
    )
}


@dataclass
class PairedTile:
    rgb: np.ndarray  # (H, W, 3) float32 reflectance
    dsm: np.ndarray  # (H, W, 1) float32 meters above ground
    labels: np.ndarray  # (H, W) uint8
    city: str
    tile_id: int

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape

    def replace(self, **kw) -> "PairedTile":
        fields_ = dict(rgb=self.rgb, dsm=self.dsm, labels=self.labels, city=self.city, tile_id=self.tile_id)
        fields_.update(kw)
        return PairedTile(**fields_)


@dataclass(frozen=True)
class Building:
    row: int
    col: int
    height_px: int
    width_px: int
    wall_height: float
    gable: bool
    albedo: tuple[float, float, float]


@dataclass
class Scene:
    tile: PairedTile
    buildings: list[Building] = field(default_factory=list)


def derive_labels(dsm: np.ndarray, tall_threshold: float) -> np.ndarray:
    """Partition a height field into ground / low / tall classes."""
    if tall_threshold <= 0:
        raise ConfigError(f"tall_threshold must be positive, got {tall_threshold}")
    h = np.asarray(dsm)
    if h.ndim == 3:
        h = h[..., 0]
    labels = np.zeros(h.shape, dtype=np.uint8)
    labels[h > 0] = LOW
    labels[h > tall_threshold] = TALL
    return labels


def lambertian_shading(dsm: np.ndarray, sun: np.ndarray, gsd: float = GROUND_SAMPLE_DISTANCE) -> np.ndarray:
    """Cosine of the incidence angle from finite-difference surface normals, clipped at 0."""
    dz_dy, dz_dx = np.gradient(dsm.astype(np.float64), gsd)
    norm = np.sqrt(dz_dx**2 + dz_dy**2 + 1.0)
    cos_i = (-dz_dx * sun[0] - dz_dy * sun[1] + sun[2]) / norm
    return np.clip(cos_i, 0.0, None)


def _sample_buildings(preset: CityPreset, size: int, rng: np.random.Generator) -> list[Building]:
    coverage_target = float(np.clip(preset.building_density * rng.uniform(0.3, 1.8), 0.03, MAX_COVERAGE))
    p_tall = rng.beta(0.6, 0.6)
    lo, hi = preset.height_range
    thr = preset.tall_threshold
    a_lo, a_hi = preset.albedo_seed_range
    min_side = max(4, size // 10)
    max_side = max(min_side + 1, size // 3)

    covered = np.zeros((size, size), dtype=bool)
    buildings = []
    for _ in range(200):
        if covered.mean() >= coverage_target:
            break
        bh = int(rng.integers(min_side, max_side + 1))
        bw = int(rng.integers(min_side, max_side + 1))
        r = int(rng.integers(0, size - bh + 1))
        c = int(rng.integers(0, size - bw + 1))
        if rng.random() < p_tall:
            wall = rng.uniform(thr, hi)
        else:
            wall = rng.uniform(max(lo, 1.0), thr)
        # albedo is drawn without looking at the height
        base = rng.integers(a_lo, a_hi + 1) / 255.0
        tint = rng.uniform(0.85, 1.15, size=3)
        albedo = tuple(float(v) for v in np.clip(base * tint, 0.0, 1.0))
        buildings.append(Building(r, c, bh, bw, float(wall), bool(rng.random() < 0.5), albedo))
        covered[r : r + bh, c : c + bw] = True
    return buildings


def _roof(b: Building) -> np.ndarray:
    """Height block of one building (walls plus optional gable along the long axis)."""
    block = np.full((b.height_px, b.width_px), b.wall_height)
    if b.gable:
        along_rows = b.height_px >= b.width_px
        n = b.width_px if along_rows else b.height_px
        centre = (n - 1) / 2.0
        dist = np.abs(np.arange(n) - centre)
        rise = math.tan(math.radians(ROOF_PITCH_DEG)) * GROUND_SAMPLE_DISTANCE * (centre - dist + 0.5)
        block = block + (rise[None, :] if along_rows else rise[:, None])
    return block


def _render(preset: CityPreset, size: int, seed: int, index: int) -> Scene:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(preset.name.encode()), index])
    rng = np.random.default_rng(ss)
    buildings = _sample_buildings(preset, size, rng)

    dsm = np.zeros((size, size))
    albedo = np.empty((size, size, 3))
    ground_base = rng.integers(preset.albedo_seed_range[0], preset.albedo_seed_range[1] + 1) / 255.0
    albedo[:] = np.clip(ground_base * rng.uniform(0.85, 1.15, size=3), 0.0, 1.0)
    for b in buildings:
        sl = (slice(b.row, b.row + b.height_px), slice(b.col, b.col + b.width_px))
        dsm[sl] = _roof(b)
        albedo[sl] = b.albedo
    dsm = np.clip(dsm, 0.0, preset.height_range[1])

    shade = AMBIENT + (1.0 - AMBIENT) * lambertian_shading(dsm, preset.sun_vector())
    rgb = albedo * shade[..., None] + rng.normal(0.0, NOISE_STD, size=albedo.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    dsm32 = dsm.astype(np.float32)
    tile = PairedTile(
        rgb=rgb.astype(np.float32),
        dsm=dsm32[..., None],
        labels=derive_labels(dsm32, preset.tall_threshold),
        city=preset.name,
        tile_id=index,
    )
    return Scene(tile, buildings)


def generate_scenes(preset: CityPreset, n: int, size: int, seed: int, patch_size: int = 4) -> list[Scene]:
    """Like :func:`generate_tiles` but also returns the building records of each tile."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if patch_size < 1 or size % patch_size:
        raise ConfigError(f"tile size {size} is not a multiple of patch size {patch_size}")
    if size < 8:
        raise ConfigError(f"tile size must be at least 8 pixels, got {size}")
    return [_render(preset, size, seed, i) for i in range(n)]


def generate_tiles(preset: CityPreset, n: int, size: int, seed: int, patch_size: int = 4) -> list[PairedTile]:
    return [s.tile for s in generate_scenes(preset, n, size, seed, patch_size)]


def generate_corpus(
    presets, tiles_per_city: int, size: int, seed: int, patch_size: int = 4
) -> list[PairedTile]:
    """Tiles from several cities, concatenated in preset order; tile ids are made unique."""
    out = []
    for k, preset in enumerate(presets):
        for t in generate_tiles(preset, tiles_per_city, size, seed, patch_size):
            out.append(t.replace(tile_id=k * tiles_per_city + t.tile_id))
    return out


def dominant_label(labels: np.ndarray) -> int:
    """Most frequent class of a label map; ties go to the lower class id."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=NUM_CLASSES)
    return int(np.argmax(counts))
