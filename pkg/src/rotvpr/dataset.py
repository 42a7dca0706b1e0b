"""Synthetic aerial place dataset built by lattice sampling of a procedural world.

Coordinates live in a flat local frame measured in metres: ``lon`` runs along
raster columns and ``lat`` along raster rows, both from the raster origin.
Every place is stored as a disk-shaped crop (one per year) so it can be
rotated freely and center-cropped without empty corners.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .equivariant import bilinear_sample, quarter_turns

BASE_YEAR = 2011


# -- world generation ------------------------------------------------------------

@dataclass
class WorldSpec:
    seed: int = 0
    size_px: int = 1024
    meters_per_pixel: float = 0.8
    n_years: int = 10
    water_fraction: float = 0.1
    urban_fraction: float = 0.2
    forest_fraction: float = 0.3
    parcel_px: float = 40.0
    district_px: float = 160.0
    crop_change_prob: float = 0.3
    pixel_noise: float = 0.02

    def __post_init__(self):
        if self.size_px < 16:
            raise ValueError("size_px must be >= 16")
        if self.n_years < 1:
            raise ValueError("n_years must be >= 1")
        if not 0 <= self.water_fraction < 1:
            raise ValueError("water_fraction must lie in [0, 1)")


@dataclass
class World:
    spec: WorldSpec
    rasters: np.ndarray      # uint8 [n_years, H, W, 3], pixel-aligned
    water: np.ndarray        # bool [H, W]

    @property
    def years(self) -> list[int]:
        return [BASE_YEAR + i for i in range(self.spec.n_years)]


def value_noise(rng: np.random.Generator, shape: tuple[int, int], cell: float) -> np.ndarray:
    """Smoothly interpolated lattice noise in [0, 1] with feature size ``cell`` pixels."""
    h, w = shape
    gh, gw = int(h / cell) + 3, int(w / cell) + 3
    grid = rng.random((gh, gw))
    y, x = np.arange(h) / cell, np.arange(w) / cell
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    ty, tx = y - y0, x - x0
    ty, tx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * tx[None, :]
    bot = c + (d - c) * tx[None, :]
    return top + (bot - top) * ty[:, None]


def fractal_noise(rng, shape, cell: float, octaves: int = 4, persistence: float = 0.5) -> np.ndarray:
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        out += amp * value_noise(rng, shape, max(cell / 2 ** o, 1.0))
        total += amp
        amp *= persistence
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def _voronoi(rng, shape, spacing: float):
    """Jittered-grid Voronoi cells: (cell index, distance gap to 2nd nearest seed, n cells)."""
    h, w = shape
    gy, gx = np.meshgrid(np.arange(-1, h / spacing + 1), np.arange(-1, w / spacing + 1), indexing="ij")
    seeds = np.stack([gy.ravel(), gx.ravel()], 1) * spacing
    seeds += rng.uniform(-0.45, 0.45, seeds.shape) * spacing
    tree = cKDTree(seeds)
    rows, cols = np.mgrid[0:h, 0:w]
    dist, idx = tree.query(np.stack([rows.ravel(), cols.ravel()], 1), k=2)
    return idx[:, 0].reshape(shape), (dist[:, 1] - dist[:, 0]).reshape(shape), len(seeds)


_CROPS = np.array([[0.33, 0.52, 0.20], [0.78, 0.72, 0.36], [0.50, 0.38, 0.25],
                   [0.56, 0.64, 0.34], [0.42, 0.60, 0.28]])
_ROOFS = np.array([[0.62, 0.30, 0.24], [0.55, 0.55, 0.57], [0.40, 0.34, 0.30],
                   [0.75, 0.72, 0.68], [0.30, 0.32, 0.36]])


def generate_world(spec: WorldSpec) -> World:
    """Render ``n_years`` pixel-aligned orthophoto-like rasters and a water mask.

    Land cover mixes lakes, field parcels with oriented tillage stripes,
    forest texture and urban road grids. Years differ by global tint,
    vegetation season, crop rotation in parcels and sensor noise.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size_px
    shape = (n, n)
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)

    elevation = fractal_noise(rng, shape, n / 3)
    cover = fractal_noise(rng, shape, n / 5)
    if spec.water_fraction > 0:
        water = elevation < np.quantile(elevation, spec.water_fraction)
    else:
        water = np.zeros(shape, dtype=bool)
    land = cover[~water] if (~water).any() else cover.ravel()
    urban = (cover > np.quantile(land, 1 - spec.urban_fraction)) & ~water
    forest = (cover < np.quantile(land, spec.forest_fraction)) & ~water
    field_ = ~(water | urban | forest)

    # field parcels
    parcel, gap, n_parcels = _voronoi(rng, shape, spec.parcel_px)
    phi = rng.uniform(0, math.pi, n_parcels)
    period = rng.uniform(3.0, 8.0, n_parcels)
    proj = cols * np.cos(phi[parcel]) + rows * np.sin(phi[parcel])
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * proj / period[parcel])
    hedge = gap < 1.5

    # urban road grids per district
    district, _, n_districts = _voronoi(rng, shape, spec.district_px)
    theta = rng.uniform(0, math.pi / 2, n_districts)[district]
    block = rng.uniform(14.0, 26.0, n_districts)[district]
    u = cols * np.cos(theta) + rows * np.sin(theta)
    v = -cols * np.sin(theta) + rows * np.cos(theta)
    bu, bv = np.floor(u / block), np.floor(v / block)
    fu, fv = u - bu * block, v - bv * block
    road = (fu < 3) | (fv < 3)
    building = (fu > 5) & (fu < block - 2) & (fv > 5) & (fv < block - 2)
    roof_id = (bu.astype(np.int64) * 7919 + bv.astype(np.int64) * 104729 + district * 31) % len(_ROOFS)

    crowns = fractal_noise(rng, shape, 4.0, octaves=2)
    ripples = value_noise(rng, shape, 6.0)

    crop_type = rng.integers(0, len(_CROPS), n_parcels)
    rasters = np.empty((spec.n_years, n, n, 3), dtype=np.uint8)
    for y in range(spec.n_years):
        if y > 0:
            change = rng.random(n_parcels) < spec.crop_change_prob
            crop_type = np.where(change, rng.integers(0, len(_CROPS), n_parcels), crop_type)
        season = rng.uniform(0.8, 1.2)
        tint = rng.uniform(0.88, 1.12, 3) * rng.uniform(0.85, 1.15)
        img = np.zeros((n, n, 3))
        fc = _CROPS[crop_type[parcel]] * (0.78 + 0.22 * stripes)[..., None]
        fc[hedge] = [0.18, 0.30, 0.14]
        img[field_] = fc[field_]
        green = np.array([0.14, 0.30, 0.12]) * np.array([1.0, season, 1.0])
        img[forest] = (green * (0.55 + 0.9 * crowns[..., None]))[forest]
        uc = np.where(road[..., None], 0.47, 0.0) + np.where(
            building[..., None], _ROOFS[roof_id], 0.0) + np.where(
            (~road & ~building)[..., None], np.array([0.30, 0.42, 0.24]) * season, 0.0)
        img[urban] = uc[urban]
        img[water] = (np.array([0.10, 0.18, 0.30]) * (0.9 + 0.2 * ripples[..., None]))[water]
        img = img * tint + rng.normal(0, spec.pixel_noise, img.shape)
        rasters[y] = np.clip(img * 255 + 0.5, 0, 255).astype(np.uint8)
    return World(spec, rasters, water)


def default_boundary(spec: WorldSpec, margin_px: float, vertices: int = 14) -> list[tuple[float, float]]:
    """A seeded irregular 'country outline' polygon, inset ``margin_px`` from the raster edge.

    Vertices are (x, y) in metres.
    """
    rng = np.random.default_rng([spec.seed, 7])
    half = spec.size_px / 2 - margin_px
    if half <= 0:
        raise ValueError("world too small for the requested footprint margin")
    c = spec.size_px / 2
    pts = []
    for i in range(vertices):
        a = 2 * math.pi * i / vertices
        r = half * rng.uniform(0.8, 1.0) * min(1 / abs(math.cos(a)) if math.cos(a) else 1e9,
                                               1 / abs(math.sin(a)) if math.sin(a) else 1e9)
        pts.append(((c + r * math.cos(a)) * spec.meters_per_pixel,
                    (c + r * math.sin(a)) * spec.meters_per_pixel))
    return pts


# -- lattice sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class GeoLocation:
    lat: float
    lon: float


def polygon_area(polygon: Sequence[tuple[float, float]]) -> float:
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_strictly_inside(polygon, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test that treats boundary points as outside."""
    p = np.asarray(polygon, dtype=np.float64)
    inside = np.zeros(xs.shape, dtype=bool)
    on_edge = np.zeros(xs.shape, dtype=bool)
    scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1]), 1.0)
    for (x1, y1), (x2, y2) in zip(p, np.roll(p, -1, axis=0)):
        cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        within = ((xs >= min(x1, x2)) & (xs <= max(x1, x2))
                  & (ys >= min(y1, y2)) & (ys <= max(y1, y2)))
        on_edge |= within & (np.abs(cross) <= 1e-12 * scale * scale)
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_int)
    return inside & ~on_edge


def _disk_offsets(radius_px: float) -> tuple[np.ndarray, np.ndarray]:
    r = int(math.ceil(radius_px))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= radius_px * radius_px
    return dy[keep], dx[keep]


def water_coverage(water_mask: np.ndarray, lat: float, lon: float, radius: float,
                   units_per_pixel: float) -> float:
    """Fraction of the footprint disk (pixels off the raster count as water)."""
    row, col = lat / units_per_pixel, lon / units_per_pixel
    dy, dx = _disk_offsets(max(radius / units_per_pixel, 0.0))
    rr = np.floor(row + 0.5).astype(int) + dy
    cc = np.floor(col + 0.5).astype(int) + dx
    h, w = water_mask.shape
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    wet = np.ones(rr.shape, dtype=bool)
    wet[ok] = water_mask[rr[ok], cc[ok]]
    return float(wet.mean())


def sample_grid(boundary_polygon, interval: float, water_mask: np.ndarray | None = None,
                min_water_free_fraction: float = 0.5, footprint_radius: float = 0.0,
                units_per_pixel: float = 1.0) -> list[GeoLocation]:
    """Lattice points strictly inside the polygon, filtered by water coverage.

    The lattice is anchored at the polygon's bounding-box minimum corner and
    spaced ``interval`` along both axes. Polygon vertices are (x=lon, y=lat).
    A point is rejected when more than ``1 - min_water_free_fraction`` of its
    footprint disk of ``footprint_radius`` is water.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if len(boundary_polygon) < 3 or polygon_area(boundary_polygon) <= 0:
        raise ValueError("degenerate boundary polygon (zero area)")
    p = np.asarray(boundary_polygon, dtype=np.float64)
    (x0, y0), (x1, y1) = p.min(axis=0), p.max(axis=0)
    nx = int(math.floor((x1 - x0) / interval + 1e-9)) + 1
    ny = int(math.floor((y1 - y0) / interval + 1e-9)) + 1
    ys, xs = np.meshgrid(y0 + interval * np.arange(ny), x0 + interval * np.arange(nx), indexing="ij")
    keep = points_strictly_inside(p, xs, ys)
    out = []
    for lat, lon in zip(ys[keep], xs[keep]):
        if water_mask is not None:
            wet = water_coverage(water_mask, lat, lon, footprint_radius, units_per_pixel)
            if wet > 1 - min_water_free_fraction:
                continue
        out.append(GeoLocation(float(lat), float(lon)))
    return out


# -- circular images ---------------------------------------------------------------

@dataclass
class CircularImage:
    pixels: np.ndarray   # uint8 [D, D, 3], zero outside the disk
    mask: np.ndarray     # bool [D, D], the inscribed disk

    @property
    def diameter_px(self) -> int:
        return self.pixels.shape[0]


def circle_mask(diameter: int) -> np.ndarray:
    c = (diameter - 1) / 2
    r, q = np.mgrid[0:diameter, 0:diameter]
    return (r - c) ** 2 + (q - c) ** 2 <= (diameter / 2) ** 2


def extract_circular(raster: np.ndarray, center: tuple[float, float], diameter_px: int) -> CircularImage:
    """Cut a disk of ``diameter_px`` centred at pixel ``(row, col)`` out of ``raster``."""
    h, w = raster.shape[:2]
    top = math.floor(center[0] - (diameter_px - 1) / 2 + 0.5)
    left = math.floor(center[1] - (diameter_px - 1) / 2 + 0.5)
    if top < 0 or left < 0 or top + diameter_px > h or left + diameter_px > w:
        raise ValueError(f"disk at {center} with diameter {diameter_px} exceeds raster {h}x{w}")
    mask = circle_mask(diameter_px)
    pix = raster[top:top + diameter_px, left:left + diameter_px].copy()
    pix[~mask] = 0
    return CircularImage(pix, mask)


def inscribed_side(diameter_px: int) -> int:
    """Largest crop side whose bilinear taps stay inside the disk at any rotation.

    The parity matches the diameter so an unrotated full crop lands on pixel centres.
    """
    s = int(math.floor(diameter_px / math.sqrt(2) - 2))
    if (diameter_px - s) % 2:
        s -= 1
    return s


def rotate_then_crop(img: CircularImage, angle: float, out_size: int,
                     crop_fraction: float = 1.0) -> np.ndarray:
    """Rotate the disk counterclockwise by ``angle``, centre-crop, resize.

    The crop side is ``crop_fraction * inscribed_side``; ``out_size`` may not
    exceed the inscribed side. Quarter turns rotate by exact index
    permutation. Returns float32 ``[3, out_size, out_size]`` in [0, 1].
    """
    d = img.diameter_px
    s_max = inscribed_side(d)
    if out_size > s_max:
        raise ValueError(f"out_size {out_size} exceeds inscribed square side {s_max} of a {d}px disk")
    if not 0 < crop_fraction <= 1:
        raise ValueError("crop_fraction must lie in (0, 1]")
    pix = img.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0
    k = quarter_turns(angle)
    if k is not None:
        pix = np.rot90(pix, k, axes=(1, 2))
        angle = 0.0
    s = crop_fraction * s_max
    t = (np.arange(out_size) + 0.5) * (s / out_size) - s / 2
    dy, dx = np.meshgrid(t, t, indexing="ij")
    c = (d - 1) / 2
    cs, sn = math.cos(angle), math.sin(angle)
    return bilinear_sample(pix, c + dx * sn + dy * cs, c + dx * cs - dy * sn).astype(np.float32)


def augment_appearance(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fixed photometric jitter: brightness, contrast, per-channel gain, Gaussian noise."""
    out = img * rng.uniform(0.8, 1.2)
    mean = out.mean()
    out = (out - mean) * rng.uniform(0.8, 1.2) + mean
    out = out * rng.uniform(0.9, 1.1, (3, 1, 1))
    out = out + rng.normal(0, rng.uniform(0, 0.02), out.shape)
    return np.clip(out, 0, 1).astype(np.float32)


# -- image files ------------------------------------------------------------------------

def _read_netpbm(path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    ch = 3 if magic == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return raw.reshape((h, w, ch) if ch == 3 else (h, w))


def write_ppm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def mask_path(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".mask.pgm")


def save_circular(path, img: CircularImage) -> None:
    write_ppm(path, img.pixels)
    write_pgm(mask_path(path), img.mask.astype(np.uint8) * 255)


def load_circular(path) -> CircularImage:
    pixels = read_ppm(path).copy()
    mask = read_pgm(mask_path(path)) > 127
    return CircularImage(pixels, mask)


# -- manifest -------------------------------------------------------------------------

@dataclass
class Variant:
    year: int
    path: str


@dataclass
class PlaceRecord:
    place_id: int
    location: GeoLocation
    variants: list[Variant] = field(default_factory=list)
    diameter_px: int = 500
    ground_diameter_m: float = 400.0

    def to_json(self) -> dict:
        return {"place_id": self.place_id, "lat": self.location.lat, "lon": self.location.lon,
                "diameter_px": self.diameter_px, "ground_diameter_m": self.ground_diameter_m,
                "variants": [{"year": v.year, "path": v.path} for v in self.variants]}

    @classmethod
    def from_json(cls, d: dict) -> "PlaceRecord":
        return cls(int(d["place_id"]), GeoLocation(float(d["lat"]), float(d["lon"])),
                   [Variant(int(v["year"]), str(v["path"])) for v in d["variants"]],
                   int(d["diameter_px"]), float(d["ground_diameter_m"]))


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid manifest:\n  " + "\n  ".join(problems))
        self.problems = problems


def overlapping_pairs(records: Sequence[PlaceRecord]) -> list[tuple[int, int]]:
    """Place-id pairs whose circular footprints intersect."""
    if len(records) < 2:
        return []
    pts = np.array([[r.location.lat, r.location.lon] for r in records])
    diam = np.array([r.ground_diameter_m for r in records])
    tree = cKDTree(pts)
    bad = []
    for i, j in sorted(tree.query_pairs(float(diam.max()))):
        if np.hypot(*(pts[i] - pts[j])) < (diam[i] + diam[j]) / 2:
            bad.append((records[i].place_id, records[j].place_id))
    return bad


def validate_records(records: Sequence[PlaceRecord], root: str | Path | None = None) -> None:
    problems = []
    seen = set()
    for r in records:
        if r.place_id in seen:
            problems.append(f"duplicate place_id {r.place_id}")
        seen.add(r.place_id)
    for a, b in overlapping_pairs(records):
        problems.append(f"overlapping footprints: places {a} and {b}")
    if root is not None:
        for r in records:
            for v in r.variants:
                p = Path(root) / v.path
                if not p.exists() or not mask_path(p).exists():
                    problems.append(f"missing image file for place {r.place_id}: {v.path}")
    if problems:
        raise ManifestError(problems)


def write_manifest(path, records: Sequence[PlaceRecord]) -> None:
    validate_records(records)
    with open(path, "w", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: r.place_id):
            fh.write(json.dumps(r.to_json()) + "\n")


def read_manifest(path, check_files: bool = True) -> list[PlaceRecord]:
    path = Path(path)
    records = [PlaceRecord.from_json(json.loads(line))
               for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    records.sort(key=lambda r: r.place_id)
    validate_records(records, path.parent if check_files else None)
    return records


class PlaceImages:
    """Manifest records plus lazily loaded circular images."""

    def __init__(self, records: Sequence[PlaceRecord], root: str | Path | None = None,
                 images: dict | None = None):
        self.records = {r.place_id: r for r in sorted(records, key=lambda r: r.place_id)}
        self.root = Path(root) if root is not None else None
        self._cache: dict[tuple[int, int], CircularImage] = dict(images or {})

    @classmethod
    def from_manifest(cls, path) -> "PlaceImages":
        return cls(read_manifest(path), Path(path).parent)

    def place_ids(self) -> list[int]:
        return list(self.records)

    def n_variants(self, pid: int) -> int:
        return len(self.records[pid].variants)

    def image(self, pid: int, variant: int) -> CircularImage:
        key = (pid, variant)
        if key not in self._cache:
            self._cache[key] = load_circular(self.root / self.records[pid].variants[variant].path)
        return self._cache[key]

    def subset(self, ids) -> "PlaceImages":
        ids = set(ids)
        sub = PlaceImages([r for p, r in self.records.items() if p in ids], self.root)
        sub._cache = {k: v for k, v in self._cache.items() if k[0] in ids}
        return sub


# -- dataset construction -------------------------------------------------------------

@dataclass
class BuildStats:
    lattice_inside: int
    water_rejected: int
    places: int


def build_places(world: World, interval_m: float, diameter_px: int = 500,
                 min_water_free_fraction: float = 0.5, polygon=None,
                 max_places: int | None = None, seed: int = 0):
    """Sample places from a rendered world; returns ``(records, images, stats)``.

    Image paths in the records follow ``images/<place_id>_<year>.ppm``.
    """
    spec = world.spec
    mpp = spec.meters_per_pixel
    ground = diameter_px * mpp
    if interval_m < ground:
        raise ValueError(f"interval {interval_m} m is below the footprint diameter {ground} m")
    if polygon is None:
        polygon = default_boundary(spec, diameter_px / 2 + 1)
    inside = sample_grid(polygon, interval_m)
    kept = sample_grid(polygon, interval_m, world.water, min_water_free_fraction, ground / 2, mpp)
    n_dry = len(kept)
    if max_places is not None and len(kept) > max_places:
        pick = np.random.default_rng([seed, 11]).choice(len(kept), max_places, replace=False)
        kept = [kept[i] for i in sorted(pick)]
    records, images = [], {}
    for pid, loc in enumerate(kept):
        variants = []
        for y, year in enumerate(world.years):
            img = extract_circular(world.rasters[y], (loc.lat / mpp, loc.lon / mpp), diameter_px)
            images[(pid, y)] = img
            variants.append(Variant(year, f"images/{pid:06d}_{year}.ppm"))
        records.append(PlaceRecord(pid, loc, variants, diameter_px, ground))
    validate_records(records)
    return records, images, BuildStats(len(inside), len(inside) - n_dry, len(records))


def write_dataset(out_dir, records, images) -> Path:
    """Write images, mask sidecars and ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for r in records:
        for y, v in enumerate(r.variants):
            save_circular(out / v.path, images[(r.place_id, y)])
    write_manifest(out / "manifest.jsonl", records)
    return out / "manifest.jsonl"


def build_dataset(spec: WorldSpec, out_dir, interval_m: float, diameter_px: int = 500,
                  min_water_free_fraction: float = 0.5, max_places: int | None = None,
                  force: bool = False):
    """Generate a world and write the sampled dataset to ``out_dir``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty (use force to overwrite)")
        shutil.rmtree(out)
    world = generate_world(spec)
    records, images, stats = build_places(world, interval_m, diameter_px,
                                          min_water_free_fraction, max_places=max_places,
                                          seed=spec.seed)
    try:
        write_dataset(out, records, images)
    except BaseException:
        shutil.rmtree(out, ignore_errors=True)
        raise
    return records, stats


# -- evaluation views -------------------------------------------------------------------

def make_eval_views(data: PlaceImages, place_ids, rng: np.random.Generator, out_size: int,
                    db_variant: int = 0, query_variant: int = -1, nominal_crop: float = 0.9,
                    scale_jitter: float = 0.1):
    """Fixed test transformations: upright database crops, rotated and rescaled queries.

    Each query gets one seeded rotation angle in [0, 2*pi) and a crop scale in
    ``nominal_crop * [1 - scale_jitter, 1 + scale_jitter]``.
    Returns ``(db_images, db_ids, query_images, query_ids, angles)``.
    """
    if nominal_crop * (1 + scale_jitter) > 1:
        raise ValueError("nominal crop with jitter would leave the inscribed square")
    ids = list(place_ids)
    db = np.stack([rotate_then_crop(data.image(p, db_variant % data.n_variants(p)), 0.0,
                                    out_size, nominal_crop) for p in ids])
    angles = rng.uniform(0, 2 * math.pi, len(ids))
    scales = rng.uniform(1 - scale_jitter, 1 + scale_jitter, len(ids))
    q = np.stack([rotate_then_crop(data.image(p, query_variant % data.n_variants(p)), a,
                                   out_size, nominal_crop * s) for p, a, s in zip(ids, angles, scales)])
    return db, np.array(ids), q, np.array(ids), angles
