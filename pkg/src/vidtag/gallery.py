"""Candidate GPS galleries: uniform grids over training regions, or known val points.

Regions are connected components of the training points under a merge
radius. Each region's extent drops a small fraction of outliers per tail and
axis, gets a constant padding, and is filled with a grid whose row and column
counts follow ``floor(distance / resolution) + 1``.
"""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.spatial import cKDTree

from .checkpoint import load_tensors, save_tensors
from .errors import FormatError
from .geodesy import EARTH_RADIUS_KM, GpsPoint, haversine

log = logging.getLogger(__name__)

COORD_DECIMALS = 6


@dataclass(frozen=True)
class RegionExtent:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    padding: float = 0.0
    resolution: float = 0.1  # km

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.lat_min > self.lat_max or self.lon_min > self.lon_max:
            raise ValueError(f"inverted extent {self}")

    @classmethod
    def from_bounds(cls, lat_min, lat_max, lon_min, lon_max, padding=0.0, resolution=0.1):
        """Apply ``padding`` (degrees) to raw bounds, clamped to valid coordinates."""
        return cls(max(-90.0, lat_min - padding), min(90.0, lat_max + padding),
                   max(-180.0, lon_min - padding), min(180.0, lon_max + padding), padding, resolution)

    def contains(self, lat, lon, slack=0.0):
        lat, lon = np.asarray(lat), np.asarray(lon)
        return ((lat >= self.lat_min - slack) & (lat <= self.lat_max + slack)
                & (lon >= self.lon_min - slack) & (lon <= self.lon_max + slack))

    @property
    def dis_lat(self):
        return float(haversine(self.lat_min, self.lon_min, self.lat_max, self.lon_min))

    @property
    def dis_lon(self):
        return float(haversine(self.lat_min, self.lon_min, self.lat_min, self.lon_max))

    def formula_count(self):
        """Point count from ``(dis_lat * dis_lon) // resolution**2``."""
        return int((self.dis_lat * self.dis_lon) // self.resolution**2)


def _unit_vectors(lat, lon):
    phi, lam = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=1)


def connected_regions(lat, lon, merge_radius_km=100.0):
    """Component label per point; points closer than the radius share a label (transitively)."""
    xyz = _unit_vectors(np.asarray(lat, float), np.asarray(lon, float))
    chord = 2.0 * math.sin(min(merge_radius_km / (2.0 * EARTH_RADIUS_KM), math.pi / 2))
    # Any two points inside one cube of side chord/sqrt(3) are within the radius.
    side = chord / math.sqrt(3.0)
    keys = np.floor(xyz / side).astype(np.int64)
    cells, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    members = np.split(order, np.cumsum(np.bincount(inverse, minlength=len(cells)))[:-1])
    lookup = {tuple(k): i for i, k in enumerate(cells)}
    parent = list(range(len(cells)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    trees = {}
    # Cells three or more apart on some axis are separated by >= 2 * side > chord.
    offsets = list(product(range(-2, 3), repeat=3))
    for i, key in enumerate(cells):
        for off in offsets:
            j = lookup.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if j is None or j <= i or find(i) == find(j):
                continue
            if i not in trees:
                trees[i] = cKDTree(xyz[members[i]])
            dist, _ = trees[i].query(xyz[members[j]], k=1, distance_upper_bound=chord)
            if np.any(np.isfinite(dist)):
                parent[find(j)] = find(i)
    roots = np.array([find(i) for i in range(len(cells))])
    _, labels = np.unique(roots[inverse], return_inverse=True)
    return labels.ravel()


def region_extents(lat, lon, padding=0.05, resolution=0.1, outlier_fraction=0.005,
                   merge_radius_km=100.0, min_points=1):
    """Padded extents of each connected region of training points."""
    lat = np.asarray(lat, dtype=np.float64).ravel()
    lon = np.asarray(lon, dtype=np.float64).ravel()
    if lat.size == 0:
        raise ValueError("no training points given")
    if not 0.0 <= outlier_fraction < 0.5:
        raise ValueError("outlier_fraction must lie in [0, 0.5)")
    labels = connected_regions(lat, lon, merge_radius_km)
    extents = []
    for r in range(labels.max() + 1):
        sel = labels == r
        if sel.sum() < min_points:
            continue
        la, lo = lat[sel], lon[sel]
        f = outlier_fraction
        lat_lo, lat_hi = np.quantile(la, [f, 1.0 - f])
        lon_lo, lon_hi = np.quantile(lo, [f, 1.0 - f])
        extents.append(RegionExtent.from_bounds(float(lat_lo), float(lat_hi), float(lon_lo), float(lon_hi),
                                                padding, resolution))
    extents.sort(key=lambda e: (e.lat_min, e.lon_min))
    return extents


def grid_shape(extent: RegionExtent):
    n_lat = int(math.floor(extent.dis_lat / extent.resolution)) + 1
    n_lon = int(math.floor(extent.dis_lon / extent.resolution)) + 1
    return n_lat, n_lon


def build_grid(extent: RegionExtent):
    """Row-major grid ``(lat, lon)`` arrays with uniform lat/lon steps across the extent."""
    n_lat, n_lon = grid_shape(extent)
    if n_lat == 1 and n_lon == 1:
        log.warning("extent %s is smaller than the resolution; using its center only", extent)
    lats = np.linspace(extent.lat_min, extent.lat_max, n_lat) if n_lat > 1 else np.array([(extent.lat_min + extent.lat_max) / 2])
    lons = np.linspace(extent.lon_min, extent.lon_max, n_lon) if n_lon > 1 else np.array([(extent.lon_min + extent.lon_max) / 2])
    glat, glon = np.meshgrid(lats, lons, indexing="ij")
    return glat.ravel(), glon.ravel()


@dataclass
class GalleryIndex:
    """Deduplicated candidate coordinates (6-decimal canonical form) plus optional unit embeddings."""

    lat: np.ndarray
    lon: np.ndarray
    resolution: float = None
    regions: list = field(default_factory=list)
    embeddings: np.ndarray = None

    def __post_init__(self):
        lat = np.round(np.asarray(self.lat, dtype=np.float64).ravel(), COORD_DECIMALS)
        lon = np.round(np.asarray(self.lon, dtype=np.float64).ravel(), COORD_DECIMALS)
        if lat.size == 0:
            raise ValueError("gallery must contain at least one point")
        if lat.shape != lon.shape:
            raise ValueError("lat/lon length mismatch")
        _, first = np.unique(np.stack([lat, lon], axis=1), axis=0, return_index=True)
        keep = np.sort(first)
        self.lat, self.lon = lat[keep], lon[keep]
        if self.embeddings is not None and len(self.embeddings) != len(self.lat):
            raise ValueError("embedding rows must match gallery points")

    def __len__(self):
        return len(self.lat)

    @property
    def points(self):
        return [GpsPoint(a, b) for a, b in zip(self.lat, self.lon)]

    def content_hash(self):
        h = hashlib.sha256()
        for a, b in zip(self.lat, self.lon):
            h.update(f"{a:.{COORD_DECIMALS}f},{b:.{COORD_DECIMALS}f};".encode())
        return h.hexdigest()[:16]

    def embed(self, model):
        self.embeddings = model.embed_points(self.lat, self.lon, normalize=True)
        return self


def build_gallery(extents):
    """Union of the grids of all extents."""
    parts = [build_grid(e) for e in extents]
    if not parts:
        raise ValueError("no extents to build a gallery from")
    lat = np.concatenate([p[0] for p in parts])
    lon = np.concatenate([p[1] for p in parts])
    return GalleryIndex(lat, lon, resolution=min(e.resolution for e in extents), regions=list(extents))


def build_val_gallery(lat, lon):
    """Known validation coordinates as the gallery (upper-bound evaluation)."""
    lat = np.asarray(lat, dtype=np.float64).ravel()
    if lat.size == 0:
        raise ValueError("validation gallery needs at least one point")
    return GalleryIndex(lat, lon)


def write_gallery_csv(path, gallery: GalleryIndex):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon"])
        for a, b in zip(gallery.lat, gallery.lon):
            w.writerow([f"{a:.{COORD_DECIMALS}f}", f"{b:.{COORD_DECIMALS}f}"])


def read_gallery_csv(path):
    lat, lon = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["lat", "lon"]:
            raise FormatError(f"gallery header must be 'lat,lon', got {header}", path)
        for line_no, row in enumerate(reader, start=2):
            try:
                a, b = float(row[0]), float(row[1])
            except (IndexError, ValueError):
                raise FormatError(f"malformed gallery row at line {line_no}", path) from None
            lat.append(a)
            lon.append(b)
    return GalleryIndex(np.array(lat), np.array(lon))


def save_embedding_cache(path, gallery: GalleryIndex, model_tag=""):
    if gallery.embeddings is None:
        raise ValueError("gallery has no embeddings to cache")
    save_tensors(path, {f"gallery/{gallery.content_hash()}/{model_tag}": gallery.embeddings})


def load_embedding_cache(path, gallery: GalleryIndex, model_tag=""):
    """Cached embeddings for this exact gallery and model, or None."""
    try:
        tensors = load_tensors(path)
    except (FileNotFoundError, FormatError):
        return None
    emb = tensors.get(f"gallery/{gallery.content_hash()}/{model_tag}")
    if emb is None or len(emb) != len(gallery):
        return None
    return emb
