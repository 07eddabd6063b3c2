"""Synthetic frame-feature world for desk-scale training and tests.

Trajectories are correlated random walks inside a rectangular region. Each
frame's features are two fixed random affine maps (one per backbone) of a
location code, made of sin/cos of the position at several wavelengths,
concatenated with a per-sequence style vector, plus Gaussian noise. Location
is therefore linearly decodable from the features while the style term
plays the role of appearance variation between videos.
"""

import math
from dataclasses import dataclass

import numpy as np

from .frames import TOY_DIMS, FrameDataset, FrameSequence
from .geodesy import EARTH_RADIUS_KM
from .rng import stream

KM_PER_DEG = math.pi * EARTH_RADIUS_KM / 180.0


@dataclass
class SyntheticWorldConfig:
    lat_min: float = 39.2
    lat_max: float = 40.8
    lon_min: float = -75.0
    lon_max: float = -73.0
    sequences: int = 400
    val_sequences: int = 40
    frames_min: int = 16
    frames_max: int = 24
    step_km: float = 2.0
    step_spread: float = 0.10  # step length is step_km * U(1 - spread, 1 + spread)
    heading_persistence: float = 0.9
    noise: float = 0.01
    style_dim: int = 16
    wavelengths_km: tuple = (800.0, 400.0, 200.0, 100.0, 50.0, 25.0, 12.0, 6.0)
    directions: int = 6
    d_clip: int = TOY_DIMS[0]
    d_dino: int = TOY_DIMS[1]

    def __post_init__(self):
        self.wavelengths_km = tuple(float(w) for w in self.wavelengths_km)
        if not self.step_km > 0:
            raise ValueError("step_km must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0 <= self.step_spread < 1:
            raise ValueError("step_spread must lie in [0, 1)")
        if not 0 <= self.heading_persistence <= 1:
            raise ValueError("heading_persistence must lie in [0, 1]")
        if self.lat_min >= self.lat_max or self.lon_min >= self.lon_max:
            raise ValueError("region extent is empty")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        h, w = self.size_km
        if min(h, w) < 4.0 * self.step_km * (1.0 + self.step_spread):
            raise ValueError(f"region {h:.1f} x {w:.1f} km is too small for {self.step_km} km steps")

    @property
    def center(self):
        return 0.5 * (self.lat_min + self.lat_max), 0.5 * (self.lon_min + self.lon_max)

    @property
    def km_per_deg_lon(self):
        return KM_PER_DEG * math.cos(math.radians(self.center[0]))

    @property
    def size_km(self):
        """Region height and width in local kilometers."""
        return (self.lat_max - self.lat_min) * KM_PER_DEG, (self.lon_max - self.lon_min) * self.km_per_deg_lon


class SyntheticWorld:
    """Fixed location code and backbone maps; sample trajectories and features from it."""

    def __init__(self, cfg: SyntheticWorldConfig, seed):
        self.cfg = cfg
        self.seed = seed
        rng = stream(seed, "synthetic", "world")
        angles = rng.uniform(0.0, 2.0 * np.pi, size=(len(cfg.wavelengths_km), cfg.directions))
        k = 2.0 * np.pi / np.asarray(cfg.wavelengths_km)[:, None]
        # Wave vectors in rad/km over (north, east).
        self.waves = np.stack([k * np.cos(angles), k * np.sin(angles)], axis=-1).reshape(-1, 2)
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=len(self.waves))
        d_in = 2 * len(self.waves) + cfg.style_dim
        self.maps = []
        for d_out in (cfg.d_clip, cfg.d_dino):
            W = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
            b = rng.normal(0.0, 0.1, size=d_out)
            self.maps.append((W, b))

    def to_local(self, lat, lon):
        lat0, lon0 = self.cfg.center
        return np.stack([(np.asarray(lat) - lat0) * KM_PER_DEG,
                         (np.asarray(lon) - lon0) * self.cfg.km_per_deg_lon], axis=-1)

    def to_degrees(self, local):
        lat0, lon0 = self.cfg.center
        return lat0 + local[..., 0] / KM_PER_DEG, lon0 + local[..., 1] / self.cfg.km_per_deg_lon

    def location_code(self, lat, lon):
        phase = self.to_local(lat, lon) @ self.waves.T + self.phases
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)

    def features(self, lat, lon, style, rng=None):
        """``(clip, dino)`` float32 features for points sharing one style vector."""
        code = self.location_code(lat, lon)
        h = np.concatenate([code, np.broadcast_to(style, (len(code), len(style)))], axis=1)
        out = []
        for W, b in self.maps:
            f = h @ W + b
            if rng is not None and self.cfg.noise > 0:
                f = f + rng.normal(0.0, self.cfg.noise, size=f.shape)
            out.append(f.astype(np.float32))
        return tuple(out)

    def walk(self, n, rng):
        """Correlated random walk of ``n`` points in local km, reflected at the region border."""
        cfg = self.cfg
        h, w = cfg.size_km
        half = np.array([h / 2.0, w / 2.0])
        pos = rng.uniform(-half, half)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        turn_sd = (1.0 - cfg.heading_persistence) * np.pi
        pts = [pos.copy()]
        for _ in range(n - 1):
            heading += rng.normal(0.0, turn_sd)
            length = cfg.step_km * rng.uniform(1.0 - cfg.step_spread, 1.0 + cfg.step_spread)
            d = np.array([np.cos(heading), np.sin(heading)])
            nxt = pos + length * d
            d[np.abs(nxt) > half] *= -1.0
            heading = math.atan2(d[1], d[0])
            pos = pos + length * d
            pts.append(pos.copy())
        return np.array(pts)

    def sequence(self, seq_id, rng):
        cfg = self.cfg
        n = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
        lat, lon = self.to_degrees(self.walk(n, rng))
        style = rng.normal(0.0, 1.0, size=cfg.style_dim)
        clip, dino = self.features(lat, lon, style, rng)
        return FrameSequence(seq_id, np.arange(n, dtype=np.int64), lat, lon, clip, dino)

    def dataset(self, count, split):
        seqs = [self.sequence(f"{split}-{i:05d}", stream(self.seed, "synthetic", split, i)) for i in range(count)]
        return FrameDataset(self.cfg.d_clip, self.cfg.d_dino, seqs)


def generate_synthetic(cfg: SyntheticWorldConfig, seed=42):
    """``(train, val)`` datasets drawn from one world."""
    world = SyntheticWorld(cfg, seed)
    return world.dataset(cfg.sequences, "train"), world.dataset(cfg.val_sequences, "val")
