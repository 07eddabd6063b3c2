"""GPS-sequence denoiser and the corruption model used to train it.

The refiner is an encoder-decoder transformer. The encoder reads the
projected, temporally aligned frame features; the decoder takes a sequence of
(noisy) GPS embeddings as queries, attends to itself without a causal mask and
cross-attends to the encoder output.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .frames import positional_embed, positional_scale
from .geodesy import GpsPoint
from .nn import DecoderBlock, EncoderBlock, Module, as_input


@dataclass
class NoiseConfig:
    collapse_prob: float = 0.10
    jitter_min: float = 0.001  # degrees
    jitter_max: float = 0.02
    shift_min: float = -0.2
    shift_max: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.collapse_prob <= 1.0:
            raise ValueError("collapse_prob must lie in [0, 1]")
        if self.jitter_min > self.jitter_max or self.shift_min > self.shift_max:
            raise ValueError("noise ranges must be ordered (min <= max)")
        if self.jitter_min < 0:
            raise ValueError("jitter magnitudes must be non-negative")


@dataclass
class Corruption:
    lat: np.ndarray
    lon: np.ndarray
    collapsed: bool
    shift: np.ndarray  # (2,) lat/lon offset shared by the sequence
    jitter: np.ndarray  # (T, 2) per-point offsets; zeros when collapsed


def corrupt_coords(lat, lon, cfg: NoiseConfig, rng) -> Corruption:
    """Simulate retrieval failure modes on a ground-truth track.

    With probability ``collapse_prob`` every point is replaced by one member of
    the track chosen uniformly; otherwise each coordinate gets an independent
    jitter of random sign and magnitude ``U(jitter_min, jitter_max)``. In both
    cases one lat offset and one lon offset drawn from ``U(shift_min, shift_max)``
    then move the whole track. Results are clamped to valid ranges.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if lat.size == 0:
        raise ValueError("cannot corrupt an empty sequence")
    T = lat.size
    collapsed = bool(rng.random() < cfg.collapse_prob)
    if collapsed:
        k = int(rng.integers(T))
        jitter = np.zeros((T, 2))
        base_lat = np.full(T, lat[k])
        base_lon = np.full(T, lon[k])
    else:
        mag = rng.uniform(cfg.jitter_min, cfg.jitter_max, size=(T, 2))
        sign = np.where(rng.random((T, 2)) < 0.5, -1.0, 1.0)
        jitter = mag * sign
        base_lat = lat + jitter[:, 0]
        base_lon = lon + jitter[:, 1]
    shift = rng.uniform(cfg.shift_min, cfg.shift_max, size=2)
    out_lat = np.clip(base_lat + shift[0], -90.0, 90.0)
    out_lon = np.clip(base_lon + shift[1], -180.0, 180.0)
    return Corruption(out_lat, out_lon, collapsed, shift, jitter)


def corrupt_sequence(gt, cfg: NoiseConfig, rng):
    """List-of-points wrapper around :func:`corrupt_coords`."""
    if len(gt) == 0:
        raise ValueError("cannot corrupt an empty sequence")
    c = corrupt_coords([p.lat for p in gt], [p.lon for p in gt], cfg, rng)
    return [GpsPoint(a, b) for a, b in zip(c.lat, c.lon)]


@dataclass
class GeoRefinerConfig:
    width: int = 512
    encoder_layers: int = 1
    decoder_layers: int = 2
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    positions: bool = True
    pos_scale: float = None  # None means 1/sqrt(width)
    zero_init: bool = True

    def __post_init__(self):
        if self.pos_scale is None:
            self.pos_scale = positional_scale(self.width)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by head count {self.heads}")


class GeoRefiner(Module):
    def __init__(self, cfg: GeoRefinerConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.encoder = [EncoderBlock(cfg.width, cfg.heads, cfg.ff_mult, cfg.dropout, rng, cfg.zero_init, dtype)
                        for _ in range(cfg.encoder_layers)]
        self.decoder = [DecoderBlock(cfg.width, cfg.heads, cfg.ff_mult, cfg.dropout, rng, cfg.zero_init, dtype)
                        for _ in range(cfg.decoder_layers)]

    def forward(self, frames, queries, rng=None, causal=False):
        """Refine ``queries`` given ``frames``; both ``(B, T, W)`` or ``(T, W)``.

        ``causal`` masks future GPS tokens in decoder self-attention. It exists
        only to probe the unmasked default and is never used in training.
        """
        frames = as_input(frames, self.dtype)
        queries = as_input(queries, self.dtype)
        if frames.shape != queries.shape:
            raise ShapeError("georefiner", frames.shape, queries.shape, "frame and GPS sequences must align")
        squeeze = frames.ndim == 2
        if squeeze:
            frames = frames.reshape(1, *frames.shape)
            queries = queries.reshape(1, *queries.shape)
        T = frames.shape[1]
        pos = None
        memory = frames
        if self.cfg.positions:
            table = positional_embed(T, frames.shape[2])
            # Frames are unit vectors, so their table is scaled down; decoder positions join
            # layer-normalized activations and keep unit scale.
            memory = memory + (self.cfg.pos_scale * table).astype(self.dtype)
            pos = table.astype(self.dtype)
        for block in self.encoder:
            memory = block(memory, rng=rng)
        x = queries
        mask = np.triu(np.ones((T, T), dtype=bool), k=1) if causal else None
        for block in self.decoder:
            x = block(x, memory, rng=rng, self_mask=mask, pos=pos)
        return x.reshape(x.shape[1:]) if squeeze else x


def georefiner_forward(refiner: GeoRefiner, frame_feats, gps_queries, rng=None):
    return refiner(frame_feats, gps_queries, rng=rng)
