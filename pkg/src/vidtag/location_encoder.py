"""GPS -> 512-d embedding via multi-scale random Fourier features.

Coordinates are projected with Equal Earth, scaled to [-1, 1], mapped through
one frozen Gaussian frequency matrix per scale, and each feature vector goes
through its own MLP. Head outputs are summed.
"""

import hashlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geodesy import GpsPoint, standardized_coords
from .nn import Linear, Module

DEFAULT_SIGMAS = (2.0**0, 2.0**3, 2.0**8)


def rff_features(coords, B):
    """``[cos(2 pi B v) || sin(2 pi B v)]`` for each row ``v`` of ``coords``."""
    coords = np.asarray(coords, dtype=np.float64)
    phase = 2.0 * np.pi * (coords @ np.asarray(B, dtype=np.float64).T)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)


class RffHead(Module):
    def __init__(self, sigma, rng, rff_dim=256, hidden=1024, out_dim=512, dtype=np.float32):
        super().__init__()
        self.sigma = float(sigma)
        self.buffers["B"] = rng.normal(0.0, sigma, size=(rff_dim, 2)).astype(dtype)
        self.fc1 = Linear(2 * rff_dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, out_dim, rng, dtype=dtype)

    @property
    def B(self):
        return self.buffers["B"]

    def forward(self, coords):
        x = Tensor(rff_features(coords, self.B).astype(self.dtype))
        return self.fc2(ag.gelu(self.fc1(x)))


class LocationEncoder(Module):
    def __init__(self, rng, sigmas=DEFAULT_SIGMAS, rff_dim=256, hidden=1024, out_dim=512, dtype=np.float32):
        super().__init__()
        self.out_dim = out_dim
        self.heads = [RffHead(s, rng, rff_dim, hidden, out_dim, dtype) for s in sigmas]

    def forward(self, lat, lon):
        """Embeddings ``(N, out_dim)`` for degree arrays ``lat``/``lon``."""
        coords = standardized_coords(np.atleast_1d(lat), np.atleast_1d(lon))
        out = None
        for head in self.heads:
            y = head(coords)
            out = y if out is None else out + y
        return out

    def frequency_checksum(self):
        h = hashlib.sha256()
        for head in self.heads:
            h.update(np.ascontiguousarray(head.B, dtype="<f4").tobytes())
        return h.hexdigest()


def encode_gps(p: GpsPoint, encoder: LocationEncoder) -> np.ndarray:
    with ag.no_grad():
        return encoder(p.lat, p.lon).data[0].copy()


def embed_points(encoder, lat, lon, normalize=True, chunk=4096):
    """Batched, gradient-free embedding of many coordinates."""
    lat = np.asarray(lat, dtype=np.float64).ravel()
    lon = np.asarray(lon, dtype=np.float64).ravel()
    if lat.size == 0:
        raise ValueError("cannot embed an empty set of points")
    rows = []
    with ag.no_grad():
        for s in range(0, lat.size, chunk):
            rows.append(encoder(lat[s : s + chunk], lon[s : s + chunk]).data)
    emb = np.concatenate(rows, axis=0)
    if normalize:
        norms = np.linalg.norm(emb.astype(np.float64), axis=1, keepdims=True)
        emb = (emb / np.maximum(norms, 1e-12)).astype(emb.dtype)
    return emb


def embed_gallery(points, encoder, normalize=True):
    if len(points) == 0:
        raise ValueError("gallery is empty")
    lat = np.array([p.lat for p in points])
    lon = np.array([p.lon for p in points])
    return embed_points(encoder, lat, lon, normalize=normalize)
