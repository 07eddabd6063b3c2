"""Frame features: ingestion, fusion, temporal alignment and projection.

Per-frame CLIP and DINOv2 class-token vectors arrive precomputed in a VTAG
file. They are concatenated and unit-normalised, offset by sinusoidal
positions, passed through the TempGeo self-attention encoder and finally
projected to the shared 512-d space by a Mish MLP.

VTAG layout (little-endian)::

    b"VTAG" | version u32 | d_clip u32 | d_dino u32 | frames u64
    per frame: id_len u32 | seq id utf-8 | frame_idx u32 | lat f64 | lon f64
               | f_clip f32 * d_clip | f_dino f32 * d_dino
"""

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import FormatError, ShapeError
from .geodesy import GpsPoint
from .nn import EncoderBlock, Linear, Module, as_input

VTAG_MAGIC = b"VTAG"
VTAG_VERSION = 1
FULL_DIMS = (768, 1024)
TOY_DIMS = (48, 80)


@dataclass(frozen=True)
class FrameFeatureRecord:
    f_clip: np.ndarray
    f_dino: np.ndarray
    gps: GpsPoint
    seq_id: str
    frame_idx: int


@dataclass
class FrameSequence:
    """One video: per-frame features and ground-truth coordinates, ordered by frame index."""

    seq_id: str
    frame_idx: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    clip: np.ndarray
    dino: np.ndarray

    def __len__(self):
        return len(self.frame_idx)

    @property
    def fused(self):
        return fuse_rows(self.clip, self.dino)

    def take(self, idx):
        idx = np.asarray(idx)
        return FrameSequence(self.seq_id, self.frame_idx[idx], self.lat[idx], self.lon[idx],
                             self.clip[idx], self.dino[idx])

    def records(self):
        for i in range(len(self)):
            yield FrameFeatureRecord(self.clip[i], self.dino[i], GpsPoint(self.lat[i], self.lon[i]),
                                     self.seq_id, int(self.frame_idx[i]))


@dataclass
class FrameDataset:
    d_clip: int
    d_dino: int
    sequences: list = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    @property
    def frame_count(self):
        return sum(len(s) for s in self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def subset(self, indices):
        return FrameDataset(self.d_clip, self.d_dino, [self.sequences[i] for i in indices])

    def manifest_rows(self):
        for s in self.sequences:
            for i in range(len(s)):
                yield s.seq_id, int(s.frame_idx[i]), float(s.lat[i]), float(s.lon[i])


# -- fusion and positions -----------------------------------------------------
def fuse_rows(clip, dino):
    """Concatenate and L2-normalise per-frame features, ``(T, d_clip + d_dino)``."""
    clip = np.atleast_2d(np.asarray(clip, dtype=np.float64))
    dino = np.atleast_2d(np.asarray(dino, dtype=np.float64))
    if clip.shape[0] != dino.shape[0]:
        raise ShapeError("fuse", clip.shape, dino.shape, "frame counts differ")
    z = np.concatenate([clip, dino], axis=1)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalise an all-zero fused frame embedding")
    return z / norms


def fuse(record: FrameFeatureRecord, dims=None) -> np.ndarray:
    if dims is not None and (len(record.f_clip), len(record.f_dino)) != tuple(dims):
        raise ShapeError("fuse", (len(record.f_clip), len(record.f_dino)), tuple(dims), "feature dims do not match config")
    return fuse_rows(record.f_clip, record.f_dino)[0]


def positional_embed(T, D):
    """Interleaved sinusoidal positions: channel 2i is sin(t w_i), 2i+1 is cos(t w_i)."""
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    t = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, D, 2, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * i / D)
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(t * freq)
    pe[:, 1::2] = np.cos(t * freq)[:, : D // 2]
    return pe


def positional_scale(width):
    """Scale that gives the sinusoidal table a norm near that of a unit feature vector."""
    return 1.0 / math.sqrt(width)


# -- networks ------------------------------------------------------------------
@dataclass
class TempGeoConfig:
    width: int = sum(TOY_DIMS)
    layers: int = 2
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    pre_norm: bool = True
    positions: bool = True
    pos_scale: float = None  # multiplier on the sinusoidal table; None means 1/sqrt(width)
    zero_init: bool = True

    def __post_init__(self):
        if self.pos_scale is None:
            self.pos_scale = positional_scale(self.width)
        if not self.pre_norm:
            raise ValueError("only pre-normalised blocks are implemented")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by head count {self.heads}")


class TempGeo(Module):
    """Bidirectional self-attention over the frames of each sequence; width preserved."""

    def __init__(self, cfg: TempGeoConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.blocks = [EncoderBlock(cfg.width, cfg.heads, cfg.ff_mult, cfg.dropout, rng, cfg.zero_init, dtype)
                       for _ in range(cfg.layers)]

    def forward(self, fused, rng=None):
        """``fused`` is ``(B, T, D)`` or ``(T, D)``; output has the same shape."""
        x = as_input(fused, self.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        if self.cfg.positions:
            x = x + (self.cfg.pos_scale * positional_embed(x.shape[1], x.shape[2])).astype(self.dtype)
        for block in self.blocks:
            x = block(x, rng=rng)
        return x.reshape(x.shape[1:]) if squeeze else x


class FrameProjection(Module):
    """Affine layers D -> 1024 -> 768 -> 512 with Mish between; rows unit-normalised."""

    def __init__(self, d_in, rng, hidden=(1024, 768), out_dim=512, dtype=np.float32):
        super().__init__()
        dims = [d_in, *hidden, out_dim]
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        x = as_input(x, self.dtype)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.mish(x)
        return ag.l2_normalize(x, axis=-1)


def project_frames(projection: FrameProjection, aligned):
    """Project aligned frames; returns the unit rows and a flag per all-zero (degenerate) row."""
    out = projection(aligned)
    degenerate = ~np.any(out.data != 0.0, axis=-1)
    return out, degenerate


# -- VTAG I/O ------------------------------------------------------------------
def write_vtag(path, dataset: FrameDataset, manifest=True):
    path = Path(path)
    parts = [VTAG_MAGIC, struct.pack("<IIIQ", VTAG_VERSION, dataset.d_clip, dataset.d_dino, dataset.frame_count)]
    for s in dataset.sequences:
        raw = s.seq_id.encode("utf-8")
        clip = np.ascontiguousarray(s.clip, dtype="<f4")
        dino = np.ascontiguousarray(s.dino, dtype="<f4")
        if clip.shape[1] != dataset.d_clip or dino.shape[1] != dataset.d_dino:
            raise ShapeError("write_vtag", clip.shape, dino.shape, f"expected dims ({dataset.d_clip}, {dataset.d_dino})")
        for i in range(len(s)):
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<Idd", int(s.frame_idx[i]), float(s.lat[i]), float(s.lon[i])))
            parts.append(clip[i].tobytes())
            parts.append(dino[i].tobytes())
    path.write_bytes(b"".join(parts))
    if manifest:
        write_manifest(manifest_path_for(path), dataset.manifest_rows())
    return path


def read_vtag(path):
    path = Path(path)
    buf = memoryview(path.read_bytes())
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated VTAG file while reading {what}", path, pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != VTAG_MAGIC:
        raise FormatError("bad magic, expected VTAG", path, 0)
    version, d_clip, d_dino, count = struct.unpack("<IIIQ", take(20, "header"))
    if version != VTAG_VERSION:
        raise FormatError(f"unsupported VTAG version {version}", path, 4)
    feat_bytes = 4 * (d_clip + d_dino)
    groups = {}
    for _ in range(count):
        start = pos
        (n,) = struct.unpack("<I", take(4, "id length"))
        try:
            sid = bytes(take(n, "sequence id")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("sequence id is not valid utf-8", path, start + 4) from None
        fidx, lat, lon = struct.unpack("<Idd", take(20, "frame record"))
        feats = np.frombuffer(take(feat_bytes, "features"), dtype="<f4")
        if not (np.isfinite(lat) and np.isfinite(lon) and -90 <= lat <= 90 and -180 <= lon <= 180):
            raise FormatError(f"invalid coordinate ({lat}, {lon}) for {sid}:{fidx}", path, start)
        g = groups.setdefault(sid, ([], [], [], [], []))
        if g[0] and fidx <= g[0][-1]:
            raise FormatError(f"frame_idx not strictly increasing in sequence {sid!r}", path, start)
        g[0].append(fidx)
        g[1].append(lat)
        g[2].append(lon)
        g[3].append(feats[:d_clip])
        g[4].append(feats[d_clip:])
    if pos != len(buf):
        raise FormatError("trailing bytes after last frame", path, pos)
    seqs = []
    for sid, (fi, la, lo, cl, di) in groups.items():
        seqs.append(FrameSequence(sid, np.array(fi, dtype=np.int64), np.array(la), np.array(lo),
                                  np.array(cl, dtype=np.float32).reshape(-1, d_clip),
                                  np.array(di, dtype=np.float32).reshape(-1, d_dino)))
    return FrameDataset(d_clip, d_dino, seqs)


def manifest_path_for(vtag_path):
    return Path(vtag_path).with_suffix(".csv")


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "frame_idx", "lat", "lon"])
        for sid, fidx, lat, lon in rows:
            w.writerow([sid, fidx, repr(float(lat)), repr(float(lon))])


def read_manifest(path):
    """Rows of ``(seq_id, frame_idx, lat, lon)`` from a manifest CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"seq_id", "frame_idx", "lat", "lon"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"manifest lacks columns {sorted(missing)}", path)
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append((row["seq_id"], int(row["frame_idx"]), float(row["lat"]), float(row["lon"])))
            except (TypeError, ValueError):
                raise FormatError(f"malformed manifest row at line {line_no}", path) from None
    return rows
