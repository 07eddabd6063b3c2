"""Exact cosine search over gallery embeddings and two-stage sequence inference.

Stage one retrieves the nearest gallery point for every projected frame.
Stage two embeds those initial points, refines the embeddings with the
GeoRefiner conditioned on the frame features, and retrieves again.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import FormatError, ShapeError
from .gallery import GalleryIndex

log = logging.getLogger(__name__)

PRED_COLUMNS = ["seq_id", "frame_idx", "pred_lat", "pred_lon", "score", "stage"]
STAGES = ("initial", "refined")


def naive_topk(queries, gallery_emb, k=1):
    """Full sort per query; the reference the blocked scan must agree with."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    G = np.asarray(gallery_emb, dtype=np.float64)
    k = min(k, len(G))
    idx = np.empty((len(queries), k), dtype=np.int64)
    val = np.empty((len(queries), k))
    for r, q in enumerate(queries):
        s = np.array([float(np.dot(g, q)) for g in G])
        order = np.lexsort((np.arange(len(G)), -s))[:k]
        idx[r], val[r] = order, s[order]
    return idx, val


def _scan(Q, G, k, block):
    """Top-k of ``Q @ G.T`` visiting ``G`` in row blocks; ties go to the lower index."""
    m = len(Q)
    best_val = np.full((m, k), -np.inf)
    best_idx = np.full((m, k), np.iinfo(np.int64).max, dtype=np.int64)
    for start in range(0, len(G), block):
        S = Q @ G[start : start + block].astype(np.float64).T
        if k == 1:
            j = np.argmax(S, axis=1)
            v = S[np.arange(m), j]
            better = v > best_val[:, 0]
            best_val[better, 0] = v[better]
            best_idx[better, 0] = j[better] + start
            continue
        cand_idx = np.concatenate([best_idx, np.broadcast_to(np.arange(start, start + S.shape[1]), S.shape)], axis=1)
        cand_val = np.concatenate([best_val, S], axis=1)
        for r in range(m):
            order = np.lexsort((cand_idx[r], -cand_val[r]))[:k]
            best_idx[r], best_val[r] = cand_idx[r, order], cand_val[r, order]
    return best_idx, best_val


def topk_batch(queries, gallery_emb, k=1, workers=1, block=65536, chunk=256):
    """Exact top-``k`` ``(indices, scores)`` for each query row, ``(M, k)`` each.

    Queries are split into chunks scanned by ``workers`` threads; each chunk
    walks the gallery in blocks of ``block`` rows, so memory stays bounded for
    large galleries. Output does not depend on ``workers``.
    """
    G = np.asarray(gallery_emb)
    if G.ndim != 2 or len(G) == 0:
        raise ValueError("gallery embeddings must be a nonempty 2-d array")
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.shape[1] != G.shape[1]:
        raise ShapeError("topk", Q.shape, G.shape, "embedding widths differ")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(G):
        log.warning("k=%d exceeds gallery size %d; clamping", k, len(G))
        k = len(G)
    pieces = [Q[s : s + chunk] for s in range(0, len(Q), chunk)]
    if workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda q: _scan(q, G, k, block), pieces))
    else:
        parts = [_scan(q, G, k, block) for q in pieces]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def topk(query, gallery: GalleryIndex, k=1):
    """``k`` ``(index, score)`` pairs for a single query against an embedded gallery."""
    if gallery.embeddings is None:
        raise ValueError("gallery has no embeddings")
    idx, val = topk_batch(query, gallery.embeddings, k)
    return [(int(i), float(v)) for i, v in zip(idx[0], val[0])]


@dataclass
class RetrievalResult:
    """Top-1 predictions for every frame of one sequence at one stage."""

    seq_id: str
    frame_idx: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    index: np.ndarray
    score: np.ndarray
    stage: str

    def __len__(self):
        return len(self.frame_idx)


def _normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def infer_sequence(seq, model, gallery: GalleryIndex, workers=1):
    """Two-stage top-1 retrieval for one sequence; returns ``(initial, refined)``."""
    if len(seq) == 0:
        raise ValueError(f"sequence {seq.seq_id!r} is empty")
    if gallery.embeddings is None:
        raise ValueError("gallery has no embeddings; embed it with the model first")
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            V = model.frame_embeddings(seq.fused).data
            idx1, s1 = topk_batch(V, gallery.embeddings, 1, workers)
            idx1, s1 = idx1[:, 0], s1[:, 0]
            # Gallery rows are the location-encoder embeddings of the initial points.
            queries = gallery.embeddings[idx1]
            refined = model.refiner(V, queries).data
            idx2, s2 = topk_batch(_normalize(refined), gallery.embeddings, 1, workers)
            idx2, s2 = idx2[:, 0], s2[:, 0]
    finally:
        model.train(was_training)
    fi = np.asarray(seq.frame_idx)
    initial = RetrievalResult(seq.seq_id, fi, gallery.lat[idx1], gallery.lon[idx1], idx1, s1, "initial")
    final = RetrievalResult(seq.seq_id, fi, gallery.lat[idx2], gallery.lon[idx2], idx2, s2, "refined")
    return initial, final


def infer_dataset(dataset, model, gallery: GalleryIndex, workers=1):
    """``(initial, refined)`` result lists over every sequence of ``dataset``."""
    initial, refined = [], []
    for seq in dataset:
        a, b = infer_sequence(seq, model, gallery, workers)
        initial.append(a)
        refined.append(b)
    return initial, refined


def export_predictions(results, path, trajectories=None):
    """Write the predictions CSV and, optionally, a GeoJSON trajectory file.

    Each sequence becomes a LineString feature; a single-frame sequence becomes
    a Point because a LineString needs two positions.
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRED_COLUMNS)
        for r in results:
            for i in range(len(r)):
                w.writerow([r.seq_id, int(r.frame_idx[i]), repr(float(r.lat[i])), repr(float(r.lon[i])),
                            repr(float(r.score[i])), r.stage])
    if trajectories is not None:
        features = []
        for r in results:
            coords = [[float(lo), float(la)] for la, lo in zip(r.lat, r.lon)]
            geom = {"type": "Point", "coordinates": coords[0]} if len(coords) == 1 else \
                {"type": "LineString", "coordinates": coords}
            features.append({"type": "Feature", "geometry": geom,
                             "properties": {"seq_id": r.seq_id, "stage": r.stage, "frames": len(coords)}})
        Path(trajectories).write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n")
    return path


def read_predictions(path):
    """Rows ``(seq_id, frame_idx, lat, lon, score, stage)`` from a predictions CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PRED_COLUMNS:
            raise FormatError(f"predictions header must be {','.join(PRED_COLUMNS)}, got {header}", path)
        for line_no, row in enumerate(reader, start=2):
            try:
                sid, fidx, lat, lon, score, stage = row
                rows.append((sid, int(fidx), float(lat), float(lon), float(score), stage))
            except ValueError:
                raise FormatError(f"malformed predictions row at line {line_no}", path) from None
            if stage not in STAGES:
                raise FormatError(f"unknown stage {stage!r} at line {line_no}", path)
    return rows
