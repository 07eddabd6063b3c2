"""Trajectory metrics: threshold accuracy, video accuracy, discrete Frechet distance, range difference.

Points are passed either as ``(N, 2)`` arrays of ``(lat, lon)`` degrees or as
lists of :class:`GpsPoint`. Distances are kilometers unless stated otherwise;
the range difference is in degrees.
"""

import json
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import IdMismatchError
from .geodesy import GpsPoint, haversine

THRESHOLDS_KM = (0.5, 1.0, 5.0, 25.0)
THRESHOLD_KEYS = ("0_5km", "1km", "5km", "25km")


def as_latlon(points):
    """``(N, 2)`` float array from GpsPoints or any array-like of ``(lat, lon)`` rows."""
    if len(points) and isinstance(points[0], GpsPoint):
        return np.array([[p.lat, p.lon] for p in points], dtype=np.float64)
    arr = np.asarray(points, dtype=np.float64)
    return arr.reshape(-1, 2)


def point_errors(pred, gt):
    pred, gt = as_latlon(pred), as_latlon(gt)
    if len(pred) != len(gt):
        raise ValueError(f"prediction count {len(pred)} != ground-truth count {len(gt)}")
    return haversine(pred[:, 0], pred[:, 1], gt[:, 0], gt[:, 1])


def threshold_accuracy(pred, gt, thresholds=THRESHOLDS_KM):
    """Percentage of pairs within each distance threshold (inclusive)."""
    err = point_errors(pred, gt)
    if err.size == 0:
        raise ValueError("no prediction pairs to score")
    return np.array([100.0 * np.mean(err <= t) for t in thresholds])


def _check_antimeridian(lon):
    if lon.size and lon.max() - lon.min() > 180.0:
        raise ValueError("sequence crosses the antimeridian; lat/lon centroid is undefined")


def video_prediction(preds, gts):
    """``(video_pred, video_gt)`` as ``(lat, lon)`` arrays.

    The ground-truth point is the coordinate mean. The predicted point is the
    member of ``preds`` closest to the mean of ``preds``, earliest on ties, so
    it is always an actual prediction.
    """
    preds, gts = as_latlon(preds), as_latlon(gts)
    if len(preds) == 0 or len(gts) == 0:
        raise ValueError("video prediction needs a nonempty sequence")
    _check_antimeridian(preds[:, 1])
    _check_antimeridian(gts[:, 1])
    c = preds.mean(axis=0)
    d = haversine(preds[:, 0], preds[:, 1], c[0], c[1])
    return preds[int(np.argmin(d))].copy(), gts.mean(axis=0)


def pairwise_distance(a, b, metric="haversine"):
    a, b = as_latlon(a), as_latlon(b)
    if metric == "haversine":
        return haversine(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1])
    if metric == "planar":
        return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    raise ValueError(f"unknown metric {metric!r}")


def discrete_frechet(a, b, metric="haversine"):
    """Coupling distance between two polylines by dynamic programming.

    Cells on one anti-diagonal ``i + j = k`` only depend on the two previous
    anti-diagonals, so each is filled in one vectorised step.
    """
    d = pairwise_distance(a, b, metric)
    n, m = d.shape
    if n == 0 or m == 0:
        raise ValueError("discrete Frechet distance needs two nonempty curves")
    ca = np.full((n, m), np.inf)
    ca[0, 0] = d[0, 0]
    for k in range(1, n + m - 1):
        i = np.arange(max(0, k - m + 1), min(n, k + 1))
        j = k - i
        up = np.where(i > 0, ca[np.maximum(i - 1, 0), j], np.inf)
        left = np.where(j > 0, ca[i, np.maximum(j - 1, 0)], np.inf)
        diag = np.where((i > 0) & (j > 0), ca[np.maximum(i - 1, 0), np.maximum(j - 1, 0)], np.inf)
        ca[i, j] = np.maximum(d[i, j], np.minimum(np.minimum(up, left), diag))
    return float(ca[-1, -1])


def mean_range_difference(a, b):
    """Mean over lat and lon of the absolute difference in coordinate range (degrees)."""
    a, b = as_latlon(a), as_latlon(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("range difference needs two nonempty curves")
    ra = a.max(axis=0) - a.min(axis=0)
    rb = b.max(axis=0) - b.min(axis=0)
    return float(np.mean(np.abs(ra - rb)))


@dataclass
class SequenceMetrics:
    seq_id: str
    frames: int
    median_km: float
    video_error_km: float
    dfd: float
    mrd: float


@dataclass
class EvalReport:
    frame_acc: np.ndarray
    frame_median_km: float
    video_acc: np.ndarray
    video_median_km: float
    dfd_mean: float
    mrd_mean: float
    stage: str = ""
    dfd_metric: str = "haversine"
    per_sequence: list = field(default_factory=list)

    def to_dict(self):
        out = OrderedDict()
        for key, v in zip(THRESHOLD_KEYS, self.frame_acc):
            out[f"frame_acc_{key}"] = float(v)
        out["frame_median_km"] = float(self.frame_median_km)
        for key, v in zip(THRESHOLD_KEYS, self.video_acc):
            out[f"video_acc_{key}"] = float(v)
        out["video_median_km"] = float(self.video_median_km)
        out["dfd_mean"] = float(self.dfd_mean)
        out["mrd_mean"] = float(self.mrd_mean)
        out["stage"] = self.stage
        out["dfd_metric"] = self.dfd_metric
        out["per_sequence"] = [
            {"seq_id": s.seq_id, "frames": s.frames, "median_km": s.median_km,
             "video_error_km": s.video_error_km, "dfd": s.dfd, "mrd": s.mrd}
            for s in self.per_sequence
        ]
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _group(rows):
    """``{seq_id: (frame_idx array, (N, 2) coords)}`` with frames sorted by index."""
    groups = {}
    for sid, fidx, lat, lon in rows:
        groups.setdefault(sid, []).append((fidx, lat, lon))
    out = {}
    for sid, items in groups.items():
        items.sort()
        arr = np.array(items, dtype=np.float64)
        out[sid] = (arr[:, 0].astype(np.int64), arr[:, 1:3])
    return out


def select_stage(pred_rows, stage=None):
    """Keep one stage of predictions: ``stage`` if given, else refined when present."""
    stages = {r[5] for r in pred_rows}
    if stage is None:
        stage = "refined" if "refined" in stages else "initial"
    picked = [(r[0], r[1], r[2], r[3]) for r in pred_rows if r[5] == stage]
    return picked, stage


def evaluate(pred_rows, gt_rows, stage=None, dfd_metric="haversine", workers=1):
    """Full metric report.

    ``pred_rows`` come from :func:`vidtag.retrieval.read_predictions`;
    ``gt_rows`` are ``(seq_id, frame_idx, lat, lon)`` manifest rows. Every
    ground-truth frame needs exactly one prediction of the chosen stage.
    """
    picked, stage = select_stage(pred_rows, stage)
    pred_keys = [(r[0], r[1]) for r in picked]
    gt_keys = [(r[0], r[1]) for r in gt_rows]
    if len(set(pred_keys)) != len(pred_keys):
        seen, dup = set(), []
        for k in pred_keys:
            if k in seen:
                dup.append(k)
            seen.add(k)
        raise IdMismatchError([], sorted(set(dup)))
    missing = sorted(set(gt_keys) - set(pred_keys))
    extra = sorted(set(pred_keys) - set(gt_keys))
    if missing or extra:
        raise IdMismatchError(missing, extra)
    if not gt_rows:
        raise ValueError("no ground-truth frames to evaluate")
    P, G = _group(picked), _group(gt_rows)
    sids = sorted(G)

    def per_seq(sid):
        pc, gc = P[sid][1], G[sid][1]
        err = point_errors(pc, gc)
        vp, vg = video_prediction(pc, gc)
        verr = float(haversine(vp[0], vp[1], vg[0], vg[1]))
        return SequenceMetrics(sid, len(gc), float(np.median(err)), verr,
                               discrete_frechet(pc, gc, dfd_metric), mean_range_difference(pc, gc)), err

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(per_seq, sids))
    else:
        results = [per_seq(s) for s in sids]
    seqs = [r[0] for r in results]
    all_err = np.concatenate([r[1] for r in results])
    video_err = np.array([s.video_error_km for s in seqs])
    return EvalReport(
        frame_acc=np.array([100.0 * np.mean(all_err <= t) for t in THRESHOLDS_KM]),
        frame_median_km=float(np.median(all_err)),
        video_acc=np.array([100.0 * np.mean(video_err <= t) for t in THRESHOLDS_KM]),
        video_median_km=float(np.median(video_err)),
        dfd_mean=float(np.mean([s.dfd for s in seqs])),
        mrd_mean=float(np.mean([s.mrd for s in seqs])),
        stage=stage,
        dfd_metric=dfd_metric,
        per_sequence=seqs,
    )
