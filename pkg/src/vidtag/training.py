"""Two-phase training, held-out probes and the component ablation.

Phase I trains TempGeo, the projection MLP, the location encoder and the
logit scale with the contrastive loss. Phase II freezes all of them and
trains only the GeoRefiner to denoise corrupted ground-truth GPS embeddings
under the weighted hinge loss.
"""

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .errors import DivergenceError, GraphStateError, NonFiniteError
from .gallery import build_gallery, region_extents
from .georefiner import NoiseConfig, corrupt_coords
from .geodesy import haversine
from .metrics import evaluate
from .model import ModelConfig, VidTagModel
from .objectives import HingeWeights, contrastive_loss, video_level_pool, weighted_hinge_loss
from .optim import Adam, LrSchedule
from .retrieval import infer_dataset, topk_batch
from .rng import stream

log = logging.getLogger(__name__)

FULL_BATCH, FULL_FRAMES, FULL_ALPHA = 128, 16, 10.0


def batch_equivalent_alpha(batch, frames, alpha=FULL_ALPHA, ref_batch=FULL_BATCH, ref_frames=FULL_FRAMES):
    """Hinge ``alpha`` giving each negative pair the same weight relative to a positive as ``alpha``
    does at the reference batch.

    The triangle means divide by N(N-1)/2 while the diagonal mean divides by N,
    so the per-pair ratio is 2 alpha / (N - 1) for N frames per batch.
    """
    n, ref = batch * frames, ref_batch * ref_frames
    return alpha * (n - 1) / (ref - 1)


@dataclass
class TrainConfig:
    phase: int = 1
    epochs: int = 30
    batch: int = 16
    frames: int = 16
    lr: float = 1e-3
    decay: float = 0.99
    warmup_steps: int = 30
    seed: int = 42
    probe_fraction: float = 0.1
    probe_every: int = 1
    probe_resolution_km: float = 4.0
    alpha: float = 10.0
    beta: float = 1.0
    symmetric: bool = False
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    max_steps: int = 0  # 0 = no limit

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        if self.frames < 2:
            raise ValueError("frames per training sequence must be >= 2")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be positive")
        if not 0.0 <= self.probe_fraction < 1.0:
            raise ValueError("probe_fraction must lie in [0, 1)")

    @classmethod
    def full(cls, phase=1, **overrides):
        base = dict(epochs=600, lr=5e-5, decay=0.99) if phase == 1 else dict(epochs=100, lr=1e-4, decay=0.95)
        return cls(phase=phase, **{"batch": 128, "frames": 16, "warmup_steps": 1000, **base, **overrides})

    @classmethod
    def toy(cls, phase=1, **overrides):
        base = dict(epochs=15, lr=1e-3, decay=0.99) if phase == 1 else dict(epochs=10, lr=3e-4, decay=0.95)
        merged = {"batch": 16, "frames": 16, "warmup_steps": 30, **base, **overrides}
        # Small batches would otherwise over-weight the negatives, mostly same-sequence neighbours.
        merged.setdefault("alpha", batch_equivalent_alpha(merged["batch"], merged["frames"]))
        return cls(phase=phase, **merged)

    def to_dict(self):
        return asdict(self)


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


# -- batching ---------------------------------------------------------------
def sample_frames(T, k):
    """Indices of ``k`` uniformly spaced frames of ``T`` (all frames when ``T <= k``)."""
    if T <= k:
        return np.arange(T)
    return np.round(np.linspace(0, T - 1, k)).astype(np.int64)


def prepare_batch(seqs, frames):
    """Sub-sampled sequences, stably ordered by length so equal lengths are contiguous."""
    picks = [s.take(sample_frames(len(s), frames)) for s in seqs]
    return sorted(picks, key=len)


def _length_groups(picks):
    groups, start = [], 0
    while start < len(picks):
        end = start
        while end < len(picks) and len(picks[end]) == len(picks[start]):
            end += 1
        groups.append(picks[start:end])
        start = end
    return groups


def batch_frame_embeddings(model, picks, rng=None):
    """Projected frame embeddings ``(N, E)`` for the concatenated frames of ``picks``."""
    parts = []
    for group in _length_groups(picks):
        fused = np.stack([s.fused for s in group])
        V = model.frame_embeddings(fused, rng=rng)
        parts.append(V.reshape(-1, V.shape[-1]))
    return parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)


def _coords(picks):
    return np.concatenate([s.lat for s in picks]), np.concatenate([s.lon for s in picks])


# -- steps ------------------------------------------------------------------
def phase1_training_step(model, picks, rng=None, symmetric=False):
    """Contrastive loss over every frame/GPS pair of the batch."""
    V = batch_frame_embeddings(model, picks, rng)
    lat, lon = _coords(picks)
    G = model.gps_embeddings(lat, lon)
    return contrastive_loss(V, G, model.logit_scale(), symmetric=symmetric)


def phase2_training_step(model, picks, noise: NoiseConfig, noise_rng, rng=None, weights=HingeWeights()):
    """Weighted hinge loss of the refined, corrupted-query embeddings; only the refiner is differentiated."""
    was = model.training
    model.train(False)
    model.refiner.train(was)
    with ag.no_grad():
        V = batch_frame_embeddings(model, picks).data
        lat, lon = _coords(picks)
        G = model.gps_embeddings(lat, lon).data
        q_lat, q_lon = [], []
        for s in picks:
            c = corrupt_coords(s.lat, s.lon, noise, noise_rng)
            q_lat.append(c.lat)
            q_lon.append(c.lon)
        Q = model.gps_embeddings(np.concatenate(q_lat), np.concatenate(q_lon)).data
    model.train(was)
    refined, start = [], 0
    for group in _length_groups(picks):
        b, t = len(group), len(group[0])
        n = b * t
        out = model.refiner(V[start : start + n].reshape(b, t, -1), Q[start : start + n].reshape(b, t, -1), rng=rng)
        refined.append(out.reshape(n, out.shape[-1]))
        start += n
    Gp = refined[0] if len(refined) == 1 else ag.concat(refined, axis=0)
    Gp = ag.l2_normalize(Gp, axis=-1)
    lengths = [len(s) for s in picks]
    Gp_seq = video_level_pool(Gp, lengths)
    G_seq = video_level_pool(G, lengths)
    return weighted_hinge_loss(Gp, G, Gp_seq, G_seq, weights)


# -- probes -----------------------------------------------------------------
def probe_gallery(model, dataset, resolution_km, padding=0.05):
    """Uniform grid over the dataset's regions, embedded with ``model``."""
    lat, lon = _coords(list(dataset))
    gallery = build_gallery(region_extents(lat, lon, padding=padding, resolution=resolution_km))
    return gallery.embed(model)


def retrieval_probe(model, dataset, gallery, resolution_km=None):
    """Stage-one top-1 quality on every frame of ``dataset``.

    ``top1`` is the fraction of frames retrieving exactly the gallery point
    nearest their ground truth; ``within_2res`` uses twice the resolution.
    """
    res = resolution_km or gallery.resolution
    was = model.training
    model.eval()
    errs, hits = [], []
    with ag.no_grad():
        for s in dataset:
            V = model.frame_embeddings(s.fused).data
            idx, _ = topk_batch(V, gallery.embeddings, 1)
            idx = idx[:, 0]
            d_pred = haversine(gallery.lat[idx], gallery.lon[idx], s.lat, s.lon)
            d_all = haversine(gallery.lat[None, :], gallery.lon[None, :], s.lat[:, None], s.lon[:, None])
            errs.append(d_pred)
            hits.append(d_pred <= d_all.min(axis=1) + 1e-9)
    model.train(was)
    errs, hits = np.concatenate(errs), np.concatenate(hits)
    return {"top1": float(hits.mean()), "within_2res": float(np.mean(errs <= 2 * res)),
            "median_km": float(np.median(errs)), "random_top1": 1.0 / len(gallery)}


def denoise_probe(model, dataset, gallery, noise: NoiseConfig, seed):
    """Paired retrieval error of corrupted queries before and after refinement.

    Uses one fixed corruption per sequence from ``(seed, "probe-noise", i)``.
    Also reports how often a collapsed sequence comes back with a nonzero
    coordinate range.
    """
    was = model.training
    model.eval()
    before, after, undone, collapsed = [], [], 0, 0
    with ag.no_grad():
        for i, s in enumerate(dataset):
            c = corrupt_coords(s.lat, s.lon, noise, stream(seed, "probe-noise", i))
            Q = model.embed_points(c.lat, c.lon, normalize=True)
            V = model.frame_embeddings(s.fused).data
            R = model.refiner(V, Q).data
            R = R / np.maximum(np.linalg.norm(R, axis=1, keepdims=True), 1e-12)
            i0 = topk_batch(Q, gallery.embeddings, 1)[0][:, 0]
            i1 = topk_batch(R, gallery.embeddings, 1)[0][:, 0]
            before.append(haversine(gallery.lat[i0], gallery.lon[i0], s.lat, s.lon))
            after.append(haversine(gallery.lat[i1], gallery.lon[i1], s.lat, s.lon))
            if c.collapsed and len(s) > 1:
                collapsed += 1
                undone += int(np.ptp(gallery.lat[i1]) > 0 or np.ptp(gallery.lon[i1]) > 0)
    model.train(was)
    before, after = np.concatenate(before), np.concatenate(after)
    return {"corrupted_median_km": float(np.median(before)), "refined_median_km": float(np.median(after)),
            "collapsed": collapsed, "collapse_undone": undone / collapsed if collapsed else float("nan")}


# -- loops ------------------------------------------------------------------
class _JsonLog:
    def __init__(self, sink):
        self.sink = sink
        self.records = []

    def __call__(self, **rec):
        self.records.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec, sort_keys=True) + "\n")
            self.sink.flush()


def split_probe(dataset, fraction, seed):
    """``(train, probe)`` sequence split; the probe part never drives updates."""
    n = len(dataset)
    n_probe = int(round(n * fraction))
    if n - n_probe < 1:
        raise ValueError("no sequences left for training after the probe split")
    order = stream(seed, "split").permutation(n)
    return dataset.subset(sorted(order[n_probe:])), dataset.subset(sorted(order[:n_probe]))


def _check_loss(loss, phase, step):
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"phase {phase} loss is {value} at step {step}")
    return value


def _run(model, dataset, cfg: TrainConfig, step_fn, params, sink, probe_fn):
    train, probe = split_probe(dataset, cfg.probe_fraction, cfg.seed)
    if len(train) < 1:
        raise ValueError("empty training set")
    steps_per_epoch = math.ceil(len(train) / cfg.batch)
    schedule = LrSchedule(cfg.lr, cfg.decay, steps_per_epoch, cfg.warmup_steps)
    opt = Adam(params, schedule)
    logger = _JsonLog(sink)
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", cfg.phase, epoch).permutation(len(train))
        losses = []
        t0 = time.perf_counter()
        for b in range(steps_per_epoch):
            chosen = [train.sequences[i] for i in order[b * cfg.batch : (b + 1) * cfg.batch]]
            picks = prepare_batch(chosen, cfg.frames)
            if sum(len(p) for p in picks) < 2:
                continue
            model.train()
            opt.zero_grad()
            try:
                loss = step_fn(picks, step)
                value = _check_loss(loss, cfg.phase, step)
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(f"phase {cfg.phase} produced non-finite values at step {step}: {exc}") from exc
            lr = opt.step()
            step += 1
            losses.append(value)
            logger(phase=cfg.phase, epoch=epoch, step=step, loss=value, lr=lr)
            if cfg.max_steps and step >= cfg.max_steps:
                break
        rec = {"phase": cfg.phase, "epoch": epoch, "event": "epoch", "loss_mean": float(np.mean(losses)),
               "seconds": round(time.perf_counter() - t0, 3)}
        if probe_fn is not None and len(probe) and ((epoch + 1) % cfg.probe_every == 0 or epoch == cfg.epochs - 1):
            rec["probe"] = probe_fn(probe)
        logger(**rec)
        log.info("phase %d epoch %d loss %.4f", cfg.phase, epoch, rec["loss_mean"])
        if cfg.max_steps and step >= cfg.max_steps:
            break
    model.eval()
    return logger.records


def train_phase1(dataset, cfg: TrainConfig, model=None, model_cfg=None, log_sink=None, probe=True):
    """Contrastive training; returns ``(model, log records)``."""
    if cfg.phase != 1:
        raise ValueError("train_phase1 needs a phase-1 TrainConfig")
    if model is None:
        model = VidTagModel(model_cfg or ModelConfig.toy(d_clip=dataset.d_clip, d_dino=dataset.d_dino))
    if (model.cfg.d_clip, model.cfg.d_dino) != (dataset.d_clip, dataset.d_dino):
        raise ValueError(f"model dims {(model.cfg.d_clip, model.cfg.d_dino)} do not match data "
                         f"{(dataset.d_clip, dataset.d_dino)}")
    params = [p for k in ("tempgeo", "proj", "locenc", "log_scale") if k != "tempgeo" or model.tempgeo is not None
              for p in model.group(k) if p.requires_grad]

    def step_fn(picks, step):
        return phase1_training_step(model, picks, stream(cfg.seed, "dropout", 1, step), cfg.symmetric)

    probe_fn = None
    if probe:
        def probe_fn(ds):
            return retrieval_probe(model, ds, probe_gallery(model, dataset, cfg.probe_resolution_km))

    records = _run(model, dataset, cfg, step_fn, params, log_sink, probe_fn)
    model.phase = 1
    return model, records


def train_phase2(dataset, cfg: TrainConfig, model, log_sink=None, probe=True):
    """Denoiser training on top of a phase-1 model; returns ``(model, log records)``."""
    if cfg.phase != 2:
        raise ValueError("train_phase2 needs a phase-2 TrainConfig")
    if model is None or getattr(model, "phase", 0) < 1:
        raise GraphStateError("phase 2 needs a model trained by phase 1 (load a phase-1 checkpoint)")
    for key in ("proj", "locenc", "log_scale") + (("tempgeo",) if model.tempgeo is not None else ()):
        for p in model.group(key):
            p.requires_grad = False
    params = [p for p in model.group("refiner")]
    for p in params:
        p.requires_grad = True
    weights = HingeWeights(cfg.alpha, cfg.beta)

    def step_fn(picks, step):
        return phase2_training_step(model, picks, cfg.noise, stream(cfg.seed, "noise", step),
                                    stream(cfg.seed, "dropout", 2, step), weights)

    probe_fn = None
    if probe:
        def probe_fn(ds):
            return denoise_probe(model, ds, probe_gallery(model, dataset, cfg.probe_resolution_km), cfg.noise, cfg.seed)

    records = _run(model, dataset, cfg, step_fn, params, log_sink, probe_fn)
    model.phase = 2
    return model, records


# -- ablation ---------------------------------------------------------------
ABLATION_COLUMNS = ("acc_1km", "acc_5km", "median_km", "dfd", "mrd")
ABLATION_ROWS = ("no-TempGeo", "TempGeo", "TempGeo+GeoRefiner")


@dataclass
class AblationTable:
    rows: dict
    resolution_km: float
    bypass_equivalent: bool = None

    def to_markdown(self):
        lines = ["| configuration | " + " | ".join(ABLATION_COLUMNS) + " |",
                 "|---" * (len(ABLATION_COLUMNS) + 1) + "|"]
        for name in ABLATION_ROWS:
            r = self.rows[name]
            lines.append(f"| {name} | " + " | ".join(f"{r[c]:.4f}" for c in ABLATION_COLUMNS) + " |")
        lines.append("")
        lines.append(f"gallery resolution: {self.resolution_km} km")
        if self.bypass_equivalent is not None:
            lines.append(f"identity TempGeo equals bypass: {self.bypass_equivalent}")
        return "\n".join(lines) + "\n"


def results_to_rows(results):
    return [(r.seq_id, int(r.frame_idx[i]), float(r.lat[i]), float(r.lon[i]), float(r.score[i]), r.stage)
            for r in results for i in range(len(r))]


def _report_row(report):
    return {"acc_1km": float(report.frame_acc[1]), "acc_5km": float(report.frame_acc[2]),
            "median_km": report.frame_median_km, "dfd": report.dfd_mean, "mrd": report.mrd_mean}


def identity_tempgeo_config(model_cfg: ModelConfig):
    """Zero-initialised TempGeo without positions: an exact identity map."""
    return replace(model_cfg, use_tempgeo=True,
                   tempgeo=replace(model_cfg.tempgeo, zero_init=True, positions=False))


def ablation_harness(train, val, model_cfg: ModelConfig, p1: TrainConfig, p2: TrainConfig,
                     resolution_km=4.0, check_bypass=True, workers=1):
    """Three-row component ablation on identical data.

    Rows: identity TempGeo (frozen), trained TempGeo, and trained TempGeo
    followed by GeoRefiner. When ``check_bypass`` is set, a fourth run with
    TempGeo removed entirely must reproduce the identity row bit for bit.
    Returns ``(table, details)`` where details holds the final model, raw
    predictions and the wall time of the last phase-1 and the phase-2 run.
    """
    lat, lon = _coords(list(train))
    extents = region_extents(lat, lon, resolution=resolution_km)
    gt_rows = list(val.manifest_rows())

    seconds = {}

    def run_phase1(cfg, freeze_tempgeo=False):
        model = VidTagModel(cfg)
        if freeze_tempgeo:
            model.tempgeo.freeze()
        t0 = time.perf_counter()
        model, _ = train_phase1(train, p1, model=model, probe=False)
        seconds["phase1"] = time.perf_counter() - t0
        return model

    def predict(model):
        gallery = build_gallery(extents).embed(model)
        initial, refined = infer_dataset(val, model, gallery, workers)
        return results_to_rows(initial), results_to_rows(refined)

    rows, details = {}, {}
    ident = run_phase1(identity_tempgeo_config(model_cfg), freeze_tempgeo=True)
    ident_init, _ = predict(ident)
    rows["no-TempGeo"] = _report_row(evaluate(ident_init, gt_rows, stage="initial"))
    bypass_equal = None
    if check_bypass:
        bypass = run_phase1(replace(model_cfg, use_tempgeo=False))
        bypass_init, _ = predict(bypass)
        bypass_equal = bypass_init == ident_init and all(
            np.array_equal(bypass.state_dict()[k], v) for k, v in ident.state_dict().items()
            if not k.startswith("tempgeo."))
        details["bypass_rows"] = bypass_init
    full = run_phase1(model_cfg)
    tg_init, _ = predict(full)
    rows["TempGeo"] = _report_row(evaluate(tg_init, gt_rows, stage="initial"))
    t0 = time.perf_counter()
    full, _ = train_phase2(train, p2, full, probe=False)
    seconds["phase2"] = time.perf_counter() - t0
    _, tg_ref = predict(full)
    rows["TempGeo+GeoRefiner"] = _report_row(evaluate(tg_ref, gt_rows, stage="refined"))
    details.update(identity_rows=ident_init, tempgeo_rows=tg_init, refined_rows=tg_ref, model=full,
                   seconds=seconds)
    return AblationTable(rows, resolution_km, bypass_equal), details


def toy_model_config(dataset, seed=0, **overrides):
    return ModelConfig.toy(d_clip=dataset.d_clip, d_dino=dataset.d_dino, seed=seed, **overrides)

