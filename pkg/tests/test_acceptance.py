"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

The lines are also collected into ``ACCEPTANCE`` and echoed in the terminal
summary by ``conftest.py``.
"""

import math
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from conftest import tiny_model_config
from helpers import grad_check, projection_loss
from test_metrics import brute_frechet
from vidtag.autograd import Tensor
from vidtag.checkpoint import load_tensors, save_tensors
from vidtag.frames import FrameProjection, TempGeo, TempGeoConfig, fuse_rows
from vidtag.gallery import RegionExtent, build_grid, grid_shape
from vidtag.geodesy import EARTH_RADIUS_KM, GpsPoint, equal_earth, haversine, haversine_km
from vidtag.georefiner import GeoRefiner, GeoRefinerConfig, NoiseConfig, corrupt_coords
from vidtag.location_encoder import LocationEncoder
from vidtag.metrics import discrete_frechet
from vidtag.model import VidTagModel
from vidtag.objectives import HingeWeights, contrastive_loss, hinge_term, video_level_pool, weighted_hinge_loss
from vidtag.retrieval import RetrievalResult, export_predictions, naive_topk, read_predictions, topk_batch
from vidtag.rng import stream
from vidtag.synthetic import SyntheticWorldConfig, generate_synthetic
from vidtag.training import (ABLATION_COLUMNS, ABLATION_ROWS, TrainConfig, ablation_harness, denoise_probe,
                             deterministic_mode, probe_gallery, retrieval_probe, toy_model_config, train_phase1,
                             train_phase2)

ACCEPTANCE = []

# Pinned after the first green run of the seed-42 benchmark; see README.
PINNED = {
    "top1": 0.43444730077120824,
    "within_2res": 0.9627249357326478,
    "corrupted_median_km": 16.302371548215735,
    "refined_median_km": 3.133818556498337,
    "dfd_tempgeo": 13.716975970365851,
    "dfd_refined": 9.762242594841643,
}
RESOLUTION_KM = 4.0
BUDGET_S = 600.0


def record(n, title, ok, detail=""):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def unit_rows(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    r = np.random.default_rng(11)
    x = fuse_rows(r.normal(size=(4, 4)), r.normal(size=(4, 4)))
    errs = {}
    tg = TempGeo(TempGeoConfig(width=8, heads=2, ff_mult=2, zero_init=False), np.random.default_rng(0),
                 np.float64).eval()
    errs["tempgeo"] = grad_check(lambda: projection_loss(tg(x)), tg.parameters())
    proj = FrameProjection(8, np.random.default_rng(1), hidden=(12, 10), out_dim=6, dtype=np.float64)
    errs["projection"] = grad_check(lambda: projection_loss(proj(x)), proj.parameters())
    enc = LocationEncoder(np.random.default_rng(2), rff_dim=6, hidden=10, out_dim=8, dtype=np.float64)
    lat, lon = np.array([10.0, -33.0, 51.5]), np.array([20.0, 151.0, -0.1])
    errs["location_heads"] = grad_check(lambda: projection_loss(enc(lat, lon)), enc.parameters())
    ref = GeoRefiner(GeoRefinerConfig(width=8, heads=2, ff_mult=2, zero_init=False), np.random.default_rng(3),
                     np.float64).eval()
    frames, queries = r.normal(size=(4, 8)), r.normal(size=(4, 8))
    errs["georefiner"] = grad_check(lambda: projection_loss(ref(frames, queries)), ref.parameters())
    V = Tensor(unit_rows(5, 8, 0), requires_grad=True)
    G = Tensor(unit_rows(5, 8, 1), requires_grad=True)
    errs["contrastive"] = grad_check(lambda: contrastive_loss(V, G, 2.5), [V, G])
    Gp = Tensor(unit_rows(6, 8, 2), requires_grad=True)
    Gt = unit_rows(6, 8, 3)
    errs["hinge"] = grad_check(
        lambda: weighted_hinge_loss(Gp, Gt, video_level_pool(Gp, [2, 4]), video_level_pool(Gt, [2, 4])), [Gp])
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    record(1, "finite-difference gradients", worst < 1e-3 and elapsed < 60.0,
           f"worst rel err {worst:.2e} over {len(errs)} components, {elapsed:.1f} s")


def test_criterion_2_dfd_oracle():
    r = np.random.default_rng(42)
    worst = 0.0
    for _ in range(200):
        a = r.normal(size=(r.integers(1, 7), 2))
        b = r.normal(size=(r.integers(1, 7), 2))
        worst = max(worst, abs(discrete_frechet(a, b, metric="planar") - brute_frechet(a, b)))
    record(2, "DFD dynamic program equals exhaustive coupling search", worst <= 1e-9,
           f"max abs diff {worst:.1e} over 200 pairs")


def test_criterion_3_loss_identities():
    checks = {}
    for n in (2, 8, 33):
        V = np.ones((n, 4)) / 2.0
        checks[f"lnN[{n}]"] = abs(float(contrastive_loss(V, V, 1.0).data) - math.log(n))
    Q, _ = np.linalg.qr(np.random.default_rng(6).normal(size=(4, 4)))
    # Orthonormal rows give G'G^T = I at both frame and video level.
    checks["hinge_identity"] = abs(float(weighted_hinge_loss(Q, Q, Q, Q).data))
    eye = np.eye(2)
    checks["contrastive_2x2"] = abs(float(contrastive_loss(eye, eye, 1.0).data) - math.log1p(math.exp(-1.0)))
    half = np.sqrt(0.5) * eye
    checks["hinge_2x2_diag"] = abs(float(hinge_term(Tensor(half), Tensor(half), HingeWeights()).data) - 0.25)
    Gp = np.array([[1.0, 0.3], [0.3, 1.0]])
    checks["hinge_2x2_offdiag"] = abs(float(weighted_hinge_loss(Gp, eye, eye, eye).data) - 1.8)
    worst = max(checks.values())
    record(3, "loss identities and 2x2 hand cases", worst <= 1e-6, f"max deviation {worst:.1e}")


def test_criterion_4_geodesy():
    h = 1e-5
    ratios = []
    for lat in (0, 15, 30, -30, 45, 60, -60, 75, 85, -85):
        phi, lam = math.radians(lat), 0.3

        def f(ph, la):
            return np.array(equal_earth(math.degrees(ph), math.degrees(la)))

        dphi = (f(phi + h, lam) - f(phi - h, lam)) / (2 * h)
        dlam = (f(phi, lam + h) - f(phi, lam - h)) / (2 * h)
        ratios.append(abs(dphi[0] * dlam[1] - dphi[1] * dlam[0]) / math.cos(phi))
    spread = float(np.ptp(ratios) / np.mean(ratios))
    deg = haversine_km(GpsPoint(0, 0), GpsPoint(0, 1))
    record(4, "equal-area Jacobian and haversine", spread < 1e-5 and abs(deg - 111.1951) <= 1e-3,
           f"Jacobian ratio spread {spread:.1e}, one equatorial degree {deg:.4f} km")


def test_criterion_5_gallery():
    km = math.pi * EARTH_RADIUS_KM / 180.0
    e = RegionExtent(0.0, (10.0 + 1e-9) / km, 0.0, (20.0 + 1e-9) / km, resolution=0.5)
    n_lat, n_lon = grid_shape(e)
    count = len(build_grid(e)[0])
    fence = e.formula_count() == 800 and abs(count - 800) <= n_lat + n_lon + 1

    c = RegionExtent(40.0, 40.2, -74.3, -74.0, resolution=0.5)
    lat, lon = build_grid(c)
    r = np.random.default_rng(0)
    qlat, qlon = r.uniform(c.lat_min, c.lat_max, 1000), r.uniform(c.lon_min, c.lon_max, 1000)
    _, cand = cKDTree(np.column_stack([lat, lon])).query(np.column_stack([qlat, qlon]), k=8)
    cover = float(haversine(qlat[:, None], qlon[:, None], lat[cand], lon[cand]).min(axis=1).max())
    bound = 0.5 * math.sqrt(2) / 2 * 1.05

    fine = len(build_grid(RegionExtent(40.0, 41.0, -75.0, -74.0, resolution=0.5))[0])
    coarse = len(build_grid(RegionExtent(40.0, 41.0, -75.0, -74.0, resolution=1.0))[0])
    ratio = fine / coarse
    ok = fence and cover <= bound and abs(ratio - 4.0) <= 0.05 * 4.0
    record(5, "gallery count, covering and scaling", ok,
           f"step-5 count {count} vs formula 800, cover {cover:.4f} <= {bound:.4f} km, scaling {ratio:.3f}")


def test_criterion_6_noise_statistics():
    r0 = np.random.default_rng(0)
    lat, lon = 40 + np.cumsum(r0.normal(0, 0.01, 16)), -74 + np.cumsum(r0.normal(0, 0.01, 16))
    cfg = NoiseConfig()
    rng = stream(42, "acceptance-noise")
    collapsed, jit_lo, jit_hi, shift_lo, shift_hi = 0, math.inf, -math.inf, math.inf, -math.inf
    for _ in range(10_000):
        c = corrupt_coords(lat, lon, cfg, rng)
        shift_lo, shift_hi = min(shift_lo, c.shift.min()), max(shift_hi, c.shift.max())
        if c.collapsed:
            collapsed += 1
            continue
        dev = np.abs(np.concatenate([c.lat - (lat + c.shift[0]), c.lon - (lon + c.shift[1])]))
        jit_lo, jit_hi = min(jit_lo, dev.min()), max(jit_hi, dev.max())
    frac = collapsed / 10_000
    ok = (abs(frac - 0.10) <= 0.01 and jit_lo >= 0.001 - 1e-12 and jit_hi <= 0.02 + 1e-12
          and shift_lo >= -0.2 and shift_hi <= 0.2)
    record(6, "coordinate noise statistics", ok,
           f"collapse {frac:.4f}, jitter [{jit_lo:.4f}, {jit_hi:.4f}], shift [{shift_lo:.4f}, {shift_hi:.4f}]")


@pytest.fixture(scope="module")
def benchmark():
    """Seed-42 synthetic benchmark with toy dims, run once for criteria 7 and 8."""
    t0 = time.perf_counter()
    train, val = generate_synthetic(SyntheticWorldConfig(), seed=42)
    gen_s = time.perf_counter() - t0
    with deterministic_mode():
        table, details = ablation_harness(train, val, toy_model_config(train, seed=42), TrainConfig.toy(1, seed=42),
                                          TrainConfig.toy(2, seed=42), resolution_km=RESOLUTION_KM)
        model = details["model"]
        t1 = time.perf_counter()
        gallery = probe_gallery(model, train, RESOLUTION_KM)
        retrieval = retrieval_probe(model, val, gallery)
        denoise = denoise_probe(model, val, gallery, NoiseConfig(), seed=42)
        probe_s = time.perf_counter() - t1
    # One benchmark pipeline: data, one phase-1 run, phase 2, probes. The ablation's extra phase-1 runs are excluded.
    seconds = gen_s + details["seconds"]["phase1"] + details["seconds"]["phase2"] + probe_s
    return {"table": table, "retrieval": retrieval, "denoise": denoise, "seconds": seconds}


def _pinned(name, value, tol):
    return abs(value - PINNED[name]) <= tol


def test_criterion_7_synthetic_benchmark(benchmark):
    ret, den, sec = benchmark["retrieval"], benchmark["denoise"], benchmark["seconds"]
    print(f"benchmark values: top1={ret['top1']!r} within_2res={ret['within_2res']!r} "
          f"corrupted={den['corrupted_median_km']!r} refined={den['refined_median_km']!r}")
    ok = (ret["top1"] >= 10 * ret["random_top1"] and ret["within_2res"] >= 0.90
          and den["refined_median_km"] < den["corrupted_median_km"] and sec <= BUDGET_S)
    # Discrete frame counts can move slightly across BLAS builds, hence the tolerances.
    pinned = (_pinned("top1", ret["top1"], 0.02) and _pinned("within_2res", ret["within_2res"], 0.02)
              and _pinned("corrupted_median_km", den["corrupted_median_km"], 0.05 * den["corrupted_median_km"])
              and _pinned("refined_median_km", den["refined_median_km"], 0.05 * den["refined_median_km"]))
    record(7, "seed-42 synthetic benchmark", ok and pinned,
           f"top1 {ret['top1']:.3f} vs random {ret['random_top1']:.5f}, within {2 * RESOLUTION_KM:g} km "
           f"{ret['within_2res']:.3f}, median corrupted {den['corrupted_median_km']:.2f} -> refined "
           f"{den['refined_median_km']:.2f} km, {sec:.0f} s")


def test_criterion_8_ablation(benchmark):
    table = benchmark["table"]
    md = table.to_markdown().splitlines()
    structure = (list(table.rows) == list(ABLATION_ROWS)
                 and all(list(table.rows[r]) == list(ABLATION_COLUMNS) for r in ABLATION_ROWS)
                 and md[0] == "| configuration | " + " | ".join(ABLATION_COLUMNS) + " |"
                 and [line.split("|")[1].strip() for line in md[2:5]] == list(ABLATION_ROWS))
    dfd_tg, dfd_full = table.rows["TempGeo"]["dfd"], table.rows["TempGeo+GeoRefiner"]["dfd"]
    print(f"ablation values: dfd_tempgeo={dfd_tg!r} dfd_refined={dfd_full!r}")
    pinned = _pinned("dfd_tempgeo", dfd_tg, 0.05 * dfd_tg) and _pinned("dfd_refined", dfd_full, 0.05 * dfd_full)
    ok = structure and table.bypass_equivalent is True and dfd_full <= dfd_tg and pinned
    record(8, "ablation table", ok,
           f"bypass bit-equal {table.bypass_equivalent}, DFD {dfd_tg:.2f} -> {dfd_full:.2f} km")


def test_criterion_9_determinism_and_round_trips(tmp_path):
    cfg = SyntheticWorldConfig(sequences=16, val_sequences=4, frames_min=6, frames_max=8, d_clip=4, d_dino=4)
    train, _ = generate_synthetic(cfg, seed=42)
    p1 = TrainConfig.toy(1, epochs=2, batch=4, frames=6, warmup_steps=2)
    p2 = TrainConfig.toy(2, epochs=2, batch=4, frames=6, warmup_steps=2)
    blobs = []
    for run in range(2):
        with deterministic_mode():
            model, _ = train_phase1(train, p1, model_cfg=tiny_model_config(), probe=False)
            model, _ = train_phase2(train, p2, model, probe=False)
        blobs.append(model.save(tmp_path / f"run{run}.vtck", 2).read_bytes())
    identical = blobs[0] == blobs[1]

    back, _ = VidTagModel.load(tmp_path / "run0.vtck")
    ckpt_ok = all(np.array_equal(back.state_dict()[k], v) for k, v in model.state_dict().items())
    r = np.random.default_rng(1)
    raw = {"w": r.normal(size=(3, 5)).astype(np.float32), "s": np.float32(0.5), "e": np.zeros((0, 4), np.float32)}
    save_tensors(tmp_path / "raw.vtck", raw)
    loaded = load_tensors(tmp_path / "raw.vtck")
    ckpt_ok = ckpt_ok and all(loaded[k].shape == np.shape(v) and np.array_equal(loaded[k], v) for k, v in raw.items())

    res = RetrievalResult("seq-a", np.arange(5), 40 + r.normal(size=5) * 0.1, -74 + r.normal(size=5) * 0.1,
                          np.arange(5), r.uniform(size=5), "refined")
    export_predictions([res], tmp_path / "p.csv")
    rows = read_predictions(tmp_path / "p.csv")
    pred_ok = (np.array_equal([x[2] for x in rows], res.lat) and np.array_equal([x[3] for x in rows], res.lon)
               and np.array_equal([x[4] for x in rows], res.score) and {x[5] for x in rows} == {"refined"})

    G, Q = unit_rows(3000, 16, 0), unit_rows(1000, 16, 1)
    want_i, want_s = naive_topk(Q, G, 5)
    got_i, got_s = topk_batch(Q, G, 5, workers=2, block=700, chunk=97)
    scan_ok = np.array_equal(got_i, want_i) and np.allclose(got_s, want_s, atol=1e-6)
    record(9, "determinism and round trips", identical and ckpt_ok and pred_ok and scan_ok,
           f"checkpoints identical {identical}, checkpoint round trip {ckpt_ok}, predictions round trip {pred_ok}, "
           f"flat scan == naive {scan_ok}")
