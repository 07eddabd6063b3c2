import json
import time

import numpy as np
import pytest

from conftest import tiny_model_config
from vidtag.errors import FormatError, ShapeError
from vidtag.frames import FrameSequence
from vidtag.gallery import RegionExtent, build_gallery
from vidtag.model import VidTagModel
from vidtag.retrieval import (RetrievalResult, export_predictions, infer_sequence, naive_topk, read_predictions,
                              topk_batch)


def unit(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def test_blocked_scan_matches_naive_oracle():
    G, Q = unit(3000, 16, 0), unit(1000, 16, 1)
    ref_idx, ref_val = naive_topk(Q, G, 5)
    for workers, block, chunk in [(1, 65536, 256), (4, 700, 97)]:
        idx, val = topk_batch(Q, G, 5, workers=workers, block=block, chunk=chunk)
        np.testing.assert_array_equal(idx, ref_idx)
        np.testing.assert_allclose(val, ref_val, atol=1e-12)
    idx1, _ = topk_batch(Q, G, 1, workers=3, block=512, chunk=64)
    np.testing.assert_array_equal(idx1[:, 0], ref_idx[:, 0])


def test_ties_go_to_lower_index():
    G = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    for block in (1, 2, 4):
        idx, val = topk_batch([[1.0, 0.0]], G, 3, block=block)
        assert idx[0].tolist() == [0, 2, 3]
        idx, _ = topk_batch([[1.0, 0.0]], G, 1, block=block)
        assert idx[0, 0] == 0


def test_self_query_and_full_ranking(caplog):
    G = unit(20, 8, 2)
    idx, val = topk_batch(G[7], G, 1)
    assert idx[0, 0] == 7 and val[0, 0] == pytest.approx(1.0, abs=1e-6)
    idx, val = topk_batch(G[3], G, 50)
    assert "clamping" in caplog.text
    assert sorted(idx[0].tolist()) == list(range(20))
    assert np.all(np.diff(val[0]) <= 0)
    with pytest.raises(ShapeError):
        topk_batch(np.zeros((1, 3)), G)


def test_scan_time_is_linear_in_gallery_size():
    Q = unit(64, 64, 3)
    small, large = unit(40_000, 64, 4), unit(400_000, 64, 5)

    def best_time(G):
        times = []
        for _ in range(5):
            t = time.perf_counter()
            topk_batch(Q, G, 1, block=8192)
            times.append(time.perf_counter() - t)
        return min(times)

    best_time(small)
    ratio = best_time(large) / best_time(small)
    assert 10 * 0.8 <= ratio <= 10 * 1.2


@pytest.fixture
def tiny_setup():
    model = VidTagModel(tiny_model_config()).eval()
    gallery = build_gallery([RegionExtent(40.0, 40.05, -74.05, -74.0, resolution=1.0)]).embed(model)
    r = np.random.default_rng(0)
    T = 5
    seq = FrameSequence("s", np.arange(T), 40.0 + r.uniform(0, 0.05, T), -74.0 + r.uniform(0, 0.05, T),
                        r.normal(size=(T, 4)).astype(np.float32), r.normal(size=(T, 4)).astype(np.float32))
    return model, gallery, seq


def test_identity_refiner_reproduces_initial(tiny_setup):
    model, gallery, seq = tiny_setup
    assert model.cfg.refiner.zero_init
    initial, refined = infer_sequence(seq, model, gallery)
    np.testing.assert_array_equal(initial.index, refined.index)
    assert refined.stage == "refined" and len(refined) == 5
    assert np.all(initial.index < len(gallery)) and np.all(np.abs(initial.score) <= 1 + 1e-6)


def test_single_frame_sequence(tiny_setup):
    model, gallery, seq = tiny_setup
    one = FrameSequence("o", np.arange(1), seq.lat[:1], seq.lon[:1], seq.clip[:1], seq.dino[:1])
    a, b = infer_sequence(one, model, gallery)
    assert len(a) == len(b) == 1


def test_inference_requires_embeddings(tiny_setup):
    model, gallery, seq = tiny_setup
    gallery.embeddings = None
    with pytest.raises(ValueError):
        infer_sequence(seq, model, gallery)


def result(n, sid="s", stage="initial"):
    r = np.random.default_rng(n)
    return RetrievalResult(sid, np.arange(n), 40 + r.uniform(0, 1, n), -74 + r.uniform(0, 1, n), np.arange(n),
                           r.uniform(-1, 1, n), stage)


def test_export_round_trip(tmp_path):
    res = [result(3), result(1, "t", "refined")]
    export_predictions(res, tmp_path / "p.csv", tmp_path / "p.geojson")
    rows = read_predictions(tmp_path / "p.csv")
    assert len(rows) == 4
    np.testing.assert_array_equal([r[2] for r in rows[:3]], res[0].lat)
    np.testing.assert_array_equal([r[3] for r in rows[:3]], res[0].lon)
    geo = json.loads((tmp_path / "p.geojson").read_text())
    line, point = geo["features"]
    assert line["geometry"]["type"] == "LineString" and len(line["geometry"]["coordinates"]) == 3
    assert point["geometry"]["type"] == "Point"


def test_empty_export_and_bad_files(tmp_path):
    export_predictions([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == "seq_id,frame_idx,pred_lat,pred_lon,score,stage"
    assert read_predictions(tmp_path / "e.csv") == []
    (tmp_path / "b.csv").write_text("seq_id,frame_idx,pred_lat,pred_lon,score,stage\ns,0,1,2,0.5,final\n")
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "b.csv")
    (tmp_path / "h.csv").write_text("a,b\n")
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "h.csv")
