import itertools
import struct

import numpy as np
import pytest

from conftest import tiny_model_config
from helpers import grad_check, projection_loss
from vidtag.errors import FormatError, ShapeError
from vidtag.frames import (FrameDataset, FrameFeatureRecord, FrameProjection, FrameSequence, TempGeo, TempGeoConfig,
                           fuse, fuse_rows, manifest_path_for, positional_embed, project_frames, read_manifest,
                           read_vtag, write_vtag)
from vidtag.geodesy import GpsPoint
from vidtag.model import VidTagModel


def record(clip, dino):
    return FrameFeatureRecord(np.asarray(clip, float), np.asarray(dino, float), GpsPoint(0, 0), "s", 0)


def test_fuse_examples():
    z = fuse(record([1.0, 0.0], [0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(z, [1, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        fuse(record([0.0, 0.0], [0.0]))
    r = np.random.default_rng(0)
    z = fuse(record(r.normal(size=768), r.normal(size=1024)), dims=(768, 1024))
    assert z.shape == (1792,) and abs(np.linalg.norm(z) - 1.0) < 1e-6
    with pytest.raises(ShapeError):
        fuse(record(np.ones(3), np.ones(4)), dims=(768, 1024))


def test_positional_embed():
    p = positional_embed(1, 6)
    np.testing.assert_array_equal(p[0, 0::2], 0.0)
    np.testing.assert_array_equal(p[0, 1::2], 1.0)
    table = positional_embed(10_000, 16)
    assert np.abs(table).max() <= 1.0
    assert len(np.unique(np.round(table, 12), axis=0)) == 10_000
    assert positional_embed(3, 7).shape == (3, 7)
    with pytest.raises(ValueError):
        positional_embed(0, 4)


def tempgeo(zero_init=False, dtype=np.float64, **kw):
    return TempGeo(TempGeoConfig(width=8, heads=2, ff_mult=2, zero_init=zero_init, **kw),
                   np.random.default_rng(0), dtype).eval()


def test_tempgeo_single_frame_and_identity():
    x = fuse_rows(np.random.default_rng(1).normal(size=(1, 4)), np.random.default_rng(2).normal(size=(1, 4)))
    out = tempgeo()(x)
    assert out.shape == (1, 8) and np.all(np.isfinite(out.data))
    x = fuse_rows(np.random.default_rng(1).normal(size=(5, 4)), np.random.default_rng(2).normal(size=(5, 4)))
    ident = tempgeo(zero_init=True, positions=False, dtype=np.float32)
    ident.train()
    out = ident(x, rng=np.random.default_rng(0))
    assert np.array_equal(out.data, x.astype(np.float32))


def test_tempgeo_order_and_nonlocality():
    r = np.random.default_rng(3)
    x = fuse_rows(r.normal(size=(3, 4)), r.normal(size=(3, 4)))
    tg = tempgeo()
    base = tg(x).data
    perm = [2, 0, 1]
    assert not np.allclose(tg(x[perm]).data, base[perm])
    y = x.copy()
    y[2] += r.normal(size=8) * 0.5
    changed = tg(y).data
    assert not np.allclose(changed[0], base[0])


def test_tempgeo_batched_matches_single():
    r = np.random.default_rng(4)
    x = r.normal(size=(2, 3, 8))
    tg = tempgeo()
    batched = tg(x).data
    for b in range(2):
        np.testing.assert_allclose(batched[b], tg(x[b]).data, atol=1e-12)


def test_tempgeo_and_projection_gradients():
    r = np.random.default_rng(5)
    x = fuse_rows(r.normal(size=(3, 4)), r.normal(size=(3, 4)))
    tg = tempgeo()
    assert grad_check(lambda: projection_loss(tg(x)), tg.parameters()) < 1e-3
    proj = FrameProjection(8, np.random.default_rng(1), hidden=(12, 10), out_dim=6, dtype=np.float64)
    assert grad_check(lambda: projection_loss(proj(x)), proj.parameters()) < 1e-3


def test_pipeline_gradients_through_fuse_tempgeo_project():
    model = VidTagModel(tiny_model_config(), dtype=np.float64).astype(np.float64).eval()
    r = np.random.default_rng(6)
    x = fuse_rows(r.normal(size=(3, 4)), r.normal(size=(3, 4)))
    params = model.group("tempgeo") + model.group("proj")
    assert grad_check(lambda: projection_loss(model.frame_embeddings(x)), params) < 1e-3


def test_projection_shapes_and_degenerate_rows():
    proj = FrameProjection(16, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(7, 16))
    out, flags = project_frames(proj, x)
    assert out.shape == (7, 512) and not flags.any()
    np.testing.assert_allclose(np.linalg.norm(out.data.astype(np.float64), axis=1), 1.0, atol=1e-6)
    for p in proj.parameters():
        p.data[...] = 0.0
    out, flags = project_frames(proj, x)
    assert flags.all() and np.all(out.data == 0.0)


def small_dataset(seed=0):
    r = np.random.default_rng(seed)
    seqs = []
    for sid, n in [("alpha", 3), ("beta-é", 1)]:
        seqs.append(FrameSequence(sid, np.arange(n) * 2, r.uniform(-10, 10, n), r.uniform(-10, 10, n),
                                  r.normal(size=(n, 3)).astype(np.float32), r.normal(size=(n, 5)).astype(np.float32)))
    return FrameDataset(3, 5, seqs)


def test_vtag_round_trip(tmp_path):
    ds = small_dataset()
    path = write_vtag(tmp_path / "d.vtag", ds)
    back = read_vtag(path)
    assert (back.d_clip, back.d_dino) == (3, 5)
    for a, b in zip(ds, back):
        assert a.seq_id == b.seq_id
        for field in ("frame_idx", "lat", "lon", "clip", "dino"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    rows = read_manifest(manifest_path_for(path))
    assert rows == list(ds.manifest_rows())


def test_vtag_bad_magic_and_truncation(tmp_path):
    path = write_vtag(tmp_path / "d.vtag", small_dataset())
    raw = path.read_bytes()
    (tmp_path / "bad.vtag").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        read_vtag(tmp_path / "bad.vtag")
    assert info.value.offset == 0
    (tmp_path / "short.vtag").write_bytes(raw[:-3])
    with pytest.raises(FormatError) as info:
        read_vtag(tmp_path / "short.vtag")
    assert info.value.offset is not None


def test_vtag_rejects_non_increasing_frames(tmp_path):
    ds = small_dataset()
    ds.sequences[0].frame_idx = np.array([0, 4, 4])
    path = write_vtag(tmp_path / "d.vtag", ds, manifest=False)
    with pytest.raises(FormatError, match="strictly increasing"):
        read_vtag(path)


def test_vtag_header_layout(tmp_path):
    path = write_vtag(tmp_path / "d.vtag", small_dataset(), manifest=False)
    raw = path.read_bytes()
    assert raw[:4] == b"VTAG"
    assert struct.unpack("<IIIQ", raw[4:24]) == (1, 3, 5, 4)
