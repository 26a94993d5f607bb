import json
import os

import numpy as np
import pytest

from domainmap import datasets as ds
from domainmap.degradation import BicubicDown, Blur, DegradationSpec, Noise
from domainmap.tensor_core import ShapeError, Tensor


@pytest.mark.parametrize("bitdepth", [8, 16])
def test_png_round_trip_quantization(tmp_path, rng, bitdepth):
    img = rng.random((3, 9, 7)).astype(np.float32)
    path = str(tmp_path / "a.png")
    ds.write_png(path, img, bitdepth)
    back = ds.read_png(path)
    assert back.shape == (3, 9, 7) and back.dtype == np.float32
    assert np.abs(back - img).max() <= 0.5 / (2**bitdepth - 1) + 1e-6


def test_png_encoding_deterministic(rng):
    img = rng.random((1, 3, 5, 5))
    assert ds.encode_png(img) == ds.encode_png(img.copy())


def test_load_dir_skips_corrupt_files(tmp_path, rng):
    ds.write_png(str(tmp_path / "b.png"), rng.random((3, 4, 4)))
    ds.write_png(str(tmp_path / "a.png"), rng.random((3, 4, 4)))
    (tmp_path / "c.png").write_bytes(b"not a png at all")
    (tmp_path / "notes.txt").write_text("ignored")
    manifest = {}
    recs = ds.load_dir(str(tmp_path), manifest=manifest)
    assert [r.id for r in recs] == ["a", "b"]
    assert list(manifest["skipped"]) == ["c.png"]


def test_load_dir_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ds.load_dir(str(tmp_path / "missing"))
    with pytest.raises(ValueError):
        ds.load_dir(str(tmp_path))


def test_synth_corpus_deterministic_and_prefix_stable():
    a = ds.synth_corpus(4, 64, 7)
    b = ds.synth_corpus(2, 64, 7, start=2)
    assert [r.id for r in a] == [f"synth7_{i:04d}" for i in range(4)]
    np.testing.assert_array_equal(a[2].pixels.data, b[0].pixels.data)
    np.testing.assert_array_equal(a[0].pixels.data, ds.synth_corpus(1, 64, 7)[0].pixels.data)
    for r in a:
        x = r.pixels.data
        assert x.shape == (1, 3, 64, 64) and x.min() >= 0.05 - 1e-6 and x.max() <= 0.95 + 1e-6


def test_synth_images_have_detail():
    # enough high-frequency content that x4 bicubic loses something
    x = ds.synth_corpus(1, 64, 0)[0].pixels.data
    assert np.abs(np.diff(x, axis=-1)).mean() > 0.005


def test_split_holds_out_tail():
    recs = ds.synth_corpus(5, 64, 0)
    tr, te = ds.split(recs, 2)
    assert [r.id for r in te] == [recs[3].id, recs[4].id] and len(tr) == 3
    with pytest.raises(ValueError):
        ds.split(recs, 5)


def test_make_pairs_shapes_and_domains():
    gt = ds.synth_corpus(2, 64, 0)
    pairs = ds.make_pairs(gt, DegradationSpec([Blur(7), BicubicDown(4), Noise(40)]), 4)
    assert len(pairs) == 2 and pairs.scale == 4 and pairs.target_domain == "GT"
    inp, tgt = pairs.array_pairs()[0]
    assert inp.shape == (3, 16, 16) and tgt.shape == (3, 64, 64)
    m = ds.make_pairs(gt, DegradationSpec([BicubicDown(4)]), 2, target_spec=DegradationSpec([BicubicDown(2)]))
    assert m.input_domain == "bicubic_down4" and m.target_domain == "bicubic_down2"
    with pytest.raises(ValueError, match="scale mismatch"):
        ds.make_pairs(gt, DegradationSpec([BicubicDown(4)]), 2)


def test_noise_differs_between_images_but_not_runs():
    gt = ds.synth_corpus(2, 64, 0)
    flat = [ImageLike(r, 0.5) for r in gt]
    spec = DegradationSpec([Noise(30, seed=1)])
    a = ds.degrade_records(flat, spec)
    b = ds.degrade_records(flat, spec)
    np.testing.assert_array_equal(a[0].pixels.data, b[0].pixels.data)
    assert not np.array_equal(a[0].pixels.data, a[1].pixels.data)


def ImageLike(rec, value):
    return ds.ImageRecord(rec.id, Tensor(np.full(rec.pixels.shape, value, np.float32)), "flat")


def test_record_shape_check():
    with pytest.raises(ShapeError):
        ds.ImageRecord("x", Tensor(np.zeros((1, 1, 4, 4))), "")


def test_save_records_writes_manifest(tmp_path):
    recs = ds.synth_corpus(2, 64, 3)
    ds.save_records(recs, str(tmp_path))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert sorted(manifest) == [r.id for r in recs]
    assert sorted(os.listdir(tmp_path)) == ["manifest.json", "synth3_0000.png", "synth3_0001.png"]
