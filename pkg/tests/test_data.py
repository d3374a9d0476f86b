import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchbmi.data import (INCH_TO_M, LBS_TO_KG, ManifestError, ManifestRecord, compute_bmi,
                           inches_to_m, lbs_to_kg, load_samples, parse_manifest, prepare,
                           read_manifest, split_dataset, to_frame, write_rejections)
from patchbmi.imaging import Image
from patchbmi.landmarks import LandmarkSet
from patchbmi.synthetic import write_synthetic_dataset

HEADER = "image_path,landmarks_path,bmi,weight_kg,height_m,weight_lbs,height_in,split\n"


def test_compute_bmi():
    assert compute_bmi(70, 1.75) == pytest.approx(22.857, abs=1e-3)


def test_imperial_units_match_metric():
    imperial = compute_bmi(lbs_to_kg(154.32), inches_to_m(68.9))
    assert abs(imperial - compute_bmi(70, 1.75)) < 1e-2
    assert LBS_TO_KG == 0.45359237 and INCH_TO_M == 0.0254


@pytest.mark.parametrize("w, h", [(70, 0), (0, 1.7), (-1, 1.7)])
def test_compute_bmi_rejects_non_positive(w, h):
    with pytest.raises(ValueError):
        compute_bmi(w, h)


def test_manifest_rows():
    text = HEADER + (
        "a.pgm,a.txt,27.8,,,,,\n"
        "b.pgm,b.txt,,70,1.75,,,train\n"
        "c.pgm,c.txt,,,,154.32,68.9,\n"
        "d.pgm,d.txt,5,,,,,\n"
        "e.pgm,e.txt,,70,,,,\n"
        "f.pgm,f.txt,25,,,,,holdout\n"
    )
    m = parse_manifest(text)
    assert [r.image_path for r in m.records] == ["a.pgm", "b.pgm", "c.pgm"]
    assert m.records[0].bmi == 27.8
    assert m.records[1].bmi == pytest.approx(22.857, abs=1e-3)
    assert m.records[1].split == "train"
    assert m.records[2].bmi == pytest.approx(22.857, abs=1e-2)
    assert [r.line for r in m.rejections] == [5, 6, 7]
    assert "range" in m.rejections[0].reason


def test_manifest_missing_columns_rejected():
    with pytest.raises(ManifestError, match="bmi"):
        parse_manifest("image_path,landmarks_path\nx,y\n")
    with pytest.raises(ManifestError, match="landmarks_path"):
        parse_manifest("image_path,bmi\nx,25\n")


def test_manifest_bom_and_split_filter():
    m = parse_manifest("\ufeffimage_path,landmarks_path,bmi,split\na,b,20,val\nc,d,21,test\n")
    assert len(m.records) == 2
    assert [r.image_path for r in m.split("val")] == ["a"]
    assert len(m.split(None)) == 2


def test_write_rejections(tmp_path):
    m = parse_manifest(HEADER + "d.pgm,d.txt,5,,,,,\n")
    write_rejections(m.rejections, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "line,reason" and lines[1].startswith("2,")


def recs(n, split=None):
    return [ManifestRecord(f"{i}.pgm", f"{i}.txt", 20.0 + i % 10, split=split) for i in range(n)]


def test_split_sizes():
    tr, va, te = split_dataset(recs(100), seed=3)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)


def test_split_seeded_and_disjoint():
    a = split_dataset(recs(37), seed=11)
    b = split_dataset(recs(37), seed=11)
    assert a == b
    names = [r.image_path for part in a for r in part]
    assert sorted(names) == sorted(r.image_path for r in recs(37))


def test_split_honours_labels():
    labelled = recs(5, "test") + recs(3, "train")
    tr, va, te = split_dataset(labelled, seed=0)
    assert tr == recs(3, "train") and te == recs(5, "test") and va == []


def test_split_warns_on_empty_partition(caplog):
    with caplog.at_level(logging.WARNING):
        split_dataset(recs(3), ratios=(0.9, 0.05, 0.05))
    assert "empty" in caplog.text


@given(n=st.integers(0, 200), seed=st.integers(0, 1000))
def test_split_partitions_cover_everything(n, seed):
    parts = split_dataset(recs(n), seed=seed)
    assert sum(len(p) for p in parts) == n
    ids = [id(r) for p in parts for r in p]
    assert len(set(ids)) == n


def test_to_frame_half_pixel():
    pts = np.zeros((68, 2))
    pts[0] = (0.0, 0.0)
    pts[1] = (99.5, 49.5)
    out = to_frame(LandmarkSet(pts), 100, 50, 200, 200).points
    np.testing.assert_allclose(out[0], (0.5, 1.5))
    np.testing.assert_allclose(out[1], (199.5, 199.5))


def test_prepare_keeps_landmarks_on_features():
    # a bright dot at a landmark stays under the mapped landmark after resizing
    px = np.zeros((112, 112), np.uint8)
    px[40:44, 60:64] = 255
    pts = np.full((68, 2), 10.0)
    pts[0] = (61.5, 41.5)
    img, lm = prepare(Image(px), LandmarkSet(pts))
    x, y = lm[0]
    assert img.pixels[int(round(y)), int(round(x)), 0] == 255


def test_load_synthetic_manifest(tmp_path):
    path = write_synthetic_dataset(tmp_path, n=4, seed=1, with_split=True)
    m = read_manifest(path)
    assert len(m.records) == 4 and not m.rejections
    samples, failures = load_samples(m.records, m.base_dir)
    assert len(samples) == 4 and not failures
    assert samples[0].image.pixels.shape == (224, 224, 1)


def test_load_samples_reports_missing_files(tmp_path):
    m = parse_manifest("image_path,landmarks_path,bmi\nnope.pgm,nope.txt,25\n", tmp_path)
    samples, failures = load_samples(m.records, m.base_dir)
    assert samples == [] and len(failures) == 1
