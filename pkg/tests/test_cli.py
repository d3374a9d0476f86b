import json
import subprocess
import sys

import numpy as np
import pytest

from patchbmi import __version__
from patchbmi.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from patchbmi.ensemble import load_bundle, save_bundle
from patchbmi.imaging import read_image, write_image
from patchbmi.landmarks import REGIONS, format_landmarks
from patchbmi.synthetic import make_face, write_synthetic_dataset

from conftest import stub_ensemble


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("ds"), n=12, seed=0)


@pytest.fixture(scope="module")
def stub_bundle(tmp_path_factory):
    return save_bundle(stub_ensemble([25] * 6), tmp_path_factory.mktemp("stub"))


@pytest.fixture
def face_files(tmp_path):
    img, lm = make_face(25.0, np.random.default_rng(4))
    write_image(img, tmp_path / "face.pgm")
    (tmp_path / "face.txt").write_text(format_landmarks(lm))
    return tmp_path / "face.pgm", tmp_path / "face.txt", lm


def train(capsys, dataset, out, *extra):
    return run(capsys, "train", "--manifest", dataset, "--out", out, "--max-epochs", 1,
               "--patience", 1, "--seed", 3, "--threads", 1, *extra)


def test_train_writes_loadable_bundle(capsys, dataset, tmp_path):
    code, out, _ = train(capsys, dataset, tmp_path / "m", "--json")
    assert code == EXIT_OK
    payload = json.loads(out)
    assert payload["param_count"] == 3_288_192
    assert (payload["n_train"], payload["n_val"]) == (8, 2)
    model = load_bundle(tmp_path / "m")
    assert model.parameter_count() == 3_288_192
    assert model.provenance["seed"] == 3 and model.provenance["version"] == __version__
    for r in REGIONS:
        lines = (tmp_path / "m" / f"history_{r}.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_mse,val_mse" and len(lines) == 2


def test_train_same_seed_same_bytes(capsys, dataset, tmp_path):
    for name in ("a", "b"):
        assert train(capsys, dataset, tmp_path / name)[0] == EXIT_OK
    for f in ["meta.json"] + [f"{r}.pbmi" for r in REGIONS]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_missing_out_is_usage_error(capsys, dataset):
    code, _, err = run(capsys, "train", "--manifest", dataset)
    assert code == EXIT_INVALID and "--out" in err


def test_train_with_empty_validation_is_invalid(capsys, tmp_path):
    path = write_synthetic_dataset(tmp_path / "ds", n=2, seed=0)
    code, _, err = train(capsys, path, tmp_path / "m")
    assert code == EXIT_INVALID and "validation" in err


def test_train_writes_rejection_report(capsys, tmp_path):
    path = write_synthetic_dataset(tmp_path / "ds", n=2, seed=0)
    path.write_text(path.read_text() + "x.pgm,x.txt,5\n")
    code, _, err = train(capsys, path, tmp_path / "m")
    assert code == EXIT_INVALID and "rejections.csv" in err
    lines = (tmp_path / "m" / "rejections.csv").read_text().splitlines()
    assert lines[0] == "line,reason" and lines[1].startswith("4,") and "range" in lines[1]


def test_predict_text_and_json(capsys, stub_bundle, face_files):
    img, lm, _ = face_files
    code, out, _ = run(capsys, "predict", "--model", stub_bundle, "--image", img, "--landmarks", lm)
    assert code == EXIT_OK and out.strip() == "bmi=25.000"
    code, out, _ = run(capsys, "predict", "--model", stub_bundle, "--image", img,
                       "--landmarks", lm, "--json")
    payload = json.loads(out)
    assert payload["bmi"] == 25.0 and list(payload["per_region"]) == list(REGIONS)


def test_predict_short_landmark_file(capsys, stub_bundle, face_files):
    img, lm_path, _ = face_files
    lines = lm_path.read_text().splitlines()
    lm_path.write_text("\n".join(lines[:67]) + "\n")
    code, _, err = run(capsys, "predict", "--model", stub_bundle, "--image", img,
                       "--landmarks", lm_path)
    assert code == EXIT_INVALID and "expected 68 landmarks, got 67" in err


def test_predict_degenerate_roi(capsys, stub_bundle, face_files):
    img, lm_path, lm = face_files
    pts = lm.points.copy()
    pts[8] = pts[2]
    lm_path.write_text("".join(f"{x} {y}\n" for x, y in pts))
    code, _, err = run(capsys, "predict", "--model", stub_bundle, "--image", img,
                       "--landmarks", lm_path)
    assert code == EXIT_RUNTIME and "chin" in err


def test_predict_missing_bundle(capsys, tmp_path, face_files):
    img, lm, _ = face_files
    code, _, err = run(capsys, "predict", "--model", tmp_path / "nothing", "--image", img,
                       "--landmarks", lm)
    assert code != EXIT_OK and err


def test_predict_corrupt_bundle(capsys, tmp_path, face_files):
    img, lm, _ = face_files
    bundle = save_bundle(stub_ensemble([25] * 6), tmp_path / "b")
    (bundle / "chin.pbmi").write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(capsys, "predict", "--model", bundle, "--image", img, "--landmarks", lm)
    assert code != EXIT_OK and "bad magic" in err


def test_evaluate_perfect_stub(capsys, stub_bundle, tmp_path):
    path = write_synthetic_dataset(tmp_path / "ds", n=3, seed=1, bmi_range=(25, 25))
    code, out, _ = run(capsys, "evaluate", "--model", stub_bundle, "--manifest", path, "--json",
                       "--csv", tmp_path / "r.csv", "--dataset", "synth")
    assert code == EXIT_OK
    rep = json.loads(out)["reports"][0]
    assert rep["mae"] == 0.0 and rep["n"] == 3 and rep["dataset"] == "synth"
    assert (tmp_path / "r.csv").read_text().startswith("dataset,split,n,mae,")
    code, out, _ = run(capsys, "evaluate", "--model", stub_bundle, "--manifest", path)
    assert "Training" in out and "0.00" in out


def test_cross_evaluate(capsys, stub_bundle, tmp_path):
    path = write_synthetic_dataset(tmp_path / "ds", n=2, seed=1, bmi_range=(27, 27))
    code, out, _ = run(capsys, "cross-evaluate", "--model", stub_bundle,
                       "--manifest", f"A={path}", "--manifest", f"B={path}")
    assert code == EXIT_OK and "Testing(A)" in out and "2.00" in out
    code, _, err = run(capsys, "cross-evaluate", "--model", stub_bundle, "--manifest", str(path))
    assert code == EXIT_INVALID and "LABEL=PATH" in err


def test_extract_patches(capsys, face_files, tmp_path):
    img, lm, _ = face_files
    code, out, _ = run(capsys, "extract-patches", "--image", img, "--landmarks", lm,
                       "--out", tmp_path / "p", "--json")
    assert code == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "p").iterdir())
    assert names == sorted(f"{r}.pgm" for r in REGIONS)
    assert read_image(tmp_path / "p" / "chin.pgm").pixels.shape[:2] == (32, 32)
    assert list(json.loads(out)["patches"]) == list(REGIONS)


def test_bench(capsys, stub_bundle, face_files):
    img, lm, _ = face_files
    code, out, _ = run(capsys, "bench", "--model", stub_bundle, "--image", img, "--landmarks", lm,
                       "--iterations", 2, "--warmup", 0, "--json")
    payload = json.loads(out)
    assert code == EXIT_OK and set(payload) == {"serial", "parallel"}
    assert payload["serial"]["param_count"] == 3_288_192
    code, out, _ = run(capsys, "bench", "--model", stub_bundle, "--image", img, "--landmarks", lm,
                       "--iterations", 1, "--warmup", 0, "--heads", "serial")
    assert "median" in out and "p95" in out and "iPhone 14" in out


def test_bench_zero_iterations(capsys, stub_bundle, face_files):
    img, lm, _ = face_files
    code, _, err = run(capsys, "bench", "--model", stub_bundle, "--image", img,
                       "--landmarks", lm, "--iterations", 0)
    assert code == EXIT_INVALID and "iterations" in err


def test_unknown_flag_and_command(capsys):
    assert run(capsys, "predict", "--bogus")[0] == EXIT_INVALID
    assert run(capsys, "frobnicate")[0] == EXIT_INVALID
    assert run(capsys)[0] == EXIT_INVALID


def test_help_and_version(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == EXIT_OK and "extract-patches" in out
    code, out, _ = run(capsys, "train", "--help")
    assert code == EXIT_OK and "--max-epochs" in out and "default: 200" in out
    code, out, _ = run(capsys, "--version")
    assert code == EXIT_OK and __version__ in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "patchbmi", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == __version__


def test_thread_count_validation(capsys, stub_bundle, face_files, monkeypatch):
    img, lm, _ = face_files
    argv = ["predict", "--model", stub_bundle, "--image", img, "--landmarks", lm]
    assert run(capsys, *argv, "--threads", 0)[0] == EXIT_INVALID
    monkeypatch.setenv("PATCHBMI_THREADS", "many")
    code, _, err = run(capsys, *argv)
    assert code == EXIT_INVALID and "PATCHBMI_THREADS" in err
    monkeypatch.setenv("PATCHBMI_THREADS", "2")
    assert run(capsys, *argv)[0] == EXIT_OK
