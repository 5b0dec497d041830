import json
import os
import shutil

import numpy as np
import pytest

from morphreg.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_PRECONDITION, main
from morphreg.mesh import LandmarkSet, load_landmarks, load_mesh, save_landmarks, save_mesh


def run(*argv):
    return main([str(a) for a in argv])


def file_bytes(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))
            if os.path.isfile(os.path.join(d, f))}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "train", "--count", 18, "--seed-base", 1000) == EXIT_OK
    assert run("synth", "--out", root / "corpus", "--count", 10, "--seed-base", 2000) == EXIT_OK
    assert run("train", "--corpus", root / "train", "--out", root / "models") == EXIT_OK
    return root


def test_synth_writes_pairs_and_repeats(work, tmp_path):
    files = sorted(os.listdir(work / "corpus"))
    assert len([f for f in files if f.endswith(".ply")]) == 10
    assert len([f for f in files if f.endswith(".landmarks.json")]) == 10
    assert run("synth", "--out", tmp_path, "--count", 10, "--seed-base", 2000) == EXIT_OK
    assert file_bytes(tmp_path) == file_bytes(work / "corpus")


def test_synth_unwritable_dir(tmp_path, capsys):
    blocker = tmp_path / "plain_file"
    blocker.write_text("x")
    assert run("synth", "--out", blocker / "sub", "--count", 1) == EXIT_IO
    assert "cannot create output directory" in capsys.readouterr().err


def test_train_outputs_and_determinism(work, tmp_path):
    from morphreg.pca import load_model, save_model

    names = sorted(os.listdir(work / "models"))
    assert len([n for n in names if n != "training_report.json"]) == 6
    report = json.loads((work / "models" / "training_report.json").read_text())
    assert len(report["faces"]) == 18
    for n in names:
        if n == "training_report.json":
            continue
        save_model(load_model(work / "models" / n), tmp_path / n)
        assert (tmp_path / n).read_bytes() == (work / "models" / n).read_bytes()
    again = tmp_path / "again"
    assert run("train", "--corpus", work / "train", "--out", again) == EXIT_OK
    assert file_bytes(again) == file_bytes(work / "models")


def test_train_too_few_faces(work, capsys):
    assert run("train", "--corpus", work / "corpus", "--out", work / "never") == EXIT_PRECONDITION
    assert "k=16" in capsys.readouterr().err
    assert not (work / "never").exists()


def test_annotate_without_models(work, tmp_path):
    assert run("annotate", work / "corpus" / "face_2000.ply", "--models", tmp_path, "--out",
               tmp_path / "a") == EXIT_PRECONDITION


def test_annotate_cropped_ears(work, tmp_path):
    src = tmp_path / "crop"
    assert run("synth", "--out", src, "--count", 1, "--seed-base", 2030, "--no-ears") == EXIT_OK
    out = tmp_path / "ann"
    assert run("annotate", src, "--models", work / "models", "--out", out) == EXIT_OK
    lms = load_landmarks(out / "face_2030.landmarks.json")
    assert len(lms) == 15 and not any("Earlobe" in n for n in lms)
    summary = json.loads((out / "annotation_summary.json").read_text())
    assert summary["succeeded"] == 1
    assert sorted(summary["partial"]["face_2030"]) == ["Left Earlobe tip", "Right Earlobe tip"]


@pytest.fixture(scope="module")
def registered(work):
    out = work / "reg"
    assert run("register", "--reference", work / "train" / "face_1000.ply", "--corpus", work / "corpus",
               "--out", out, "--second-pass") == EXIT_OK
    return out


def test_register_ten_faces(registered):
    man = json.loads((registered / "manifest.json").read_text())
    ok = [e for e in man["samples"] if e["status"] == "ok"]
    assert len(ok) == 10
    ref = load_mesh(registered / "reference.ply")
    for e in ok:
        m = load_mesh(registered / e["mesh"])
        assert np.array_equal(m.triangles, ref.triangles)


def test_second_pass_outputs(registered):
    rep = json.loads((registered / "second_pass.json").read_text())
    assert rep["samples"] == 10 and np.isfinite(rep["mean_vertex_displacement_mm"])
    man2 = json.loads((registered / "pass2" / "manifest.json").read_text())
    assert sum(e["status"] == "ok" for e in man2["samples"]) == 10


def test_register_degenerate_reference(work, tmp_path, capsys):
    ref = tmp_path / "ref.ply"
    shutil.copy(work / "train" / "face_1000.ply", ref)
    truth = load_landmarks(work / "train" / "face_1000.landmarks.json")
    save_landmarks(LandmarkSet({n: [1.0, 2.0, 3.0] for n in truth}), tmp_path / "ref.landmarks.json")
    out = tmp_path / "reg"
    assert run("register", "--reference", ref, "--corpus", work / "corpus", "--out", out) == EXIT_NUMERICAL
    assert "reference unusable" in capsys.readouterr().err
    assert not out.exists()


def test_average_copies_and_single(registered, tmp_path):
    src = load_mesh(registered / "face_2000.ply")
    d = tmp_path / "copies"
    d.mkdir()
    samples = []
    for i in range(3):
        save_mesh(src, d / f"c{i}.ply")
        samples.append({"id": f"c{i}", "status": "ok", "mesh": f"c{i}.ply"})
    (d / "manifest.json").write_text(json.dumps({"samples": samples}))
    assert run("average", "--correspondence", d, "--out", tmp_path / "avg.ply") == EXIT_OK
    avg = load_mesh(tmp_path / "avg.ply")
    # the average lives in the centroid-centred GPA frame
    assert np.abs(avg.vertices - (src.vertices - src.vertices.mean(0))).max() < 1e-5
    assert np.abs(avg.colors - src.colors).max() < 1e-9
    (d / "manifest.json").write_text(json.dumps({"samples": samples[:1]}))
    assert run("average", "--correspondence", d, "--out", tmp_path / "one.ply") == EXIT_PRECONDITION


def test_average_corpus(registered, tmp_path):
    out = tmp_path / "avg.ply"
    assert run("average", "--correspondence", registered, "--out", out) == EXIT_OK
    info = json.loads((tmp_path / "avg.gpa.json").read_text())
    assert info["converged"] and len(info["samples"]) == 10
    assert load_mesh(out).n_vertices == load_mesh(registered / "reference.ply").n_vertices


def _offset_dir(src, dst, shift):
    dst.mkdir()
    for f in sorted(src.glob("*.landmarks.json")):
        lms = load_landmarks(f)
        save_landmarks(LandmarkSet({n: lms[n] + shift for n in lms}), dst / f.name)


@pytest.mark.parametrize("shift, expect", [(0.0, 0.0), (1.0, 1.0)])
def test_evaluate_analytic(work, tmp_path, shift, expect):
    pred = tmp_path / "pred"
    _offset_dir(work / "corpus", pred, np.array([shift, 0.0, 0.0]))
    rep_path = tmp_path / "report.json"
    assert run("evaluate", "--pred", pred, "--truth", work / "corpus", "--report", rep_path) == EXIT_OK
    rep = json.loads(rep_path.read_text())
    assert rep["faces"] == 10
    for row in rep["landmarks"].values():
        assert row["n"] == 10
        assert row["mean"] == pytest.approx(expect, abs=1e-12)
        assert row["sd"] == pytest.approx(0.0, abs=1e-12)
        assert row["rms"] == pytest.approx(expect, abs=1e-12)
    assert "Nose Tip" in (tmp_path / "report.txt").read_text()


def test_evaluate_no_shared_ids(work, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("evaluate", "--pred", empty, "--truth", work / "corpus", "--report",
               tmp_path / "r.json") == EXIT_PRECONDITION


def test_bad_config_override(work, tmp_path):
    assert run("--set", "pca.bogus=1", "synth", "--out", tmp_path, "--count", 1) == EXIT_PRECONDITION
