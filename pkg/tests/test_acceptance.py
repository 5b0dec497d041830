"""Acceptance criteria 1 to 10, one test each.

Every test records a PASS/FAIL line (shown in the "acceptance criteria"
section of the terminal summary) before asserting, so a failing criterion
still reports its measured value.
"""

import os
import warnings

import numpy as np
import pytest
import scipy.linalg

from morphreg.cli import EXIT_OK, main
from morphreg.mesh import (HEURISTIC_NAMES, SALIENT_NAMES, RigidTransform, TriangleMesh,
                           closest_point_on_surface, rotation_matrix)
from morphreg.nose import fit_sphere, locate_nose_tip, rid_statistic
from morphreg.pca import extract_patch, score_patch, train_landmark_model
from morphreg.pipeline import annotate
from morphreg.remesh import boundary_loops, inverse_parameterize, is_manifold, spherical_parameterize
from morphreg.synthetic import FaceParams, generate_face, random_params
from morphreg.gpa import average_face, gpa_align, procrustes_rotation
from morphreg.tps import apply_tps, register_surface, solve_tps


def random_motion(rng, max_deg=45.0, shift=40.0):
    return RigidTransform(rotation_matrix(*rng.uniform(-max_deg, max_deg, 3)), rng.normal(0, shift, 3))


def mean_errors(pred, corpus, names):
    """Per-landmark mean Euclidean error over the corpus, skipping absent predictions."""
    out = {}
    for n in names:
        e = [np.linalg.norm(pred[seed][n] - truth[n]) for seed, _, truth in corpus if n in pred[seed]]
        out[n] = (float(np.mean(e)) if e else np.inf, len(e))
    return out


def test_criterion_01_sphere_fit(acceptance):
    rng = np.random.default_rng(1)
    worst_exact = 0.0
    for _ in range(20):
        c, r = rng.normal(0, 30, 3), rng.uniform(2, 60)
        d = rng.normal(size=(100, 3))
        if rng.random() < 0.5:
            d[:, 2] = np.abs(d[:, 2])  # a hemispherical cap is just as determined
        p = c + r * d / np.linalg.norm(d, axis=1, keepdims=True)
        f = fit_sphere(p)
        worst_exact = max(worst_exact, np.abs(f.center - c).max(), abs(f.radius - r), f.residual)
    worst_oracle = 0.0
    for _ in range(1000):
        n = int(rng.integers(10, 200))
        d = rng.normal(size=(n, 3))
        p = rng.normal(0, 30, 3) + rng.uniform(2, 60) * d / np.linalg.norm(d, axis=1, keepdims=True)
        p += rng.normal(0, 0.5, p.shape)
        A = np.column_stack([2 * p, np.ones(n)])
        sol, *_ = scipy.linalg.lstsq(A, np.sum(p * p, axis=1))
        O = sol[:3]
        f = fit_sphere(p)
        worst_oracle = max(worst_oracle, np.abs(f.center - O).max(), abs(f.radius - np.sqrt(sol[3] + O @ O)))
    ok = worst_exact < 1e-9 and worst_oracle < 1e-8
    acceptance(1, ok, f"exact max dev {worst_exact:.2e} (< 1e-9); oracle max dev {worst_oracle:.2e} (< 1e-8)")
    assert ok


def test_criterion_02_rid_rotation_invariance(acceptance, test_corpus, cfg):
    rng = np.random.default_rng(2)
    R, r0 = cfg["rid"]["R_mm"], cfg["rid"]["r0_mm"]
    worst, same_tip = 0.0, 0
    for _, m, _ in test_corpus[:20]:
        f1 = rid_statistic(m, R=R, r0=r0)
        f2 = rid_statistic(m.transformed(random_motion(rng)), R=R, r0=r0)
        fin = np.isfinite(f1.f)
        assert np.array_equal(fin, np.isfinite(f2.f))
        worst = max(worst, float(np.max(np.abs(f2.f[fin] - f1.f[fin]) / f1.f[fin])))
        same_tip += locate_nose_tip(f1) == locate_nose_tip(f2)
    ok = worst < 1e-6 and same_tip == 20
    acceptance(2, ok, f"max relative change in f {worst:.2e} (< 1e-6); same tip vertex {same_tip}/20")
    assert ok


def test_criterion_03_nose_tip_accuracy(acceptance, test_corpus, test_annotations):
    mean, n = mean_errors(test_annotations, test_corpus, ["Nose Tip"])["Nose Tip"]
    ok = mean <= 2.0 and n == 50
    acceptance(3, ok, f"nose tip mean error {mean:.3f} mm over {n} faces (<= 2 mm)")
    assert ok


def test_criterion_04_pca_suite(acceptance, models, train_corpus, train_frames, test_corpus, test_annotations):
    ortho = max(float(np.abs(m.eigenvectors.T @ m.eigenvectors - np.eye(m.k)).max()) for m in models)
    # in-span: 12 training patches are reproduced exactly by an 11-dimensional eigenspace
    name = "Left Lip Corner"
    pairs = []
    for (_, _, truth), cf in list(zip(train_corpus, train_frames))[:12]:
        pairs.append((cf.grid, truth.transformed(cf.transform)[name][:2]))
    small = train_landmark_model(pairs, name, k=11)
    span = max(score_patch(small, extract_patch(g, g.cell_of(*xy))).reconstruction_error for g, xy in pairs)
    mean_sc = [score_patch(m, m.mean_patch) for m in models]
    mean_zero = all(s.reconstruction_error == 0.0 and s.mahalanobis == 0.0 for s in mean_sc)
    errs = mean_errors(test_annotations, test_corpus, SALIENT_NAMES)
    worst_name = max(errs, key=lambda n: errs[n][0])
    overall = float(np.mean([e for e, _ in errs.values()]))
    acc = all(e <= 2.0 and n == 50 for e, n in errs.values())
    ok = ortho < 1e-8 and span < 1e-9 and mean_zero and acc
    acceptance(4, ok, f"orthonormality {ortho:.1e}; in-span {span:.1e}; mean patch e=d=0 {mean_zero}; "
                      f"six-landmark mean {overall:.3f} mm, worst {worst_name} {errs[worst_name][0]:.3f} mm (<= 2)")
    assert ok


def test_criterion_05_heuristic_suite(acceptance, test_corpus, test_annotations, models, cfg):
    errs = mean_errors(test_annotations, test_corpus, HEURISTIC_NAMES)
    worst_name = max(errs, key=lambda n: errs[n][0])
    acc = all(e <= 3.0 and n == 50 for e, n in errs.values())
    lobes = {"Left Earlobe tip", "Right Earlobe tip"}
    partial_ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed in (2030, 2031, 2032):
            mesh, truth = generate_face(random_params(seed, ears=False))
            lms = annotate(mesh, models, cfg)
            present = set(lms)
            partial_ok &= present.isdisjoint(lobes) and lobes <= set(lms.failures) and len(present) == 15
            partial_ok &= all(np.linalg.norm(lms[n] - truth[n]) <= 3.0 for n in present)
    ok = acc and partial_ok
    acceptance(5, ok, f"worst heuristic mean {worst_name} {errs[worst_name][0]:.3f} mm (<= 3); "
                      f"ear-cropped partial contract {partial_ok}")
    assert ok


def test_criterion_06_tps_properties(acceptance, reference_a, test_corpus, test_annotations):
    rng = np.random.default_rng(6)
    fid = side = ident = 0.0
    for _ in range(20):
        S = rng.normal(0, 40, (17, 3))
        Y = S + rng.normal(0, 5, S.shape)
        t = solve_tps(S, Y)
        fid = max(fid, float(np.abs(apply_tps(t, S) - Y).max()))
        side = max(side, float(np.abs(t.weights.sum(0)).max()), float(np.abs(S.T @ t.weights).max()))
        q = rng.normal(0, 60, (200, 3))
        shift = rng.normal(0, 10, 3)
        ident = max(ident, float(np.abs(apply_tps(solve_tps(S, S), q) - q).max()),
                    float(np.abs(apply_tps(solve_tps(S, S + shift), q) - (q + shift)).max()))
    r, lms, _ = reference_a
    on_surf = 0.0
    for seed, mesh, _ in test_corpus[:3]:
        reg = register_surface(r.mesh, lms, mesh, test_annotations[seed])
        on_surf = max(on_surf, float(closest_point_on_surface(mesh, reg.mesh.vertices)[2].max()))
    ok = fid < 1e-9 and side < 1e-8 and ident < 1e-9 and on_surf < 1e-9
    acceptance(6, ok, f"fiducials {fid:.1e}; side conditions {side:.1e}; identity/translation {ident:.1e}; "
                      f"on-surface {on_surf:.1e}")
    assert ok


def test_criterion_07_two_reference_agreement(acceptance, reference_a, reference_b, test_corpus, test_annotations):
    r, lms_a, _ = reference_a
    mesh_b, lms_b = reference_b
    assert np.array_equal(mesh_b.triangles, r.mesh.triangles)
    dist = []
    for seed, mesh, _ in test_corpus:
        auto = test_annotations[seed]
        va = register_surface(r.mesh, lms_a, mesh, auto).mesh.vertices
        vb = register_surface(mesh_b, lms_b, mesh, auto).mesh.vertices
        dist.append(np.linalg.norm(va - vb, axis=1))
    d = np.concatenate(dist)
    med = float(np.median(d))
    ok = med < 1.5
    acceptance(7, ok, f"median pointwise disagreement {med:.3f} mm over {len(dist)} faces (< 1.5 mm); "
                      f"90th percentile {np.percentile(d, 90):.3f} mm")
    assert ok


def test_criterion_08_spherical_remesh(acceptance, reference_a):
    rng = np.random.default_rng(8)
    p = rng.normal(0, 50, (10000, 3))
    p = p[np.hypot(p[:, 0], p[:, 2]) > 1e-3]
    rt = float(np.abs(inverse_parameterize(spherical_parameterize(p)) - p).max())
    r, _, cf = reference_a
    out = r.mesh
    fwd = float(closest_point_on_surface(cf.mesh, out.vertices)[2].max())
    sph = spherical_parameterize(cf.mesh.vertices - r.center)
    a, b = r.oval
    inside = (sph[:, 1] / a) ** 2 + (sph[:, 2] / b) ** 2 <= 1.0
    back = float(closest_point_on_surface(out, cf.mesh.vertices[inside])[2].max())
    haus = max(fwd, back)
    loops, manifold = boundary_loops(out), is_manifold(out)
    ok = rt < 1e-12 and haus < 0.5 and loops == 1 and manifold and r.step == 0.005
    acceptance(8, ok, f"round trip {rt:.1e} (< 1e-12); Hausdorff {haus:.3f} mm (< 0.5) at step {r.step}; "
                      f"{loops} boundary loop, manifold {manifold}")
    assert ok


def test_criterion_09_gpa_average(acceptance):
    rng = np.random.default_rng(9)
    base = generate_face(FaceParams(seed=9, spacing=2.0))[0]
    g = gpa_align([base.transformed(random_motion(rng)) for _ in range(5)])
    rigid_rms = max(float(np.sqrt(np.mean(np.sum((a.vertices - g.mean) ** 2, 1)))) for a in g.aligned)
    sigma, n = 0.5, 25
    noisy = [TriangleMesh(base.vertices + rng.normal(0, sigma, base.vertices.shape), base.triangles, base.colors)
             .transformed(random_motion(rng)) for _ in range(n)]
    gn = gpa_align(noisy, tol=1e-12, max_iter=50)
    obj = np.asarray(gn.objective)
    monotone = bool(np.all(np.diff(obj) <= 1e-9 * obj[0]))
    avg = average_face(gn.aligned)
    a0, b0 = base.vertices - base.vertices.mean(0), avg.vertices - avg.vertices.mean(0)
    err = b0 @ procrustes_rotation(b0, a0).T - a0
    rms = float(np.sqrt(np.mean(err ** 2)))
    bound = sigma / np.sqrt(n)
    ok = rigid_rms < 1e-6 and monotone and rms < bound
    acceptance(9, ok, f"rigid corpus RMS {rigid_rms:.1e} mm (< 1e-6); objective monotone {monotone}; "
                      f"average RMS {rms:.4f} mm vs sigma/sqrt(N) {bound:.4f} mm")
    assert ok


def _pipeline(root):
    """synth, train, annotate, register (two passes), average, evaluate into `root`."""
    steps = [
        ["synth", "--out", root / "train", "--count", 18, "--seed-base", 1000],
        ["synth", "--out", root / "test", "--count", 5, "--seed-base", 2000],
        ["train", "--corpus", root / "train", "--out", root / "models"],
        ["annotate", root / "test", "--models", root / "models", "--out", root / "ann"],
        ["register", "--reference", root / "train" / "face_1000.ply", "--corpus", root / "test",
         "--landmarks", root / "ann", "--out", root / "reg", "--second-pass"],
        ["average", "--correspondence", root / "reg", "--out", root / "average.ply"],
        ["evaluate", "--pred", root / "ann", "--truth", root / "test", "--report", root / "eval.json"],
    ]
    for s in steps:
        assert main([str(a) for a in s]) == EXIT_OK, s[0]


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_criterion_10_end_to_end_determinism(acceptance, tmp_path, capsys):
    _pipeline(tmp_path / "run1")
    _pipeline(tmp_path / "run2")
    capsys.readouterr()
    a, b = _tree(tmp_path / "run1"), _tree(tmp_path / "run2")
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    n_lm = sum(k.endswith(".landmarks.json") for k in a)
    n_mesh = sum(k.endswith(".ply") for k in a)
    ok = not differ and n_lm > 0 and n_mesh > 0
    acceptance(10, ok, f"{len(a)} files ({n_lm} landmark JSONs, {n_mesh} meshes) byte-identical across two runs; "
                       f"differing: {differ[:5] or 'none'}")
    assert ok
