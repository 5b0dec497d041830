"""Command line entry point: morphreg {synth|train|annotate|register|average|evaluate}."""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import load_config
from .mesh import (LANDMARK_NAMES, SALIENT_NAMES, LandmarkSet, MeshError, load_landmarks, load_mesh,
                   save_landmarks, save_mesh)

EXIT_OK, EXIT_IO, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3, 4
LANDMARK_SUFFIX = ".landmarks.json"
MESH_EXTS = (".ply", ".obj")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _face_id(path: str) -> str:
    base = os.path.basename(path)
    if base.endswith(LANDMARK_SUFFIX):
        return base[: -len(LANDMARK_SUFFIX)]
    return os.path.splitext(base)[0]


def _mesh_files(inputs) -> list[str]:
    files = []
    for p in inputs:
        if os.path.isdir(p):
            files += sorted(f for f in glob.glob(os.path.join(p, "*")) if f.lower().endswith(MESH_EXTS))
        elif os.path.isfile(p):
            files.append(p)
        else:
            raise CliError(EXIT_IO, f"no such file or directory: {p}")
    if not files:
        raise CliError(EXIT_IO, "no mesh files found")
    return files


def _landmark_path(mesh_path: str, landmark_dir: str | None = None) -> str:
    d = landmark_dir or os.path.dirname(mesh_path)
    return os.path.join(d, _face_id(mesh_path) + LANDMARK_SUFFIX)


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_IO, f"output directory is not writable: {path}")


def _load_pairs(mesh_files, landmark_dir=None):
    out = []
    for f in mesh_files:
        lp = _landmark_path(f, landmark_dir)
        if not os.path.isfile(lp):
            raise CliError(EXIT_IO, f"missing landmark file {lp}")
        out.append((_face_id(f), load_mesh(f), load_landmarks(lp)))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> int:
    from .synthetic import TEST_SEEDS, TRAIN_SEEDS, generate_face, random_params

    if args.corpus:
        seeds = {"train": TRAIN_SEEDS, "test": TEST_SEEDS}[args.corpus]
    else:
        seeds = range(args.seed_base, args.seed_base + args.count)
    _ensure_dir(args.out)
    for s in seeds:
        mesh, lms = generate_face(random_params(s, pose=args.pose, noise=args.noise, ears=not args.no_ears))
        save_mesh(mesh, os.path.join(args.out, f"face_{s}.ply"))
        save_landmarks(lms, os.path.join(args.out, f"face_{s}{LANDMARK_SUFFIX}"))
    print(f"wrote {len(seeds)} faces to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .pca import TrainingError, model_filename, save_model
    from .pipeline import train_models

    files = _mesh_files([args.corpus])
    need = cfg["pca"]["k"] + 1
    if len(files) < need:
        raise CliError(EXIT_PRECONDITION, f"{len(files)} training faces; k={cfg['pca']['k']} needs at least {need}")
    pairs = _load_pairs(files, args.landmarks)
    for fid, _, lms in pairs:
        missing = [n for n in SALIENT_NAMES if n not in lms]
        if missing:
            raise CliError(EXIT_PRECONDITION, f"{fid}: training landmarks lack {', '.join(missing)}")
    _ensure_dir(args.out)
    try:
        models, report = train_models([(m, l) for _, m, l in pairs], cfg)
    except TrainingError as exc:
        raise CliError(EXIT_PRECONDITION, str(exc)) from exc
    for m in models:
        save_model(m, os.path.join(args.out, model_filename(m.name)))
    report["faces"] = [fid for fid, _, _ in pairs]
    report["config"] = cfg
    _write_json(report, os.path.join(args.out, "training_report.json"))
    print(f"trained {len(models)} models on {len(pairs)} faces -> {args.out}")
    return EXIT_OK


def _load_models(model_dir):
    from .pca import load_model, model_filename

    paths = [os.path.join(model_dir, model_filename(n)) for n in SALIENT_NAMES]
    missing = [p for p in paths if not os.path.isfile(p)]
    if missing:
        raise CliError(EXIT_PRECONDITION, f"missing trained model(s): {', '.join(missing)}")
    return [load_model(p) for p in paths]


def cmd_annotate(args, cfg) -> int:
    from .pipeline import annotate

    models = _load_models(args.models)
    files = _mesh_files(args.meshes)
    _ensure_dir(args.out)

    def run(path):
        fid = _face_id(path)
        try:
            mesh = load_mesh(path)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return fid, annotate(mesh, models, cfg), None
        except MeshError as exc:
            return fid, None, f"I/O: {exc}"
        except (ValueError, np.linalg.LinAlgError, ArithmeticError) as exc:
            return fid, None, f"{type(exc).__name__}: {exc}"

    workers = int(cfg["batch"]["workers"])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, files))
    else:
        results = [run(f) for f in files]
    summary = {"faces": len(results), "succeeded": 0, "failed": {}, "partial": {}, "low_confidence": {}}
    for fid, lms, err in results:
        if lms is None:
            summary["failed"][fid] = err
            continue
        summary["succeeded"] += 1
        save_landmarks(lms, os.path.join(args.out, fid + LANDMARK_SUFFIX))
        missing = [n for n in LANDMARK_NAMES if n not in lms]
        if missing:
            summary["partial"][fid] = missing
        low = [n for n in LANDMARK_NAMES if lms.confidence.get(n) is False]
        if low:
            summary["low_confidence"][fid] = low
    _write_json(summary, os.path.join(args.out, "annotation_summary.json"))
    print(f"annotated {summary['succeeded']}/{summary['faces']} faces; "
          f"{len(summary['failed'])} failed, {len(summary['partial'])} partial")
    for fid, err in summary["failed"].items():
        print(f"  failed {fid}: {err}")
    for fid, names in summary["partial"].items():
        print(f"  partial {fid}: missing {', '.join(names)}")
    return EXIT_OK if summary["succeeded"] else EXIT_NUMERICAL


def cmd_register(args, cfg) -> int:
    from .pipeline import coarse_normalize
    from .remesh import RemeshError, remesh_spherical
    from .tps import TpsError, build_dense_correspondence, mean_displacement, second_pass, solve_tps, \
        write_correspondence

    ref_mesh = load_mesh(args.reference)
    ref_lms = load_landmarks(args.reference_landmarks or _landmark_path(args.reference))
    pairs = _load_pairs(_mesh_files(args.corpus), args.landmarks)
    # everything that can fail numerically for the reference happens before any output is written
    try:
        solve_tps(ref_lms.array(), ref_lms.array(), cfg["tps"]["ridge"])
        cf = coarse_normalize(ref_mesh, cfg)
        rc = cfg["remesh"]
        trim = None if rc["oval_a"] is None else (rc["oval_a"], rc["oval_b"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            remeshed = remesh_spherical(cf.mesh, trim=trim, step=rc["step"])
    except (TpsError, RemeshError, ValueError, np.linalg.LinAlgError) as exc:
        raise CliError(EXIT_NUMERICAL, f"reference unusable: {exc}") from exc
    ref = remeshed.mesh
    lms = ref_lms.transformed(cf.transform)
    workers = int(cfg["batch"]["workers"])
    dc = build_dense_correspondence(ref, lms, pairs, cfg["tps"]["ridge"], workers)
    _ensure_dir(args.out)
    write_correspondence(dc, args.out)
    print(f"registered {len(dc)}/{len(pairs)} samples onto {ref.n_vertices} reference vertices -> {args.out}")
    for sid, err in dc.failures.items():
        print(f"  failed {sid}: {err}")
    if args.second_pass:
        if len(dc) < 2:
            raise CliError(EXIT_PRECONDITION, "second pass needs at least two registered samples")
        g = cfg["gpa"]
        dc2, _, _ = second_pass(dc, pairs, cfg["tps"]["ridge"], workers,
                                {"tol": g["tol_mm"], "max_iter": g["max_iter"], "scale": g["scale"]})
        out2 = os.path.join(args.out, "pass2")
        write_correspondence(dc2, out2, reference_name="average")
        disp = mean_displacement(dc, dc2)
        _write_json({"mean_vertex_displacement_mm": disp, "samples": len(dc2)},
                    os.path.join(args.out, "second_pass.json"))
        print(f"second pass: mean vertex displacement {disp:.4f} mm -> {out2}")
    return EXIT_OK


def cmd_average(args, cfg) -> int:
    from .gpa import GpaError, average_face, gpa_align

    man_path = os.path.join(args.correspondence, "manifest.json")
    if not os.path.isfile(man_path):
        raise CliError(EXIT_IO, f"no manifest.json in {args.correspondence}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    ok = [e for e in manifest["samples"] if e["status"] == "ok"]
    if len(ok) < 2:
        raise CliError(EXIT_PRECONDITION, f"averaging needs at least 2 corresponded meshes, found {len(ok)}")
    meshes = [load_mesh(os.path.join(args.correspondence, e["mesh"])) for e in ok]
    g = cfg["gpa"]
    try:
        res = gpa_align(meshes, tol=g["tol_mm"], max_iter=g["max_iter"], scale=g["scale"] or args.scale)
        avg = average_face(res.aligned)
    except GpaError as exc:
        raise CliError(EXIT_PRECONDITION, str(exc)) from exc
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _ensure_dir(out_dir)
    save_mesh(avg, args.out)
    _write_json({
        "samples": [e["id"] for e in ok],
        "iterations": res.iterations,
        "converged": res.converged,
        "objective": res.objective,
        "transforms": {e["id"]: t.to_dict() for e, t in zip(ok, res.transforms)},
        "scales": res.scales,
    }, os.path.splitext(args.out)[0] + ".gpa.json")
    print(f"averaged {len(meshes)} meshes in {res.iterations} GPA iterations -> {args.out}")
    return EXIT_OK


def _landmark_dir(path) -> dict:
    if not os.path.isdir(path):
        raise CliError(EXIT_IO, f"not a directory: {path}")
    return {_face_id(f): load_landmarks(f) for f in sorted(glob.glob(os.path.join(path, "*" + LANDMARK_SUFFIX)))}


def cmd_evaluate(args, cfg) -> int:
    from .evaluate import error_table, format_table

    pred, truth = _landmark_dir(args.pred), _landmark_dir(args.truth)
    if not set(pred) & set(truth):
        raise CliError(EXIT_PRECONDITION, "predicted and truth directories share no face ids")
    report = error_table(pred, truth)
    text = format_table(report)
    parent = os.path.dirname(os.path.abspath(args.report))
    _ensure_dir(parent)
    _write_json(report, args.report)
    with open(os.path.splitext(args.report)[0] + ".txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(EXIT_PRECONDITION, f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphreg", description="Automatic facial landmarking and dense registration.")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. pca.k=12")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic face corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed-base", type=int, default=0)
    s.add_argument("--corpus", choices=["train", "test"], help="use the TRAIN-80 or TEST-50 seed list")
    s.add_argument("--pose", type=float, default=12.0, help="max pose offset per axis in degrees")
    s.add_argument("--noise", type=float, default=0.05, help="vertex noise sigma in mm")
    s.add_argument("--no-ears", action="store_true", help="crop the ears")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the six salient-landmark models")
    s.add_argument("--corpus", required=True, help="directory of meshes with landmark files")
    s.add_argument("--landmarks", help="directory holding the landmark files (default: corpus)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("annotate", help="detect the 17 landmarks")
    s.add_argument("meshes", nargs="+", help="mesh files or directories")
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("register", help="dense correspondence against a reference")
    s.add_argument("--reference", required=True)
    s.add_argument("--reference-landmarks")
    s.add_argument("--corpus", required=True, nargs="+", help="mesh files or directories")
    s.add_argument("--landmarks", help="directory holding the corpus landmark files (default: beside meshes)")
    s.add_argument("--out", required=True)
    s.add_argument("--second-pass", action="store_true", help="re-register against the pass-1 average face")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("average", help="GPA-aligned average face")
    s.add_argument("--correspondence", required=True, help="output directory of the register command")
    s.add_argument("--out", required=True, help="average mesh path (.ply or .obj)")
    s.add_argument("--scale", action="store_true", help="normalise size before averaging")
    s.set_defaults(func=cmd_average)

    s = sub.add_parser("evaluate", help="per-landmark error table")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--report", required=True, help="JSON report path; a .txt table is written beside it")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = load_config(args.config, _parse_set(args.set))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_PRECONDITION, f"bad configuration: {exc}") from exc
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
        return args.func(args, cfg)
    except CliError as exc:
        print(f"morphreg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, MeshError) as exc:
        print(f"morphreg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"morphreg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
