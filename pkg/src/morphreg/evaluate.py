"""Per-landmark error statistics for predicted versus reference landmark sets."""

from __future__ import annotations

import numpy as np

from .mesh import LANDMARK_NAMES, LandmarkSet


def landmark_errors(pred: dict, truth: dict) -> dict[str, list[float]]:
    """Euclidean errors per landmark over the face ids present in both mappings."""
    errs: dict[str, list[float]] = {n: [] for n in LANDMARK_NAMES}
    for fid in sorted(set(pred) & set(truth), key=str):
        p, t = pred[fid], truth[fid]
        for n in LANDMARK_NAMES:
            if n in p and n in t:
                errs[n].append(float(np.linalg.norm(np.asarray(p[n]) - np.asarray(t[n]))))
    return errs


def error_table(pred: dict[object, LandmarkSet], truth: dict[object, LandmarkSet]) -> dict:
    """Mean, SD (n - 1 denominator), RMS and count per landmark, in mm.

    Landmarks absent from a prediction count as missing, not as errors.
    """
    common = set(pred) & set(truth)
    if not common:
        raise ValueError("predictions and truth share no face ids")
    errs = landmark_errors(pred, truth)
    rows = {}
    for n in LANDMARK_NAMES:
        e = np.asarray(errs[n])
        if len(e) == 0:
            rows[n] = {"n": 0, "missing": len(common), "mean": None, "sd": None, "rms": None, "max": None}
            continue
        rows[n] = {
            "n": int(len(e)),
            "missing": len(common) - int(len(e)),
            "mean": float(e.mean()),
            "sd": float(e.std(ddof=1)) if len(e) > 1 else 0.0,
            "rms": float(np.sqrt(np.mean(e * e))),
            "max": float(e.max()),
        }
    return {"faces": len(common), "unmatched": sorted(map(str, set(pred) ^ set(truth))), "landmarks": rows}


def format_table(report: dict) -> str:
    """Aligned plain-text rendering of `error_table` output."""
    w = max(len(n) for n in LANDMARK_NAMES)
    lines = [f"{'Landmark':<{w}}  {'Mean':>7}  {'SD':>7}  {'RMS':>7}  {'Max':>7}  {'N':>4}",
             "-" * (w + 42)]
    num = lambda v: f"{v:7.3f}" if v is not None else f"{'-':>7}"  # noqa: E731
    for n in LANDMARK_NAMES:
        r = report["landmarks"][n]
        lines.append(f"{n:<{w}}  {num(r['mean'])}  {num(r['sd'])}  {num(r['rms'])}  {num(r['max'])}  {r['n']:>4}")
    lines.append(f"faces: {report['faces']} (errors in mm)")
    return "\n".join(lines) + "\n"
