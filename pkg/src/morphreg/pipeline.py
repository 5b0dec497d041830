"""End-to-end chains: training the salient-landmark models and annotating a face."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import make_config
from .flatten import Grid2D, flatten
from .mesh import LANDMARK_NAMES, SALIENT_NAMES, LandmarkSet, RigidTransform, TriangleMesh
from .nose import locate_nose_tip, pose_normalize, rid_statistic
from .pca import LandmarkModel, locate_salient_landmarks, train_landmark_model


@dataclass
class CoarseFrame:
    """Mesh after nose detection and Hotelling pose, with the map from the input frame."""

    mesh: TriangleMesh
    transform: RigidTransform
    nose_index: int
    grid: Grid2D


def coarse_normalize(mesh: TriangleMesh, cfg: dict | None = None) -> CoarseFrame:
    cfg = cfg or make_config()
    field = rid_statistic(mesh, R=cfg["rid"]["R_mm"], r0=cfg["rid"]["r0_mm"])
    tip = locate_nose_tip(field)
    norm, T = pose_normalize(mesh, tip, region=cfg["pose"]["region_mm"])
    return CoarseFrame(norm, T, tip, flatten(norm, cfg["grid"]["spacing_mm"]))


def train_models(corpus, cfg: dict | None = None, frames=None):
    """Train the six salient models from (mesh, ground-truth landmarks) pairs.

    Ground truth is mapped into each face's detected coarse frame, so the
    zones and patches describe exactly what detection will see. `frames`
    may supply the CoarseFrame of every corpus entry to skip recomputing it.
    Returns (models, report) where report lists each model's eigenvalues.
    """
    cfg = cfg or make_config()
    corpus = list(corpus)
    if frames is None:
        frames = [coarse_normalize(mesh, cfg) for mesh, _ in corpus]
    per_name: dict[str, list] = {n: [] for n in SALIENT_NAMES}
    for (mesh, truth), cf in zip(corpus, frames):
        t = truth.transformed(cf.transform)
        for n in SALIENT_NAMES:
            per_name[n].append((cf.grid, t[n][:2]))
    pc = cfg["pca"]
    models = [train_landmark_model(per_name[n], n, s=pc["patch_mm"], k=pc["k"], margin=pc["zone_margin_mm"])
              for n in SALIENT_NAMES]
    report = {m.name: {"eigenvalues": m.eigenvalues.tolist(), "zone_mm": list(m.zone),
                       "training_faces": len(per_name[m.name])} for m in models}
    return models, report


def annotate(mesh: TriangleMesh, models: list[LandmarkModel], cfg: dict | None = None) -> LandmarkSet:
    """Detect all landmarks; the result is expressed in the input mesh's frame."""
    from .heuristics import fine_pose_from_six, locate_heuristic_landmarks

    cfg = cfg or make_config()
    cf = coarse_normalize(mesh, cfg)
    six = locate_salient_landmarks(cf.grid, models, cf.mesh)
    if six.failures:
        out = LandmarkSet({"Nose Tip": mesh.vertices[cf.nose_index]}, failures=list(six.failures))
        return out.merged(six.transformed(cf.transform.inverse()))
    fine_mesh, T2 = fine_pose_from_six(cf.mesh, six, origin=np.zeros(3))
    grid2 = flatten(fine_mesh, cfg["grid"]["spacing_mm"])
    six2 = six.transformed(T2)
    rest = locate_heuristic_landmarks(fine_mesh, grid2, six2, np.zeros(3), cfg)
    total = T2.compose(cf.transform)
    result = six2.merged(rest).transformed(total.inverse())
    ordered = LandmarkSet({n: result[n] for n in LANDMARK_NAMES if n in result},
                          result.confidence, result.failures)
    return ordered
