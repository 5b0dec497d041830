"""Remesh a reference face, carry it onto five faces and average the result.

Run: python gallery/02_register_and_average.py [out.ply]
"""

import sys
import warnings

import numpy as np

from morphreg.config import make_config
from morphreg.gpa import average_face, gpa_align
from morphreg.mesh import save_mesh
from morphreg.pipeline import coarse_normalize
from morphreg.remesh import remesh_spherical
from morphreg.synthetic import generate_corpus
from morphreg.tps import build_dense_correspondence, second_pass

cfg = make_config()
(ref_seed, ref_mesh, ref_truth), *faces = generate_corpus(range(3000, 3006))

cf = coarse_normalize(ref_mesh, cfg)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    ref = remesh_spherical(cf.mesh, step=cfg["remesh"]["step"])
print(f"reference {ref_seed}: {ref.mesh.n_vertices} vertices on the spherical grid")

dc = build_dense_correspondence(ref.mesh, ref_truth.transformed(cf.transform), faces)
dc2, _, _ = second_pass(dc, faces)
g = gpa_align(dc2.samples)
avg = average_face(g.aligned)
spread = np.sqrt(np.mean([np.sum((a.vertices - g.mean) ** 2, 1).mean() for a in g.aligned]))
print(f"GPA converged in {g.iterations} iterations; RMS distance to the mean {spread:.2f} mm")

out = sys.argv[1] if len(sys.argv) > 1 else "average_face.ply"
save_mesh(avg, out)
print(f"wrote {out}")
