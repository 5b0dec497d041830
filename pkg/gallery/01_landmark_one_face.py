"""Train the six patch models on a small corpus and annotate one unseen face.

Run: python gallery/01_landmark_one_face.py
"""

import warnings

import numpy as np

from morphreg.config import make_config
from morphreg.mesh import LANDMARK_NAMES
from morphreg.pipeline import annotate, train_models
from morphreg.synthetic import TRAIN_SEEDS, generate_corpus, generate_face, random_params

cfg = make_config()
corpus = list(generate_corpus(TRAIN_SEEDS[:30]))
models, report = train_models([(m, lms) for _, m, lms in corpus], cfg)
print(f"trained {len(models)} models on {len(corpus)} faces")

mesh, truth = generate_face(random_params(2024))
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    found = annotate(mesh, models, cfg)

print(f"{'landmark':<24} {'error (mm)':>10}")
for name in LANDMARK_NAMES:
    err = np.linalg.norm(found[name] - truth[name]) if name in found else float("nan")
    print(f"{name:<24} {err:10.3f}")
