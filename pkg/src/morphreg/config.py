"""Pipeline configuration: every tunable constant in one JSON-serialisable tree."""

from __future__ import annotations

import copy
import json
from collections.abc import Mapping

DEFAULTS = {
    "rid": {"r0_mm": 12.0, "R_mm": None},
    "pose": {"region_mm": 50.0},
    "grid": {"spacing_mm": 1.0},
    "pca": {"patch_mm": 21.0, "k": 16, "zone_margin_mm": 10.0},
    "heuristics": {
        "angle_window_mm": 3.0,
        "cr_margin": 5.0,
        "earlobe_slope": 2.0,
        "symmetry_window_mm": 15.0,
        "nose_refit_mm": 6.0,
        "subnasale_search_mm": 40.0,
    },
    "remesh": {"step": 0.005, "oval_a": None, "oval_b": None},
    "tps": {"ridge": 0.0},
    "gpa": {"tol_mm": 1e-7, "max_iter": 100, "scale": False},
    "batch": {"workers": 1},
}


def _merge(base: dict, over: Mapping, path=""):
    for key, val in over.items():
        if key not in base:
            raise KeyError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, Mapping):
                raise TypeError(f"config key {path + key!r} must be a mapping")
            _merge(base[key], val, path + key + ".")
        else:
            base[key] = val


def make_config(overrides: Mapping | None = None) -> dict:
    """Defaults deep-merged with `overrides`; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if overrides:
        _merge(cfg, overrides)
    if cfg["rid"]["R_mm"] is None:
        cfg["rid"]["R_mm"] = cfg["rid"]["r0_mm"] + 2.0
    return cfg


def load_config(path=None, dotted: Mapping[str, object] | None = None) -> dict:
    """Read a JSON config file and apply `section.key=value` style overrides."""
    over: dict = {}
    if path is not None:
        with open(path) as fh:
            over = json.load(fh)
    for key, val in (dotted or {}).items():
        node = over
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = val
    return make_config(over)
