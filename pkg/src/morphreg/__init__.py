"""Automatic landmarking and dense registration of 3D face meshes."""

from .mesh import (LANDMARK_NAMES, HEURISTIC_NAMES, SALIENT_NAMES, LandmarkSet, MeshError,
                   RigidTransform, TriangleMesh, closest_point_on_surface, load_landmarks,
                   load_mesh, radius_search, save_landmarks, save_mesh)

__version__ = "0.1.0"
