"""Garment dynamics: FEM cloth simulation, baseline solvers and sim-to-real metrics."""

from .assets import (
    Material,
    PointCloudFrame,
    TriangleMesh,
    assign_material,
    grid_cloth,
    load_obj,
    load_point_cloud,
    material_preset,
    save_mesh,
    save_point_cloud,
)

__version__ = "0.1.0"

__all__ = [
    "Material",
    "PointCloudFrame",
    "TriangleMesh",
    "assign_material",
    "grid_cloth",
    "load_obj",
    "load_point_cloud",
    "material_preset",
    "save_mesh",
    "save_point_cloud",
]
