"""Meshes, point clouds, fabric materials and their file formats.

All quantities are SI internally (kg, m, s, rad). The shipped fabric table
keeps the measured units (g/s^2, g*m^2/s^2/rad, g/m^2, mm) and is converted
when a preset is loaded.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DegenerateElement,
    InvalidMaterial,
    MalformedAsset,
    NonManifold,
    UnknownPreset,
)

MIN_REST_AREA = 1e-12

FABRICS = (
    "cotton", "linen", "wool", "polyester", "nylon",
    "silk", "knit", "velvet", "leather", "fur",
)


@dataclass(frozen=True)
class Material:
    stretch_warp: float
    stretch_weft: float
    stretch_shear: float
    bend_warp: float
    bend_weft: float
    area_density: float
    thickness: float
    bend_quadratic: float = 0.0
    friction_coeff: float = 0.3
    damping: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        for f in ("stretch_warp", "stretch_weft", "stretch_shear",
                  "bend_warp", "bend_weft", "bend_quadratic", "damping"):
            v = getattr(self, f)
            if not math.isfinite(v) or v < 0:
                raise InvalidMaterial(f"{f} must be finite and >= 0, got {v}")
        if not self.area_density > 0:
            raise InvalidMaterial(f"area_density must be > 0, got {self.area_density}")
        if not self.thickness > 0:
            raise InvalidMaterial(f"thickness must be > 0, got {self.thickness}")
        if not self.friction_coeff >= 0:
            raise InvalidMaterial(f"friction_coeff must be >= 0, got {self.friction_coeff}")

    def replace(self, **changes) -> "Material":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Material":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidMaterial(f"unknown material fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidMaterial(str(exc)) from None


def _preset_table() -> dict:
    with resources.files("garmentdyn").joinpath("data/presets.json").open() as fh:
        return json.load(fh)["fabrics"]


def material_preset(name: str) -> Material:
    """Material for one of the measured fabrics, converted to SI.

    Warp and weft stretch share the measured value. Shear uses half of it,
    which makes the small-strain membrane energy isotropic in-plane.
    """
    table = _preset_table()
    key = name.strip().lower()
    if key not in table:
        raise UnknownPreset(f"unknown fabric preset {name!r}; choose from {', '.join(FABRICS)}")
    row = table[key]
    stretch = row["stretch"] / 1000.0  # g/s^2 -> kg/s^2
    bend = row["bend"] / 1000.0  # g*m^2/s^2/rad -> kg*m^2/s^2/rad
    return Material(
        stretch_warp=stretch,
        stretch_weft=stretch,
        stretch_shear=0.5 * stretch,
        bend_warp=bend,
        bend_weft=bend,
        bend_quadratic=0.0,
        area_density=row["area_density"] / 1000.0,  # g/m^2 -> kg/m^2
        thickness=row["thickness"] / 1000.0,  # mm -> m
        name=key,
    )


def load_material_file(path) -> Material:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedAsset(f"cannot read material file {path}: {exc}") from None
    if "preset" in d:
        base = material_preset(d.pop("preset"))
        return base.replace(**d) if d else base
    return Material.from_dict(d)


def _triangle_frames(rest: np.ndarray, tris: np.ndarray, uvs: Optional[np.ndarray]) -> np.ndarray:
    """2D rest coordinates of each triangle's corners in its warp/weft frame."""
    x0, x1, x2 = rest[tris[:, 0]], rest[tris[:, 1]], rest[tris[:, 2]]
    e1 = x1 - x0
    e2 = x2 - x0
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    axis = e1.copy()
    if uvs is not None:
        du = uvs[:, 1] - uvs[:, 0]
        dv = uvs[:, 2] - uvs[:, 0]
        det = du[:, 0] * dv[:, 1] - du[:, 1] * dv[:, 0]
        ok = np.abs(det) > 1e-14
        safe = np.where(ok, det, 1.0)
        # dX/du from [e1 e2] = [dX/du dX/dv] [du dv]
        tangent = (e1 * dv[:, 1:2] - e2 * du[:, 1:2]) / safe[:, None]
        axis = np.where(ok[:, None], tangent, axis)
    axis -= np.sum(axis * n, axis=1, keepdims=True) * n
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    other = np.cross(n, axis)
    frames = np.zeros((len(tris), 3, 2))
    frames[:, 1, 0] = np.sum(e1 * axis, axis=1)
    frames[:, 1, 1] = np.sum(e1 * other, axis=1)
    frames[:, 2, 0] = np.sum(e2 * axis, axis=1)
    frames[:, 2, 1] = np.sum(e2 * other, axis=1)
    return frames


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Rest and current geometry of a garment.

    Arrays are treated as immutable after construction; use ``with_positions``
    or ``assign_material`` to derive new meshes.
    """

    rest_positions: np.ndarray
    triangles: np.ndarray
    positions: Optional[np.ndarray] = None
    uvs: Optional[np.ndarray] = None  # per-corner (T, 3, 2)
    vertex_mass: Optional[np.ndarray] = None
    anchored: Optional[np.ndarray] = None
    grid_shape: Optional[tuple] = None  # (nx, ny) for generated row-major grids
    material_frames: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rest = np.ascontiguousarray(self.rest_positions, dtype=float).reshape(-1, 3)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(rest)
        if len(tris) and (tris.min() < 0 or tris.max() >= n):
            raise MalformedAsset("triangle index out of range")
        pos = rest.copy() if self.positions is None else np.array(self.positions, dtype=float).reshape(n, 3)
        mass = np.zeros(n) if self.vertex_mass is None else np.array(self.vertex_mass, dtype=float).reshape(n)
        anchored = np.zeros(n, bool) if self.anchored is None else np.array(self.anchored, dtype=bool).reshape(n)
        uvs = None if self.uvs is None else np.array(self.uvs, dtype=float).reshape(-1, 3, 2)
        if uvs is not None and len(uvs) != len(tris):
            raise MalformedAsset("per-corner UVs do not match triangle count")
        area = 0.5 * np.linalg.norm(
            np.cross(rest[tris[:, 1]] - rest[tris[:, 0]], rest[tris[:, 2]] - rest[tris[:, 0]]), axis=1)
        bad = np.flatnonzero(~(area > MIN_REST_AREA))
        if len(bad):
            raise DegenerateElement(int(bad[0]), f"triangle {int(bad[0])} has rest area {area[bad[0]]:.3g} m^2")
        for name, value in (("rest_positions", rest), ("triangles", tris), ("positions", pos),
                            ("vertex_mass", mass), ("anchored", anchored), ("uvs", uvs)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)
        frames = _triangle_frames(rest, tris, uvs)
        frames.setflags(write=False)
        object.__setattr__(self, "material_frames", frames)
        object.__setattr__(self, "_rest_area", area)
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        # hinge topology is validated eagerly so non-manifold input fails at load
        self.hinges  # noqa: B018

    @property
    def n_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def rest_area(self) -> np.ndarray:
        return self._rest_area

    @cached_property
    def dm_inv(self) -> np.ndarray:
        """Inverse of the 2x2 rest edge matrix per triangle (material frame)."""
        f = self.material_frames
        dm = np.stack([f[:, 1] - f[:, 0], f[:, 2] - f[:, 0]], axis=2)
        return np.linalg.inv(dm)

    @cached_property
    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def hinges(self) -> np.ndarray:
        """Interior edges as (e0, e1, opposite_a, opposite_b, tri_a, tri_b)."""
        t = self.triangles
        nt = len(t)
        corner = np.array([[0, 1, 2], [1, 2, 0], [2, 0, 1]])
        a = np.concatenate([t[:, c[0]] for c in corner])
        b = np.concatenate([t[:, c[1]] for c in corner])
        opp = np.concatenate([t[:, c[2]] for c in corner])
        tri = np.tile(np.arange(nt), 3)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        order = np.lexsort((tri, hi, lo))
        lo, hi, opp, tri, a = lo[order], hi[order], opp[order], tri[order], a[order]
        key_change = np.ones(len(lo), bool)
        key_change[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
        starts = np.flatnonzero(key_change)
        counts = np.diff(np.append(starts, len(lo)))
        if np.any(counts > 2):
            s = starts[np.argmax(counts > 2)]
            raise NonManifold((int(lo[s]), int(hi[s])))
        s = starts[counts == 2]
        # orient the shared edge as it appears in the first triangle
        e0 = a[s]
        e1 = np.where(e0 == lo[s], hi[s], lo[s])
        return np.stack([e0, e1, opp[s], opp[s + 1], tri[s], tri[s + 1]], axis=1).astype(np.int64)

    def with_positions(self, positions) -> "TriangleMesh":
        return dataclasses.replace(self, positions=np.asarray(positions, dtype=float).reshape(-1, 3))

    def with_anchors(self, anchored) -> "TriangleMesh":
        return dataclasses.replace(self, anchored=np.asarray(anchored, dtype=bool))

    def total_rest_area(self) -> float:
        return float(np.sum(self.rest_area))


def assign_material(mesh: TriangleMesh, mat: Material) -> TriangleMesh:
    """Lumped vertex masses: each triangle gives a third of its mass to each corner."""
    share = np.repeat(mat.area_density * mesh.rest_area / 3.0, 3)
    mass = np.bincount(mesh.triangles.reshape(-1), weights=share, minlength=mesh.n_vertices)
    return dataclasses.replace(mesh, vertex_mass=mass)


def grid_cloth(nx: int, ny: Optional[int] = None, width: float = 0.5, height: Optional[float] = None,
               origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Flat rectangular cloth in the xy-plane, vertices in row-major order.

    Vertex ``j * nx + i`` sits at ``origin + (i * dx, j * dy, 0)``. Quads are
    split along alternating diagonals; UVs equal the planar coordinates so
    warp runs along +x and weft along +y.
    """
    ny = nx if ny is None else ny
    height = width if height is None else height
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 vertices per side")
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    gx, gy = np.meshgrid(xs, ys)
    rest = np.stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)], axis=1) + np.asarray(origin, float)
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    i, j = i.ravel(), j.ravel()
    v00 = j * nx + i
    v10 = v00 + 1
    v01 = v00 + nx
    v11 = v01 + 1
    flip = (i + j) % 2 == 1
    t1 = np.where(flip[:, None], np.stack([v00, v10, v01], 1), np.stack([v00, v10, v11], 1))
    t2 = np.where(flip[:, None], np.stack([v10, v11, v01], 1), np.stack([v00, v11, v01], 1))
    tris = np.empty((2 * len(v00), 3), np.int64)
    tris[0::2] = t1
    tris[1::2] = t2
    uv = (rest - np.asarray(origin, float))[:, :2]
    return TriangleMesh(rest, tris, uvs=uv[tris], grid_shape=(nx, ny))


# --- OBJ -------------------------------------------------------------------

def _obj_index(token: str, count: int, line_no: int) -> int:
    try:
        k = int(token)
    except ValueError:
        raise MalformedAsset(f"line {line_no}: bad index {token!r}") from None
    if k < 0:
        k += count
    else:
        k -= 1
    if not 0 <= k < count:
        raise MalformedAsset(f"line {line_no}: index {token} out of range")
    return k


def load_obj(path) -> TriangleMesh:
    verts, texcoords, faces, face_uv = [], [], [], []
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedAsset(f"cannot read {path}: {exc}") from None
    for line_no, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                verts.append([float(a) for a in args[:3]])
                if len(args) < 3:
                    raise ValueError
            elif tag == "vt":
                texcoords.append([float(a) for a in args[:2]])
                if len(args) < 2:
                    raise ValueError
            elif tag == "f":
                if len(args) != 3:
                    raise MalformedAsset(f"line {line_no}: face with {len(args)} vertices (triangles only)")
                corners = [a.split("/") for a in args]
                faces.append([_obj_index(c[0], len(verts), line_no) for c in corners])
                if all(len(c) > 1 and c[1] for c in corners):
                    face_uv.append([_obj_index(c[1], len(texcoords), line_no) for c in corners])
                else:
                    face_uv.append(None)
        except ValueError:
            raise MalformedAsset(f"line {line_no}: cannot parse {raw.strip()!r}") from None
    if not verts or not faces:
        raise MalformedAsset(f"{path}: no vertices or faces")
    uvs = None
    if texcoords and all(f is not None for f in face_uv):
        uvs = np.asarray(texcoords, float)[np.asarray(face_uv)]
    return TriangleMesh(np.asarray(verts, float), np.asarray(faces, np.int64), uvs=uvs)


def save_mesh(path, mesh: TriangleMesh, positions=None) -> None:
    """Write a triangulated OBJ using full-precision coordinates."""
    pos = mesh.positions if positions is None else np.asarray(positions, float).reshape(-1, 3)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in pos.tolist()]
    if mesh.uvs is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.reshape(-1, 2).tolist()]
        for k, (a, b, c) in enumerate((mesh.triangles + 1).tolist()):
            t = 3 * k + 1
            lines.append(f"f {a}/{t} {b}/{t + 1} {c}/{t + 2}")
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.triangles + 1).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# --- point clouds ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def save_point_cloud(path, frame: PointCloudFrame) -> None:
    path = Path(path)
    rows = [f"{x!r} {y!r} {z!r}" for x, y, z in frame.points.tolist()]
    if path.suffix.lower() == ".ply":
        header = [
            "ply",
            "format ascii 1.0",
            f"comment timestamp {float(frame.timestamp)!r}",
            f"element vertex {len(rows)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
        path.write_text("\n".join(header + rows) + "\n")
    else:
        path.write_text("\n".join([f"# timestamp {float(frame.timestamp)!r}"] + rows) + "\n")


def _parse_xyz(lines) -> tuple:
    ts = 0.0
    pts = []
    for raw in lines:
        s = raw.strip()
        if not s:
            continue
        if s.startswith("#"):
            bits = s[1:].split()
            if len(bits) == 2 and bits[0] == "timestamp":
                ts = float(bits[1])
            continue
        vals = s.replace(",", " ").split()
        if len(vals) < 3:
            raise ValueError(s)
        pts.append([float(v) for v in vals[:3]])
    return pts, ts


def _parse_ply(lines) -> tuple:
    if not lines or lines[0].strip() != "ply":
        raise MalformedAsset("missing 'ply' magic")
    ts = 0.0
    count = None
    props = []
    in_vertex = False
    end = None
    for k, raw in enumerate(lines[1:], 1):
        bits = raw.split()
        if not bits:
            continue
        if bits[0] == "format":
            if len(bits) < 2 or bits[1] != "ascii":
                raise MalformedAsset(f"unsupported PLY encoding {' '.join(bits[1:])!r} (ascii only)")
        elif bits[0] == "comment" and len(bits) == 3 and bits[1] == "timestamp":
            ts = float(bits[2])
        elif bits[0] == "element":
            in_vertex = bits[1] == "vertex"
            if in_vertex:
                count = int(bits[2])
        elif bits[0] == "property" and in_vertex:
            props.append(bits[-1])
        elif bits[0] == "end_header":
            end = k + 1
            break
    if end is None or count is None:
        raise MalformedAsset("incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise MalformedAsset("PLY vertex element lacks x/y/z") from None
    body = [ln for ln in lines[end:] if ln.strip()][:count]
    if len(body) < count:
        raise MalformedAsset("PLY body shorter than declared vertex count")
    pts = []
    for ln in body:
        vals = ln.split()
        pts.append([float(vals[c]) for c in cols])
    return pts, ts


def load_point_cloud(path) -> PointCloudFrame:
    path = Path(path)
    try:
        raw = path.read_bytes()
        text = raw.decode("ascii")
    except OSError as exc:
        raise MalformedAsset(f"cannot read {path}: {exc}") from None
    except UnicodeDecodeError:
        raise MalformedAsset(f"{path}: not an ascii point cloud") from None
    lines = text.splitlines()
    try:
        if path.suffix.lower() == ".ply" or (lines and lines[0].strip() == "ply"):
            pts, ts = _parse_ply(lines)
        else:
            pts, ts = _parse_xyz(lines)
    except (ValueError, IndexError) as exc:
        raise MalformedAsset(f"{path}: {exc}") from None
    return PointCloudFrame(np.asarray(pts, float).reshape(-1, 3), ts)


def sample_cloth_path() -> Path:
    return Path(str(resources.files("garmentdyn").joinpath("data/sample_cloth.obj")))
