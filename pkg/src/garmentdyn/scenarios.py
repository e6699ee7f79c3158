"""Scripted manipulation in pseudo mode: grasped vertices follow keyframed paths.

A :class:`ScenarioScript` names grasp points and a piecewise-linear path for
each of them. :func:`run_scenario` places the garment at the script's initial
pose on a table, pins the vertex nearest each grasp point and moves it along
its path (by the path's displacement from its first keyframe), while the
rest of the cloth is simulated by the chosen solver.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines, collision
from .assets import Material, TriangleMesh, assign_material, grid_cloth, save_mesh
from .constitutive import GRAVITY, ClothEnergy
from .errors import InvalidScript, NumericalFailure, UntangleFailed
from .metrics import RigidTransform
from .solver import Anchors, ImplicitSolver, SimState, SolverConfig

DEFAULT_POSE = RigidTransform((1.0, 0.0, 0.0, 0.0), (0.1, 0.0, 0.01))
SOLVERS = ("fem", "mass-spring", "pbd")
_SOLVER_ALIASES = {"fem-implicit": "fem", "fem": "fem", "mass-spring": "mass-spring", "pbd": "pbd"}


# --- scripts ------------------------------------------------------------------------

@dataclass
class ScenarioScript:
    """Keyframed anchor paths.

    ``keyframes[k]`` is a list of ``(time, (x, y, z))`` for grasp point
    ``k``, interpolated linearly and held constant outside its time range.
    Anchors are removed at ``release_time`` if one is set.
    """

    name: str
    grasp_points: list
    keyframes: list
    duration: float
    initial_pose: RigidTransform = DEFAULT_POSE
    table_height: float = 0.0
    gravity: tuple = tuple(GRAVITY)
    release_time: Optional[float] = None
    frame_rate: float = 30.0

    def __post_init__(self):
        self.grasp_points = [tuple(float(c) for c in p) for p in self.grasp_points]
        self.keyframes = [[(float(t), tuple(float(c) for c in p)) for t, p in path] for path in self.keyframes]
        self.gravity = tuple(float(g) for g in self.gravity)
        if isinstance(self.initial_pose, (list, tuple)):
            self.initial_pose = RigidTransform.from_pose(self.initial_pose)
        self.validate()

    def validate(self):
        if len(self.keyframes) != len(self.grasp_points):
            raise InvalidScript("one keyframe path is needed per grasp point")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise InvalidScript("duration must be a positive number")
        if not self.frame_rate > 0:
            raise InvalidScript("frame_rate must be > 0")
        for k, path in enumerate(self.keyframes):
            if not path:
                raise InvalidScript(f"grasp point {k} has no keyframes")
            times = [t for t, _ in path]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise InvalidScript(f"keyframe times of grasp point {k} are not strictly increasing")
            if times[-1] > self.duration:
                raise InvalidScript(f"keyframes of grasp point {k} run past the duration")
            if not np.isfinite(np.asarray([p for _, p in path], float)).all():
                raise InvalidScript("keyframe positions must be finite")
        if self.release_time is not None and not 0 <= self.release_time <= self.duration:
            raise InvalidScript("release_time must lie within the duration")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def anchor_positions(self, t: float) -> np.ndarray:
        out = np.empty((len(self.keyframes), 3))
        for k, path in enumerate(self.keyframes):
            times = np.array([p[0] for p in path])
            pts = np.array([p[1] for p in path])
            for c in range(3):
                out[k, c] = np.interp(t, times, pts[:, c])
        return out

    def displacement(self, t: float) -> np.ndarray:
        """Anchor displacement from each path's first keyframe."""
        start = np.array([path[0][1] for path in self.keyframes]).reshape(-1, 3)
        return self.anchor_positions(t) - start

    def released(self, t: float) -> bool:
        return self.release_time is not None and t >= self.release_time - 1e-12

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grasp_points": [list(p) for p in self.grasp_points],
            "keyframes": [[[t, list(p)] for t, p in path] for path in self.keyframes],
            "duration": self.duration,
            "initial_pose": self.initial_pose.to_pose(),
            "table_height": self.table_height,
            "gravity": list(self.gravity),
            "release_time": self.release_time,
            "frame_rate": self.frame_rate,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioScript":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidScript(f"unknown script fields: {sorted(unknown)}")
        try:
            d = dict(d)
            if "initial_pose" in d:
                d["initial_pose"] = RigidTransform.from_pose(d["initial_pose"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidScript):
                raise
            raise InvalidScript(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ScenarioScript":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidScript(f"cannot read scenario {path}: {exc}") from None
        return cls.from_dict(d)


def select_grasp_vertex(mesh_or_positions, point) -> int:
    """Vertex closest to ``point``; ties go to the lowest index."""
    x = mesh_or_positions.positions if isinstance(mesh_or_positions, TriangleMesh) else mesh_or_positions
    x = np.asarray(x, float).reshape(-1, 3)
    d = np.sum((x - np.asarray(point, float)) ** 2, axis=1)
    return int(np.argmin(d))  # argmin returns the first minimum


def placed_positions(mesh: TriangleMesh, pose: RigidTransform = DEFAULT_POSE) -> np.ndarray:
    return pose.apply(mesh.positions)


def _layout(mesh: TriangleMesh, pose: RigidTransform):
    x = placed_positions(mesh, pose)
    return x, x.min(axis=0), x.max(axis=0)


def default_grasp_points(mesh: TriangleMesh, pose: RigidTransform = DEFAULT_POSE) -> list:
    """The vertices nearest the two top corners of the placed layout.

    The top edge is the one at minimum x; manipulation moves forward, in +x.
    """
    x, lo, hi = _layout(mesh, pose)
    z = float(np.mean(x[:, 2]))
    corners = [(lo[0], lo[1], z), (lo[0], hi[1], z)]
    return [tuple(x[select_grasp_vertex(x, c)]) for c in corners]


def _grasp_points(mesh, pose, grasp_points):
    x, lo, hi = _layout(mesh, pose)
    if grasp_points is None:
        return default_grasp_points(mesh, pose)
    pts = np.asarray(grasp_points, float).reshape(-1, 3)
    tol = 1e-6 + 1e-3 * float(np.max(hi - lo))
    if np.any(pts[:, :2] < lo[:2] - tol) or np.any(pts[:, :2] > hi[:2] + tol):
        raise InvalidScript("grasp point lies outside the garment's bounds")
    return [tuple(x[select_grasp_vertex(x, p)]) for p in pts]


def make_grasp(mesh: TriangleMesh, height: float = 0.3, lift_time: float = 2.0, hold: float = 0.0,
               grasp_points=None, pose: RigidTransform = DEFAULT_POSE) -> ScenarioScript:
    """Grasp the points together and lift them vertically by ``height``."""
    pts = _grasp_points(mesh, pose, grasp_points)
    paths = [[(0.0, p), (lift_time, (p[0], p[1], p[2] + height))] for p in pts]
    return ScenarioScript("grasp", pts, paths, lift_time + hold, pose)


def make_fling(mesh: TriangleMesh, height: float = 0.3, lift_time: float = 1.0, dx: float = 0.4,
               fling_time: float = 0.5, settle: float = 1.0, grasp_points=None,
               pose: RigidTransform = DEFAULT_POSE) -> ScenarioScript:
    """Lift, then a rapid forward-and-back swing of ``dx`` over ``fling_time``."""
    pts = _grasp_points(mesh, pose, grasp_points)
    t1, t2, t3 = lift_time, lift_time + 0.5 * fling_time, lift_time + fling_time
    paths = []
    for p in pts:
        top = (p[0], p[1], p[2] + height)
        paths.append([(0.0, p), (t1, top), (t2, (top[0] + dx, top[1], top[2])), (t3, top)])
    return ScenarioScript("fling", pts, paths, t3 + settle, pose)


def make_fold(mesh: TriangleMesh, lift: float = 0.05, lift_time: float = 0.5, move_time: float = 1.5,
              settle: float = 1.0, grasp_points=None, pose: RigidTransform = DEFAULT_POSE) -> ScenarioScript:
    """Lift the top edge slightly, carry it forward onto the bottom edge, release."""
    x, lo, hi = _layout(mesh, pose)
    pts = _grasp_points(mesh, pose, grasp_points)
    t1, t2 = lift_time, lift_time + move_time
    paths = []
    for p in pts:
        up = (p[0], p[1], p[2] + lift)
        paths.append([(0.0, p), (t1, up), (t2, (float(hi[0]), p[1], p[2] + lift))])
    return ScenarioScript("fold", pts, paths, t2 + settle, pose, release_time=t2)


SCRIPT_BUILDERS = {"grasp": make_grasp, "fling": make_fling, "fold": make_fold}


# --- trajectories -------------------------------------------------------------------

FRAME_PACK_MAGIC = b"GDFP"
FRAME_PACK_VERSION = 1


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    frames: list = field(default_factory=list)  # (N, 3) arrays

    def append(self, t: float, x):
        self.times.append(float(t))
        self.frames.append(np.array(x, float).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.times)

    def pairs(self) -> list:
        return list(zip(self.times, self.frames))


def save_frame_pack(path, traj: Trajectory) -> None:
    """Binary trajectory: ``b'GDFP'``, then little-endian u32 version, u32
    frame count, u32 vertex count, then per frame one f64 timestamp followed
    by ``N * 3`` f64 coordinates (x0, y0, z0, x1, ...)."""
    n = len(traj.frames[0]) if traj.frames else 0
    with open(path, "wb") as fh:
        fh.write(FRAME_PACK_MAGIC)
        fh.write(struct.pack("<III", FRAME_PACK_VERSION, len(traj), n))
        for t, x in zip(traj.times, traj.frames):
            fh.write(struct.pack("<d", t))
            fh.write(np.ascontiguousarray(x, "<f8").tobytes())


def load_frame_pack(path) -> Trajectory:
    from .errors import MalformedAsset

    data = Path(path).read_bytes()
    if data[:4] != FRAME_PACK_MAGIC or len(data) < 16:
        raise MalformedAsset(f"{path}: not a frame pack")
    version, count, n = struct.unpack_from("<III", data, 4)
    if version != FRAME_PACK_VERSION:
        raise MalformedAsset(f"{path}: unsupported frame pack version {version}")
    size = 8 + 24 * n
    if len(data) != 16 + count * size:
        raise MalformedAsset(f"{path}: truncated frame pack")
    traj = Trajectory()
    for k in range(count):
        off = 16 + k * size
        t = struct.unpack_from("<d", data, off)[0]
        x = np.frombuffer(data, "<f8", 3 * n, off + 8).reshape(n, 3)
        traj.append(t, x)
    return traj


def save_obj_frames(directory, mesh: TriangleMesh, traj: Trajectory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, x in enumerate(traj.frames):
        p = directory / f"frame_{k:05d}.obj"
        save_mesh(p, mesh, x)
        paths.append(p)
    return paths


# --- running ------------------------------------------------------------------------

@dataclass
class RunOptions:
    solver: str = "fem"
    config: SolverConfig = SolverConfig()
    self_collision: bool = True
    contact_stiffness: Optional[float] = None  # default: the material's warp stretch stiffness
    contact_radius: Optional[float] = None  # default: twice the thickness
    pbd_iterations: int = 10
    spring_damping_ratio: float = 0.05
    spring_safety: float = 0.9


@dataclass
class Diagnostics:
    solver: str
    steps: int = 0
    substeps_per_step: int = 1
    newton_iters: list = field(default_factory=list)
    pcg_iters: list = field(default_factory=list)
    stalls: int = 0
    untangle_counts: list = field(default_factory=list)
    untangle_failures: int = 0
    deep_frames_before: int = 0  # frames with a gap below -thickness before untangling
    deep_frames_after: int = 0
    min_gap: list = field(default_factory=list)
    failed: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class ScenarioResult:
    trajectory: Trajectory
    diagnostics: Diagnostics
    grasp_vertices: list
    mesh: TriangleMesh  # placed at the initial pose, with masses
    initial: np.ndarray


class Simulation:
    """One garment, one solver, stepped at the frame step ``config.h``."""

    def __init__(self, mesh: TriangleMesh, material: Material, options: RunOptions = RunOptions(),
                 table_height: Optional[float] = 0.0, gravity=GRAVITY):
        solver = _SOLVER_ALIASES.get(options.solver)
        if solver is None:
            raise ValueError(f"unknown solver {options.solver!r}; choose from {', '.join(SOLVERS)}")
        if mesh.vertex_mass is None or not np.all(mesh.vertex_mass > 0):
            mesh = assign_material(mesh, material)
        self.mesh = mesh
        self.material = material
        self.options = options
        self.solver = solver
        self.config = options.config.replace(gravity=tuple(float(g) for g in gravity))
        self.h = self.config.h
        self.thickness = material.thickness
        self.radius = options.contact_radius or 2.0 * material.thickness
        self.k_contact = options.contact_stiffness or material.stretch_warp
        self.obstacles = [] if table_height is None else [collision.HalfSpace((0.0, 0.0, table_height))]
        self.geometry = collision.CollisionGeometry.from_mesh(mesh)
        self.diag = Diagnostics(solver)
        self.inv_anchor = mesh.anchored.copy()
        if solver == "fem":
            self.fem = ImplicitSolver(mesh, material, self.config)
        elif solver == "mass-spring":
            self.network = baselines.build_spring_network(mesh, material, options.spring_damping_ratio)
            h_stable = baselines.largest_stable_step(self.network, mesh.vertex_mass, mesh.positions,
                                                     mesh.anchored, options.spring_safety)
            self.substeps = max(1, int(math.ceil(self.h / h_stable)))
            self.diag.substeps_per_step = self.substeps
        else:
            self.pbd = baselines.PbdConstraints.from_mesh(mesh, options.pbd_iterations)

    # contacts -------------------------------------------------------------
    def _contacts(self, state: SimState):
        # the penalty is active up to distance radius + thickness; the rest of
        # the margin covers motion during the step
        v = state.v
        speed = float(np.max(np.linalg.norm(v, axis=1))) if len(v) else 0.0
        g = float(np.linalg.norm(self.config.gravity))
        margin = self.thickness + 2.0 * (speed * self.h + g * self.h**2)
        cs = collision.environment_contact_set(state.x, self.obstacles, self.thickness, self.radius,
                                               self.material.friction_coeff, self.k_contact, margin)
        if self.options.self_collision:
            # self contacts only see relative motion; a common drift or fall cancels
            rel = float(np.max(np.linalg.norm(v - v.mean(axis=0), axis=1))) if len(v) else 0.0
            margin = self.thickness + 2.0 * rel * self.h
            cs = cs.concat(collision.detect_contact_set(state.x, self.geometry, self.thickness, self.radius,
                                                        self.material.friction_coeff, self.k_contact, margin))
        return cs

    def _self_contacts_at(self, x):
        return collision.detect_contact_set(x, self.geometry, self.thickness, self.radius, 0.0, self.k_contact)

    def _project_table(self, x):
        for ob in self.obstacles:
            n = np.asarray(ob.normal, float)
            n = n / np.linalg.norm(n)
            lim = float(n @ np.asarray(ob.point, float)) + self.thickness
            d = x @ n - lim
            low = d < 0
            x[low] -= d[low, None] * n
        return x

    # stepping -------------------------------------------------------------
    def step(self, state: SimState, anchors: Optional[Anchors]) -> SimState:
        if self.solver == "fem":
            new = self.fem.step(state, anchors, self._contacts(state))
            info = self.fem.last_info
            self.diag.newton_iters.append(info.newton_iters)
            self.diag.pcg_iters.append(int(sum(info.pcg_iters)))
            self.diag.stalls += int(info.stalled)
        elif self.solver == "mass-spring":
            new = state
            hs = self.h / self.substeps
            target = None if anchors is None else anchors.positions.copy()
            before = None if anchors is None else state.x[anchors.indices].copy()
            for k in range(self.substeps):
                sub = None
                if anchors is not None:
                    w = (k + 1) / self.substeps
                    sub = Anchors(anchors.indices, before + w * (target - before))
                new = baselines.mass_spring_step(new, self.network, self.mesh.vertex_mass, hs,
                                                 self.config.gravity, sub)
                x = self._project_table(new.x.copy())
                new = SimState(x, new.v, new.t)
            new = SimState(new.x, new.v, state.t + self.h)
        else:
            new = baselines.pbd_step(state, self.pbd, self.h, self.config.gravity, anchors=anchors)
            x = self._project_table(new.x.copy())
            new = SimState(x, (x - state.x) / self.h, new.t)
        self.diag.steps += 1
        new = self._untangle(new, anchors)
        if self.solver != "fem":
            new = SimState(self._project_table(new.x.copy()), new.v, new.t)
        return new

    def _untangle(self, state: SimState, anchors: Optional[Anchors]) -> SimState:
        if not self.options.self_collision:
            return state
        cs = self._self_contacts_at(state.x)
        gaps = cs.gaps(state.x)
        self.diag.min_gap.append(float(gaps.min()) if len(gaps) else None)
        if not len(gaps) or gaps.min() >= -0.5 * self.thickness:
            self.diag.untangle_counts.append(0)
            return state
        if gaps.min() < -self.thickness:
            self.diag.deep_frames_before += 1
        fixed = self.mesh.anchored.copy()
        if anchors is not None:
            fixed[anchors.indices] = True
        try:
            x, count = collision.untangle(state.x, cs, self.mesh.vertex_mass, self.thickness, fixed)
        except UntangleFailed as exc:
            self.diag.untangle_failures += 1
            x, count = exc.positions, exc.count
        self.diag.untangle_counts.append(int(count))
        after = self._self_contacts_at(x)
        g2 = after.gaps(x)
        if len(g2) and g2.min() < -self.thickness:
            self.diag.deep_frames_after += 1
        return SimState(x, state.v, state.t)


def run_scenario(script: ScenarioScript, mesh: TriangleMesh, material: Material,
                 options: RunOptions = RunOptions()) -> ScenarioResult:
    """Simulate a script and record one frame every ``1 / frame_rate`` seconds.

    The simulation step is ``options.config.h``; frame ``k`` is the state at
    ``k / frame_rate`` (nearest step), for ``k = 1 .. duration * frame_rate``.
    The placed initial state is returned separately. On a numerical failure
    the partial result is returned with ``diagnostics.failed`` set.
    """
    script.validate()
    mesh = assign_material(mesh, material)
    x0 = placed_positions(mesh, script.initial_pose)
    mesh = mesh.with_positions(x0)
    sim = Simulation(mesh, material, options, script.table_height, script.gravity)
    grasp = [select_grasp_vertex(x0, p) for p in script.grasp_points]
    idx = np.asarray(grasp, np.int64)
    base = x0[idx]
    h = sim.h
    n_steps = int(round(script.duration / h))
    frame_every = max(1, int(round(1.0 / (script.frame_rate * h))))
    state = SimState(x0, np.zeros_like(x0), 0.0)
    traj = Trajectory()
    for k in range(1, n_steps + 1):
        t = k * h
        anchors = None
        if len(idx) and not script.released(t):
            anchors = Anchors(idx, base + script.displacement(t))
        try:
            state = sim.step(state, anchors)
        except NumericalFailure as exc:
            sim.diag.failed = True
            sim.diag.message = str(exc)
            break
        if k % frame_every == 0:
            traj.append(t, state.x)
    return ScenarioResult(traj, sim.diag, grasp, mesh, x0)


# --- timing ---------------------------------------------------------------------------

@dataclass
class TimingRecord:
    solver: str
    n_vertices: int
    init_time: float
    step_time: float
    steps: int
    substeps: int = 1

    @property
    def substep_time(self) -> float:
        return self.step_time / self.substeps


def timing_benchmark(counts: Sequence[int] = (1024, 4096, 9216, 16384), solver: str = "fem",
                     material: Optional[Material] = None, steps: int = 100, settle: int = 20,
                     options: Optional[RunOptions] = None, width: float = 0.5) -> list:
    """Mean wall-clock time per frame step on hanging square grids.

    Each grid has ``round(sqrt(count))`` vertices per side and hangs from two
    corners. ``init_time`` covers building the solver state; the step time
    is the mean over ``steps`` steps after ``settle`` unmeasured steps.
    """
    from .assets import material_preset

    material = material or material_preset("cotton")
    options = options or RunOptions(solver=solver)
    options = dataclasses.replace(options, solver=solver)
    out = []
    for count in counts:
        side = max(2, int(round(math.sqrt(count))))
        t0 = time.perf_counter()
        mesh = grid_cloth(side, side, width)
        rest = mesh.rest_positions
        hung = np.stack([rest[:, 0], np.zeros(len(rest)), rest[:, 1]], axis=1)
        mesh = assign_material(mesh.with_positions(hung), material)
        top = np.flatnonzero(np.isclose(rest[:, 1], rest[:, 1].max()))
        corners = top[[0, -1]]
        sim = Simulation(mesh, material, options, table_height=None)
        if sim.solver == "fem":
            ClothEnergy(mesh, material).hessian(hung)  # warm the compiled kernels
        init = time.perf_counter() - t0
        anchors = Anchors(corners, hung[corners])
        state = SimState(hung, np.zeros_like(hung))
        for _ in range(settle):
            state = sim.step(state, anchors)
        t1 = time.perf_counter()
        for _ in range(steps):
            state = sim.step(state, anchors)
        mean = (time.perf_counter() - t1) / steps
        out.append(TimingRecord(sim.solver, side * side, init, mean, steps, sim.diag.substeps_per_step))
    return out


def timing_csv(records: Sequence[TimingRecord], path=None) -> str:
    lines = ["solver,n_vertices,init_time_s,step_time_s,steps,substeps"]
    for r in records:
        lines.append(f"{r.solver},{r.n_vertices},{r.init_time!r},{r.step_time!r},{r.steps},{r.substeps}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def sample_mesh() -> TriangleMesh:
    """The bundled 17x17 sample cloth."""
    from .assets import load_obj, sample_cloth_path

    return load_obj(sample_cloth_path())
