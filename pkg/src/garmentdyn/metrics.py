"""Sim-to-real comparison of mesh vertices against captured point clouds.

Distances are Manhattan (L1). For two sets A and B,

    chamfer(A, B)   = mean_{a in A} min_{b in B} |a - b|_1
    hausdorff(A, B) = max_{a in A}  min_{b in B} |a - b|_1

and both directions are reported: sim-to-real (vertices to points) and
real-to-sim.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .assets import PointCloudFrame
from .errors import DegenerateRegistration, EmptyPointSet, NoOverlap

METRICS = ("cd_s2r", "cd_r2s", "hd_s2r", "hd_r2s")


def _points(p, name="point set") -> np.ndarray:
    p = np.asarray(p, float).reshape(-1, 3)
    if not len(p):
        raise EmptyPointSet(f"{name} is empty")
    return p


class NearestNeighborIndex:
    """Exact nearest-neighbour queries under the L1 (or any Minkowski p) norm."""

    def __init__(self, points, p: float = 1.0):
        self.points = _points(points)
        self.p = p
        self._tree = cKDTree(self.points)

    def query(self, q):
        """Distances and indices of the nearest indexed point for each query."""
        q = np.asarray(q, float).reshape(-1, 3)
        d, i = self._tree.query(q, k=1, p=self.p)
        return np.asarray(d, float), np.asarray(i, np.int64)


def nn_index(points, p: float = 1.0) -> NearestNeighborIndex:
    return NearestNeighborIndex(points, p)


def nearest_distances(src, dst) -> np.ndarray:
    """L1 distance from every point of ``src`` to its nearest point of ``dst``."""
    src = _points(src, "source")
    dst = _points(dst, "target")
    return NearestNeighborIndex(dst).query(src)[0]


def nearest_distances_brute(src, dst) -> np.ndarray:
    src = _points(src, "source")
    dst = _points(dst, "target")
    return np.abs(src[:, None, :] - dst[None, :, :]).sum(axis=2).min(axis=1)


def chamfer(src, dst) -> float:
    return float(np.mean(nearest_distances(src, dst)))


def hausdorff(src, dst, percentile: Optional[float] = None) -> float:
    """Directed Hausdorff distance; ``percentile`` (e.g. 99) trims outliers."""
    d = nearest_distances(src, dst)
    if percentile is None:
        return float(np.max(d))
    return float(np.percentile(d, percentile))


def frame_metrics(sim, real, percentile: Optional[float] = None) -> dict:
    """All four metrics for one frame (sim vertices vs real points)."""
    d_s2r = nearest_distances(sim, real)
    d_r2s = nearest_distances(real, sim)
    agg = (lambda d: float(np.max(d))) if percentile is None else (lambda d: float(np.percentile(d, percentile)))
    return {"cd_s2r": float(np.mean(d_s2r)), "cd_r2s": float(np.mean(d_r2s)),
            "hd_s2r": agg(d_s2r), "hd_r2s": agg(d_r2s)}


# --- rigid transforms and ICP ------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """Rotation as a unit quaternion ``(w, x, y, z)`` followed by a translation."""

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, float).reshape(4)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValueError("rotation quaternion must be non-zero")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in np.asarray(self.translation, float).reshape(3)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        x, y, z, w = Rotation.from_matrix(np.asarray(R, float)).as_quat()
        return cls((w, x, y, z), t)

    @classmethod
    def from_pose(cls, pose: Sequence[float]) -> "RigidTransform":
        """From a 7-vector ``[tx, ty, tz, qw, qx, qy, qz]``."""
        pose = list(pose)
        if len(pose) != 7:
            raise ValueError("pose vector needs 7 entries")
        return cls(tuple(pose[3:]), tuple(pose[:3]))

    def to_pose(self) -> list:
        return [*self.translation, *self.rotation]

    @property
    def matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float).reshape(-1, 3) @ self.matrix.T + np.asarray(self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        R = self.matrix @ other.matrix
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform.from_matrix(R, t)

    def angle_deg(self) -> float:
        return float(np.degrees(2.0 * np.arccos(np.clip(abs(self.rotation[0]), 0.0, 1.0))))


def best_rigid_transform(src, dst):
    """Least-squares rotation and translation mapping ``src`` onto ``dst`` (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def _check_spread(p, name):
    c = p - p.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if len(p) < 3 or s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateRegistration(f"{name} points are collinear or coincident")


@dataclass
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    rms_history: list = field(default_factory=list)


def icp_align(source, target, max_iters: int = 100, tol: float = 1e-10,
              init: Optional[RigidTransform] = None) -> IcpResult:
    """Point-to-point ICP mapping ``source`` onto ``target``.

    Each iteration pairs every transformed source point with its Euclidean
    nearest target point and re-solves the rigid fit on those pairs. Stops
    when the RMS changes by less than ``tol`` or after ``max_iters``.
    """
    src = _points(source, "source")
    dst = _points(target, "target")
    _check_spread(src, "source")
    _check_spread(dst, "target")
    tree = cKDTree(dst)
    T = init or RigidTransform.identity()
    R, t = T.matrix, np.asarray(T.translation)
    d, idx = tree.query(src @ R.T + t)
    rms = float(np.sqrt(np.mean(d * d)))
    history = [rms]
    it = 0
    for it in range(1, max_iters + 1):
        R_new, t_new = best_rigid_transform(src, dst[idx])
        d, idx_new = tree.query(src @ R_new.T + t_new)
        rms_new = float(np.sqrt(np.mean(d * d)))
        if rms_new > rms:  # cannot happen in exact arithmetic; guard against round-off
            break
        R, t, idx = R_new, t_new, idx_new
        history.append(rms_new)
        done = rms - rms_new < tol
        rms = rms_new
        if done:
            break
    return IcpResult(RigidTransform.from_matrix(R, t), rms, it, history)


# --- streams and evaluation ------------------------------------------------------------

def compensate_delay(frames: Sequence[PointCloudFrame], delay: float) -> list:
    """Shift timestamps by ``-delay`` and drop frames that end up before zero."""
    if delay < 0:
        raise ValueError("delay must be >= 0")
    out = []
    for f in frames:
        t = f.timestamp - delay
        if t >= 0:
            out.append(f if delay == 0 else PointCloudFrame(f.points, t))
    return out


def _period(times) -> float:
    times = np.asarray(times, float)
    if len(times) < 2:
        return np.inf
    return float(np.median(np.diff(times)))


def pair_frames(sim_times, real_times, period: Optional[float] = None) -> list:
    """(sim index, real index) pairs by nearest timestamp within half a period.

    The period defaults to the real stream's median frame spacing. Each real
    frame is used at most once; ties pick the earlier sim frame.
    """
    sim_times = np.asarray(sim_times, float)
    real_times = np.asarray(real_times, float)
    if not len(sim_times) or not len(real_times):
        return []
    if period is None:
        period = _period(real_times)
        if not np.isfinite(period):
            period = _period(sim_times)
    half = 0.5 * period if np.isfinite(period) else np.inf
    pairs = []
    for j, t in enumerate(real_times):
        k = int(np.argmin(np.abs(sim_times - t)))
        if abs(sim_times[k] - t) <= half * (1 + 1e-9):
            pairs.append((k, j))
    return pairs


@dataclass
class MetricReport:
    """Per-frame metrics and their summary."""

    timestamps: np.ndarray
    values: dict  # metric name -> (F,) array

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    def summary(self) -> dict:
        out = {"frames": self.n_frames}
        for k in METRICS:
            v = np.asarray(self.values[k], float)
            out[k] = {"mean": float(v.mean()), "std": float(v.std()), "max": float(v.max())}
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "timestamp", *METRICS])
        for i, t in enumerate(self.timestamps):
            w.writerow([i, repr(float(t)), *(repr(float(self.values[k][i])) for k in METRICS)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None) -> str:
        text = json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate(sim_frames, real_frames: Sequence[PointCloudFrame], alignment: Optional[RigidTransform] = None,
             delay: float = 0.0, period: Optional[float] = None, percentile: Optional[float] = None) -> MetricReport:
    """Compare a simulated trajectory with a captured stream.

    ``sim_frames`` is a sequence of ``(timestamp, vertices)``. The alignment
    maps simulation coordinates into the capture frame. The real stream is
    delay-compensated, then frames are paired by nearest timestamp.
    """
    real = compensate_delay(real_frames, delay)
    sim_times = [float(t) for t, _ in sim_frames]
    pairs = pair_frames(sim_times, [f.timestamp for f in real], period)
    if not pairs:
        raise NoOverlap("no simulated frame lines up with the real stream")
    T = alignment or RigidTransform.identity()
    values = {k: [] for k in METRICS}
    stamps = []
    for k, j in pairs:
        v = T.apply(sim_frames[k][1])
        m = frame_metrics(v, real[j].points, percentile)
        for name in METRICS:
            values[name].append(m[name])
        stamps.append(real[j].timestamp)
    return MetricReport(np.asarray(stamps), {k: np.asarray(v) for k, v in values.items()})
