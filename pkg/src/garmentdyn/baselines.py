"""Reference solvers the FEM solver is compared against.

* explicit mass-spring networks (structural, shear and bending springs),
* position based dynamics with edge distance constraints,
* a Neo-Hookean membrane energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from . import _kernels
from .assets import Material, TriangleMesh
from .constitutive import GRAVITY
from .errors import DegenerateElement, NumericalFailure
from .solver import Anchors, SimState

STRUCTURAL, SHEAR, BENDING = 0, 1, 2
SPRING_KINDS = ("structural", "shear", "bending")
DEGENERATE_LENGTH = 1e-12


# --- mass-spring ----------------------------------------------------------------

@dataclass
class SpringNetwork:
    """Springs as parallel arrays; ``kind`` holds STRUCTURAL / SHEAR / BENDING."""

    i: np.ndarray
    j: np.ndarray
    rest: np.ndarray
    ks: np.ndarray
    kd: np.ndarray
    kind: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, np.int64)
        self.j = np.asarray(self.j, np.int64)
        n = len(self.i)
        self.rest = np.asarray(self.rest, float).reshape(n)
        self.ks = np.broadcast_to(np.asarray(self.ks, float), (n,)).copy()
        self.kd = np.broadcast_to(np.asarray(self.kd, float), (n,)).copy()
        self.kind = np.broadcast_to(np.asarray(self.kind, np.int64), (n,)).copy()
        if n and not np.all(self.rest > 0):
            raise ValueError("spring rest lengths must be > 0")

    def __len__(self) -> int:
        return len(self.i)

    def counts(self) -> dict:
        return {name: int(np.sum(self.kind == k)) for k, name in enumerate(SPRING_KINDS)}

    def stiffness_matrix(self, n_vertices: int, x=None) -> sp.csr_matrix:
        """Spring Hessian ``k L_hat L_hat^T`` per spring (rest-state tangent)."""
        x = None if x is None else np.asarray(x, float).reshape(-1, 3)
        if x is None:
            raise ValueError("positions required")
        d = x[self.j] - x[self.i]
        nrm = np.linalg.norm(d, axis=1)
        u = d / np.maximum(nrm, DEGENERATE_LENGTH)[:, None]
        b = self.ks[:, None, None] * u[:, :, None] * u[:, None, :]
        blocks = np.stack([b, -b, -b, b], axis=1)  # ii, ij, ji, jj
        ri = np.stack([self.i, self.i, self.j, self.j], axis=1)
        rj = np.stack([self.i, self.j, self.i, self.j], axis=1)
        rows = (3 * ri[:, :, None, None] + np.arange(3)[:, None]).repeat(3, axis=3)
        cols = (3 * rj[:, :, None, None] + np.arange(3)[None, :]).repeat(3, axis=2)
        return sp.coo_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(3 * n_vertices, 3 * n_vertices)).tocsr()


def spring_force(ks, kd, rest, x_i, x_j, v_i, v_j):
    """Force on particle ``i`` from one spring, plus a degenerate flag.

    ``L = x_j - x_i``; the elastic part pulls ``i`` toward ``j`` when
    stretched and the damping part opposes the closing speed along ``L``.
    The force on ``j`` is the negative.
    """
    L = np.asarray(x_j, float) - np.asarray(x_i, float)
    length = float(np.linalg.norm(L))
    if length < DEGENERATE_LENGTH:
        return np.zeros(3), True
    u = L / length
    v_rel = np.asarray(v_i, float) - np.asarray(v_j, float)
    f = ks * (length - rest) * u - kd * float(v_rel @ L) / length * u
    return f, False


def spring_forces(network: SpringNetwork, x, v) -> tuple:
    """Total spring force per vertex (N, 3) and the count of degenerate springs."""
    x = np.asarray(x, float).reshape(-1, 3)
    v = np.asarray(v, float).reshape(-1, 3)
    L = x[network.j] - x[network.i]
    length = np.linalg.norm(L, axis=1)
    bad = length < DEGENERATE_LENGTH
    u = L / np.where(bad, 1.0, length)[:, None]
    v_rel = v[network.i] - v[network.j]
    mag = network.ks * (length - network.rest) - network.kd * np.einsum("ij,ij->i", v_rel, u)
    f = np.where(bad[:, None], 0.0, mag[:, None] * u)
    out = np.zeros_like(x)
    for k in range(3):
        out[:, k] = (np.bincount(network.i, weights=f[:, k], minlength=len(x))
                     - np.bincount(network.j, weights=f[:, k], minlength=len(x)))
    return out, int(bad.sum())


def _grid_springs(nx: int, ny: int):
    idx = np.arange(nx * ny).reshape(ny, nx)
    structural = np.concatenate([
        np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1),
        np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], 1)])
    shear = np.concatenate([
        np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()], 1),
        np.stack([idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()], 1)])
    bending = np.concatenate([
        np.stack([idx[:, :-2].ravel(), idx[:, 2:].ravel()], 1),
        np.stack([idx[:-2, :].ravel(), idx[2:, :].ravel()], 1)])
    return structural, shear, bending


def build_spring_network(mesh: TriangleMesh, material: Material, damping_ratio: float = 0.05,
                         ks_scale: float = 1.0) -> SpringNetwork:
    """Spring network for a mesh using the fabric's stiffnesses.

    Structural springs get the warp/weft stretch stiffness, shear springs the
    shear stiffness and bending springs ``k_bend / L0^2`` so that a small
    out-of-plane kink costs about the same energy as in the hinge model.
    Grid meshes get the classic layout (quad diagonals as shear springs,
    second neighbours as bending springs); other meshes use their edges as
    structural springs and the hinge wing tips as bending springs.

    Damping per spring is ``2 * damping_ratio * sqrt(k_s * m)`` with ``m``
    the mean vertex mass.
    """
    x0 = mesh.rest_positions
    if mesh.grid_shape is not None:
        structural, shear, bending = _grid_springs(*mesh.grid_shape)
    else:
        structural = mesh.edges
        shear = np.zeros((0, 2), np.int64)
        bending = mesh.hinges[:, 2:4] if len(mesh.hinges) else np.zeros((0, 2), np.int64)
    pairs = np.concatenate([structural, shear, bending]).astype(np.int64)
    kind = np.concatenate([np.full(len(structural), STRUCTURAL), np.full(len(shear), SHEAR),
                           np.full(len(bending), BENDING)])
    d = x0[pairs[:, 1]] - x0[pairs[:, 0]]
    rest = np.linalg.norm(d, axis=1)
    # warp runs along rest-space x
    along = np.abs(d[:, 0]) >= np.abs(d[:, 1])
    k_stretch = np.where(along, material.stretch_warp, material.stretch_weft)
    k_bend = np.where(along, material.bend_warp, material.bend_weft) / rest**2
    ks = np.select([kind == STRUCTURAL, kind == SHEAR], [k_stretch, material.stretch_shear], k_bend) * ks_scale
    mass = mesh.vertex_mass
    m = float(np.mean(mass)) if mass is not None and np.any(mass > 0) else 1.0
    kd = 2.0 * damping_ratio * np.sqrt(ks * m)
    return SpringNetwork(pairs[:, 0], pairs[:, 1], rest, ks, kd, kind)


def mass_spring_step(state: SimState, network: SpringNetwork, masses, h: float, gravity=GRAVITY,
                     anchors: Optional[Anchors] = None, integrator: str = "symplectic") -> SimState:
    """One explicit step: ``v += h (F/m + g)`` then ``x += h v``.

    ``integrator="forward"`` advances positions with the old velocity
    instead. Anchored vertices are overridden with their prescribed
    positions; their velocity is set to match the move.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    masses = np.asarray(masses, float)
    f, _ = spring_forces(network, state.x, state.v)
    acc = f / masses[:, None] + np.asarray(gravity, float)
    if integrator == "symplectic":
        v = state.v + h * acc
        x = state.x + h * v
    elif integrator == "forward":
        x = state.x + h * state.v
        v = state.v + h * acc
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    if anchors is not None and len(anchors.indices):
        idx = anchors.indices
        v[idx] = (anchors.positions - state.x[idx]) / h
        x[idx] = anchors.positions
    out = SimState(x, v, state.t + h)
    if not out.is_finite():
        raise NumericalFailure("mass-spring step produced non-finite values", partial=out)
    return out


def largest_stable_step(network: SpringNetwork, masses, x=None, anchored=None, safety: float = 1.0) -> float:
    """Largest stable symplectic Euler step for the linearized network.

    For a mode ``x'' + gamma x' + omega^2 x = 0`` symplectic Euler is stable
    iff ``h^2 omega^2 + 2 h gamma < 4``. ``omega_max^2`` is the largest
    eigenvalue of ``M^-1 K`` at positions ``x`` with anchored vertices
    removed, and damping is bounded by ``gamma <= beta omega^2`` with
    ``beta = max kd / ks``.
    """
    masses = np.asarray(masses, float)
    n = len(masses)
    if x is None:
        raise ValueError("positions required")
    K = network.stiffness_matrix(n, x)
    free = np.ones(n, bool) if anchored is None else ~np.asarray(anchored, bool)
    dofs = (3 * np.flatnonzero(free)[:, None] + np.arange(3)).ravel()
    s = 1.0 / np.sqrt(np.repeat(masses, 3)[dofs])
    A = sp.diags(s) @ K[dofs][:, dofs] @ sp.diags(s)
    if len(dofs) <= 60:
        lam = float(np.linalg.eigvalsh(A.toarray())[-1])
    else:
        # a constant start vector is a rigid translation, which lies in the null space of K
        v0 = np.random.default_rng(0).uniform(0.5, 1.5, len(dofs))
        lam = float(eigsh(A, k=1, which="LA", v0=v0, return_eigenvectors=False)[0])
    pos = network.ks > 0
    beta = float(np.max(network.kd[pos] / network.ks[pos])) if pos.any() else 0.0
    h = (-beta * lam + np.sqrt((beta * lam) ** 2 + 4.0 * lam)) / lam
    return safety * h


# --- position based dynamics -------------------------------------------------------

@dataclass
class PbdConstraints:
    """Edge distance constraints and per-vertex inverse masses."""

    i: np.ndarray
    j: np.ndarray
    rest: np.ndarray
    inv_mass: np.ndarray
    iterations: int = 10

    def __post_init__(self):
        self.i = np.ascontiguousarray(self.i, np.int64)
        self.j = np.ascontiguousarray(self.j, np.int64)
        self.rest = np.ascontiguousarray(self.rest, float)
        self.inv_mass = np.ascontiguousarray(self.inv_mass, float)
        if len(self.rest) and not np.all(self.rest > 0):
            raise ValueError("constraint rest lengths must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, iterations: int = 10) -> "PbdConstraints":
        e = mesh.edges
        rest = np.linalg.norm(mesh.rest_positions[e[:, 1]] - mesh.rest_positions[e[:, 0]], axis=1)
        m = mesh.vertex_mass
        inv = np.divide(1.0, m, out=np.zeros_like(m), where=m > 0)
        inv[mesh.anchored] = 0.0
        return cls(e[:, 0], e[:, 1], rest, inv, iterations)


def project_constraints(p, constraints: PbdConstraints, iterations: int, inv_mass=None) -> np.ndarray:
    p = np.ascontiguousarray(p, float).copy()
    w = constraints.inv_mass if inv_mass is None else np.ascontiguousarray(inv_mass, float)
    _kernels.pbd_project(p, constraints.i, constraints.j, constraints.rest, w, int(iterations))
    return p


def project_constraints_reference(p, constraints: PbdConstraints, iterations: int, inv_mass=None):
    """Plain Python loop with the same projection order."""
    p = np.array(p, float)
    w = constraints.inv_mass if inv_mass is None else inv_mass
    for _ in range(iterations):
        for i, j, r in zip(constraints.i, constraints.j, constraints.rest):
            wsum = w[i] + w[j]
            if wsum == 0:
                continue
            d = p[i] - p[j]
            length = np.linalg.norm(d)
            if length < 1e-12:
                continue
            corr = (length - r) / (wsum * length) * d
            p[i] -= w[i] * corr
            p[j] += w[j] * corr
    return p


def pbd_step(state: SimState, constraints: PbdConstraints, h: float, gravity=GRAVITY,
             iterations: Optional[int] = None, anchors: Optional[Anchors] = None) -> SimState:
    """Predict, project distance constraints, recover velocities.

    Anchored vertices are treated as infinite mass and placed at their
    prescribed positions before projecting.
    """
    iterations = constraints.iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    w = constraints.inv_mass
    g = np.asarray(gravity, float)
    p = state.x + h * state.v + np.where(w[:, None] > 0, h * h * g, 0.0)
    if anchors is not None and len(anchors.indices):
        w = w.copy()
        w[anchors.indices] = 0.0
        p[anchors.indices] = anchors.positions
    p = project_constraints(p, constraints, iterations, w)
    return SimState(p, (p - state.x) / h, state.t + h)


# --- Neo-Hookean membrane -----------------------------------------------------------

def neo_hookean_membrane_energy(mesh: TriangleMesh, C10: float, x=None, thickness: float = 1.0):
    """Incompressible Neo-Hookean energy of a membrane and its gradient.

    Per triangle, with ``C = F^T F`` from the 3x2 deformation map,
    ``lambda1^2 + lambda2^2 = tr C`` and ``lambda3 = 1 / (lambda1 lambda2)``
    so ``I1_bar = tr C + 1 / det C`` and
    ``E = C10 (I1_bar - 3) * rest_area * thickness``.
    """
    x = mesh.positions if x is None else np.asarray(x, float).reshape(-1, 3)
    t = mesh.triangles
    ds = np.stack([x[t[:, 1]] - x[t[:, 0]], x[t[:, 2]] - x[t[:, 0]]], axis=2)  # (T, 3, 2)
    dm_inv = mesh.dm_inv
    F = ds @ dm_inv
    C = np.swapaxes(F, 1, 2) @ F
    det = C[:, 0, 0] * C[:, 1, 1] - C[:, 0, 1] * C[:, 1, 0]
    bad = np.flatnonzero(~(det >= 1e-18))  # lambda1 * lambda2 < 1e-9
    if len(bad):
        raise DegenerateElement(int(bad[0]), f"triangle {int(bad[0])} is collapsed")
    tr = C[:, 0, 0] + C[:, 1, 1]
    w = C10 * mesh.rest_area * thickness
    energy = float(np.sum(w * (tr + 1.0 / det - 3.0)))
    c_inv = np.empty_like(C)
    c_inv[:, 0, 0] = C[:, 1, 1]
    c_inv[:, 1, 1] = C[:, 0, 0]
    c_inv[:, 0, 1] = -C[:, 0, 1]
    c_inv[:, 1, 0] = -C[:, 1, 0]
    c_inv /= det[:, None, None]
    # d(tr C)/dF = 2F, d(1/det C)/dF = -2 F C^-1 / det C
    P = w[:, None, None] * (2.0 * F - 2.0 * (F @ c_inv) / det[:, None, None])
    G = P @ np.swapaxes(dm_inv, 1, 2)  # (T, 3, 2) gradient on corners 1 and 2
    grad = np.zeros_like(x)
    for k in range(3):
        grad[:, k] += np.bincount(t[:, 1], weights=G[:, k, 0], minlength=len(x))
        grad[:, k] += np.bincount(t[:, 2], weights=G[:, k, 1], minlength=len(x))
        grad[:, k] -= np.bincount(t[:, 0], weights=G[:, k, 0] + G[:, k, 1], minlength=len(x))
    return energy, grad
