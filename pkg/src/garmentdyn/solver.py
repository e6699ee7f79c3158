"""Implicit Euler stepping as energy minimization.

Each step minimizes

    L(x) = 1/(2 h^2) (x - x_hat)^T M (x - x_hat) + E(x),   x_hat = x_t + h v_t + h^2 g

with a few inexact Newton iterations. Every Newton system
``(M/h^2 + H) dx = -grad L`` is solved by a fixed budget of conjugate
gradient iterations preconditioned with a multilevel additive Schwarz (MAS)
block inverse. Anchored vertices are removed from the system and pinned to
their prescribed positions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from . import _kernels
from .assets import Material, TriangleMesh
from .constitutive import GRAVITY, ClothEnergy
from .errors import NumericalFailure, SingularBlock


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).reshape(-1, 3)
        self.v = np.array(self.v, dtype=float).reshape(-1, 3)
        if self.x.shape != self.v.shape:
            raise ValueError("positions and velocities differ in shape")

    @classmethod
    def at_rest(cls, mesh: TriangleMesh, t: float = 0.0) -> "SimState":
        return cls(mesh.positions.copy(), np.zeros_like(mesh.positions), t)

    def copy(self) -> "SimState":
        return SimState(self.x.copy(), self.v.copy(), self.t)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.x).all() and np.isfinite(self.v).all())


@dataclass(frozen=True)
class SolverConfig:
    h: float = 1.0 / 30.0
    newton_iters: int = 4
    pcg_iters: int = 50
    pcg_tol: float = 1e-4
    mas_levels: int = 3
    mas_block_size: int = 32
    newton_tol: float = 1e-9  # max |dx| (m) below which Newton stops early
    max_halvings: int = 20
    preconditioner: str = "mas"  # "mas", "jacobi" or "none"
    gravity: tuple = tuple(GRAVITY)

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if self.newton_iters < 1 or self.pcg_iters < 1:
            raise ValueError("newton_iters and pcg_iters must be >= 1")
        if self.mas_block_size < 1 or self.mas_levels < 1:
            raise ValueError("mas_block_size and mas_levels must be >= 1")
        if self.preconditioner not in ("mas", "jacobi", "none"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Anchors:
    """Prescribed end-of-step positions for a subset of vertices."""

    indices: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.indices) != len(self.positions):
            raise ValueError("anchor indices and positions differ in length")
        if not np.isfinite(self.positions).all():
            raise ValueError("anchor prescriptions must be finite")


# --- PCG ---------------------------------------------------------------------

def _dot(a, b) -> float:
    return float(np.einsum("i,i->", a, b))


@dataclass
class PcgResult:
    x: np.ndarray
    residual: float
    iterations: int


def pcg_solve(A, b, precond: Optional[Callable] = None, max_iters: int = 50, tol: float = 1e-4,
              x0=None) -> PcgResult:
    """Preconditioned conjugate gradients from ``x0`` (default zero).

    Stops when ``|r| <= tol |b|`` or after ``max_iters`` iterations and
    returns the best iterate, judged by the quadratic ``x.Ax/2 - b.x`` that CG
    minimizes (the residual norm itself is not monotone on stiff systems).
    """
    b = np.asarray(b, dtype=float)
    if (x0 is None and sp.issparse(A) and A.shape[0] % 3 == 0
            and (precond is None or isinstance(precond, MasPreconditioner))):
        return _pcg_compiled(as_bsr3(A), b, precond, max_iters, tol)
    return pcg_reference(A, b, precond, max_iters, tol, x0)


def as_bsr3(A) -> sp.bsr_matrix:
    """View a 3N x 3N matrix as block-sparse with one 3x3 block per vertex pair."""
    if sp.issparse(A) and A.format == "bsr" and A.blocksize == (3, 3):
        return A
    if sp.issparse(A):
        return sp.csr_matrix(A).tobsr(blocksize=(3, 3))
    return sp.bsr_matrix(np.asarray(A, float), blocksize=(3, 3))


def _pcg_compiled(A: sp.bsr_matrix, b, precond, max_iters, tol) -> PcgResult:
    if precond is None:
        packed = (np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64),
                  np.zeros(0, np.int64))
    else:
        packed = precond.packed()
    x, rel, k, status = _kernels.pcg(A.indptr.astype(np.int64), A.indices.astype(np.int64),
                                     np.ascontiguousarray(A.data),
                                     np.ascontiguousarray(b), int(max_iters), float(tol),
                                     precond is not None, *packed)
    res = PcgResult(x, rel, k)
    if status == 1:
        raise NumericalFailure(f"PCG breakdown at iteration {k}: p^T A p <= 0", partial=res)
    if status == 2:
        raise NumericalFailure("PCG residual is not finite", partial=res)
    return res


def pcg_reference(A, b, precond: Optional[Callable] = None, max_iters: int = 50, tol: float = 1e-4,
                  x0=None) -> PcgResult:
    """Plain-Python PCG loop; any callable preconditioner and warm starts."""
    b = np.asarray(b, dtype=float)
    bnorm = np.sqrt(_dot(b, b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return PcgResult(np.zeros_like(b), 0.0, 0)
    r = b - A @ x if x0 is not None else b.copy()
    rel = np.sqrt(_dot(r, r)) / bnorm
    best, best_phi = PcgResult(x.copy(), rel, 0), -0.5 * (_dot(x, b) + _dot(x, r))
    if rel <= tol:
        return best
    z = precond(r) if precond is not None else r.copy()
    p = z.copy()
    rz = _dot(r, z)
    for k in range(1, max_iters + 1):
        ap = A @ p
        pap = _dot(p, ap)
        if not pap > 0.0:
            raise NumericalFailure(f"PCG breakdown at iteration {k}: p^T A p = {pap:.3e}", partial=best)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rel = np.sqrt(_dot(r, r)) / bnorm
        if not np.isfinite(rel):
            raise NumericalFailure("PCG residual is not finite", partial=best)
        phi = -0.5 * (_dot(x, b) + _dot(x, r))
        if phi <= best_phi:
            best, best_phi = PcgResult(x.copy(), rel, k), phi
        if rel <= tol:
            break
        z = precond(r) if precond is not None else r
        rz_new = _dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    best.iterations = k
    return best


# --- MAS preconditioner --------------------------------------------------------

@dataclass
class MasLevel:
    n_nodes: int
    block_nodes: int  # nodes per subdomain
    inverses: np.ndarray  # (n_blocks, 3 * block_nodes, 3 * block_nodes)


@dataclass
class MasPreconditioner:
    """Sum over levels of block-diagonal inverses on non-overlapping subdomains.

    Vertices are first ranked by ``perm`` (a vertex permutation, identity if
    None). On level 0 the nodes are the ranked vertices; the nodes of level
    l+1 are the subdomains of level l, i.e. runs of ``block_nodes``
    consecutive level-l nodes (piecewise-constant aggregation).
    """

    levels: list = field(default_factory=list)
    n_vertices: int = 0
    perm: Optional[np.ndarray] = None
    _packed: Optional[tuple] = field(default=None, repr=False)

    def packed(self) -> tuple:
        """Flat arrays consumed by the compiled apply / PCG kernels."""
        if self._packed is None:
            perm = np.arange(self.n_vertices) if self.perm is None else self.perm
            flats = [lv.inverses.reshape(-1) for lv in self.levels]
            off = np.concatenate([[0], np.cumsum([len(f) for f in flats])[:-1]]).astype(np.int64)
            self._packed = (np.ascontiguousarray(perm, np.int64), np.concatenate(flats), off,
                            np.array([lv.n_nodes for lv in self.levels], np.int64),
                            np.array([lv.block_nodes for lv in self.levels], np.int64))
        return self._packed

    def apply(self, r: np.ndarray) -> np.ndarray:
        out = np.empty(3 * self.n_vertices)
        _kernels.mas_apply(np.ascontiguousarray(r, float), *self.packed(), out)
        return out

    def apply_reference(self, r: np.ndarray) -> np.ndarray:
        """Vectorized numpy version of :meth:`apply`."""
        rv = np.asarray(r, float).reshape(-1, 3)
        if self.perm is not None:
            rv = rv[self.perm]
        z = np.zeros_like(rv)
        fine = 1  # vertices per node on the current level
        for lv in self.levels:
            nb, bn = len(lv.inverses), lv.block_nodes
            rc = np.zeros((nb * bn, 3))
            rc[: lv.n_nodes] = rv
            zc = np.matmul(lv.inverses, rc.reshape(nb, 3 * bn, 1)).reshape(-1, 3)[: lv.n_nodes]
            z += np.repeat(zc, fine, axis=0)[: self.n_vertices] if fine > 1 else zc
            if len(self.levels) > 1:
                rv = rc.reshape(nb, bn, 3).sum(axis=1)
                fine *= bn
        if self.perm is not None:
            out = np.empty_like(z)
            out[self.perm] = z
            z = out
        return z.reshape(-1)

    def __call__(self, r):
        return self.apply(r)

    def node_maps(self) -> list:
        """Per level, the node index of every (unpermuted) vertex."""
        rank = np.arange(self.n_vertices)
        if self.perm is not None:
            rank = np.empty(self.n_vertices, np.int64)
            rank[self.perm] = np.arange(self.n_vertices)
        maps, fine = [], 1
        for lv in self.levels:
            maps.append(rank // fine)
            fine *= lv.block_nodes
        return maps

    def block_matrices(self, A) -> list:
        """Dense subdomain blocks of each level's aggregated operator."""
        A = as_bsr3(A)
        return [_level_blocks(A, nov, lv.n_nodes, lv.block_nodes)
                for nov, lv in zip(self.node_maps(), self.levels)]


def morton_order(points: np.ndarray, bits: int = 10) -> np.ndarray:
    """Vertex permutation sorting points along a 3D Z-order curve."""
    pts = np.asarray(points, float).reshape(-1, 3)
    lo = pts.min(axis=0)
    span = max(float(np.ptp(pts, axis=0).max()), 1e-300)
    q = np.minimum(((pts - lo) / span * (2**bits - 1)).astype(np.int64), 2**bits - 1)
    code = np.zeros(len(pts), np.int64)
    for b in range(bits):
        for k in range(3):
            code |= ((q[:, k] >> b) & 1) << (3 * b + k)
    return np.argsort(code, kind="stable")


def _level_blocks(A: sp.bsr_matrix, node_of_vertex, n_nodes, block_nodes):
    """Dense subdomain blocks of the aggregated operator ``P^T A P``.

    Entries of the fine matrix are summed straight into the blocks, so the
    coarse operator itself is never formed. Padding rows of the last block
    get a unit diagonal.
    """
    m = 3 * block_nodes
    nb = -(-n_nodes // block_nodes)
    blocks = np.zeros((nb, m, m))
    _kernels.level_blocks(A.indptr.astype(np.int64), A.indices.astype(np.int64), np.ascontiguousarray(A.data),
                          np.ascontiguousarray(node_of_vertex, np.int64), block_nodes, blocks)
    pad = nb * m - 3 * n_nodes
    if pad:
        idx = np.arange(m - pad, m)
        blocks[-1, idx, idx] = 1.0
    return blocks


def _invert_blocks(blocks: np.ndarray, level: int) -> np.ndarray:
    """Inverse of every block: Cholesky for the (usual) SPD case, LU otherwise."""
    inv = np.empty_like(blocks)
    tril = np.tril_indices(blocks.shape[1], -1)
    for k, blk in enumerate(blocks):
        c, info = lapack.dpotrf(blk, lower=1)
        if info == 0:
            ik, info = lapack.dpotri(c, lower=1)
            if info == 0:
                ik[tril[::-1]] = ik[tril]  # dpotri fills the lower triangle only
                inv[k] = ik
                continue
        try:
            inv[k] = np.linalg.inv(blk)
        except np.linalg.LinAlgError:
            raise SingularBlock(level, k) from None
        if not np.isfinite(inv[k]).all() or np.linalg.cond(blk) > 1e15:
            raise SingularBlock(level, k)
    return inv


def build_mas(A, config: SolverConfig = SolverConfig(), levels: Optional[int] = None,
              block_size: Optional[int] = None, order=None) -> MasPreconditioner:
    """Invert the subdomain blocks of every level of ``A`` (3n x 3n SPD).

    ``order`` is the vertex sequence cut into level-0 subdomains; by default
    the matrix order is used.
    """
    A = as_bsr3(A)
    n = A.shape[0] // 3
    levels = config.mas_levels if levels is None else levels
    bs = config.mas_block_size if block_size is None else block_size
    perm = None if order is None else np.asarray(order, np.int64)
    out = MasPreconditioner(n_vertices=n, perm=perm)
    if perm is None:
        node_of_vertex = np.arange(n)
    else:
        node_of_vertex = np.empty(n, np.int64)
        node_of_vertex[perm] = np.arange(n)
    n_nodes = n
    for lvl in range(levels):
        bn = min(bs, n_nodes)
        blocks = _level_blocks(A, node_of_vertex, n_nodes, bn)
        inv = _invert_blocks(blocks, lvl)
        out.levels.append(MasLevel(n_nodes, bn, inv))
        n_domains = len(blocks)
        if n_domains == 1:
            break
        node_of_vertex = node_of_vertex // bn
        n_nodes = n_domains
    return out


def build_jacobi(A) -> MasPreconditioner:
    """Per-vertex 3x3 block Jacobi (MAS with one level and unit blocks)."""
    return build_mas(A, levels=1, block_size=1)


def make_preconditioner(A, config: SolverConfig, order=None):
    if config.preconditioner == "none":
        return None
    if config.preconditioner == "jacobi":
        return build_jacobi(A)
    return build_mas(A, config, order=order)


# --- stepping ---------------------------------------------------------------

@dataclass
class StepInfo:
    newton_iters: int = 0
    pcg_iters: list = field(default_factory=list)
    pcg_residuals: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    stalled: bool = False


class ImplicitSolver:
    """Reusable stepping context for one mesh and material."""

    def __init__(self, mesh: TriangleMesh, material: Material, config: SolverConfig = SolverConfig()):
        if mesh.vertex_mass is None or not np.all(mesh.vertex_mass > 0):
            raise ValueError("mesh needs positive lumped masses (assign_material first)")
        self.mesh = mesh
        self.material = material
        self.config = config
        self.energy = ClothEnergy(mesh, material)
        self.mass3 = np.repeat(mesh.vertex_mass, 3)
        self.last_info = StepInfo()
        self._plans = {}
        self.energy.assembler  # noqa: B018  build the sparsity pattern up front

    # objective pieces ------------------------------------------------------
    def _objective(self, x, x_hat, contacts, f_ext):
        d = (x - x_hat).reshape(-1)
        val = 0.5 / self.config.h**2 * float(np.einsum("i,i,i->", self.mass3, d, d)) + self.energy.energy(x)
        if contacts is not None:
            val += contacts.energy(x)
        if f_ext is not None:
            val -= float(np.einsum("i,i->", f_ext.reshape(-1), x.reshape(-1)))
        return val

    def _gradient(self, x, x_hat, contacts, f_ext):
        g = self.mesh.vertex_mass[:, None] / self.config.h**2 * (x - x_hat) + self.energy.gradient(x)
        if contacts is not None:
            g += contacts.gradient(x)
        if f_ext is not None:
            g -= f_ext
        return g

    def _matrix(self, x, contacts):
        A = self.energy.hessian(x, diagonal=self.mass3 / self.config.h**2)
        if contacts is not None:
            Ac = contacts.hessian(x, self.mesh.n_vertices)
            if Ac is not None:
                A = A + Ac
        return A

    def _plan(self, free: np.ndarray) -> "_FreePlan":
        key = free.tobytes()
        plan = self._plans.get(key)
        if plan is None:
            if len(self._plans) > 8:
                self._plans.clear()
            plan = self._plans[key] = _FreePlan(self.energy.assembler, free, self.mesh.rest_positions)
        return plan

    def _reduced_matrix(self, x, contacts, plan: "_FreePlan"):
        A = plan.extract(self.energy.hessian(x, diagonal=self.mass3 / self.config.h**2))
        if contacts is not None:
            Ac = contacts.hessian(x, self.mesh.n_vertices)
            if Ac is not None:
                A = as_bsr3(A + Ac[plan.free_dofs][:, plan.free_dofs])
        return A

    def predictor(self, state: SimState) -> np.ndarray:
        h = self.config.h
        return state.x + h * state.v + h * h * np.asarray(self.config.gravity, float)

    def free_mask(self, anchors: Optional[Anchors]) -> np.ndarray:
        fixed = self.mesh.anchored.copy()
        if anchors is not None:
            fixed[anchors.indices] = True
        return ~fixed

    def initial_guess(self, state: SimState, anchors: Optional[Anchors]) -> np.ndarray:
        # inertial guess without gravity: exact for a cloth already in equilibrium
        x = state.x + self.config.h * state.v
        fixed = self.mesh.anchored
        x[fixed] = state.x[fixed]
        if anchors is not None:
            x[anchors.indices] = anchors.positions
        return x

    def assemble_system(self, state: SimState, anchors: Optional[Anchors] = None, contacts=None,
                        x=None, f_ext=None):
        """Reduced Newton system at ``x`` (default: the initial guess).

        Returns ``(A_ff, rhs_f, free_dofs)`` where ``A_ff`` is ``M/h^2 + H``
        restricted to free degrees of freedom and ``rhs_f = -grad L``.
        """
        x_hat = self.predictor(state)
        if x is None:
            x = self.initial_guess(state, anchors)
        plan = self._plan(self.free_mask(anchors))
        A_ff = self._reduced_matrix(x, contacts, plan)
        g = self._gradient(x, x_hat, contacts, f_ext).reshape(-1)
        return A_ff, -g[plan.free_dofs], plan.free_dofs

    def step(self, state: SimState, anchors: Optional[Anchors] = None, contacts=None) -> SimState:
        cfg = self.config
        info = StepInfo()
        self.last_info = info
        x_hat = self.predictor(state)
        x = self.initial_guess(state, anchors)
        plan = self._plan(self.free_mask(anchors))
        free_dofs = plan.free_dofs
        f_ext = contacts.friction_force(state, self.mesh.vertex_mass, cfg.h) if contacts is not None else None

        obj = self._objective(x, x_hat, contacts, f_ext)
        if not np.isfinite(obj):
            raise NumericalFailure("objective is not finite at the initial guess")
        info.objective.append(obj)
        pre = None
        free_cloth = len(free_dofs) == 3 * len(x) and (contacts is None or len(contacts) == 0)
        total_mass = float(self.mesh.vertex_mass.sum())
        if len(free_dofs):
            for _ in range(cfg.newton_iters):
                g = self._gradient(x, x_hat, contacts, f_ext).reshape(-1)[free_dofs]
                A = self._reduced_matrix(x, contacts, plan)
                if pre is None:  # built once per step, reused by later Newton iterations
                    pre = make_preconditioner(A, cfg)
                res = pcg_solve(A, -g, pre, cfg.pcg_iters, cfg.pcg_tol)
                info.newton_iters += 1
                info.pcg_iters.append(res.iterations)
                info.pcg_residuals.append(res.residual)
                dx = np.zeros(3 * len(x))
                dx[free_dofs] = res.x
                dx = dx.reshape(-1, 3)
                if free_cloth:
                    # the elastic Hessian has no net force along a rigid translation, so the
                    # translation part of the Newton equations can be solved exactly
                    sum_g = g.reshape(-1, 3).sum(axis=0)
                    dx -= (self.mesh.vertex_mass @ dx + cfg.h**2 * sum_g) / total_mass
                info.step_sizes.append(float(np.max(np.abs(dx))))
                info.grad_norms.append(float(np.max(np.abs(g))))
                if np.max(np.abs(dx)) < cfg.newton_tol:
                    break
                alpha = 1.0
                accepted = False
                for halving in range(cfg.max_halvings + 1):
                    trial = x + alpha * dx
                    val = self._objective(trial, x_hat, contacts, f_ext)
                    if not np.isfinite(val):
                        raise NumericalFailure("objective became non-finite during line search")
                    if val <= obj:
                        accepted = True
                        break
                    alpha *= 0.5
                info.halvings.append(halving)
                if not accepted:
                    info.stalled = True
                    break
                x, obj = trial, val
                info.objective.append(obj)
        v = (x - state.x) / cfg.h
        damping = self.material.damping
        if damping > 0:
            v *= max(0.0, 1.0 - damping * cfg.h)
        new = SimState(x, v, state.t + cfg.h)
        if not new.is_finite():
            raise NumericalFailure("non-finite state after step")
        return new


class _FreePlan:
    """Free-DOF restriction of the assembler's fixed CSR pattern.

    Free vertices are renumbered along a Morton curve so that runs of
    consecutive vertices, which the MAS preconditioner groups into
    subdomains, are spatially compact.
    """

    def __init__(self, asm, free: np.ndarray, rest_positions: np.ndarray):
        verts = np.flatnonzero(free)
        if len(verts):
            verts = verts[morton_order(rest_positions[verts])]
        self.free_dofs = (3 * verts[:, None] + np.arange(3)).reshape(-1)
        self.n = len(self.free_dofs)
        newidx = np.full(asm.n, -1, np.int64)
        newidx[self.free_dofs] = np.arange(self.n)
        r, c = newidx[asm.rows], newidx[asm.cols]
        keep = np.flatnonzero((r >= 0) & (c >= 0))
        r, c = r[keep], c[keep]
        # the assembled pattern is made of whole 3x3 vertex blocks
        srt = np.lexsort((c % 3, r % 3, c // 3, r // 3))
        self.keep = keep[srt]
        brow, bcol = r[srt][::9] // 3, c[srt][::9] // 3
        self.indices = bcol
        counts = np.bincount(brow, minlength=self.n // 3)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def extract(self, A: sp.csr_matrix) -> sp.bsr_matrix:
        data = A.data[self.keep].reshape(-1, 3, 3)
        return sp.bsr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def step(state: SimState, mesh: TriangleMesh, material: Material, config: SolverConfig = SolverConfig(),
         anchors: Optional[Anchors] = None, contacts=None) -> SimState:
    """One implicit step; builds a throwaway :class:`ImplicitSolver`."""
    return ImplicitSolver(mesh, material, config).step(state, anchors, contacts)


def assemble_system(mesh: TriangleMesh, material: Material, state: SimState, h: float, contacts=None,
                    anchors: Optional[Anchors] = None):
    cfg = SolverConfig(h=h)
    return ImplicitSolver(mesh, material, cfg).assemble_system(state, anchors, contacts, x=state.x)
