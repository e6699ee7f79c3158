"""Elastic potential of the cloth: anisotropic stretch/shear, hinge bending, gravity.

Positions are passed as (N, 3) arrays. Gradients come back with the same
shape; Hessians as scipy CSR matrices over the interleaved 3N degrees of
freedom ``(x0, y0, z0, x1, ...)``.

Stretch follows the condition-function form: per triangle the deformation
map F (3x2) sends the rest warp axis u and weft axis w to ``F u`` and ``F w``;
the conditions are ``|F u| - 1``, ``|F w| - 1`` and ``(F u) . (F w)``.
Bending is a dihedral-angle hinge energy whose restoring moment is
``k_b d + k_b2 d |d|`` in the angle deviation d.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .assets import Material, TriangleMesh
from . import _kernels
from .parallel import chunk_slices, map_chunks

GRAVITY = np.array([0.0, 0.0, -9.81])
LENGTH_FLOOR = 1e-9
AREA_FLOOR = 1e-12


def _psd_project(blocks: np.ndarray) -> np.ndarray:
    """Clamp negative eigenvalues of a stack of symmetric matrices to zero."""
    sym = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    w, q = np.linalg.eigh(sym)
    out = np.matmul(q * np.maximum(w, 0.0)[:, None, :], np.swapaxes(q, 1, 2))
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _as_positions(mesh: TriangleMesh, x) -> np.ndarray:
    if x is None:
        return mesh.positions
    return np.asarray(x, dtype=float).reshape(mesh.n_vertices, 3)


class StretchModel:
    """Per-triangle warp/weft stretch and shear energy."""

    def __init__(self, mesh: TriangleMesh, material: Material):
        self.mesh = mesh
        self.tris = mesh.triangles
        self.area = mesh.rest_area
        d = mesh.dm_inv
        coef = np.empty((mesh.n_triangles, 2, 3))
        coef[:, :, 1] = d[:, 0, :]
        coef[:, :, 2] = d[:, 1, :]
        coef[:, :, 0] = -(d[:, 0, :] + d[:, 1, :])
        self.coef = coef  # coef[t, j, a]: weight of corner a in column j of F
        self.k_warp = float(material.stretch_warp)
        self.k_weft = float(material.stretch_weft)
        self.k_shear = float(material.stretch_shear)
        self.degenerate_events = 0

    def _columns(self, x, s=slice(None)):
        c = self.coef[s]
        xt = x[self.tris[s]]  # (T, 3, 3)
        wu = np.einsum("ta,tai->ti", c[:, 0], xt)
        wv = np.einsum("ta,tai->ti", c[:, 1], xt)
        return wu, wv

    def _conditions(self, x, s=slice(None)):
        wu, wv = self._columns(x, s)
        lu = np.linalg.norm(wu, axis=1)
        lv = np.linalg.norm(wv, axis=1)
        return wu, wv, lu, lv, lu - 1.0, lv - 1.0, np.sum(wu * wv, axis=1)

    def _count_degenerate(self, wu, wv, lu, lv, s) -> int:
        # current area = |wu x wv| * rest area
        cross = np.linalg.norm(np.cross(wu, wv), axis=1)
        bad = (lu < LENGTH_FLOOR) | (lv < LENGTH_FLOOR) | (cross * self.area[s] < AREA_FLOOR)
        return int(np.count_nonzero(bad))

    def element_energy(self, x) -> np.ndarray:
        x = _as_positions(self.mesh, x)
        _, _, _, _, cu, cv, cs = self._conditions(x)
        return 0.5 * self.area * (self.k_warp * cu**2 + self.k_weft * cv**2 + self.k_shear * cs**2)

    def energy(self, x=None) -> float:
        return float(np.sum(self.element_energy(x)))

    def _dE_dw(self, x, s=slice(None)):
        wu, wv, lu, lv, cu, cv, cs = self._conditions(x, s)
        nu = wu / np.maximum(lu, LENGTH_FLOOR)[:, None]
        nv = wv / np.maximum(lv, LENGTH_FLOOR)[:, None]
        a = self.area[s][:, None]
        gu = a * (self.k_warp * cu[:, None] * nu + self.k_shear * cs[:, None] * wv)
        gv = a * (self.k_weft * cv[:, None] * nv + self.k_shear * cs[:, None] * wu)
        return wu, wv, lu, lv, cu, cv, cs, nu, nv, gu, gv

    def element_gradient(self, x) -> np.ndarray:
        """(T, 3, 3) gradient per triangle corner."""
        x = _as_positions(self.mesh, x)
        *_, gu, gv = self._dE_dw(x)
        return self.coef[:, 0, :, None] * gu[:, None, :] + self.coef[:, 1, :, None] * gv[:, None, :]

    def gradient(self, x=None) -> np.ndarray:
        g = self.element_gradient(x)
        return scatter_vectors(self.tris, g, self.mesh.n_vertices)

    def _hessian_chunk(self, x, s):
        wu, wv, lu, lv, cu, cv, cs, nu, nv, _, _ = self._dE_dw(x, s)
        bad = self._count_degenerate(wu, wv, lu, lv, s)
        n = len(wu)
        eye = np.eye(3)
        a = self.area[s][:, None, None]
        inv_lu = (1.0 / np.maximum(lu, LENGTH_FLOOR))[:, None, None]
        inv_lv = (1.0 / np.maximum(lv, LENGTH_FLOOR))[:, None, None]
        nnu = nu[:, :, None] * nu[:, None, :]
        nnv = nv[:, :, None] * nv[:, None, :]
        hw = np.empty((n, 6, 6))
        hw[:, :3, :3] = a * (self.k_warp * (nnu + cu[:, None, None] * (eye - nnu) * inv_lu)
                             + self.k_shear * wv[:, :, None] * wv[:, None, :])
        hw[:, 3:, 3:] = a * (self.k_weft * (nnv + cv[:, None, None] * (eye - nnv) * inv_lv)
                             + self.k_shear * wu[:, :, None] * wu[:, None, :])
        huv = a * self.k_shear * (wv[:, :, None] * wu[:, None, :] + cs[:, None, None] * eye)
        hw[:, :3, 3:] = huv
        hw[:, 3:, :3] = np.swapaxes(huv, 1, 2)
        p = _psd_project(hw)
        # J maps corner positions (9) to the two deformed axes (6): kron(coef, I3)
        c = self.coef[s]
        jac = np.zeros((n, 6, 9))
        for i in range(2):
            for a in range(3):
                for k in range(3):
                    jac[:, 3 * i + k, 3 * a + k] = c[:, i, a]
        h = np.matmul(np.swapaxes(jac, 1, 2), np.matmul(p, jac))
        return h, bad

    def hessian_blocks(self, x=None):
        """Element index array (T, 3) and PSD-projected 9x9 blocks."""
        x = np.ascontiguousarray(_as_positions(self.mesh, x))
        blocks = np.empty((self.mesh.n_triangles, 9, 9))

        def run(s):
            return _kernels.stretch_hessian(x, self.tris[s], self.coef[s], self.area[s], self.k_warp,
                                            self.k_weft, self.k_shear, blocks[s])

        self.degenerate_events += sum(map_chunks(run, self.mesh.n_triangles))
        return self.tris, blocks

    def hessian_blocks_reference(self, x=None):
        """Vectorized numpy version of :meth:`hessian_blocks` (full ``eigh``)."""
        x = _as_positions(self.mesh, x)
        parts = [self._hessian_chunk(x, s) for s in chunk_slices(self.mesh.n_triangles)]
        blocks = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 9, 9))
        return self.tris, blocks

    def hessian(self, x=None) -> sp.csr_matrix:
        idx, blocks = self.hessian_blocks(x)
        return assemble_blocks(self.mesh.n_vertices, [(idx, blocks)])


def dihedral_angles(x: np.ndarray, hinges: np.ndarray) -> np.ndarray:
    x0, x1, x2, x3 = (x[hinges[:, k]] for k in range(4))
    e = x1 - x0
    na = np.cross(e, x2 - x0)
    nb = np.cross(x0 - x1, x3 - x1)
    le = np.linalg.norm(e, axis=1)
    la = np.maximum(np.linalg.norm(na, axis=1), AREA_FLOOR)
    lb = np.maximum(np.linalg.norm(nb, axis=1), AREA_FLOOR)
    cos = np.sum(na * nb, axis=1) / (la * lb)
    sin = np.sum(np.cross(na, nb) * e, axis=1) / (la * lb * np.maximum(le, LENGTH_FLOOR))
    return np.arctan2(sin, cos)


def dihedral_gradient(x: np.ndarray, hinges: np.ndarray):
    """Angle and its gradient with respect to the four hinge vertices (H, 4, 3)."""
    x0, x1, x2, x3 = (x[hinges[:, k]] for k in range(4))
    e = x1 - x0
    na = np.cross(e, x2 - x0)
    nb = np.cross(x0 - x1, x3 - x1)
    le2 = np.maximum(np.sum(e * e, axis=1), LENGTH_FLOOR**2)
    le = np.sqrt(le2)
    la2 = np.maximum(np.sum(na * na, axis=1), AREA_FLOOR**2)
    lb2 = np.maximum(np.sum(nb * nb, axis=1), AREA_FLOOR**2)
    la, lb = np.sqrt(la2), np.sqrt(lb2)
    cos = np.sum(na * nb, axis=1) / (la * lb)
    sin = np.sum(np.cross(na, nb) * e, axis=1) / (la * lb * le)
    theta = np.arctan2(sin, cos)
    g2 = -(le / la2)[:, None] * na
    g3 = -(le / lb2)[:, None] * nb
    ta = (np.sum((x2 - x0) * e, axis=1) / le2)[:, None]
    tb = (np.sum((x3 - x0) * e, axis=1) / le2)[:, None]
    g0 = -(1.0 - ta) * g2 - (1.0 - tb) * g3
    g1 = -ta * g2 - tb * g3
    return theta, np.stack([g0, g1, g2, g3], axis=1)


class BendingModel:
    """Dihedral hinge bending over interior edges.

    Per hinge ``E = L^2 / A * (k_b / 2 * d^2 + k_b2 / 3 * |d|^3)`` with L the
    rest edge length, A the summed rest area of the two triangles and d the
    deviation from the rest angle. The Hessian keeps only the
    ``E''(theta) grad(theta) grad(theta)^T`` part, which is positive
    semidefinite because ``E'' >= 0``.
    """

    def __init__(self, mesh: TriangleMesh, material: Material):
        self.mesh = mesh
        h = mesh.hinges
        self.hinges = h[:, :4]
        rest = mesh.rest_positions
        self.rest_angle = dihedral_angles(rest, self.hinges)
        e = rest[h[:, 1]] - rest[h[:, 0]]
        self.rest_length = np.linalg.norm(e, axis=1)
        self.rest_area = mesh.rest_area[h[:, 4]] + mesh.rest_area[h[:, 5]]
        self.scale = self.rest_length**2 / self.rest_area
        # direction of curvature (in-plane normal to the hinge) against the warp axis
        frames = mesh.material_frames[h[:, 4]]
        tri = mesh.triangles[h[:, 4]]
        pos0 = np.argmax(tri == h[:, [0]], axis=1)
        pos1 = np.argmax(tri == h[:, [1]], axis=1)
        rows = np.arange(len(h))
        e2 = frames[rows, pos1] - frames[rows, pos0]
        n2 = np.linalg.norm(e2, axis=1)
        cos_phi = np.divide(-e2[:, 1], n2, out=np.zeros_like(n2), where=n2 > 0)
        self.k_b = material.bend_warp * cos_phi**2 + material.bend_weft * (1.0 - cos_phi**2)
        self.k_b2 = float(material.bend_quadratic)

    @property
    def n_hinges(self) -> int:
        return len(self.hinges)

    def element_energy(self, x) -> np.ndarray:
        x = _as_positions(self.mesh, x)
        d = dihedral_angles(x, self.hinges) - self.rest_angle
        ad = np.abs(d)
        return self.scale * (0.5 * self.k_b * d * d + self.k_b2 / 3.0 * ad**3)

    def energy(self, x=None) -> float:
        if not self.n_hinges:
            return 0.0
        return float(np.sum(self.element_energy(x)))

    def _moment(self, x, s=slice(None)):
        theta, gt = dihedral_gradient(x, self.hinges[s])
        d = theta - self.rest_angle[s]
        ad = np.abs(d)
        dE = self.scale[s] * (self.k_b[s] * d + self.k_b2 * d * ad)
        d2E = self.scale[s] * (self.k_b[s] + 2.0 * self.k_b2 * ad)
        return gt, dE, d2E

    def element_gradient(self, x) -> np.ndarray:
        x = _as_positions(self.mesh, x)
        gt, dE, _ = self._moment(x)
        return dE[:, None, None] * gt

    def gradient(self, x=None) -> np.ndarray:
        if not self.n_hinges:
            return np.zeros((self.mesh.n_vertices, 3))
        return scatter_vectors(self.hinges, self.element_gradient(x), self.mesh.n_vertices)

    def hessian_blocks(self, x=None):
        x = _as_positions(self.mesh, x)
        blocks = np.empty((self.n_hinges, 12, 12))

        def run(s):
            gt, _, d2E = self._moment(x, s)
            _kernels.hinge_hessian(gt.reshape(len(gt), 12), d2E, blocks[s])

        map_chunks(run, self.n_hinges)
        return self.hinges, blocks

    def hessian(self, x=None) -> sp.csr_matrix:
        idx, blocks = self.hessian_blocks(x)
        return assemble_blocks(self.mesh.n_vertices, [(idx, blocks)])


def gravity_energy(mesh: TriangleMesh, gravity=GRAVITY, x=None) -> float:
    x = _as_positions(mesh, x)
    return float(-np.sum(mesh.vertex_mass * (x @ np.asarray(gravity, float))))


def gravity_gradient(mesh: TriangleMesh, gravity=GRAVITY) -> np.ndarray:
    return -mesh.vertex_mass[:, None] * np.asarray(gravity, float)[None, :]


def scatter_vectors(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum per-element vertex vectors into an (n, 3) array in element order."""
    flat = idx.reshape(-1)
    v = vals.reshape(-1, 3)
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.bincount(flat, weights=v[:, k], minlength=n)
    return out


class BlockAssembler:
    """Fixed CSR pattern for a set of element index arrays.

    Element blocks are ordered (corner a, axis i, corner b, axis j). The
    pattern always includes the full diagonal so mass terms can be added in
    place. Values are accumulated sequentially in element order, so assembly
    is bitwise reproducible.
    """

    def __init__(self, n_vertices: int, index_arrays):
        self.n = 3 * n_vertices
        keys = [np.arange(self.n, dtype=np.int64) * (self.n + 1)]
        self.sizes = []
        for idx in index_arrays:
            idx = np.asarray(idx, np.int64)
            k = idx.shape[1]
            dof = (3 * idx[:, :, None] + np.arange(3)).reshape(len(idx), 3 * k)
            rows = np.broadcast_to(dof[:, :, None], (len(idx), 3 * k, 3 * k))
            cols = np.broadcast_to(dof[:, None, :], (len(idx), 3 * k, 3 * k))
            keys.append((rows * self.n + cols).reshape(-1))
            self.sizes.append(len(idx) * 9 * k * k)
        allkeys = np.concatenate(keys)
        uniq, inverse = np.unique(allkeys, return_inverse=True)
        self.nnz = len(uniq)
        self.inverse = inverse.astype(np.int64)
        self.diag_slots = self.inverse[: self.n]
        self.rows = uniq // self.n
        self.cols = uniq % self.n
        self.indptr = np.searchsorted(self.rows, np.arange(self.n + 1)).astype(np.int64)

    def assemble(self, blocks_list, diagonal=None) -> sp.csr_matrix:
        data = np.zeros(self.nnz)
        if diagonal is not None:
            data[self.diag_slots] = np.asarray(diagonal, float)
        start = self.n
        for b, size in zip(blocks_list, self.sizes):
            v = np.ascontiguousarray(b, float).reshape(-1)
            if len(v) != size:
                raise ValueError("block array does not match assembler pattern")
            _kernels.scatter_add(self.inverse[start:start + size], v, data)
            start += size
        return sp.csr_matrix((data, self.cols.copy(), self.indptr.copy()), shape=(self.n, self.n))


def assemble_blocks(n_vertices: int, parts) -> sp.csr_matrix:
    asm = BlockAssembler(n_vertices, [idx for idx, _ in parts])
    return asm.assemble([b for _, b in parts])


class ClothEnergy:
    """Stretch + bending (+ optional gravity potential) for one mesh."""

    def __init__(self, mesh: TriangleMesh, material: Material, gravity=None):
        self.mesh = mesh
        self.material = material
        self.stretch = StretchModel(mesh, material)
        self.bending = BendingModel(mesh, material)
        self.gravity = None if gravity is None else np.asarray(gravity, float)
        self._assembler = None

    @property
    def assembler(self) -> BlockAssembler:
        if self._assembler is None:
            self._assembler = BlockAssembler(self.mesh.n_vertices, [self.stretch.tris, self.bending.hinges])
        return self._assembler

    def energy(self, x=None) -> float:
        x = _as_positions(self.mesh, x)
        e = self.stretch.energy(x) + self.bending.energy(x)
        if self.gravity is not None:
            e += gravity_energy(self.mesh, self.gravity, x)
        return e

    def gradient(self, x=None) -> np.ndarray:
        x = _as_positions(self.mesh, x)
        g = self.stretch.gradient(x) + self.bending.gradient(x)
        if self.gravity is not None:
            g += gravity_gradient(self.mesh, self.gravity)
        return g

    def hessian(self, x=None, diagonal=None) -> sp.csr_matrix:
        x = _as_positions(self.mesh, x)
        _, hs = self.stretch.hessian_blocks(x)
        _, hb = self.bending.hessian_blocks(x)
        return self.assembler.assemble([hs, hb], diagonal=diagonal)

    @property
    def degenerate_events(self) -> int:
        return self.stretch.degenerate_events


def stretch_energy(mesh: TriangleMesh, material: Material, x=None) -> float:
    return StretchModel(mesh, material).energy(x)


def bending_energy(mesh: TriangleMesh, material: Material, x=None) -> float:
    return BendingModel(mesh, material).energy(x)


def total_energy(mesh: TriangleMesh, material: Material, gravity=GRAVITY, x=None) -> float:
    return ClothEnergy(mesh, material, gravity).energy(x)


def total_gradient(mesh: TriangleMesh, material: Material, gravity=GRAVITY, x=None) -> np.ndarray:
    return ClothEnergy(mesh, material, gravity).gradient(x)


def total_hessian(mesh: TriangleMesh, material: Material, x=None) -> sp.csr_matrix:
    return ClothEnergy(mesh, material).hessian(x)
