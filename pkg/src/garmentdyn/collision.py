"""Proximity detection, penalty contact and untangling.

Contacts are detected once per step at the start-of-step positions. Each
contact freezes its unit normal ``n`` and the weights ``c`` of its four
vertices (positive on the vertex / first edge, negative on the triangle /
second edge), so that during the step its gap

    g(x) = n . sum_i c_i x_i - offset

is linear in the positions. The penalty ``k/2 max(0, d_hat - g)^2`` then has
an exact, positive semidefinite Hessian ``k (c c^T) kron (n n^T)``.
Environment contacts (half-spaces, spheres) use the same representation with
a single vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import UntangleFailed

VERTEX_TRIANGLE = "vertex-triangle"
EDGE_EDGE = "edge-edge"
ENVIRONMENT = "environment"
_KIND_CODE = {VERTEX_TRIANGLE: 0, EDGE_EDGE: 1, ENVIRONMENT: 2}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


# --- BVH ------------------------------------------------------------------------

@dataclass
class Bvh:
    """Binary AABB tree over mesh primitives (triangles, edges or points).

    Node arrays are indexed by node id, root = 0. Internal nodes have
    ``prim == -1``; leaves hold one primitive and ``left == right == -1``.
    """

    elements: np.ndarray  # (P, k) vertex indices of each primitive
    inflation: float
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prim: np.ndarray
    leaf_of_prim: np.ndarray
    levels: list = field(default_factory=list)  # internal node ids grouped by depth

    @property
    def n_nodes(self) -> int:
        return len(self.prim)

    @property
    def n_primitives(self) -> int:
        return len(self.elements)

    def is_leaf(self, nodes):
        return self.prim[nodes] >= 0


def primitive_boxes(positions: np.ndarray, elements: np.ndarray, inflation: float = 0.0):
    pts = positions[elements]  # (P, k, 3)
    return pts.min(axis=1) - inflation, pts.max(axis=1) + inflation


def build_bvh(positions, elements, inflation: float = 0.0) -> Bvh:
    """Median split on the longest axis of the primitive centroids."""
    positions = np.asarray(positions, float).reshape(-1, 3)
    elements = np.asarray(elements, np.int64)
    if elements.ndim == 1:
        elements = elements[:, None]
    n = len(elements)
    if n < 1:
        raise ValueError("a BVH needs at least one primitive")
    lo_p, hi_p = primitive_boxes(positions, elements, inflation)
    cen = 0.5 * (lo_p + hi_p)
    m = 2 * n - 1
    left = np.full(m, -1, np.int64)
    right = np.full(m, -1, np.int64)
    prim = np.full(m, -1, np.int64)
    depth = np.zeros(m, np.int64)
    order = np.arange(n)
    stack = [(0, 0, n)]  # node, start, end over ``order``
    next_id = 1
    while stack:
        node, s, e = stack.pop()
        if e - s == 1:
            prim[node] = order[s]
            continue
        seg = order[s:e]
        c = cen[seg]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = (e - s) // 2
        # stable tie-break on primitive id keeps the build deterministic
        keyed = np.lexsort((seg, c[:, axis]))
        order[s:e] = seg[keyed]
        l, r = next_id, next_id + 1
        next_id += 2
        left[node], right[node] = l, r
        depth[l] = depth[r] = depth[node] + 1
        stack.append((r, s + half, e))
        stack.append((l, s, s + half))
    leaf_of_prim = np.empty(n, np.int64)
    leaves = np.flatnonzero(prim >= 0)
    leaf_of_prim[prim[leaves]] = leaves
    internal = np.flatnonzero(prim < 0)
    levels = [internal[depth[internal] == d] for d in range(int(depth.max()) + 1)] if len(internal) else []
    bvh = Bvh(elements, float(inflation), np.empty((m, 3)), np.empty((m, 3)), left, right, prim,
              leaf_of_prim, [lv for lv in levels if len(lv)])
    _fit(bvh, lo_p, hi_p)
    return bvh


def _fit(bvh: Bvh, lo_p, hi_p):
    leaves = bvh.leaf_of_prim
    bvh.lo[leaves] = lo_p
    bvh.hi[leaves] = hi_p
    for nodes in reversed(bvh.levels):
        bvh.lo[nodes] = np.minimum(bvh.lo[bvh.left[nodes]], bvh.lo[bvh.right[nodes]])
        bvh.hi[nodes] = np.maximum(bvh.hi[bvh.left[nodes]], bvh.hi[bvh.right[nodes]])


def refit_bvh(bvh: Bvh, positions, inflation: Optional[float] = None) -> Bvh:
    """Recompute all boxes bottom-up for new positions; topology is kept."""
    if inflation is not None:
        bvh.inflation = float(inflation)
    lo_p, hi_p = primitive_boxes(np.asarray(positions, float).reshape(-1, 3), bvh.elements, bvh.inflation)
    _fit(bvh, lo_p, hi_p)
    return bvh


def _overlap(lo_a, hi_a, lo_b, hi_b):
    return np.all((lo_a <= hi_b) & (lo_b <= hi_a), axis=-1)


def query_pairs(a: Bvh, b: Optional[Bvh] = None) -> np.ndarray:
    """Primitive pairs whose boxes overlap, sorted, as a (K, 2) array.

    With ``b`` None the tree is queried against itself and each unordered
    pair of distinct primitives is reported once with ``i < j``.
    """
    self_query = b is None
    b = a if self_query else b
    pa = np.zeros(1, np.int64)
    pb = np.zeros(1, np.int64)
    out = []
    while len(pa):
        keep = _overlap(a.lo[pa], a.hi[pa], b.lo[pb], b.hi[pb])
        pa, pb = pa[keep], pb[keep]
        if self_query:
            same = pa == pb
        leaf_a = a.prim[pa] >= 0
        leaf_b = b.prim[pb] >= 0
        both = leaf_a & leaf_b
        if self_query:
            both &= ~same
        out.append(np.stack([a.prim[pa[both]], b.prim[pb[both]]], axis=1))
        na, nb = [], []
        if self_query:
            # a node against itself: both children with themselves and each other
            s = pa[same & ~leaf_a]
            na += [a.left[s], a.right[s], a.left[s]]
            nb += [a.left[s], a.right[s], a.right[s]]
            rest = ~same & ~both
        else:
            rest = ~both
        ra, rb = pa[rest], pb[rest]
        la, lb = leaf_a[rest], leaf_b[rest]
        # descend the larger box unless it is a leaf
        vol_a = np.prod(a.hi[ra] - a.lo[ra], axis=1)
        vol_b = np.prod(b.hi[rb] - b.lo[rb], axis=1)
        split_a = ~la & (lb | (vol_a >= vol_b))
        sa, sb = ra[split_a], rb[split_a]
        na += [a.left[sa], a.right[sa]]
        nb += [sb, sb]
        ta, tb = ra[~split_a], rb[~split_a]
        na += [ta, ta]
        nb += [b.left[tb], b.right[tb]]
        pa = np.concatenate(na) if na else np.zeros(0, np.int64)
        pb = np.concatenate(nb) if nb else np.zeros(0, np.int64)
    # the traversal reaches every overlapping leaf pair exactly once
    pairs = np.concatenate(out) if out else np.zeros((0, 2), np.int64)
    if self_query:
        pairs = np.sort(pairs, axis=1)
    if len(pairs):
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return pairs.reshape(-1, 2)


def brute_force_pairs(lo_a, hi_a, lo_b=None, hi_b=None) -> np.ndarray:
    """O(n m) overlapping-box pairs (the oracle for :func:`query_pairs`)."""
    self_query = lo_b is None
    if self_query:
        lo_b, hi_b = lo_a, hi_a
    ov = np.all((lo_a[:, None] <= hi_b[None]) & (lo_b[None] <= hi_a[:, None]), axis=2)
    if self_query:
        ov = np.triu(ov, 1)
    return np.argwhere(ov).astype(np.int64).reshape(-1, 2)


# --- closest points -------------------------------------------------------------

def closest_point_triangle(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, vectorized.

    Returns ``(q, w)`` with barycentric weights ``w`` (sum 1, in [0, 1]).
    """
    p, a, b, c = (np.asarray(v, float).reshape(-1, 3) for v in (p, a, b, c))
    n = len(p)
    w = np.zeros((n, 3))
    done = np.zeros(n, bool)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    def take(mask, w0, w1, w2):
        m = mask & ~done
        w[m, 0], w[m, 1], w[m, 2] = w0[m], w1[m], w2[m]
        done[m] = True

    one, zero = np.ones(n), np.zeros(n)
    take((d1 <= 0) & (d2 <= 0), one, zero, zero)
    take((d3 >= 0) & (d4 <= d3), zero, one, zero)
    take((d6 >= 0) & (d5 <= d6), zero, zero, one)
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.clip(d1 / (d1 - d3), 0, 1)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        vb = d5 * d2 - d1 * d6
        t = np.clip(d2 / (d2 - d6), 0, 1)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        va = d3 * d6 - d5 * d4
        t = np.clip((d4 - d3) / ((d4 - d3) + (d5 - d6)), 0, 1)
        take((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), zero, 1 - t, t)
        denom = va + vb + vc
        v = vb / denom
        ww = vc / denom
        take(np.ones(n, bool), 1 - v - ww, v, ww)
    w = np.nan_to_num(w, nan=1.0 / 3.0)
    w = np.clip(w, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    q = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c
    return q, w


def closest_points_segments(p1, q1, p2, q2):
    """Closest points between segments [p1, q1] and [p2, q2], vectorized.

    Returns ``(s, t, c1, c2)`` with ``c1 = p1 + s (q1 - p1)`` and
    ``c2 = p2 + t (q2 - p2)``, s and t in [0, 1].
    """
    p1, q1, p2, q2 = (np.asarray(v, float).reshape(-1, 3) for v in (p1, q1, p2, q2))
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    eps = 1e-300
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-14 * a * e, np.clip((b * f - c * e) / denom, 0, 1), 0.0)
        t = (b * s + f) / np.maximum(e, eps)
        low, high = t < 0, t > 1
        t = np.clip(t, 0, 1)
        s = np.where(low, np.clip(-c / np.maximum(a, eps), 0, 1), s)
        s = np.where(high, np.clip((b - c) / np.maximum(a, eps), 0, 1), s)
    s = np.where(a <= eps, 0.0, s)
    t = np.where(e <= eps, 0.0, t)
    return s, t, p1 + s[:, None] * d1, p2 + t[:, None] * d2


# --- contacts -------------------------------------------------------------------

@dataclass(frozen=True)
class ContactConstraint:
    kind: str
    indices: tuple  # vt: (vertex, t0, t1, t2); ee: (e0, e1, f0, f1); environment: (vertex,)
    normal: np.ndarray
    gap: float
    weights: np.ndarray  # vt: triangle barycentrics (3); ee: (1-s, s, 1-t, t); environment: (1,)
    mu: float = 0.0


@dataclass
class ContactSet:
    """Vectorized contacts with frozen normals and vertex weights.

    ``coef[k]`` holds signed weights for the four vertices ``idx[k]``
    (unused slots have weight 0) and ``offset[k]`` the constant part of the
    gap, so ``gap_k(x) = normal[k] . sum_i coef[k, i] x[idx[k, i]] - offset[k]``.
    """

    kind: np.ndarray
    idx: np.ndarray
    coef: np.ndarray
    normal: np.ndarray
    offset: np.ndarray
    mu: np.ndarray
    k_contact: float = 1.0
    activation: float = 0.0  # d_hat

    @classmethod
    def empty(cls, k_contact: float = 1.0, activation: float = 0.0) -> "ContactSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 4), np.int64), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0), k_contact, activation)

    def __len__(self) -> int:
        return len(self.kind)

    def concat(self, other: "ContactSet") -> "ContactSet":
        return ContactSet(*(np.concatenate([getattr(self, f), getattr(other, f)])
                            for f in ("kind", "idx", "coef", "normal", "offset", "mu")),
                          self.k_contact, self.activation)

    def with_parameters(self, k_contact: float, activation: float) -> "ContactSet":
        return ContactSet(self.kind, self.idx, self.coef, self.normal, self.offset, self.mu, k_contact, activation)

    def gaps(self, x) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, 3)
        if not len(self):
            return np.zeros(0)
        pts = np.einsum("ki,kij->kj", self.coef, x[self.idx])
        return np.einsum("kj,kj->k", self.normal, pts) - self.offset

    def _violation(self, x):
        return np.maximum(0.0, self.activation - self.gaps(x))

    def energy(self, x) -> float:
        if not len(self):
            return 0.0
        v = self._violation(x)
        return float(0.5 * self.k_contact * np.einsum("k,k->", v, v))

    def normal_force_magnitudes(self, x) -> np.ndarray:
        return self.k_contact * self._violation(x)

    def vertex_forces(self, x) -> np.ndarray:
        """(K, 4, 3) force on each contact vertex (minus the energy gradient)."""
        f = self.normal_force_magnitudes(x)
        return f[:, None, None] * self.coef[:, :, None] * self.normal[:, None, :]

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, 3)
        g = np.zeros_like(x)
        if len(self):
            _scatter(g, self.idx, -self.vertex_forces(x))
        return g

    def hessian(self, x, n_vertices: Optional[int] = None) -> Optional[sp.csr_matrix]:
        x = np.asarray(x, float).reshape(-1, 3)
        n = len(x) if n_vertices is None else n_vertices
        if not len(self):
            return None
        active = np.flatnonzero(self._violation(x) > 0)
        if not len(active):
            return None
        c = self.coef[active]
        nn = self.normal[active]
        # 12x12 block per contact: k (c c^T) kron (n n^T)
        blocks = self.k_contact * (c[:, :, None, None, None] * c[:, None, None, :, None]
                                   * nn[:, None, :, None, None] * nn[:, None, None, None, :])
        blocks = blocks.reshape(len(active), 4, 3, 4, 3).reshape(len(active), 12, 12)
        dof = (3 * self.idx[active][:, :, None] + np.arange(3)).reshape(len(active), 12)
        rows = np.broadcast_to(dof[:, :, None], blocks.shape).reshape(-1)
        cols = np.broadcast_to(dof[:, None, :], blocks.shape).reshape(-1)
        return sp.coo_matrix((blocks.reshape(-1), (rows, cols)), shape=(3 * n, 3 * n)).tocsr()

    def friction_force(self, state, masses, h: float) -> np.ndarray:
        """Explicit Coulomb friction at the start-of-step state.

        Per contact the tangential force opposes the relative tangential
        velocity; it is the force that would cancel that velocity in one
        step, clamped to ``mu`` times the normal force.
        """
        x = np.asarray(state.x, float).reshape(-1, 3)
        f = np.zeros_like(x)
        if not len(self):
            return f
        fn = self.normal_force_magnitudes(x)
        sel = np.flatnonzero((fn > 0) & (self.mu > 0))
        if not len(sel):
            return f
        c = self.coef[sel]
        n = self.normal[sel]
        vrel = np.einsum("ki,kij->kj", c, np.asarray(state.v, float)[self.idx[sel]])
        vt = vrel - np.einsum("kj,kj->k", vrel, n)[:, None] * n
        speed = np.linalg.norm(vt, axis=1)
        inv_m = np.where(np.isfinite(masses) & (masses > 0), 1.0 / np.where(masses > 0, masses, 1.0), 0.0)
        w_inv = np.einsum("ki,ki->k", c * c, inv_m[self.idx[sel]])
        stop = np.divide(speed, h * w_inv, out=np.zeros_like(speed), where=w_inv > 0)
        mag = np.minimum(self.mu[sel] * fn[sel], stop)
        tdir = np.divide(vt, speed[:, None], out=np.zeros_like(vt), where=speed[:, None] > 0)
        ft = -(mag[:, None] * tdir)  # on the relative motion
        _scatter(f, self.idx[sel], c[:, :, None] * ft[:, None, :])
        return f

    def constraints(self, x) -> list:
        """The contacts as a list of :class:`ContactConstraint`, in set order."""
        g = self.gaps(x)
        out = []
        for k in range(len(self)):
            kind = _KIND_NAME[int(self.kind[k])]
            if kind == VERTEX_TRIANGLE:
                ind, w = tuple(int(i) for i in self.idx[k]), -self.coef[k, 1:]
            elif kind == EDGE_EDGE:
                ind, w = tuple(int(i) for i in self.idx[k]), np.abs(self.coef[k])
            else:
                ind, w = (int(self.idx[k, 0]),), self.coef[k, :1]
            out.append(ContactConstraint(kind, ind, self.normal[k].copy(), float(g[k]), w.copy(), float(self.mu[k])))
        return out


def _scatter(out, idx, vals):
    flat = idx.reshape(-1)
    v = vals.reshape(-1, 3)
    for k in range(3):
        out[:, k] += np.bincount(flat, weights=v[:, k], minlength=len(out))


# --- detection ------------------------------------------------------------------

@dataclass
class CollisionGeometry:
    """Cached primitive lists and BVHs for one mesh topology."""

    triangles: np.ndarray
    edges: np.ndarray
    tri_bvh: Optional[Bvh] = None
    edge_bvh: Optional[Bvh] = None
    point_bvh: Optional[Bvh] = None

    @classmethod
    def from_mesh(cls, mesh) -> "CollisionGeometry":
        return cls(np.asarray(mesh.triangles, np.int64), np.asarray(mesh.edges, np.int64))

    refits: int = 0
    rebuild_every: int = 50

    def update(self, x, radius: float):
        """Build the trees on first use and every ``rebuild_every`` calls,
        refit them otherwise. Boxes are inflated by half the radius so that
        two boxes overlap whenever their primitives are closer than it."""
        n = len(x)
        half = 0.5 * radius
        if self.tri_bvh is None or self.refits >= self.rebuild_every:
            self.tri_bvh = build_bvh(x, self.triangles, half)
            self.edge_bvh = build_bvh(x, self.edges, half)
            self.point_bvh = build_bvh(x, np.arange(n)[:, None], half)
            self.refits = 0
        else:
            refit_bvh(self.tri_bvh, x, half)
            refit_bvh(self.edge_bvh, x, half)
            refit_bvh(self.point_bvh, x, half)
            self.refits += 1


def _orient(diff, dist, fallback):
    n = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 1e-14)
    bad = dist <= 1e-14
    if bad.any():
        fb = fallback[bad]
        ln = np.linalg.norm(fb, axis=1)
        fb = np.divide(fb, ln[:, None], out=np.tile([0.0, 0.0, 1.0], (len(fb), 1)), where=ln[:, None] > 0)
        n[bad] = fb
    return n


def detect_contact_set(x, geometry: CollisionGeometry, thickness: float, contact_radius: float,
                       mu: float = 0.0, k_contact: float = 1.0, margin: float = 0.0) -> ContactSet:
    """Self contacts with distance below ``contact_radius + margin``.

    Pairs sharing a vertex are excluded. Output order: vertex-triangle
    contacts sorted by (vertex, triangle), then edge-edge contacts sorted by
    (edge, edge).
    """
    x = np.asarray(x, float).reshape(-1, 3)
    radius = contact_radius + margin
    geometry.update(x, radius)
    tris, edges = geometry.triangles, geometry.edges
    parts = [ContactSet.empty(k_contact, contact_radius)]

    vt = query_pairs(geometry.point_bvh, geometry.tri_bvh)
    if len(vt):
        v, t = vt[:, 0], vt[:, 1]
        keep = ~np.any(tris[t] == v[:, None], axis=1)
        v, t = v[keep], t[keep]
        tv = tris[t]
        q, w = closest_point_triangle(x[v], x[tv[:, 0]], x[tv[:, 1]], x[tv[:, 2]])
        diff = x[v] - q
        dist = np.linalg.norm(diff, axis=1)
        near = dist < radius
        v, t, tv, w, diff, dist = v[near], t[near], tv[near], w[near], diff[near], dist[near]
        face_n = np.cross(x[tv[:, 1]] - x[tv[:, 0]], x[tv[:, 2]] - x[tv[:, 0]])
        n = _orient(diff, dist, face_n)
        k = len(v)
        parts.append(ContactSet(np.zeros(k, np.int64), np.concatenate([v[:, None], tv], axis=1),
                                np.concatenate([np.ones((k, 1)), -w], axis=1), n,
                                np.full(k, float(thickness)), np.full(k, float(mu)), k_contact, contact_radius))

    ee = query_pairs(geometry.edge_bvh)
    if len(ee):
        a, b = edges[ee[:, 0]], edges[ee[:, 1]]
        keep = ~((a[:, :1] == b).any(axis=1) | (a[:, 1:] == b).any(axis=1))
        a, b = a[keep], b[keep]
        s, t, c1, c2 = closest_points_segments(x[a[:, 0]], x[a[:, 1]], x[b[:, 0]], x[b[:, 1]])
        diff = c1 - c2
        dist = np.linalg.norm(diff, axis=1)
        near = dist < radius
        a, b, s, t, diff, dist = a[near], b[near], s[near], t[near], diff[near], dist[near]
        cross = np.cross(x[a[:, 1]] - x[a[:, 0]], x[b[:, 1]] - x[b[:, 0]])
        n = _orient(diff, dist, cross)
        k = len(a)
        coef = np.stack([1 - s, s, -(1 - t), -t], axis=1)
        parts.append(ContactSet(np.ones(k, np.int64), np.concatenate([a, b], axis=1), coef, n,
                                np.full(k, float(thickness)), np.full(k, float(mu)), k_contact, contact_radius))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out


def detect_contacts(mesh, bvh=None, thickness: Optional[float] = None, contact_radius: Optional[float] = None,
                    x=None, mu: float = 0.0) -> list:
    """List of :class:`ContactConstraint` for a mesh at positions ``x``.

    ``bvh`` may be a :class:`CollisionGeometry` to reuse between calls.
    Thickness defaults to 0 and the contact radius to twice the thickness.
    Edge-edge weights are ``(1-s, s, 1-t, t)``: one barycentric pair per edge.
    """
    x = mesh.positions if x is None else np.asarray(x, float).reshape(-1, 3)
    thickness = 0.0 if thickness is None else float(thickness)
    contact_radius = 2.0 * thickness if contact_radius is None else float(contact_radius)
    geometry = bvh if isinstance(bvh, CollisionGeometry) else CollisionGeometry.from_mesh(mesh)
    cs = detect_contact_set(x, geometry, thickness, contact_radius, mu=mu)
    return cs.constraints(x)


@dataclass(frozen=True)
class HalfSpace:
    point: Sequence[float] = (0.0, 0.0, 0.0)
    normal: Sequence[float] = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class Sphere:
    center: Sequence[float]
    radius: float


def environment_contact_set(x, obstacles, thickness: float, contact_radius: float, mu: float = 0.0,
                            k_contact: float = 1.0, margin: float = 0.0) -> ContactSet:
    """Vertex contacts against analytic obstacles (half-spaces and spheres)."""
    x = np.asarray(x, float).reshape(-1, 3)
    out = ContactSet.empty(k_contact, contact_radius)
    radius = contact_radius + margin
    for ob in obstacles:
        if isinstance(ob, HalfSpace):
            nrm = np.asarray(ob.normal, float)
            nrm = nrm / np.linalg.norm(nrm)
            base = float(nrm @ np.asarray(ob.point, float))
            dist = x @ nrm - base
            v = np.flatnonzero(dist < radius)
            n = np.tile(nrm, (len(v), 1))
            off = np.full(len(v), base + thickness)
        elif isinstance(ob, Sphere):
            c = np.asarray(ob.center, float)
            diff = x - c
            r = np.linalg.norm(diff, axis=1)
            v = np.flatnonzero(r - ob.radius < radius)
            n = _orient(diff[v], r[v], np.tile([0.0, 0.0, 1.0], (len(v), 1)))
            off = n @ c + ob.radius + thickness
        else:
            raise TypeError(f"unsupported obstacle {type(ob).__name__}")
        k = len(v)
        idx = np.zeros((k, 4), np.int64)
        idx[:, 0] = v
        coef = np.zeros((k, 4))
        coef[:, 0] = 1.0
        out = out.concat(ContactSet(np.full(k, 2, np.int64), idx, coef, n, np.asarray(off, float).reshape(k),
                                    np.full(k, float(mu)), k_contact, contact_radius))
    return out


def contact_potential(contacts, k_contact: float, x, activation: Optional[float] = None, n_vertices=None):
    """Energy, gradient (N, 3) and Hessian (CSR or None) of the penalty."""
    cs = contacts if isinstance(contacts, ContactSet) else contact_set_from_constraints(contacts)
    act = cs.activation if activation is None else activation
    cs = cs.with_parameters(k_contact, act)
    return cs.energy(x), cs.gradient(x), cs.hessian(x, n_vertices)


def contact_set_from_constraints(constraints: Sequence[ContactConstraint], thickness: float = 0.0,
                                 activation: float = 0.0, k_contact: float = 1.0, x=None) -> ContactSet:
    """Rebuild the vectorized form; offsets are chosen so gaps match ``x`` if given."""
    k = len(constraints)
    cs = ContactSet.empty(k_contact, activation)
    if not k:
        return cs
    kind = np.array([_KIND_CODE[c.kind] for c in constraints], np.int64)
    idx = np.zeros((k, 4), np.int64)
    coef = np.zeros((k, 4))
    for i, c in enumerate(constraints):
        if c.kind == VERTEX_TRIANGLE:
            idx[i] = c.indices
            coef[i] = [1.0, *(-np.asarray(c.weights))]
        elif c.kind == EDGE_EDGE:
            idx[i] = c.indices
            w = np.asarray(c.weights)
            coef[i] = [w[0], w[1], -w[2], -w[3]]
        else:
            idx[i, 0] = c.indices[0]
            coef[i, 0] = 1.0
    normal = np.array([c.normal for c in constraints], float)
    offset = np.full(k, float(thickness))
    cs = ContactSet(kind, idx, coef, normal, offset, np.array([c.mu for c in constraints], float),
                    k_contact, activation)
    if x is not None:
        cs.offset = cs.offset + (cs.gaps(x) - np.array([c.gap for c in constraints]))
    return cs


# --- untangling -----------------------------------------------------------------

def untangle(x, contacts: ContactSet, masses, thickness: float, anchored=None, passes: int = 8,
             epsilon: Optional[float] = None):
    """Push penetrating contacts back to gap ``+epsilon`` along their normals.

    A contact is penetrating when its gap is below ``-thickness / 2``. The
    correction is split between the contact's vertices in proportion to
    inverse mass times weight (anchored vertices do not move). Returns the
    corrected positions and the number of corrections made; raises
    :class:`UntangleFailed` if penetrations remain after ``passes`` passes.
    """
    x = np.array(x, dtype=float).reshape(-1, 3)
    eps = 0.1 * thickness if epsilon is None else epsilon
    masses = np.asarray(masses, float)
    inv_m = np.divide(1.0, masses, out=np.zeros_like(masses), where=masses > 0)
    if anchored is not None:
        inv_m = np.where(np.asarray(anchored, bool), 0.0, inv_m)
    count = 0
    if not len(contacts):
        return x, 0
    for _ in range(passes):
        g = contacts.gaps(x)
        bad = np.flatnonzero(g < -0.5 * thickness)
        if not len(bad):
            return x, count
        # Gauss-Seidel over penetrating contacts in set order
        for k in bad:
            gk = float(contacts.normal[k] @ np.einsum("i,ij->j", contacts.coef[k], x[contacts.idx[k]])
                       - contacts.offset[k])
            if gk >= -0.5 * thickness:
                continue
            c = contacts.coef[k]
            w = c * c * inv_m[contacts.idx[k]]
            wsum = w.sum()
            if wsum <= 0:
                continue
            lam = (eps - gk) / wsum
            for i in range(4):
                if c[i] != 0.0:
                    x[contacts.idx[k, i]] += lam * c[i] * inv_m[contacts.idx[k, i]] * contacts.normal[k]
            count += 1
    g = contacts.gaps(x)
    if np.any(g < -0.5 * thickness):
        raise UntangleFailed(f"{int(np.sum(g < -0.5 * thickness))} penetrations left after {passes} passes",
                             positions=x, count=count)
    return x, count
