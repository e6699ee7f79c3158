"""Compiled per-element loops for the hot paths of the implicit solver.

Each kernel has a plain numpy counterpart elsewhere in the package that the
tests compare against. Kernels run sequentially inside one call and release
the GIL, so callers may run disjoint chunks on several threads.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LENGTH_FLOOR = 1e-9


@njit(cache=True, nogil=True)
def _jacobi_eigh(a, v):
    """Cyclic Jacobi eigensolver: on return ``a`` is diagonal (the
    eigenvalues) and the columns of ``v`` are the eigenvectors."""
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            v[i, j] = 1.0 if i == j else 0.0
    for sweep in range(50):
        off = 0.0
        scale = 0.0
        for i in range(n):
            scale += a[i, i] * a[i, i]
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if off <= 1e-30 * scale or off == 0.0:
            return
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq


@njit(cache=True, nogil=True)
def _project_inplace(h, work, vecs):
    """PSD-project a symmetric matrix in place; returns True if it was changed."""
    n = h.shape[0]
    # Cholesky test: positive pivots mean positive definite, nothing to do
    for i in range(n):
        for j in range(n):
            work[i, j] = h[i, j]
    ok = True
    for j in range(n):
        piv = work[j, j]
        if not piv > 1e-12 * (1.0 + abs(h[j, j])):
            ok = False
            break
        for i in range(j + 1, n):
            f = work[i, j] / piv
            for k in range(j + 1, n):
                work[i, k] -= f * work[j, k]
    if ok:
        return False
    for i in range(n):
        for j in range(n):
            work[i, j] = h[i, j]
    _jacobi_eigh(work, vecs)
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                wk = work[k, k]
                if wk > 0.0:
                    acc += vecs[i, k] * wk * vecs[j, k]
            h[i, j] = acc
    for i in range(n):
        for j in range(i + 1, n):
            m = 0.5 * (h[i, j] + h[j, i])
            h[i, j] = m
            h[j, i] = m
    return True


@njit(cache=True, nogil=True)
def _project_split(hw, wu, wv, basis, h4, h2, work, vecs):
    """PSD projection of the 6x6 stretch Hessian via its block structure.

    Every term lives in the plane of (wu, wv) or is a multiple of the identity,
    so in the frame (e1, e2, n) with n the deformed normal the matrix splits
    exactly into a 4x4 in-plane block and a 2x2 normal block, projected
    separately. Returns False (nothing done) for a degenerate frame.
    """
    nx = wu[1] * wv[2] - wu[2] * wv[1]
    ny = wu[2] * wv[0] - wu[0] * wv[2]
    nz = wu[0] * wv[1] - wu[1] * wv[0]
    ln = np.sqrt(nx * nx + ny * ny + nz * nz)
    lu = np.sqrt(wu[0] ** 2 + wu[1] ** 2 + wu[2] ** 2)
    if not ln > 1e-9 * lu * np.sqrt(wv[0] ** 2 + wv[1] ** 2 + wv[2] ** 2) or ln == 0.0:
        return False
    for i in range(3):
        basis[0, i] = wu[i] / lu
    basis[2, 0], basis[2, 1], basis[2, 2] = nx / ln, ny / ln, nz / ln
    basis[1, 0] = basis[2, 1] * basis[0, 2] - basis[2, 2] * basis[0, 1]
    basis[1, 1] = basis[2, 2] * basis[0, 0] - basis[2, 0] * basis[0, 2]
    basis[1, 2] = basis[2, 0] * basis[0, 1] - basis[2, 1] * basis[0, 0]
    # in-plane rows/cols are (block p, direction d) -> 2 p + d
    for p in range(2):
        for q in range(2):
            for d in range(3):
                for e in range(3):
                    acc = 0.0
                    for i in range(3):
                        for j in range(3):
                            acc += basis[d, i] * hw[3 * p + i, 3 * q + j] * basis[e, j]
                    if d < 2 and e < 2:
                        h4[2 * p + d, 2 * q + e] = acc
                    elif d == 2 and e == 2:
                        h2[p, q] = acc
    _project_inplace(h4, work[:4, :4], vecs[:4, :4])
    # closed-form 2x2: eigenvalues m +- r
    a, b, c = h2[0, 0], 0.5 * (h2[0, 1] + h2[1, 0]), h2[1, 1]
    m = 0.5 * (a + c)
    r = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    l1, l2 = m + r, m - r
    if l2 < 0.0:
        if l1 <= 0.0:
            a = b = c = 0.0
        else:
            # keep only the l1 eigenpair: l1 * v v^T
            if abs(a - l2) >= abs(c - l2):
                vx, vy = a - l2, b
            else:
                vx, vy = b, c - l2
            nv = vx * vx + vy * vy
            a, b, c = l1 * vx * vx / nv, l1 * vx * vy / nv, l1 * vy * vy / nv
    for p in range(2):
        for q in range(2):
            npq = a if p == q == 0 else (c if p == q == 1 else b)
            for i in range(3):
                for j in range(3):
                    acc = npq * basis[2, i] * basis[2, j]
                    for d in range(2):
                        for e in range(2):
                            acc += basis[d, i] * h4[2 * p + d, 2 * q + e] * basis[e, j]
                    hw[3 * p + i, 3 * q + j] = acc
    for i in range(6):
        for j in range(i + 1, 6):
            mm = 0.5 * (hw[i, j] + hw[j, i])
            hw[i, j] = mm
            hw[j, i] = mm
    return True


@njit(cache=True, nogil=True)
def stretch_hessian(x, tris, coef, area, k_warp, k_weft, k_shear, out):
    """PSD-projected 9x9 stretch Hessians of every triangle into ``out``.

    Returns the number of elements whose strain denominators hit the floor.
    """
    n_tri = tris.shape[0]
    hw = np.empty((6, 6))
    work = np.empty((6, 6))
    vecs = np.empty((6, 6))
    basis = np.empty((3, 3))
    h4 = np.empty((4, 4))
    h2 = np.empty((2, 2))
    wu = np.empty(3)
    wv = np.empty(3)
    bad = 0
    for t in range(n_tri):
        for k in range(3):
            su = 0.0
            sv = 0.0
            for a in range(3):
                xa = x[tris[t, a], k]
                su += coef[t, 0, a] * xa
                sv += coef[t, 1, a] * xa
            wu[k] = su
            wv[k] = sv
        lu = np.sqrt(wu[0] ** 2 + wu[1] ** 2 + wu[2] ** 2)
        lv = np.sqrt(wv[0] ** 2 + wv[1] ** 2 + wv[2] ** 2)
        cx = wu[1] * wv[2] - wu[2] * wv[1]
        cy = wu[2] * wv[0] - wu[0] * wv[2]
        cz = wu[0] * wv[1] - wu[1] * wv[0]
        if lu < LENGTH_FLOOR or lv < LENGTH_FLOOR or np.sqrt(cx * cx + cy * cy + cz * cz) * area[t] < 1e-12:
            bad += 1
        lu_c = max(lu, LENGTH_FLOOR)
        lv_c = max(lv, LENGTH_FLOOR)
        cu = lu - 1.0
        cv = lv - 1.0
        cs = wu[0] * wv[0] + wu[1] * wv[1] + wu[2] * wv[2]
        A = area[t]
        for i in range(3):
            for j in range(3):
                nnu = wu[i] * wu[j] / (lu_c * lu_c)
                nnv = wv[i] * wv[j] / (lv_c * lv_c)
                e = 1.0 if i == j else 0.0
                hw[i, j] = A * (k_warp * (nnu + cu * (e - nnu) / lu_c) + k_shear * wv[i] * wv[j])
                hw[3 + i, 3 + j] = A * (k_weft * (nnv + cv * (e - nnv) / lv_c) + k_shear * wu[i] * wu[j])
                huv = A * k_shear * (wv[i] * wu[j] + cs * e)
                hw[i, 3 + j] = huv
                hw[3 + j, i] = huv
        if not _project_split(hw, wu, wv, basis, h4, h2, work, vecs):
            _project_inplace(hw, work, vecs)
        # J = kron(coef, I3) maps the 9 corner coordinates to (wu, wv)
        # upper triangle only, mirrored, so every block is exactly symmetric
        for a in range(3):
            for i in range(3):
                for b in range(3):
                    for j in range(3):
                        if 3 * b + j < 3 * a + i:
                            continue
                        acc = 0.0
                        for p in range(2):
                            cpa = coef[t, p, a]
                            for q in range(2):
                                acc += cpa * coef[t, q, b] * hw[3 * p + i, 3 * q + j]
                        out[t, 3 * a + i, 3 * b + j] = acc
                        out[t, 3 * b + j, 3 * a + i] = acc
    return bad


@njit(cache=True, nogil=True, fastmath={'reassoc', 'contract'})
def bsr3_matvec(indptr, indices, data, v, out):
    """``out = A v`` for a block-sparse matrix with 3x3 blocks."""
    for i in range(len(indptr) - 1):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            c = 3 * indices[k]
            v0 = v[c]
            v1 = v[c + 1]
            v2 = v[c + 2]
            a0 += data[k, 0, 0] * v0 + data[k, 0, 1] * v1 + data[k, 0, 2] * v2
            a1 += data[k, 1, 0] * v0 + data[k, 1, 1] * v1 + data[k, 1, 2] * v2
            a2 += data[k, 2, 0] * v0 + data[k, 2, 1] * v1 + data[k, 2, 2] * v2
        out[3 * i] = a0
        out[3 * i + 1] = a1
        out[3 * i + 2] = a2


@njit(cache=True, nogil=True, fastmath={'reassoc', 'contract'})
def mas_apply(r, perm, inv_flat, inv_off, lv_nodes, lv_bn, out):
    """Multilevel additive Schwarz: ``out = sum_l P_l B_l^-1 P_l^T r``.

    ``perm[k]`` is the vertex ranked k; level-l node of rank k is
    ``k // prod(lv_bn[:l])``. ``inv_flat[inv_off[l]:]`` holds level l's
    (n_blocks, m, m) inverses in row-major order.
    """
    n = len(perm)
    cur = np.empty(3 * n)
    for k in range(n):
        for c in range(3):
            cur[3 * k + c] = r[3 * perm[k] + c]
    zp = np.zeros(3 * n)
    fine = 1
    for lvl in range(len(lv_nodes)):
        nl = lv_nodes[lvl]
        bn = lv_bn[lvl]
        m = 3 * bn
        nb = (nl + bn - 1) // bn
        base = inv_off[lvl]
        dofs = 3 * nl
        padded = np.zeros(nb * m)
        padded[:dofs] = cur[:dofs]
        zc = np.empty(nb * m)
        for b in range(nb):
            blk = inv_flat[base + b * m * m: base + (b + 1) * m * m].reshape((m, m))
            zc[b * m:(b + 1) * m] = np.dot(blk, padded[b * m:(b + 1) * m])
        for k in range(n):
            node = k // fine
            for c in range(3):
                zp[3 * k + c] += zc[3 * node + c]
        if lvl + 1 < len(lv_nodes):
            nxt = np.zeros(3 * nb)
            for node in range(nl):
                for c in range(3):
                    nxt[3 * (node // bn) + c] += cur[3 * node + c]
            cur = nxt
            fine *= bn
    for k in range(n):
        for c in range(3):
            out[3 * perm[k] + c] = zp[3 * k + c]


@njit(cache=True, nogil=True, fastmath={'reassoc', 'contract'})
def _dot(a, b):
    acc = 0.0
    for i in range(len(a)):
        acc += a[i] * b[i]
    return acc


@njit(cache=True, nogil=True, fastmath={'reassoc', 'contract'})
def pcg(indptr, indices, data, b, max_iters, tol, use_pre, perm, inv_flat, inv_off, lv_nodes, lv_bn):
    """Preconditioned CG from zero on a 3x3-block matrix; returns
    (best x, its residual, iterations, status).

    The best iterate minimizes ``x.Ax/2 - b.x``. status: 0 ok, 1 breakdown
    (p.Ap <= 0), 2 non-finite residual.
    """
    n = len(b)
    x = np.zeros(n)
    best = np.zeros(n)
    bnorm = np.sqrt(_dot(b, b))
    if bnorm == 0.0:
        return best, 0.0, 0, 0
    r = b.copy()
    rel = 1.0
    best_rel = 1.0
    best_phi = 0.0
    if rel <= tol:
        return best, best_rel, 0, 0
    z = np.empty(n)
    if use_pre:
        mas_apply(r, perm, inv_flat, inv_off, lv_nodes, lv_bn, z)
    else:
        z[:] = r
    p = z.copy()
    ap = np.empty(n)
    rz = _dot(r, z)
    k = 0
    status = 0
    for it in range(1, max_iters + 1):
        k = it
        bsr3_matvec(indptr, indices, data, p, ap)
        pap = _dot(p, ap)
        if not pap > 0.0:
            status = 1
            break
        alpha = rz / pap
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * ap[i]
        rel = np.sqrt(_dot(r, r)) / bnorm
        if not np.isfinite(rel):
            status = 2
            break
        phi = -0.5 * (_dot(x, b) + _dot(x, r))
        if phi <= best_phi:
            best[:] = x
            best_rel = rel
            best_phi = phi
        if rel <= tol:
            break
        if use_pre:
            mas_apply(r, perm, inv_flat, inv_off, lv_nodes, lv_bn, z)
        else:
            z[:] = r
        rz_new = _dot(r, z)
        beta = rz_new / rz
        for i in range(n):
            p[i] = z[i] + beta * p[i]
        rz = rz_new
    return best, best_rel, k, status


@njit(cache=True, nogil=True)
def scatter_add(slots, vals, data):
    """``data[slots[i]] += vals[i]`` in index order."""
    for i in range(len(slots)):
        data[slots[i]] += vals[i]


@njit(cache=True, nogil=True)
def hinge_hessian(grad, d2e, out):
    """Gauss-Newton hinge blocks ``d2e * g g^T`` (H, 12, 12)."""
    for h in range(grad.shape[0]):
        c = d2e[h]
        for i in range(12):
            gi = c * grad[h, i]
            for j in range(i, 12):
                v = gi * grad[h, j]
                out[h, i, j] = v
                out[h, j, i] = v


@njit(cache=True, nogil=True)
def level_blocks(indptr, indices, data, node_of_vertex, block_nodes, out):
    """Sum the 3x3 blocks of a vertex-blocked matrix whose two vertices fall
    in the same subdomain into the dense (n_blocks, m, m) stack ``out``
    (m = 3 * block_nodes)."""
    for row in range(len(indptr) - 1):
        rn = node_of_vertex[row]
        rb = rn // block_nodes
        ri = 3 * (rn - rb * block_nodes)
        for k in range(indptr[row], indptr[row + 1]):
            cn = node_of_vertex[indices[k]]
            if cn // block_nodes == rb:
                ci = 3 * (cn - rb * block_nodes)
                for i in range(3):
                    for j in range(3):
                        out[rb, ri + i, ci + j] += data[k, i, j]


@njit(cache=True, nogil=True)
def pbd_project(p, ci, cj, rest, w, iterations):
    """Gauss-Seidel distance projection in fixed constraint order."""
    for _ in range(iterations):
        for k in range(ci.shape[0]):
            i = ci[k]
            j = cj[k]
            wsum = w[i] + w[j]
            if wsum == 0.0:
                continue
            d0 = p[i, 0] - p[j, 0]
            d1 = p[i, 1] - p[j, 1]
            d2 = p[i, 2] - p[j, 2]
            length = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if length < 1e-12:
                continue
            s = (length - rest[k]) / (wsum * length)
            p[i, 0] -= w[i] * s * d0
            p[i, 1] -= w[i] * s * d1
            p[i, 2] -= w[i] * s * d2
            p[j, 0] += w[j] * s * d0
            p[j, 1] += w[j] * s * d1
            p[j, 2] += w[j] * s * d2
