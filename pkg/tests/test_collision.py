import numpy as np
import pytest

from garmentdyn import TriangleMesh, grid_cloth
from garmentdyn.collision import (EDGE_EDGE, VERTEX_TRIANGLE, CollisionGeometry, ContactSet, HalfSpace, Sphere,
                                  build_bvh, closest_point_triangle, closest_points_segments, contact_potential,
                                  contact_set_from_constraints, detect_contact_set, detect_contacts,
                                  environment_contact_set, primitive_boxes, query_pairs, refit_bvh, untangle)
from garmentdyn.errors import UntangleFailed
from garmentdyn.solver import SimState

from conftest import central_difference


def overlap_oracle(lo_a, hi_a, lo_b=None, hi_b=None):
    """Plain double loop over boxes."""
    self_query = lo_b is None
    if self_query:
        lo_b, hi_b = lo_a, hi_a
    out = set()
    for i in range(len(lo_a)):
        ov = np.all((lo_a[i] <= hi_b) & (lo_b <= hi_a[i]), axis=1)
        for j in np.flatnonzero(ov):
            if self_query and j <= i:
                continue
            out.add((i, int(j)))
    return out


def _random_triangles(rng, n, spread=1.0, size=0.05):
    centers = rng.uniform(0, spread, (n, 3))
    pts = centers[:, None, :] + rng.normal(scale=size, size=(n, 3, 3))
    return pts.reshape(-1, 3), np.arange(3 * n).reshape(n, 3)


def _point_triangle_oracle(p, a, b, c):
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - (p - a) @ n * n
    # barycentrics of the projection
    m = np.stack([b - a, c - a], axis=1)
    uv = np.linalg.lstsq(m, q - a, rcond=None)[0]
    cands = []
    if uv.min() >= 0 and uv.sum() <= 1:
        cands.append(q)
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip((p - s) @ (e - s) / ((e - s) @ (e - s)), 0, 1)
        cands.append(s + t * (e - s))
    return min(np.linalg.norm(p - q) for q in cands)


def _segment_oracle(p1, q1, p2, q2):
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    cands = []
    m = np.array([[d1 @ d1, -d1 @ d2], [d1 @ d2, -d2 @ d2]])
    if abs(np.linalg.det(m)) > 1e-12:
        s, t = np.linalg.solve(m, [-d1 @ r, -d2 @ r])
        if 0 <= s <= 1 and 0 <= t <= 1:
            cands.append(np.linalg.norm(p1 + s * d1 - p2 - t * d2))

    def pt_seg(p, a, b):
        t = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
        return np.linalg.norm(p - a - t * (b - a))

    cands += [pt_seg(p1, p2, q2), pt_seg(q1, p2, q2), pt_seg(p2, p1, q1), pt_seg(q2, p1, q1)]
    return min(cands)


# --- BVH -----------------------------------------------------------------------

def test_single_triangle_root_is_leaf():
    bvh = build_bvh(np.eye(3), np.array([[0, 1, 2]]))
    assert bvh.n_nodes == 1 and bvh.prim[0] == 0
    assert len(query_pairs(bvh)) == 0


def test_bvh_boxes_contain_primitives(rng):
    x, tris = _random_triangles(rng, 300)
    bvh = build_bvh(x, tris, 0.01)
    lo_p, hi_p = primitive_boxes(x, tris, 0.01)
    parent = np.full(bvh.n_nodes, -1)
    internal = np.flatnonzero(bvh.prim < 0)
    parent[bvh.left[internal]] = internal
    parent[bvh.right[internal]] = internal
    for p in range(len(tris)):
        node = bvh.leaf_of_prim[p]
        while node >= 0:
            assert np.all(bvh.lo[node] <= lo_p[p]) and np.all(bvh.hi[node] >= hi_p[p])
            node = parent[node]
    assert sorted(bvh.prim[bvh.prim >= 0]) == list(range(len(tris)))


def test_bvh_self_query_equals_oracle_1000(rng):
    x, tris = _random_triangles(rng, 1000)
    bvh = build_bvh(x, tris, 0.005)
    got = {tuple(p) for p in query_pairs(bvh).tolist()}
    lo, hi = primitive_boxes(x, tris, 0.005)
    assert got == overlap_oracle(lo, hi)
    assert len(got) > 100


def test_bvh_tree_vs_tree_equals_oracle(rng):
    xa, ta = _random_triangles(rng, 400)
    xb, tb = _random_triangles(rng, 300)
    a, b = build_bvh(xa, ta, 0.002), build_bvh(xb, tb, 0.002)
    got = {tuple(p) for p in query_pairs(a, b).tolist()}
    assert got == overlap_oracle(*primitive_boxes(xa, ta, 0.002), *primitive_boxes(xb, tb, 0.002))


def test_refit_matches_rebuild(rng):
    x, tris = _random_triangles(rng, 500)
    bvh = build_bvh(x, tris, 0.003)
    for _ in range(3):
        x = x + rng.normal(scale=0.02, size=x.shape)
        refit_bvh(bvh, x)
        fresh = build_bvh(x, tris, 0.003)
        np.testing.assert_array_equal(query_pairs(bvh), query_pairs(fresh))


def test_pairs_sorted_deterministic(rng):
    x, tris = _random_triangles(rng, 200)
    p1 = query_pairs(build_bvh(x, tris, 0.01))
    p2 = query_pairs(build_bvh(x, tris, 0.01))
    np.testing.assert_array_equal(p1, p2)
    assert np.all(p1[:, 0] < p1[:, 1])
    assert np.all(np.diff(p1[:, 0] * len(tris) + p1[:, 1]) > 0)


# --- closest points --------------------------------------------------------------

def test_closest_point_triangle_matches_oracle(rng):
    p, a, b, c = (rng.normal(size=(300, 3)) for _ in range(4))
    q, w = closest_point_triangle(p, a, b, c)
    assert np.allclose(w.sum(axis=1), 1) and w.min() >= 0 and w.max() <= 1
    d = np.linalg.norm(p - q, axis=1)
    ref = np.array([_point_triangle_oracle(*v) for v in zip(p, a, b, c)])
    np.testing.assert_allclose(d, ref, atol=1e-10)


def test_segments_match_oracle(rng):
    p1, q1, p2, q2 = (rng.normal(size=(300, 3)) for _ in range(4))
    s, t, c1, c2 = closest_points_segments(p1, q1, p2, q2)
    assert s.min() >= 0 and s.max() <= 1 and t.min() >= 0 and t.max() <= 1
    d = np.linalg.norm(c1 - c2, axis=1)
    ref = np.array([_segment_oracle(*v) for v in zip(p1, q1, p2, q2)])
    np.testing.assert_allclose(d, ref, atol=1e-10)


# --- detection ---------------------------------------------------------------------

def _two_triangles(dz):
    rest = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, dz], [1, 0, dz], [0, 1, dz]], float)
    return TriangleMesh(rest, np.array([[0, 1, 2], [3, 4, 5]]))


def test_far_triangles_no_contacts():
    assert detect_contacts(_two_triangles(0.1), thickness=2.6e-4, contact_radius=1e-3) == []


def test_vertex_above_triangle():
    rest = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, 5e-4], [2, 2, 1], [3, 2, 1]], float)
    mesh = TriangleMesh(rest, np.array([[0, 1, 2], [3, 4, 5]]))
    cs = detect_contacts(mesh, thickness=2.6e-4, contact_radius=1e-3)
    assert len(cs) == 1
    c = cs[0]
    assert c.kind == VERTEX_TRIANGLE and c.indices == (3, 0, 1, 2)
    assert c.gap == pytest.approx(5e-4 - 2.6e-4, abs=1e-15)
    assert np.linalg.norm(c.normal) == pytest.approx(1.0)
    np.testing.assert_allclose(c.weights, [0.6, 0.2, 0.2])


@pytest.mark.parametrize("s", [2e-4, 5e-4, 9e-4])
def test_crossed_segments_edge_edge(s):
    # two skinny triangles whose long edges cross perpendicularly at separation s
    rest = np.array([[-1, 0, 0], [1, 0, 0], [0, -3, -1],
                     [0, -1, s], [0, 1, s], [3, 0, s + 1]], float)
    mesh = TriangleMesh(rest, np.array([[0, 1, 2], [3, 4, 5]]))
    cs = [c for c in detect_contacts(mesh, thickness=1e-4, contact_radius=1e-3) if c.kind == EDGE_EDGE]
    assert len(cs) == 1
    c = cs[0]
    assert set(c.indices[:2]) == {0, 1} and set(c.indices[2:]) == {3, 4}
    assert c.gap == pytest.approx(s - 1e-4, abs=1e-12)
    np.testing.assert_allclose(c.weights, [0.5, 0.5, 0.5, 0.5])


def test_shared_vertex_pairs_excluded():
    mesh = grid_cloth(5, 5, 0.01)  # spacing well below the radius
    cs = detect_contact_set(mesh.positions, CollisionGeometry.from_mesh(mesh), 1e-4, 5e-3)
    for row in cs.idx[cs.kind == 0]:
        assert row[0] not in row[1:]
    for row in cs.idx[cs.kind == 1]:
        assert not set(row[:2]) & set(row[2:])


def test_contact_set_round_trip():
    rest = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, 5e-4], [2, 2, 1], [3, 2, 1]], float)
    mesh = TriangleMesh(rest, np.array([[0, 1, 2], [3, 4, 5]]))
    cons = detect_contacts(mesh, thickness=2.6e-4, contact_radius=1e-3)
    cs = contact_set_from_constraints(cons, 2.6e-4, 1e-3, 1e4, x=mesh.positions)
    np.testing.assert_allclose(cs.gaps(mesh.positions), [c.gap for c in cons])


# --- potential -----------------------------------------------------------------------

def _single_contact(gap, d_hat=1e-3, k=1e4):
    c = ContactSet(np.array([2]), np.array([[0, 0, 0, 0]]), np.array([[1.0, 0, 0, 0]]), np.array([[0, 0, 1.0]]),
                   np.array([0.0]), np.array([0.0]), k, d_hat)
    return c, np.array([[0.0, 0.0, gap]])


def test_inactive_contact_zero():
    c, x = _single_contact(1e-3)
    e, g, H = contact_potential(c, 1e4, x)
    assert e == 0.0 and not g.any() and H is None


def test_normal_force_ten_newtons():
    c, x = _single_contact(0.0)
    assert c.normal_force_magnitudes(x)[0] == pytest.approx(10.0)
    np.testing.assert_allclose(-c.gradient(x)[0], [0, 0, 10.0])


def test_force_continuous_at_activation():
    c, _ = _single_contact(0.0)
    f = [c.normal_force_magnitudes(np.array([[0, 0, 1e-3 - d]]))[0] for d in (1e-6, 1e-9, 1e-12)]
    assert f[0] > f[1] > f[2] and f[2] < 1e-7


def _contact_scene(rng):
    mesh = grid_cloth(6, 6, 0.1)
    x = mesh.positions.copy()
    # a second layer 1 mm above, shifted so vertices fall inside triangles
    top = x + [0.007, 0.011, 1e-3]
    both = np.concatenate([x, top])
    tris = np.concatenate([mesh.triangles, mesh.triangles + len(x)])
    two = TriangleMesh(both, tris)
    cs = detect_contact_set(both, CollisionGeometry.from_mesh(two), 2.6e-4, 2e-3, mu=0.4, k_contact=1e4)
    return two, both + rng.normal(scale=1e-4, size=both.shape), cs


def test_contact_gradient_and_hessian_fd(rng):
    two, x, cs = _contact_scene(rng)
    assert (cs.kind == 0).any() and (cs.kind == 1).any()
    g = cs.gradient(x)
    num = central_difference(cs.energy, x, 1e-8)
    assert np.max(np.abs(g - num)) <= 1e-4 * np.abs(num).max()
    H = cs.hessian(x).toarray()
    v = rng.normal(size=x.size)
    hv = (cs.gradient(x + 1e-9 * v.reshape(-1, 3)) - cs.gradient(x - 1e-9 * v.reshape(-1, 3))).reshape(-1) / 2e-9
    np.testing.assert_allclose(H @ v, hv, atol=1e-4 * np.abs(hv).max())


def test_contact_forces_sum_to_zero(rng):
    two, x, cs = _contact_scene(rng)
    assert np.abs(cs.gradient(x).sum(axis=0)).max() < 1e-10
    v = rng.normal(scale=0.1, size=x.shape)
    f = cs.friction_force(SimState(x, v), np.full(len(x), 1e-3), 1 / 30)
    assert np.abs(f).max() > 0
    assert np.abs(f.sum(axis=0)).max() < 1e-10


def test_friction_zero_when_mu_zero(rng):
    two, x, cs = _contact_scene(rng)
    cs.mu[:] = 0.0
    v = rng.normal(size=x.shape)
    assert not cs.friction_force(SimState(x, v), np.ones(len(x)), 0.01).any()


def test_friction_bounded_by_coulomb(rng):
    c, x = _single_contact(0.0)
    c.mu[:] = 0.3
    f = c.friction_force(SimState(x, np.array([[5.0, 0, 0]])), np.array([1.0]), 0.01)
    np.testing.assert_allclose(f[0], [-3.0, 0, 0])  # mu * 10 N, opposing the slide
    f = c.friction_force(SimState(x, np.array([[0.01, 0, 0]])), np.array([1.0]), 0.01)
    np.testing.assert_allclose(f[0], [-1.0, 0, 0])  # just enough to stop within the step


def test_environment_contacts():
    x = np.array([[0, 0, 1e-4], [0, 0, 1.0], [0, 0, 0.5 + 0.1 + 3e-4]])
    cs = environment_contact_set(x, [HalfSpace(), Sphere((0, 0, 0.5), 0.1)], 2.6e-4, 5.2e-4)
    assert sorted(cs.idx[:, 0].tolist()) == [0, 2]
    np.testing.assert_allclose(sorted(cs.gaps(x)), [1e-4 - 2.6e-4, 3e-4 - 2.6e-4], atol=1e-12)


# --- untangle ---------------------------------------------------------------------------

def test_untangle_noop():
    c, x = _single_contact(0.5)
    y, n = untangle(x, c, np.ones(1), 1e-3)
    np.testing.assert_array_equal(x, y)
    assert n == 0


def test_untangle_vertex_through_anchored_triangle():
    t = 2.6e-4
    rest = np.array([[-5, -5, 0], [5, -5, 0], [0, 5, 0], [0.1, 0.2, 1e-3]], float)
    # the free vertex needs a triangle of its own to be part of the mesh
    geo = CollisionGeometry.from_mesh(TriangleMesh(rest, np.array([[0, 1, 2], [3, 0, 1]])))
    cs = detect_contact_set(rest, geo, t, 2 * t, margin=0.01)
    cs = ContactSet(*(getattr(cs, f)[cs.kind == 0] for f in ("kind", "idx", "coef", "normal", "offset", "mu")),
                    cs.k_contact, cs.activation)
    x = rest.copy()
    x[3, 2] = -1e-3  # pushed 1 mm through
    y, n = untangle(x, cs, np.ones(4), t, anchored=[True, True, True, False])
    assert n == 1
    np.testing.assert_array_equal(y[:3], x[:3])
    assert cs.gaps(y)[0] == pytest.approx(0.1 * t, abs=1e-15)
    assert y[3, 2] == pytest.approx(t + 0.1 * t)


def test_untangle_failure_reported():
    c, x = _single_contact(-1.0)
    with pytest.raises(UntangleFailed) as exc:
        untangle(x, c, np.ones(1), 1e-3, anchored=[True])
    assert exc.value.positions is not None


def test_untangle_two_layer_fold(rng):
    # lower sheet, upper sheet folded through it in the middle
    mesh = grid_cloth(8, 8, 0.07)
    x = mesh.positions.copy()
    top = x + [0.005, 0.005, 2e-3]
    top[(top[:, 0] > 0.02) & (top[:, 0] < 0.05), 2] = -4e-4
    both = np.concatenate([x, top])
    tris = np.concatenate([mesh.triangles, mesh.triangles + len(x)])
    geo = CollisionGeometry.from_mesh(TriangleMesh(np.concatenate([x, x + [0.005, 0.005, 2e-3]]), tris))
    t = 2.6e-4
    cs = detect_contact_set(both, geo, t, 2 * t, margin=1e-3)
    assert cs.gaps(both).min() < -t
    y, n = untangle(both, cs, np.ones(len(both)), t)
    assert n > 0
    after = detect_contact_set(y, geo, t, 2 * t)
    assert len(after) == 0 or after.gaps(y).min() >= -t
