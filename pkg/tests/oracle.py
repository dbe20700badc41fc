"""Independent brute-force implementations used to cross-check the fast paths.

Everything in here is deliberately written by a different route than the
package code (triangle decomposition + dense sampling instead of face-ring
kernels) so agreement between the two is meaningful.
"""

import numpy as np


# ---------------------------------------------------------------------------
# Exact point-to-triangle distance (Ericson-style region tests).
# ---------------------------------------------------------------------------

def closest_on_triangle(p, a, b, c):
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + ab * (d1 / (d1 - d3))
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + ac * (d2 / (d2 - d6))
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


def hull_triangles(poly, pose=None):
    """World-space triangle fan decomposition of every face."""
    verts = poly.vertices if pose is None else pose.apply(poly.vertices)
    tris = []
    for ring in poly.face_rings:
        for i in range(1, len(ring) - 1):
            tris.append((verts[ring[0]], verts[ring[i]], verts[ring[i + 1]]))
    return tris


def exact_surface_distance(poly, pose, query):
    """Exact distance from a query to the posed hull surface (0 inside)."""
    q = np.asarray(query, dtype=float)
    if pose is not None:
        local = pose.inverse().apply(q)
    else:
        local = q
    if np.all(poly.face_normals @ local - poly.face_offsets <= 1e-12):
        return 0.0
    best = np.inf
    for a, b, c in hull_triangles(poly, pose):
        cp = closest_on_triangle(q, a, b, c)
        best = min(best, float(np.linalg.norm(q - cp)))
    return best


def sampled_surface_points(poly, pose=None, n=60):
    """Dense barycentric sampling of the hull surface."""
    pts = []
    grid = [(i, j) for i in range(n + 1) for j in range(n + 1 - i)]
    bary = np.array([[i / n, j / n, (n - i - j) / n] for i, j in grid])
    for a, b, c in hull_triangles(poly, pose):
        tri = np.stack([a, b, c])
        pts.append(bary @ tri)
    return np.concatenate(pts, axis=0)


def sampled_surface_distance(samples, query):
    return float(np.min(np.linalg.norm(samples - np.asarray(query, dtype=float), axis=1)))


# ---------------------------------------------------------------------------
# Monte-Carlo and grid oracles for hull mass properties.
# ---------------------------------------------------------------------------

def contains(poly, pts, tol=1e-12):
    return np.all(pts @ poly.face_normals.T - poly.face_offsets[None, :] <= tol, axis=1)


def monte_carlo_centroid(poly, rng, n=200_000):
    lo = poly.vertices.min(axis=0)
    hi = poly.vertices.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))
    inside = pts[contains(poly, pts)]
    return inside.mean(axis=0), len(inside) / n * np.prod(hi - lo)


def grid_refined_inscribed_radius(poly, coarse=41, passes=3):
    """Maximize min-plane-distance over nested grids."""
    lo = poly.vertices.min(axis=0)
    hi = poly.vertices.max(axis=0)
    best_c = None
    for _ in range(passes):
        axes = [np.linspace(lo[k], hi[k], coarse) for k in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        depth = (poly.face_offsets[None, :] - pts @ poly.face_normals.T).min(axis=1)
        i = int(np.argmax(depth))
        best_c = pts[i]
        step = (hi - lo) / (coarse - 1)
        lo = best_c - 2 * step
        hi = best_c + 2 * step
    depth = float((poly.face_offsets - poly.face_normals @ best_c).min())
    return depth, best_c


def monte_carlo_inertia(poly, rng, n=400_000):
    """Unit-density inertia tensor about the centroid, by volume sampling."""
    lo = poly.vertices.min(axis=0)
    hi = poly.vertices.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))
    inside = pts[contains(poly, pts)]
    vol = len(inside) / n * np.prod(hi - lo)
    r = inside - inside.mean(axis=0)
    second = (r[:, :, None] * r[:, None, :]).mean(axis=0) * vol
    return np.trace(second) * np.eye(3) - second


# ---------------------------------------------------------------------------
# Random hull generation for property tests (seeded, hand scale).
# ---------------------------------------------------------------------------

def random_hull(rng, n_points=None, scale=0.05):
    from handfit.geometry import ConvexPolyhedron

    n = int(n_points if n_points is not None else rng.integers(8, 21))
    while True:
        pts = rng.normal(0.0, scale, size=(n, 3))
        try:
            return ConvexPolyhedron.from_points(pts, require_extreme=False)
        except Exception:
            continue


def random_pose(rng, max_shift=0.3):
    from handfit.geometry import RigidPose, quat_from_rotvec

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidPose(
        rng.uniform(-max_shift, max_shift, size=3),
        quat_from_rotvec(axis * rng.uniform(0.0, np.pi)),
    )
