"""Vector/quaternion algebra and convex polyhedron queries.

Conventions used throughout the package:

* vectors are ``float64`` numpy arrays of shape ``(3,)`` (or ``(n, 3)`` for
  batches), in meters unless stated otherwise;
* quaternions are ``(w, x, y, z)`` arrays of shape ``(4,)`` / ``(n, 4)`` and
  unit length;
* hull face planes are stored with *outward* unit normals ``n`` and offsets
  ``d`` such that the interior satisfies ``n . x <= d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .errors import GeometryError

#: Global geometric tolerance, meters.
GEOM_EPS = 1e-6


# ---------------------------------------------------------------------------
# Quaternions.  All functions broadcast over leading dimensions.
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < GEOM_EPS):
        raise GeometryError("cannot normalize near-zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) ``v`` by quaternion(s) ``q``.

    Spelled out component-wise: np.cross dominates the runtime of the
    whole solver when called per body/anchor, this form does not.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., 0]
    x, y, z = q[..., 1], q[..., 2], q[..., 3]
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return np.stack(
        [
            vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx),
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < GEOM_EPS:
        return quat_identity()
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], axis * (np.sin(half) / n)])


def quat_from_rotvec(r: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    r = np.asarray(r, dtype=np.float64)
    angle = np.linalg.norm(r, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x)/x with series fallback near zero
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(angle == 0.0, 1.0, angle))
    return np.concatenate([np.cos(half), r * k], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithmic map: quaternion to rotation vector, angle in (-pi, pi]."""
    q = np.asarray(q, dtype=np.float64)
    w = q[..., :1]
    v = q[..., 1:]
    # force the short way around
    sign = np.where(w < 0.0, -1.0, 1.0)
    w = w * sign
    v = v * sign
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-8
    k = np.where(small, 2.0 / np.where(w == 0.0, 1.0, w), angle / np.where(s == 0.0, 1.0, s))
    return v * k


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (or batch of matrices) for the given quaternion(s)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of a unit quaternion, in [0, pi]."""
    q = np.asarray(q, dtype=np.float64)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def quat_swing_twist(q: np.ndarray, twist_axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``q`` into swing * twist where twist is about ``twist_axis``.

    Returns ``(swing, twist)`` with ``q == swing * twist``; the swing axis is
    perpendicular to ``twist_axis``.
    """
    q = np.asarray(q, dtype=np.float64)
    axis = np.asarray(twist_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    proj = np.dot(q[1:], axis)
    tw = np.array([q[0], *(proj * axis)])
    n = np.linalg.norm(tw)
    if n < 1e-12:
        # 180-degree swing exactly orthogonal to the axis: twist undefined, pick identity
        return q.copy(), quat_identity()
    tw = tw / n
    sw = quat_mul(q, quat_conj(tw))
    return sw, tw


# ---------------------------------------------------------------------------
# Rigid poses.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    """Rotation-then-translation transform from body frame to world frame."""

    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).copy()
        q = np.asarray(self.rotation, dtype=np.float64).copy()
        if t.shape != (3,) or q.shape != (4,):
            raise GeometryError("pose expects (3,) translation and (4,) quaternion")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            q = q / n
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.zeros(3), quat_identity())

    @staticmethod
    def trusted(translation: np.ndarray, rotation: np.ndarray) -> "RigidPose":
        """Wrap arrays that are already float64, unit-norm and unshared.

        Skips the validation/copy of the regular constructor; callers own the
        arrays and must not mutate them afterwards.
        """
        pose = object.__new__(RigidPose)
        object.__setattr__(pose, "translation", translation)
        object.__setattr__(pose, "rotation", rotation)
        return pose

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, points) + self.translation

    def apply_vector(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, v)

    def inverse(self) -> "RigidPose":
        qi = quat_conj(self.rotation)
        return RigidPose(-quat_rotate(qi, self.translation), qi)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return ``self @ other`` (apply ``other`` first)."""
        return RigidPose(
            self.apply(other.translation),
            quat_normalize(quat_mul(self.rotation, other.rotation)),
        )

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


# ---------------------------------------------------------------------------
# Convex polyhedra.
# ---------------------------------------------------------------------------

class ConvexPolyhedron:
    """Convex vertex/face hull with cached centroid and inscribed sphere.

    Faces are convex polygon rings with counter-clockwise winding as seen from
    outside.  Construction validates convexity: every vertex must lie on or
    behind every face plane within ``GEOM_EPS``.
    """

    __slots__ = (
        "vertices", "face_rings", "face_normals", "face_offsets",
        "centroid", "volume", "inscribed_radius", "chebyshev_center",
        "bound_center", "bound_radius", "inertia_unit_density",
        "_packed",
    )

    def __init__(self, vertices: np.ndarray, face_rings: list[tuple[int, ...]]):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 4:
            raise GeometryError("hull needs at least 4 vertices of dimension 3")
        if not np.all(np.isfinite(v)):
            raise GeometryError("hull vertices must be finite")
        if len(face_rings) < 4:
            raise GeometryError("hull needs at least 4 faces")
        rings = [tuple(int(i) for i in ring) for ring in face_rings]
        normals = np.empty((len(rings), 3))
        offsets = np.empty(len(rings))
        for f, ring in enumerate(rings):
            if len(ring) < 3:
                raise GeometryError("face ring needs at least 3 vertices")
            if min(ring) < 0 or max(ring) >= len(v):
                raise GeometryError("face ring references unknown vertex")
            n = _ring_normal(v, ring)
            d = float(np.dot(n, v[ring[0]]))
            # planarity of the ring
            if np.max(np.abs(v[list(ring)] @ n - d)) > 1e-5:
                raise GeometryError("face ring is not planar")
            normals[f] = n
            offsets[f] = d
        # convexity: all vertices behind all planes
        slack = v @ normals.T - offsets[None, :]
        if np.max(slack) > GEOM_EPS:
            raise GeometryError("hull is not convex (vertex in front of a face plane)")

        self.vertices = v
        self.face_rings = rings
        self.face_normals = normals
        self.face_offsets = offsets

        vol, com, inertia = _mass_properties(v, rings, normals)
        if vol <= GEOM_EPS ** 2:
            raise GeometryError("hull is degenerate (near-zero volume)")
        self.volume = vol
        self.centroid = com
        self.inertia_unit_density = inertia

        center, radius = _chebyshev(normals, offsets)
        if radius <= 0.0:
            raise GeometryError("hull has no interior (inscribed radius <= 0)")
        self.chebyshev_center = center
        self.inscribed_radius = radius

        self.bound_center = com
        self.bound_radius = float(np.max(np.linalg.norm(v - com, axis=1)))
        self._packed = None

        for arr in (self.vertices, self.face_normals, self.face_offsets,
                    self.centroid, self.chebyshev_center, self.inertia_unit_density):
            arr.setflags(write=False)

    @classmethod
    def from_points(cls, points: np.ndarray, *, require_extreme: bool = True) -> "ConvexPolyhedron":
        """Build a hull from a point set via its convex hull.

        With ``require_extreme`` every input point must be a hull vertex;
        otherwise interior points are silently dropped.
        """
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError("expected an (n, 3) point array")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("hull points must be finite")
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise GeometryError(f"degenerate point set: {exc}") from exc
        used = np.zeros(len(pts), dtype=bool)
        used[hull.vertices] = True
        if require_extreme and not used.all():
            raise GeometryError("input contains non-extreme points (hull would drop them)")
        keep = np.flatnonzero(used)
        remap = -np.ones(len(pts), dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        verts = pts[keep]
        rings = _merge_coplanar(verts, [tuple(remap[s]) for s in hull.simplices])
        return cls(verts, rings)

    # -- queries ------------------------------------------------------------

    def contains(self, point: np.ndarray, tol: float = GEOM_EPS) -> bool:
        point = np.asarray(point, dtype=np.float64)
        return bool(np.all(self.vertices_slack(point) <= tol))

    def vertices_slack(self, point: np.ndarray) -> np.ndarray:
        """Signed distance of a point to each face plane (positive outside)."""
        return self.face_normals @ np.asarray(point, dtype=np.float64) - self.face_offsets

    def scaled(self, factors: np.ndarray) -> "ConvexPolyhedron":
        """Anisotropically scaled copy (per-axis factors)."""
        f = np.asarray(factors, dtype=np.float64)
        return ConvexPolyhedron(self.vertices * f, self.face_rings)

    def packed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Face rings as padded index arrays for the numba kernels."""
        if self._packed is None:
            max_len = max(len(r) for r in self.face_rings)
            idx = np.zeros((len(self.face_rings), max_len), dtype=np.int64)
            cnt = np.zeros(len(self.face_rings), dtype=np.int64)
            for f, ring in enumerate(self.face_rings):
                idx[f, : len(ring)] = ring
                cnt[f] = len(ring)
            self._packed = (self.vertices, self.face_normals, self.face_offsets, idx, cnt)
        return self._packed

    def posed(self, pose: RigidPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World-frame ``(vertices, face_normals, face_offsets)`` under a pose."""
        rot = pose.matrix()
        verts = self.vertices @ rot.T + pose.translation
        normals = self.face_normals @ rot.T
        offsets = self.face_offsets + normals @ pose.translation
        return verts, normals, offsets

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConvexPolyhedron):
            return NotImplemented
        return (
            self.vertices.shape == other.vertices.shape
            and np.array_equal(self.vertices, other.vertices)
            and self.face_rings == other.face_rings
        )

    def __hash__(self):
        return hash((self.vertices.tobytes(), tuple(self.face_rings)))

    def __repr__(self):
        return f"ConvexPolyhedron({len(self.vertices)} vertices, {len(self.face_rings)} faces)"


def _ring_normal(verts: np.ndarray, ring: tuple[int, ...]) -> np.ndarray:
    """Newell-style area-weighted normal of a polygon ring."""
    pts = verts[list(ring)]
    n = np.cross(pts, np.roll(pts, -1, axis=0)).sum(axis=0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise GeometryError("degenerate face ring")
    return n / norm


def _merge_coplanar(verts: np.ndarray, simplices: list[tuple[int, ...]], tol: float = 1e-7) -> list[tuple[int, ...]]:
    """Merge qhull triangles into convex polygon faces, deterministically ordered."""
    interior = verts.mean(axis=0)
    groups: list[dict] = []
    for tri in simplices:
        a, b, c = (verts[i] for i in tri)
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-14:
            continue
        n = n / norm
        d = float(np.dot(n, a))
        if np.dot(n, interior) > d:  # orient outward
            n, d = -n, -d
        for g in groups:
            if np.dot(g["n"], n) > 1.0 - tol and abs(g["d"] - d) < 1e-7:
                g["members"].update(tri)
                break
        else:
            groups.append({"n": n, "d": d, "members": set(tri)})

    rings = []
    for g in groups:
        members = sorted(g["members"])
        n = g["n"]
        # order around the face centroid, CCW about the outward normal
        pts = verts[members]
        center = pts.mean(axis=0)
        ref = pts[0] - center
        ref = ref - np.dot(ref, n) * n
        if np.linalg.norm(ref) < 1e-12:
            ref = np.array([1.0, 0.0, 0.0]) - n[0] * n
        e1 = ref / np.linalg.norm(ref)
        e2 = np.cross(n, e1)
        ang = np.arctan2((pts - center) @ e2, (pts - center) @ e1)
        order = [members[i] for i in np.argsort(ang, kind="stable")]
        k = order.index(min(order))
        rings.append(tuple(order[k:] + order[:k]))
    rings.sort(key=lambda r: (r[0], r))
    return rings


def _mass_properties(verts: np.ndarray, rings: list[tuple[int, ...]], normals: np.ndarray):
    """Volume, volume centroid, and unit-density inertia about the centroid.

    Signed tetrahedron decomposition of the face fans about the vertex mean.
    """
    o = verts.mean(axis=0)
    # canonical second moment of the unit simplex
    m_unit = np.full((3, 3), 1.0 / 120.0)
    np.fill_diagonal(m_unit, 1.0 / 60.0)
    vol = 0.0
    moment = np.zeros(3)
    second = np.zeros((3, 3))
    for ring in rings:
        for i in range(1, len(ring) - 1):
            a = verts[ring[0]] - o
            b = verts[ring[i]] - o
            c = verts[ring[i + 1]] - o
            det = float(np.dot(a, np.cross(b, c)))
            v = det / 6.0
            vol += v
            moment += v * (a + b + c) / 4.0
            amat = np.column_stack([a, b, c])
            second += det * (amat @ m_unit @ amat.T)
    if abs(vol) < 1e-15:
        return 0.0, o.copy(), np.zeros((3, 3))
    com_local = moment / vol
    # shift the second moment from o to the centroid
    second_c = second - vol * np.outer(com_local, com_local)
    inertia = np.trace(second_c) * np.eye(3) - second_c
    return float(vol), o + com_local, inertia


def _chebyshev(normals: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, float]:
    """Chebyshev center and radius: the deepest inscribed sphere.

    Solved as a small LP (maximize r subject to n.c + r <= d per face) with a
    deterministic solver.
    """
    nf = len(offsets)
    a_ub = np.hstack([np.ones((nf, 1)), normals])
    res = linprog(
        c=[-1.0, 0.0, 0.0, 0.0],
        A_ub=a_ub,
        b_ub=offsets,
        bounds=[(0.0, None), (None, None), (None, None), (None, None)],
        method="highs",
    )
    if not res.success:
        raise GeometryError("inscribed sphere LP failed (unbounded or infeasible hull)")
    return res.x[1:4].copy(), float(res.x[0])


# ---------------------------------------------------------------------------
# Module-level operations (thin wrappers over cached hull data and kernels).
# ---------------------------------------------------------------------------

def centroid(poly: ConvexPolyhedron) -> np.ndarray:
    """Volume centroid of the hull (body frame)."""
    return poly.centroid


def inscribed_sphere_radius(poly: ConvexPolyhedron) -> float:
    """Radius of the largest sphere that fits inside the hull."""
    return poly.inscribed_radius


def closest_point_on_body(
    poly: ConvexPolyhedron, pose: RigidPose, query: np.ndarray
) -> tuple[np.ndarray, int, float]:
    """Closest surface point of a posed hull to ``query``.

    Returns ``(point, face_index, distance)``.  Interior queries report
    distance 0 with the nearest surface projection; face ties resolve to the
    lowest face index.
    """
    from . import _kernels  # deferred: numba compilation on first use

    q = np.ascontiguousarray(np.asarray(query, dtype=np.float64).reshape(1, 3))
    verts, normals, offsets = poly.posed(pose)
    _, _, _, idx, cnt = poly.packed()
    pts, faces, dist, inside = _kernels.closest_points_on_hull(
        q, np.ascontiguousarray(verts), np.ascontiguousarray(normals),
        np.ascontiguousarray(offsets), idx, cnt, False,
    )
    return pts[0], int(faces[0]), float(dist[0])


def unit_cube(edge: float = 1.0) -> ConvexPolyhedron:
    """Axis-aligned cube centered at the origin (testing / default shapes)."""
    h = 0.5 * edge
    corners = np.array(
        [[sx * h, sy * h, sz * h] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    )
    return ConvexPolyhedron.from_points(corners)
