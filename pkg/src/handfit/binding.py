"""Turns depth samples into solver constraints.

Each cloud point is matched to the globally nearest body surface (camera-
facing faces only, ties to the lowest body index) and becomes a single
capped attachment row pulling that surface point toward the sample.  The
caps split a fixed impulse budget across the cloud so no stray sample can
overpower the rest; labeled landmark points get a raised cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import assign_points as _assign_kernel
from .dynamics import (
    CONTACT_SLOP,
    KIND_CONTACT,
    KIND_SURFACE,
    BodyArrays,
    ContactPlane,
    RigidBody,
    SurfaceAttachment,
)
from .errors import DynamicsError
from .geometry import quat_rotate, quat_to_matrix
from .sensor import BoundaryPlaneSet, PointCloud

#: Total closing speed (m/s) the whole cloud is allowed to demand per step.
CAP_CLOSING_SPEED = 3.0

#: Cap multiplier for identified landmark points.
FEATURE_CAP_FACTOR = 4.0

#: A vertex must stick out this far (m) before a boundary plane reacts.
BOUNDARY_TOLERANCE = 1e-4


@dataclass
class PackedScene:
    """All body hulls posed to world and concatenated for the batch kernels."""

    vertices: np.ndarray      # (sum nv, 3)
    normals: np.ndarray       # (sum nf, 3)
    offsets: np.ndarray       # (sum nf,)
    face_idx: np.ndarray      # (sum nf, max ring) local vertex indices
    face_cnt: np.ndarray      # (sum nf,)
    verts_start: np.ndarray   # (nb + 1,)
    faces_start: np.ndarray   # (nb + 1,)
    bound_center: np.ndarray  # (nb, 3)
    bound_radius: np.ndarray  # (nb,)


def pack_scene(bodies: list[RigidBody]) -> PackedScene:
    if not bodies:
        raise DynamicsError("need at least one body")
    packed = [b.shape.packed() for b in bodies]
    max_ring = max(p[3].shape[1] for p in packed)
    verts, normals, offsets, fidx, fcnt = [], [], [], [], []
    vstart, fstart = [0], [0]
    centers, radii = [], []
    for body, (v, n, d, idx, cnt) in zip(bodies, packed):
        vw, nw, dw = body.shape.posed(body.pose)
        verts.append(vw)
        normals.append(nw)
        offsets.append(dw)
        pad = np.zeros((idx.shape[0], max_ring), dtype=np.int64)
        pad[:, : idx.shape[1]] = idx
        fidx.append(pad)
        fcnt.append(cnt)
        vstart.append(vstart[-1] + len(vw))
        fstart.append(fstart[-1] + len(nw))
        centers.append(body.pose.apply(body.shape.bound_center))
        radii.append(body.shape.bound_radius)
    return PackedScene(
        np.ascontiguousarray(np.vstack(verts)),
        np.ascontiguousarray(np.vstack(normals)),
        np.ascontiguousarray(np.concatenate(offsets)),
        np.ascontiguousarray(np.vstack(fidx)),
        np.ascontiguousarray(np.concatenate(fcnt)),
        np.asarray(vstart, dtype=np.int64),
        np.asarray(fstart, dtype=np.int64),
        np.ascontiguousarray(np.vstack(centers)),
        np.asarray(radii, dtype=np.float64),
    )


class SceneTemplate:
    """Reusable packing for a fixed body list.

    The local-frame arrays are computed once; ``refresh`` re-poses them into
    preallocated world buffers, skipping bodies whose pose object has not
    changed.  The resulting arrays match ``pack_scene`` bit for bit, so the
    kernels see identical inputs either way.
    """

    def __init__(self, bodies: list[RigidBody]):
        if not bodies:
            raise DynamicsError("need at least one body")
        self.bodies = list(bodies)
        packed = [b.shape.packed() for b in self.bodies]
        max_ring = max(p[3].shape[1] for p in packed)
        verts, normals, offsets, fidx, fcnt = [], [], [], [], []
        vstart, fstart = [0], [0]
        for (v, n, d, idx, cnt) in packed:
            verts.append(v)
            normals.append(n)
            offsets.append(d)
            pad = np.zeros((idx.shape[0], max_ring), dtype=np.int64)
            pad[:, : idx.shape[1]] = idx
            fidx.append(pad)
            fcnt.append(cnt)
            vstart.append(vstart[-1] + len(v))
            fstart.append(fstart[-1] + len(n))
        self._verts_l = np.ascontiguousarray(np.vstack(verts))
        self._normals_l = np.ascontiguousarray(np.vstack(normals))
        self._offsets_l = np.ascontiguousarray(np.concatenate(offsets))
        self._centers_l = np.stack([b.shape.bound_center for b in self.bodies])
        self._seen: list = [None] * len(self.bodies)
        self.scene = PackedScene(
            np.empty_like(self._verts_l),
            np.empty_like(self._normals_l),
            np.empty_like(self._offsets_l),
            np.ascontiguousarray(np.vstack(fidx)),
            np.ascontiguousarray(np.concatenate(fcnt)),
            np.asarray(vstart, dtype=np.int64),
            np.asarray(fstart, dtype=np.int64),
            np.empty((len(self.bodies), 3)),
            np.asarray([b.shape.bound_radius for b in self.bodies], dtype=np.float64),
        )

    def refresh(self, arrays: BodyArrays | None = None) -> PackedScene:
        """Bring the world buffers up to date with the current body poses.

        ``arrays`` reuses a pose snapshot taken this cycle instead of
        restacking body attributes.
        """
        scene = self.scene
        stale = [b for b, body in enumerate(self.bodies) if body.pose is not self._seen[b]]
        if not stale:
            return scene
        vstart = scene.verts_start
        fstart = scene.faces_start
        if arrays is None:
            qs = np.stack([self.bodies[b].pose.rotation for b in stale])
            ts = np.stack([self.bodies[b].pose.translation for b in stale])
            rots = quat_to_matrix(qs)
        else:
            qs = arrays.rotation[stale]
            ts = arrays.translation[stale]
            rots = arrays.matrix[stale]
        scene.bound_center[stale] = quat_rotate(qs, self._centers_l[stale]) + ts
        for k, b in enumerate(stale):
            pose = self.bodies[b].pose
            rot = rots[k]
            t = pose.translation
            v0, v1 = vstart[b], vstart[b + 1]
            f0, f1 = fstart[b], fstart[b + 1]
            np.matmul(self._verts_l[v0:v1], rot.T, out=scene.vertices[v0:v1])
            scene.vertices[v0:v1] += t
            nw = scene.normals[f0:f1]
            np.matmul(self._normals_l[f0:f1], rot.T, out=nw)
            scene.offsets[f0:f1] = self._offsets_l[f0:f1] + nw @ t
            self._seen[b] = pose
        return scene


@dataclass
class PointAssignment:
    """Per-point nearest-surface match, stored column-wise (row i = point i)."""

    points: np.ndarray         # (n, 3) the cloud samples
    body_index: np.ndarray     # (n,)
    face_index: np.ndarray     # (n,) local to the assigned body
    surface_point: np.ndarray  # (n, 3) world
    distance: np.ndarray       # (n,)
    face_normal: np.ndarray    # (n, 3) world outward normal of the matched face
    inside: np.ndarray         # (n,) bool
    bodies: list[RigidBody]

    def __len__(self) -> int:
        return len(self.points)


def assign_points(cloud, bodies: list[RigidBody], facing_only: bool = True,
                  scene: PackedScene | None = None) -> PointAssignment:
    """Match every cloud point to the globally nearest body surface.

    Only camera-facing faces (planes with the origin on the outside) are
    eligible unless ``facing_only`` is off; distance ties go to the lowest
    body index.  ``scene`` lets callers reuse a packing across calls within
    one solver step.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = np.ascontiguousarray(pts.reshape(-1, 3))
    if scene is None:
        scene = pack_scene(bodies)
    if len(pts) == 0:
        empty = np.empty(0)
        return PointAssignment(pts, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                               pts.copy(), empty, pts.copy(), np.empty(0, dtype=bool), list(bodies))
    body, point, dist, face, inside = _assign_kernel(
        pts, scene.vertices, scene.normals, scene.offsets, scene.face_idx, scene.face_cnt,
        scene.verts_start, scene.faces_start, scene.bound_center, scene.bound_radius,
        facing_only,
    )
    local_face = face - scene.faces_start[body]
    return PointAssignment(pts, body, local_face, point, dist,
                           scene.normals[face], inside.astype(bool), list(bodies))


def per_point_cap(bodies: list[RigidBody], n_points: int,
                  closing_speed: float = CAP_CLOSING_SPEED) -> float:
    """Impulse cap splitting mass x speed equally across the cloud."""
    total_mass = sum(b.mass for b in bodies)
    return total_mass * closing_speed / max(n_points, 1)


def _local_points(assignment: PointAssignment,
                  arrays: BodyArrays | None = None) -> np.ndarray:
    """Assigned surface points expressed in their body's local frame."""
    out = np.empty_like(assignment.surface_point)
    bi = assignment.body_index
    if len(bi) == 0:
        return out
    # group rows by body with one stable sort; within a body the original
    # (ascending) point order is preserved, so each per-body product sees
    # the same operand rows as a masked gather would
    order = np.argsort(bi, kind="stable")
    sorted_bi = bi[order]
    starts = np.flatnonzero(np.r_[True, sorted_bi[1:] != sorted_bi[:-1]])
    ends = np.r_[starts[1:], len(sorted_bi)]
    uniq = sorted_bi[starts]
    if arrays is None:
        rots = quat_to_matrix(np.stack([assignment.bodies[b].pose.rotation for b in uniq]))
    else:
        rots = arrays.matrix[uniq]
    sp = assignment.surface_point
    for k in range(len(uniq)):
        body = assignment.bodies[uniq[k]]
        rows = order[starts[k]:ends[k]]
        out[rows] = (sp[rows] - body.pose.translation) @ rots[k]
    return out


def make_surface_constraints(assignment: PointAssignment, cap: float) -> list[SurfaceAttachment]:
    """One capped single-direction attachment per assigned point.

    The row acts along surface point -> cloud point, leaving lateral sliding
    free; a zero-distance match degenerates to the face outward normal with
    nothing to correct.
    """
    dirs = _attachment_dirs(assignment)
    locals_ = _local_points(assignment)
    return [
        SurfaceAttachment(
            assignment.bodies[assignment.body_index[i]],
            int(assignment.face_index[i]),
            locals_[i], assignment.points[i], dirs[i], cap,
        )
        for i in range(len(assignment))
    ]


def _attachment_dirs(assignment: PointAssignment) -> np.ndarray:
    dirs = assignment.points - assignment.surface_point
    norms = np.linalg.norm(dirs, axis=1)
    degenerate = norms < 1e-9
    safe = np.where(degenerate, 1.0, norms)
    dirs = dirs / safe[:, None]
    dirs[degenerate] = assignment.face_normal[degenerate]
    return dirs


_EMPTY_PARTS = (np.zeros(0), np.zeros(0), np.zeros((0, 12)), np.zeros(0),
                np.zeros(0), np.zeros(0), np.zeros(0))


def surface_rows(assignment: PointAssignment, cap: float, dt: float,
                 arrays: BodyArrays | None = None):
    """Pre-lowered attachment rows for a whole assignment in one batch.

    Produces exactly the rows that ``make_surface_constraints`` followed by
    constraint lowering would, without materializing the per-point objects;
    body indices refer to ``assignment.bodies``.  ``arrays`` reuses a pose
    snapshot of that same body list.
    """
    n = len(assignment)
    if n == 0:
        return _EMPTY_PARTS
    dirs = _attachment_dirs(assignment)
    locals_ = _local_points(assignment, arrays)
    bi = assignment.body_index
    if arrays is None:
        bodies = assignment.bodies
        qs = np.stack([b.pose.rotation for b in bodies])[bi]
        ts = np.stack([b.pose.translation for b in bodies])[bi]
        coms = np.stack([b.com_world for b in bodies])[bi]
    else:
        qs = arrays.rotation[bi]
        ts = arrays.translation[bi]
        coms = arrays.com[bi]
    attach = quat_rotate(qs, locals_) + ts
    r = attach - coms
    jac = np.zeros((n, 12))
    jac[:, 0:3] = dirs
    jac[:, 3] = r[:, 1] * dirs[:, 2] - r[:, 2] * dirs[:, 1]
    jac[:, 4] = r[:, 2] * dirs[:, 0] - r[:, 0] * dirs[:, 2]
    jac[:, 5] = r[:, 0] * dirs[:, 1] - r[:, 1] * dirs[:, 0]
    e = np.einsum("nc,nc->n", dirs, assignment.points - attach)
    caps = np.full(n, cap)
    return (bi, np.full(n, -1), jac, -e / dt, -caps, caps, np.full(n, KIND_SURFACE))


def surface_rows_rigid(assignment: PointAssignment, cap: float, dt: float,
                       body: RigidBody, body_index: int):
    """Attachment rows that all act on one rigid aggregate.

    The matched surface points may come from any number of hulls (the
    assignment keeps the true union-of-convexes surface); every row steers
    ``body``, which stands in for all of them moving together.
    """
    n = len(assignment)
    if n == 0:
        return _EMPTY_PARTS
    dirs = _attachment_dirs(assignment)
    attach = assignment.surface_point
    r = attach - body.com_world
    jac = np.zeros((n, 12))
    jac[:, 0:3] = dirs
    jac[:, 3] = r[:, 1] * dirs[:, 2] - r[:, 2] * dirs[:, 1]
    jac[:, 4] = r[:, 2] * dirs[:, 0] - r[:, 0] * dirs[:, 2]
    jac[:, 5] = r[:, 0] * dirs[:, 1] - r[:, 1] * dirs[:, 0]
    e = np.einsum("nc,nc->n", dirs, assignment.points - attach)
    caps = np.full(n, cap)
    return (np.full(n, body_index), np.full(n, -1), jac, -e / dt,
            -caps, caps, np.full(n, KIND_SURFACE))


def boundary_rows_on_body(planes: BoundaryPlaneSet, verts: np.ndarray,
                          body: RigidBody, body_index: int, beta: float, dt: float,
                          tolerance: float = BOUNDARY_TOLERANCE):
    """Containment contact rows for an explicit vertex set steering one body.

    Mirrors ``make_boundary_constraints`` gating plus contact lowering, but
    works off any world vertex array (e.g. all member hulls of a frozen
    composite) instead of the body's own shape.
    """
    if len(planes.normals) == 0:
        return _EMPTY_PARTS
    slack = verts @ planes.normals.T - planes.offsets  # (nv, np)
    hit = np.nonzero(slack.min(axis=0) < -tolerance)[0]
    if len(hit) == 0:
        return _EMPTY_PARTS
    com = body.com_world
    r = verts - com
    parts = []
    for p in hit:
        n = planes.normals[p]
        sl = slack[:, p]
        vp = body.vel[None, :] + np.cross(body.omega[None, :], r)
        pred = sl + (vp @ n) * dt
        active = (sl < CONTACT_SLOP) | (pred < 0.0)
        idx = np.nonzero(active)[0]
        m = len(idx)
        if m == 0:
            continue
        jac = np.zeros((m, 12))
        jac[:, 0:3] = n
        jac[:, 3:6] = np.cross(r[idx], n[None, :])
        sa = sl[idx]
        bias = np.where(sa < 0.0, beta * sa / dt, sa / dt)
        parts.append((np.full(m, body_index), np.full(m, -1), jac, bias,
                      np.zeros(m), np.full(m, np.inf), np.full(m, KIND_CONTACT)))
    if not parts:
        return _EMPTY_PARTS
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(7))


def boundary_rows(planes: BoundaryPlaneSet, bodies: list[RigidBody], scene: PackedScene,
                  beta: float, dt: float, tolerance: float = BOUNDARY_TOLERANCE):
    """Pre-lowered containment rows for every body, in one pass.

    Row-for-row equal to ``make_boundary_constraints`` followed by contact
    lowering, but gates all bodies against all planes with one stacked
    product and hoists the per-body point-velocity term across planes.
    """
    if len(planes.normals) == 0:
        return _EMPTY_PARTS
    vstart = scene.verts_start
    gate = scene.vertices @ planes.normals.T - planes.offsets
    mins = np.minimum.reduceat(gate, vstart[:-1], axis=0)
    ks, ps = np.nonzero(mins < -tolerance)  # row-major: body-major, planes ascending
    if len(ks) == 0:
        return _EMPTY_PARTS
    return _contact_parts(ks, planes.normals[ps], planes.offsets[ps],
                          bodies, scene, beta, dt)


def contact_rows(ks: np.ndarray, normals: np.ndarray, offsets: np.ndarray,
                 bodies: list[RigidBody], scene: PackedScene, beta: float, dt: float):
    """Pre-lowered separation rows for picked (body, plane) pairs.

    Equivalent to building one ContactPlane per pair (``bodies[ks[j]]``
    against ``normals[j] . x >= offsets[j]``) and lowering each, but reads
    posed vertices out of the packed scene and batches the per-row work
    across pairs.  The normals must already be unit length.
    """
    if len(ks) == 0:
        return _EMPTY_PARTS
    return _contact_parts(ks, normals, offsets, bodies, scene, beta, dt)


def _contact_parts(ks, nrm, off, bodies, scene, beta, dt):
    """Shared containment-row math; one entry in ``ks``/``nrm``/``off`` per pair.

    The row slack repeats the matvec the per-constraint path uses; pairs
    sharing a body (consecutive entries) reuse its lever arms, and all
    per-row work after the matvecs is batched.
    """
    vstart = scene.verts_start
    sls, rxs, rys, rzs, vxs, vys, vzs = [], [], [], [], [], [], []
    prev = -1
    for j in range(len(ks)):
        k = ks[j]
        if k != prev:
            prev = k
            body = bodies[k]
            verts = scene.vertices[vstart[k]:vstart[k + 1]]
            com = body.com_world
            rx = verts[:, 0] - com[0]
            ry = verts[:, 1] - com[1]
            rz = verts[:, 2] - com[2]
            ox, oy, oz = body.omega
            vpx = body.vel[0] + (oy * rz - oz * ry)
            vpy = body.vel[1] + (oz * rx - ox * rz)
            vpz = body.vel[2] + (ox * ry - oy * rx)
        sls.append(verts @ nrm[j] - off[j])
        rxs.append(rx)
        rys.append(ry)
        rzs.append(rz)
        vxs.append(vpx)
        vys.append(vpy)
        vzs.append(vpz)
    seg = np.array([len(s) for s in sls])
    sl = np.concatenate(sls)
    rx = np.concatenate(rxs)
    ry = np.concatenate(rys)
    rz = np.concatenate(rzs)
    vpx = np.concatenate(vxs)
    vpy = np.concatenate(vys)
    vpz = np.concatenate(vzs)
    nrep = np.repeat(nrm, seg, axis=0)
    nx, ny, nz = nrep[:, 0], nrep[:, 1], nrep[:, 2]
    pred = sl + (vpx * nx + vpy * ny + vpz * nz) * dt
    idx = np.nonzero((sl < CONTACT_SLOP) | (pred < 0.0))[0]
    m = len(idx)
    if m == 0:
        return _EMPTY_PARTS
    jac = np.zeros((m, 12))
    jac[:, 0] = nx[idx]
    jac[:, 1] = ny[idx]
    jac[:, 2] = nz[idx]
    jac[:, 3] = ry[idx] * nz[idx] - rz[idx] * ny[idx]
    jac[:, 4] = rz[idx] * nx[idx] - rx[idx] * nz[idx]
    jac[:, 5] = rx[idx] * ny[idx] - ry[idx] * nx[idx]
    sa = sl[idx]
    bias = np.where(sa < 0.0, beta * sa / dt, sa / dt)
    return (np.repeat(ks, seg)[idx], np.full(m, -1), jac, bias,
            np.zeros(m), np.full(m, np.inf), np.full(m, KIND_CONTACT))


def make_boundary_constraints(planes: BoundaryPlaneSet, bodies: list[RigidBody],
                              tolerance: float = BOUNDARY_TOLERANCE,
                              scene: PackedScene | None = None) -> list[ContactPlane]:
    """One-sided containment rows, only where a hull actually pokes out."""
    out: list[ContactPlane] = []
    if len(planes.normals) == 0:
        return out
    for k, body in enumerate(bodies):
        if scene is None:
            verts, _, _ = body.shape.posed(body.pose)
        else:
            verts = scene.vertices[scene.verts_start[k]:scene.verts_start[k + 1]]
        slack = verts @ planes.normals.T - planes.offsets  # (nv, np)
        for p in np.nonzero(slack.min(axis=0) < -tolerance)[0]:
            out.append(ContactPlane(body, planes.normals[p], float(planes.offsets[p])))
    return out


@dataclass(frozen=True)
class FeatureLabel:
    """A cloud point known to belong to a restricted set of bodies."""

    point_index: int
    allowed_bodies: tuple[int, ...]

    def __post_init__(self):
        if len(self.allowed_bodies) == 0:
            raise DynamicsError("feature label needs a non-empty allowed set")


def bind_known_features(labels: list[FeatureLabel], cloud, bodies: list[RigidBody],
                        cap: float, facing_only: bool = True) -> list[SurfaceAttachment]:
    """Attachments for identified points, matched only within their allowed bodies.

    ``cap`` is the standard per-point cap; these rows apply FEATURE_CAP_FACTOR
    times that since an identified landmark outranks anonymous samples.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    out: list[SurfaceAttachment] = []
    if not labels:
        return out
    for label in labels:
        if not 0 <= label.point_index < len(pts):
            raise DynamicsError(f"feature label references point {label.point_index} "
                                f"outside the cloud of {len(pts)}")
        for bi in label.allowed_bodies:
            if not 0 <= bi < len(bodies):
                raise DynamicsError(f"feature label references body index {bi}")
    for label in labels:
        allowed = sorted(set(label.allowed_bodies))
        subset = [bodies[bi] for bi in allowed]
        sub = assign_points(pts[label.point_index][None, :], subset, facing_only=facing_only)
        att = make_surface_constraints(sub, cap * FEATURE_CAP_FACTOR)[0]
        out.append(att)
    return out
