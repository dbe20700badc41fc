"""Constraint-based rigid body simulation.

The simulation loop is: lower all constraints to scalar velocity rows, run an
iterated impulse solver (projected Gauss-Seidel with per-row accumulated
impulse clamping), then integrate poses.  Positional drift is fed back through
Baumgarte bias terms rather than position projection.

Sign conventions for a row: the solver drives ``J . v + bias`` toward zero
subject to the impulse bounds, where ``J = [Ja_lin, Ja_ang, Jb_lin, Jb_ang]``
and ``v`` stacks both bodies' linear and angular velocities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DynamicsError
from .geometry import (
    ConvexPolyhedron,
    RigidPose,
    quat_conj,
    quat_from_rotvec,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    quat_to_rotvec,
)

INF = float("inf")

# Row kind codes (RowBatch.kind), in solver sweep order.
KIND_BALL = 0
KIND_LIMIT = 1
KIND_PARALLEL = 2
KIND_CONTACT = 3
KIND_NUDGE = 4
KIND_SURFACE = 5

#: Vertices closer than this to a contact plane get a row even before touching.
CONTACT_SLOP = 1e-4


# ---------------------------------------------------------------------------
# Bodies.
# ---------------------------------------------------------------------------

@dataclass
class RigidBody:
    """One dynamic convex body.

    ``pose`` places the body frame (not the center of mass) in the world;
    ``com_local`` is the mass center in the body frame and defaults to the
    hull centroid.  ``vel`` is the velocity of the mass center.  Static bodies
    encode infinite mass as ``inv_mass = 0``; frozen bodies additionally drop
    their inverse mass/inertia for the duration of the freeze.
    """

    name: str
    shape: ConvexPolyhedron | None
    mass: float
    inv_mass: float
    inertia_body: np.ndarray
    inv_inertia_body: np.ndarray
    pose: RigidPose
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    com_local: np.ndarray | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.com_local is None:
            self.com_local = self.shape.centroid.copy()
        self.vel = np.asarray(self.vel, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self._com_cache = None

    @classmethod
    def from_shape(cls, name: str, shape: ConvexPolyhedron, pose: RigidPose,
                   density: float = 1000.0, static: bool = False) -> "RigidBody":
        mass = density * shape.volume
        inertia = density * shape.inertia_unit_density
        if static:
            return cls(name, shape, mass, 0.0, inertia, np.zeros((3, 3)), pose)
        return cls(name, shape, mass, 1.0 / mass, inertia, np.linalg.inv(inertia), pose)

    @property
    def com_world(self) -> np.ndarray:
        # Cached per pose object; pose updates swap the object, which is what
        # invalidates the cache (RigidPose instances are immutable).
        pose = self.pose
        cache = self._com_cache
        if cache is not None and cache[0] is pose:
            return cache[1]
        com = pose.apply(self.com_local)
        self._com_cache = (pose, com)
        return com

    def effective_inv_mass(self) -> float:
        return 0.0 if self.frozen else self.inv_mass

    def effective_inv_inertia_world(self) -> np.ndarray:
        if self.frozen or self.inv_mass == 0.0:
            return np.zeros((3, 3))
        r = self.pose.matrix()
        return r @ self.inv_inertia_body @ r.T

    def point_velocity(self, point_world: np.ndarray) -> np.ndarray:
        return self.vel + np.cross(self.omega, point_world - self.com_world)

    def copy(self) -> "RigidBody":
        return RigidBody(
            self.name, self.shape, self.mass, self.inv_mass,
            self.inertia_body, self.inv_inertia_body, self.pose,
            self.vel.copy(), self.omega.copy(), self.com_local.copy(), self.frozen,
        )


# ---------------------------------------------------------------------------
# Constraints.
# ---------------------------------------------------------------------------

@dataclass
class BallJoint:
    """Pin two bodies together at an anchor point given in each body frame."""

    parent: RigidBody
    child: RigidBody
    anchor_parent: np.ndarray
    anchor_child: np.ndarray

    def __post_init__(self):
        self.anchor_parent = np.asarray(self.anchor_parent, dtype=np.float64)
        self.anchor_child = np.asarray(self.anchor_child, dtype=np.float64)

    def anchor_error(self) -> float:
        """World-space separation of the two anchor points (drift measure)."""
        pa = self.parent.pose.apply(self.anchor_parent)
        pc = self.child.pose.apply(self.anchor_child)
        return float(np.linalg.norm(pc - pa))


@dataclass
class AngularLimit:
    """Swing/twist angle limits between a parent and child body.

    ``frame_parent``/``frame_child`` place the shared joint frame in each body
    frame; the frames coincide at the rest posture, so all angles are measured
    relative to rest.  Axis order is (flex about x, abduction about z, twist
    about the bone's long axis y); ``limits`` is a (3, 2) array of radian
    (min, max) pairs.  A zero-width pair locks that axis.
    """

    parent: RigidBody
    child: RigidBody
    frame_parent: np.ndarray
    frame_child: np.ndarray
    limits: np.ndarray

    def __post_init__(self):
        self.frame_parent = np.asarray(self.frame_parent, dtype=np.float64)
        self.frame_child = np.asarray(self.frame_child, dtype=np.float64)
        self.limits = np.asarray(self.limits, dtype=np.float64)
        if self.limits.shape != (3, 2):
            raise DynamicsError("angular limits must be a (3, 2) min/max array")
        if np.any(self.limits[:, 0] > self.limits[:, 1]):
            raise DynamicsError("angular limit min exceeds max")

    def angles(self) -> np.ndarray:
        """Current (flex, abduction, twist) angles, radians."""
        qp = quat_mul(self.parent.pose.rotation, self.frame_parent)
        qc = quat_mul(self.child.pose.rotation, self.frame_child)
        ang, _ = _joint_angles_axes(qp[None, :], qc[None, :])
        return ang[0]

    def violation(self) -> float:
        """Largest limit overshoot across the three axes, radians (0 if inside)."""
        a = self.angles()
        over = np.maximum(a - self.limits[:, 1], self.limits[:, 0] - a)
        return float(max(0.0, over.max()))


@dataclass
class ContactPlane:
    """One-sided plane: the body must keep all vertices on ``n . x >= offset``."""

    body: RigidBody
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if not (0.999999 < n < 1.000001):
            raise DynamicsError("contact plane normal must be unit length")


@dataclass
class SurfaceAttachment:
    """Pull one surface point toward a cloud point along a single direction.

    Motion perpendicular to ``direction`` stays free; the accumulated impulse
    is clamped to ``[-cap, +cap]`` so any one sample can be outvoted.
    """

    body: RigidBody
    face_index: int
    local_point: np.ndarray
    target: np.ndarray
    direction: np.ndarray
    cap: float

    def __post_init__(self):
        self.local_point = np.asarray(self.local_point, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.cap < 0.0:
            raise DynamicsError("impulse cap must be >= 0")
        n = np.linalg.norm(self.direction)
        if not (0.999999 < n < 1.000001):
            raise DynamicsError("attachment direction must be unit length")


@dataclass
class OrientationParallel:
    """Keep two bodies' long axes within ``max_angle`` of parallel."""

    body_a: RigidBody
    body_b: RigidBody
    max_angle: float

    def __post_init__(self):
        if self.max_angle < 0.0:
            raise DynamicsError("max_angle must be >= 0")


@dataclass
class PoseNudge:
    """Steer a body's orientation toward a target with a capped impulse."""

    body: RigidBody
    target_rotation: np.ndarray
    cap: float

    def __post_init__(self):
        self.target_rotation = np.asarray(self.target_rotation, dtype=np.float64)
        if self.cap < 0.0:
            raise DynamicsError("impulse cap must be >= 0")


Constraint = BallJoint | AngularLimit | ContactPlane | SurfaceAttachment | OrientationParallel | PoseNudge


@dataclass
class SolverConfig:
    dt: float = 1.0 / 60.0
    iterations: int = 16
    beta: float = 0.2
    damping: float = 0.5

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigError("dt must be > 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be in [0, 1]")
        if not 0.0 <= self.damping <= 1.0:
            raise ConfigError("damping must be in [0, 1]")


# ---------------------------------------------------------------------------
# Constraint rows.
# ---------------------------------------------------------------------------

@dataclass
class ConstraintRow:
    """Read-only view of one scalar row inside a RowBatch."""

    body_a: int
    body_b: int
    j_lin_a: np.ndarray
    j_ang_a: np.ndarray
    j_lin_b: np.ndarray
    j_ang_b: np.ndarray
    bias: float
    lower: float
    upper: float
    impulse: float
    kind: int


class RowBatch:
    """All rows of one solve, stored as packed arrays for the kernel.

    Iteration/indexing materializes ConstraintRow views; the arrays themselves
    are the ground truth.
    """

    __slots__ = ("body_a", "body_b", "jac", "bias", "lo", "hi", "lam", "kind")

    def __init__(self, body_a, body_b, jac, bias, lo, hi, kind):
        self.body_a = np.ascontiguousarray(body_a, dtype=np.int64)
        self.body_b = np.ascontiguousarray(body_b, dtype=np.int64)
        self.jac = np.ascontiguousarray(jac, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        self.lo = np.ascontiguousarray(lo, dtype=np.float64)
        self.hi = np.ascontiguousarray(hi, dtype=np.float64)
        self.kind = np.ascontiguousarray(kind, dtype=np.int8)
        self.lam = np.zeros(len(self.bias))

    @classmethod
    def empty(cls) -> "RowBatch":
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 12)), np.zeros(0),
                   np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.bias)

    def __getitem__(self, i: int) -> ConstraintRow:
        j = self.jac[i]
        return ConstraintRow(
            int(self.body_a[i]), int(self.body_b[i]),
            j[0:3].copy(), j[3:6].copy(), j[6:9].copy(), j[9:12].copy(),
            float(self.bias[i]), float(self.lo[i]), float(self.hi[i]),
            float(self.lam[i]), int(self.kind[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def count_kind(self, kind: int) -> int:
        return int(np.sum(self.kind == kind))


def _concat_rows(parts) -> RowBatch:
    live = [p for p in parts if len(p[3]) > 0]
    if not live:
        return RowBatch.empty()
    return RowBatch(
        np.concatenate([p[0] for p in live]),
        np.concatenate([p[1] for p in live]),
        np.concatenate([p[2] for p in live]),
        np.concatenate([p[3] for p in live]),
        np.concatenate([p[4] for p in live]),
        np.concatenate([p[5] for p in live]),
        np.concatenate([p[6] for p in live]),
    )


def append_rows(batch: RowBatch, part) -> RowBatch:
    """Append one pre-lowered parts tuple after an existing batch.

    Callers are responsible for keeping the canonical sweep order (the extra
    rows land after everything already in ``batch``).
    """
    if len(part[3]) == 0:
        return batch
    if len(batch) == 0:
        return RowBatch(*part)
    return RowBatch(
        np.concatenate([batch.body_a, part[0]]),
        np.concatenate([batch.body_b, part[1]]),
        np.concatenate([batch.jac, part[2]]),
        np.concatenate([batch.bias, part[3]]),
        np.concatenate([batch.lo, part[4]]),
        np.concatenate([batch.hi, part[5]]),
        np.concatenate([batch.kind, part[6]]),
    )


# ---------------------------------------------------------------------------
# Swing/twist joint angles, batched.
# ---------------------------------------------------------------------------

_JOINT_AXES = np.eye(3)  # joint frame: x = flex, z = abduction, y = twist (long axis)


def _joint_angles_axes(qp: np.ndarray, qc: np.ndarray):
    """Angles and world-frame constraint axes for each joint.

    ``qp``/``qc`` are the world orientations of the joint frame as carried by
    the parent and child (n, 4).  Returns angles (n, 3) ordered (flex,
    abduction, twist) and axes (n, 3, 3) where axes[:, k] is the world axis
    whose angular-velocity projection is the rate of angle k.
    """
    qj = quat_mul(quat_conj(qp), qc)
    # canonicalize to the short rotation
    sign = np.where(qj[:, :1] < 0.0, -1.0, 1.0)
    qj = qj * sign
    # twist about local y
    tw = np.zeros_like(qj)
    tw[:, 0] = qj[:, 0]
    tw[:, 2] = qj[:, 2]
    tn = np.linalg.norm(tw, axis=1, keepdims=True)
    degenerate = tn[:, 0] < 1e-12
    tw[degenerate] = np.array([1.0, 0.0, 0.0, 0.0])
    tn[degenerate] = 1.0
    tw = tw / tn
    twist = 2.0 * np.arctan2(tw[:, 2], tw[:, 0])
    sw = quat_mul(qj, quat_conj(tw))
    rv = quat_to_rotvec(sw)
    angles = np.stack([rv[:, 0], rv[:, 2], twist], axis=1)

    n = len(qj)
    rpc = quat_to_matrix(np.concatenate([qp, qc]))
    axes = np.empty((n, 3, 3))
    axes[:, 0] = rpc[:n, :, 0]  # flex rate along parent joint-frame x
    axes[:, 1] = rpc[:n, :, 2]  # abduction rate along parent joint-frame z
    axes[:, 2] = rpc[n:, :, 1]  # twist rate along child joint-frame y
    return angles, axes


# ---------------------------------------------------------------------------
# Lowering.
# ---------------------------------------------------------------------------

class BodyArrays:
    """Stacked pose/velocity snapshot of a fixed body list.

    Built once per solver cycle so scene packing, lowering, and the solver
    gather by row index instead of restacking python attributes.  Rows hold
    the same values as the per-body arrays; treat them as read-only.  The
    center-of-mass block is pushed back into each body's pose-keyed cache,
    so later ``com_world`` reads are free.  The velocity stacks materialize
    on first access: take them before the solver mutates the bodies.
    """

    __slots__ = ("rotation", "translation", "com", "_bodies", "_vel", "_omega",
                 "_matrix")

    def __init__(self, bodies, com_local: np.ndarray | None = None):
        self.rotation = np.stack([b.pose.rotation for b in bodies])
        self.translation = np.stack([b.pose.translation for b in bodies])
        if com_local is None:
            com_local = np.stack([b.com_local for b in bodies])
        self.com = quat_rotate(self.rotation, com_local) + self.translation
        for i, b in enumerate(bodies):
            b._com_cache = (b.pose, self.com[i])
        self._bodies = bodies
        self._vel = None
        self._omega = None
        self._matrix = None

    @property
    def matrix(self) -> np.ndarray:
        """Rotation matrices, computed on first use."""
        if self._matrix is None:
            self._matrix = quat_to_matrix(self.rotation)
        return self._matrix

    @property
    def vel(self) -> np.ndarray:
        if self._vel is None:
            self._vel = np.stack([b.vel for b in self._bodies])
        return self._vel

    @property
    def omega(self) -> np.ndarray:
        if self._omega is None:
            self._omega = np.stack([b.omega for b in self._bodies])
        return self._omega


def lower_constraints(constraints, bodies, config: SolverConfig, pre_parts=(),
                      pre_contact_parts=(), pre_surface_parts=()) -> RowBatch:
    """Turn high-level constraints into solver rows, in the fixed sweep order:
    joints, angular limits, parallel-orientation, contacts, nudges, surface
    attachments.

    ``pre_parts``/``pre_contact_parts``/``pre_surface_parts`` accept already-
    lowered row blocks (parts tuples) spliced in at the head of the batch, the
    contact section, and the surface section respectively, so batch producers
    keep the canonical order without building per-row constraint objects.
    """
    index = {id(b): i for i, b in enumerate(bodies)}

    def bidx(body) -> int:
        i = index.get(id(body))
        if i is None:
            raise DynamicsError(f"constraint references unknown body {body.name!r}")
        return i

    balls: list[BallJoint] = []
    limits: list[AngularLimit] = []
    parallels: list[OrientationParallel] = []
    contacts: list[ContactPlane] = []
    nudges: list[PoseNudge] = []
    surfaces: list[SurfaceAttachment] = []
    for c in constraints:
        if isinstance(c, BallJoint):
            balls.append(c)
        elif isinstance(c, AngularLimit):
            limits.append(c)
        elif isinstance(c, OrientationParallel):
            parallels.append(c)
        elif isinstance(c, ContactPlane):
            contacts.append(c)
        elif isinstance(c, PoseNudge):
            nudges.append(c)
        elif isinstance(c, SurfaceAttachment):
            surfaces.append(c)
        else:
            raise DynamicsError(f"unknown constraint type {type(c).__name__}")

    dt = config.dt
    beta = config.beta
    parts = list(pre_parts)

    if balls:
        parts.append(_lower_balls(balls, bidx, bodies, beta, dt))
    if limits:
        parts.append(_lower_limits(limits, bidx, bodies, beta, dt))
    for c in parallels:
        part = _lower_parallel(c, bidx, beta, dt)
        if part is not None:
            parts.append(part)
    parts.extend(pre_contact_parts)
    for c in contacts:
        parts.append(_lower_contact(c, bidx, beta, dt))
    for c in nudges:
        parts.append(_lower_nudge(c, bidx, dt))
    parts.extend(pre_surface_parts)
    if surfaces:
        parts.append(_lower_surfaces(surfaces, bidx, bodies, dt))

    batch = _concat_rows(parts)
    if len(batch) and not (
        np.all(np.isfinite(batch.jac)) and np.all(np.isfinite(batch.bias))
    ):
        raise DynamicsError("non-finite constraint row (NaN in input parameters)")
    return batch


def _lower_balls(balls, bidx, bodies, beta, dt):
    ia = np.array([bidx(c.parent) for c in balls])
    ib = np.array([bidx(c.child) for c in balls])
    return _ball_rows(
        ia, ib,
        np.stack([c.parent.pose.rotation for c in balls]),
        np.stack([c.parent.pose.translation for c in balls]),
        np.stack([c.child.pose.rotation for c in balls]),
        np.stack([c.child.pose.translation for c in balls]),
        np.stack([c.parent.com_world for c in balls]),
        np.stack([c.child.com_world for c in balls]),
        np.stack([c.anchor_parent for c in balls]),
        np.stack([c.anchor_child for c in balls]),
        beta, dt,
    )


def _ball_rows(ia, ib, qa, ta, qb, tb, ca, cb, anchor_a, anchor_b, beta, dt):
    jac, bias = _kernels.ball_rows(qa, ta, qb, tb, ca, cb,
                                   anchor_a, anchor_b, beta, dt)
    rows = len(bias)
    return (
        np.repeat(ia, 3), np.repeat(ib, 3), jac, bias,
        np.full(rows, -INF), np.full(rows, INF), np.full(rows, KIND_BALL),
    )


def _lower_limits(limits, bidx, bodies, beta, dt):
    ia = np.array([bidx(c.parent) for c in limits])
    ib = np.array([bidx(c.child) for c in limits])
    lim = np.stack([c.limits for c in limits])  # (n, 3, 2)
    return _limit_rows(
        ia, ib,
        quat_mul(
            np.stack([c.parent.pose.rotation for c in limits]),
            np.stack([c.frame_parent for c in limits]),
        ),
        quat_mul(
            np.stack([c.child.pose.rotation for c in limits]),
            np.stack([c.frame_child for c in limits]),
        ),
        np.stack([c.parent.omega for c in limits]),
        np.stack([c.child.omega for c in limits]),
        lim, (lim[:, :, 1] - lim[:, :, 0]) < 1e-9,
        beta, dt,
    )


def _limit_rows(ia, ib, qp, qc, wp, wc, lim, locked, beta, dt):
    ia_o, ib_o, jac, bias, lo, hi = _kernels.limit_rows(
        ia, ib, qp, qc, wp, wc, lim, locked, beta, dt)
    return ia_o, ib_o, jac, bias, lo, hi, np.full(len(bias), KIND_LIMIT)


class JointBlockCache:
    """Constant gather tables for a persistent set of joint constraints.

    Body indices, anchors, joint frames, and limit tables never change over
    a skeleton's life; caching the stacks turns each lowering call into
    fancy-indexed arithmetic on the current ``BodyArrays`` snapshot.
    ``head_parts`` emits exactly what ``lower_constraints`` would for the
    same ball and limit constraints; anything else in ``constraints`` is
    passed through untouched in ``rest``.
    """

    def __init__(self, constraints, bodies):
        index = {id(b): i for i, b in enumerate(bodies)}
        balls = [c for c in constraints if isinstance(c, BallJoint)]
        limits = [c for c in constraints if isinstance(c, AngularLimit)]
        self.rest = [c for c in constraints
                     if not isinstance(c, (BallJoint, AngularLimit))]
        self.ball_ia = np.array([index[id(c.parent)] for c in balls], dtype=np.int64)
        self.ball_ib = np.array([index[id(c.child)] for c in balls], dtype=np.int64)
        self.ball_anchor_a = (np.stack([c.anchor_parent for c in balls])
                              if balls else np.zeros((0, 3)))
        self.ball_anchor_b = (np.stack([c.anchor_child for c in balls])
                              if balls else np.zeros((0, 3)))
        self.limit_ia = np.array([index[id(c.parent)] for c in limits], dtype=np.int64)
        self.limit_ib = np.array([index[id(c.child)] for c in limits], dtype=np.int64)
        self.frame_parent = (np.stack([c.frame_parent for c in limits])
                             if limits else np.zeros((0, 4)))
        self.frame_child = (np.stack([c.frame_child for c in limits])
                            if limits else np.zeros((0, 4)))
        self.lim = (np.stack([c.limits for c in limits])
                    if limits else np.zeros((0, 3, 2)))
        self.locked = (self.lim[:, :, 1] - self.lim[:, :, 0]) < 1e-9
        self.limit_icat = np.concatenate([self.limit_ia, self.limit_ib])
        self.frame_cat = np.concatenate([self.frame_parent, self.frame_child])
        self.ball_icat = np.concatenate([self.ball_ia, self.ball_ib])
        self.ball_anchor_cat = np.concatenate([self.ball_anchor_a, self.ball_anchor_b])

    def head_parts(self, arrays: BodyArrays, beta: float, dt: float):
        parts = []
        if len(self.ball_ia):
            parts.append(_ball_rows(
                self.ball_ia, self.ball_ib,
                arrays.rotation[self.ball_ia], arrays.translation[self.ball_ia],
                arrays.rotation[self.ball_ib], arrays.translation[self.ball_ib],
                arrays.com[self.ball_ia], arrays.com[self.ball_ib],
                self.ball_anchor_a, self.ball_anchor_b, beta, dt,
            ))
        if len(self.limit_ia):
            n = len(self.limit_ia)
            # fused multiply over both frame sets; elementwise, so the halves
            # match separate calls
            qcat = quat_mul(arrays.rotation[self.limit_icat], self.frame_cat)
            parts.append(_limit_rows(
                self.limit_ia, self.limit_ib, qcat[:n], qcat[n:],
                arrays.omega[self.limit_ia], arrays.omega[self.limit_ib],
                self.lim, self.locked, beta, dt,
            ))
        return tuple(parts)

    def project(self, bodies, t: np.ndarray, q: np.ndarray) -> None:
        """``project_ball_joints`` over integrated pose stacks.

        ``t``/``q`` must cover every body in index order; translations are
        corrected in place and moved bodies get their pose rewritten.
        """
        n = len(self.ball_ia)
        if n == 0:
            return
        rot = quat_rotate(q[self.ball_icat], self.ball_anchor_cat)
        movable = np.empty(len(bodies), dtype=np.bool_)
        for i, b in enumerate(bodies):
            movable[i] = b.inv_mass != 0.0 and not b.frozen
        changed = np.zeros(len(bodies), dtype=np.bool_)
        _kernels.project_balls(t, rot[:n], rot[n:], self.ball_ia, self.ball_ib,
                               movable, changed)
        for i in np.nonzero(changed)[0]:
            b = bodies[i]
            b.pose = RigidPose.trusted(t[i].copy(), b.pose.rotation)


def _lower_parallel(c: OrientationParallel, bidx, beta, dt):
    ya = quat_rotate(c.body_a.pose.rotation, np.array([0.0, 1.0, 0.0]))
    yb = quat_rotate(c.body_b.pose.rotation, np.array([0.0, 1.0, 0.0]))
    cr = np.cross(ya, yb)
    s = np.linalg.norm(cr)
    angle = float(np.arctan2(s, np.dot(ya, yb)))
    if angle <= c.max_angle or s < 1e-9:
        return None
    axis = cr / s
    j = np.zeros((1, 12))
    j[0, 3:6] = axis
    j[0, 9:12] = -axis
    bias = np.array([beta * (c.max_angle - angle) / dt])
    return (
        np.array([bidx(c.body_a)]), np.array([bidx(c.body_b)]), j, bias,
        np.array([0.0]), np.array([INF]), np.array([KIND_PARALLEL]),
    )


def _lower_contact(c: ContactPlane, bidx, beta, dt):
    body = c.body
    i = bidx(body)
    verts, _, _ = body.shape.posed(body.pose)
    n = c.normal
    slack = verts @ n - c.offset
    com = body.com_world
    r = verts - com
    vp = body.vel[None, :] + np.cross(body.omega[None, :], r)
    pred = slack + (vp @ n) * dt
    active = (slack < CONTACT_SLOP) | (pred < 0.0)
    idx = np.nonzero(active)[0]
    m = len(idx)
    if m == 0:
        return (np.zeros(0), np.zeros(0), np.zeros((0, 12)), np.zeros(0),
                np.zeros(0), np.zeros(0), np.zeros(0))
    jac = np.zeros((m, 12))
    jac[:, 0:3] = n
    jac[:, 3:6] = np.cross(r[idx], n[None, :])
    sl = slack[idx]
    bias = np.where(sl < 0.0, beta * sl / dt, sl / dt)
    return (
        np.full(m, i), np.full(m, -1), jac, bias,
        np.zeros(m), np.full(m, INF), np.full(m, KIND_CONTACT),
    )


def _lower_nudge(c: PoseNudge, bidx, dt):
    i = bidx(c.body)
    delta = quat_mul(c.target_rotation, quat_conj(c.body.pose.rotation))
    e = quat_to_rotvec(delta)
    jac = np.zeros((3, 12))
    jac[:, 3:6] = np.eye(3)
    return (
        np.full(3, i), np.full(3, -1), jac, -e / dt,
        np.full(3, -c.cap), np.full(3, c.cap), np.full(3, KIND_NUDGE),
    )


def _lower_surfaces(surfaces, bidx, bodies, dt):
    n = len(surfaces)
    ib = np.array([bidx(c.body) for c in surfaces])
    qs = np.stack([bodies[i].pose.rotation for i in ib])
    ts = np.stack([bodies[i].pose.translation for i in ib])
    coms = np.stack([bodies[i].com_world for i in ib])
    local = np.stack([c.local_point for c in surfaces])
    target = np.stack([c.target for c in surfaces])
    u = np.stack([c.direction for c in surfaces])
    cap = np.array([c.cap for c in surfaces])
    attach = quat_rotate(qs, local) + ts
    r = attach - coms
    jac = np.zeros((n, 12))
    jac[:, 0:3] = u
    jac[:, 3:6] = np.cross(r, u)
    e = np.einsum("nc,nc->n", u, target - attach)
    return (ib, np.full(n, -1), jac, -e / dt, -cap, cap, np.full(n, KIND_SURFACE))


# ---------------------------------------------------------------------------
# Solving and integration.
# ---------------------------------------------------------------------------

def solve(rows: RowBatch, bodies, iterations: int, arrays: BodyArrays | None = None,
          inv_mass: np.ndarray | None = None, inv_body: np.ndarray | None = None):
    """Run the impulse solver in place over the bodies' velocities.

    ``arrays`` reuses a pose snapshot taken this cycle; ``inv_mass`` and
    ``inv_body`` accept pre-stacked constants.  Returns the mutated
    ``(vel, omega)`` stacks (row i = body i) so integration can consume them
    without regathering, or None when there was nothing to solve.
    """
    if len(rows) == 0:
        return None
    live = np.array([not (b.frozen or b.inv_mass == 0.0) for b in bodies])
    # np.stack yields C-contiguous arrays, which the kernel mutates in place
    vel = np.stack([b.vel for b in bodies])
    omega = np.stack([b.omega for b in bodies])
    if inv_mass is None:
        inv_mass = np.array([b.inv_mass for b in bodies])
    else:
        inv_mass = inv_mass.copy()
    inv_mass[~live] = 0.0
    if arrays is None:
        rot = quat_to_matrix(np.stack([b.pose.rotation for b in bodies]))
    else:
        rot = arrays.matrix
    if inv_body is None:
        inv_body = np.stack([b.inv_inertia_body for b in bodies])
    inv_inertia = np.ascontiguousarray(np.einsum("nij,njk,nlk->nil", rot, inv_body, rot))
    inv_inertia[~live] = 0.0
    _kernels.solve_rows(
        vel, omega, inv_mass, inv_inertia, rows.body_a, rows.body_b,
        rows.jac, rows.bias, rows.lo, rows.hi, rows.lam, iterations,
    )
    # bound containment is structural; a violation means a solver bug
    assert np.all(rows.lam >= rows.lo - 1e-12) and np.all(rows.lam <= rows.hi + 1e-12)
    for i, b in enumerate(bodies):
        b.vel = vel[i]
        b.omega = omega[i]
    return vel, omega


def integrate(bodies, config: SolverConfig, arrays: BodyArrays | None = None,
              moved=None, com_local: np.ndarray | None = None):
    """Advance poses with post-solve velocities, then damp.

    ``arrays`` supplies the pre-integration pose snapshot (poses are
    untouched by the velocity solve, so it is still current); ``moved`` takes
    the stacks returned by ``solve``; ``com_local`` a pre-stacked constant.
    Returns the new (translation, rotation) stacks when every body moved,
    else None; they stay valid until someone rewrites a pose.
    """
    dt = config.dt
    keep = 1.0 - config.damping
    idx = [i for i, b in enumerate(bodies) if not (b.inv_mass == 0.0 or b.frozen)]
    if not idx:
        return None
    active = [bodies[i] for i in idx]
    whole = len(idx) == len(bodies)
    if moved is None:
        vel = np.stack([b.vel for b in active])
        omega = np.stack([b.omega for b in active])
    else:
        vel = moved[0] if whole else moved[0][idx]
        omega = moved[1] if whole else moved[1][idx]
    if arrays is None:
        com = np.stack([b.com_world for b in active]) + vel * dt
        rot = np.stack([b.pose.rotation for b in active])
    else:
        com = (arrays.com if whole else arrays.com[idx]) + vel * dt
        rot = arrays.rotation if whole else arrays.rotation[idx]
    if com_local is None:
        com_local = np.stack([b.com_local for b in active])
    elif not whole:
        com_local = com_local[idx]
    q = quat_normalize(quat_mul(quat_from_rotvec(omega * dt), rot))
    t = com - quat_rotate(q, com_local)
    velk = vel * keep
    omgk = omega * keep
    for i, b in enumerate(active):
        b.pose = RigidPose.trusted(t[i].copy(), q[i].copy())
        b.vel = velk[i]
        b.omega = omgk[i]
    return (t, q) if whole else None


def ball_projection_cache(constraints):
    """Constant stacks for ``project_ball_joints`` over a fixed constraint set."""
    balls = [c for c in constraints if isinstance(c, BallJoint)]
    if not balls:
        return (), None, None
    return (balls,
            np.stack([c.anchor_parent for c in balls]),
            np.stack([c.anchor_child for c in balls]))


def project_ball_joints(constraints, cache=None) -> None:
    """Close residual ball-joint gaps by translating each child onto its anchor.

    Velocity-level Baumgarte alone leaves an equilibrium gap proportional to
    (angular rate x dt)^2, which can exceed a millimeter for fast rotations;
    one tree-ordered translational snap removes it exactly without touching
    orientations or velocities.
    """
    balls, aa, ac = cache if cache is not None else ball_projection_cache(constraints)
    if not balls:
        return
    # orientations are fixed during projection, so rotate all anchors at once;
    # translations must still be read inside the loop (tree-ordered updates)
    ra = quat_rotate(np.stack([c.parent.pose.rotation for c in balls]), aa)
    rc = quat_rotate(np.stack([c.child.pose.rotation for c in balls]), ac)
    for i, c in enumerate(balls):
        err = (ra[i] + c.parent.pose.translation) - (rc[i] + c.child.pose.translation)
        if err @ err == 0.0:
            continue
        child = c.child
        if child.inv_mass == 0.0 or child.frozen:
            if c.parent.inv_mass == 0.0 or c.parent.frozen:
                continue
            parent = c.parent
            parent.pose = RigidPose.trusted(parent.pose.translation - err, parent.pose.rotation)
        else:
            child.pose = RigidPose.trusted(child.pose.translation + err, child.pose.rotation)


def step_world(bodies, constraints, config: SolverConfig) -> RowBatch:
    """One full lower -> solve -> integrate cycle; returns the solved rows."""
    rows = lower_constraints(constraints, bodies, config)
    solve(rows, bodies, config.iterations)
    integrate(bodies, config)
    project_ball_joints(constraints)
    return rows


# ---------------------------------------------------------------------------
# Bone-on-bone separation.
# ---------------------------------------------------------------------------

def collision_constraints(bodies, disabled_pairs, margin: float = 1e-3) -> list[ContactPlane]:
    """Separation planes for interpenetrating non-neighbor body pairs.

    Detection is vertex-in-hull: for every vertex of A inside B (or within
    ``margin`` of it), B's most-violated face plane becomes a one-sided
    ContactPlane on A, and symmetrically.  Shallow edge-edge cases are
    ignored on purpose; in tracking the data constraints keep separated bones
    apart and neighbors are excluded by the disabled list.
    """
    out: list[ContactPlane] = []
    nb = len(bodies)
    posed = [b.shape.posed(b.pose) for b in bodies]
    disabled = {frozenset(p) for p in disabled_pairs}
    for i in range(nb):
        for j in range(i + 1, nb):
            if frozenset((bodies[i].name, bodies[j].name)) in disabled:
                continue
            bi, bj = bodies[i], bodies[j]
            gap = np.linalg.norm(bi.com_world - bj.com_world)
            if gap > bi.shape.bound_radius + bj.shape.bound_radius + margin:
                continue
            for (a, bdy) in ((i, j), (j, i)):
                verts = posed[a][0]
                _, normals, offsets = posed[bdy]
                slack = verts @ normals.T - offsets[None, :]
                depth = slack.max(axis=1)  # per vertex: distance outside the deepest plane
                inside = depth < margin
                if not np.any(inside):
                    continue
                faces = np.unique(np.argmax(slack[inside], axis=1))
                for f in faces:
                    out.append(ContactPlane(bodies[a], normals[f], float(offsets[f])))
    return out


# ---------------------------------------------------------------------------
# Freezing a body set into one composite rigid body.
# ---------------------------------------------------------------------------

@dataclass
class FreezeContext:
    composite: RigidBody
    members: list
    pose_before: RigidPose


def freeze_bodies(bodies, build_hull: bool = True) -> FreezeContext:
    """Combine all bodies into one momentum-preserving composite.

    The composite's shape is the hull of all member vertices (enough for
    boundary-plane contacts); its center of mass, inertia, and velocities come
    from the members so the frozen hand moves like the real aggregate.  With
    ``build_hull=False`` the composite carries no shape; callers then run
    point assignment and contact generation against the member hulls and
    route the resulting rows to the composite themselves, which both skips
    the hull construction and keeps the true union-of-convexes surface.
    """
    masses = np.array([b.mass for b in bodies])
    coms = np.stack([b.com_world for b in bodies])
    vels = np.stack([b.vel for b in bodies])
    omegas = np.stack([b.omega for b in bodies])
    mass = float(masses.sum())
    com = masses @ coms / mass
    vel = masses @ vels / mass
    rot = quat_to_matrix(np.stack([b.pose.rotation for b in bodies]))
    iw = np.einsum("nij,njk,nlk->nil", rot, np.stack([b.inertia_body for b in bodies]), rot)
    d = coms - com
    d2 = np.einsum("ni,ni->n", d, d)
    # parallel-axis shift of each body inertia to the aggregate mass center
    shift = masses[:, None, None] * (
        d2[:, None, None] * np.eye(3) - np.einsum("ni,nj->nij", d, d))
    inertia = (iw + shift).sum(axis=0)
    ang_mom = (np.einsum("nij,nj->ni", iw, omegas)
               + masses[:, None] * np.cross(d, vels - vel)).sum(axis=0)
    omega = np.linalg.solve(inertia, ang_mom)

    pose = RigidPose(com, np.array([1.0, 0.0, 0.0, 0.0]))
    shape = None
    if build_hull:
        all_verts = np.concatenate([b.shape.posed(b.pose)[0] for b in bodies])
        shape = ConvexPolyhedron.from_points(all_verts - com, require_extreme=False)
    comp = RigidBody(
        "composite", shape, mass, 1.0 / mass, inertia, np.linalg.inv(inertia),
        pose, vel, omega, com_local=np.zeros(3),
    )
    return FreezeContext(comp, list(bodies), pose)


def unfreeze_bodies(ctx: FreezeContext) -> None:
    """Apply the composite's net motion rigidly back to the members."""
    delta = ctx.composite.pose.compose(ctx.pose_before.inverse())
    comp = ctx.composite
    members = ctx.members
    qs = np.stack([b.pose.rotation for b in members])
    ts = np.stack([b.pose.translation for b in members])
    new_t = quat_rotate(delta.rotation, ts) + delta.translation
    new_q = quat_normalize(quat_mul(delta.rotation, qs))
    new_com = quat_rotate(new_q, np.stack([b.com_local for b in members])) + new_t
    arm = new_com - comp.com_world
    spin = np.cross(np.broadcast_to(comp.omega, arm.shape), arm)
    for i, b in enumerate(members):
        b.pose = RigidPose.trusted(new_t[i].copy(), new_q[i].copy())
        b.vel = comp.vel + spin[i]
        b.omega = comp.omega.copy()
