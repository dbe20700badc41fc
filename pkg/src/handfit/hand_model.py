"""Articulated model definition, validation, serialization, and the built-in hand.

A model is a tree of named convex bodies connected by ball joints with
swing/twist angle limits.  Every body frame has its origin at the body's
proximal joint and its long axis along +y, which makes runtime scaling simple:
length scales y, width scales x and z.

The built-in right hand: wrist + palm + five 3-segment digit chains = 17
bodies, 0.20 m from wrist joint to middle fingertip, palm normal facing -z
(toward the camera at rest), thumb on the -x side.  All vertex data, limit
values, and masses are authored defaults for a desk-scale adult hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import errors
from .dynamics import AngularLimit, BallJoint, RigidBody
from .errors import GeometryError, ModelError
from .geometry import (
    ConvexPolyhedron,
    RigidPose,
    quat_conj,
    quat_from_axis_angle,
    quat_from_rotvec,
    quat_identity,
    quat_mul,
    quat_normalize,
)

SCHEMA = "handmodel/1"

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
SEGMENTS = ("proximal", "middle", "distal")

#: Joint frame carried by the child: y stays the bone axis, x/z flip so that
#: positive flex curls toward the palmar (-z) side.
_CHILD_FRAME = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.pi)

_REQUIRED_TAGS = (
    ("wrist", 1), ("palm", 1), ("thumb", 3),
    ("knuckle_group_tip", 4), ("knuckle_group_mid", 4),
    *[(f"fingertip_{f}", 1) for f in FINGERS],
    *[(f"finger_chain_{f}", 3) for f in FINGERS],
)


@dataclass
class ModelBody:
    name: str
    shape: ConvexPolyhedron
    mass: float

    def __eq__(self, other):
        return (
            isinstance(other, ModelBody)
            and self.name == other.name
            and self.shape == other.shape
            and self.mass == other.mass
        )


@dataclass
class ModelJoint:
    parent: str
    child: str
    anchor_parent: np.ndarray
    anchor_child: np.ndarray
    frame_parent: np.ndarray
    frame_child: np.ndarray
    limits: np.ndarray  # (3, 2): (flex, abduction, twist) min/max rad

    def __eq__(self, other):
        return (
            isinstance(other, ModelJoint)
            and self.parent == other.parent
            and self.child == other.child
            and np.array_equal(self.anchor_parent, other.anchor_parent)
            and np.array_equal(self.anchor_child, other.anchor_child)
            and np.array_equal(self.frame_parent, other.frame_parent)
            and np.array_equal(self.frame_child, other.frame_child)
            and np.array_equal(self.limits, other.limits)
        )


class ArticulatedModel:
    """Validated body/joint tree with semantic tags."""

    def __init__(self, bodies, joints, disabled_pairs, tags):
        self.bodies: list[ModelBody] = list(bodies)
        self.joints: list[ModelJoint] = list(joints)
        self.disabled_pairs: list[tuple[str, str]] = [tuple(p) for p in disabled_pairs]
        self.tags: dict[str, tuple[str, ...]] = {k: tuple(v) for k, v in tags.items()}
        self._index = {b.name: i for i, b in enumerate(self.bodies)}
        self._validate()

    # -- lookups ------------------------------------------------------------

    def body(self, name: str) -> ModelBody:
        return self.bodies[self._index[name]]

    def body_index(self, name: str) -> int:
        return self._index[name]

    @property
    def body_names(self) -> list[str]:
        return [b.name for b in self.bodies]

    @property
    def root_name(self) -> str:
        children = {j.child for j in self.joints}
        return next(b.name for b in self.bodies if b.name not in children)

    def joint_for_child(self, child: str) -> ModelJoint:
        return next(j for j in self.joints if j.child == child)

    def fingertip_names(self) -> list[str]:
        """Distal bodies ordered thumb to pinky."""
        return [self.tags[f"fingertip_{f}"][0] for f in FINGERS]

    # -- validation ---------------------------------------------------------

    def _validate(self):
        names = set(self._index)
        if len(names) != len(self.bodies):
            raise ModelError(errors.PARSE_ERROR, "duplicate body name")
        for j in self.joints:
            for ref in (j.parent, j.child):
                if ref not in names:
                    raise ModelError(errors.BAD_REFERENCE, f"joint references unknown body {ref!r}")
            if not (np.all(np.isfinite(j.anchor_parent)) and np.all(np.isfinite(j.anchor_child))):
                raise ModelError(errors.BAD_ANCHOR, f"non-finite anchor on joint to {j.child!r}")
            if j.limits.shape != (3, 2) or np.any(j.limits[:, 0] > j.limits[:, 1]):
                raise ModelError(errors.BAD_LIMITS, f"ill-ordered limits on joint to {j.child!r}")
        for a, b in self.disabled_pairs:
            if a not in names or b not in names:
                raise ModelError(errors.BAD_REFERENCE, f"disabled pair references unknown body ({a}, {b})")
        for role, members in self.tags.items():
            for m in members:
                if m not in names:
                    raise ModelError(errors.BAD_REFERENCE, f"tag {role!r} references unknown body {m!r}")
        for role, count in _REQUIRED_TAGS:
            if role not in self.tags:
                raise ModelError(errors.MISSING_TAG, f"required tag {role!r} missing")
            if len(self.tags[role]) != count:
                raise ModelError(errors.MISSING_TAG, f"tag {role!r} needs {count} bodies")

        # tree rooted at the wrist: every non-root body has exactly one parent
        # joint and is reachable from the root without cycles
        child_count: dict[str, int] = {}
        for j in self.joints:
            child_count[j.child] = child_count.get(j.child, 0) + 1
        if any(c > 1 for c in child_count.values()):
            raise ModelError(errors.NON_TREE, "body has multiple parent joints")
        roots = names - set(child_count)
        if len(roots) != 1:
            raise ModelError(errors.NON_TREE, f"expected one root body, found {sorted(roots)}")
        root = roots.pop()
        if root != self.tags["wrist"][0]:
            raise ModelError(errors.NON_TREE, f"tree root {root!r} is not the wrist")
        order, seen = [], {root}
        frontier = [root]
        while frontier:
            cur = frontier.pop(0)
            for j in self.joints:
                if j.parent == cur:
                    if j.child in seen:
                        raise ModelError(errors.NON_TREE, "joint graph contains a cycle")
                    seen.add(j.child)
                    order.append(j)
                    frontier.append(j.child)
        if len(seen) != len(names):
            raise ModelError(errors.NON_TREE, "not all bodies reachable from the wrist")
        self._topo_joints = order

        for f in FINGERS:
            chain = self.tags[f"finger_chain_{f}"]
            for seg_parent, seg_child in zip(chain, chain[1:]):
                joint = next((j for j in self.joints if j.child == seg_child), None)
                if joint is None or joint.parent != seg_parent:
                    raise ModelError(errors.BAD_CHAIN, f"finger chain {f!r} is not a parent-child chain")

    # -- serialization ------------------------------------------------------

    def serialize(self) -> str:
        doc = {
            "schema": SCHEMA,
            "bodies": [
                {"name": b.name, "mass": b.mass,
                 "vertices": b.shape.vertices.tolist()}
                for b in self.bodies
            ],
            "joints": [
                {"parent": j.parent, "child": j.child,
                 "anchor_parent": j.anchor_parent.tolist(),
                 "anchor_child": j.anchor_child.tolist(),
                 "frame_parent": j.frame_parent.tolist(),
                 "frame_child": j.frame_child.tolist(),
                 "limits": j.limits.tolist()}
                for j in self.joints
            ],
            "disabled_pairs": [list(p) for p in self.disabled_pairs],
            "tags": {k: list(v) for k, v in self.tags.items()},
        }
        return json.dumps(doc, indent=1)

    def __eq__(self, other):
        return (
            isinstance(other, ArticulatedModel)
            and self.bodies == other.bodies
            and self.joints == other.joints
            and self.disabled_pairs == other.disabled_pairs
            and self.tags == other.tags
        )


def load_model(text: str) -> ArticulatedModel:
    """Parse and fully validate a model document (JSON syntax)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(errors.PARSE_ERROR, f"model document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise ModelError(errors.PARSE_ERROR, f"expected schema {SCHEMA!r}")
    try:
        bodies = []
        for b in doc["bodies"]:
            verts = np.asarray(b["vertices"], dtype=np.float64)
            try:
                shape = ConvexPolyhedron.from_points(verts, require_extreme=True)
            except GeometryError as exc:
                raise ModelError(errors.NON_CONVEX, f"body {b['name']!r}: {exc}") from exc
            bodies.append(ModelBody(str(b["name"]), shape, float(b["mass"])))
        joints = [
            ModelJoint(
                str(j["parent"]), str(j["child"]),
                np.asarray(j["anchor_parent"], dtype=np.float64),
                np.asarray(j["anchor_child"], dtype=np.float64),
                np.asarray(j["frame_parent"], dtype=np.float64),
                np.asarray(j["frame_child"], dtype=np.float64),
                np.asarray(j["limits"], dtype=np.float64),
            )
            for j in doc["joints"]
        ]
        pairs = [tuple(map(str, p)) for p in doc.get("disabled_pairs", [])]
        tags = {str(k): tuple(map(str, v)) for k, v in doc.get("tags", {}).items()}
    except ModelError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(errors.PARSE_ERROR, f"malformed model document: {exc}") from exc
    return ArticulatedModel(bodies, joints, pairs, tags)


# ---------------------------------------------------------------------------
# Built-in right hand.
# ---------------------------------------------------------------------------

def _digit_segment(length: float, radius: float, tip_radius_scale: float = 0.8) -> ConvexPolyhedron:
    """Ten-vertex convex capsule stand-in: tail apex, two square rings, tip apex.

    The tail apex pokes 0.6 r behind the origin so the hull interpenetrates
    its parent across the joint; the tip apex sits exactly at ``length``.
    """
    r2 = radius * tip_radius_scale
    pts = [(0.0, -0.6 * radius, 0.0)]
    for y, r in ((0.15 * length, radius), (0.85 * length, r2)):
        pts += [(r, y, 0.0), (-r, y, 0.0), (0.0, y, r), (0.0, y, -r)]
    pts.append((0.0, length, 0.0))
    return ConvexPolyhedron.from_points(np.array(pts))


def _box(hx, y0, y1, hz) -> ConvexPolyhedron:
    pts = [(sx * hx, y, sz * hz) for y in (y0, y1) for sx in (-1, 1) for sz in (-1, 1)]
    return ConvexPolyhedron.from_points(np.array(pts))


def _palm_slab() -> ConvexPolyhedron:
    outline = [
        (-0.034, -0.005), (0.034, -0.005),
        (-0.042, 0.045), (0.042, 0.045),
        (-0.040, 0.092), (0.040, 0.092),
    ]
    pts = [(x, y, z) for (x, y) in outline for z in (-0.013, 0.013)]
    return ConvexPolyhedron.from_points(np.array(pts))


_DEG = np.pi / 180.0

# digit chain data: segment lengths (m), base radius (m), knuckle x (palm frame)
_FINGER_GEOM = {
    "index": ((0.042, 0.026, 0.023), 0.0075, -0.030),
    "middle": ((0.048, 0.032, 0.028), 0.0075, -0.010),
    "ring": ((0.044, 0.029, 0.025), 0.0075, 0.010),
    "pinky": ((0.033, 0.022, 0.019), 0.0065, 0.030),
}
_THUMB_LENGTHS = (0.046, 0.034, 0.030)
_THUMB_RADIUS = 0.009
_THUMB_ATTACH = np.array([-0.036, 0.012, 0.0])

# rest splay of each finger chain about the palm z axis (+ toward the thumb)
_SPLAY = {"index": 6.0 * _DEG, "middle": 0.0, "ring": -5.0 * _DEG, "pinky": -10.0 * _DEG}

_MCP_LIMITS = np.array([[-100.0, 100.0], [-25.0, 25.0], [-10.0, 10.0]]) * _DEG
_IP_LIMITS = np.array([[0.0, 110.0], [0.0, 0.0], [0.0, 0.0]]) * _DEG
_WRIST_LIMITS = np.array([[-25.0, 25.0], [-15.0, 15.0], [-20.0, 20.0]]) * _DEG
_THUMB_CMC_LIMITS = np.array([[-30.0, 60.0], [-30.0, 30.0], [-15.0, 15.0]]) * _DEG
_THUMB_IP_LIMITS = np.array([[0.0, 90.0], [0.0, 0.0], [0.0, 0.0]]) * _DEG

_DENSITY = 1000.0  # kg/m^3, uniform over every hull


def _joint(parent, child, anchor_parent, rest_rel, limits) -> ModelJoint:
    frame_parent = quat_normalize(quat_mul(rest_rel, _CHILD_FRAME))
    return ModelJoint(
        parent, child, np.asarray(anchor_parent, dtype=np.float64), np.zeros(3),
        frame_parent, _CHILD_FRAME.copy(), np.asarray(limits, dtype=np.float64),
    )


_default_cache: ArticulatedModel | None = None


def default_hand() -> ArticulatedModel:
    """The built-in 17-body right hand (shared immutable instance)."""
    global _default_cache
    if _default_cache is not None:
        return _default_cache

    bodies = [
        ModelBody("wrist", _box(0.027, -0.045, 0.008, 0.012), 0.0),
        ModelBody("palm", _palm_slab(), 0.0),
    ]
    joints = [
        _joint("wrist", "palm", np.zeros(3), quat_identity(), _WRIST_LIMITS),
    ]

    for finger, (lengths, radius, knuckle_x) in _FINGER_GEOM.items():
        rest = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), _SPLAY[finger])
        parent = "palm"
        anchor = np.array([knuckle_x, 0.092, 0.0])
        for seg, length, taper in zip(SEGMENTS, lengths, (1.0, 0.9, 0.8)):
            name = f"{finger}_{seg}"
            bodies.append(ModelBody(name, _digit_segment(length, radius * taper), 0.0))
            limits = _MCP_LIMITS if seg == "proximal" else _IP_LIMITS
            joints.append(_joint(parent, name, anchor, rest, limits))
            parent = name
            anchor = np.array([0.0, length, 0.0])
            rest = quat_identity()

    thumb_rest = quat_mul(
        quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), 45.0 * _DEG),
        quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), -20.0 * _DEG),
    )
    parent, anchor, rest = "palm", _THUMB_ATTACH, thumb_rest
    for seg, length, taper, limits in zip(
        SEGMENTS, _THUMB_LENGTHS, (1.0, 0.9, 0.8),
        (_THUMB_CMC_LIMITS, _THUMB_IP_LIMITS, _THUMB_IP_LIMITS),
    ):
        name = f"thumb_{seg}"
        bodies.append(ModelBody(name, _digit_segment(length, _THUMB_RADIUS * taper), 0.0))
        joints.append(_joint(parent, name, anchor, rest, limits))
        parent, anchor, rest = name, np.array([0.0, length, 0.0]), quat_identity()

    for b in bodies:
        b.mass = _DENSITY * b.shape.volume

    tags = {
        "wrist": ("wrist",),
        "palm": ("palm",),
        "thumb": tuple(f"thumb_{s}" for s in SEGMENTS),
        "knuckle_group_tip": tuple(f"{f}_distal" for f in FINGERS if f != "thumb"),
        "knuckle_group_mid": tuple(f"{f}_middle" for f in FINGERS if f != "thumb"),
    }
    for f in FINGERS:
        tags[f"fingertip_{f}"] = (f"{f}_distal",)
        tags[f"finger_chain_{f}"] = tuple(f"{f}_{s}" for s in SEGMENTS)

    disabled = [(j.parent, j.child) for j in joints]
    _default_cache = ArticulatedModel(bodies, joints, disabled, tags)
    return _default_cache


# ---------------------------------------------------------------------------
# Runtime scaling.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HandScaling:
    length_scale: float
    width_scale: float

    def __post_init__(self):
        for v in (self.length_scale, self.width_scale):
            if not 0.5 <= v <= 2.0:
                raise ModelError(errors.BAD_SCALE, f"scale {v} outside the sane range [0.5, 2]")


def scale_model(model: ArticulatedModel, scaling: HandScaling) -> ArticulatedModel:
    """Anisotropic rescale: bone length along y, width across x/z.

    Masses scale with the volume factor length x width^2, so density is
    preserved; limits are angles and stay untouched.
    """
    f = np.array([scaling.width_scale, scaling.length_scale, scaling.width_scale])
    volume_factor = scaling.length_scale * scaling.width_scale ** 2
    bodies = [
        ModelBody(b.name, b.shape.scaled(f), b.mass * volume_factor)
        for b in model.bodies
    ]
    joints = [
        ModelJoint(j.parent, j.child, j.anchor_parent * f, j.anchor_child * f,
                   j.frame_parent.copy(), j.frame_child.copy(), j.limits.copy())
        for j in model.joints
    ]
    return ArticulatedModel(bodies, joints, model.disabled_pairs, model.tags)


# ---------------------------------------------------------------------------
# Forward kinematics and world construction.
# ---------------------------------------------------------------------------

def pose_model(model: ArticulatedModel, root_pose: RigidPose,
               angles: dict[str, np.ndarray] | None = None) -> dict[str, RigidPose]:
    """Body poses from a root pose and per-joint (flex, abduction, twist) angles.

    Angles are keyed by child body name; missing entries mean the rest posture.
    The angle convention matches AngularLimit.angles exactly.
    """
    angles = angles or {}
    poses = {model.root_name: root_pose}
    for j in model._topo_joints:
        parent_pose = poses[j.parent]
        a = np.asarray(angles.get(j.child, np.zeros(3)), dtype=np.float64)
        swing = quat_from_rotvec(np.array([a[0], 0.0, a[1]]))
        twist = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), a[2])
        qj = quat_mul(swing, twist)
        q_child = quat_normalize(
            quat_mul(parent_pose.rotation,
                     quat_mul(j.frame_parent, quat_mul(qj, quat_conj(j.frame_child))))
        )
        anchor_world = parent_pose.apply(j.anchor_parent)
        t_child = anchor_world - quat_rotate_cached(q_child, j.anchor_child)
        poses[j.child] = RigidPose(t_child, q_child)
    return poses


def quat_rotate_cached(q, v):
    # tiny shim so zero anchors skip the rotation entirely
    if v[0] == 0.0 and v[1] == 0.0 and v[2] == 0.0:
        return v
    from .geometry import quat_rotate

    return quat_rotate(q, v)


def build_world(model: ArticulatedModel, poses: dict[str, RigidPose]):
    """Instantiate dynamic bodies and structural constraints for one simulation.

    Returns (bodies, constraints) with bodies in model order and constraints
    as joints followed by their angular limits, tree-ordered.
    """
    by_name: dict[str, RigidBody] = {}
    bodies = []
    for mb in model.bodies:
        density = mb.mass / mb.shape.volume
        body = RigidBody.from_shape(mb.name, mb.shape, poses[mb.name], density=density)
        by_name[mb.name] = body
        bodies.append(body)
    constraints = []
    for j in model._topo_joints:
        constraints.append(BallJoint(by_name[j.parent], by_name[j.child],
                                     j.anchor_parent, j.anchor_child))
    for j in model._topo_joints:
        constraints.append(AngularLimit(by_name[j.parent], by_name[j.child],
                                        j.frame_parent, j.frame_child, j.limits))
    return bodies, constraints


def hand_length(model: ArticulatedModel) -> float:
    """Wrist joint to middle fingertip distance at the rest posture."""
    poses = pose_model(model, RigidPose.identity())
    tip_body = model.tags["fingertip_middle"][0]
    shape = model.body(tip_body).shape
    tip_local = shape.vertices[np.argmax(shape.vertices[:, 1])]
    return float(np.linalg.norm(poses[tip_body].apply(tip_local)))


def fingertip_points(model: ArticulatedModel, poses: dict[str, RigidPose]) -> dict[str, np.ndarray]:
    """World position of each digit tip (the distal hull's +y apex), by finger."""
    out = {}
    for f in FINGERS:
        name = model.tags[f"fingertip_{f}"][0]
        shape = model.body(name).shape
        tip_local = shape.vertices[np.argmax(shape.vertices[:, 1])]
        out[f] = poses[name].apply(tip_local)
    return out
