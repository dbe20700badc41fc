"""Per-frame hand tracking as a tournament of physics simulations.

Every frame, each enabled strategy advances its own copy of the articulated
world under a different assumption (plain fit, frozen-rigid gross motion,
parallel-finger grasping, finger flips, detector-seeded fingertips).  The
resulting poses are scored with a point-fit plus occlusion error and the
lowest-error world wins; the losers are re-seeded from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np

from ._kernels import collide_pairs, two_means
from .binding import (
    FeatureLabel,
    SceneTemplate,
    assign_points,
    bind_known_features,
    boundary_rows,
    boundary_rows_on_body,
    contact_rows,
    per_point_cap,
    surface_rows,
    surface_rows_rigid,
)
from .dynamics import (
    BodyArrays,
    JointBlockCache,
    OrientationParallel,
    PoseNudge,
    SolverConfig,
    ball_projection_cache,
    freeze_bodies,
    integrate,
    lower_constraints,
    project_ball_joints,
    solve,
    unfreeze_bodies,
)
from .errors import MISSING_TAG, ModelError
from .geometry import RigidPose, quat_conj, quat_from_axis_angle, quat_from_rotvec, quat_identity, quat_mul, quat_normalize, quat_rotate
from .hand_model import ArticulatedModel, build_world, hand_length, pose_model
from .sensor import (
    BACKGROUND,
    BoundaryPlaneSet,
    DepthImage,
    PointCloud,
    boundary_planes,
    deproject,
    five_finger_detector,
    voxel_subsample,
)


class StrategyKind(IntEnum):
    """Enumeration order doubles as the selection tie-break order."""

    NORMAL = 0
    GROSS_MOTION = 1
    GRASPING = 2
    FINGER_FLIP = 3
    FEATURE_SEEDED = 4


ALL_STRATEGIES = tuple(StrategyKind)

#: Flip schedule walks this digit order, one digit per cycle.
FLIP_ORDER = ("index", "middle", "ring", "pinky", "thumb")

#: Anatomical neighbor dragged along on every other cycle.
FLIP_NEIGHBOR = {"thumb": "index", "index": "middle", "middle": "ring",
                 "ring": "pinky", "pinky": "ring"}

#: Joint flexion targets (rad) for a curled digit, proximal to distal.
CURL_ANGLES = {"thumb": (0.8, 1.2, 1.2), "default": (1.3, 1.6, 1.4)}

#: How hard a flip nudge may twist each segment, as an angular rate (rad/s).
NUDGE_RATE = 60.0

PARALLEL_MAX_ANGLE = np.deg2rad(10.0)


@dataclass
class TrackerConfig:
    frame_rate: float = 60.0
    voxel_size: float = 0.01
    solver: SolverConfig | None = None
    strategies: tuple[StrategyKind, ...] = ALL_STRATEGIES
    shared_seeding: bool = True
    occlusion_margin: float = 0.02
    cap_speed: float = 3.0
    merge_factor: float = 1.5
    extended_fraction: float = 0.7
    collision_margin: float = 1e-3
    threads: int = 1

    def __post_init__(self):
        if self.solver is None:
            self.solver = SolverConfig(dt=1.0 / self.frame_rate)
        self.strategies = tuple(sorted(set(self.strategies)))


# ---------------------------------------------------------------------------
# Error metric.
# ---------------------------------------------------------------------------

@dataclass
class ErrorReport:
    """Per-body fit and occlusion errors; total is their exact sum."""

    fit: np.ndarray        # (nb,) furthest assigned-point distance, m
    occlusion: np.ndarray  # (nb,) inscribed radius where occluding, else 0
    counts: np.ndarray     # (nb,) size of each body's point set
    total: float


def evaluate_error(bodies, cloud, image: DepthImage, margin: float = 0.02,
                   scene=None, arrays: BodyArrays | None = None) -> ErrorReport:
    """Score a posed body set against one frame.

    Every cloud point charges its globally nearest body with its surface
    distance (a body pays only for its furthest point); every body whose
    centroid projects onto background, beyond-surface depth, or off-image
    adds its inscribed-sphere radius.  ``scene``/``arrays`` reuse a packing
    and a pose snapshot that are already current for these bodies.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    nb = len(bodies)
    fit = np.zeros(nb)
    counts = np.zeros(nb, dtype=np.int64)
    if len(pts):
        ass = assign_points(pts, bodies, facing_only=False, scene=scene)
        np.maximum.at(fit, ass.body_index, ass.distance)
        counts += np.bincount(ass.body_index, minlength=nb)

    cam = image.intrinsics
    h, w = image.depth.shape
    if arrays is None:
        qs = np.stack([b.pose.rotation for b in bodies])
        ts = np.stack([b.pose.translation for b in bodies])
    else:
        qs = arrays.rotation
        ts = arrays.translation
    cent = quat_rotate(qs, np.stack([b.shape.centroid for b in bodies])) + ts
    z = cent[:, 2]
    occluding = np.ones(nb, dtype=bool)
    front = np.nonzero(z > 0.0)[0]
    if len(front):
        u = np.rint(cent[front, 0] / z[front] * cam.fx + cam.cx).astype(np.int64)
        v = np.rint(cent[front, 1] / z[front] * cam.fy + cam.cy).astype(np.int64)
        inb = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        vis = front[inb]
        d = image.depth[v[inb], u[inb]]
        seen = (d != BACKGROUND) & (d <= z[vis] + margin)
        occluding[vis[seen]] = False
    occ = np.where(occluding, [b.shape.inscribed_radius for b in bodies], 0.0)
    return ErrorReport(fit, occ, counts, float(fit.sum() + occ.sum()))


# ---------------------------------------------------------------------------
# Hypotheses.
# ---------------------------------------------------------------------------

class Hypothesis:
    """One strategy's private simulation world."""

    def __init__(self, kind: StrategyKind, model: ArticulatedModel,
                 config: TrackerConfig, poses: dict[str, RigidPose],
                 handedness: str = "right"):
        self.kind = kind
        self.model = model
        self.config = config
        self.handedness = handedness
        self.bodies, self.constraints = build_world(model, poses)
        self.by_name = {b.name: b for b in self.bodies}
        self.disabled_pairs = model.disabled_pairs
        self.template = SceneTemplate(self.bodies)
        self.collision_pairs = _collision_pair_arrays(model)
        self.flip_cycle = 0
        self.flip_frames = 0
        self.last_report: ErrorReport | None = None
        if kind == StrategyKind.GRASPING:
            self.constraints += self._grasp_constraints()
        # constant per-step gather stacks; bodies and constraints never change
        self.joint_cache = JointBlockCache(self.constraints, self.bodies)
        self.project_cache = ball_projection_cache(self.constraints)
        self.inv_mass = np.array([b.inv_mass for b in self.bodies])
        self.inv_body = np.stack([b.inv_inertia_body for b in self.bodies])
        self.com_local = np.stack([b.com_local for b in self.bodies])
        self.total_mass = sum(b.mass for b in self.bodies)

    def _grasp_constraints(self):
        for tag in ("knuckle_group_tip", "knuckle_group_mid"):
            if tag not in self.model.tags:
                raise ModelError(MISSING_TAG, f"grasping strategy needs the {tag!r} tag")
        out = []
        for tag in ("knuckle_group_tip", "knuckle_group_mid"):
            group = self.model.tags[tag]
            for a, b in zip(group, group[1:]):
                out.append(OrientationParallel(self.by_name[a], self.by_name[b],
                                               PARALLEL_MAX_ANGLE))
        return out

    def poses(self) -> dict[str, RigidPose]:
        return {b.name: b.pose for b in self.bodies}

    def velocities(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {b.name: (b.vel.copy(), b.omega.copy()) for b in self.bodies}

    def reseed(self, poses: dict[str, RigidPose],
               velocities: dict[str, tuple[np.ndarray, np.ndarray]] | None = None):
        for b in self.bodies:
            b.pose = poses[b.name]
            if velocities is None:
                b.vel[:] = 0.0
                b.omega[:] = 0.0
            else:
                v, o = velocities[b.name]
                b.vel = v.copy()
                b.omega = o.copy()


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


def _collision_pair_arrays(model: ArticulatedModel):
    """Candidate body index pairs (i < j) with the disabled neighbors removed."""
    names = model.body_names
    disabled = {frozenset(p) for p in model.disabled_pairs}
    pa, pb = [], []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            if frozenset((names[i], names[j])) in disabled:
                continue
            pa.append(i)
            pb.append(j)
    return np.asarray(pa, dtype=np.int64), np.asarray(pb, dtype=np.int64)


def _collision_rows(hyp: Hypothesis, scene, beta: float, dt: float):
    """Separation rows for interpenetrating bones, off the packed scene."""
    pa, pb = hyp.collision_pairs
    if len(pa) == 0:
        return contact_rows(pa, scene.normals[:0], scene.offsets[:0],
                            hyp.bodies, scene, beta, dt)
    bi, fi = collide_pairs(
        pa, pb, scene.vertices, scene.normals, scene.offsets,
        scene.verts_start, scene.faces_start, scene.bound_center,
        scene.bound_radius, hyp.config.collision_margin,
    )
    return contact_rows(bi, scene.normals[fi], scene.offsets[fi],
                        hyp.bodies, scene, beta, dt)


def _cycle(hyp: Hypothesis, pts: np.ndarray, planes: BoundaryPlaneSet, extra=()):
    """One assign -> constrain -> solve -> integrate pass."""
    bodies = hyp.bodies
    cfg = hyp.config.solver
    arrays = BodyArrays(bodies, hyp.com_local)
    scene = hyp.template.refresh(arrays)
    cons = list(hyp.joint_cache.rest)
    sur_parts = ()
    if len(pts):
        ass = assign_points(pts, bodies, scene=scene)
        cap = hyp.total_mass * hyp.config.cap_speed / max(len(pts), 1)
        sur_parts = (surface_rows(ass, cap, cfg.dt, arrays),)
    bnd = boundary_rows(planes, bodies, scene, cfg.beta, cfg.dt)
    coll = _collision_rows(hyp, scene, cfg.beta, cfg.dt)
    cons += list(extra)
    rows = lower_constraints(cons, bodies, cfg,
                             pre_parts=hyp.joint_cache.head_parts(arrays, cfg.beta, cfg.dt),
                             pre_contact_parts=(bnd, coll), pre_surface_parts=sur_parts)
    moved = solve(rows, bodies, cfg.iterations, arrays, hyp.inv_mass, hyp.inv_body)
    post = integrate(bodies, cfg, arrays, moved, hyp.com_local)
    if post is None:
        project_ball_joints(hyp.constraints, hyp.project_cache)
    else:
        hyp.joint_cache.project(bodies, post[0], post[1])


def run_normal(hyp: Hypothesis, cloud, planes: BoundaryPlaneSet) -> None:
    _cycle(hyp, _as_points(cloud), planes)


def run_gross_motion(hyp: Hypothesis, cloud, planes: BoundaryPlaneSet) -> None:
    """Move the hand as one rigid body first, then refit articulation.

    Phase one assigns points against the member hulls (the true union
    surface) and routes every row to a shapeless momentum-preserving
    composite, so the whole hand translates/rotates as one body; phase two
    is a regular articulated pass.
    """
    pts = _as_points(cloud)
    cfg = hyp.config.solver
    scene = hyp.template.refresh(BodyArrays(hyp.bodies, hyp.com_local))
    ctx = freeze_bodies(hyp.bodies, build_hull=False)
    comp = ctx.composite
    bnd = boundary_rows_on_body(planes, scene.vertices, comp, 0, cfg.beta, cfg.dt)
    sur_parts = ()
    if len(pts):
        ass = assign_points(pts, hyp.bodies, scene=scene)
        cap = per_point_cap([comp], len(pts), hyp.config.cap_speed)
        sur_parts = (surface_rows_rigid(ass, cap, cfg.dt, comp, 0),)
    rows = lower_constraints((), [comp], cfg,
                             pre_contact_parts=(bnd,), pre_surface_parts=sur_parts)
    solve(rows, [comp], cfg.iterations)
    integrate([comp], cfg)
    unfreeze_bodies(ctx)
    _cycle(hyp, pts, planes)  # points re-mapped against the unfrozen bodies


def run_grasping(hyp: Hypothesis, cloud, planes: BoundaryPlaneSet) -> None:
    _cycle(hyp, _as_points(cloud), planes)


def _chain_tip_distance(hyp: Hypothesis, finger: str) -> tuple[float, float]:
    """(tip to palm-centroid distance, chain length) for one digit."""
    model = hyp.model
    chain = model.tags[f"finger_chain_{finger}"]
    tip_body = hyp.by_name[chain[-1]]
    tip_local = tip_body.shape.vertices[np.argmax(tip_body.shape.vertices[:, 1])]
    tip = tip_body.pose.apply(tip_local)
    palm = hyp.by_name[model.tags["palm"][0]]
    palm_centroid = palm.pose.apply(palm.shape.centroid)
    length = sum(float(model.body(n).shape.vertices[:, 1].max()) for n in chain)
    return float(np.linalg.norm(tip - palm_centroid)), length


def _finger_extended(hyp: Hypothesis, finger: str) -> bool:
    dist, length = _chain_tip_distance(hyp, finger)
    return dist > hyp.config.extended_fraction * length


def _chain_nudges(hyp: Hypothesis, finger: str, flex: tuple[float, float, float]):
    """PoseNudge rows steering one digit chain to the given flexion angles."""
    model = hyp.model
    chain = model.tags[f"finger_chain_{finger}"]
    parent_rot = None
    out = []
    for name, angle in zip(chain, flex):
        joint = model.joint_for_child(name)
        if parent_rot is None:
            parent_rot = hyp.by_name[joint.parent].pose.rotation
        qj = quat_from_rotvec(np.array([angle, 0.0, 0.0]))
        target = quat_normalize(quat_mul(parent_rot, quat_mul(
            joint.frame_parent, quat_mul(qj, quat_conj(joint.frame_child)))))
        body = hyp.by_name[name]
        cap = float(np.max(np.diag(body.inertia_body))) * NUDGE_RATE
        out.append(PoseNudge(body, target, cap))
        parent_rot = target
    return out


def run_finger_flip(hyp: Hypothesis, cloud, planes: BoundaryPlaneSet,
                    best_prev: dict[str, RigidPose]) -> None:
    """Restart from the incumbent pose with one digit forced the other way."""
    hyp.reseed(best_prev)
    period = max(1, round(0.5 * hyp.config.frame_rate))
    hyp.flip_frames += 1
    if hyp.flip_frames >= period:
        hyp.flip_frames = 0
        hyp.flip_cycle += 1
    finger = FLIP_ORDER[hyp.flip_cycle % len(FLIP_ORDER)]
    targets = [finger]
    if hyp.flip_cycle % 2 == 1 and FLIP_NEIGHBOR[finger] not in targets:
        targets.append(FLIP_NEIGHBOR[finger])
    nudges = []
    for f in targets:
        if _finger_extended(hyp, f):
            flex = CURL_ANGLES.get(f, CURL_ANGLES["default"])
        else:
            flex = (0.0, 0.0, 0.0)
        nudges += _chain_nudges(hyp, f, flex)
    _cycle(hyp, _as_points(cloud), planes, nudges)


def run_feature_seeded(hyp: Hypothesis, cloud, image: DepthImage,
                       planes: BoundaryPlaneSet) -> None:
    """Bind detected fingertips by identity when the open-hand detector fires."""
    pts = _as_points(cloud)
    tips = five_finger_detector(image)
    if tips is None:
        _cycle(hyp, pts, planes)
        return
    tip_pts = np.asarray(tips, dtype=np.float64)
    order = hyp.model.fingertip_names()  # thumb..pinky; detector is left-to-right
    if hyp.handedness == "left":
        order = order[::-1]
    indices = [hyp.model.body_index(n) for n in order]
    labels = [FeatureLabel(i, (bi,)) for i, bi in enumerate(indices)]
    cap = per_point_cap(hyp.bodies, max(len(pts), len(tip_pts)), hyp.config.cap_speed)
    extra = bind_known_features(labels, tip_pts, hyp.bodies, cap)
    _cycle(hyp, pts, planes, extra)


# ---------------------------------------------------------------------------
# Hand clustering.
# ---------------------------------------------------------------------------

def cluster_hands(cloud, model_length: float = 0.2,
                  merge_factor: float = 1.5) -> list[tuple[str, PointCloud]]:
    """Split a frame's points into one or two labeled hand clouds.

    Two-means with extreme-x initialization; clusters closer than
    merge_factor x model_length merge into a single right-hand cloud,
    otherwise the smaller-x centroid is the left hand.
    """
    pts = _as_points(cloud)
    if len(pts) == 0:
        return []
    member, c = two_means(pts)
    if np.linalg.norm(c[0] - c[1]) < merge_factor * model_length:
        return [("right", PointCloud(pts))]
    clouds = {0: PointCloud(pts[~member]), 1: PointCloud(pts[member])}
    left = 0 if c[0, 0] <= c[1, 0] else 1
    return [("left", clouds[left]), ("right", clouds[1 - left])]


# ---------------------------------------------------------------------------
# Tracker state machine.
# ---------------------------------------------------------------------------

#: Rest-frame offset from the wrist joint to the hand's visual center.
_HAND_CENTER = np.array([0.0, 0.105, 0.0])


@dataclass
class HandResult:
    label: str
    best_poses: dict[str, RigidPose]
    reports: list[ErrorReport]
    winner: StrategyKind | None
    empty: bool = False


@dataclass
class FrameResult:
    frame: int
    hands: dict[str, HandResult] = field(default_factory=dict)


class _HandUnit:
    """Tracking state for a single hand."""

    def __init__(self, label: str, model: ArticulatedModel, config: TrackerConfig,
                 centroid: np.ndarray):
        self.label = label
        self.model = model
        self.config = config
        root = RigidPose(centroid - _HAND_CENTER, quat_identity())
        poses = pose_model(model, root)
        self.hypotheses = [Hypothesis(k, model, config, poses, label)
                           for k in config.strategies]
        self.best_poses = poses
        self.best_velocities = None
        self.best_report: ErrorReport | None = None
        self.best_kind: StrategyKind | None = None

    def step(self, pts: np.ndarray, planes: BoundaryPlaneSet,
             image: DepthImage) -> HandResult:
        cfg = self.config
        if cfg.shared_seeding and self.best_kind is not None:
            for hyp in self.hypotheses:
                if hyp.kind != self.best_kind:
                    hyp.reseed(self.best_poses, self.best_velocities)
        best_prev = self.best_poses

        def run(hyp: Hypothesis) -> ErrorReport:
            if hyp.kind == StrategyKind.GROSS_MOTION:
                run_gross_motion(hyp, pts, planes)
            elif hyp.kind == StrategyKind.FINGER_FLIP:
                run_finger_flip(hyp, pts, planes, best_prev)
            elif hyp.kind == StrategyKind.FEATURE_SEEDED:
                run_feature_seeded(hyp, pts, image, planes)
            else:
                _cycle(hyp, pts, planes)
            arrays = BodyArrays(hyp.bodies, hyp.com_local)
            report = evaluate_error(hyp.bodies, pts, image, cfg.occlusion_margin,
                                    scene=hyp.template.refresh(arrays), arrays=arrays)
            hyp.last_report = report
            return report

        if cfg.threads > 1 and len(self.hypotheses) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                reports = list(pool.map(run, self.hypotheses))
        else:
            reports = [run(h) for h in self.hypotheses]

        best = 0
        for i in range(1, len(reports)):
            if reports[i].total < reports[best].total:
                best = i
        winner = self.hypotheses[best]
        self.best_poses = winner.poses()
        self.best_velocities = winner.velocities()
        self.best_report = reports[best]
        self.best_kind = winner.kind
        return HandResult(self.label, self.best_poses, reports, winner.kind)

    def retained(self) -> HandResult:
        return HandResult(self.label, self.best_poses, [], self.best_kind, empty=True)


class TrackerState:
    """Single-owner tracker over one or two hands."""

    def __init__(self, model: ArticulatedModel, config: TrackerConfig | None = None):
        self.model = model
        self.config = config or TrackerConfig()
        self.hands: dict[str, _HandUnit] = {}
        self.frame = 0
        self.model_length = hand_length(model)


def step_tracker(state: TrackerState, image: DepthImage) -> FrameResult:
    """Advance the tracker by one frame and return per-hand winners and scores."""
    cfg = state.config
    cloud = deproject(image)
    clusters = cluster_hands(cloud, state.model_length, cfg.merge_factor)
    result = FrameResult(state.frame)
    seen = set()
    for label, cl in clusters:
        sub = voxel_subsample(cl, cfg.voxel_size)
        planes = boundary_planes(sub)
        unit = state.hands.get(label)
        if unit is None:
            unit = _HandUnit(label, state.model, cfg, cl.points.mean(axis=0))
            state.hands[label] = unit
        result.hands[label] = unit.step(sub.points, planes, image)
        seen.add(label)
    for label, unit in state.hands.items():
        if label not in seen:
            result.hands[label] = unit.retained()
    state.frame += 1
    return result
