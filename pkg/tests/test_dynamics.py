import numpy as np
import pytest

from handfit.dynamics import (
    INF,
    KIND_BALL,
    KIND_CONTACT,
    KIND_LIMIT,
    KIND_NUDGE,
    KIND_PARALLEL,
    KIND_SURFACE,
    AngularLimit,
    BallJoint,
    ContactPlane,
    OrientationParallel,
    PoseNudge,
    RigidBody,
    SolverConfig,
    SurfaceAttachment,
    collision_constraints,
    freeze_bodies,
    integrate,
    lower_constraints,
    solve,
    step_world,
    unfreeze_bodies,
)
from handfit.errors import ConfigError, DynamicsError
from handfit.geometry import (
    RigidPose,
    quat_from_axis_angle,
    quat_identity,
    quat_mul,
    quat_rotate,
    unit_cube,
)

X = np.array([1.0, 0.0, 0.0])
Y = np.array([0.0, 1.0, 0.0])
Z = np.array([0.0, 0.0, 1.0])

FREE = np.array([[-INF, INF]] * 3)


def box_body(name="b", center=(0.0, 0.0, 0.0), edge=0.1, static=False, rotation=None):
    pose = RigidPose(np.array(center, dtype=float),
                     quat_identity() if rotation is None else rotation)
    return RigidBody.from_shape(name, unit_cube(edge), pose, static=static)


def cfg(**kw):
    return SolverConfig(**kw)


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------

def test_ball_joint_lowers_to_three_unbounded_rows():
    a = box_body("a")
    b = box_body("b", center=(0.1, 0.0, 0.0))
    joint = BallJoint(a, b, np.array([0.05, 0, 0.0]), np.array([-0.05, 0, 0.0]))
    rows = lower_constraints([joint], [a, b], cfg())
    assert len(rows) == 3
    for row in rows:
        assert row.kind == KIND_BALL
        assert row.lower == -INF and row.upper == INF
        np.testing.assert_array_equal(row.j_lin_a, -row.j_lin_b)


def test_surface_attachment_lowers_to_one_capped_row():
    a = box_body("a")
    c = SurfaceAttachment(a, 0, np.array([0.05, 0, 0.0]), np.array([0.2, 0, 0.0]), X, cap=0.25)
    rows = lower_constraints([c], [a], cfg())
    assert len(rows) == 1
    assert rows[0].lower == -0.25 and rows[0].upper == 0.25
    assert rows[0].kind == KIND_SURFACE


def test_satisfied_angular_limit_emits_no_rows():
    a = box_body("a")
    b = box_body("b", center=(0.0, 0.1, 0.0))
    lim = AngularLimit(a, b, quat_identity(), quat_identity(),
                       np.array([[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]]))
    rows = lower_constraints([lim], [a, b], cfg())
    assert len(rows) == 0


def test_row_groups_follow_sweep_order():
    a = box_body("a")
    b = box_body("b", center=(0.0, 0.1, 0.0),
                 rotation=quat_from_axis_angle(X, 0.9))
    constraints = [
        SurfaceAttachment(a, 0, np.zeros(3), np.array([0.2, 0, 0.0]), X, 0.1),
        ContactPlane(a, Z, 0.2),  # violated: cube straddles z=0.2? no, fully below -> active rows
        PoseNudge(b, quat_identity(), 0.1),
        AngularLimit(a, b, quat_identity(), quat_identity(),
                     np.array([[-0.5, 0.5], [-0.1, 0.1], [-0.1, 0.1]])),
        OrientationParallel(a, b, np.deg2rad(10.0)),
        BallJoint(a, b, np.array([0, 0.05, 0.0]), np.array([0, -0.05, 0.0])),
    ]
    rows = lower_constraints(constraints, [a, b], cfg())
    kinds = rows.kind
    assert len(rows) > 0
    assert np.all(np.diff(kinds) >= 0)  # grouped in fixed sweep order
    for k in (KIND_BALL, KIND_LIMIT, KIND_PARALLEL, KIND_CONTACT, KIND_NUDGE, KIND_SURFACE):
        assert rows.count_kind(k) > 0


def test_unknown_body_reference_raises():
    a = box_body("a")
    stranger = box_body("stranger")
    c = SurfaceAttachment(stranger, 0, np.zeros(3), np.zeros(3), X, 0.1)
    with pytest.raises(DynamicsError):
        lower_constraints([c], [a], cfg())


def test_nan_parameter_raises():
    a = box_body("a")
    c = SurfaceAttachment(a, 0, np.array([np.nan, 0.0, 0.0]), np.zeros(3), X, 0.1)
    with pytest.raises(DynamicsError):
        lower_constraints([c], [a], cfg())


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        cfg(dt=0.0)
    with pytest.raises(ConfigError):
        cfg(iterations=0)
    with pytest.raises(ConfigError):
        cfg(damping=1.5)


def test_constraint_validation():
    a = box_body("a")
    with pytest.raises(DynamicsError):
        SurfaceAttachment(a, 0, np.zeros(3), np.zeros(3), X, cap=-1.0)
    with pytest.raises(DynamicsError):
        SurfaceAttachment(a, 0, np.zeros(3), np.zeros(3), 2.0 * X, cap=1.0)
    with pytest.raises(DynamicsError):
        AngularLimit(a, a, quat_identity(), quat_identity(),
                     np.array([[1.0, -1.0], [0, 0.0], [0, 0.0]]))
    with pytest.raises(DynamicsError):
        ContactPlane(a, np.array([0.0, 0.0, 0.5]), 0.0)


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------

def test_ball_joint_solve_kills_relative_anchor_velocity():
    a = box_body("a")
    b = box_body("b", center=(0.1, 0.0, 0.0))
    joint = BallJoint(a, b, np.array([0.05, 0, 0.0]), np.array([-0.05, 0, 0.0]))
    a.vel = np.array([1.0, 0.0, 0.0])
    rows = lower_constraints([joint], [a, b], cfg())
    solve(rows, [a, b], 16)
    anchor = np.array([0.05, 0.0, 0.0])
    rel = b.point_velocity(anchor) - a.point_velocity(anchor)
    assert np.linalg.norm(rel) <= 1e-3


def test_contact_stops_approach():
    a = box_body("a", center=(0.0, 0.0, 0.05))  # bottom face exactly on z=0
    a.vel = np.array([0.0, 0.0, -1.0])
    plane = ContactPlane(a, Z, 0.0)
    rows = lower_constraints([plane], [a], cfg())
    solve(rows, [a], 16)
    assert a.vel[2] >= -1e-6


def test_contact_is_one_sided():
    a = box_body("a", center=(0.0, 0.0, 0.05))
    a.vel = np.array([0.0, 0.0, 0.5])  # receding: no impulse may pull it back
    plane = ContactPlane(a, Z, 0.0)
    rows = lower_constraints([plane], [a], cfg())
    solve(rows, [a], 16)
    assert a.vel[2] == pytest.approx(0.5, abs=1e-9)


def test_surface_cap_saturates_exactly():
    a = box_body("a")  # mass = 1000 * 0.001 = 1 kg
    config = cfg()
    cap = 0.05
    # target displacement requiring impulse 2*cap: e = 2*cap*dt/mass
    e = 2.0 * cap * config.dt / a.mass
    c = SurfaceAttachment(a, 0, np.array([0.05, 0.0, 0.0]),
                          np.array([0.05 + e, 0.0, 0.0]), X, cap)
    rows = lower_constraints([c], [a], config)
    solve(rows, [a], 16)
    assert rows.lam[0] == pytest.approx(cap, abs=1e-12)
    assert a.vel[0] == pytest.approx(cap / a.mass, rel=1e-9)


def test_impulses_stay_within_bounds():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = box_body("a", center=rng.normal(0, 0.05, 3))
        b = box_body("b", center=rng.normal(0, 0.05, 3) + np.array([0.12, 0, 0]))
        a.vel, b.vel = rng.normal(0, 1.0, 3), rng.normal(0, 1.0, 3)
        a.omega, b.omega = rng.normal(0, 3.0, 3), rng.normal(0, 3.0, 3)
        constraints = [
            BallJoint(a, b, np.array([0.06, 0, 0.0]), np.array([-0.06, 0, 0.0])),
            SurfaceAttachment(a, 0, np.array([0.05, 0, 0.0]),
                              rng.normal(0, 0.1, 3), X, 0.01),
            ContactPlane(b, Z, -0.2),
        ]
        rows = lower_constraints(constraints, [a, b], cfg())
        solve(rows, [a, b], 16)
        assert np.all(rows.lam >= rows.lo - 1e-12)
        assert np.all(rows.lam <= rows.hi + 1e-12)


def test_solver_is_deterministic():
    def run():
        a = box_body("a")
        b = box_body("b", center=(0.11, 0.0, 0.0))
        a.vel = np.array([0.3, -0.2, 0.9])
        b.omega = np.array([1.0, 2.0, -0.5])
        joint = BallJoint(a, b, np.array([0.055, 0, 0.0]), np.array([-0.055, 0, 0.0]))
        rows = lower_constraints([joint], [a, b], cfg())
        solve(rows, [a, b], 16)
        return a.vel.copy(), b.vel.copy(), a.omega.copy(), b.omega.copy(), rows.lam.copy()

    first = run()
    second = run()
    for x, y in zip(first, second):
        np.testing.assert_array_equal(x, y)


def test_equal_and_opposite_linear_jacobians():
    a = box_body("a")
    b = box_body("b", center=(0.0, 0.12, 0.0), rotation=quat_from_axis_angle(X, 1.2))
    constraints = [
        BallJoint(a, b, np.array([0, 0.06, 0.0]), np.array([0, -0.06, 0.0])),
        AngularLimit(a, b, quat_identity(), quat_identity(),
                     np.array([[-0.3, 0.3], [0.0, 0.0], [0.0, 0.0]])),
        OrientationParallel(a, b, np.deg2rad(10.0)),
    ]
    rows = lower_constraints(constraints, [a, b], cfg())
    assert len(rows) > 3
    for row in rows:
        if row.body_b >= 0:
            np.testing.assert_allclose(row.j_lin_a + row.j_lin_b, 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def test_integrate_advances_translation():
    a = box_body("a")
    a.vel = np.array([1.0, 0.0, 0.0])
    integrate([a], cfg(damping=0.0))
    np.testing.assert_allclose(a.pose.translation, [1.0 / 60.0, 0.0, 0.0], atol=1e-15)


def test_integrate_zero_omega_keeps_orientation():
    q0 = quat_from_axis_angle(Y, 0.4)
    a = box_body("a", rotation=q0)
    a.vel = np.array([0.0, 1.0, 0.0])
    integrate([a], cfg())
    np.testing.assert_allclose(a.pose.rotation, q0, atol=1e-15)


def test_integrate_damping_scales_speed():
    a = box_body("a")
    a.vel = np.array([2.0, 0.0, 0.0])
    a.omega = np.array([0.0, 0.0, 4.0])
    integrate([a], cfg(damping=0.1))
    assert np.linalg.norm(a.vel) == pytest.approx(1.8, rel=1e-12)
    assert np.linalg.norm(a.omega) == pytest.approx(3.6, rel=1e-12)


def test_integrate_rotates_about_com():
    # body origin is not the COM reference: COM must move with vel, not the origin
    a = box_body("a", center=(0.2, 0.0, 0.0))
    a.omega = np.array([0.0, 0.0, 2.0])
    com0 = a.com_world.copy()
    integrate([a], cfg(damping=0.0))
    np.testing.assert_allclose(a.com_world, com0, atol=1e-12)


# ---------------------------------------------------------------------------
# step_world
# ---------------------------------------------------------------------------

def test_two_body_chain_at_rest_is_stationary():
    a = box_body("a")
    b = box_body("b", center=(0.1, 0.0, 0.0))
    joint = BallJoint(a, b, np.array([0.05, 0, 0.0]), np.array([-0.05, 0, 0.0]))
    p0a, p0b = a.pose.translation.copy(), b.pose.translation.copy()
    config = cfg()
    for _ in range(10):
        step_world([a, b], [joint], config)
    np.testing.assert_allclose(a.pose.translation, p0a, atol=1e-9)
    np.testing.assert_allclose(b.pose.translation, p0b, atol=1e-9)


def test_pendulum_anchor_drift_stays_under_1mm():
    anchor_world = np.zeros(3)
    pivot = box_body("pivot", static=True)
    rod = box_body("rod", center=(0.2, 0.0, 0.0))
    joint = BallJoint(pivot, rod, np.zeros(3), np.array([-0.2, 0.0, 0.0]))
    config = cfg(damping=0.0)
    omega_s = np.array([0.0, 0.0, 5.0])  # rim speed 1 m/s at r = 0.2
    worst = 0.0
    for _ in range(600):
        r = rod.com_world - anchor_world
        rod.vel = np.cross(omega_s, r)
        rod.omega = omega_s.copy()
        step_world([pivot, rod], [joint], config)
        worst = max(worst, joint.anchor_error())
    assert worst < 1e-3


def test_frozen_composite_moves_rigidly():
    bodies = [
        box_body("a"),
        box_body("b", center=(0.12, 0.0, 0.0)),
        box_body("c", center=(0.0, 0.15, 0.0)),
    ]
    bodies[0].vel = np.array([0.5, 0.0, 0.0])
    bodies[1].vel = np.array([-0.5, 0.0, 0.0])
    ctx = freeze_bodies(bodies)
    for b in bodies:
        b.frozen = True
    comp = ctx.composite
    comp.vel = np.array([0.4, 0.1, 0.0])
    comp.omega = np.array([0.0, 1.0, 2.0])
    d01 = np.linalg.norm(bodies[0].com_world - bodies[1].com_world)
    d02 = np.linalg.norm(bodies[0].com_world - bodies[2].com_world)
    config = cfg(damping=0.0)
    for _ in range(30):
        step_world([comp], [], config)
    for b in bodies:
        b.frozen = False
    unfreeze_bodies(ctx)
    assert np.linalg.norm(bodies[0].com_world - bodies[1].com_world) == pytest.approx(d01, abs=1e-6)
    assert np.linalg.norm(bodies[0].com_world - bodies[2].com_world) == pytest.approx(d02, abs=1e-6)
    # members inherit the composite's velocity field
    np.testing.assert_allclose(bodies[2].omega, comp.omega, atol=1e-12)


def test_freeze_preserves_momentum():
    a = box_body("a")
    b = box_body("b", center=(0.2, 0.0, 0.0))
    a.vel = np.array([0.0, 1.0, 0.0])
    b.vel = np.array([0.0, -1.0, 0.0])
    ctx = freeze_bodies([a, b])
    np.testing.assert_allclose(ctx.composite.vel, 0.0, atol=1e-12)
    # opposite transverse velocities at +-10 cm around the center: spin about -z
    assert ctx.composite.omega[2] < 0.0
    assert abs(ctx.composite.omega[0]) < 1e-12 and abs(ctx.composite.omega[1]) < 1e-12


# ---------------------------------------------------------------------------
# angular limits under load
# ---------------------------------------------------------------------------

def test_angular_limit_violation_stays_small():
    a = box_body("a", static=True)
    b = box_body("b", center=(0.0, 0.1, 0.0))
    lim = AngularLimit(a, b, quat_identity(), quat_identity(),
                       np.array([[-0.5, 0.5], [-0.2, 0.2], [-0.1, 0.1]]))
    joint = BallJoint(a, b, np.array([0.0, 0.05, 0.0]), np.array([0.0, -0.05, 0.0]))
    config = cfg(damping=0.0)
    worst = 0.0
    for step in range(120):
        b.omega = np.array([4.0, 0.0, 0.0])  # keep driving into the flex limit
        step_world([a, b], [joint, lim], config)
        worst = max(worst, lim.violation())
    assert worst < 1e-3


def test_locked_axis_stays_locked():
    a = box_body("a", static=True)
    b = box_body("b", center=(0.0, 0.1, 0.0))
    lim = AngularLimit(a, b, quat_identity(), quat_identity(),
                       np.array([[-1.2, 1.2], [0.0, 0.0], [0.0, 0.0]]))
    joint = BallJoint(a, b, np.array([0.0, 0.05, 0.0]), np.array([0.0, -0.05, 0.0]))
    config = cfg(damping=0.0)
    for _ in range(120):
        b.omega = np.array([1.0, 0.5, 0.8])
        step_world([a, b], [joint, lim], config)
    flex, abd, twist = lim.angles()
    assert abs(abd) < 5e-3 and abs(twist) < 5e-3


def test_measured_angles_match_construction():
    a = box_body("a")
    flex, twist = 0.3, 0.2
    q = quat_mul(quat_from_axis_angle(X, flex), quat_from_axis_angle(Y, twist))
    b = box_body("b", center=(0.0, 0.1, 0.0), rotation=q)
    lim = AngularLimit(a, b, quat_identity(), quat_identity(), FREE)
    measured = lim.angles()
    assert measured[0] == pytest.approx(flex, abs=1e-9)
    assert measured[1] == pytest.approx(0.0, abs=1e-9)
    assert measured[2] == pytest.approx(twist, abs=1e-9)


def test_orientation_parallel_pulls_axes_together():
    a = box_body("a", static=True)
    b = box_body("b", center=(0.15, 0.0, 0.0),
                 rotation=quat_from_axis_angle(Z, np.deg2rad(40.0)))
    par = OrientationParallel(a, b, np.deg2rad(10.0))
    config = cfg(damping=0.0)
    for _ in range(200):
        step_world([a, b], [par], config)
    ya = quat_rotate(a.pose.rotation, Y)
    yb = quat_rotate(b.pose.rotation, Y)
    angle = np.arccos(np.clip(ya @ yb, -1.0, 1.0))
    assert angle <= np.deg2rad(10.0) + 1e-3


def test_pose_nudge_steers_toward_target():
    a = box_body("a")
    target = quat_from_axis_angle(Y, 0.8)
    nudge = PoseNudge(a, target, cap=1.0)
    config = cfg(damping=0.0)
    for _ in range(60):
        step_world([a], [nudge], config)
    delta = quat_mul(target, np.array([1.0, -1.0, -1.0, -1.0]) * a.pose.rotation)
    angle = 2.0 * np.arctan2(np.linalg.norm(delta[1:]), abs(delta[0]))
    assert angle < 1e-3


def test_pose_nudge_cap_limits_rate():
    a = box_body("a")
    target = quat_from_axis_angle(Y, 2.0)
    tiny = 1e-4
    nudge = PoseNudge(a, target, cap=tiny)
    rows = lower_constraints([nudge], [a], cfg())
    solve(rows, [a], 16)
    assert np.all(np.abs(rows.lam) <= tiny + 1e-15)


# ---------------------------------------------------------------------------
# collisions
# ---------------------------------------------------------------------------

def test_overlapping_pair_generates_planes():
    a = box_body("a")
    b = box_body("b", center=(0.08, 0.0, 0.0))  # 2 cm overlap
    cs = collision_constraints([a, b], disabled_pairs=[])
    assert len(cs) >= 1
    assert all(isinstance(c, ContactPlane) for c in cs)
    involved = {c.body.name for c in cs}
    assert involved == {"a", "b"}


def test_disabled_pair_generates_nothing():
    a = box_body("a")
    b = box_body("b", center=(0.08, 0.0, 0.0))
    assert collision_constraints([a, b], disabled_pairs=[("a", "b")]) == []


def test_separated_pair_generates_nothing():
    a = box_body("a")
    b = box_body("b", center=(0.5, 0.0, 0.0))
    assert collision_constraints([a, b], disabled_pairs=[]) == []


def test_collision_resolves_overlap():
    a = box_body("a")
    b = box_body("b", center=(0.08, 0.0, 0.0))
    config = cfg(damping=0.0)
    for _ in range(200):
        cs = collision_constraints([a, b], disabled_pairs=[])
        step_world([a, b], cs, config)
    gap = abs(b.pose.translation[0] - a.pose.translation[0])
    assert gap >= 0.1 - 1e-3  # separated up to contact slop
