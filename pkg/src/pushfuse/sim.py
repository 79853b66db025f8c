"""Deterministic planar pushing dynamics.

A kinematic disc pusher interacts with a rigid body lying on a table. Contact
uses a damped penalty on penetration depth with regularized Coulomb friction at
the contact; the table applies regularized Coulomb support friction to the
body's linear and angular motion. Integration is semi-implicit Euler on a fixed
physics step, with several substeps per control step. Everything is float64 and
bit-reproducible: the same state and command sequence always yields the same
trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGeometry, InvalidReset, ShapeError, SimulationDiverged
from .geometry import MassProperties, RigidObjectSpec, composite_mass_properties, signed_area

TRAJECTORY_HEADER = "t,x,y,theta,vx,vy,omega,px,py,contact"


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def clamp_norm(vec: np.ndarray, limit: float) -> np.ndarray:
    """Scale rows of vec down to Euclidean norm <= limit (no-op inside the ball)."""
    v = np.asarray(vec, dtype=np.float64)
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    scale = np.where(n > limit, limit / np.maximum(n, 1e-300), 1.0)
    return v * scale


@dataclass(frozen=True)
class SimParams:
    """Physics constants. Defaults are calibrated for desk-scale objects.

    eps_v must stay >= mu_support * g * dt_physics so the regularized friction
    can never reverse a velocity within one substep (this is what makes free
    motion strictly dissipative).
    """

    dt_physics: float = 1.0 / 240.0
    substeps_per_control: int = 24
    k_n: float = 1500.0        # contact normal stiffness, N/m
    k_d: float = 10.0          # contact normal damping, N s/m
    mu_contact: float = 0.5    # pusher-object friction
    mu_support: float = 0.35   # object-table friction
    g: float = 9.81
    eps_v: float = 0.02        # m/s, linear friction regularization
    eps_w: float = 0.15        # rad/s, angular friction regularization
    kappa_frac: float = 0.6    # torque arm = kappa_frac * mean vertex distance from CoM
    pusher_radius: float = 0.01
    d_max: float = 0.01        # max pusher displacement per control step
    rest_lin_vel: float = 1e-5
    rest_ang_vel: float = 1e-4

    def __post_init__(self):
        for name in (
            "dt_physics", "k_n", "k_d", "mu_contact", "mu_support", "g",
            "eps_v", "eps_w", "kappa_frac", "pusher_radius", "d_max",
            "rest_lin_vel", "rest_ang_vel",
        ):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0.0):
                raise InvalidGeometry(f"SimParams.{name} must be a positive finite number")
        if not (isinstance(self.substeps_per_control, int) and self.substeps_per_control >= 1):
            raise InvalidGeometry("substeps_per_control must be a positive integer")

    @property
    def control_period(self) -> float:
        return self.dt_physics * self.substeps_per_control


@dataclass
class SimState:
    """Object pose (body-frame origin), CoM twist, pusher position, clock, contact."""

    pose: np.ndarray        # (x, y, theta)
    twist: np.ndarray       # (vx, vy) of the CoM and omega
    pusher_pos: np.ndarray  # (px, py)
    time: float = 0.0
    contact_flag: bool = False

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).copy()
        self.twist = np.asarray(self.twist, dtype=np.float64).copy()
        self.pusher_pos = np.asarray(self.pusher_pos, dtype=np.float64).copy()
        if self.pose.shape != (3,) or self.twist.shape != (3,) or self.pusher_pos.shape != (2,):
            raise ShapeError("SimState needs pose (3,), twist (3,), pusher_pos (2,)")
        if not (np.all(np.isfinite(self.pose)) and np.all(np.isfinite(self.twist)) and np.all(np.isfinite(self.pusher_pos))):
            raise SimulationDiverged("SimState contains non-finite values")
        self.pose[2] = float(wrap_angle(self.pose[2]))


@dataclass(frozen=True)
class PusherCommand:
    """Requested pusher displacement over one control step."""

    delta: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if d.shape != (2,) or not np.all(np.isfinite(d)):
            raise ShapeError("command delta must be a finite 2-vector")
        object.__setattr__(self, "delta", d)


def _check_convex_ccw(vertices: np.ndarray) -> None:
    n = vertices.shape[0]
    if signed_area(vertices) <= 0.0:
        raise InvalidGeometry("contact parts must wind counterclockwise")
    for i in range(n):
        a, b, c = vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]
        if (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) < -1e-12:
            raise InvalidGeometry("contact parts must be convex")


@dataclass(frozen=True)
class BodyModel:
    """Contact geometry (convex parts, body frame) plus mass properties."""

    parts: tuple[np.ndarray, ...]
    props: MassProperties
    mean_vertex_radius: float = field(init=False)

    def __post_init__(self):
        parts = tuple(np.asarray(p, dtype=np.float64) for p in self.parts)
        for p in parts:
            if p.ndim != 2 or p.shape[0] < 3 or p.shape[1] != 2:
                raise InvalidGeometry("each contact part needs >=3 planar vertices")
            _check_convex_ccw(p)
        object.__setattr__(self, "parts", parts)
        allv = np.vstack(parts)
        r = np.sqrt(np.sum((allv - self.props.com) ** 2, axis=1))
        object.__setattr__(self, "mean_vertex_radius", float(np.mean(r)))

    @classmethod
    def from_spec(cls, spec: RigidObjectSpec, props: MassProperties | None = None) -> "BodyModel":
        if props is None:
            props = composite_mass_properties(spec)
        return cls(parts=tuple(p.vertices for p in spec.parts), props=props)


def _part_distance_batch(center: np.ndarray, verts_w: np.ndarray):
    """Signed centre distance, closest boundary point, and outward normal.

    center: (N, 2) disc centres; verts_w: (N, V, 2) convex CCW polygons.
    Returns (signed (N,), point (N, 2), normal (N, 2)); signed < 0 inside.
    The normal points from the polygon towards the disc centre (the direction
    that increases the signed distance).
    """
    a = verts_w
    b = np.roll(verts_w, -1, axis=1)
    e = b - a                                         # (N, V, 2)
    ca = center[:, None, :] - a                       # (N, V, 2)
    ee = np.sum(e * e, axis=2)
    t = np.clip(np.sum(ca * e, axis=2) / np.maximum(ee, 1e-300), 0.0, 1.0)
    q = a + t[:, :, None] * e                         # closest point per edge
    dq = center[:, None, :] - q
    d2 = np.sum(dq * dq, axis=2)
    j = np.argmin(d2, axis=1)                         # (N,)
    rows = np.arange(center.shape[0])
    point = q[rows, j]
    d = np.sqrt(d2[rows, j])
    cross = e[:, :, 0] * ca[:, :, 1] - e[:, :, 1] * ca[:, :, 0]
    inside = np.all(cross >= 0.0, axis=1)
    signed = np.where(inside, -d, d)
    diff = center - point
    # outward edge normal of the nearest edge as a fallback when centre sits on the boundary
    e_near = e[rows, j]
    e_len = np.sqrt(np.sum(e_near * e_near, axis=1))
    n_edge = np.stack([e_near[:, 1], -e_near[:, 0]], axis=1) / np.maximum(e_len, 1e-300)[:, None]
    sign = np.where(inside, -1.0, 1.0)[:, None]
    safe = d > 1e-12
    normal = np.where(safe[:, None], sign * diff / np.maximum(d, 1e-300)[:, None], n_edge)
    return signed, point, normal


def signed_distance(disc_center, disc_radius: float, polygon_world) -> tuple[float, np.ndarray, np.ndarray]:
    """Signed disc-polygon distance (negative = penetrating) with contact point and normal."""
    c = np.asarray(disc_center, dtype=np.float64).reshape(1, 2)
    v = np.asarray(polygon_world, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise InvalidGeometry("polygon_world must be an (n>=3, 2) array")
    signed, point, normal = _part_distance_batch(c, v[None, :, :])
    return float(signed[0] - disc_radius), point[0], normal[0]


def _multi_part_distance(probes, origins, cos_t, sin_t, parts_body, pusher_radius: float):
    """Min pusher-disc distance over body parts for a batch of posed scenes.

    probes/origins: (N, 2); cos_t/sin_t: (N,). Returns (phi, point, normal).
    """
    best_phi = None
    best_point = None
    best_normal = None
    for pv in parts_body:
        wx = origins[:, 0:1] + cos_t[:, None] * pv[:, 0] - sin_t[:, None] * pv[:, 1]
        wy = origins[:, 1:2] + sin_t[:, None] * pv[:, 0] + cos_t[:, None] * pv[:, 1]
        verts_w = np.stack([wx, wy], axis=2)
        signed, point, normal = _part_distance_batch(probes, verts_w)
        phi = signed - pusher_radius
        if best_phi is None:
            best_phi, best_point, best_normal = phi, point, normal
        else:
            better = phi < best_phi
            best_phi = np.where(better, phi, best_phi)
            best_point = np.where(better[:, None], point, best_point)
            best_normal = np.where(better[:, None], normal, best_normal)
    return best_phi, best_point, best_normal


def place_pusher(origins, thetas, directions, parts_body, pusher_radius: float, gap: float,
                 iters: int = 60) -> np.ndarray:
    """Pusher centres at a given surface gap behind each posed body.

    Walks each probe along -direction from the body origin until the signed
    pusher-body distance equals gap, by bisection on the ray parameter. gap
    must be positive so the returned placement never collides.
    """
    if gap <= 0.0:
        raise InvalidReset("pusher standoff gap must be positive")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = origins.shape[0]
    cos_t = np.cos(thetas)
    sin_t = np.sin(thetas)
    max_r = max(float(np.max(np.sqrt(np.sum(pv**2, axis=1)))) for pv in parts_body)
    # distance from a probe at ray parameter t is at least t - max_r - pusher_radius,
    # so t_hi is guaranteed to sit beyond the target gap; t_lo = 0 sits inside
    t_lo = np.zeros(n)
    t_hi = np.full(n, max_r + pusher_radius + gap + 1e-6)
    for _ in range(iters):
        t_mid = 0.5 * (t_lo + t_hi)
        probes = origins - t_mid[:, None] * directions
        phi, _, _ = _multi_part_distance(probes, origins, cos_t, sin_t, parts_body, pusher_radius)
        below = phi < gap
        t_lo = np.where(below, t_mid, t_lo)
        t_hi = np.where(below, t_hi, t_mid)
    return origins - t_hi[:, None] * directions


class SimulatorBatch:
    """N independent pushing scenes advanced in lockstep.

    All per-scene arrays are laid out along axis 0 and every operation is
    elementwise across scenes, so a batch step is bit-identical to stepping each
    scene alone.
    """

    def __init__(self, parts: tuple[np.ndarray, ...], params: SimParams, num: int):
        self.params = params
        self.num = num
        self.parts_body = tuple(np.asarray(p, dtype=np.float64) for p in parts)
        for p in self.parts_body:
            _check_convex_ccw(p)
        # per-scene mass properties, filled by set_body_rows
        self.mass = np.ones(num)
        self.com_body = np.zeros((num, 2))
        self.inertia = np.ones(num)
        self.kappa_radius = np.ones(num)
        # state
        self.origin = np.zeros((num, 2))
        self.theta = np.zeros(num)
        self.vel = np.zeros((num, 2))
        self.omega = np.zeros(num)
        self.pusher = np.zeros((num, 2))
        self.time = np.zeros(num)
        self.contact = np.zeros(num, dtype=bool)
        self.step_count = 0

    @classmethod
    def from_body(cls, body: BodyModel, params: SimParams, num: int) -> "SimulatorBatch":
        sim = cls(body.parts, params, num)
        sim.set_body_rows(np.arange(num), body)
        return sim

    def set_body_rows(self, rows: np.ndarray, body: BodyModel) -> None:
        self.mass[rows] = body.props.mass
        self.com_body[rows] = body.props.com
        self.inertia[rows] = body.props.inertia
        self.kappa_radius[rows] = body.mean_vertex_radius

    def set_state_rows(self, rows, pose: np.ndarray, pusher: np.ndarray, twist: np.ndarray | None = None) -> None:
        pose = np.atleast_2d(np.asarray(pose, dtype=np.float64))
        pusher = np.atleast_2d(np.asarray(pusher, dtype=np.float64))
        self.origin[rows] = pose[:, :2]
        self.theta[rows] = wrap_angle(pose[:, 2])
        self.pusher[rows] = pusher
        if twist is None:
            self.vel[rows] = 0.0
            self.omega[rows] = 0.0
        else:
            twist = np.atleast_2d(np.asarray(twist, dtype=np.float64))
            self.vel[rows] = twist[:, :2]
            self.omega[rows] = twist[:, 2]
        self.time[rows] = 0.0
        self.contact[rows] = False

    def _world_com(self, cos_t, sin_t):
        cx = self.origin[:, 0] + cos_t * self.com_body[:, 0] - sin_t * self.com_body[:, 1]
        cy = self.origin[:, 1] + sin_t * self.com_body[:, 0] + cos_t * self.com_body[:, 1]
        return np.stack([cx, cy], axis=1)

    def _body_distance(self, cos_t, sin_t):
        """Min signed distance over parts; returns (phi, point, normal) per scene."""
        return _multi_part_distance(self.pusher, self.origin, cos_t, sin_t, self.parts_body, self.params.pusher_radius)

    def control_step(self, deltas: np.ndarray, record: bool = False) -> dict:
        """Advance every scene by one control step (pusher moves linearly).

        Contact model per substep, with n the polygon-to-disc normal and
        u = v_contact_point - v_pusher the object velocity relative to the pusher:
          F_n = max(0, k_n * pen + k_d * (u . n))        pushing the object along -n
          F_t = -mu_contact * F_n * u_t / (|u_t| + eps_v)
        Both components are impulse-capped so the contact can only remove
        relative velocity, never create it: with lam = 1/m + |r|^2 / I an upper
        bound on the contact-space inverse mass, F_n <= max(0, u.n) / (lam dt)
        and |F_t| <= |u_t| / (lam dt). Against a stationary pusher this makes
        every substep dissipative (no restitution); a penetrating state at
        relative rest feels no force and recovers only under relative approach.
        Support friction opposes CoM velocity and rotation:
          F_s   = -mu_support m g  v / (|v| + eps_v)
          tau_s = -mu_support m g kappa  w / (|w| + eps_w)
        """
        p = self.params
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.shape != (self.num, 2):
            raise ShapeError(f"deltas must have shape ({self.num}, 2)")
        deltas = clamp_norm(deltas, p.d_max)
        S = p.substeps_per_control
        dt = p.dt_physics
        v_push = deltas / (S * dt)
        dp = deltas / S
        any_contact = np.zeros(self.num, dtype=bool)
        max_pen = np.zeros(self.num)
        rec: dict[str, list] = {"ke": [], "speed": [], "omega": [], "phi": []} if record else {}

        for _ in range(S):
            cos_t = np.cos(self.theta)
            sin_t = np.sin(self.theta)
            com_w = self._world_com(cos_t, sin_t)
            phi, point, normal = self._body_distance(cos_t, sin_t)
            pen = np.maximum(0.0, -phi)
            touching = phi < 0.0
            any_contact |= touching
            max_pen = np.maximum(max_pen, pen)

            r_qc = point - com_w
            v_q = self.vel + np.stack([-self.omega * r_qc[:, 1], self.omega * r_qc[:, 0]], axis=1)
            u = v_q - v_push
            u_n = np.sum(u * normal, axis=1)
            u_t = u - u_n[:, None] * normal
            ut_norm = np.sqrt(np.sum(u_t * u_t, axis=1))
            # impulse caps: for orthonormal (n, t) the lever arms satisfy
            # (r x n)^2 + (r x t)^2 = |r|^2; padding each directional inverse
            # mass with the cross lever product absorbs the n-t coupling, so
            # capping each impulse at 2 u / k keeps every substep dissipative
            rxn = r_qc[:, 0] * normal[:, 1] - r_qc[:, 1] * normal[:, 0]
            rxn2 = rxn * rxn
            rxt2 = np.maximum(0.0, np.sum(r_qc * r_qc, axis=1) - rxn2)
            cross = np.sqrt(rxn2 * rxt2)
            k_nn = 1.0 / self.mass + (rxn2 + cross) / self.inertia
            k_tt = 1.0 / self.mass + (rxt2 + cross) / self.inertia
            fn_cap = 2.0 * np.maximum(0.0, u_n) / (k_nn * dt)
            fn = np.where(touching, np.minimum(np.maximum(0.0, p.k_n * pen + p.k_d * u_n), fn_cap), 0.0)
            ft_mag = np.minimum(p.mu_contact * fn, 2.0 * ut_norm / (k_tt * dt))
            ft = -(ft_mag / (ut_norm + p.eps_v))[:, None] * u_t
            f_contact = -fn[:, None] * normal + ft
            tau_contact = r_qc[:, 0] * f_contact[:, 1] - r_qc[:, 1] * f_contact[:, 0]

            speed = np.sqrt(np.sum(self.vel * self.vel, axis=1))
            mg = self.mass * p.g
            f_support = -(p.mu_support * mg / (speed + p.eps_v))[:, None] * self.vel
            kappa = p.kappa_frac * self.kappa_radius
            tau_support = -p.mu_support * mg * kappa * self.omega / (np.abs(self.omega) + p.eps_w)

            force = f_contact + f_support
            torque = tau_contact + tau_support
            self.vel = self.vel + (force / self.mass[:, None]) * dt
            self.omega = self.omega + (torque / self.inertia) * dt

            at_rest = (
                ~touching
                & (np.sqrt(np.sum(self.vel * self.vel, axis=1)) < p.rest_lin_vel)
                & (np.abs(self.omega) < p.rest_ang_vel)
            )
            self.vel = np.where(at_rest[:, None], 0.0, self.vel)
            self.omega = np.where(at_rest, 0.0, self.omega)

            com_new = com_w + self.vel * dt
            self.theta = np.asarray(wrap_angle(self.theta + self.omega * dt))
            cos_n = np.cos(self.theta)
            sin_n = np.sin(self.theta)
            self.origin = com_new - np.stack(
                [
                    cos_n * self.com_body[:, 0] - sin_n * self.com_body[:, 1],
                    sin_n * self.com_body[:, 0] + cos_n * self.com_body[:, 1],
                ],
                axis=1,
            )
            self.pusher = self.pusher + dp
            if record:
                ke = 0.5 * self.mass * np.sum(self.vel * self.vel, axis=1) + 0.5 * self.inertia * self.omega**2
                rec["ke"].append(ke)
                rec["speed"].append(np.sqrt(np.sum(self.vel * self.vel, axis=1)))
                rec["omega"].append(np.abs(self.omega))
                rec["phi"].append(phi)

        self.time = self.time + S * dt
        self.contact = any_contact
        self.step_count += 1
        bad = ~(
            np.all(np.isfinite(self.origin), axis=1)
            & np.isfinite(self.theta)
            & np.all(np.isfinite(self.vel), axis=1)
            & np.isfinite(self.omega)
        )
        if np.any(bad):
            raise SimulationDiverged(
                f"non-finite state in scene(s) {np.nonzero(bad)[0].tolist()} at control step {self.step_count}",
                step_index=self.step_count,
            )
        info = {"contact": any_contact, "max_penetration": max_pen}
        if record:
            info.update({k: np.array(v) for k, v in rec.items()})
        return info

    def state(self, i: int) -> SimState:
        return SimState(
            pose=np.array([self.origin[i, 0], self.origin[i, 1], self.theta[i]]),
            twist=np.array([self.vel[i, 0], self.vel[i, 1], self.omega[i]]),
            pusher_pos=self.pusher[i].copy(),
            time=float(self.time[i]),
            contact_flag=bool(self.contact[i]),
        )


def step_physics(state: SimState, body: BodyModel, params: SimParams, command: PusherCommand) -> SimState:
    """Advance one scene by one control step; pure function of its arguments."""
    sim = SimulatorBatch.from_body(body, params, 1)
    sim.set_state_rows([0], state.pose[None, :], state.pusher_pos[None, :], state.twist[None, :])
    sim.time[0] = state.time
    sim.control_step(command.delta[None, :])
    out = sim.state(0)
    out.time = state.time + params.control_period
    return out


def body_signed_distance(state: SimState, body: BodyModel, params: SimParams) -> float:
    """Min signed distance between the pusher disc and the body in a given state."""
    sim = SimulatorBatch.from_body(body, params, 1)
    sim.set_state_rows([0], state.pose[None, :], state.pusher_pos[None, :], state.twist[None, :])
    cos_t = np.cos(sim.theta)
    sin_t = np.sin(sim.theta)
    phi, _, _ = sim._body_distance(cos_t, sin_t)
    return float(phi[0])


def reset(
    spec: RigidObjectSpec,
    init_pose,
    goal_pose,
    rng_seed: int,
    params: SimParams,
    standoff: float = 0.03,
    body: BodyModel | None = None,
) -> SimState:
    """Place the object at init_pose with the pusher behind it relative to the goal.

    standoff is the surface gap between the pusher disc and the object.
    Deterministic in all arguments; rng_seed is reserved for seeded placement
    variants and does not perturb the default placement.
    """
    del rng_seed
    init_pose = np.asarray(init_pose, dtype=np.float64)
    goal_pose = np.asarray(goal_pose, dtype=np.float64)
    if init_pose.shape != (3,) or goal_pose.shape != (3,):
        raise ShapeError("poses must be 3-vectors (x, y, theta)")
    if body is None:
        body = BodyModel.from_spec(spec)
    to_goal = goal_pose[:2] - init_pose[:2]
    dist = float(np.linalg.norm(to_goal))
    direction = to_goal / dist if dist > 1e-9 else np.array([1.0, 0.0])
    pusher = place_pusher(init_pose[None, :2], init_pose[2:3], direction[None, :],
                          body.parts, params.pusher_radius, standoff)[0]
    state = SimState(pose=init_pose, twist=np.zeros(3), pusher_pos=pusher)
    if body_signed_distance(state, body, params) < 0.0:
        raise InvalidReset(
            f"pusher at standoff {standoff} m starts inside the object; increase the standoff"
        )
    return state


def trajectory_rows(states: list[SimState]) -> list[str]:
    rows = []
    for s in states:
        vals = [s.time, s.pose[0], s.pose[1], s.pose[2], s.twist[0], s.twist[1], s.twist[2], s.pusher_pos[0], s.pusher_pos[1]]
        rows.append(",".join(f"{v:.9g}" for v in vals) + f",{int(s.contact_flag)}")
    return rows


def save_trajectory(path, states: list[SimState]) -> None:
    """Write one CSV row per control step."""
    with open(path, "w") as f:
        f.write(TRAJECTORY_HEADER + "\n")
        for row in trajectory_rows(states):
            f.write(row + "\n")
