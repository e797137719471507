"""Mass-spring-damper simulation of the strip with breakable attachment tendons.

The top layer is a particle system integrated with semi-implicit Euler at a
fixed substep.  Structural tendons model the strip fabric and behave as
cords: full spring-damper force while taut, nothing while slack (fabric
cannot push).  Breakable tendons tie top nodes to fixed anchors, act as
two-sided springs (the hook bed supports the strip), and snap permanently
once their axial tension exceeds the release threshold; a snapped tendon
exerts no force from the substep in which the overload is detected.  Release
is directional, like the hooks it stands in for: only the tension component
along the tendon's release axis (the bisector of surface normal and
back-tangent -- hooks open toward the handle) counts against
break_threshold, so a pull along the axis releases at the bare threshold and
an angled pull needs 1/cos(angle) more.  Two geometries jam outright and no
tension ever releases them: stretch well off the release axis (dragging the
strip into the attachment or pressing it down), and stretch leaning forward
past the hook throat's slack (peel-direction pulls press the hook closed).  Handle nodes are kinematically pinned to the
commanded gripper position while the grip holds; the gripper senses the
reaction wrench transmitted through the tendons, tared by the environment so
a settled strip reads zero.  Grip is lost permanently when the sensed force
magnitude stays above grip_strength for three consecutive substeps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import GeometryParams, MeshConfig, VelcroModel, build_model

GRIP_FAIL_SUBSTEPS = 3


@dataclass(frozen=True)
class PhysicsConfig:
    k_struct: float = 8000.0
    k_break: float = 100.0
    c_damp: float = 16.0
    node_mass: float = 0.5
    break_threshold: float = 2.0
    gravity: float = 0.5
    dt_sub: float = 1.0 / 300.0
    grip_strength: float = 35.0

    def __post_init__(self):
        for name in ("k_struct", "k_break", "node_mass", "break_threshold",
                     "dt_sub", "grip_strength"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.c_damp < 0.0 or self.gravity < 0.0:
            raise ValueError("c_damp and gravity must be non-negative")
        k_max = max(self.k_struct, self.k_break)
        if self.dt_sub >= 2.0 * np.sqrt(self.node_mass / k_max):
            raise ValueError(
                f"dt_sub {self.dt_sub} violates the explicit-integrator bound "
                f"2*sqrt(m/k) = {2.0 * np.sqrt(self.node_mass / k_max):.6f}"
            )

    def tendon_kwargs(self) -> dict:
        return dict(
            k_struct=self.k_struct, k_break=self.k_break, c_damp=self.c_damp,
            node_mass=self.node_mass, break_threshold=self.break_threshold,
        )


def build_default_model(params: GeometryParams, mesh: MeshConfig,
                        cfg: PhysicsConfig) -> VelcroModel:
    return build_model(params, mesh, **cfg.tendon_kwargs())


class SimulationDiverged(RuntimeError):
    """Raised when node state stops being finite."""


@dataclass
class SimState:
    """Dynamic state of one simulated strip."""
    positions: np.ndarray          # [n_top, 3]
    velocities: np.ndarray         # [n_top, 3]
    broken: np.ndarray             # [n_break] bool
    gripper_pos: np.ndarray        # [3]
    gripper_euler: np.ndarray      # [3], fixed for the whole episode
    clock: float = 0.0
    grip_held: bool = True
    grip_over_count: int = 0
    # Hooks seated shut by forward-leaning tension (see break_update).
    # Jammed tendons still hold but can never release.  Defaults to none.
    jammed: np.ndarray = None      # [n_break] bool

    def __post_init__(self):
        if self.jammed is None:
            self.jammed = np.zeros_like(self.broken)

    def copy(self) -> "SimState":
        return SimState(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            broken=self.broken.copy(),
            gripper_pos=self.gripper_pos.copy(),
            gripper_euler=self.gripper_euler.copy(),
            clock=self.clock,
            grip_held=self.grip_held,
            grip_over_count=self.grip_over_count,
            jammed=self.jammed.copy(),
        )


def initial_state(model: VelcroModel) -> SimState:
    """As-built state: nodes at rest, gripper at the handle centroid."""
    grip = model.top_nodes[model.handle_nodes].mean(axis=0)
    euler = np.array([model.params.theta_x, model.params.theta_y,
                      model.params.theta_z])
    return SimState(
        positions=model.top_nodes.copy(),
        velocities=np.zeros_like(model.top_nodes),
        broken=np.zeros(model.total_breakable, dtype=bool),
        gripper_pos=grip,
        gripper_euler=euler,
    )


def handle_offsets(model: VelcroModel) -> np.ndarray:
    """As-built handle node positions relative to the gripper center."""
    handle = model.top_nodes[model.handle_nodes]
    if handle.shape[0] == 0:
        return handle
    return handle - handle.mean(axis=0)


# ---------------------------------------------------------------------------
# Elementary force and rule operations
# ---------------------------------------------------------------------------

def spring_damper_force(k: float, c: float, len0: float, x_rel, v_rel):
    """Force on endpoint A of a spring-damper unit A-B.

    x_rel = p_A - p_B, v_rel = v_A - v_B.  Coincident endpoints are
    degenerate and exert no force.
    """
    d = np.asarray(x_rel, dtype=float)
    length = float(np.linalg.norm(d))
    if length < 1e-12:
        return np.zeros(3)
    direction = d / length
    axial = k * (length - len0) \
        + c * float(np.dot(np.asarray(v_rel, dtype=float), direction))
    return -axial * direction


def cord_force(k: float, c: float, len0: float, x_rel, v_rel):
    """Structural-tendon force: a spring-damper that only acts while taut.

    The strip fabric cannot push -- a slack or compressed cord transmits
    nothing, and a taut one never pushes its endpoints apart.  Identical to
    spring_damper_force whenever the unit is stretched and under tension.
    """
    d = np.asarray(x_rel, dtype=float)
    length = float(np.linalg.norm(d))
    if length <= len0:
        return np.zeros(3)
    direction = d / length
    axial = k * (length - len0) \
        + c * float(np.dot(np.asarray(v_rel, dtype=float), direction))
    if axial <= 0.0:
        return np.zeros(3)
    return -axial * direction


def model_release_axes(model: VelcroModel) -> np.ndarray:
    """Per-breakable unit release axis.

    Built models carry their axes (bisector of surface normal and
    back-tangent, see geometry.release_axes).  Hand-built models without
    one fall back to the as-built tendon direction, which reduces the
    release rule to the plain scalar comparison for a straight pull.
    """
    if model.break_axis is not None:
        return model.break_axis
    d = model.top_nodes[model.break_node] - model.anchors
    length = np.linalg.norm(d, axis=1)
    out = np.zeros_like(d)
    ok = length > 1e-12
    out[ok] = d[ok] / length[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


RELEASE_ALIGN_MIN = 0.4      # cos of the widest stretch angle a hook can open at
RELEASE_FORWARD_SLACK = 0.15  # forward lean past the normal plane that still opens


def model_back_tangents(model: VelcroModel) -> np.ndarray:
    """Per-breakable unit back-tangent (the way the hook throats face).

    Hand-built models without one get zeros, which disables the
    forward-jam rule: no stretch direction counts as pressing such a hook
    closed.
    """
    if model.break_back is not None:
        return model.break_back
    return np.zeros((model.total_breakable, 3))


def release_alignment(direction: np.ndarray, axis: np.ndarray,
                      back: np.ndarray | None = None) -> float:
    """Fraction of a tendon's axial tension that counts toward release.

    cos of the angle between the stretch direction and the release axis: a
    pull along the axis counts in full, an angled pull proportionally less.
    Well off axis the hook jams instead of opening, so the fraction drops
    to zero outright -- no tension, however large, releases a tendon
    stretched into the attachment.  The throat (back-tangent) adds a second
    jam: stretch leaning forward past the normal plane by more than
    RELEASE_FORWARD_SLACK presses the hook closed, however well it aligns
    with the axis otherwise.
    """
    if back is not None and float(np.dot(direction, back)) < -RELEASE_FORWARD_SLACK:
        return 0.0
    align = float(np.dot(direction, axis))
    return align if align > RELEASE_ALIGN_MIN else 0.0


def tendon_tensions(state: SimState, model: VelcroModel) -> np.ndarray:
    """Axial tension (positive = stretched) of every breakable tendon.

    Broken tendons report zero.
    """
    tensions = np.zeros(model.total_breakable)
    for j in range(model.total_breakable):
        if state.broken[j]:
            continue
        node = model.break_node[j]
        d = state.positions[node] - model.anchors[j]
        length = float(np.linalg.norm(d))
        if length < 1e-12:
            continue
        direction = d / length
        rel_v = float(np.dot(state.velocities[node], direction))
        tensions[j] = model.break_k[j] * (length - model.break_len0[j]) \
            + model.break_c[j] * rel_v
    return tensions


def break_update(state: SimState, model: VelcroModel) -> tuple[SimState, int]:
    """Snap every unbroken tendon whose aligned tension exceeds its release
    threshold (see release_alignment), and seat hooks pressed shut.

    A taut tendon whose stretch leans forward past the throat slack jams
    permanently: the tension seats the hook instead of opening it, and no
    later pull, however well aimed, releases it.  Returns the new state and
    how many tendons snapped.  Both flags are permanent.
    """
    tensions = tendon_tensions(state, model)
    axes = model_release_axes(model)
    backs = model_back_tangents(model)
    nxt = state.copy()
    for j in range(model.total_breakable):
        if state.broken[j] or tensions[j] == 0.0:
            continue
        d = state.positions[model.break_node[j]] - model.anchors[j]
        length = float(np.linalg.norm(d))
        if length < 1e-12:
            continue
        direction = d / length
        if tensions[j] > 0.0 \
                and float(np.dot(direction, backs[j])) < -RELEASE_FORWARD_SLACK:
            nxt.jammed[j] = True
        tensions[j] *= release_alignment(direction, axes[j], backs[j])
    snapped = (~state.broken) & (~nxt.jammed) & (tensions > model.break_threshold)
    nxt.broken |= snapped
    return nxt, int(snapped.sum())


def grip_check(sensed_force_mag: float, over_count: int,
               cfg: PhysicsConfig) -> tuple[bool, int]:
    """One substep of the consecutive-overload grip rule.

    Returns (grip still held, new overload counter).  The integrator applies
    this every substep to the tared sensed-force magnitude; loss latches.
    """
    if sensed_force_mag > cfg.grip_strength:
        over_count += 1
    else:
        over_count = 0
    return over_count < GRIP_FAIL_SUBSTEPS, over_count


def sense_wrench(state: SimState, model: VelcroModel,
                 tare: tuple[np.ndarray, np.ndarray] | None = None):
    """Reaction wrench the gripper applies to hold the handle, minus the tare.

    Force is minus the sum of tendon forces acting on handle nodes; torque is
    the matching moment about the gripper position.  The handle's own weight
    never appears (the sensor is zeroed at grasp).  A lost grip senses zero.
    """
    if not state.grip_held:
        return np.zeros(3), np.zeros(3)
    handle = set(int(i) for i in model.handle_nodes)
    force = np.zeros(3)
    torque = np.zeros(3)

    def absorb(node: int, f: np.ndarray) -> None:
        nonlocal force, torque
        force = force - f
        torque = torque - np.cross(state.positions[node] - state.gripper_pos, f)

    for m in range(model.struct_a.shape[0]):
        a, b = int(model.struct_a[m]), int(model.struct_b[m])
        for node, other in ((a, b), (b, a)):
            if node not in handle or other in handle:
                continue
            absorb(node, cord_force(
                model.struct_k[m], model.struct_c[m], model.struct_len0[m],
                state.positions[node] - state.positions[other],
                state.velocities[node] - state.velocities[other]))
    for j in range(model.total_breakable):
        node = int(model.break_node[j])
        if node not in handle or state.broken[j]:
            continue
        absorb(node, spring_damper_force(
            model.break_k[j], model.break_c[j], model.break_len0[j],
            state.positions[node] - model.anchors[j],
            state.velocities[node]))
    if tare is not None:
        force = force - tare[0]
        torque = torque - tare[1]
    return force, torque


# ---------------------------------------------------------------------------
# Fast window kernel
# ---------------------------------------------------------------------------
# One compiled loop advances a whole command window (settle or action) and
# samples tactile frames in place.  Per substep: tendon overloads detected on
# the entry state snap first (and exert nothing), remaining forces integrate
# free nodes, handle nodes track the commanded path.  A trailing detection
# pass covers the window's final state, so a returned state never carries an
# undetected overload.  integrate_substep wraps the same kernel for a single
# substep, which makes the window exactly the composition of substeps.

@njit(cache=True)
def _run_window(pos, vel, broken, jammed,
                struct_a, struct_b, struct_k, struct_c, struct_len0,
                break_node, break_k, break_c, break_len0, break_thr,
                break_axis, align_min, break_back, fwd_slack,
                anchors, handle_nodes, mass, gravity, dt,
                targets, offsets,
                grip_held, grip_count, tare_f, tare_t, grip_strength,
                frame_every, frames_out):
    n_nodes = pos.shape[0]
    n_struct = struct_a.shape[0]
    n_break = break_node.shape[0]
    n_handle = handle_nodes.shape[0]
    n_sub = targets.shape[0] - 1

    is_handle = np.zeros(n_nodes, dtype=np.bool_)
    for h in range(n_handle):
        is_handle[handle_nodes[h]] = True

    forces = np.zeros((n_nodes, 3))
    new_breaks = 0
    success_sub = 0
    grip_lost_sub = 0
    n_broken = 0
    for j in range(n_break):
        if broken[j]:
            n_broken += 1

    for step in range(1, n_sub + 2):
        trailing = step == n_sub + 1

        # Breakable tendons: detect overloads on the current state first; a
        # snapping tendon exerts no force from this substep on.
        for j in range(n_break):
            if broken[j]:
                continue
            node = break_node[j]
            dx = pos[node, 0] - anchors[j, 0]
            dy = pos[node, 1] - anchors[j, 1]
            dz = pos[node, 2] - anchors[j, 2]
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            if length < 1e-12:
                continue
            ux = dx / length
            uy = dy / length
            uz = dz / length
            rel = vel[node, 0] * ux + vel[node, 1] * uy + vel[node, 2] * uz
            axial = break_k[j] * (length - break_len0[j]) + break_c[j] * rel
            # Directional release: only the tension component along the
            # release axis opens the hook; well off axis it jams for as
            # long as the stretch stays there.  Taut stretch leaning
            # forward past the throat's slack seats the hook shut for
            # good -- no later pull releases it.
            align = ux * break_axis[j, 0] + uy * break_axis[j, 1] \
                + uz * break_axis[j, 2]
            bk = ux * break_back[j, 0] + uy * break_back[j, 1] \
                + uz * break_back[j, 2]
            if axial > 0.0 and bk < -fwd_slack:
                jammed[j] = True
            if not jammed[j] and align > align_min and bk > -fwd_slack \
                    and axial * align > break_thr[j]:
                broken[j] = True
                new_breaks += 1
                n_broken += 1
            elif not trailing:
                forces[node, 0] -= axial * ux
                forces[node, 1] -= axial * uy
                forces[node, 2] -= axial * uz
        if n_broken == n_break and success_sub == 0:
            success_sub = min(step, n_sub)
        if trailing:
            break

        # Structural tendons: cords that never break and act only while taut.
        for m in range(n_struct):
            a = struct_a[m]
            b = struct_b[m]
            dx = pos[a, 0] - pos[b, 0]
            dy = pos[a, 1] - pos[b, 1]
            dz = pos[a, 2] - pos[b, 2]
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            if length <= struct_len0[m]:
                continue
            ux = dx / length
            uy = dy / length
            uz = dz / length
            rel = (vel[a, 0] - vel[b, 0]) * ux + (vel[a, 1] - vel[b, 1]) * uy \
                + (vel[a, 2] - vel[b, 2]) * uz
            axial = struct_k[m] * (length - struct_len0[m]) + struct_c[m] * rel
            if axial <= 0.0:
                continue
            forces[a, 0] -= axial * ux
            forces[a, 1] -= axial * uy
            forces[a, 2] -= axial * uz
            forces[b, 0] += axial * ux
            forces[b, 1] += axial * uy
            forces[b, 2] += axial * uz

        # Sensed wrench at the pre-step state; tared, zero once grip is lost.
        sf0 = sf1 = sf2 = 0.0
        st0 = st1 = st2 = 0.0
        if grip_held != 0:
            gx = targets[step - 1, 0]
            gy = targets[step - 1, 1]
            gz = targets[step - 1, 2]
            for h in range(n_handle):
                node = handle_nodes[h]
                fx = forces[node, 0]
                fy = forces[node, 1]
                fz = forces[node, 2]
                sf0 -= fx
                sf1 -= fy
                sf2 -= fz
                rx = pos[node, 0] - gx
                ry = pos[node, 1] - gy
                rz = pos[node, 2] - gz
                st0 -= ry * fz - rz * fy
                st1 -= rz * fx - rx * fz
                st2 -= rx * fy - ry * fx
            sf0 -= tare_f[0]
            sf1 -= tare_f[1]
            sf2 -= tare_f[2]
            st0 -= tare_t[0]
            st1 -= tare_t[1]
            st2 -= tare_t[2]
            fmag = np.sqrt(sf0 * sf0 + sf1 * sf1 + sf2 * sf2)
            if fmag > grip_strength:
                grip_count += 1
                if grip_count >= GRIP_FAIL_SUBSTEPS and grip_lost_sub == 0:
                    grip_lost_sub = step
            else:
                grip_count = 0

        if frame_every > 0 and step % frame_every == 0:
            row = step // frame_every - 1
            frames_out[row, 0] = sf0
            frames_out[row, 1] = sf1
            frames_out[row, 2] = sf2
            frames_out[row, 3] = st0
            frames_out[row, 4] = st1
            frames_out[row, 5] = st2

        # Integrate: velocities first, then positions.
        for n in range(n_nodes):
            if is_handle[n] and grip_held != 0:
                forces[n, 0] = 0.0
                forces[n, 1] = 0.0
                forces[n, 2] = 0.0
                continue
            inv_m = 1.0 / mass[n]
            vel[n, 0] += forces[n, 0] * inv_m * dt
            vel[n, 1] += forces[n, 1] * inv_m * dt
            vel[n, 2] += (forces[n, 2] * inv_m - gravity) * dt
            pos[n, 0] += vel[n, 0] * dt
            pos[n, 1] += vel[n, 1] * dt
            pos[n, 2] += vel[n, 2] * dt
            forces[n, 0] = 0.0
            forces[n, 1] = 0.0
            forces[n, 2] = 0.0
        if grip_held != 0:
            for h in range(n_handle):
                node = handle_nodes[h]
                nx = targets[step, 0] + offsets[h, 0]
                ny = targets[step, 1] + offsets[h, 1]
                nz = targets[step, 2] + offsets[h, 2]
                vel[node, 0] = (nx - pos[node, 0]) / dt
                vel[node, 1] = (ny - pos[node, 1]) / dt
                vel[node, 2] = (nz - pos[node, 2]) / dt
                pos[node, 0] = nx
                pos[node, 1] = ny
                pos[node, 2] = nz

        # A detected loss frees the handle from the next substep on.
        if grip_lost_sub != 0 and grip_lost_sub == step:
            grip_held = 0

    return grip_held, grip_count, success_sub, grip_lost_sub, new_breaks


@dataclass
class WindowResult:
    """Outcome bookkeeping for one command window."""
    frames: np.ndarray             # [n_frames, 6] sensed (force, torque)
    new_breaks: int
    success_sub: int               # 1-based substep of full detachment, 0 if none
    grip_lost_sub: int             # 1-based substep of grip loss, 0 if none


def run_window(state: SimState, model: VelcroModel, cfg: PhysicsConfig,
               targets: np.ndarray, tare_force: np.ndarray,
               tare_torque: np.ndarray, frame_every: int = 10) -> tuple[SimState, WindowResult]:
    """Advance a whole command window.  targets[0] is the current gripper
    position; targets[1..] are per-substep commanded positions."""
    if not np.allclose(targets[0], state.gripper_pos, atol=1e-12):
        raise ValueError("window targets must start at the current gripper position")
    nxt = state.copy()
    n_sub = targets.shape[0] - 1
    n_frames = n_sub // frame_every if frame_every > 0 else 0
    frames = np.zeros((n_frames, 6))
    held, count, success_sub, lost_sub, new_breaks = _run_window(
        nxt.positions, nxt.velocities, nxt.broken, nxt.jammed,
        model.struct_a, model.struct_b, model.struct_k, model.struct_c,
        model.struct_len0,
        model.break_node, model.break_k, model.break_c, model.break_len0,
        model.break_threshold,
        model_release_axes(model), RELEASE_ALIGN_MIN,
        model_back_tangents(model), RELEASE_FORWARD_SLACK,
        model.anchors, model.handle_nodes, model.node_mass,
        cfg.gravity, cfg.dt_sub,
        np.ascontiguousarray(targets, dtype=float), handle_offsets(model),
        1 if state.grip_held else 0, state.grip_over_count,
        np.asarray(tare_force, dtype=float), np.asarray(tare_torque, dtype=float),
        cfg.grip_strength, frame_every, frames,
    )
    if not np.all(np.isfinite(nxt.positions)) or not np.all(np.isfinite(nxt.velocities)):
        raise SimulationDiverged("non-finite node state")
    nxt.gripper_pos = targets[-1].copy()
    nxt.clock = state.clock + n_sub * cfg.dt_sub
    nxt.grip_held = bool(held)
    nxt.grip_over_count = int(count)
    return nxt, WindowResult(frames=frames, new_breaks=int(new_breaks),
                             success_sub=int(success_sub), grip_lost_sub=int(lost_sub))


def integrate_substep(state: SimState, model: VelcroModel, cfg: PhysicsConfig,
                      gripper_target: np.ndarray,
                      tare: tuple[np.ndarray, np.ndarray] | None = None) -> SimState:
    """Advance exactly one substep toward gripper_target: accumulate forces,
    velocity then position update (handle pinned while held), snap rule on
    the new state, grip rule, clock forward by dt_sub."""
    targets = np.stack([state.gripper_pos, np.asarray(gripper_target, dtype=float)])
    tare_f = np.zeros(3) if tare is None else np.asarray(tare[0], dtype=float)
    tare_t = np.zeros(3) if tare is None else np.asarray(tare[1], dtype=float)
    nxt, _ = run_window(state, model, cfg, targets, tare_f, tare_t, frame_every=0)
    return nxt
