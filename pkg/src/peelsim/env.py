"""Tactile peeling environment: discrete gripper moves over a hidden strip.

Each action displaces the gripper a fixed distance along one world axis,
following a minimum-jerk quintic profile over one second of simulated time.
The agent never sees the strip itself -- only its own pose and the 30-frame
force/torque trace each move produces.  Reward is the number of tendons
broken during the move; an episode ends when the strip is fully detached
(Success), the sensed load stays over the grip limit (GripLost), or 200
moves pass (TimeLimit).

reset() quenches the freshly built model to rest (velocity-zeroed relax
windows with grip monitoring off), tares the wrench sensor there, then
records one stationary 1-second window as the initial observation -- so a
settled strip reads zero force no matter how it hangs.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .geometry import GeometryParams, MeshConfig, VelcroModel, build_model
from .physics import (
    PhysicsConfig,
    SimState,
    SimulationDiverged,
    initial_state,
    run_window,
    sense_wrench,
)

POSE_SIZE = 6
FRAMES_PER_STEP = 30
OBS_SIZE = POSE_SIZE + FRAMES_PER_STEP * 6   # 186


class Action(IntEnum):
    """Six fixed-size displacements along the world axes."""
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    FORWARD = 4
    BACKWARD = 5


# Row i is the unit axis of Action(i).  Forward is +x (deeper into the
# attached strip on the identity scene), left is +y, up is +z.
ACTION_AXES = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
])


class Outcome(Enum):
    RUNNING = "Running"
    SUCCESS = "Success"
    GRIP_LOST = "GripLost"
    TIME_LIMIT = "TimeLimit"


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray        # [186]
    reward: int                    # tendons broken this step
    done: bool
    outcome: Outcome


@dataclass(frozen=True)
class BoundaryView:
    """Privileged peel-front geometry for the scripted baseline."""
    boundary_position: np.ndarray  # [3] mean anchor of the first live row
    surface_normal: np.ndarray     # [3] unit
    peel_tangent: np.ndarray       # [3] unit, attached region -> peeled region
    completion: float


def quintic_profile(u):
    """Minimum-jerk displacement fraction s(u) = 10u^3 - 15u^4 + 6u^5."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("u must lie in [0, 1]")
    s = 10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5
    return float(s) if s.ndim == 0 else s


class PeelEnv:
    """Action-level environment around the substep simulator.

    One instance is reused across episodes; reset() builds the scene model
    and returns the initial observation.
    """

    def __init__(self, mesh: MeshConfig | None = None,
                 cfg: PhysicsConfig | None = None,
                 delta: float = 0.02, max_steps: int = 200):
        self.mesh = mesh if mesh is not None else MeshConfig()
        self.cfg = cfg if cfg is not None else PhysicsConfig()
        self.delta = float(delta)
        self.max_steps = int(max_steps)
        n_sub = round(1.0 / self.cfg.dt_sub)
        if abs(n_sub * self.cfg.dt_sub - 1.0) > 1e-9 \
                or n_sub % FRAMES_PER_STEP != 0:
            raise ValueError(
                "dt_sub must divide 1 s into a multiple of 30 substeps")
        self.n_sub = n_sub
        self.frame_every = n_sub // FRAMES_PER_STEP
        # Quintic displacement fraction at each substep boundary.
        self._profile = quintic_profile(np.linspace(0.0, 1.0, n_sub + 1))
        self.model: VelcroModel | None = None
        self.state: SimState | None = None
        self.outcome = Outcome.RUNNING
        self.steps = 0
        self._tare = (np.zeros(3), np.zeros(3))

    # -- episode control ----------------------------------------------------

    def reset(self, params: GeometryParams, seed: int = 0,
              pre_broken_rows: int = 0) -> np.ndarray:
        """Build the scene, settle it, and return the first observation.

        pre_broken_rows marks the first k node rows as already peeled before
        settling (used by the analysis sweeps).  seed is accepted for
        interface stability; the environment itself is deterministic.
        """
        del seed
        self.model = build_model(params, self.mesh, **self.cfg.tendon_kwargs())
        self.state = initial_state(self.model)
        if pre_broken_rows:
            k = min(pre_broken_rows * self.mesh.cols,
                    self.model.total_breakable)
            self.state.broken[:k] = True
        self.outcome = Outcome.RUNNING
        self.steps = 0
        self._settle()
        self._tare = sense_wrench(self.state, self.model)
        # The recorded settle window: one stationary second, real grip rule.
        hold = np.repeat(self.state.gripper_pos[None, :], self.n_sub + 1,
                         axis=0)
        self.state, res = run_window(self.state, self.model, self.cfg, hold,
                                     *self._tare, frame_every=self.frame_every)
        return self._observation(res.frames)

    def _settle(self) -> None:
        """Quench transients: short hold windows with velocities zeroed in
        between and grip monitoring off, until node positions stop moving
        (or a fixed cap of windows).  The handle wrench is no quiescence
        signal -- slack cords sense zero while the interior still sags."""
        relax = dataclasses.replace(self.cfg, grip_strength=float("inf"))
        quarter = self.n_sub // 4
        for _ in range(60):
            hold = np.repeat(self.state.gripper_pos[None, :], quarter + 1,
                             axis=0)
            prev = self.state.positions.copy()
            self.state, _ = run_window(self.state, self.model, relax, hold,
                                       np.zeros(3), np.zeros(3),
                                       frame_every=0)
            self.state.velocities[:] = 0.0
            if float(np.max(np.abs(self.state.positions - prev))) < 1e-9:
                break

    @property
    def done(self) -> bool:
        return self.outcome is not Outcome.RUNNING

    def completion_ratio(self) -> float:
        return float(self.state.broken.sum()) / self.model.total_breakable

    # -- stepping -----------------------------------------------------------

    def execute_action(self, action: Action | int) -> StepResult:
        """One discrete move of length delta along the action's world axis."""
        axis = ACTION_AXES[Action(int(action))]
        return self.execute_displacement(self.delta * axis)

    def execute_displacement(self, displacement: np.ndarray) -> StepResult:
        """One move along an arbitrary displacement vector (baselines and
        sweeps use this; the discrete action set is a special case)."""
        if self.done:
            raise RuntimeError("episode is done; call reset() first")
        disp = np.asarray(displacement, dtype=float)
        targets = self.state.gripper_pos[None, :] \
            + self._profile[:, None] * disp[None, :]
        try:
            nxt, res = run_window(self.state, self.model, self.cfg, targets,
                                  *self._tare, frame_every=self.frame_every)
        except SimulationDiverged:
            # Failure semantics; the pre-move state is kept so bookkeeping
            # (reward sums vs broken count) stays consistent.
            self.steps += 1
            self.outcome = Outcome.GRIP_LOST
            obs = self._observation(np.zeros((FRAMES_PER_STEP, 6)))
            return StepResult(obs, 0, True, self.outcome)
        self.state = nxt
        self.steps += 1
        if bool(self.state.broken.all()):
            self.outcome = Outcome.SUCCESS
        elif not self.state.grip_held:
            self.outcome = Outcome.GRIP_LOST
        elif self.steps >= self.max_steps:
            self.outcome = Outcome.TIME_LIMIT
        return StepResult(self._observation(res.frames), int(res.new_breaks),
                          self.done, self.outcome)

    # -- views --------------------------------------------------------------

    def _observation(self, frames: np.ndarray) -> np.ndarray:
        pose = np.concatenate([self.state.gripper_pos,
                               self.state.gripper_euler])
        return np.concatenate([pose, frames.reshape(-1)])

    def full_state_view(self) -> BoundaryView:
        """Peel-front geometry; with everything broken, reports the last
        row's geometry and completion 1."""
        model, mesh = self.model, self.mesh
        row_of = np.arange(model.total_breakable) // mesh.cols
        live = ~self.state.broken
        row = int(row_of[live].min()) if live.any() else mesh.rows - 1
        if row > 0:
            tangent = model.row_anchor_mean[row - 1] \
                - model.row_anchor_mean[row]
            norm = np.linalg.norm(tangent)
            tangent = model.handle_direction if norm < 1e-12 \
                else tangent / norm
        else:
            tangent = model.handle_direction
        return BoundaryView(
            boundary_position=model.row_anchor_mean[row].copy(),
            surface_normal=model.row_normal[row].copy(),
            peel_tangent=np.asarray(tangent, dtype=float).copy(),
            completion=self.completion_ratio(),
        )
