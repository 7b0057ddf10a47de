"""
Differentiable gravitational N-body engine.

Responsibilities:
- Semi-implicit Euler integration of K equal-mass bodies, substepped per frame.
- Optional linear pull towards the camera focus point and x/y position limits.
- Pure torch functions: differentiable w.r.t. positions and velocities, batched over
  any leading dimensions, with an optional ``active`` mask that freezes padded bodies
  and removes them from the pairwise forces.

The same code drives data generation (float64) and the explicit dynamics inside the
prediction model (training dtype).
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Iterator, Optional, Tuple

import torch

from core.errors import ConfigValidationError, InvalidStateError, SingularityError

logger = logging.getLogger(__name__)

FRAME_INTERVAL = 0.25  # seconds, four frames per second
DEFAULT_SUBSTEPS = 60
# state for slots without an object: parked away from the scene, excluded from forces
PARK_STATE: Tuple[float, ...] = (0.0, 0.0, 10.0, 0.0, 0.0, 0.0)


# ------------------------------
# Data structures
# ------------------------------
@dataclass(frozen=True)
class EngineParams:
    grav_const: float = 1.0
    mass: float = 1.0
    sim_dt: float = FRAME_INTERVAL / DEFAULT_SUBSTEPS
    substeps: int = DEFAULT_SUBSTEPS
    softening_eps: float = 1e-4
    focus_point: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    focus_strength: float = 0.05
    xy_limit: float = 4.0
    enable_focus_pull: bool = True
    enable_xy_limit: bool = True
    dt_factor: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "focus_point", tuple(float(v) for v in self.focus_point))
        self.validate()

    def validate(self) -> None:
        if not self.grav_const > 0:
            raise ConfigValidationError("engine.grav_const", "must be > 0", self.grav_const)
        if not self.mass > 0:
            raise ConfigValidationError("engine.mass", "must be > 0", self.mass)
        if not self.sim_dt > 0:
            raise ConfigValidationError("engine.sim_dt", "must be > 0", self.sim_dt)
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ConfigValidationError("engine.substeps", "must be an integer >= 1", self.substeps)
        if self.softening_eps < 0:
            raise ConfigValidationError("engine.softening_eps", "must be >= 0", self.softening_eps)
        if len(self.focus_point) != 3:
            raise ConfigValidationError("engine.focus_point", "must have 3 components", self.focus_point)
        if self.focus_strength < 0:
            raise ConfigValidationError("engine.focus_strength", "must be >= 0", self.focus_strength)
        if not self.xy_limit > 0:
            raise ConfigValidationError("engine.xy_limit", "must be > 0", self.xy_limit)
        if not self.dt_factor > 0:
            raise ConfigValidationError("engine.dt_factor", "must be > 0", self.dt_factor)

    @property
    def step_dt(self) -> float:
        return self.sim_dt * self.dt_factor

    @property
    def frame_interval(self) -> float:
        return self.step_dt * self.substeps

    def with_overrides(self, **overrides: Any) -> "EngineParams":
        return replace(self, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["focus_point"] = list(self.focus_point)
        return payload


@dataclass(frozen=True)
class BodyState:
    """Positions and velocities, shape ``[..., K, 3]`` each."""

    pos: torch.Tensor
    vel: torch.Tensor

    def validate(self) -> None:
        if self.pos.shape != self.vel.shape:
            raise InvalidStateError(
                "pos and vel shapes differ", pos=list(self.pos.shape), vel=list(self.vel.shape)
            )
        _check_positions(self.pos)
        if not bool(torch.isfinite(self.vel).all()):
            raise InvalidStateError("velocity has non-finite entries")

    @property
    def num_bodies(self) -> int:
        return self.pos.shape[-2]

    def to_tensor(self) -> torch.Tensor:
        """Concatenate to ``[..., K, 6]`` (pos then vel)."""
        return torch.cat([self.pos, self.vel], dim=-1)

    @classmethod
    def from_tensor(cls, state: torch.Tensor) -> "BodyState":
        if state.shape[-1] != 6:
            raise InvalidStateError("state must have 6 trailing components", shape=list(state.shape))
        return cls(pos=state[..., :3], vel=state[..., 3:])


# ------------------------------
# Instrumentation
# ------------------------------
class EngineStepCounter:
    def __init__(self) -> None:
        self.count = 0


_STEP_COUNTER: ContextVar[Optional[EngineStepCounter]] = ContextVar("engine_step_counter", default=None)


@contextmanager
def count_engine_steps() -> Iterator[EngineStepCounter]:
    """Count ``dynamics_step`` calls made inside the block."""
    counter = EngineStepCounter()
    token = _STEP_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _STEP_COUNTER.reset(token)


# ------------------------------
# Core dynamics
# ------------------------------
def _check_positions(pos: torch.Tensor) -> None:
    if pos.dim() < 2 or pos.shape[-1] != 3:
        raise InvalidStateError("positions must have shape [..., K, 3]", shape=list(pos.shape))
    if pos.shape[-2] < 2:
        raise InvalidStateError("need at least two bodies", num_bodies=pos.shape[-2])
    if not bool(torch.isfinite(pos).all()):
        raise InvalidStateError("position has non-finite entries")


def pairwise_deltas(pos: torch.Tensor) -> torch.Tensor:
    """Entry ``[..., i, j, :]`` is ``pos[j] - pos[i]``."""
    _check_positions(pos)
    return pos.unsqueeze(-3) - pos.unsqueeze(-2)


def _interaction_mask(pos: torch.Tensor, active: Optional[torch.Tensor]) -> torch.Tensor:
    k = pos.shape[-2]
    mask = ~torch.eye(k, dtype=torch.bool, device=pos.device)
    if active is not None:
        active = active.to(torch.bool)
        mask = mask & active.unsqueeze(-1) & active.unsqueeze(-2)
    return mask


def gravitational_accel(
    pos: torch.Tensor,
    params: EngineParams,
    active: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    _check_positions(pos)
    return _accel(pos, params, active)


def _accel(pos: torch.Tensor, params: EngineParams, active: Optional[torch.Tensor]) -> torch.Tensor:
    delta = pos.unsqueeze(-3) - pos.unsqueeze(-2)
    r2 = delta.pow(2).sum(dim=-1)
    mask = _interaction_mask(pos, active).expand_as(r2)

    if params.softening_eps == 0 and bool(((r2 == 0) & mask).any()):
        raise SingularityError("coincident bodies with softening_eps = 0")

    # diagonal masked before the power so its gradient stays finite
    denom = torch.where(mask, r2 + params.softening_eps, torch.ones_like(r2))
    inv_r3 = torch.where(mask, denom.pow(-1.5), torch.zeros_like(r2))
    accel = params.grav_const * params.mass * (delta * inv_r3.unsqueeze(-1)).sum(dim=-2)

    if params.enable_focus_pull and params.focus_strength > 0:
        focus = torch.as_tensor(params.focus_point, dtype=pos.dtype, device=pos.device)
        accel = accel + params.focus_strength * (focus - pos)
    return accel


def _limit_xy(pos: torch.Tensor, vel: torch.Tensor, limit: float) -> Tuple[torch.Tensor, torch.Tensor]:
    xy = pos[..., :2]
    hit = xy.abs() > limit
    xy = xy.clamp(-limit, limit)
    vxy = torch.where(hit, torch.zeros_like(vel[..., :2]), vel[..., :2])
    return torch.cat([xy, pos[..., 2:]], dim=-1), torch.cat([vxy, vel[..., 2:]], dim=-1)


def dynamics_step(
    state: BodyState,
    params: EngineParams,
    active: Optional[torch.Tensor] = None,
) -> BodyState:
    """Advance one frame: ``substeps`` semi-implicit Euler updates, velocity first."""
    state.validate()
    dt = params.step_dt
    pos, vel = state.pos, state.vel
    frozen = None if active is None else ~active.to(torch.bool).unsqueeze(-1)

    for _ in range(params.substeps):
        accel = _accel(pos, params, active)
        new_vel = vel + dt * accel
        new_pos = pos + dt * new_vel
        if params.enable_xy_limit:
            new_pos, new_vel = _limit_xy(new_pos, new_vel, params.xy_limit)
        if frozen is not None:
            new_pos = torch.where(frozen, pos, new_pos)
            new_vel = torch.where(frozen, vel, new_vel)
        pos, vel = new_pos, new_vel

    counter = _STEP_COUNTER.get()
    if counter is not None:
        counter.count += 1
    return BodyState(pos=pos, vel=vel)


def rollout_states(
    state0: BodyState,
    params: EngineParams,
    num_frames: int,
    active: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Trajectory ``[..., T, K, 6]``; entry 0 is one step after ``state0``."""
    if num_frames < 1:
        raise InvalidStateError("num_frames must be >= 1", num_frames=num_frames)
    frames = []
    state = state0
    for _ in range(num_frames):
        state = dynamics_step(state, params, active)
        frames.append(state.to_tensor())
    return torch.stack(frames, dim=-3)
