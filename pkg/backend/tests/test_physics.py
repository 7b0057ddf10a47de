import numpy as np
import pytest
import torch

from core.errors import ConfigValidationError, InvalidStateError, SingularityError
from core.physics import (
    BodyState,
    EngineParams,
    count_engine_steps,
    dynamics_step,
    gravitational_accel,
    pairwise_deltas,
    rollout_states,
)


def reference_step(pos, vel, p: EngineParams):
    """Straight loop translation of the engine, one frame."""
    pos, vel = pos.copy(), vel.copy()
    k = pos.shape[0]
    dt = p.sim_dt * p.dt_factor
    focus = np.asarray(p.focus_point)
    for _ in range(p.substeps):
        acc = np.zeros_like(pos)
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                d = pos[j] - pos[i]
                r2 = d @ d + p.softening_eps
                acc[i] += p.grav_const * p.mass * d / r2**1.5
            if p.enable_focus_pull:
                acc[i] += p.focus_strength * (focus - pos[i])
        vel = vel + dt * acc
        pos = pos + dt * vel
        if p.enable_xy_limit:
            for i in range(k):
                for c in range(2):
                    if abs(pos[i, c]) > p.xy_limit:
                        pos[i, c] = np.clip(pos[i, c], -p.xy_limit, p.xy_limit)
                        vel[i, c] = 0.0
    return pos, vel


def _state(pos, vel) -> BodyState:
    return BodyState(torch.as_tensor(pos, dtype=torch.float64), torch.as_tensor(vel, dtype=torch.float64))


def test_pairwise_deltas_matches_loop():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(5, 3))
    out = pairwise_deltas(torch.as_tensor(pos)).numpy()
    for i in range(5):
        for j in range(5):
            assert np.array_equal(out[i, j], pos[j] - pos[i])


def test_accel_matches_pairwise_sum():
    rng = np.random.default_rng(2)
    pos = rng.uniform(-2, 2, size=(4, 3))
    params = EngineParams(grav_const=1.3, mass=0.7, enable_focus_pull=False)
    got = gravitational_accel(torch.as_tensor(pos), params).numpy()
    expected = np.zeros_like(pos)
    for i in range(4):
        for j in range(4):
            if i != j:
                d = pos[j] - pos[i]
                expected[i] += 1.3 * 0.7 * d / (d @ d + params.softening_eps) ** 1.5
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_single_substep_closed_form():
    params = EngineParams(substeps=1, sim_dt=0.1, enable_focus_pull=False, enable_xy_limit=False)
    pos = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
    vel = torch.tensor([[0.0, 0.5, 0.0], [0.0, -0.5, 0.0]], dtype=torch.float64)
    a0 = gravitational_accel(pos, params)
    out = dynamics_step(BodyState(pos, vel), params)
    vel1 = vel + 0.1 * a0
    torch.testing.assert_close(out.vel, vel1, rtol=0, atol=1e-15)
    torch.testing.assert_close(out.pos, pos + 0.1 * vel1, rtol=0, atol=1e-15)


@pytest.mark.parametrize("case", range(100))
def test_dynamics_step_matches_reference(case):
    rng = np.random.default_rng(100 + case)
    k = int(rng.integers(2, 6))
    params = EngineParams(
        grav_const=float(rng.uniform(0.5, 2.0)),
        mass=float(rng.uniform(0.5, 2.0)),
        sim_dt=float(rng.uniform(0.001, 0.01)),
        substeps=int(rng.integers(1, 20)),
        focus_point=tuple(rng.uniform(-0.5, 0.5, size=3)),
        focus_strength=float(rng.uniform(0.0, 0.2)),
        xy_limit=float(rng.uniform(1.5, 4.0)),
        enable_focus_pull=bool(case % 2),
        enable_xy_limit=bool((case // 2) % 2),
    )
    pos = rng.uniform(-3, 3, size=(k, 3))
    vel = rng.uniform(-1, 1, size=(k, 3))
    out = dynamics_step(_state(pos, vel), params)
    ref_pos, ref_vel = reference_step(pos, vel, params)
    assert np.max(np.abs(out.pos.numpy() - ref_pos)) < 1e-9
    assert np.max(np.abs(out.vel.numpy() - ref_vel)) < 1e-9


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    params = EngineParams(substeps=3, sim_dt=0.01, enable_xy_limit=False)
    x0 = torch.as_tensor(
        np.concatenate([np.array([[-1.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.0, 1.5, 0.3]]), rng.uniform(-0.5, 0.5, (3, 3))], axis=1),
        dtype=torch.float64,
    )

    def f(x):
        return dynamics_step(BodyState.from_tensor(x), params).to_tensor()

    jac = torch.autograd.functional.jacobian(f, x0)  # [3, 6, 3, 6]
    eps = 1e-5
    fd = torch.zeros_like(jac)
    for i in range(3):
        for c in range(6):
            step = torch.zeros_like(x0)
            step[i, c] = eps
            fd[..., i, c] = (f(x0 + step) - f(x0 - step)) / (2 * eps)
    torch.testing.assert_close(jac, fd, rtol=1e-4, atol=1e-8)


def test_momentum_conserved_without_pull_and_limits():
    rng = np.random.default_rng(3)
    params = EngineParams(enable_focus_pull=False, enable_xy_limit=False)
    assert params.substeps == 60
    state = _state(rng.uniform(-2, 2, (4, 3)), rng.uniform(-0.5, 0.5, (4, 3)) + 0.2)
    traj = rollout_states(state, params, 32)
    p0 = params.mass * state.vel.sum(dim=0)
    momentum = params.mass * traj[..., 3:].sum(dim=-2)
    drift = (momentum - p0).norm(dim=-1) / p0.norm()
    assert drift.max().item() < 1e-8


def test_translation_equivariance():
    rng = np.random.default_rng(8)
    params = EngineParams(enable_focus_pull=False, enable_xy_limit=False)
    pos, vel = rng.uniform(-2, 2, (4, 3)), rng.uniform(-0.5, 0.5, (4, 3))
    offset = np.array([3.0, -2.0, 1.5])
    base = dynamics_step(_state(pos, vel), params)
    shifted = dynamics_step(_state(pos + offset, vel), params)
    assert (shifted.pos - torch.as_tensor(offset) - base.pos).abs().max().item() < 1e-10
    assert (shifted.vel - base.vel).abs().max().item() < 1e-10


def test_step_is_pure():
    rng = np.random.default_rng(9)
    pos = torch.as_tensor(rng.uniform(-2, 2, (4, 3)))
    vel = torch.as_tensor(rng.uniform(-0.5, 0.5, (4, 3)))
    before = pos.clone(), vel.clone()
    first = dynamics_step(BodyState(pos, vel), EngineParams())
    second = dynamics_step(BodyState(pos, vel), EngineParams())
    assert torch.equal(pos, before[0]) and torch.equal(vel, before[1])
    assert torch.equal(first.pos, second.pos) and torch.equal(first.vel, second.vel)


def test_xy_limit_clamps_and_stops():
    params = EngineParams(substeps=1, sim_dt=1.0, xy_limit=1.0, enable_focus_pull=False, grav_const=1e-9)
    pos = torch.tensor([[0.9, 0.0, 0.0], [-5.0, -5.0, 5.0]], dtype=torch.float64)
    vel = torch.tensor([[2.0, 0.1, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    out = dynamics_step(BodyState(pos, vel), params)
    assert out.pos[0, 0] == pytest.approx(1.0)
    assert out.vel[0, 0] == 0.0
    assert out.vel[0, 1] != 0.0
    assert out.pos[1, 2] == pytest.approx(5.0)


def test_inactive_bodies_frozen_and_forceless():
    rng = np.random.default_rng(4)
    pos = rng.uniform(-2, 2, (3, 3))
    vel = rng.uniform(-0.5, 0.5, (3, 3))
    padded = _state(np.vstack([pos, [[0.5, 0.5, 0.5]]]), np.vstack([vel, [[0.1, 0.1, 0.1]]]))
    active = torch.tensor([True, True, True, False])
    params = EngineParams()
    masked = dynamics_step(padded, params, active)
    alone = dynamics_step(_state(pos, vel), params)
    torch.testing.assert_close(masked.pos[:3], alone.pos, rtol=0, atol=1e-12)
    assert torch.equal(masked.pos[3], padded.pos[3])
    assert torch.equal(masked.vel[3], padded.vel[3])


def test_rollout_shape_and_first_entry():
    state = _state([[0.0, 0, 0], [1.0, 0, 0]], [[0.0, 0.3, 0], [0.0, -0.3, 0]])
    params = EngineParams(substeps=5)
    traj = rollout_states(state, params, 4)
    assert traj.shape == (4, 2, 6)
    torch.testing.assert_close(traj[0], dynamics_step(state, params).to_tensor(), rtol=0, atol=0)


def test_batched_states():
    rng = np.random.default_rng(5)
    pos = torch.as_tensor(rng.uniform(-2, 2, (2, 3, 3)))
    vel = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 3)))
    params = EngineParams(substeps=4)
    batched = dynamics_step(BodyState(pos, vel), params)
    for b in range(2):
        single = dynamics_step(BodyState(pos[b], vel[b]), params)
        torch.testing.assert_close(batched.pos[b], single.pos, rtol=0, atol=1e-12)


def test_step_counter():
    state = _state([[0.0, 0, 0], [1.0, 0, 0]], [[0.0, 0, 0], [0.0, 0, 0]])
    with count_engine_steps() as counter:
        rollout_states(state, EngineParams(substeps=2), 5)
        dynamics_step(state, EngineParams(substeps=2))
    assert counter.count == 6
    dynamics_step(state, EngineParams(substeps=2))
    assert counter.count == 6


def test_errors():
    params = EngineParams(softening_eps=0.0)
    same = _state([[0.0, 0, 0], [0.0, 0, 0]], [[0.0, 0, 0], [0.0, 0, 0]])
    with pytest.raises(SingularityError):
        dynamics_step(same, params)
    with pytest.raises(InvalidStateError):
        dynamics_step(_state([[0.0, 0, 0]], [[0.0, 0, 0]]), EngineParams())
    with pytest.raises(InvalidStateError):
        dynamics_step(_state([[float("nan"), 0, 0], [1.0, 0, 0]], [[0.0, 0, 0], [0.0, 0, 0]]), EngineParams())
    with pytest.raises(InvalidStateError):
        rollout_states(same, EngineParams(), 0)


@pytest.mark.parametrize("field,value", [("substeps", 0), ("mass", 0.0), ("sim_dt", -1.0), ("dt_factor", 0.0)])
def test_params_validation(field, value):
    with pytest.raises(ConfigValidationError) as info:
        EngineParams(**{field: value})
    assert info.value.key == f"engine.{field}"


def test_dt_factor_scales_interval():
    params = EngineParams().with_overrides(dt_factor=2.0)
    assert params.frame_interval == pytest.approx(0.5)
    assert EngineParams().frame_interval == pytest.approx(0.25)
