import math

import numpy as np
import pytest
import scipy.stats
import torch

from core.errors import BehindCameraError, ConfigValidationError, GenerationError
from core.physics import BodyState, EngineParams, rollout_states
from core.scene import (
    Camera,
    GeneratorParams,
    apparent_radius,
    bboxes_from_segmentation,
    compute_flow,
    generate_sample,
    project,
    render_frame,
    replay_states,
    sample_initial_conditions,
)


def _camera(size=64, dist=12.0, fov=40.0) -> Camera:
    return Camera.from_params(GeneratorParams(height=size, width=size, camera_dist=dist, fov_deg=fov))


def projection_matrix(camera: Camera) -> np.ndarray:
    """3x4 pinhole matrix: intrinsics (y flipped to point down) times the look-down-z extrinsics."""
    cx, cy = camera.center
    intrinsics = np.array([[camera.focal, 0.0, cx], [0.0, -camera.focal, cy], [0.0, 0.0, 1.0]])
    extrinsics = np.array(
        [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, -1.0, camera.distance]]
    )
    return intrinsics @ extrinsics


def test_project_matches_homogeneous_matrix():
    camera = _camera()
    rng = np.random.default_rng(0)
    points = rng.uniform(-3, 3, size=(50, 3))
    px, depth = project(points, camera)
    homogeneous = np.c_[points, np.ones(len(points))] @ projection_matrix(camera).T
    np.testing.assert_allclose(px, homogeneous[:, :2] / homogeneous[:, 2:], rtol=0, atol=1e-9)
    np.testing.assert_allclose(depth, homogeneous[:, 2], rtol=0, atol=1e-12)


def test_origin_projects_to_center():
    camera = _camera(size=32)
    px, depth = project(np.zeros(3), camera)
    assert tuple(px) == (16.0, 16.0)
    assert depth == pytest.approx(12.0)


def test_point_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project(np.array([[0.0, 0.0, 12.0]]), _camera())


def test_centered_disc_area():
    camera = _camera()
    radius = np.array([1.5])
    frame, seg = render_frame(np.zeros((1, 3)), radius, np.array([[1.0, 0.0, 0.0]]), camera)
    r_px = apparent_radius(radius, np.array([camera.distance]), camera)[0]
    count = int((seg == 1).sum())
    assert abs(count - math.pi * r_px**2) / (math.pi * r_px**2) < 0.05
    assert frame.dtype == np.uint8 and frame.shape == (64, 64, 3)
    assert frame[seg == 0].max() == 0


def test_nearer_disc_wins_overlap():
    camera = _camera()
    pos = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    _, seg = render_frame(pos, np.array([1.0, 1.0]), np.ones((2, 3)), camera)
    assert seg[32, 32] == 2


def test_flow_equals_projected_displacement():
    camera = _camera()
    pos_t = np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 0.5]])
    pos_next = pos_t + np.array([[0.1, -0.05, 0.0], [-0.2, 0.0, 0.3]])
    _, seg = render_frame(pos_t, np.array([0.8, 0.8]), np.ones((2, 3)), camera)
    flow = compute_flow(pos_t, pos_next, seg, camera)
    now, _ = project(pos_t, camera)
    nxt, _ = project(pos_next, camera)
    for k in range(2):
        pixels = flow[seg == k + 1]
        assert pixels.size
        np.testing.assert_allclose(pixels, np.broadcast_to(nxt[k] - now[k], pixels.shape), rtol=0, atol=1e-6)
    assert not flow[seg == 0].any()


def test_bboxes_from_segmentation():
    seg = np.zeros((8, 8), dtype=np.uint8)
    seg[2:4, 1:5] = 1
    seg[6, 7] = 2
    boxes, present = bboxes_from_segmentation(seg, 3)
    np.testing.assert_allclose(boxes[0], [1 / 8, 2 / 8, 5 / 8, 4 / 8])
    np.testing.assert_allclose(boxes[1], [7 / 8, 6 / 8, 1.0, 7 / 8])
    assert present.tolist() == [True, True, False]


def test_generate_sample_shapes_and_visibility(generator_params):
    sample = generate_sample(3, generator_params)
    t, h, w = generator_params.num_frames, generator_params.height, generator_params.width
    k = sample.num_objects
    assert generator_params.k_min <= k <= generator_params.k_max
    assert sample.frames.shape == (t, h, w, 3) and sample.frames.dtype == np.uint8
    assert sample.flow.shape == (t, h, w, 2) and sample.flow.dtype == np.float32
    assert sample.seg.shape == (t, h, w)
    assert sample.states.shape == (t, k, 6) and sample.states.dtype == np.float64
    assert sample.bboxes.shape == (k, 4)
    assert set(range(1, k + 1)) <= set(np.unique(sample.seg[0]).tolist())
    assert not sample.flow[-1].any()


def test_generate_sample_is_deterministic(generator_params):
    a = generate_sample(5, generator_params)
    b = generate_sample(5, generator_params)
    for name, arr in a.arrays().items():
        assert arr.tobytes() == getattr(b, name).tobytes(), name
    other = generate_sample(6, generator_params)
    assert other.states.tobytes() != a.states.tobytes()


def test_replay_reproduces_stored_states(generator_params):
    sample = generate_sample(1, generator_params)
    replay = replay_states(sample, generator_params)
    assert np.max(np.abs(replay - sample.states)) < 1e-5


def test_doubled_time_step_leaves_the_stored_trajectory(generator_params):
    sample = generate_sample(1, generator_params)
    state = BodyState.from_tensor(torch.as_tensor(sample.states[0]))
    wrong = rollout_states(state, generator_params.engine.with_overrides(dt_factor=2.0), 8).numpy()
    assert np.max(np.abs(wrong - sample.states[1:9])) > 0.01


def test_object_count_is_uniform():
    params = GeneratorParams()
    rng = np.random.default_rng(0)
    counts = np.zeros(params.k_max + 1, dtype=np.int64)
    for _ in range(1500):
        state, radii, colors = sample_initial_conditions(rng, params)
        k = state.pos.shape[0]
        assert len(radii) == len(colors) == k
        counts[k] += 1
    observed = counts[params.k_min :]
    assert observed.sum() == 1500
    assert scipy.stats.chisquare(observed).pvalue > 1e-3


def test_impossible_spawn_region_raises():
    params = GeneratorParams(
        num_samples=1, num_frames=4, height=16, width=16, k_min=4, k_max=4,
        spawn_region=(0.05, 0.05, 0.05), engine=EngineParams(substeps=2),
    )
    with pytest.raises(GenerationError):
        generate_sample(0, params)


@pytest.mark.parametrize(
    "overrides,key",
    [
        ({"k_min": 1}, "generator.k_min"),
        ({"k_min": 4, "k_max": 3}, "generator.k_max"),
        ({"num_frames": 1}, "generator.num_frames"),
        ({"camera_dist": 1.0}, "generator.camera_dist"),
    ],
)
def test_generator_validation(overrides, key):
    with pytest.raises(ConfigValidationError) as info:
        GeneratorParams(**overrides)
    assert info.value.key == key
