"""
Synthetic gravitating-spheres video generator.

Responsibilities:
- Draw per-sample initial conditions (object count, radii, positions, velocities, colours).
- Simulate trajectories with the physics engine (float64, accurate time step).
- Render shaded discs through a fixed pinhole camera, with segmentation masks,
  per-object rigid optical flow and normalized first-frame bounding boxes.

Every sample is a pure function of ``(params.seed, index)``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from core.errors import BehindCameraError, ConfigValidationError, GenerationError, InvalidStateError
from core.physics import BodyState, EngineParams, rollout_states

logger = logging.getLogger(__name__)

MAX_SPAWN_ATTEMPTS = 1000
MAX_SCENE_ATTEMPTS = 50
SEPARATION_FACTOR = 1.5

DEFAULT_PALETTE: Tuple[Tuple[float, float, float], ...] = (
    (0.90, 0.25, 0.20),
    (0.20, 0.60, 0.90),
    (0.30, 0.80, 0.35),
    (0.95, 0.80, 0.20),
    (0.75, 0.35, 0.85),
    (0.95, 0.55, 0.15),
    (0.25, 0.85, 0.80),
    (0.85, 0.85, 0.85),
)


# ------------------------------
# Data structures
# ------------------------------
@dataclass(frozen=True)
class GeneratorParams:
    num_samples: int = 500
    num_frames: int = 32
    height: int = 64
    width: int = 64
    k_min: int = 3
    k_max: int = 5
    radius_range: Tuple[float, float] = (0.4, 0.8)
    spawn_region: Tuple[float, float, float] = (3.0, 3.0, 1.5)
    speed_scale: float = 0.6
    palette: Tuple[Tuple[float, float, float], ...] = DEFAULT_PALETTE
    shading: float = 0.35
    tint_jitter: float = 0.06
    light_dir: Tuple[float, float, float] = (-0.4, 0.5, 0.77)
    camera_dist: float = 12.0
    fov_deg: float = 40.0
    seed: int = 0
    engine: EngineParams = field(default_factory=EngineParams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "radius_range", tuple(float(v) for v in self.radius_range))
        object.__setattr__(self, "spawn_region", tuple(float(v) for v in self.spawn_region))
        object.__setattr__(self, "light_dir", tuple(float(v) for v in self.light_dir))
        object.__setattr__(self, "palette", tuple(tuple(float(c) for c in rgb) for rgb in self.palette))
        self.validate()

    def validate(self) -> None:
        if self.num_samples < 1:
            raise ConfigValidationError("generator.num_samples", "must be >= 1", self.num_samples)
        if self.num_frames < 2:
            raise ConfigValidationError("generator.num_frames", "must be >= 2", self.num_frames)
        if self.height < 8 or self.width < 8:
            raise ConfigValidationError("generator.height", "image must be at least 8x8", (self.height, self.width))
        if self.k_min < 2:
            raise ConfigValidationError("generator.k_min", "must be >= 2", self.k_min)
        if self.k_max < self.k_min or self.k_max > 254:
            raise ConfigValidationError("generator.k_max", "must be in [k_min, 254]", self.k_max)
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise ConfigValidationError("generator.radius_range", "must satisfy 0 < low <= high", self.radius_range)
        if len(self.spawn_region) != 3 or min(self.spawn_region) <= 0:
            raise ConfigValidationError("generator.spawn_region", "must be 3 positive half-extents", self.spawn_region)
        if self.speed_scale < 0:
            raise ConfigValidationError("generator.speed_scale", "must be >= 0", self.speed_scale)
        if not self.palette or any(len(rgb) != 3 for rgb in self.palette):
            raise ConfigValidationError("generator.palette", "must be a non-empty list of RGB triples")
        if not 0 <= self.shading <= 1:
            raise ConfigValidationError("generator.shading", "must be in [0, 1]", self.shading)
        if self.camera_dist <= max(self.spawn_region[2], 0.0):
            raise ConfigValidationError("generator.camera_dist", "must exceed the spawn depth", self.camera_dist)
        if not 0 < self.fov_deg < 180:
            raise ConfigValidationError("generator.fov_deg", "must be in (0, 180)", self.fov_deg)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["engine"] = self.engine.to_dict()
        return payload


@dataclass(frozen=True)
class Camera:
    """Pinhole at ``(0, 0, distance)`` looking at the origin along -z."""

    width: int
    height: int
    distance: float
    focal: float

    @classmethod
    def from_params(cls, params: GeneratorParams) -> "Camera":
        focal = (params.width / 2.0) / math.tan(math.radians(params.fov_deg) / 2.0)
        return cls(width=params.width, height=params.height, distance=params.camera_dist, focal=focal)

    @property
    def center(self) -> Tuple[float, float]:
        return self.width / 2.0, self.height / 2.0


@dataclass
class SceneSample:
    index: int
    num_objects: int
    frames: np.ndarray  # uint8 [T, H, W, 3]
    flow: np.ndarray  # float32 [T, H, W, 2]
    seg: np.ndarray  # uint8 [T, H, W]
    states: np.ndarray  # float64 [T, K, 6]
    bboxes: np.ndarray  # float64 [K, 4]

    ARRAY_NAMES = ("frames", "flow", "seg", "states", "bboxes")

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_NAMES}


# ------------------------------
# Sampling
# ------------------------------
def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def sample_initial_conditions(
    rng: np.random.Generator, params: GeneratorParams
) -> Tuple[BodyState, np.ndarray, np.ndarray]:
    k = int(rng.integers(params.k_min, params.k_max + 1))
    radii = rng.uniform(params.radius_range[0], params.radius_range[1], size=k)
    half = np.asarray(params.spawn_region, dtype=np.float64)

    positions: List[np.ndarray] = []
    attempts = 0
    while len(positions) < k:
        attempts += 1
        if attempts > MAX_SPAWN_ATTEMPTS:
            raise GenerationError(
                "could not place objects without overlap; spawn_region too small",
                num_objects=k,
                spawn_region=list(params.spawn_region),
            )
        candidate = rng.uniform(-half, half)
        j = len(positions)
        if all(
            np.linalg.norm(candidate - p) >= SEPARATION_FACTOR * (radii[i] + radii[j])
            for i, p in enumerate(positions)
        ):
            positions.append(candidate)

    velocities = rng.uniform(-params.speed_scale, params.speed_scale, size=(k, 3))
    palette = np.asarray(params.palette, dtype=np.float64)
    base = palette[rng.integers(0, len(palette), size=k)]
    colors = np.clip(base + rng.normal(0.0, params.tint_jitter, size=(k, 3)), 0.0, 1.0)

    state = BodyState(
        pos=torch.as_tensor(np.stack(positions), dtype=torch.float64),
        vel=torch.as_tensor(velocities, dtype=torch.float64),
    )
    return state, radii, colors


# ------------------------------
# Camera + rendering
# ------------------------------
def project(pos_world: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``[..., 2]`` (x right, y down) and depth ``[...]``."""
    pos = np.asarray(pos_world, dtype=np.float64)
    depth = camera.distance - pos[..., 2]
    if np.any(depth <= 0):
        raise BehindCameraError("point at or behind the camera plane", min_depth=float(np.min(depth)))
    cx, cy = camera.center
    px = cx + camera.focal * pos[..., 0] / depth
    py = cy - camera.focal * pos[..., 1] / depth
    return np.stack([px, py], axis=-1), depth


def apparent_radius(radius: np.ndarray, depth: np.ndarray, camera: Camera) -> np.ndarray:
    return camera.focal * np.asarray(radius, dtype=np.float64) / depth


def _pixel_grid(camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    return xs + 0.5, ys + 0.5


def render_frame(
    pos: np.ndarray,
    radii: np.ndarray,
    colors: np.ndarray,
    camera: Camera,
    shading: float = 0.35,
    light_dir: Sequence[float] = (-0.4, 0.5, 0.77),
) -> Tuple[np.ndarray, np.ndarray]:
    """Depth-sorted shaded discs on black; seg label k+1 for object k."""
    frame = np.zeros((camera.height, camera.width, 3), dtype=np.float64)
    seg = np.zeros((camera.height, camera.width), dtype=np.uint8)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] == 0:
        return frame.astype(np.uint8), seg

    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    centers, depth = project(pos, camera)
    r_px = apparent_radius(radii, depth, camera)
    xs, ys = _pixel_grid(camera)

    # far to near so nearer discs overwrite
    for k in np.argsort(-depth, kind="stable"):
        du = xs - centers[k, 0]
        dv = ys - centers[k, 1]
        inside = du * du + dv * dv <= r_px[k] * r_px[k]
        if not inside.any():
            continue
        nx = du / r_px[k]
        ny = -dv / r_px[k]
        nz = np.sqrt(np.clip(1.0 - nx * nx - ny * ny, 0.0, None))
        lambert = np.clip(nx * light[0] + ny * light[1] + nz * light[2], 0.0, None)
        intensity = (1.0 - shading) + shading * lambert
        frame[inside] = np.asarray(colors[k])[None, :] * intensity[inside][:, None]
        seg[inside] = k + 1

    frame = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    return frame, seg


def compute_flow(pos_t: np.ndarray, pos_next: np.ndarray, seg_t: np.ndarray, camera: Camera) -> np.ndarray:
    """Rigid per-object flow: projected centre displacement on the object's pixels."""
    flow = np.zeros(seg_t.shape + (2,), dtype=np.float32)
    pos_t = np.asarray(pos_t, dtype=np.float64).reshape(-1, 3)
    if pos_t.shape[0] == 0:
        return flow
    now, _ = project(pos_t, camera)
    nxt, _ = project(np.asarray(pos_next, dtype=np.float64).reshape(-1, 3), camera)
    displacement = nxt - now
    for k in range(pos_t.shape[0]):
        flow[seg_t == k + 1] = displacement[k]
    return flow


def bboxes_from_segmentation(seg: np.ndarray, num_objects: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized tight boxes ``[x_min, y_min, x_max, y_max]`` and a presence mask per label 1..K."""
    height, width = seg.shape
    boxes = np.zeros((num_objects, 4), dtype=np.float64)
    present = np.zeros(num_objects, dtype=bool)
    for k in range(num_objects):
        rows, cols = np.nonzero(seg == k + 1)
        if rows.size == 0:
            continue
        present[k] = True
        boxes[k] = (cols.min() / width, rows.min() / height, (cols.max() + 1) / width, (rows.max() + 1) / height)
    return boxes, present


# ------------------------------
# Samples
# ------------------------------
def simulate(state0: BodyState, params: GeneratorParams) -> np.ndarray:
    """Per-frame states ``[T, K, 6]`` under the accurate engine."""
    engine = params.engine.with_overrides(dt_factor=1.0)
    with torch.no_grad():
        states = rollout_states(state0, engine, params.num_frames)
    return states.cpu().numpy()


def _render_video(
    states: np.ndarray, radii: np.ndarray, colors: np.ndarray, params: GeneratorParams, camera: Camera
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_count = states.shape[0]
    frames = np.zeros((t_count, params.height, params.width, 3), dtype=np.uint8)
    segs = np.zeros((t_count, params.height, params.width), dtype=np.uint8)
    flows = np.zeros((t_count, params.height, params.width, 2), dtype=np.float32)
    for t in range(t_count):
        frames[t], segs[t] = render_frame(states[t, :, :3], radii, colors, camera, params.shading, params.light_dir)
    for t in range(t_count - 1):
        flows[t] = compute_flow(states[t, :, :3], states[t + 1, :, :3], segs[t], camera)
    return frames, segs, flows


def generate_sample(index: int, params: GeneratorParams) -> SceneSample:
    rng = sample_rng(params.seed, index)
    camera = Camera.from_params(params)

    for attempt in range(MAX_SCENE_ATTEMPTS):
        state0, radii, colors = sample_initial_conditions(rng, params)
        states = simulate(state0, params)
        try:
            frames, segs, flows = _render_video(states, radii, colors, params, camera)
        except BehindCameraError:
            logger.debug("Sample %d attempt %d left the camera frustum; redrawing", index, attempt)
            continue
        k = states.shape[1]
        bboxes, present = bboxes_from_segmentation(segs[0], k)
        if not present.all():
            logger.debug("Sample %d attempt %d has an invisible object in frame 0; redrawing", index, attempt)
            continue
        return SceneSample(
            index=index,
            num_objects=k,
            frames=frames,
            flow=flows,
            seg=segs,
            states=states,
            bboxes=bboxes,
        )

    raise GenerationError("no valid scene after resampling", index=index, attempts=MAX_SCENE_ATTEMPTS)


def _generate_one(args: Tuple[int, GeneratorParams]) -> SceneSample:
    index, params = args
    return generate_sample(index, params)


def generate_samples(
    params: GeneratorParams, indices: Optional[Iterable[int]] = None, workers: int = 0
) -> Iterator[SceneSample]:
    """Yield samples in index order; ``workers > 0`` generates in a process pool."""
    order = list(range(params.num_samples) if indices is None else indices)
    if workers <= 0:
        for i in order:
            yield generate_sample(i, params)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_generate_one, [(i, params) for i in order], chunksize=4)


def replay_states(sample: SceneSample, params: GeneratorParams) -> np.ndarray:
    """Re-simulate a stored sample from its first stored frame, for consistency checks."""
    if sample.states.shape[0] < 2:
        raise InvalidStateError("need at least two stored frames to replay")
    state = BodyState.from_tensor(torch.as_tensor(sample.states[0], dtype=torch.float64))
    engine = params.engine.with_overrides(dt_factor=1.0)
    with torch.no_grad():
        tail = rollout_states(state, engine, sample.states.shape[0] - 1)
    return np.concatenate([sample.states[:1], tail.numpy()], axis=0)
