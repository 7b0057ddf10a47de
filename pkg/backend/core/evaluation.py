"""
Evaluation of rollout models and the frozen backbone.

Aggregation order: metrics per frame, then mean over frames per video, then
mean over videos, then mean/std over seeds. Reported values are percentages.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import DataLoader

from core.dataset_io import DatasetReader, VideoDataset
from core.errors import GateError, LabError
from core.metrics import METRIC_NAMES, ari, frame_scores, state_mae
from core.rollout import RolloutModel
from core.savi import SlotVideoModel
from core.training import make_training_example
from core.utils import atomic_write_json, ensure_dir

logger = logging.getLogger(__name__)

BACKBONE_ROW = "savi"
SEG_PALETTE = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
    ],
    dtype=np.uint8,
)


# ------------------------------
# Report types
# ------------------------------
@dataclass
class SeedScores:
    """Scores of one trained model (one seed) on an evaluation split."""

    per_frame: Dict[str, List[float]]  # metric -> curve over predicted frames, percent
    overall: Dict[str, float]  # metric -> percent
    state_mae: Optional[List[float]] = None  # world units per predicted frame
    num_samples: int = 0


@dataclass
class VariantResult:
    variant: str
    seeds: Dict[str, SeedScores] = field(default_factory=dict)
    provenance: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)

    @property
    def completed(self) -> List[str]:
        return sorted(self.seeds, key=int)

    def summary(self) -> Dict[str, Dict[str, float]]:
        """Mean and population std over seeds for every metric."""
        out: Dict[str, Dict[str, float]] = {}
        for name in METRIC_NAMES:
            values = np.array([self.seeds[s].overall[name] for s in self.completed], dtype=np.float64)
            if values.size == 0:
                out[name] = {"mean": float("nan"), "std": float("nan"), "n": 0}
            else:
                out[name] = {"mean": float(np.nanmean(values)), "std": float(np.nanstd(values)), "n": int(values.size)}
        return out

    def mean_curve(self, metric: str = "miou") -> List[float]:
        curves = [self.seeds[s].per_frame[metric] for s in self.completed]
        return np.nanmean(np.array(curves), axis=0).tolist() if curves else []

    def mean_state_mae(self) -> Optional[List[float]]:
        curves = [self.seeds[s].state_mae for s in self.completed if self.seeds[s].state_mae is not None]
        return np.mean(np.array(curves), axis=0).tolist() if curves else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "summary": self.summary(),
            "seeds": {s: asdict(v) for s, v in self.seeds.items()},
            "provenance": self.provenance,
            "errors": self.errors,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VariantResult":
        return cls(
            variant=data["variant"],
            seeds={s: SeedScores(**v) for s, v in data.get("seeds", {}).items()},
            provenance=dict(data.get("provenance", {})),
            errors=dict(data.get("errors", {})),
        )


@dataclass
class MetricReport:
    name: str
    rows: Dict[str, VariantResult] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def row(self, variant: str) -> VariantResult:
        return self.rows.setdefault(variant, VariantResult(variant))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "meta": self.meta, "rows": {k: v.to_dict() for k, v in self.rows.items()}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricReport":
        return cls(
            name=data["name"],
            rows={k: VariantResult.from_dict(v) for k, v in data.get("rows", {}).items()},
            meta=dict(data.get("meta", {})),
        )

    def save(self, path: Union[str, Path]) -> Path:
        return atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ------------------------------
# Scoring
# ------------------------------
def _aggregate(video_scores: List[Dict[str, np.ndarray]], maes: List[np.ndarray]) -> SeedScores:
    per_frame, overall = {}, {}
    for name in METRIC_NAMES:
        grid = np.stack([v[name] for v in video_scores]) * 100.0  # [V, T]
        per_frame[name] = np.nanmean(grid, axis=0).tolist()
        overall[name] = float(np.nanmean(per_frame[name]))
    mae = np.mean(np.stack(maes), axis=0).tolist() if maes else None
    return SeedScores(per_frame=per_frame, overall=overall, state_mae=mae, num_samples=len(video_scores))


def _video_loader(
    reader: DatasetReader, ids: Sequence[int], num_slots: int, num_frames: Optional[int], batch_size: int
) -> DataLoader:
    if not ids:
        raise LabError("evaluation split is empty")
    return DataLoader(VideoDataset(reader, ids, num_slots, num_frames), batch_size=batch_size, shuffle=False)


@torch.no_grad()
def evaluate_seed(
    model: RolloutModel,
    encoder: SlotVideoModel,
    reader: DatasetReader,
    ids: Sequence[int],
    horizon: Optional[int] = None,
    batch_size: int = 8,
) -> SeedScores:
    """Encode the context, roll out ``horizon`` frames, decode and score every prediction."""
    horizon = horizon or model.config.eval_horizon
    n_ctx = model.config.context_len
    device = next(encoder.parameters()).device
    model.to(device).eval()
    video_scores, maes = [], []
    for video in _video_loader(reader, ids, encoder.config.num_slots, n_ctx + horizon, batch_size):
        example = make_training_example(video, encoder, n_ctx, horizon, device)
        out = model.rollout(example.context, horizon, gt_state_frame0=example.gt_state, active=example.active)
        pred_seg = encoder.segmentation_from_slots(out.latents).cpu().numpy()
        gt_seg = video["seg"][:, n_ctx : n_ctx + horizon].numpy()
        gt_states = video["states"][:, n_ctx : n_ctx + horizon].numpy()
        for b in range(pred_seg.shape[0]):
            video_scores.append(frame_scores(pred_seg[b], gt_seg[b]))
            if out.states is not None:
                maes.append(state_mae(out.states[b].cpu().numpy(), gt_states[b], video["active"][b].numpy()))
    return _aggregate(video_scores, maes)


@torch.no_grad()
def evaluate_backbone(
    encoder: SlotVideoModel,
    reader: DatasetReader,
    ids: Sequence[int],
    start: int = 6,
    length: int = 24,
    batch_size: int = 8,
) -> SeedScores:
    """Upper-bound row: the backbone segments ground-truth frames ``start .. start+length``."""
    device = next(encoder.parameters()).device
    encoder.eval()
    video_scores = []
    for video in _video_loader(reader, ids, encoder.config.num_slots, start + length, batch_size):
        slots = encoder.encode_video(video["frames"].to(device), video["bboxes"].to(device), video["box_mask"].to(device))
        pred_seg = encoder.segmentation_from_slots(slots[:, start:]).cpu().numpy()
        gt_seg = video["seg"][:, start : start + length].numpy()
        for b in range(pred_seg.shape[0]):
            video_scores.append(frame_scores(pred_seg[b], gt_seg[b]))
    return _aggregate(video_scores, [])


@torch.no_grad()
def backbone_gate(
    encoder: SlotVideoModel,
    reader: DatasetReader,
    split: str = "val",
    threshold: float = 0.5,
    batch_size: int = 8,
) -> float:
    """Full-video ARI-FG of the backbone (unit scale); raises ``GateError`` below ``threshold``."""
    device = next(encoder.parameters()).device
    encoder.eval()
    ids = reader.split(split)
    values: List[float] = []
    for video in _video_loader(reader, ids, encoder.config.num_slots, None, batch_size):
        slots = encoder.encode_video(video["frames"].to(device), video["bboxes"].to(device), video["box_mask"].to(device))
        pred_seg = encoder.segmentation_from_slots(slots).cpu().numpy()
        gt_seg = video["seg"].numpy()
        for b in range(pred_seg.shape[0]):
            per_frame = [ari(p, g, foreground_only=True) for p, g in zip(pred_seg[b], gt_seg[b])]
            values.append(float(np.nanmean(per_frame)))
    score = float(np.nanmean(values))
    logger.info("Backbone ARI-FG on %s: %.4f (floor %.2f)", split, score, threshold)
    if not score > threshold:
        raise GateError("backbone below the segmentation quality floor", ari_fg=score, threshold=threshold, split=split)
    return score


def evaluate_model(
    models: Mapping[int, RolloutModel],
    encoder: SlotVideoModel,
    reader: DatasetReader,
    split: str = "test",
    horizon: Optional[int] = None,
    batch_size: int = 8,
    provenance: Optional[Mapping[int, Dict[str, Any]]] = None,
) -> VariantResult:
    """Evaluate one variant trained under several seeds."""
    if not models:
        raise LabError("no trained models to evaluate")
    ids = reader.split(split)
    variant = next(iter(models.values())).variant
    result = VariantResult(variant)
    for seed, model in sorted(models.items()):
        if model.variant != variant:
            raise LabError("evaluate_model expects one variant", got=model.variant, expected=variant)
        result.seeds[str(seed)] = evaluate_seed(model, encoder, reader, ids, horizon, batch_size)
        if provenance and seed in provenance:
            result.provenance[str(seed)] = dict(provenance[seed])
        logger.info("Evaluated %s seed %s: mIoU %.2f", variant, seed, result.seeds[str(seed)].overall["miou"])
    return result


# ------------------------------
# Figures
# ------------------------------
def export_figures(report: MetricReport, out_dir: Union[str, Path], metric: str = "miou") -> Dict[str, Path]:
    """Per-frame curve plot plus the numbers behind it as CSV."""
    out_dir = ensure_dir(out_dir)
    csv_path = out_dir / f"{report.name}_per_frame.csv"
    png_path = out_dir / f"{report.name}_{metric}_curve.png"

    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "frame", *METRIC_NAMES, "state_mae"])
        for variant, row in report.rows.items():
            if not row.completed:
                continue
            curves = {name: row.mean_curve(name) for name in METRIC_NAMES}
            mae = row.mean_state_mae()
            for t in range(len(curves[METRIC_NAMES[0]])):
                values = [f"{curves[name][t]:.6f}" for name in METRIC_NAMES]
                writer.writerow([variant, t + 1, *values, "" if mae is None else f"{mae[t]:.8f}"])

    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, row in report.rows.items():
        curve = row.mean_curve(metric)
        if curve:
            ax.plot(range(1, len(curve) + 1), curve, marker="o", markersize=3, label=variant)
    ax.set_xlabel("predicted frame")
    ax.set_ylabel(f"{metric} (%)")
    ax.set_title(report.name)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    logger.info("Wrote figures for %s -> %s", report.name, out_dir)
    return {"csv": csv_path, "curve": png_path}


def colorize(seg: np.ndarray) -> np.ndarray:
    return SEG_PALETTE[np.asarray(seg, dtype=np.int64) % len(SEG_PALETTE)]


def export_sample_grid(
    gt_seg: np.ndarray,
    predictions: Mapping[str, np.ndarray],
    steps: Sequence[int],
    path: Union[str, Path],
    scale: int = 2,
) -> Path:
    """Colour-coded segmentation grid: one row per source (ground truth first), one column per step.

    ``steps`` are 1-based unroll steps into the ``[T, H, W]`` label videos.
    """
    rows = {"gt": np.asarray(gt_seg), **{k: np.asarray(v) for k, v in predictions.items()}}
    horizon, height, width = rows["gt"].shape
    bad = [s for s in steps if not 1 <= s <= horizon]
    if bad:
        raise LabError("unroll steps outside the predicted horizon", steps=bad, horizon=horizon)

    label_w, header_h = 80, 16
    cell_h, cell_w = height * scale, width * scale
    canvas = Image.new("RGB", (label_w + cell_w * len(steps), header_h + cell_h * len(rows)), "white")
    draw = ImageDraw.Draw(canvas)
    for j, step in enumerate(steps):
        draw.text((label_w + j * cell_w + 2, 2), f"t={step}", fill="black")
    for i, (name, seg) in enumerate(rows.items()):
        top = header_h + i * cell_h
        draw.text((2, top + cell_h // 2 - 6), name, fill="black")
        for j, step in enumerate(steps):
            tile = Image.fromarray(colorize(seg[step - 1])).resize((cell_w, cell_h), Image.NEAREST)
            canvas.paste(tile, (label_w + j * cell_w, top))

    path = Path(path)
    ensure_dir(path.parent)
    canvas.save(path, format="PNG")
    return path


@torch.no_grad()
def predict_segmentations(
    models: Mapping[str, RolloutModel],
    encoder: SlotVideoModel,
    reader: DatasetReader,
    sample_id: int,
    horizon: int = 24,
) -> Dict[str, np.ndarray]:
    """Ground truth and per-variant predicted segmentations of one video, ``[horizon, H, W]`` each."""
    first = next(iter(models.values()))
    n_ctx = first.config.context_len
    device = next(encoder.parameters()).device
    video = VideoDataset(reader, [sample_id], encoder.config.num_slots, n_ctx + horizon)[0]
    example = make_training_example(video, encoder, n_ctx, horizon, device)
    out = {"gt": video["seg"][n_ctx : n_ctx + horizon].numpy()}
    for name, model in models.items():
        model.to(device).eval()
        roll = model.rollout(example.context.unsqueeze(0), horizon, example.gt_state.unsqueeze(0), example.active.unsqueeze(0))
        out[name] = encoder.segmentation_from_slots(roll.latents[0]).cpu().numpy()
    return out
