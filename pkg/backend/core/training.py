"""
Training harness: backbone flow pretraining and predictor training on cached latents.

Both loops share ``_fit``: Adam, global gradient-norm clipping, evaluation every
``eval_every`` steps, early stopping on validation loss, atomic checkpoints and a
CSV training curve. A non-finite loss aborts with ``DivergenceError`` pointing at
the last good checkpoint.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from core.dataset_io import DatasetReader, FlowWindowDataset, VideoDataset
from core.errors import ConfigValidationError, DivergenceError, LabError, ShapeMismatchError
from core.rollout import RolloutConfig, RolloutModel, save_predictor
from core.savi import EncoderConfig, SlotVideoModel, save_backbone
from core.utils import atomic_torch_save, ensure_dir, resolve_device, seed_everything

logger = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "train_loss", "val_loss", "grad_norm")


# ------------------------------
# Config
# ------------------------------
@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    grad_clip_norm: float = 0.05
    max_steps: int = 100_000
    eval_every: int = 500
    patience: int = 10
    val_batches: int = 0  # 0 evaluates the whole validation split
    seed: int = 0
    train_size: int = 0  # 0 uses the whole training split
    use_flow_loss: bool = False
    flow_loss_weight: float = 1.0
    log_every: int = 100

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for key in ("batch_size", "max_steps", "eval_every", "patience", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigValidationError(f"train.{key}", "must be >= 1", getattr(self, key))
        for key in ("lr", "grad_clip_norm", "flow_loss_weight"):
            if not getattr(self, key) > 0:
                raise ConfigValidationError(f"train.{key}", "must be > 0", getattr(self, key))
        if self.val_batches < 0 or self.train_size < 0:
            raise ConfigValidationError("train.train_size", "val_batches and train_size must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    curve: Path
    steps: int
    best_val_loss: float
    stopped_early: bool
    objective_terms: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        for key in ("checkpoint", "best_checkpoint", "curve"):
            payload[key] = str(payload[key])
        return payload


# ------------------------------
# Examples and latent cache
# ------------------------------
class TrainingExample(NamedTuple):
    context: torch.Tensor  # [B, N, S, D]
    targets: torch.Tensor  # [B, H, S, D]
    gt_state: torch.Tensor  # [B, S, 6], last context frame
    active: torch.Tensor  # [B, S]
    target_flow: torch.Tensor  # [B, H, Hi, Wi, 2]
    index: torch.Tensor  # [B]


@torch.no_grad()
def make_training_example(
    video: Mapping[str, torch.Tensor],
    encoder: SlotVideoModel,
    context_len: int = 6,
    horizon: int = 12,
    device: Optional[Union[str, torch.device]] = None,
) -> TrainingExample:
    """Encode ``context_len + horizon`` frames with the frozen backbone and split them.

    Accepts one video (as produced by ``sample_to_tensors``) or a collated batch.
    """
    batched = video["frames"].dim() == 5
    if not batched:
        video = {k: v.unsqueeze(0) for k, v in video.items()}
    need = context_len + horizon
    if video["frames"].shape[1] < need:
        raise ShapeMismatchError("video shorter than context + horizon", got=video["frames"].shape[1], expected=need)

    device = device or next(encoder.parameters()).device
    encoder.eval()
    z = encoder.encode_video(
        video["frames"][:, :need].to(device), video["bboxes"].to(device), video["box_mask"].to(device)
    )
    example = TrainingExample(
        context=z[:, :context_len],
        targets=z[:, context_len:need],
        gt_state=video["states"][:, context_len - 1].to(device),
        active=video["active"].to(device),
        target_flow=video["flow"][:, context_len:need].to(device),
        index=video["index"],
    )
    if not batched:
        example = TrainingExample(*(t.squeeze(0) for t in example))
    return example


class LatentCache(Dataset):
    """Training examples of one split, encoded once by the frozen backbone."""

    def __init__(self, tensors: Dict[str, torch.Tensor], backbone_hash: str = "") -> None:
        lengths = {k: v.shape[0] for k, v in tensors.items()}
        if len(set(lengths.values())) > 1:
            raise ShapeMismatchError("latent cache tensors disagree on length", lengths=lengths)
        self.tensors = tensors
        self.backbone_hash = backbone_hash

    @classmethod
    def build(
        cls,
        reader: DatasetReader,
        encoder: SlotVideoModel,
        ids: Sequence[int],
        context_len: int = 6,
        horizon: int = 12,
        batch_size: int = 16,
        with_flow: bool = False,
        num_workers: int = 0,
    ) -> "LatentCache":
        if not ids:
            raise LabError("cannot build a latent cache from an empty split")
        dataset = VideoDataset(reader, ids, encoder.config.num_slots, context_len + horizon)
        loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers)
        parts: Dict[str, List[torch.Tensor]] = {}
        for video in loader:
            example = make_training_example(video, encoder, context_len, horizon)
            for name, value in example._asdict().items():
                if name == "target_flow" and not with_flow:
                    continue
                parts.setdefault(name, []).append(value.cpu())
        tensors = {name: torch.cat(chunks) for name, chunks in parts.items()}
        logger.info("Encoded %d videos into a latent cache (horizon %d)", len(dataset), horizon)
        return cls(tensors, encoder.parameter_hash())

    def __len__(self) -> int:
        return self.tensors["context"].shape[0]

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        return {k: v[i] for k, v in self.tensors.items()}

    @property
    def horizon(self) -> int:
        return self.tensors["targets"].shape[1]

    def subset(self, size: int) -> "LatentCache":
        """First ``size`` examples in split order."""
        if size <= 0 or size >= len(self):
            return self
        return LatentCache({k: v[:size] for k, v in self.tensors.items()}, self.backbone_hash)

    def save(self, path: Union[str, Path]) -> Path:
        return atomic_torch_save({"tensors": self.tensors, "backbone_hash": self.backbone_hash}, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LatentCache":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        return cls(payload["tensors"], payload.get("backbone_hash", ""))


# ------------------------------
# Objective
# ------------------------------
def prediction_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error in the backbone's latent space."""
    if predicted.shape != target.shape:
        raise ShapeMismatchError("prediction and target shapes differ", got=list(predicted.shape), expected=list(target.shape))
    return F.mse_loss(predicted, target)


ObjectiveFn = Callable[[torch.Tensor, Mapping[str, torch.Tensor]], torch.Tensor]


class Objective:
    """Named, weighted loss terms; ``terms`` is the registry checked by tests and checkpoints."""

    def __init__(self) -> None:
        self._terms: Dict[str, Tuple[float, ObjectiveFn]] = {}

    def add(self, name: str, fn: ObjectiveFn, weight: float = 1.0) -> "Objective":
        if name in self._terms:
            raise LabError(f"objective term '{name}' registered twice")
        self._terms[name] = (weight, fn)
        return self

    @property
    def terms(self) -> List[str]:
        return list(self._terms)

    def __call__(self, predicted: torch.Tensor, batch: Mapping[str, torch.Tensor]) -> Tuple[torch.Tensor, Dict[str, float]]:
        total = predicted.new_zeros(())
        parts: Dict[str, float] = {}
        for name, (weight, fn) in self._terms.items():
            value = fn(predicted, batch)
            parts[name] = float(value.detach())
            total = total + weight * value
        return total, parts


def build_objective(config: TrainConfig, encoder: Optional[SlotVideoModel] = None) -> Objective:
    objective = Objective().add("latent_mse", lambda pred, batch: prediction_loss(pred, batch["targets"]))
    if config.use_flow_loss:
        if encoder is None:
            raise ConfigValidationError("train.use_flow_loss", "needs the frozen decoder")

        def flow_mse(pred: torch.Tensor, batch: Mapping[str, torch.Tensor]) -> torch.Tensor:
            flow, _ = encoder.decode_slots(pred)
            return F.mse_loss(flow, batch["target_flow"])

        objective.add("flow_mse", flow_mse, config.flow_loss_weight)
    return objective


# ------------------------------
# Loop helpers
# ------------------------------
def clip_gradients(parameters: Iterable[nn.Parameter], max_norm: float) -> float:
    """Clip the global gradient norm in place; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


class EarlyStopping:
    def __init__(self, patience: int = 10, min_delta: float = 0.0) -> None:
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_evals = 0

    def update(self, value: float) -> bool:
        """Record one validation value; True if it is a new best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_evals = 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience


def _cycle(loader: DataLoader) -> Iterator[Any]:
    while True:
        yield from loader


def write_curve(rows: List[Dict[str, Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _fit(
    name: str,
    model: nn.Module,
    loader: DataLoader,
    loss_fn: Callable[[Any], torch.Tensor],
    val_fn: Callable[[], float],
    config: TrainConfig,
    out_dir: Path,
    save_fn: Callable[[Path, Dict[str, Any]], Path],
    meta: Dict[str, Any],
) -> TrainResult:
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr)
    stopper = EarlyStopping(config.patience)
    best_path = out_dir / f"{name}_best.pt"
    last_good = out_dir / f"{name}_last_good.pt"
    rows: List[Dict[str, Any]] = []
    batches = _cycle(loader)
    step, stopped_early, running, grad_norm = 0, False, [], 0.0

    model.train()
    while step < config.max_steps:
        loss = loss_fn(next(batches))
        if not torch.isfinite(loss):
            diagnostics = {"step": step, "loss": float(loss.detach()), "grad_norm": grad_norm}
            if last_good.exists():
                diagnostics["last_good_checkpoint"] = str(last_good)
            logger.error("%s diverged: %s", name, diagnostics)
            raise DivergenceError(f"non-finite loss while training {name}", **diagnostics)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = clip_gradients(params, config.grad_clip_norm)
        optimizer.step()
        step += 1
        running.append(float(loss.detach()))

        if step % config.log_every == 0:
            logger.info("%s step %d | loss %.6f | grad norm %.4f", name, step, running[-1], grad_norm)

        if step % config.eval_every == 0 or step == config.max_steps:
            val_loss = val_fn()
            model.train()
            train_loss = sum(running) / len(running)
            running = []
            rows.append({"step": step, "train_loss": train_loss, "val_loss": val_loss, "grad_norm": grad_norm})
            logger.info("%s eval @ %d | train %.6f | val %.6f", name, step, train_loss, val_loss)
            if not math.isfinite(val_loss):
                raise DivergenceError(f"non-finite validation loss while training {name}", step=step, last_good_checkpoint=str(last_good))
            ckpt_meta = dict(meta, step=step, val_loss=val_loss, best_val_loss=min(val_loss, stopper.best))
            save_fn(last_good, ckpt_meta)
            if stopper.update(val_loss):
                save_fn(best_path, ckpt_meta)
            if stopper.should_stop:
                stopped_early = True
                logger.info("%s early stop at step %d (best val %.6f)", name, step, stopper.best)
                break

    curve = write_curve(rows, out_dir / f"{name}_curve.csv")
    payload = torch.load(best_path, map_location="cpu", weights_only=False)
    model.load_state_dict(payload["state_dict"])
    return TrainResult(
        checkpoint=best_path,
        best_checkpoint=best_path,
        curve=curve,
        steps=step,
        best_val_loss=stopper.best,
        stopped_early=stopped_early,
    )


def _to_device(batch: Mapping[str, torch.Tensor], device: torch.device) -> Dict[str, torch.Tensor]:
    return {k: v.to(device) for k, v in batch.items()}


def _limited(loader: DataLoader, max_batches: int) -> Iterable[Any]:
    return itertools.islice(loader, max_batches) if max_batches else loader


# ------------------------------
# Backbone training
# ------------------------------
def train_savi(
    reader: DatasetReader,
    encoder_config: EncoderConfig,
    config: TrainConfig,
    out_dir: Union[str, Path],
    device: Union[str, torch.device] = "auto",
    num_workers: int = 0,
    meta: Optional[Dict[str, Any]] = None,
) -> Tuple[SlotVideoModel, TrainResult]:
    """Flow-reconstruction pretraining on windows of ``context_len`` frames; returns a frozen model."""
    out_dir = ensure_dir(out_dir)
    device = resolve_device(device) if isinstance(device, str) else device
    generator = seed_everything(config.seed)

    window = encoder_config.context_len
    train_ids = reader.split("train")
    if config.train_size:
        train_ids = train_ids[: config.train_size]
    train_set = FlowWindowDataset(reader, train_ids, encoder_config.num_slots, window, stride=max(1, window // 2))
    val_set = FlowWindowDataset(reader, reader.split("val"), encoder_config.num_slots, window)
    if not len(train_set) or not len(val_set):
        raise LabError("not enough frames for backbone training windows", window=window)
    loader = DataLoader(train_set, batch_size=config.batch_size, shuffle=True, generator=generator, num_workers=num_workers, drop_last=len(train_set) > config.batch_size)
    val_loader = DataLoader(val_set, batch_size=config.batch_size, shuffle=False, num_workers=num_workers)

    model = SlotVideoModel(encoder_config).to(device)

    def loss_fn(batch: Mapping[str, torch.Tensor]) -> torch.Tensor:
        b = _to_device(batch, device)
        return model.flow_loss(b["frames"], b["flow"], b["bboxes"], b["box_mask"])

    @torch.no_grad()
    def val_fn() -> float:
        model.eval()
        total, count = 0.0, 0
        for batch in _limited(val_loader, config.val_batches):
            b = _to_device(batch, device)
            n = b["frames"].shape[0]
            total += float(model.flow_loss(b["frames"], b["flow"], b["bboxes"], b["box_mask"])) * n
            count += n
        return total / max(count, 1)

    run_meta = dict(meta or {}, train_config=config.to_dict(), objective_terms=["flow_mse"])
    result = _fit(
        "savi", model, loader, loss_fn, val_fn, config, out_dir,
        lambda path, m: save_backbone(model, path, m), run_meta,
    )
    model.freeze()
    final = save_backbone(model, out_dir / "savi.pt", dict(run_meta, best_val_loss=result.best_val_loss, steps=result.steps))
    result.checkpoint = final
    result.objective_terms = ["flow_mse"]
    logger.info("Backbone frozen (hash %s) -> %s", model.parameter_hash(), final)
    return model, result


# ------------------------------
# Predictor training
# ------------------------------
def train_predictor(
    train_cache: LatentCache,
    val_cache: LatentCache,
    encoder: SlotVideoModel,
    rollout_config: RolloutConfig,
    config: TrainConfig,
    out_dir: Union[str, Path],
    device: Union[str, torch.device] = "auto",
    meta: Optional[Dict[str, Any]] = None,
) -> Tuple[RolloutModel, TrainResult]:
    """Autoregressive rollouts of ``train_horizon`` frames scored in latent space."""
    out_dir = ensure_dir(out_dir)
    device = resolve_device(device) if isinstance(device, str) else device
    if not encoder.frozen:
        raise LabError("predictor training needs a frozen backbone")
    if train_cache.horizon < rollout_config.train_horizon:
        raise ShapeMismatchError("latent cache shorter than train_horizon", got=train_cache.horizon, expected=rollout_config.train_horizon)
    backbone_hash = encoder.parameter_hash()

    generator = seed_everything(config.seed)
    train_cache = train_cache.subset(config.train_size)
    loader = DataLoader(train_cache, batch_size=config.batch_size, shuffle=True, generator=generator, drop_last=len(train_cache) > config.batch_size)
    val_loader = DataLoader(val_cache, batch_size=config.batch_size, shuffle=False)

    model = RolloutModel(rollout_config).to(device)
    encoder = encoder.to(device)
    objective = build_objective(config, encoder)
    horizon = rollout_config.train_horizon

    def batch_loss(batch: Mapping[str, torch.Tensor]) -> torch.Tensor:
        b = _to_device(batch, device)
        b["targets"] = b["targets"][:, :horizon]
        if "target_flow" in b:
            b["target_flow"] = b["target_flow"][:, :horizon]
        out = model.rollout(b["context"], horizon, gt_state_frame0=b["gt_state"], active=b["active"])
        total, _ = objective(out.latents, b)
        return total

    @torch.no_grad()
    def val_fn() -> float:
        model.eval()
        total, count = 0.0, 0
        for batch in _limited(val_loader, config.val_batches):
            n = batch["context"].shape[0]
            total += float(batch_loss(batch)) * n
            count += n
        return total / max(count, 1)

    run_meta = dict(
        meta or {},
        variant=rollout_config.variant,
        train_config=config.to_dict(),
        objective_terms=objective.terms,
        backbone_hash=backbone_hash,
        train_examples=len(train_cache),
    )
    result = _fit(
        rollout_config.variant, model, loader, batch_loss, val_fn, config, out_dir,
        lambda path, m: save_predictor(model, path, m), run_meta,
    )
    if encoder.parameter_hash() != backbone_hash:
        raise LabError("backbone parameters changed during predictor training")
    model.eval()
    final = save_predictor(model, out_dir / f"{rollout_config.variant}.pt", dict(run_meta, best_val_loss=result.best_val_loss, steps=result.steps))
    result.checkpoint = final
    result.objective_terms = objective.terms
    return model, result
