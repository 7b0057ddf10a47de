"""
Box-conditioned slot-attention video backbone with a spatial broadcast decoder.

The backbone is trained once on optical-flow reconstruction and then frozen; its
slots are the latent ``z`` every prediction model works on, and its decoder turns
predicted slots back into masks and flow.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import CapacityError, ConfigValidationError, ShapeMismatchError
from core.utils import atomic_torch_save, state_dict_hash

logger = logging.getLogger(__name__)


# ------------------------------
# Config
# ------------------------------
@dataclass(frozen=True)
class EncoderConfig:
    num_slots: int = 6
    slot_dim: int = 128
    slot_iterations: int = 2
    cnn_channels: Tuple[int, ...] = (32, 32, 32, 32)
    cnn_strides: Tuple[int, ...] = (2, 2, 1, 1)
    kernel_size: int = 5
    mlp_hidden: int = 256
    transition_heads: int = 4
    broadcast_size: int = 8
    decoder_channels: Tuple[int, ...] = (64, 64, 64)
    context_len: int = 6
    image_size: Tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        for name in ("cnn_channels", "cnn_strides", "decoder_channels", "image_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.num_slots < 1:
            raise ConfigValidationError("encoder.num_slots", "must be >= 1", self.num_slots)
        if self.slot_dim < 2 or self.slot_dim % 2:
            raise ConfigValidationError("encoder.slot_dim", "must be even (dynamics/Gestalt split)", self.slot_dim)
        if self.slot_iterations < 1:
            raise ConfigValidationError("encoder.slot_iterations", "must be >= 1", self.slot_iterations)
        if len(self.cnn_channels) != len(self.cnn_strides) or not self.cnn_channels:
            raise ConfigValidationError("encoder.cnn_strides", "needs one stride per CNN layer", self.cnn_strides)
        if self.slot_dim % self.transition_heads:
            raise ConfigValidationError("encoder.transition_heads", "must divide slot_dim", self.transition_heads)
        height, width = self.image_size
        if height % self.broadcast_size or width % self.broadcast_size:
            raise ConfigValidationError("encoder.broadcast_size", "must divide the image size", self.broadcast_size)
        grid = self.feature_grid
        if grid[0] < 1 or grid[1] < 1 or height % math.prod(self.cnn_strides):
            raise ConfigValidationError("encoder.cnn_strides", "must leave a whole feature grid", self.cnn_strides)
        if self.context_len < 1:
            raise ConfigValidationError("encoder.context_len", "must be >= 1", self.context_len)

    @property
    def feature_grid(self) -> Tuple[int, int]:
        stride = math.prod(self.cnn_strides)
        return self.image_size[0] // stride, self.image_size[1] // stride

    @property
    def num_upsamples(self) -> int:
        return int(math.log2(self.image_size[0] // self.broadcast_size))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class FrameEncoding(NamedTuple):
    slots: torch.Tensor  # [B, S, D], the latent z of this frame
    queries: torch.Tensor  # [B, S, D], slot initialization for the next frame
    attn: torch.Tensor  # [B, N, S], normalized over slots


# ------------------------------
# Building blocks
# ------------------------------
def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class ConvEncoder(nn.Module):
    """CNN + learned additive position grid, flattened to ``[B, N, C]`` tokens."""

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        layers = []
        in_ch = 3
        pad = config.kernel_size // 2
        for i, (ch, stride) in enumerate(zip(config.cnn_channels, config.cnn_strides)):
            layers.append(nn.Conv2d(in_ch, ch, config.kernel_size, stride=stride, padding=pad))
            if i < len(config.cnn_channels) - 1:
                layers.append(nn.ReLU())
            in_ch = ch
        self.net = nn.Sequential(*layers)
        gh, gw = config.feature_grid
        self.pos_embedding = nn.Parameter(torch.randn(1, in_ch, gh, gw) * 0.02)
        self.norm = nn.LayerNorm(in_ch)
        self.mlp = _mlp(in_ch, in_ch, in_ch)
        self.out_dim = in_ch

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.net(frames) + self.pos_embedding
        x = x.flatten(2).transpose(1, 2)
        return self.mlp(self.norm(x))


class SlotAttention(nn.Module):
    def __init__(self, num_iter: int, input_size: int, slot_size: int, mlp_size: int, epsilon: float = 1e-8) -> None:
        super().__init__()
        self.num_iter = num_iter
        self.slot_size = slot_size
        self.epsilon = epsilon

        self.norm_inputs = nn.LayerNorm(input_size)
        self.norm_slots = nn.LayerNorm(slot_size)
        self.norm_mlp = nn.LayerNorm(slot_size)

        self.project_q = nn.Linear(slot_size, slot_size, bias=False)
        self.project_k = nn.Linear(input_size, slot_size, bias=False)
        self.project_v = nn.Linear(input_size, slot_size, bias=False)

        self.gru = nn.GRUCell(slot_size, slot_size)
        self.mlp = _mlp(slot_size, mlp_size, slot_size)

    def forward(self, inputs: torch.Tensor, slots_init: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        # inputs: [B, N, C]; slots: [B, S, D]
        b, s, d = slots_init.shape
        inputs = self.norm_inputs(inputs)
        k = self.project_k(inputs) * (self.slot_size ** -0.5)
        v = self.project_v(inputs)

        slots = slots_init
        attn = inputs.new_zeros(b, inputs.shape[1], s)
        for _ in range(self.num_iter):
            slots_prev = slots
            q = self.project_q(self.norm_slots(slots))
            logits = torch.matmul(k, q.transpose(-1, -2))  # [B, N, S]
            attn = F.softmax(logits, dim=-1)

            # weighted mean over inputs
            weights = attn + self.epsilon
            weights = weights / weights.sum(dim=-2, keepdim=True)
            updates = torch.matmul(weights.transpose(-1, -2), v)  # [B, S, D]

            slots = self.gru(updates.reshape(-1, d), slots_prev.reshape(-1, d)).reshape(b, s, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class BoxInitializer(nn.Module):
    """Learned box embedding per object; unused slots share one null embedding."""

    def __init__(self, num_slots: int, slot_dim: int, hidden: int) -> None:
        super().__init__()
        self.num_slots = num_slots
        self.embed = _mlp(4, hidden, slot_dim)
        self.null = nn.Parameter(torch.randn(slot_dim) * 0.02)

    def forward(self, bboxes: torch.Tensor, box_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, k, _ = bboxes.shape
        if k > self.num_slots:
            raise CapacityError("more boxes than slots", num_boxes=k, num_slots=self.num_slots)
        if box_mask is None:
            box_mask = torch.ones(b, k, dtype=torch.bool, device=bboxes.device)
        slots = self.null.expand(b, self.num_slots, -1).clone()
        embedded = self.embed(bboxes)
        slots[:, :k] = torch.where(box_mask.unsqueeze(-1).bool(), embedded, slots[:, :k])
        return slots


class SlotTransition(nn.Module):
    """Slot-interaction self-attention followed by a gated recurrent update."""

    def __init__(self, slot_dim: int, heads: int, hidden: int) -> None:
        super().__init__()
        self.interact = nn.TransformerEncoderLayer(
            d_model=slot_dim, nhead=heads, dim_feedforward=hidden, dropout=0.0, batch_first=True, norm_first=True
        )
        self.gru = nn.GRUCell(slot_dim, slot_dim)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        b, s, d = slots.shape
        mixed = self.interact(slots)
        return self.gru(mixed.reshape(-1, d), slots.reshape(-1, d)).reshape(b, s, d)


class BroadcastDecoder(nn.Module):
    """Each slot -> per-pixel flow (2 channels) + alpha logit."""

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.broadcast_size = config.broadcast_size
        self.out_size = tuple(config.image_size)
        self.pos_embedding = nn.Parameter(
            torch.randn(1, config.slot_dim, config.broadcast_size, config.broadcast_size) * 0.02
        )
        layers = []
        in_ch = config.slot_dim
        channels = list(config.decoder_channels) or [config.slot_dim]
        for i in range(config.num_upsamples):
            ch = channels[min(i, len(channels) - 1)]
            layers += [nn.ConvTranspose2d(in_ch, ch, 5, stride=2, padding=2, output_padding=1), nn.ReLU()]
            in_ch = ch
        layers += [nn.Conv2d(in_ch, in_ch, 5, padding=2), nn.ReLU(), nn.Conv2d(in_ch, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        # slots: [N, D] -> [N, 3, H, W]
        x = slots[:, :, None, None].expand(-1, -1, self.broadcast_size, self.broadcast_size) + self.pos_embedding
        x = self.net(x)
        if tuple(x.shape[-2:]) != self.out_size:
            x = F.interpolate(x, size=self.out_size, mode="bilinear", align_corners=False)
        return x


# ------------------------------
# Backbone
# ------------------------------
class SlotVideoModel(nn.Module):
    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        self.cnn = ConvEncoder(config)
        self.initializer = BoxInitializer(config.num_slots, config.slot_dim, config.mlp_hidden)
        self.slot_attention = SlotAttention(
            config.slot_iterations, self.cnn.out_dim, config.slot_dim, config.mlp_hidden
        )
        self.transition = SlotTransition(config.slot_dim, config.transition_heads, config.mlp_hidden)
        self.decoder = BroadcastDecoder(config)
        self.frozen = False

    # --- freezing ---
    def freeze(self) -> "SlotVideoModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True) -> "SlotVideoModel":
        return super().train(mode and not getattr(self, "frozen", False))

    def parameter_hash(self) -> str:
        return state_dict_hash(self.state_dict())

    # --- encoding ---
    def init_slots_from_bboxes(self, bboxes: torch.Tensor, box_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.initializer(bboxes, box_mask)

    def encode_frame(self, frame: torch.Tensor, prev_slots: torch.Tensor) -> FrameEncoding:
        expected = (3,) + tuple(self.config.image_size)
        if frame.dim() != 4 or tuple(frame.shape[1:]) != expected:
            raise ShapeMismatchError("frame shape does not match the encoder config", got=list(frame.shape), expected=list(expected))
        features = self.cnn(frame)
        slots, attn = self.slot_attention(features, prev_slots)
        return FrameEncoding(slots=slots, queries=self.transition(slots), attn=attn)

    def encode_video(
        self, frames: torch.Tensor, bboxes: torch.Tensor, box_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """``[B, T, 3, H, W]`` -> slots ``[B, T, S, D]``, conditioned on boxes of frame 0."""
        queries = self.init_slots_from_bboxes(bboxes, box_mask)
        out = []
        for t in range(frames.shape[1]):
            enc = self.encode_frame(frames[:, t], queries)
            out.append(enc.slots)
            queries = enc.queries
        return torch.stack(out, dim=1)

    # --- decoding ---
    def decode_slots(self, slots: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """``[..., S, D]`` -> flow ``[..., H, W, 2]`` and masks ``[..., S, H, W]``."""
        if slots.shape[-2:] != (self.config.num_slots, self.config.slot_dim):
            raise ShapeMismatchError(
                "slot tensor does not match the encoder config",
                got=list(slots.shape[-2:]),
                expected=[self.config.num_slots, self.config.slot_dim],
            )
        lead = slots.shape[:-2]
        s, d = slots.shape[-2:]
        out = self.decoder(slots.reshape(-1, d))
        out = out.reshape(-1, s, *out.shape[1:])  # [N, S, 3, H, W]
        masks = F.softmax(out[:, :, 2], dim=1)
        flow = (masks.unsqueeze(2) * out[:, :, :2]).sum(dim=1)  # [N, 2, H, W]
        h, w = masks.shape[-2:]
        return flow.permute(0, 2, 3, 1).reshape(*lead, h, w, 2), masks.reshape(*lead, s, h, w)

    def segmentation_from_slots(self, slots: torch.Tensor) -> torch.Tensor:
        _, masks = self.decode_slots(slots)
        return masks.argmax(dim=-3).to(torch.uint8)

    def flow_loss(self, frames: torch.Tensor, flow: torch.Tensor, bboxes: torch.Tensor, box_mask: torch.Tensor) -> torch.Tensor:
        """Mean squared flow reconstruction error over a window."""
        slots = self.encode_video(frames, bboxes, box_mask)
        recon, _ = self.decode_slots(slots)
        return F.mse_loss(recon, flow)


# ------------------------------
# Persistence
# ------------------------------
def save_backbone(model: SlotVideoModel, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    payload = {
        "state_dict": model.state_dict(),
        "config": model.config.to_dict(),
        "meta": dict(meta or {}, parameter_hash=model.parameter_hash(), frozen=model.frozen),
    }
    return atomic_torch_save(payload, path)


def load_backbone(path: Union[str, Path], device: Union[str, torch.device] = "cpu") -> SlotVideoModel:
    """Load a backbone checkpoint; the result is always frozen."""
    payload = torch.load(path, map_location=device, weights_only=False)
    model = SlotVideoModel(EncoderConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.to(device)
    logger.info("Loaded backbone %s (hash %s)", path, payload.get("meta", {}).get("parameter_hash", "?"))
    return model.freeze()
