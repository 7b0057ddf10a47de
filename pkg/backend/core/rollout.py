"""
Autoregressive slot prediction with an embedded physics engine.

Path of one predicted frame (``ours``):
    context z -> state encoder -> (z_d, z_g)
    z_d[-1] -> readout -> engine step -> embed           = z_d_exp
    (z_d, z_g) -> joint transformer                       = (z_d_cor, z_g_next)
    mean(z_d_exp, z_d_cor) ++ z_g_next -> state decoder   = z_next

Variants: ``ours_inaccurate`` (wrong engine time step), ``ours_pure`` (transformer
replaced by identity, engine output used as is), ``ours_single`` (no latent split,
engine on the full latent) and ``slotformer`` (transformer only).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, NamedTuple, Optional, Tuple, Union

import torch
import torch.nn as nn
from einops import rearrange

from core.errors import ConfigValidationError, ShapeMismatchError
from core.physics import PARK_STATE, BodyState, EngineParams, dynamics_step
from core.utils import atomic_torch_save, state_dict_hash

logger = logging.getLogger(__name__)

VARIANTS = ("ours", "ours_pure", "ours_single", "ours_inaccurate", "slotformer")
SPLIT_VARIANTS = ("ours", "ours_pure", "ours_inaccurate")
ENGINE_VARIANTS = SPLIT_VARIANTS + ("ours_single",)
TRANSFORMER_VARIANTS = ("ours", "ours_single", "ours_inaccurate", "slotformer")
STATE_DIM = 6


# ------------------------------
# Config
# ------------------------------
@dataclass(frozen=True)
class TransformerSpec:
    layers: int = 4
    heads: int = 8
    width: int = 256
    ffn: int = 512
    dropout: float = 0.0


@dataclass(frozen=True)
class RolloutConfig:
    variant: str = "ours"
    num_slots: int = 6
    slot_dim: int = 128
    context_len: int = 6
    train_horizon: int = 12
    eval_horizon: int = 24
    state_dim: int = STATE_DIM
    state_hidden: int = 128
    transformer: TransformerSpec = field(default_factory=TransformerSpec)
    engine: EngineParams = field(default_factory=EngineParams)
    inaccurate_dt_factor: float = 2.0
    park_state: Tuple[float, ...] = PARK_STATE

    def __post_init__(self) -> None:
        object.__setattr__(self, "park_state", tuple(float(v) for v in self.park_state))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigValidationError("rollout.variant", f"must be one of {list(VARIANTS)}", self.variant)
        if self.slot_dim < 2 or self.slot_dim % 2:
            raise ConfigValidationError("rollout.slot_dim", "must be even", self.slot_dim)
        if self.state_dim != STATE_DIM:
            raise ConfigValidationError("rollout.state_dim", "must be 6 (3D position + 3D velocity)", self.state_dim)
        if self.context_len < 1:
            raise ConfigValidationError("rollout.context_len", "must be >= 1", self.context_len)
        if self.train_horizon < 1 or self.eval_horizon < 1:
            raise ConfigValidationError("rollout.train_horizon", "horizons must be >= 1")
        if self.transformer.width % self.transformer.heads:
            raise ConfigValidationError("rollout.transformer.heads", "must divide transformer width", self.transformer.heads)
        if len(self.park_state) != STATE_DIM:
            raise ConfigValidationError("rollout.park_state", "must have 6 components", self.park_state)
        if self.variant == "ours_inaccurate" and self.inaccurate_dt_factor == 1.0:
            raise ConfigValidationError(
                "rollout.inaccurate_dt_factor", "ours_inaccurate needs a time-step factor other than 1"
            )
        if not self.inaccurate_dt_factor > 0:
            raise ConfigValidationError("rollout.inaccurate_dt_factor", "must be > 0", self.inaccurate_dt_factor)

    @property
    def uses_engine(self) -> bool:
        return self.variant in ENGINE_VARIANTS

    def engine_params(self) -> EngineParams:
        if self.variant == "ours_inaccurate":
            return self.engine.with_overrides(dt_factor=self.inaccurate_dt_factor)
        return self.engine

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["engine"] = self.engine.to_dict()
        payload["park_state"] = list(self.park_state)
        return payload


class LatentSplit(NamedTuple):
    z_d: torch.Tensor
    z_g: torch.Tensor


class StepOutput(NamedTuple):
    z_next: torch.Tensor  # [B, S, D]
    state_next: Optional[torch.Tensor]  # [B, S, 6] engine output
    engine_input: Optional[torch.Tensor]  # [B, S, 6]


class RolloutOutput(NamedTuple):
    latents: torch.Tensor  # [B, H, S, D]
    states: Optional[torch.Tensor]  # [B, H, S, 6]
    engine_inputs: Optional[torch.Tensor]  # [B, H, S, 6], float64


# ------------------------------
# Building blocks
# ------------------------------
class SlotMLP(nn.Module):
    """Per-slot MLP with a single ReLU hidden layer."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise ShapeMismatchError("latent width mismatch", got=z.shape[-1], expected=self.in_dim)
        return self.net(z)


def sinusoidal_encoding(length: int, width: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float32) * (-math.log(10000.0) / width))
    pe = torch.zeros(length, width)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: width // 2])
    return pe


class SlotTransformer(nn.Module):
    """Self-attention over all ``N x S`` context tokens; emits next-frame slots."""

    def __init__(self, in_dim: int, out_dim: int, spec: TransformerSpec, max_len: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.max_len = max_len
        self.in_proj = nn.Linear(in_dim, spec.width)
        self.register_buffer("temporal_pe", sinusoidal_encoding(max_len, spec.width), persistent=False)
        layer = nn.TransformerEncoderLayer(
            d_model=spec.width,
            nhead=spec.heads,
            dim_feedforward=spec.ffn,
            dropout=spec.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=spec.layers, enable_nested_tensor=False)
        self.out_proj = nn.Linear(spec.width, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: [B, N, S, in_dim] -> [B, S, out_dim]
        b, n, s, d = tokens.shape
        if d != self.in_dim:
            raise ShapeMismatchError("transformer input width mismatch", got=d, expected=self.in_dim)
        if n > self.max_len:
            raise ShapeMismatchError("context longer than the temporal encoding", got=n, expected=self.max_len)
        x = self.in_proj(tokens) + self.temporal_pe[:n].to(tokens.dtype)[None, :, None, :]
        x = self.encoder(rearrange(x, "b n s w -> b (n s) w"))
        x = rearrange(x, "b (n s) w -> b n s w", n=n, s=s)
        return self.out_proj(x[:, -1])


class InterfaceOutput(NamedTuple):
    z_out: torch.Tensor
    function_input: torch.Tensor
    function_output: torch.Tensor


class ProceduralInterface(nn.Module):
    """A fixed, non-learned function between a learned input map and a learned output map."""

    def __init__(self, to_input: nn.Module, function: Callable[..., torch.Tensor], from_output: nn.Module) -> None:
        super().__init__()
        self.to_input = to_input
        self.function = function
        self.from_output = from_output

    def to_function_input(self, z: torch.Tensor) -> torch.Tensor:
        return self.to_input(z)

    def forward(
        self, z: torch.Tensor, override_input: Optional[torch.Tensor] = None, **function_kwargs: Any
    ) -> InterfaceOutput:
        f_in = override_input if override_input is not None else self.to_function_input(z)
        f_out = self.function(f_in, **function_kwargs)
        z_out = self.from_output(f_out.to(z.dtype))
        return InterfaceOutput(z_out=z_out, function_input=f_in, function_output=f_out)


class ExplicitDynamics(ProceduralInterface):
    """Linear readout -> one engine frame -> linear embedding back into ``latent_dim``."""

    def __init__(self, latent_dim: int, engine: EngineParams, park_state: Tuple[float, ...] = PARK_STATE) -> None:
        super().__init__(
            to_input=nn.Linear(latent_dim, STATE_DIM),
            function=self._engine_step,
            from_output=nn.Linear(STATE_DIM, latent_dim),
        )
        self.latent_dim = latent_dim
        self.engine = engine
        self.register_buffer("park_state", torch.tensor(park_state, dtype=torch.float64), persistent=False)

    def _engine_step(self, state: torch.Tensor, active: Optional[torch.Tensor] = None) -> torch.Tensor:
        # the engine always integrates in float64; the embedding casts back
        state = state.to(torch.float64)
        if active is None:
            return dynamics_step(BodyState.from_tensor(state), self.engine).to_tensor()
        active = active.to(torch.bool)
        state = torch.where(active.unsqueeze(-1), state, self.park_state.to(torch.float64))
        return dynamics_step(BodyState.from_tensor(state), self.engine, active).to_tensor()


def fuse(z_exp: torch.Tensor, z_cor: torch.Tensor) -> torch.Tensor:
    """Elementwise mean of the explicit and the corrected dynamics latent."""
    if z_exp.shape != z_cor.shape:
        raise ShapeMismatchError("fusion inputs differ in shape", got=list(z_cor.shape), expected=list(z_exp.shape))
    return (z_exp + z_cor) / 2


# ------------------------------
# Model
# ------------------------------
class RolloutModel(nn.Module):
    def __init__(self, config: RolloutConfig) -> None:
        super().__init__()
        self.config = config
        self.variant = config.variant
        d = config.slot_dim
        self.half = d // 2

        self.state_encoder: Optional[SlotMLP] = None
        self.state_decoder: Optional[SlotMLP] = None
        self.dynamics: Optional[ExplicitDynamics] = None
        self.predictor: Optional[SlotTransformer] = None

        if self.variant in SPLIT_VARIANTS:
            self.state_encoder = SlotMLP(d, config.state_hidden, d)
            self.state_decoder = SlotMLP(d, config.state_hidden, d)
            self.dynamics = ExplicitDynamics(self.half, config.engine_params(), config.park_state)
        elif self.variant == "ours_single":
            self.dynamics = ExplicitDynamics(d, config.engine_params(), config.park_state)
        if self.variant in TRANSFORMER_VARIANTS:
            self.predictor = SlotTransformer(d, d, config.transformer, config.context_len)
        logger.debug("Built %s rollout model (%d parameters)", self.variant, sum(p.numel() for p in self.parameters()))

    # --- latent split ---
    def _check_half(self, z: torch.Tensor) -> None:
        if z.shape[-1] != self.half:
            raise ShapeMismatchError("dynamics/Gestalt width must be half the slot width", got=z.shape[-1], expected=self.half)

    def state_encode(self, z: torch.Tensor) -> LatentSplit:
        if self.state_encoder is None:
            raise ShapeMismatchError(f"variant '{self.variant}' has no latent split")
        h = self.state_encoder(z)
        z_d, z_g = h[..., : self.half], h[..., self.half :]
        self._check_half(z_d)
        self._check_half(z_g)
        return LatentSplit(z_d=z_d, z_g=z_g)

    def state_decode(self, z_d: torch.Tensor, z_g: torch.Tensor) -> torch.Tensor:
        if self.state_decoder is None:
            raise ShapeMismatchError(f"variant '{self.variant}' has no latent split")
        self._check_half(z_d)
        self._check_half(z_g)
        return self.state_decoder(torch.cat([z_d, z_g], dim=-1))

    # --- dynamics ---
    def readout_physical(self, z_d_last: torch.Tensor) -> torch.Tensor:
        if self.dynamics is None:
            raise ShapeMismatchError(f"variant '{self.variant}' has no physical readout")
        return self.dynamics.to_function_input(z_d_last)

    def explicit_dynamics(
        self,
        z_d_context: torch.Tensor,
        gt_state: Optional[torch.Tensor] = None,
        active: Optional[torch.Tensor] = None,
    ) -> InterfaceOutput:
        if self.dynamics is None:
            raise ShapeMismatchError(f"variant '{self.variant}' has no explicit dynamics")
        return self.dynamics(z_d_context[:, -1], override_input=gt_state, active=active)

    def joint_predictor(self, z_d_context: torch.Tensor, z_g_context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.predictor is None:
            raise ShapeMismatchError(f"variant '{self.variant}' has no joint predictor")
        self._check_half(z_d_context)
        self._check_half(z_g_context)
        out = self.predictor(torch.cat([z_d_context, z_g_context], dim=-1))
        return out[..., : self.half], out[..., self.half :]

    # --- prediction ---
    def predict_step(
        self,
        context: torch.Tensor,
        gt_state: Optional[torch.Tensor] = None,
        active: Optional[torch.Tensor] = None,
    ) -> StepOutput:
        """One frame from ``context`` ``[B, N, S, D]``; ``gt_state`` replaces the readout if given."""
        context = context[:, -self.config.context_len :]
        if context.shape[-1] != self.config.slot_dim:
            raise ShapeMismatchError("context slot width mismatch", got=context.shape[-1], expected=self.config.slot_dim)

        if self.variant == "slotformer":
            return StepOutput(z_next=self.predictor(context), state_next=None, engine_input=None)

        if self.variant == "ours_single":
            exp = self.explicit_dynamics(context, gt_state, active)
            z_next = fuse(exp.z_out, self.predictor(context))
            return StepOutput(z_next=z_next, state_next=exp.function_output, engine_input=exp.function_input)

        split = self.state_encode(context)
        exp = self.explicit_dynamics(split.z_d, gt_state, active)
        if self.variant == "ours_pure":
            z_d_next, z_g_next = exp.z_out, split.z_g[:, -1]
        else:
            z_d_cor, z_g_next = self.joint_predictor(split.z_d, split.z_g)
            z_d_next = fuse(exp.z_out, z_d_cor)
        z_next = self.state_decode(z_d_next, z_g_next)
        return StepOutput(z_next=z_next, state_next=exp.function_output, engine_input=exp.function_input)

    def rollout(
        self,
        initial_context: torch.Tensor,
        horizon: int,
        gt_state_frame0: Optional[torch.Tensor] = None,
        active: Optional[torch.Tensor] = None,
    ) -> RolloutOutput:
        """Sliding-window autoregression; ground truth conditions the first step only.

        ``ours_pure`` has no learned correction, so its engine state is chained:
        every step after the first starts from the previous engine output.
        """
        window = initial_context[:, -self.config.context_len :]
        latents, states, inputs = [], [], []
        carried = gt_state_frame0
        for t in range(horizon):
            step = self.predict_step(window, carried, active)
            carried = step.state_next if self.variant == "ours_pure" else None
            latents.append(step.z_next)
            if step.state_next is not None:
                states.append(step.state_next)
                inputs.append(step.engine_input.to(torch.float64))
            window = torch.cat([window[:, 1:], step.z_next.unsqueeze(1)], dim=1)
        return RolloutOutput(
            latents=torch.stack(latents, dim=1),
            states=torch.stack(states, dim=1) if states else None,
            engine_inputs=torch.stack(inputs, dim=1) if inputs else None,
        )

    def parameter_hash(self) -> str:
        return state_dict_hash(self.state_dict())


# ------------------------------
# Persistence
# ------------------------------
def save_predictor(model: RolloutModel, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    payload = {
        "state_dict": model.state_dict(),
        "config": model.config.to_dict(),
        "meta": dict(meta or {}, parameter_hash=model.parameter_hash()),
    }
    return atomic_torch_save(payload, path)


def load_predictor(path: Union[str, Path], device: Union[str, torch.device] = "cpu") -> Tuple[RolloutModel, Dict[str, Any]]:
    from core.config import rollout_from_dict

    payload = torch.load(path, map_location=device, weights_only=False)
    model = RolloutModel(rollout_from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.to(device).eval()
    return model, payload.get("meta", {})
