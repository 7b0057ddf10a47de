"""Shared fixtures: a tiny generator, encoder and rollout setup plus a small on-disk dataset."""

from __future__ import annotations

import pytest
import torch

from core.config import config_from_dict
from core.dataset_io import read_dataset, write_dataset
from core.physics import EngineParams
from core.rollout import RolloutConfig, RolloutModel, TransformerSpec
from core.savi import EncoderConfig, SlotVideoModel
from core.scene import GeneratorParams, generate_samples

TINY_ENGINE = EngineParams(sim_dt=0.25 / 6, substeps=6)
TINY_SLOTS = 4
TINY_DIM = 16
CONTEXT = 3
SPLITS = {"train": [0, 1, 2, 3], "val": [4, 5], "test": [6, 7]}


def tiny_config_dict(tmp_dir=None) -> dict:
    """Sections for ``config_from_dict`` matching the tiny fixtures below."""
    data = {
        "engine": {"sim_dt": 0.25 / 6, "substeps": 6},
        "generator": {"num_samples": 8, "num_frames": 10, "height": 32, "width": 32, "k_min": 2, "k_max": 3},
        "encoder": {
            "num_slots": TINY_SLOTS,
            "slot_dim": TINY_DIM,
            "slot_iterations": 1,
            "cnn_channels": [8, 8],
            "cnn_strides": [2, 2],
            "kernel_size": 3,
            "mlp_hidden": 32,
            "transition_heads": 2,
            "broadcast_size": 8,
            "decoder_channels": [8],
            "context_len": CONTEXT,
        },
        "savi_train": {"batch_size": 2, "max_steps": 4, "eval_every": 2, "log_every": 1},
        "rollout": {
            "context_len": CONTEXT,
            "train_horizon": 2,
            "eval_horizon": 4,
            "state_hidden": 32,
            "transformer": {"layers": 1, "heads": 2, "width": 16, "ffn": 32},
        },
        "train": {"batch_size": 2, "max_steps": 4, "eval_every": 2, "log_every": 1},
    }
    if tmp_dir is not None:
        data["paths"] = {"data_dir": str(tmp_dir / "data"), "runs_dir": str(tmp_dir / "runs"), "device": "cpu"}
    return data


@pytest.fixture(autouse=True)
def _clean_lab_env(monkeypatch):
    for name in ("LAB_DEVICE", "LAB_DATA_DIR", "LAB_RUNS_DIR", "LAB_LOG_LEVEL", "LAB_NUM_WORKERS"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope="session")
def generator_params() -> GeneratorParams:
    return GeneratorParams(
        num_samples=8, num_frames=10, height=32, width=32, k_min=2, k_max=3, seed=0, engine=TINY_ENGINE
    )


@pytest.fixture(scope="session")
def encoder_config() -> EncoderConfig:
    return EncoderConfig(
        num_slots=TINY_SLOTS,
        slot_dim=TINY_DIM,
        slot_iterations=1,
        cnn_channels=(8, 8),
        cnn_strides=(2, 2),
        kernel_size=3,
        mlp_hidden=32,
        transition_heads=2,
        broadcast_size=8,
        decoder_channels=(8,),
        context_len=CONTEXT,
        image_size=(32, 32),
    )


def make_rollout_config(variant: str = "ours", engine: EngineParams = TINY_ENGINE, **overrides) -> RolloutConfig:
    fields = dict(
        variant=variant,
        num_slots=TINY_SLOTS,
        slot_dim=TINY_DIM,
        context_len=CONTEXT,
        train_horizon=2,
        eval_horizon=4,
        state_hidden=32,
        transformer=TransformerSpec(layers=1, heads=2, width=16, ffn=32),
        engine=engine,
    )
    fields.update(overrides)
    return RolloutConfig(**fields)


@pytest.fixture
def rollout_factory():
    def build(variant: str = "ours", **overrides) -> RolloutModel:
        torch.manual_seed(0)
        return RolloutModel(make_rollout_config(variant, **overrides)).eval()

    return build


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, generator_params):
    root = tmp_path_factory.mktemp("dataset")
    write_dataset(generate_samples(generator_params), root, generator_params, SPLITS)
    return root


@pytest.fixture
def reader(dataset_dir):
    return read_dataset(dataset_dir)


@pytest.fixture(scope="session")
def frozen_encoder(encoder_config) -> SlotVideoModel:
    torch.manual_seed(0)
    return SlotVideoModel(encoder_config).freeze()


@pytest.fixture
def lab_config(tmp_path):
    return config_from_dict(tiny_config_dict(tmp_path))
