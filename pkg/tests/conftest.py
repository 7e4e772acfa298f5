"""Shared fixtures: a tiny denoiser, its calibrated store, and the tiny run overrides."""

import numpy as np
import pytest

from engines.diffusion_engine import Denoiser, DenoiserConfig, build_schedule, collect_calibration
from engines.quant_engine import build_quant_store
from models import BitMenu

TINY_OVERRIDES = {
    "schedule.steps": 10,
    "model.data_dim": 2,
    "model.hidden": 16,
    "model.quant_layers": 3,
    "model.time_dim": 4,
    "model.embed_dim": 8,
    "denoiser.iterations": 40,
    "denoiser.batch_size": 32,
    "denoiser.n_train": 200,
    "calibration.n_prompts": 16,
    "t2q.n_samples": 60,
    "t2q.n_components": 2,
    "t2q.hidden": 16,
    "t2q.epochs": 1,
    "t2q.draws_per_prompt": 2,
    "q2b.iterations": 5,
    "q2b.batch_size": 4,
    "q2b.n_prompts": 16,
    "menu.weight_bits": 8,
    "sample.n_samples": 12,
    "eval.n_reference": 40,
    "eval.batch_sweep": "1,2,4",
}


@pytest.fixture
def small_config():
    return DenoiserConfig(data_dim=2, hidden=8, quant_layers=3, time_dim=4, embed_dim=6)


@pytest.fixture
def schedule():
    return build_schedule(6, 1e-3, 0.2)


@pytest.fixture
def denoiser(small_config):
    return Denoiser.initialise(small_config, seed=0)


@pytest.fixture
def menu():
    return BitMenu(6, 8, 10, weight_bits=8)


@pytest.fixture
def prompts_z(small_config):
    return np.random.default_rng(7).standard_normal((5, small_config.embed_dim))


@pytest.fixture
def store(denoiser, schedule, prompts_z, menu):
    calibration = collect_calibration(denoiser, schedule, prompts_z, seed=3, group_size=2)
    return build_quant_store(calibration, menu, schedule.steps, group_size=2)


@pytest.fixture(scope="session")
def tiny_overrides():
    return dict(TINY_OVERRIDES)
