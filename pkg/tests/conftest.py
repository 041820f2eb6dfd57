from pathlib import Path

import numpy as np
import pytest

from swirs.services.control_service import CostSpec
from swirs.services.model_service import ModelParams, State, TimeGrid

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

EXP1_INITIAL = (0.9965, 0.0005, 0.0015, 0.0015, 0.0)
EXP2_INITIAL = (0.9958, 0.0, 0.0002, 0.004, 0.0)


@pytest.fixture
def exp1_params() -> ModelParams:
    return ModelParams(k=0.3, beta_s1=0.35, beta_s2=0.45, beta_w1=0.25, beta_w2=0.35,
                       sigma1=0.05, sigma2=0.03, sigma3=0.01, gamma=0.2, epsilon=0.5)


@pytest.fixture
def exp2_params(exp1_params) -> ModelParams:
    return exp1_params.with_updates(sigma3=0.05, gamma=0.0)


@pytest.fixture
def exp3_params() -> ModelParams:
    return ModelParams(k=0.15, beta_s1=0.25, beta_s2=0.3, beta_w1=0.2, beta_w2=0.25,
                       sigma1=0.3, sigma2=0.4, sigma3=0.3, gamma=0.3, epsilon=0.5)


@pytest.fixture
def stable_params() -> ModelParams:
    """Rates for which every E1 condition holds."""
    return ModelParams(k=0.1, beta_s1=0.1, beta_s2=0.1, beta_w1=0.05, beta_w2=0.05,
                       sigma1=0.2, sigma2=0.2, sigma3=0.2, gamma=0.1, epsilon=0.5)


@pytest.fixture
def exp1_initial() -> State:
    return State.from_array(EXP1_INITIAL)


@pytest.fixture
def exp2_initial() -> State:
    return State.from_array(EXP2_INITIAL)


@pytest.fixture
def costs() -> CostSpec:
    return CostSpec()


@pytest.fixture
def grid20() -> TimeGrid:
    return TimeGrid(t_end=20.0, n_steps=2000)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def random_params(rng: np.random.Generator, **fixed: float) -> ModelParams:
    values = {
        "k": rng.uniform(0.05, 0.6),
        "beta_s1": rng.uniform(0.0, 0.6),
        "beta_s2": rng.uniform(0.0, 0.6),
        "beta_w1": rng.uniform(0.0, 0.4),
        "beta_w2": rng.uniform(0.0, 0.4),
        "sigma1": rng.uniform(0.0, 0.5),
        "sigma2": rng.uniform(0.0, 0.5),
        "sigma3": rng.uniform(0.0, 0.5),
        "gamma": rng.uniform(0.0, 0.5),
        "epsilon": rng.uniform(0.0, 1.0),
    }
    values.update(fixed)
    return ModelParams(**values)


def random_state(rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(5))
