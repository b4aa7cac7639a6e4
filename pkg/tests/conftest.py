import numpy as np
import pytest

from batchrx.cohort import (
    DEFAULT_DOSE_CAPS,
    IDX_GCS,
    IDX_LACTATE,
    IDX_SOFA,
    N_ACTIONS,
    N_FEATURES,
    Cohort,
    Episode,
    label_rewards,
)


def make_observations(rng: np.random.Generator, length: int) -> np.ndarray:
    obs = rng.normal(loc=5.0, scale=2.0, size=(length, N_FEATURES))
    obs[:, IDX_SOFA] = rng.uniform(0.0, 24.0, size=length)
    obs[:, IDX_GCS] = rng.uniform(3.0, 15.0, size=length)
    obs[:, IDX_LACTATE] = rng.uniform(0.5, 8.0, size=length)
    return obs


def make_episode(pid: str, length: int, rng: np.random.Generator,
                 survived: bool = True) -> Episode:
    obs = make_observations(rng, length)
    acts = np.column_stack([
        rng.uniform(0.0, cap, size=length) for cap in DEFAULT_DOSE_CAPS
    ] + [rng.integers(0, 2, size=length).astype(float)])
    rewards = label_rewards(obs, survived)
    return Episode(pid, obs, acts, rewards, survived)


def make_cohort(n_patients: int, seed: int = 0, max_len: int = 12) -> Cohort:
    rng = np.random.default_rng(seed)
    eps = [
        make_episode(f"p{i:03d}", int(rng.integers(1, max_len + 1)), rng,
                     survived=bool(rng.integers(0, 2)))
        for i in range(n_patients)
    ]
    return Cohort(episodes=eps)


@pytest.fixture
def small_cohort():
    return make_cohort(6, seed=42)
