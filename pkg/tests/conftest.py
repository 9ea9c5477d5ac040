import numpy as np
import pytest

from safesim.corpus import generate_corpus
from safesim.diffusion import TrajectoryDenoiser


@pytest.fixture(scope="session")
def small_corpus():
    corpus, profiles = generate_corpus(n_episodes=40, seed=0)
    return corpus, profiles


@pytest.fixture(scope="session")
def small_model(small_corpus):
    corpus, _ = small_corpus
    return TrajectoryDenoiser(hidden_width=64, n_iterations=800, seed=0).fit(corpus)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
