"""Shared fixtures: small corpora and one session-scoped toy training run."""
import time
from types import SimpleNamespace

import pytest

from skipdqn.agent import AgentConfig, DQNTrainer
from skipdqn.data import GeneratorConfig, generate_sessions, generate_toy_sessions
from skipdqn.schema import StateEncoder


@pytest.fixture(scope="session")
def small_corpus():
    """Thirty clean synthetic sessions with a fitted encoder."""
    sessions = generate_sessions(GeneratorConfig(n_sessions=30, seed=7))
    encoder = StateEncoder().fit(sessions)
    return SimpleNamespace(sessions=sessions, encoder=encoder)


@pytest.fixture(scope="session")
def toy_training():
    """Agent trained on the one-informative-bit toy corpus.

    Session-scoped because training takes tens of seconds; the learnability
    check and the attribution ranking check share it.
    """
    sessions = generate_toy_sessions(300, seed=5)
    encoder = StateEncoder().fit(sessions)
    config = AgentConfig(n_episodes=1500, seed=1)
    trainer = DQNTrainer(sessions, encoder, config)
    start = time.perf_counter()
    trainer.run()
    elapsed = time.perf_counter() - start
    return SimpleNamespace(trainer=trainer, sessions=sessions,
                           encoder=encoder, elapsed=elapsed)
