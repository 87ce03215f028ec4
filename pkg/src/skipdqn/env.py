"""Session environment: one episode per session, one step per track.

The agent sees the encoded record at the current position and guesses skip
(1) or no-skip (0).  A correct guess earns reward 1.  In ``TRAIN`` mode a
wrong guess terminates the episode immediately (so replayed experience
never extends past the first mistake); in ``EVAL`` mode the episode always
runs through the whole session.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .schema import FeatureSchema, encode_records

__all__ = ["EnvMode", "EpisodeFinishedError", "SessionEnv", "StepOutcome",
           "Transition", "rollout"]


class EnvMode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class EpisodeFinishedError(RuntimeError):
    """step() was called after the episode ended."""


@dataclass(frozen=True)
class StepOutcome:
    """Result of one environment step; ``next_state`` is None iff done."""

    reward: float
    next_state: np.ndarray | None
    done: bool
    correct: bool


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s', done) tuple as stored for replay."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray | None
    done: bool


def _resolve_schema(encoder_or_schema) -> FeatureSchema:
    schema = getattr(encoder_or_schema, "schema_", encoder_or_schema)
    if not isinstance(schema, FeatureSchema):
        raise TypeError("expected a FeatureSchema or a fitted StateEncoder")
    schema.require_fitted()
    return schema


class SessionEnv:
    """Episodic environment over one session.

    States are the encoded records; they are computed once up front (or
    passed in precomputed via ``states`` to share across episodes).
    """

    def __init__(self, session, encoder_or_schema, mode: EnvMode = EnvMode.TRAIN,
                 states: np.ndarray | None = None):
        if not isinstance(mode, EnvMode):
            raise TypeError(f"mode must be an EnvMode, got {mode!r}")
        self.mode = mode
        self.session = session
        if states is None:
            schema = _resolve_schema(encoder_or_schema)
            states = encode_records(session.records, schema)
        if states.shape[0] != len(session):
            raise ValueError("states row count does not match session length")
        self.states = states
        self._labels = session.labels()
        self._cursor = 0
        self._done = True

    @property
    def n_steps(self) -> int:
        return len(self._labels)

    @property
    def position(self) -> int:
        """1-based position of the record the agent must act on next."""
        return self._cursor + 1

    @property
    def done(self) -> bool:
        return self._done

    def reset(self) -> np.ndarray:
        self._cursor = 0
        self._done = False
        return self.states[0]

    def step(self, action) -> StepOutcome:
        if self._done:
            raise EpisodeFinishedError("episode is finished; call reset()")
        action = int(action)
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action}")
        correct = action == int(self._labels[self._cursor])
        reward = 1.0 if correct else 0.0
        self._cursor += 1
        past_end = self._cursor >= len(self._labels)
        terminate = past_end or (self.mode is EnvMode.TRAIN and not correct)
        self._done = terminate
        next_state = None if terminate else self.states[self._cursor]
        return StepOutcome(reward=reward, next_state=next_state,
                           done=terminate, correct=correct)


def rollout(policy: Callable[[np.ndarray], int], session, encoder_or_schema,
            mode: EnvMode = EnvMode.TRAIN,
            states: np.ndarray | None = None) -> list[Transition]:
    """Run one episode under ``policy`` and return its transitions."""
    env = SessionEnv(session, encoder_or_schema, mode=mode, states=states)
    state = env.reset()
    out: list[Transition] = []
    while True:
        action = int(policy(state))
        step = env.step(action)
        out.append(Transition(state, action, step.reward, step.next_state,
                              step.done))
        if step.done:
            return out
        state = step.next_state
