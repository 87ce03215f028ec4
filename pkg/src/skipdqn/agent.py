"""Vanilla deep-Q agent trained offline on logged sessions.

The network is a plain numpy MLP (three hidden ReLU layers by default, a
linear two-unit head).  Training replays logged sessions through the
terminate-on-error environment, stores transitions in a FIFO replay
buffer, and fits Q-values toward TD targets from a periodically synced
target network.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import NotFittedError

from .env import EnvMode, SessionEnv
from .schema import FeatureSchema, StateEncoder, encode_records, schema_dump

__all__ = [
    "Adam",
    "AgentConfig",
    "Checkpoint",
    "DQNTrainer",
    "QNetwork",
    "ReplayBuffer",
    "SkipDQN",
    "TrainingTrace",
    "act_epsilon",
    "act_greedy",
    "learn_step",
    "load_checkpoint",
    "save_checkpoint",
    "td_targets",
    "train",
]

N_ACTIONS = 2
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters for offline DQN training."""

    hidden_sizes: tuple[int, ...] = (128, 128, 128)
    learning_rate: float = 1e-3
    gamma: float = 0.9
    batch_size: int = 256
    target_sync_interval: int = 256   # gradient updates between target syncs
    gradient_interval: int = 1        # environment steps per gradient update
    replay_capacity: int = 10_000
    n_episodes: int = 20_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.2     # share of n_episodes spent annealing
    loss: str = "huber"
    huber_delta: float = 1.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if not self.hidden_sizes:
            raise ValueError("at least one hidden layer is required")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.batch_size > self.replay_capacity:
            raise ValueError("batch_size cannot exceed replay_capacity")
        if self.loss not in ("huber", "mse"):
            raise ValueError(f"loss must be 'huber' or 'mse', got {self.loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if not 0.0 < self.epsilon_fraction <= 1.0:
            raise ValueError("epsilon_fraction must be in (0, 1]")
        if min(self.target_sync_interval, self.gradient_interval,
               self.n_episodes, self.batch_size) < 1:
            raise ValueError("intervals and sizes must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def epsilon_at(self, episode: int) -> float:
        """Linear anneal over the first epsilon_fraction of episodes."""
        horizon = max(1, round(self.epsilon_fraction * self.n_episodes))
        if episode >= horizon:
            return self.epsilon_end
        frac = episode / horizon
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


class QNetwork:
    """MLP with ReLU hidden layers, linear head, manual backprop."""

    def __init__(self, input_dim: int, hidden_sizes: Sequence[int] = (128, 128, 128),
                 n_actions: int = N_ACTIONS, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.input_dim = int(input_dim)
        self.n_actions = int(n_actions)
        self.dtype = np.dtype(dtype)
        sizes = [self.input_dim, *hidden_sizes, self.n_actions]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray, cache: bool = False):
        """Q-values (n, n_actions); with ``cache`` also the backprop cache."""
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        activations = [h]
        pre = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < self.n_layers - 1:
                pre.append(z)
                h = np.maximum(z, 0.0)
                activations.append(h)
            else:
                h = z
        q = h[0] if squeeze else h
        if cache:
            return q, (activations, pre)
        return q

    def backward(self, cache, dq: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(dq * Q) w.r.t. params, aligned with ``params``."""
        activations, pre = cache
        grads_w: list[np.ndarray] = [None] * self.n_layers
        grads_b: list[np.ndarray] = [None] * self.n_layers
        dh = np.asarray(dq, dtype=self.dtype)
        for i in reversed(range(self.n_layers)):
            grads_w[i] = activations[i].T @ dh
            grads_b[i] = dh.sum(axis=0)
            if i > 0:
                dh = (dh @ self.weights[i].T) * (pre[i - 1] > 0)
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend((gw, gb))
        return out

    def copy(self) -> "QNetwork":
        dup = QNetwork.__new__(QNetwork)
        dup.input_dim = self.input_dim
        dup.n_actions = self.n_actions
        dup.dtype = self.dtype
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    def load_from(self, other: "QNetwork"):
        for mine, theirs in zip(self.params, other.params):
            np.copyto(mine, theirs)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params]).astype(np.float64)

    def set_flat(self, vector: np.ndarray):
        pos = 0
        for p in self.params:
            n = p.size
            np.copyto(p, vector[pos:pos + n].reshape(p.shape).astype(self.dtype))
            pos += n
        if pos != vector.size:
            raise ValueError("flat vector size mismatch")


def act_greedy(net: QNetwork, state: np.ndarray) -> int:
    """Greedy action; ties resolve to action 0 (no-skip)."""
    q = net.forward(state)
    return int(np.argmax(q))


def act_epsilon(net: QNetwork, state: np.ndarray, epsilon: float,
                rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return act_greedy(net, state)


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._states = np.zeros((capacity, state_dim), dtype=dtype)
        self._next_states = np.zeros((capacity, state_dim), dtype=dtype)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=dtype)
        self._dones = np.zeros(capacity, dtype=bool)
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    def push(self, state, action, reward, next_state, done):
        i = self._cursor
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = reward
        if next_state is None:
            self._next_states[i] = 0.0
        else:
            self._next_states[i] = next_state
        self._dones[i] = done
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample with replacement: (s, a, r, s', done) arrays."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(self._size, size=batch_size)
        return (self._states[idx], self._actions[idx], self._rewards[idx],
                self._next_states[idx], self._dones[idx])


class Adam:
    """Adam with bias correction; updates parameters in place."""

    def __init__(self, params: Sequence[np.ndarray], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def td_targets(target_net: QNetwork, rewards: np.ndarray,
               next_states: np.ndarray, dones: np.ndarray,
               gamma: float) -> np.ndarray:
    """y = r + gamma * max_a Q_target(s', a), with no bootstrap at done."""
    next_q = target_net.forward(next_states)
    boot = next_q.max(axis=1) * (~np.asarray(dones, dtype=bool))
    return (rewards + gamma * boot).astype(target_net.dtype)


def _loss_and_grad(err: np.ndarray, loss: str, delta: float):
    """Mean loss over the batch plus d(loss)/d(err)."""
    n = err.shape[0]
    if loss == "huber":
        abs_err = np.abs(err)
        quad = np.minimum(abs_err, delta)
        value = float(np.mean(0.5 * quad ** 2 + delta * (abs_err - quad)))
        grad = np.clip(err, -delta, delta) / n
    else:
        value = float(np.mean(err ** 2))
        grad = 2.0 * err / n
    return value, grad


def learn_step(online: QNetwork, target: QNetwork, optimizer: Adam, batch,
               gamma: float, loss: str = "huber", huber_delta: float = 1.0) -> float:
    """One gradient update on a sampled batch; returns the batch loss."""
    states, actions, rewards, next_states, dones = batch
    y = td_targets(target, rewards, next_states, dones, gamma)
    q, cache = online.forward(states, cache=True)
    rows = np.arange(len(actions))
    err = q[rows, actions] - y
    value, derr = _loss_and_grad(err, loss, huber_delta)
    dq = np.zeros_like(q)
    dq[rows, actions] = derr.astype(q.dtype)
    grads = online.backward(cache, dq)
    optimizer.step(online.params, grads)
    return value


@dataclass
class TrainingTrace:
    """Per-episode log: return, mean batch loss (nan if no update), epsilon."""

    episodes: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)

    def append(self, episode: int, reward: float, loss: float, epsilon: float):
        self.episodes.append(episode)
        self.rewards.append(reward)
        self.losses.append(loss)
        self.epsilons.append(epsilon)

    def to_json(self) -> dict:
        return {"episodes": self.episodes, "rewards": self.rewards,
                "losses": self.losses, "epsilons": self.epsilons}


def _resolve_encoder(encoder) -> FeatureSchema:
    if isinstance(encoder, FeatureSchema):
        encoder.require_fitted()
        return encoder
    schema = getattr(encoder, "schema_", None)
    if isinstance(schema, FeatureSchema):
        return schema
    raise TypeError("expected a fitted StateEncoder or FeatureSchema")


class DQNTrainer:
    """Offline DQN training loop; resumable via repeated ``run`` calls.

    All randomness comes from four child streams of ``config.seed`` (net
    init, episode order, epsilon-greedy actions, replay sampling), so
    running in chunks reproduces a single uninterrupted run exactly.
    """

    def __init__(self, sessions: Sequence, encoder, config: AgentConfig | None = None):
        if not sessions:
            raise ValueError("no training sessions provided")
        self.config = config or AgentConfig()
        self.schema = _resolve_encoder(encoder)
        dt = self.config.np_dtype
        self._states = [encode_records(s.records, self.schema).astype(dt)
                        for s in sessions]
        self._sessions = list(sessions)

        seeds = np.random.SeedSequence(self.config.seed).spawn(4)
        init_rng = np.random.default_rng(seeds[0])
        self._rng_episode = np.random.default_rng(seeds[1])
        self._rng_action = np.random.default_rng(seeds[2])
        self._rng_sample = np.random.default_rng(seeds[3])

        self.online = QNetwork(self.schema.width, self.config.hidden_sizes,
                               rng=init_rng, dtype=dt)
        self.target = self.online.copy()
        self.optimizer = Adam(self.online.params, self.config.learning_rate)
        self.buffer = ReplayBuffer(self.config.replay_capacity,
                                   self.schema.width, dtype=dt)
        self.episodes_done = 0
        self.env_steps = 0
        self.grad_steps = 0
        self.trace = TrainingTrace()

    def run(self, n_episodes: int | None = None) -> "DQNTrainer":
        """Train until ``config.n_episodes`` total, or ``n_episodes`` more."""
        cfg = self.config
        if n_episodes is None:
            target_total = cfg.n_episodes
        else:
            target_total = self.episodes_done + n_episodes
        while self.episodes_done < target_total:
            idx = int(self._rng_episode.integers(len(self._sessions)))
            env = SessionEnv(self._sessions[idx], None, mode=EnvMode.TRAIN,
                             states=self._states[idx])
            state = env.reset()
            epsilon = cfg.epsilon_at(self.episodes_done)
            ep_reward = 0.0
            losses = []
            while True:
                action = act_epsilon(self.online, state, epsilon,
                                     self._rng_action)
                out = env.step(action)
                self.buffer.push(state, action, out.reward, out.next_state,
                                 out.done)
                self.env_steps += 1
                if (len(self.buffer) >= cfg.batch_size
                        and self.env_steps % cfg.gradient_interval == 0):
                    batch = self.buffer.sample(cfg.batch_size, self._rng_sample)
                    losses.append(learn_step(
                        self.online, self.target, self.optimizer, batch,
                        cfg.gamma, cfg.loss, cfg.huber_delta))
                    self.grad_steps += 1
                    if self.grad_steps % cfg.target_sync_interval == 0:
                        self.target.load_from(self.online)
                ep_reward += out.reward
                if out.done:
                    break
                state = out.next_state
            self.episodes_done += 1
            self.trace.append(self.episodes_done, ep_reward,
                              float(np.mean(losses)) if losses else float("nan"),
                              epsilon)
        return self


def train(sessions: Sequence, encoder,
          config: AgentConfig | None = None) -> tuple[QNetwork, TrainingTrace]:
    """Train a fresh agent to ``config.n_episodes``; returns (net, trace)."""
    trainer = DQNTrainer(sessions, encoder, config)
    trainer.run()
    return trainer.online, trainer.trace


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    net: QNetwork
    schema: FeatureSchema
    config: AgentConfig
    meta: dict


def save_checkpoint(path, net: QNetwork, schema: FeatureSchema,
                    config: AgentConfig, meta: dict | None = None):
    """Persist weights plus full schema and config as one npz file."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "schema": schema_dump(schema),
        "dtype": str(net.dtype),
        "hidden_sizes": [w.shape[1] for w in net.weights[:-1]],
        "meta": meta or {},
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    header = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, header=header, **arrays)


def load_checkpoint(path) -> Checkpoint:
    """Restore a checkpoint; refuses version or width mismatches."""
    with np.load(path) as payload:
        doc = json.loads(bytes(payload["header"].tobytes()).decode())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        weights = []
        biases = []
        for i in range(len(doc["hidden_sizes"]) + 1):
            weights.append(payload[f"w{i}"])
            biases.append(payload[f"b{i}"])
    cfg = doc["config"]
    cfg["hidden_sizes"] = tuple(cfg["hidden_sizes"])
    config = AgentConfig(**cfg)
    schema = FeatureSchema.from_json(doc["schema"])
    if weights[0].shape[0] != schema.width:
        raise ValueError(
            f"checkpoint width {weights[0].shape[0]} does not match its "
            f"schema width {schema.width}")
    net = QNetwork.__new__(QNetwork)
    net.input_dim = weights[0].shape[0]
    net.n_actions = weights[-1].shape[1]
    net.dtype = np.dtype(doc["dtype"])
    net.weights = [w.astype(net.dtype) for w in weights]
    net.biases = [b.astype(net.dtype) for b in biases]
    return Checkpoint(net=net, schema=schema, config=config, meta=doc["meta"])


# ---------------------------------------------------------------------------
# Estimator facade

class SkipDQN(BaseEstimator):
    """Offline deep-Q skip predictor with a scikit-learn style surface.

    ``fit`` takes a list of sessions; labels live inside the records, so
    there is no separate ``y``.  ``encoder`` may be an unfitted
    :class:`StateEncoder` (fitted on the training sessions), a fitted one,
    or None for the default full schema.
    """

    def __init__(self, hidden_sizes=(128, 128, 128), learning_rate=1e-3,
                 gamma=0.9, batch_size=256, target_sync_interval=256,
                 gradient_interval=1, replay_capacity=10_000,
                 n_episodes=20_000, epsilon_start=1.0, epsilon_end=0.05,
                 epsilon_fraction=0.2, loss="huber", huber_delta=1.0,
                 dtype="float32", seed=0, encoder=None):
        self.hidden_sizes = hidden_sizes
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.batch_size = batch_size
        self.target_sync_interval = target_sync_interval
        self.gradient_interval = gradient_interval
        self.replay_capacity = replay_capacity
        self.n_episodes = n_episodes
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_fraction = epsilon_fraction
        self.loss = loss
        self.huber_delta = huber_delta
        self.dtype = dtype
        self.seed = seed
        self.encoder = encoder

    def _agent_config(self) -> AgentConfig:
        return AgentConfig(
            hidden_sizes=tuple(self.hidden_sizes),
            learning_rate=self.learning_rate, gamma=self.gamma,
            batch_size=self.batch_size,
            target_sync_interval=self.target_sync_interval,
            gradient_interval=self.gradient_interval,
            replay_capacity=self.replay_capacity, n_episodes=self.n_episodes,
            epsilon_start=self.epsilon_start, epsilon_end=self.epsilon_end,
            epsilon_fraction=self.epsilon_fraction, loss=self.loss,
            huber_delta=self.huber_delta, dtype=self.dtype, seed=self.seed)

    def fit(self, X, y=None):
        sessions = list(X)
        encoder = self.encoder
        if encoder is None:
            encoder = StateEncoder()
        if isinstance(encoder, FeatureSchema):
            encoder = StateEncoder.from_schema(encoder)
        if not hasattr(encoder, "schema_"):
            encoder = clone(encoder).fit(sessions)
        self.encoder_ = encoder
        self.config_ = self._agent_config()
        trainer = DQNTrainer(sessions, encoder, self.config_)
        trainer.run()
        self.network_ = trainer.online
        self.trace_ = trainer.trace
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(
                "this SkipDQN instance is not fitted yet; call fit first")

    def q_values(self, X) -> np.ndarray:
        """Per-record Q-values, shape (n_records, 2)."""
        self._check_fitted()
        states = self.encoder_.transform(X)
        return np.atleast_2d(self.network_.forward(states))

    def predict(self, X) -> np.ndarray:
        """Greedy skip decision per record (ties resolve to no-skip)."""
        return np.argmax(self.q_values(X), axis=1)

    def predict_session(self, session) -> np.ndarray:
        return self.predict([session])

    def score(self, X, y=None) -> float:
        """Mean MAA over sessions (higher is better)."""
        from .evaluation import evaluate
        return evaluate(self, list(X)).mean_maa

    def save(self, path):
        self._check_fitted()
        save_checkpoint(path, self.network_, self.encoder_.schema_,
                        self.config_)

    @classmethod
    def load(cls, path) -> "SkipDQN":
        bundle = load_checkpoint(path)
        model = cls(**asdict(bundle.config))
        model.config_ = bundle.config
        model.encoder_ = StateEncoder.from_schema(bundle.schema)
        model.network_ = bundle.net
        model.trace_ = TrainingTrace()
        return model
