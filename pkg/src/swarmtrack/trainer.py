"""Shared-policy soft double Q-learning over the tracking world.

One pair of online value nets and one pair of slowly tracking targets
serve every agent; each agent feeds its own feature set through the same
parameters, and every transition lands in a single replay buffer. Team
size and target count are resampled per episode to keep the policy from
overfitting one cardinality. Targets for the TD error use the minimum of
the two target nets, either greedily (deterministic mode) or under the
entropy-regularized expectation (stochastic mode).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import N_ACTIONS, SeededStream
from .encoding import FeatureSet
from .environment import StepResult, WorldConfig, WorldState, reset, step
from .valuenet import (
    NetConfig,
    NetParams,
    init_params,
    polyak_update,
    qgrad,
    qvalues,
    save_checkpoint,
)


class TrainingDivergedError(RuntimeError):
    """Loss or parameters went non-finite during an update."""


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class Transition:
    """One agent's view of one synchronized world step."""

    s: FeatureSet
    a: int
    r: float
    s_next: FeatureSet
    done: bool

    def __post_init__(self):
        if not 0 <= self.a < N_ACTIONS:
            raise ValueError(f"action index {self.a} out of range")
        if not math.isfinite(self.r):
            raise ValueError("reward must be finite")
        if len(self.s.features) != len(self.s_next.features):
            raise ValueError("cardinality changed within a transition")


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._data: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._data)

    def add(self, t: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(t)
        else:
            self._data[self._cursor] = t
        self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int, stream: SeededStream) -> list[Transition]:
        """Uniform over occupied slots, with replacement."""
        if not self._data:
            raise ValueError("cannot sample from an empty buffer")
        idx = stream.rng.integers(0, len(self._data), size=batch_size)
        return [self._data[i] for i in idx]


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear decay from start to end over decay_steps, then flat."""

    alpha_start: float
    alpha_end: float
    decay_steps: int

    def __post_init__(self):
        if self.alpha_start <= 0 or self.alpha_end <= 0:
            raise ValueError("schedule endpoints must be positive")
        if self.alpha_end > self.alpha_start:
            raise ValueError("schedule must not increase")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be at least 1")

    def value(self, env_steps: int) -> float:
        frac = min(max(env_steps, 0) / self.decay_steps, 1.0)
        return self.alpha_start + frac * (self.alpha_end - self.alpha_start)


@dataclass(frozen=True)
class TrainConfig:
    # schedules default to decaying over the first half of the default
    # step budget; none of these are claimed as published values
    n_max: int = 4
    m_max: int = 4
    gamma: float = 0.99
    tau: float = 0.005
    alpha_schedule: AlphaSchedule = AlphaSchedule(0.5, 0.05, 100_000)
    batch_size: int = 256
    buffer_capacity: int = 500_000
    learning_rate: float = 3e-4
    grad_clip_norm: float = 10.0
    steps_per_update: int = 1
    total_env_steps: int = 200_000
    eval_interval: int = 50_000
    mode: str = "stochastic"
    epsilon_schedule: AlphaSchedule = AlphaSchedule(1.0, 0.05, 100_000)
    reward_scale: float = 1.0
    soft_policy_from: str = "target"

    def __post_init__(self):
        if self.n_max < 1 or self.m_max < 1:
            raise ValueError("n_max and m_max must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("batch_size", "buffer_capacity", "steps_per_update",
                     "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and grad_clip_norm must be positive")
        if self.total_env_steps < 0:
            raise ValueError("total_env_steps must be nonnegative")
        if self.mode not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.soft_policy_from not in ("target", "online"):
            raise ValueError(f"unknown soft_policy_from {self.soft_policy_from!r}")


@dataclass
class QNets:
    """The two online nets and their Polyak-tracked targets."""

    online: tuple[NetParams, NetParams]
    target: tuple[NetParams, NetParams]

    @classmethod
    def fresh(cls, net_cfg: NetConfig, stream: SeededStream) -> "QNets":
        q1 = init_params(net_cfg, stream.split(0))
        q2 = init_params(net_cfg, stream.split(1))
        return cls(online=(q1, q2), target=(q1.copy(), q2.copy()))


# ----------------------------------------------------------- policy math

def sample_task(cfg: TrainConfig, stream: SeededStream) -> tuple[int, int]:
    """Independent uniform draws of team size and target count."""
    n = int(stream.rng.integers(1, cfg.n_max + 1))
    m = int(stream.rng.integers(1, cfg.m_max + 1))
    return n, m


def _policy_rows(q: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    # max-subtracted softmax of q/alpha per row; logp stays finite even
    # when the probabilities underflow, so p*logp never produces nan
    z = (q - q.max(axis=-1, keepdims=True)) / alpha
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    return np.exp(logp), logp


def policy_distribution(q, alpha: float) -> np.ndarray:
    """Softmax of q/alpha, computed with max subtraction."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("q values must be finite")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    p, _ = _policy_rows(q, alpha)
    return p


def _batch_actions(F: np.ndarray, online, alpha: float, mode: str,
                   stream: SeededStream, epsilon: float = 0.0) -> list[int]:
    """Actions for a (n, m, 6) observation block, drawn in agent order."""
    if mode == "stochastic":
        q = np.minimum(qvalues(F, online[0]), qvalues(F, online[1]))
        return [
            int(stream.rng.choice(q.shape[1], p=policy_distribution(row, alpha)))
            for row in q
        ]
    if mode == "deterministic":
        q = qvalues(F, online[0]) + qvalues(F, online[1])
        out = []
        for row in q:
            if stream.rng.random() < epsilon:
                out.append(int(stream.rng.integers(N_ACTIONS)))
            else:
                out.append(int(np.argmax(row)))
        return out
    raise ValueError(f"unknown mode {mode!r}")


def select_action(fs: FeatureSet, online, alpha: float, mode: str,
                  stream: SeededStream, epsilon: float = 0.0) -> int:
    """One agent's action under the shared nets.

    Stochastic mode samples the softmax of the elementwise minimum of
    the two online Q-vectors; deterministic mode is epsilon-greedy over
    their sum, ties to the lowest index.
    """
    return _batch_actions(fs.to_array()[None], online, alpha, mode,
                          stream, epsilon)[0]


# ---------------------------------------------------------- TD targets

def clipped_bootstrap(q_sum: np.ndarray, qt1: np.ndarray,
                      qt2: np.ndarray) -> float:
    """Greedy pick on q_sum (ties to lowest index), scored by the
    smaller of the two target estimates at that action."""
    a_star = int(np.argmax(q_sum))
    return float(min(qt1[a_star], qt2[a_star]))


def soft_state_value(qt1: np.ndarray, qt2: np.ndarray, alpha: float,
                     policy_q: np.ndarray | None = None) -> float:
    """min_k E_pi[Q_k - alpha log pi] under the softmax policy of
    policy_q / alpha (elementwise minimum of the targets when omitted).

    The entropy term is policy-only, so the k-minimum reduces to the
    minimum of the two expectations plus alpha times the entropy.
    """
    if policy_q is None:
        policy_q = np.minimum(qt1, qt2)
    p, logp = _policy_rows(np.asarray(policy_q, dtype=np.float64), alpha)
    entropy = -float(p @ logp)
    return min(float(p @ qt1), float(p @ qt2)) + alpha * entropy


def hard_double_q_target(t: Transition, online, target, gamma: float) -> float:
    """Clipped double-Q bootstrap: online nets pick, targets score."""
    if t.done:
        return t.r
    F = t.s_next.to_array()[None]
    return t.r + gamma * clipped_bootstrap(
        qvalues(F, online[0])[0] + qvalues(F, online[1])[0],
        qvalues(F, target[0])[0], qvalues(F, target[1])[0])


def soft_double_q_target(t: Transition, target, alpha: float, gamma: float,
                         policy_nets=None) -> float:
    """Entropy-regularized bootstrap.

    The expectation is evaluated per target net and the minimum over k
    taken afterwards. The policy is the softmax of the elementwise
    minimum over policy_nets, the target pair itself when omitted.
    """
    if t.done:
        return t.r
    F = t.s_next.to_array()[None]
    qt1 = qvalues(F, target[0])[0]
    qt2 = qvalues(F, target[1])[0]
    if policy_nets is None:
        qp = None
    else:
        qp = np.minimum(qvalues(F, policy_nets[0])[0],
                        qvalues(F, policy_nets[1])[0])
    return t.r + gamma * soft_state_value(qt1, qt2, alpha, qp)


def huber(e, delta: float = 1.0):
    """Quadratic within delta of zero, linear outside."""
    e = np.asarray(e, dtype=np.float64)
    a = np.abs(e)
    out = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _huber_grad(e: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(e, -delta, delta)


# ------------------------------------------------------------- optimizer

class Adam:
    """Diagonal adaptive-moment stepper over one flat parameter vector."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m += (1.0 - self.beta1) * (grad - self.m)
        self.v += (1.0 - self.beta2) * (grad * grad - self.v)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------- update

def _grouped_by_cardinality(batch: list[Transition]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(batch):
        groups.setdefault(len(t.s.features), []).append(i)
    return groups


def update_step(batch: list[Transition], nets: QNets, cfg: TrainConfig,
                alpha: float, opt: tuple[Adam, Adam]) -> float:
    """One clipped gradient step on both online nets; Polyak after.

    Transitions are grouped by set cardinality so each group runs as one
    fixed-shape batch. Targets are constants: only the online Q(s, a)
    terms carry gradient. Returns the mean summed Huber loss.
    """
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    o1, o2 = nets.online
    t1, t2 = nets.target
    g1 = np.zeros(o1.n_values)
    g2 = np.zeros(o2.n_values)
    loss = 0.0

    for _, idx in sorted(_grouped_by_cardinality(batch).items()):
        sub = [batch[i] for i in idx]
        Fs = np.stack([t.s.to_array() for t in sub])
        Fn = np.stack([t.s_next.to_array() for t in sub])
        r = np.array([t.r for t in sub]) * cfg.reward_scale
        a = np.array([t.a for t in sub])
        live = 1.0 - np.array([t.done for t in sub], dtype=np.float64)
        rows = np.arange(len(sub))

        qt1 = qvalues(Fn, t1)
        qt2 = qvalues(Fn, t2)
        if cfg.mode == "stochastic":
            if cfg.soft_policy_from == "online":
                qp = np.minimum(qvalues(Fn, o1), qvalues(Fn, o2))
            else:
                qp = np.minimum(qt1, qt2)
            p, logp = _policy_rows(qp, alpha)
            expected = np.minimum(np.sum(p * qt1, axis=1),
                                  np.sum(p * qt2, axis=1))
            entropy = -np.sum(p * logp, axis=1)
            y = r + cfg.gamma * live * (expected + alpha * entropy)
        else:
            a_star = np.argmax(qvalues(Fn, o1) + qvalues(Fn, o2), axis=1)
            y = r + cfg.gamma * live * np.minimum(qt1[rows, a_star],
                                                  qt2[rows, a_star])

        q1 = qvalues(Fs, o1)
        q2 = qvalues(Fs, o2)
        e1 = q1[rows, a] - y
        e2 = q2[rows, a] - y
        loss += float(np.sum(huber(e1) + huber(e2)))
        dQ1 = np.zeros_like(q1)
        dQ2 = np.zeros_like(q2)
        dQ1[rows, a] = _huber_grad(e1) / B
        dQ2[rows, a] = _huber_grad(e2) / B
        g1 += qgrad(Fs, dQ1, o1)
        g2 += qgrad(Fs, dQ2, o2)

    loss /= B
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss on batch of {B} (alpha={alpha}, "
            f"|theta1|max={np.abs(o1.theta).max():.3g})")

    norm = math.sqrt(float(g1 @ g1) + float(g2 @ g2))
    if norm > cfg.grad_clip_norm:
        scale = cfg.grad_clip_norm / norm
        g1 *= scale
        g2 *= scale
    opt[0].step(o1.theta, g1)
    opt[1].step(o2.theta, g2)
    nets.target = (polyak_update(t1, o1, cfg.tau),
                   polyak_update(t2, o2, cfg.tau))
    return loss


# ------------------------------------------------------------ collection

def collect_episode(world_cfg: WorldConfig, state: WorldState,
                    first: StepResult, nets: QNets, cfg: TrainConfig,
                    buffer: ReplayBuffer, world_stream: SeededStream,
                    action_stream: SeededStream, alpha: float,
                    epsilon: float = 0.0) -> float:
    """Roll one episode to completion under the shared policy.

    Every step stores one transition per agent, all carrying the shared
    reward. world_stream must be the stream reset() consumed so process
    and measurement noise stay on their keyed substreams; action_stream
    is drawn once per agent per step in ascending agent order.
    """
    fs = first.per_agent_features
    obs = first.features_array
    ep_return = 0.0
    while not state.done:
        actions = _batch_actions(obs, nets.online, alpha, cfg.mode,
                                 action_stream, epsilon)
        res = step(state, actions, world_cfg, world_stream)
        nxt = res.per_agent_features
        for i, a in enumerate(actions):
            buffer.add(Transition(fs[i], a, res.reward, nxt[i], res.done))
        ep_return += res.reward
        fs = nxt
        obs = res.features_array
    return ep_return


# -------------------------------------------------------------- training

@dataclass
class TrainResult:
    curve_path: Path
    checkpoint_paths: list[Path]
    rows: list[dict]
    nets: QNets
    env_steps: int


_CURVE_COLUMNS = ("env_steps", "episode", "n", "m", "online_return",
                  "loss", "alpha", "epsilon")


def _save(nets: QNets, out_dir: Path, env_steps: int) -> Path:
    path = out_dir / f"checkpoint_{env_steps:09d}.qnet"
    save_checkpoint(path, {
        "q1": nets.online[0], "q2": nets.online[1],
        "q1_target": nets.target[0], "q2_target": nets.target[1],
    })
    return path


def train(cfg: TrainConfig, stream: SeededStream, out_dir,
          world_overrides: dict | None = None,
          net_cfg: NetConfig | None = None) -> TrainResult:
    """Alternate full-episode collection with per-episode update sweeps.

    Each iteration samples (n, m), rolls one episode, then runs
    horizon // steps_per_update gradient updates once the buffer holds a
    full batch. Writes the per-episode curve as CSV and checkpoints each
    time the step counter crosses an eval_interval boundary. Fully
    deterministic for a fixed stream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net_cfg = net_cfg or NetConfig()
    overrides = dict(world_overrides or {})

    nets = QNets.fresh(net_cfg, stream.split(0))
    task_stream = stream.split(1)
    sample_stream = stream.split(2)
    opt = (Adam(nets.online[0].n_values, cfg.learning_rate),
           Adam(nets.online[1].n_values, cfg.learning_rate))
    buffer = ReplayBuffer(cfg.buffer_capacity)

    checkpoints = [_save(nets, out_dir, 0)]
    rows: list[dict] = []
    env_steps = 0
    episode = 0
    next_ckpt = cfg.eval_interval

    curve_path = out_dir / "training_curve.csv"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CURVE_COLUMNS)
        while env_steps < cfg.total_env_steps:
            n, m = sample_task(cfg, task_stream)
            world_cfg = WorldConfig.scaled(n, m, **overrides)
            state, res = reset(world_cfg, stream.split(3, episode))
            alpha = cfg.alpha_schedule.value(env_steps)
            epsilon = cfg.epsilon_schedule.value(env_steps)
            ep_return = collect_episode(
                world_cfg, state, res, nets, cfg, buffer,
                stream.split(3, episode), stream.split(4, episode),
                alpha, epsilon)
            env_steps += world_cfg.horizon

            losses = []
            if len(buffer) >= cfg.batch_size:
                for _ in range(world_cfg.horizon // cfg.steps_per_update):
                    batch = buffer.sample(cfg.batch_size, sample_stream)
                    losses.append(update_step(batch, nets, cfg, alpha, opt))
            loss = float(np.mean(losses)) if losses else math.nan

            row = dict(zip(_CURVE_COLUMNS, (
                env_steps, episode, n, m, ep_return, loss, alpha, epsilon)))
            rows.append(row)
            writer.writerow([row[c] for c in _CURVE_COLUMNS])
            fh.flush()
            episode += 1
            if env_steps >= next_ckpt:
                checkpoints.append(_save(nets, out_dir, env_steps))
                next_ckpt += cfg.eval_interval

    if env_steps > 0 and checkpoints[-1] != out_dir / f"checkpoint_{env_steps:09d}.qnet":
        checkpoints.append(_save(nets, out_dir, env_steps))
    return TrainResult(curve_path, checkpoints, rows, nets, env_steps)
