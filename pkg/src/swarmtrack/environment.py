"""The tracking world: agent motion, target dynamics, sensing, shared reward.

A square obstacle-free map whose area grows linearly with the team size
so density stays fixed. Each step runs a locked phase order: agents move
(clamped to the map), targets move (reflecting off walls with extra
velocity noise the filter does not model), every belief predicts once,
in-view targets produce noisy range-bearing measurements that correct
the shared filter bank, and the team receives one scalar reward, the
negated mean belief log det covariance. Policy features are built from
beliefs predicted one step past the correction.

All randomness flows through splittable substreams keyed by phase, step,
and entity index, so episodes are bit-reproducible and per-entity noise
does not shift when other entities are added.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .belief import (
    DegenerateGeometryError,
    FilterBank,
    GaussianBelief,
    RangeBearingMeasurement,
    logdet,
    make_double_integrator,
    predict,
)
from .core import (
    Pose2,
    SeededStream,
    TargetPhase,
    action_from_index,
    global_to_local_polar,
    step_unicycle,
    wrap_angle,
)
from .encoding import FeatureSet, TargetFeature, encode_all

log = logging.getLogger(__name__)

# Density anchor: a 4-agent task runs on 2500 m^2.
AREA_PER_FOUR_AGENTS = 2500.0
MIN_AGENT_SEPARATION = 1.0
PLACEMENT_ATTEMPTS = 10_000


class PlacementInfeasibleError(RuntimeError):
    """Raised when rejection sampling cannot place the team."""


def map_area_for(n: int) -> float:
    """Map area in m^2 keeping agent density constant: 2500 * n / 4."""
    if n < 1:
        raise ValueError(f"need at least one agent, got {n}")
    return AREA_PER_FOUR_AGENTS * n / 4.0


def map_side_for(n: int) -> float:
    """Side length of the square map for n agents."""
    return math.sqrt(map_area_for(n))


@dataclass(frozen=True)
class WorldConfig:
    """Static episode parameters: geometry, dynamics, sensing, filter."""

    n_agents: int
    m_targets: int
    map_side: float
    horizon: int = 200
    dt: float = 0.5
    sensing_radius: float = 10.0
    fov_half_angle: float = math.pi / 4
    v_max: float = 2.0
    target_noise: float = 0.01
    wall_noise_std: float = 0.5
    filter_q: float = 0.01
    sigma_r: float = 0.2
    sigma_theta: float = 0.02
    init_cov_diag: tuple = (2.0, 2.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 1 or self.m_targets < 1:
            raise ValueError("need at least one agent and one target")
        for name in ("map_side", "horizon", "dt", "sensing_radius", "v_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.fov_half_angle <= math.pi:
            raise ValueError(f"fov_half_angle {self.fov_half_angle} outside (0, pi]")
        if min(self.target_noise, self.wall_noise_std, self.filter_q,
               self.sigma_r, self.sigma_theta) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if len(self.init_cov_diag) != 4 or min(self.init_cov_diag) <= 0:
            raise ValueError("init_cov_diag must be 4 positive variances")

    @classmethod
    def scaled(cls, n_agents: int, m_targets: int, **kw) -> "WorldConfig":
        """Config with the density-scaled square map for this team size."""
        return cls(n_agents=n_agents, m_targets=m_targets,
                   map_side=map_side_for(n_agents), **kw)

    @property
    def measurement_cov(self) -> np.ndarray:
        return np.diag([self.sigma_r**2, self.sigma_theta**2])


@dataclass
class WorldState:
    """Mutable episode state; one writer, stepped in place."""

    step: int
    agents: list
    targets: list
    bank: FilterBank
    done: bool
    # velocity each agent commanded with its last action, for the
    # relative-rate features; zero at reset
    agent_velocities: list = field(default_factory=list)


class StepResult:
    """Per-agent observations plus the single shared reward.

    features_array is the (n, m, 6) block the policy consumes directly;
    per_agent_features wraps the same rows as FeatureSet objects on
    demand.
    """

    def __init__(self, features_array: np.ndarray, reward: float, done: bool,
                 observed: np.ndarray):
        if not math.isfinite(reward):
            raise ValueError(f"reward must be finite, got {reward}")
        self.features_array = features_array
        self.reward = float(reward)
        self.done = bool(done)
        self.observed = observed
        self._sets = None

    @property
    def per_agent_features(self) -> list[FeatureSet]:
        if self._sets is None:
            m = self.features_array.shape[1]
            ids = tuple(range(m))
            self._sets = [
                FeatureSet(tuple(TargetFeature(*row) for row in agent_rows), ids)
                for agent_rows in self.features_array
            ]
        return self._sets


@lru_cache(maxsize=32)
def _target_model(dt: float, q: float):
    A, W = make_double_integrator(dt, q)
    L = np.linalg.cholesky(W) if q > 0 else np.zeros((4, 4))
    for arr in (A, W, L):
        arr.setflags(write=False)
    return A, W, L


# ------------------------------------------------------------------ reset

def reset(cfg: WorldConfig, stream: SeededStream) -> tuple[WorldState, StepResult]:
    """Place the team and targets, initialize beliefs, return (state, obs).

    Substreams: split(0,0) agent placement, split(0,1) target placement,
    split(0,2) belief initialization. No sensing happens at reset; the
    observed flags reflect pure FOV geometry and the reward entry is the
    initial uncertainty level.
    """
    side = cfg.map_side
    agent_stream = stream.split(0, 0)
    agents: list[Pose2] = []
    attempts = 0
    while len(agents) < cfg.n_agents:
        x, y = agent_stream.uniform(0.0, side, 2)
        attempts += 1
        if attempts > PLACEMENT_ATTEMPTS:
            raise PlacementInfeasibleError(
                f"could not place {cfg.n_agents} agents {MIN_AGENT_SEPARATION} m "
                f"apart on a {side:.1f} m map in {PLACEMENT_ATTEMPTS} attempts"
            )
        if any(math.hypot(x - a.x, y - a.y) < MIN_AGENT_SEPARATION for a in agents):
            continue
        heading = agent_stream.uniform(-math.pi, math.pi)
        agents.append(Pose2(float(x), float(y), float(heading)))

    target_stream = stream.split(0, 1)
    targets: list[TargetPhase] = []
    for _ in range(cfg.m_targets):
        anchor = agents[int(target_stream.integers(0, cfg.n_agents))]
        dist = target_stream.uniform(5.0, 10.0)
        ang = target_stream.uniform(-math.pi, math.pi)
        px = min(max(anchor.x + dist * math.cos(ang), 0.0), side)
        py = min(max(anchor.y + dist * math.sin(ang), 0.0), side)
        targets.append(TargetPhase(float(px), float(py), 0.0, 0.0))

    bank = FilterBank.create(
        targets, cfg.dt, cfg.filter_q, stream.split(0, 2),
        init_cov=np.diag(cfg.init_cov_diag),
    )
    state = WorldState(
        step=0, agents=agents, targets=targets, bank=bank, done=False,
        agent_velocities=[(0.0, 0.0)] * cfg.n_agents,
    )
    flags = _fov_flags(_pose_array(state), _target_positions(state), cfg)
    return state, StepResult(
        _policy_features(state, cfg, flags), reward(bank), False, flags,
    )


# ------------------------------------------------------------------ dynamics

def target_step(t: TargetPhase, cfg: WorldConfig, stream: SeededStream) -> TargetPhase:
    """One double-integrator step with wall reflection and speed clamp.

    Process noise is N(0, W). A wall hit reflects the offending position
    coordinate, negates that velocity component, and adds N(0,
    wall_noise_std^2) to both velocity components; the filter never sees
    that extra term. Speed is clamped to v_max preserving direction.
    """
    A, _, L = _target_model(cfg.dt, cfg.target_noise)
    phase = A @ np.array([t.px, t.py, t.vx, t.vy])
    if cfg.target_noise > 0:
        phase = phase + L @ stream.normal(size=4)
    px, py, vx, vy = phase
    side = cfg.map_side
    reflected = False
    while not 0.0 <= px <= side or not 0.0 <= py <= side:
        if px < 0.0:
            px, vx, reflected = -px, -vx, True
        elif px > side:
            px, vx, reflected = 2.0 * side - px, -vx, True
        if py < 0.0:
            py, vy, reflected = -py, -vy, True
        elif py > side:
            py, vy, reflected = 2.0 * side - py, -vy, True
    if reflected:
        vx += stream.normal(0.0, cfg.wall_noise_std)
        vy += stream.normal(0.0, cfg.wall_noise_std)
    speed = math.hypot(vx, vy)
    if speed > cfg.v_max:
        scale = cfg.v_max / speed
        vx *= scale
        vy *= scale
    return TargetPhase(float(px), float(py), float(vx), float(vy))


# ------------------------------------------------------------------ sensing

def in_fov(agent: Pose2, point: tuple[float, float], cfg: WorldConfig) -> bool:
    """True iff the point lies in the agent's sensing sector."""
    r, bearing = global_to_local_polar(agent, point)
    return r <= cfg.sensing_radius and abs(bearing) <= cfg.fov_half_angle


def _fov_flags(poses: np.ndarray, tpos: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    """(n, m) boolean visibility matrix; vector twin of in_fov."""
    dx = tpos[None, :, 0] - poses[:, None, 0]
    dy = tpos[None, :, 1] - poses[:, None, 1]
    r = np.hypot(dx, dy)
    raw = np.arctan2(dy, dx) - poses[:, 2:3]
    bearing = np.pi - (np.pi - raw) % (2.0 * np.pi)
    bearing = np.where(r < 1e-12, 0.0, bearing)  # coincident convention
    return (r <= cfg.sensing_radius) & (np.abs(bearing) <= cfg.fov_half_angle)


def sense_and_update(state: WorldState, cfg: WorldConfig,
                     stream: SeededStream) -> np.ndarray:
    """Measure every in-view (agent, target) pair and correct the bank.

    Updates apply in ascending (agent, target) order. Measurement noise
    for pair (i, j) comes from substream split(2, step, i, j); negative
    noisy ranges clamp to zero. A degenerate geometry skips that single
    update. Returns the (n, m) observed-flag matrix.
    """
    flags = _fov_flags(_pose_array(state), _target_positions(state), cfg)
    R = cfg.measurement_cov
    for i, j in np.argwhere(flags):
        agent = state.agents[i]
        tj = state.targets[j]
        r_true, b_true = global_to_local_polar(agent, (tj.px, tj.py))
        ms = stream.split(2, state.step, int(i), int(j))
        z_r = max(0.0, r_true + float(ms.normal(0.0, cfg.sigma_r)))
        z_b = wrap_angle(b_true + float(ms.normal(0.0, cfg.sigma_theta)))
        try:
            state.bank.update(int(j), RangeBearingMeasurement(z_r, z_b, agent), R)
        except DegenerateGeometryError:
            log.warning("skipping degenerate update: agent %d on target %d", i, j)
    return flags


# ------------------------------------------------------------------ reward

def reward(bank: FilterBank) -> float:
    """Shared scalar: negated mean log det of the belief covariances."""
    return float(-np.mean(bank.logdets()))


# ------------------------------------------------------------------ step

def step(state: WorldState, actions, cfg: WorldConfig,
         stream: SeededStream) -> StepResult:
    """Advance the world one synchronized step.

    Phases: agents move (clamped), targets move, beliefs predict, sensing
    corrects the bank, reward is computed from the corrected covariances,
    features are built from a one-step side-copy prediction, and the step
    counter advances. Target j's process noise comes from substream
    split(1, step, j).
    """
    if state.done:
        raise ValueError("episode is done; reset before stepping again")
    if len(actions) != len(state.agents):
        raise ValueError(f"got {len(actions)} actions for {len(state.agents)} agents")
    side = cfg.map_side

    new_agents = []
    velocities = []
    for pose, a in zip(state.agents, actions):
        prim = action_from_index(int(a))
        new_agents.append(_clamped(pose, prim, cfg))
        velocities.append((prim.linear_speed * math.cos(pose.heading),
                           prim.linear_speed * math.sin(pose.heading)))
    state.agents = new_agents
    state.agent_velocities = velocities

    state.targets = [
        target_step(t, cfg, stream.split(1, state.step, j))
        for j, t in enumerate(state.targets)
    ]
    state.bank.predict_all()
    flags = sense_and_update(state, cfg, stream)
    r = reward(state.bank)
    features = _policy_features(state, cfg, flags)
    state.step += 1
    state.done = state.step >= cfg.horizon
    return StepResult(features, r, state.done, flags)


def _clamped(pose: Pose2, prim, cfg: WorldConfig) -> Pose2:
    moved = step_unicycle(pose, prim, cfg.dt)
    return Pose2(
        min(max(moved.x, 0.0), cfg.map_side),
        min(max(moved.y, 0.0), cfg.map_side),
        moved.heading,
    )


def _pose_array(state: WorldState) -> np.ndarray:
    return np.array([[a.x, a.y, a.heading] for a in state.agents])


def _target_positions(state: WorldState) -> np.ndarray:
    return np.array([[t.px, t.py] for t in state.targets])


def _policy_features(state: WorldState, cfg: WorldConfig,
                     flags: np.ndarray) -> np.ndarray:
    """Features from the corrected bank predicted one step ahead (side copy)."""
    pred = [predict(b, state.bank.A, state.bank.W) for b in state.bank.beliefs]
    means = np.array([p.mean for p in pred])
    lds = np.array([logdet(p) for p in pred])
    return encode_all(
        _pose_array(state), np.array(state.agent_velocities, dtype=float),
        means, lds, flags,
    )


# ------------------------------------------------------------------ traces

class TraceWriter:
    """Line-delimited JSON episode log, one record per step."""

    def __init__(self, path):
        self._f = open(path, "w")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def trace_record(state: WorldState, actions, result: StepResult) -> dict:
    """Snapshot of one completed step (actions None for the reset record)."""
    return {
        "step": state.step,
        "agents": [[a.x, a.y, a.heading] for a in state.agents],
        "targets": [[t.px, t.py, t.vx, t.vy] for t in state.targets],
        "belief_means": [b.mean.tolist() for b in state.bank.beliefs],
        "belief_logdets": state.bank.logdets().tolist(),
        "observed": result.observed.astype(int).tolist(),
        "actions": None if actions is None else [int(a) for a in actions],
        "reward": result.reward,
    }


def read_trace(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def episode_return_from_trace(records: list[dict]) -> float:
    """Undiscounted return recomputed from logged logdets (excludes reset)."""
    total = 0.0
    for rec in records:
        if rec["actions"] is None:
            continue
        total += -sum(rec["belief_logdets"]) / len(rec["belief_logdets"])
    return total
