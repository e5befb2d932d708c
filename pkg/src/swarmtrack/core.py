"""Shared geometry, the discrete motion-primitive action set, and seeded RNG streams.

All angles are radians in (-pi, pi], world frame x-east / y-north,
counter-clockwise positive. Distances are meters, speeds m/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Motion primitives: 4 linear speeds x 3 turn rates, enumerated speed-major.
SPEEDS = (0.0, 0.67, 1.33, 2.0)
TURN_RATES = (-math.pi / 4, 0.0, math.pi / 4)
N_ACTIONS = len(SPEEDS) * len(TURN_RATES)


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y, heading) of a pursuer agent."""

    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class TargetPhase:
    """Position and velocity of one target."""

    px: float
    py: float
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class ActionPrimitive:
    """One (linear speed, turn rate) motion primitive."""

    linear_speed: float
    turn_rate: float


def action_from_index(i: int) -> ActionPrimitive:
    """Return the i-th motion primitive (speed-major, turn-minor order)."""
    if not 0 <= i < N_ACTIONS:
        raise ValueError(f"action index {i} outside [0, {N_ACTIONS})")
    return ActionPrimitive(SPEEDS[i // len(TURN_RATES)], TURN_RATES[i % len(TURN_RATES)])


def index_of(a: ActionPrimitive) -> int:
    """Inverse of action_from_index."""
    try:
        si = SPEEDS.index(a.linear_speed)
        ti = TURN_RATES.index(a.turn_rate)
    except ValueError:
        raise ValueError(f"{a} is not one of the {N_ACTIONS} motion primitives") from None
    return si * len(TURN_RATES) + ti


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi].

    Parameters
    ----------
    a : float
        Angle in radians; must be finite.
    """
    if not math.isfinite(a):
        raise ValueError(f"cannot wrap non-finite angle {a}")
    return math.pi - (math.pi - a) % TWO_PI


def step_unicycle(p: Pose2, a: ActionPrimitive, dt: float) -> Pose2:
    """Advance a unicycle pose by one forward-Euler step.

    x' = x + v cos(theta) dt, y' = y + v sin(theta) dt,
    theta' = wrap(theta + omega dt).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return Pose2(
        p.x + a.linear_speed * math.cos(p.heading) * dt,
        p.y + a.linear_speed * math.sin(p.heading) * dt,
        wrap_angle(p.heading + a.turn_rate * dt),
    )


def global_to_local_polar(agent: Pose2, point: tuple[float, float]) -> tuple[float, float]:
    """Polar coordinates (range, bearing) of a world point in the agent frame.

    Bearing is measured from the agent heading, wrapped into (-pi, pi].
    A point coincident with the agent returns (0, 0) by convention.
    """
    dx = point[0] - agent.x
    dy = point[1] - agent.y
    r = math.hypot(dx, dy)
    if r == 0.0:
        return 0.0, 0.0
    return r, wrap_angle(math.atan2(dy, dx) - agent.heading)


class SeededStream:
    """Deterministic, splittable random stream.

    Built on a counter-based Philox generator keyed by (seed, *path).
    The same seed and call sequence always reproduce the same values, and
    ``split`` derives independent substreams (e.g. per episode, per agent)
    without consuming state from the parent.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.rng = np.random.Generator(np.random.Philox(ss))

    def split(self, *path: int) -> "SeededStream":
        """Derive the substream identified by appending ``path`` to this key."""
        return SeededStream(self.seed, *self.path, *path)

    # Thin delegation to the underlying Generator for the draws the
    # simulator actually uses.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.rng.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.rng.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.rng.integers(low, high, size)

    def random(self, size=None):
        return self.rng.random(size)

    def __repr__(self) -> str:
        return f"SeededStream(seed={self.seed}, path={self.path})"
