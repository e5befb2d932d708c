"""Per-target observation features in the agent frame, plus the k-nearest mask.

Each target belief becomes a 6-feature vector
[r, theta, r_dot, theta_dot, logdet_cov, observed] relative to one agent,
and an observation is the set of those vectors. ``mask_k_nearest`` is the
scaling heuristic: keep only the k nearest beliefs by range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .belief import GaussianBelief, logdet
from .core import Pose2, global_to_local_polar

FEATURE_DIM = 6


@dataclass(frozen=True)
class TargetFeature:
    """One target's belief summarized in an agent's local polar frame."""

    r: float
    theta: float
    r_dot: float
    theta_dot: float
    logdet_cov: float
    observed: float

    def as_tuple(self) -> tuple:
        return (self.r, self.theta, self.r_dot, self.theta_dot,
                self.logdet_cov, self.observed)


@dataclass(frozen=True)
class FeatureSet:
    """An unordered collection of target features with their target ids."""

    features: tuple
    target_ids: tuple

    def __post_init__(self):
        if len(self.features) != len(self.target_ids):
            raise ValueError("features and target_ids must be parallel")
        if len(self.features) < 1:
            raise ValueError("feature set must contain at least one target")
        if len(set(self.target_ids)) != len(self.target_ids):
            raise ValueError(f"duplicate target ids in {self.target_ids}")

    def __len__(self) -> int:
        return len(self.features)

    def to_array(self) -> np.ndarray:
        """Stack into a (cardinality, 6) float array, row order preserved."""
        return np.array([f.as_tuple() for f in self.features], dtype=np.float64)


def encode_target(
    agent: Pose2,
    agent_velocity: tuple[float, float],
    belief: GaussianBelief,
    observed: bool,
) -> TargetFeature:
    """Feature vector for one belief as seen from one agent.

    Range and bearing come from the belief position mean; the range and
    bearing rates are analytic, from the relative velocity (belief
    velocity minus agent velocity) rotated into the agent frame:
    r_dot = (dp . dv) / r and theta_dot = (dp x dv) / r^2. A belief mean
    within 1e-6 m of the agent zeroes both rates by convention.
    """
    r, theta = global_to_local_polar(agent, (belief.mean[0], belief.mean[1]))
    if r < 1e-6:
        r_dot = theta_dot = 0.0
    else:
        c, s = math.cos(agent.heading), math.sin(agent.heading)
        gx, gy = belief.mean[0] - agent.x, belief.mean[1] - agent.y
        dvx_g = belief.mean[2] - agent_velocity[0]
        dvy_g = belief.mean[3] - agent_velocity[1]
        # rotate both into the agent frame (R(-heading))
        px, py = c * gx + s * gy, -s * gx + c * gy
        vx, vy = c * dvx_g + s * dvy_g, -s * dvx_g + c * dvy_g
        r_dot = (px * vx + py * vy) / r
        theta_dot = (px * vy - py * vx) / r**2
    return TargetFeature(r, theta, r_dot, theta_dot, logdet(belief),
                         1.0 if observed else 0.0)


def encode_observation(
    agent: Pose2,
    agent_velocity: tuple[float, float],
    beliefs: list[GaussianBelief],
    observed: list[bool],
) -> FeatureSet:
    """Full observation for one agent: one feature per target, ids [0..m)."""
    if len(beliefs) < 1:
        raise ValueError("need at least one target belief")
    if len(observed) != len(beliefs):
        raise ValueError("observed flags must be parallel to beliefs")
    feats = tuple(
        encode_target(agent, agent_velocity, b, o)
        for b, o in zip(beliefs, observed)
    )
    return FeatureSet(feats, tuple(range(len(beliefs))))


def mask_k_nearest(fs: FeatureSet, k: int) -> FeatureSet:
    """Keep the min(k, |fs|) features with smallest range.

    Ties break toward the lower target id, and survivors keep their
    original relative order. k=1 is the greedy nearest-target baseline.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if k >= len(fs):
        return fs
    ranked = sorted(range(len(fs)), key=lambda i: (fs.features[i].r, fs.target_ids[i]))
    keep = sorted(ranked[:k])  # restore original order
    return FeatureSet(
        tuple(fs.features[i] for i in keep),
        tuple(fs.target_ids[i] for i in keep),
    )


# Array-level twins of the encoders above. The simulator and evaluator
# run on (n, m, 6) blocks; tests pin these to the per-object versions.

def encode_all(
    poses: np.ndarray,
    velocities: np.ndarray,
    means: np.ndarray,
    logdets: np.ndarray,
    observed: np.ndarray,
) -> np.ndarray:
    """Feature block (n, m, 6) for all agents against all beliefs.

    poses is (n, 3) rows [x, y, heading], velocities (n, 2), means (m, 4)
    belief means, logdets (m,), observed an (n, m) boolean matrix. Same
    math as encode_target, vectorized.
    """
    n = poses.shape[0]
    m = means.shape[0]
    dx = means[None, :, 0] - poses[:, None, 0]
    dy = means[None, :, 1] - poses[:, None, 1]
    r = np.hypot(dx, dy)
    near = r < 1e-6
    heading = poses[:, 2:3]
    theta = np.where(near, 0.0, np.pi - (np.pi - (np.arctan2(dy, dx) - heading)) % (2 * np.pi))
    c, s = np.cos(heading), np.sin(heading)
    pxl = c * dx + s * dy
    pyl = -s * dx + c * dy
    dvx = means[None, :, 2] - velocities[:, 0:1]
    dvy = means[None, :, 3] - velocities[:, 1:2]
    vxl = c * dvx + s * dvy
    vyl = -s * dvx + c * dvy
    rs = np.where(near, 1.0, r)  # safe denominator; masked out below
    r_dot = np.where(near, 0.0, (pxl * vxl + pyl * vyl) / rs)
    theta_dot = np.where(near, 0.0, (pxl * vyl - pyl * vxl) / rs**2)
    F = np.empty((n, m, FEATURE_DIM))
    F[:, :, 0] = r
    F[:, :, 1] = theta
    F[:, :, 2] = r_dot
    F[:, :, 3] = theta_dot
    F[:, :, 4] = logdets[None, :]
    F[:, :, 5] = observed.astype(np.float64)
    return F


def mask_k_nearest_array(F: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k-nearest mask on an (n, m, 6) feature block.

    Returns the (n, min(k, m), 6) masked block and the (n, min(k, m))
    kept target indices. Rows are target ids 0..m-1, so the stable sort
    reproduces mask_k_nearest's tie-break and order rules.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    n, m, _ = F.shape
    if k >= m:
        return F, np.tile(np.arange(m), (n, 1))
    order = np.argsort(F[:, :, 0], axis=1, kind="stable")[:, :k]
    keep = np.sort(order, axis=1)
    return np.take_along_axis(F, keep[:, :, None], axis=1), keep
