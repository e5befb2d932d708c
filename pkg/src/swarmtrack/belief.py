"""Kalman filter bank over target states.

One Gaussian belief per target, a shared double-integrator motion model,
and an extended-Kalman correction for range-bearing measurements. The bank
is centrally stored: every agent reads the same beliefs, and the scalar
uncertainty signal is the log determinant of each belief covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Pose2, SeededStream, TargetPhase, wrap_angle

# Initial belief covariance: 2 m^2 position variance, 1 (m/s)^2 velocity
# variance. Consistent with the 0-5 m initial mean offset.
INIT_COV = np.diag([2.0, 2.0, 1.0, 1.0])

# Geometry below this range is treated as degenerate (bearing undefined).
MIN_RANGE = 1e-6


class DegenerateGeometryError(ValueError):
    """Raised when the predicted target sits on top of the sensing agent."""


@dataclass
class GaussianBelief:
    """Gaussian over one target state [px, py, vx, vy].

    cov must stay symmetric positive definite; predict and ekf_update
    re-symmetrize after every algebraic step.
    """

    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


@dataclass(frozen=True)
class RangeBearingMeasurement:
    """A range-bearing observation and the pose it was taken from."""

    range: float
    bearing: float
    source_pose: Pose2

    def __post_init__(self):
        if self.range < 0:
            raise ValueError(f"range must be nonnegative, got {self.range}")
        if not -np.pi < self.bearing <= np.pi:
            raise ValueError(f"bearing {self.bearing} outside (-pi, pi]")


def make_double_integrator(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Discrete double-integrator transition A and process noise W.

    A = [[I, dt I], [0, I]] in 2x2 blocks; W is the standard
    continuous-white-noise-acceleration discretization scaled by
    intensity q.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if q < 0:
        raise ValueError(f"q must be nonnegative, got {q}")
    i2 = np.eye(2)
    A = np.block([[i2, dt * i2], [np.zeros((2, 2)), i2]])
    W = q * np.block(
        [[dt**3 / 3 * i2, dt**2 / 2 * i2], [dt**2 / 2 * i2, dt * i2]]
    )
    return A, W


def predict(b: GaussianBelief, A: np.ndarray, W: np.ndarray) -> GaussianBelief:
    """Time-propagate a belief: mean' = A mean, cov' = A cov A^T + W."""
    mean = A @ b.mean
    cov = A @ b.cov @ A.T + W
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean, cov)


def kalman_correct(
    b: GaussianBelief, H: np.ndarray, R: np.ndarray, innovation: np.ndarray
) -> GaussianBelief:
    """Linear Kalman correction step shared by all measurement models.

    Uses the Joseph-form covariance update
    (I - KH) Sigma (I - KH)^T + K R K^T, which stays PSD under roundoff.
    """
    S = H @ b.cov @ H.T + R
    # K = Sigma H^T S^-1, via a solve against symmetric S
    K = np.linalg.solve(S, H @ b.cov).T
    mean = b.mean + K @ innovation
    IKH = np.eye(b.cov.shape[0]) - K @ H
    cov = IKH @ b.cov @ IKH.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean, cov)


def ekf_update(
    b: GaussianBelief, z: RangeBearingMeasurement, R: np.ndarray
) -> GaussianBelief:
    """EKF correction of a predicted belief with one range-bearing measurement.

    The measurement function is h(y) = (range, bearing) of the belief
    position seen from ``z.source_pose``; its Jacobian has zero columns
    for the velocity components. The bearing innovation is wrapped into
    (-pi, pi] so updates never tear across the branch cut.

    Raises
    ------
    DegenerateGeometryError
        If the predicted mean is within MIN_RANGE of the agent, where the
        bearing Jacobian blows up. Callers skip the update in that case.
    """
    pose = z.source_pose
    dx = b.mean[0] - pose.x
    dy = b.mean[1] - pose.y
    r = np.hypot(dx, dy)
    if r <= MIN_RANGE:
        raise DegenerateGeometryError(
            f"predicted mean within {MIN_RANGE} m of sensing agent"
        )
    H = np.array(
        [
            [dx / r, dy / r, 0.0, 0.0],
            [-dy / r**2, dx / r**2, 0.0, 0.0],
        ]
    )
    predicted_bearing = wrap_angle(float(np.arctan2(dy, dx)) - pose.heading)
    innovation = np.array(
        [z.range - r, wrap_angle(z.bearing - predicted_bearing)]
    )
    return kalman_correct(b, H, R, innovation)


def logdet(b: GaussianBelief) -> float:
    """log det of the belief covariance via Cholesky.

    Raises numpy.linalg.LinAlgError if the covariance is not positive
    definite.
    """
    L = np.linalg.cholesky(b.cov)
    return float(2.0 * np.sum(np.log(np.diag(L))))


def init_belief(
    target: TargetPhase, stream: SeededStream, cov: np.ndarray | None = None
) -> GaussianBelief:
    """Initial belief: true position plus a uniform 0-5 m offset, zero velocity.

    Draws the offset length then its direction from ``stream`` (two calls,
    in that order). cov defaults to INIT_COV.
    """
    length = stream.uniform(0.0, 5.0)
    angle = stream.uniform(-np.pi, np.pi)
    mean = np.array(
        [
            target.px + length * np.cos(angle),
            target.py + length * np.sin(angle),
            0.0,
            0.0,
        ]
    )
    return GaussianBelief(mean, INIT_COV.copy() if cov is None else np.array(cov))


@dataclass
class FilterBank:
    """The centrally stored filter state: one belief per target.

    Single writer: the environment applies predicts and updates
    sequentially within a step; snapshots may be read freely between
    steps.
    """

    beliefs: list[GaussianBelief]
    A: np.ndarray
    W: np.ndarray

    @classmethod
    def create(
        cls, targets: list[TargetPhase], dt: float, q: float,
        stream: SeededStream, init_cov: np.ndarray | None = None,
    ) -> "FilterBank":
        """Build a bank with one freshly initialized belief per target.

        Belief j draws from substream ``stream.split(j)`` so the count of
        targets never shifts another target's initialization.
        """
        A, W = make_double_integrator(dt, q)
        beliefs = [
            init_belief(t, stream.split(j), init_cov) for j, t in enumerate(targets)
        ]
        return cls(beliefs, A, W)

    def predict_all(self) -> None:
        """Propagate every belief one step through the motion model."""
        self.beliefs = [predict(b, self.A, self.W) for b in self.beliefs]

    def update(self, j: int, z: RangeBearingMeasurement, R: np.ndarray) -> None:
        """Correct belief j in place with one measurement."""
        self.beliefs[j] = ekf_update(self.beliefs[j], z, R)

    def logdets(self) -> np.ndarray:
        """Per-target log det covariance, shape (m,)."""
        return np.array([logdet(b) for b in self.beliefs])

    def snapshot(self) -> list[GaussianBelief]:
        """Deep copy of the current beliefs."""
        return [b.copy() for b in self.beliefs]
