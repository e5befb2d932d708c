"""Scalable multi-agent target tracking.

Pursuer agents with range-bearing sensing keep Kalman-filter beliefs over
moving targets, share a permutation-invariant attention Q-network trained
with soft double Q-learning, and scale at evaluation time to much larger
teams via a k-nearest observation mask.
"""

__version__ = "0.1.0"
