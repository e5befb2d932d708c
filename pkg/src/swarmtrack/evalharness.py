"""Task-grid evaluation: masked execution, baselines, and results CSV.

Tasks are named "NaMt" (with a "k" suffix meaning thousands), sized by
the fixed-density rule, and rolled out under a frozen checkpoint. The
k-nearest mask, when present, shrinks every agent's feature set before
the net sees it; k=1 is the greedy single-target baseline. Per-episode
rows stream to CSV; per-task summaries come back as EvalReport values.
"""

from __future__ import annotations

import csv
import re
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import N_ACTIONS, SeededStream
from .encoding import mask_k_nearest_array
from .environment import WorldConfig, reset, step
from .trainer import policy_distribution
from .valuenet import NetParams, load_checkpoint, qvalues


class NormalizationUndefinedError(ValueError):
    """Baseline mean of zero leaves the relative score undefined."""


# ------------------------------------------------------------------ tasks

@dataclass(frozen=True)
class TaskSpec:
    n_agents: int
    m_targets: int
    mask_k: int | None = None
    label: str = ""

    def __post_init__(self):
        if self.n_agents < 1 or self.m_targets < 1:
            raise ValueError("agent and target counts must be at least 1")
        if self.mask_k is not None and self.mask_k < 1:
            raise ValueError(f"mask_k must be at least 1, got {self.mask_k}")
        if not self.label:
            object.__setattr__(self, "label",
                               task_label(self.n_agents, self.m_targets))


def _count_token(x: int) -> str:
    return f"{x // 1000}k" if x >= 1000 and x % 1000 == 0 else str(x)


def task_label(n: int, m: int) -> str:
    return f"{_count_token(n)}a{_count_token(m)}t"


_TASK_RE = re.compile(r"^(\d+)(k?)a(\d+)(k?)t$")


def parse_task(text: str, mask_k: int | None = None) -> TaskSpec:
    """Parse one "NaMt" label; a trailing k on a count means thousands."""
    m = _TASK_RE.match(text.strip())
    if not m:
        raise ValueError(f"malformed task label {text!r}")
    n = int(m.group(1)) * (1000 if m.group(2) else 1)
    t = int(m.group(3)) * (1000 if m.group(4) else 1)
    return TaskSpec(n, t, mask_k)


def parse_grid(text: str) -> list[TaskSpec]:
    return [parse_task(tok) for tok in text.split(",") if tok.strip()]


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class EvalReport:
    checkpoint: str
    task: TaskSpec
    episodes_per_seed: int
    seeds: tuple[int, ...]
    mean_return: float
    std_across_seeds: float
    per_seed_means: tuple[float, ...]
    mean_duplicate_rate: float
    normalized_vs_baseline: float | None = None


CSV_COLUMNS = ("checkpoint", "task_label", "n", "m", "mask_k", "seed",
               "episode", "return", "duplicate_assignment_rate",
               "wall_time_s")


# ---------------------------------------------------------------- rollout

def _resolve_pair(checkpoint) -> tuple[str, tuple[NetParams, NetParams]]:
    if isinstance(checkpoint, dict):
        name = "<params>"
        nets = checkpoint
    else:
        name = str(checkpoint)
        nets = load_checkpoint(checkpoint)
    try:
        return name, (nets["q1"], nets["q2"])
    except KeyError as e:
        raise ValueError(f"checkpoint lacks net {e.args[0]!r}") from e


def _duplicate_fraction(F: np.ndarray) -> float:
    # each agent's greedy pick is its nearest target (ties to the lower
    # id); the statistic is the fraction of agents sharing a pick
    nearest = np.argmin(F[:, :, 0], axis=1)
    n = len(nearest)
    return (n - len(np.unique(nearest))) / n


def _rollout(cfg: WorldConfig, pair, mask_k, alpha: float, policy: str,
             world_stream: SeededStream,
             action_stream: SeededStream) -> tuple[float, float]:
    """One full episode; returns (undiscounted return, duplicate rate)."""
    state, res = reset(cfg, world_stream)
    total = 0.0
    dup = 0.0
    steps = 0
    while not state.done:
        F = res.features_array
        dup += _duplicate_fraction(F)
        if mask_k is not None and mask_k < F.shape[1]:
            F = mask_k_nearest_array(F, mask_k)[0]
        if pair is None:
            actions = [int(action_stream.rng.integers(N_ACTIONS))
                       for _ in range(cfg.n_agents)]
        else:
            q = np.minimum(qvalues(F, pair[0]), qvalues(F, pair[1]))
            if policy == "greedy":
                actions = [int(np.argmax(row)) for row in q]
            elif policy == "stochastic":
                actions = [
                    int(action_stream.rng.choice(
                        N_ACTIONS, p=policy_distribution(row, alpha)))
                    for row in q
                ]
            else:
                raise ValueError(f"unknown policy {policy!r}")
        res = step(state, actions, cfg, world_stream)
        total += res.reward
        steps += 1
    return total, dup / steps


def _episode_streams(seed: int, episode: int) -> tuple[SeededStream, SeededStream]:
    root = SeededStream(int(seed))
    return root.split(0, episode), root.split(1, episode)


# --------------------------------------------------------------- evaluate

def evaluate(checkpoint, task: TaskSpec, episodes: int, seeds,
             *, alpha: float = 0.05, policy: str = "stochastic",
             world_overrides: dict | None = None,
             writer: csv.writer = None) -> EvalReport:
    """Run episodes x seeds rollouts of a checkpoint on one task.

    Map side follows the density rule for task.n_agents. When writer is
    given, one CSV row per episode is emitted in (seed, episode) order.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    name, pair = (("random", None) if checkpoint is None
                  else _resolve_pair(checkpoint))
    cfg = WorldConfig.scaled(task.n_agents, task.m_targets,
                             **(world_overrides or {}))
    seed_means = []
    dup_rates = []
    for seed in seeds:
        returns = []
        for ep in range(episodes):
            wstream, astream = _episode_streams(seed, ep)
            t0 = time.perf_counter()
            ret, dup = _rollout(cfg, pair, task.mask_k, alpha, policy,
                                wstream, astream)
            wall = time.perf_counter() - t0
            returns.append(ret)
            dup_rates.append(dup)
            if writer is not None:
                writer.writerow([
                    name, task.label, task.n_agents, task.m_targets,
                    "" if task.mask_k is None else task.mask_k,
                    seed, ep, ret, dup, wall,
                ])
        seed_means.append(float(np.mean(returns)))
    std = float(np.std(seed_means, ddof=1)) if len(seed_means) > 1 else 0.0
    return EvalReport(
        checkpoint=name, task=task, episodes_per_seed=episodes,
        seeds=tuple(int(s) for s in seeds),
        mean_return=float(np.mean(seed_means)),
        std_across_seeds=std, per_seed_means=tuple(seed_means),
        mean_duplicate_rate=float(np.mean(dup_rates)))


def greedy_baseline(task: TaskSpec, episodes: int, seeds, checkpoint,
                    **kw) -> EvalReport:
    """The k=1 mask: every agent tracks only its nearest target belief."""
    return evaluate(checkpoint, replace(task, mask_k=1), episodes, seeds,
                    **kw)


def random_baseline(task: TaskSpec, episodes: int, seeds,
                    **kw) -> EvalReport:
    """Uniform-random actions; the reference floor, no checkpoint."""
    kw.pop("alpha", None)
    kw.pop("policy", None)
    return evaluate(None, task, episodes, seeds, **kw)


def normalize_vs_baseline(policy_report: EvalReport,
                          baseline_report: EvalReport) -> float:
    """Relative improvement (policy - baseline) / |baseline|; 0 is parity."""
    pt, bt = policy_report.task, baseline_report.task
    if (pt.n_agents, pt.m_targets) != (bt.n_agents, bt.m_targets):
        raise ValueError("reports cover different tasks")
    b = baseline_report.mean_return
    if b == 0.0:
        raise NormalizationUndefinedError("baseline mean return is zero")
    return (policy_report.mean_return - b) / abs(b)


# --------------------------------------------------------------- the grid

def run_grid(config, out_csv=None) -> tuple[Path, list[EvalReport]]:
    """Evaluate every (checkpoint, task, mask) cell of a config.

    config is an AppConfig or a path to one. Cells run sequentially in
    listed order so the CSV is bit-reproducible row for row.
    """
    from .config import AppConfig, load_config
    if not isinstance(config, AppConfig):
        config = load_config(config)
    ev = config.eval
    out = Path(out_csv if out_csv is not None else ev.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    reports = []
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for ckpt in ev.checkpoints:
            for label in ev.tasks:
                for k in ev.mask_k:
                    task = parse_task(label, mask_k=k)
                    reports.append(evaluate(
                        ckpt, task, ev.episodes, ev.seeds,
                        alpha=ev.alpha, policy=ev.policy,
                        world_overrides=config.world, writer=writer))
    return out, reports
