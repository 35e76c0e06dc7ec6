"""Scripted behavior policies and offline dataset synthesis.

The expert policy is the clipped straight-line oracle (it knows the goal, and
the drift in the dynamics-varying env). The medium policy is the expert plus
Gaussian action noise whose scale is calibrated so its mean return lands
between 2x and 3x the expert's (returns are negative). Mixed datasets combine
whole trajectories from both, 70% medium / 30% expert per task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import env as envmod
from .core import (ACTION_BOUND, HORIZON, STREAM_CALIBRATE, STREAM_MIX,
                   OfflineDataset, Trajectory, Transition, return_to_go,
                   rng_stream, stats_from_states)


class CalibrationFailed(RuntimeError):
    def __init__(self, msg, closest_noise_std):
        super().__init__(msg)
        self.closest_noise_std = closest_noise_std


class TaskMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorPolicy:
    kind: str                      # "expert" | "medium"
    noise_std: float | None = None

    def __post_init__(self):
        if self.kind not in ("expert", "medium"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "medium" and not (self.noise_std and self.noise_std > 0):
            raise ValueError("medium policy needs noise_std > 0")


def expert_action(state, task):
    """Clipped straight line to the goal, compensating known drift."""
    g = envmod.task_goal(task)
    p = np.asarray(state.position, dtype=np.float64)
    wind = np.asarray(task.wind) if task.wind is not None else 0.0
    return np.clip(g - p - wind, -ACTION_BOUND, ACTION_BOUND)


def medium_action(state, task, noise_std, rng):
    a = expert_action(state, task) + rng.normal(0.0, noise_std, size=2)
    return np.clip(a, -ACTION_BOUND, ACTION_BOUND)


def rollout(task, policy, rng=None):
    """Run one scripted episode to the horizon; returns a Trajectory."""
    state = envmod.reset(task)
    steps, rewards = [], []
    for t in range(HORIZON):
        if policy.kind == "expert":
            a = expert_action(state, task)
        else:
            a = medium_action(state, task, policy.noise_std, rng)
        nxt, r = envmod.step(state, task, a)
        steps.append(Transition(state.position, (float(a[0]), float(a[1])),
                                r, nxt.position, t))
        rewards.append(r)
        state = nxt
    return Trajectory(task.task_id, tuple(steps), tuple(return_to_go(rewards)))


def _mean_return(tasks, policy, rng, n_rollouts):
    total = 0.0
    for i in range(n_rollouts):
        total += rollout(tasks[i % len(tasks)], policy, rng).total_return
    return total / n_rollouts


def calibrate_medium(env, tasks, seed, iters=20, rollouts_per_probe=100):
    """Binary-search the medium policy's noise_std over [0.01, 0.5] until the
    mean return falls in [3x, 2x] of the expert's (negative) mean return."""
    if len(tasks) < 5:
        raise ValueError("calibration needs at least 5 tasks")
    expert = BehaviorPolicy("expert")
    exp_ret = _mean_return(tasks, expert, None, len(tasks))
    band_lo, band_hi = 3.0 * exp_ret, 2.0 * exp_ret
    target = 2.5 * exp_ret
    lo, hi = 0.01, 0.5
    best = None
    for it in range(iters):
        mid = 0.5 * (lo + hi)
        rng = rng_stream(seed, STREAM_CALIBRATE, it)
        got = _mean_return(tasks, BehaviorPolicy("medium", mid), rng,
                           rollouts_per_probe)
        if best is None or abs(got - target) < abs(best[1] - target):
            best = (mid, got)
        if got > target:     # still too close to expert: add noise
            lo = mid
        else:
            hi = mid
    noise_std, got = best
    if not band_lo <= got <= band_hi:
        raise CalibrationFailed(
            f"mean return {got:.4f} outside [{band_lo:.4f}, {band_hi:.4f}] "
            f"(expert {exp_ret:.4f}); closest noise_std {noise_std:.5f}",
            noise_std)
    return noise_std


def collect(env, tasks, policy, n_traj_per_task, seed):
    """n_traj_per_task scripted episodes per task, each with its own random
    stream keyed by seed*10007 + task_id so tasks can be collected in
    parallel without changing the result."""
    trajs = {}
    for task in tasks:
        rng = np.random.Generator(np.random.Philox(seed * 10007 + task.task_id))
        trajs[task.task_id] = tuple(
            rollout(task, policy, rng) for _ in range(n_traj_per_task))
    stats = stats_from_states(np.concatenate(
        [t.states for ts in trajs.values() for t in ts]))
    dataset_type = "expert" if policy.kind == "expert" else "medium"
    return OfflineDataset(env.name, dataset_type, tuple(tasks), trajs,
                          stats, seed)


def mix(medium, expert, seed):
    """Per task: floor(0.7 n) medium trajectories plus the remainder from the
    expert set, chosen deterministically from the given seed."""
    if medium.env_name != expert.env_name or medium.tasks != expert.tasks:
        raise TaskMismatch("mixed sources must share env and task list")
    trajs = {}
    for task in medium.tasks:
        med = medium.trajectories[task.task_id]
        exp = expert.trajectories[task.task_id]
        n = len(med)
        n_med = math.floor(0.7 * n)
        n_exp = n - n_med
        if n_exp > len(exp):
            raise TaskMismatch(f"task {task.task_id}: expert set too small")
        rng = rng_stream(seed, STREAM_MIX, task.task_id)
        med_sel = np.sort(rng.permutation(len(med))[:n_med])
        exp_sel = np.sort(rng.permutation(len(exp))[:n_exp])
        trajs[task.task_id] = tuple(
            [med[i] for i in med_sel] + [exp[i] for i in exp_sel])
    stats = stats_from_states(np.concatenate(
        [t.states for ts in trajs.values() for t in ts]))
    return OfflineDataset(medium.env_name, "mixed", medium.tasks, trajs,
                          stats, seed)


def build_demo(dataset, task_id, top_m=5):
    """Top trajectories of one task by total return, ties to the lower index."""
    trajs = dataset.trajectories[task_id]
    returns = np.array([-t.total_return for t in trajs])
    order = np.argsort(returns, kind="stable")
    return [trajs[i] for i in order[:top_m]]
