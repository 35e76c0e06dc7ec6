"""Task-distribution environments: a 2D goal-reaching point robot whose tasks
differ in goal location, and a variant whose tasks differ in drift dynamics.

Both are pure functions over (state, task, action): 20-step episodes, actions
clipped to +-0.1 per dimension, reward = negative distance to goal measured at
the successor position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (ACTION_BOUND, GOAL_HIGH, GOAL_LOW, HORIZON, WIND_BOUND,
                   STREAM_TASKS, TaskSpec, rng_stream)

# the drift variant keeps a single fixed goal; only dynamics vary across tasks
PARAM_GOAL = (0.5, 0.5)


class EpisodeFinished(RuntimeError):
    pass


class MissingOodRange(ValueError):
    pass


@dataclass(frozen=True)
class EnvState:
    position: tuple
    t: int
    done: bool

    def __post_init__(self):
        if self.done != (self.t == HORIZON):
            raise ValueError("done must hold exactly at the horizon")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    horizon: int = HORIZON
    action_low: float = -ACTION_BOUND
    action_high: float = ACTION_BOUND
    goal_range: tuple | None = None    # ((lo,lo),(hi,hi)) for goal tasks
    wind_range: tuple | None = None    # likewise for drift tasks
    ood_range: tuple | None = None     # alternate test-task range

    def __post_init__(self):
        if self.name not in ("point_robot", "point_robot_param"):
            raise ValueError(f"unknown env {self.name!r}")
        if self.horizon != HORIZON:
            raise ValueError("horizon is fixed at 20")


def make_env(name):
    if name == "point_robot":
        return EnvSpec(name, goal_range=((GOAL_LOW, GOAL_LOW),
                                         (GOAL_HIGH, GOAL_HIGH)),
                       ood_range=((1.0, 1.0), (1.2, 1.2)))
    if name == "point_robot_param":
        return EnvSpec(name, wind_range=((-WIND_BOUND, -WIND_BOUND),
                                         (WIND_BOUND, WIND_BOUND)))
    raise ValueError(f"unknown env {name!r}")


def task_goal(task):
    """Goal position used for rewards; fixed for drift tasks."""
    return np.array(task.goal if task.goal is not None else PARAM_GOAL)


def sample_tasks(spec, n_train, n_test, seed, ood=False, ood_range=None):
    """Draw train then test tasks i.i.d. uniform from the task range.

    With ood=True, test tasks come from ood_range instead (disjoint from the
    training range by construction of the default ranges).
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one task per split")
    rng = rng_stream(seed, STREAM_TASKS)
    kind = "goal_reward" if spec.goal_range is not None else "dynamics_param"
    lo, hi = spec.goal_range if kind == "goal_reward" else spec.wind_range
    test_lo, test_hi = lo, hi
    if ood:
        rng_ood = ood_range if ood_range is not None else spec.ood_range
        if rng_ood is None:
            raise MissingOodRange(f"{spec.name} has no ood_range configured")
        test_lo, test_hi = rng_ood

    def draw(n, split, low, high, base_id):
        pts = rng.uniform(np.asarray(low), np.asarray(high), size=(n, 2))
        out = []
        for i, p in enumerate(pts):
            vec = (float(p[0]), float(p[1]))
            out.append(TaskSpec(
                base_id + i, kind,
                goal=vec if kind == "goal_reward" else None,
                wind=vec if kind == "dynamics_param" else None,
                split=split))
        return out

    train = draw(n_train, "train", lo, hi, 0)
    test = draw(n_test, "test", test_lo, test_hi, n_train)
    return train, test


def reset(task):
    return EnvState((0.0, 0.0), 0, False)


def step(state, task, action):
    """Apply one clipped action; reward is the negative distance from the
    successor position to the goal."""
    if state.done:
        raise EpisodeFinished("episode already ran to the horizon")
    a = np.clip(np.asarray(action, dtype=np.float64),
                -ACTION_BOUND, ACTION_BOUND)
    p = np.asarray(state.position, dtype=np.float64) + a
    if task.wind is not None:
        p = p + np.asarray(task.wind)
    r = -float(np.linalg.norm(p - task_goal(task)))
    t = state.t + 1
    nxt = EnvState((float(p[0]), float(p[1])), t, t == HORIZON)
    return nxt, r
