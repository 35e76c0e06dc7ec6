"""Shared data model: tasks, transitions, trajectories, offline datasets,
normalization statistics, run configuration, and the dataset file format.

All types are immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np

HORIZON = 20
ACTION_BOUND = 0.1
GOAL_LOW, GOAL_HIGH = 0.0, 1.0
WIND_BOUND = 0.05
STD_FLOOR = 1e-6

# per-component seed-stream codes (spawn keys off the single run seed);
# exception: per-task collection streams use seed*10007 + task_id directly
STREAM_TASKS = 1
STREAM_CALIBRATE = 2
STREAM_MIX = 3
STREAM_WM_INIT = 4
STREAM_WM_BATCH = 5
STREAM_MDT_INIT = 6
STREAM_MDT_BATCH = 7
STREAM_MDT_DROPOUT = 8
STREAM_EVAL = 9


class EmptyTrajectory(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def rng_stream(seed, code, *extra):
    """Deterministic per-component Generator derived from the run seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(code,) + tuple(extra))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str                # "goal_reward" | "dynamics_param"
    goal: tuple | None       # 2-vector, goal_reward tasks only
    wind: tuple | None       # 2-vector per-step drift, dynamics_param only
    split: str               # "train" | "test"

    def __post_init__(self):
        if self.kind not in ("goal_reward", "dynamics_param"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.kind == "goal_reward":
            if self.goal is None or self.wind is not None:
                raise ValueError("goal_reward task needs goal and no wind")
        else:
            if self.wind is None or self.goal is not None:
                raise ValueError("dynamics_param task needs wind and no goal")
        # range containment is only enforceable for the train split: test
        # tasks may be sampled from a deliberately out-of-distribution range
        if self.split == "train":
            if self.goal is not None and not all(
                    GOAL_LOW <= g <= GOAL_HIGH for g in self.goal):
                raise ValueError(f"train goal {self.goal} outside unit square")
            if self.wind is not None and not all(
                    -WIND_BOUND <= w <= WIND_BOUND for w in self.wind):
                raise ValueError(f"train wind {self.wind} out of range")


@dataclass(frozen=True)
class Transition:
    s: tuple
    a: tuple
    r: float
    s_next: tuple
    t: int

    def __post_init__(self):
        if not all(-ACTION_BOUND <= x <= ACTION_BOUND for x in self.a):
            raise ValueError(f"action {self.a} out of bounds")
        if not 0 <= self.t < HORIZON:
            raise ValueError(f"timestep {self.t} out of range")


@dataclass(frozen=True)
class Trajectory:
    task_id: int
    steps: tuple          # ordered Transitions
    rtg: tuple            # rtg[t] = sum of rewards from t on

    def __post_init__(self):
        if len(self.steps) == 0:
            raise EmptyTrajectory("trajectory has no steps")
        if len(self.steps) > HORIZON:
            raise ValueError("trajectory longer than horizon")
        if len(self.rtg) != len(self.steps):
            raise ValueError("rtg length mismatch")
        for a, b in zip(self.steps[:-1], self.steps[1:]):
            if a.s_next != b.s:
                raise ValueError(f"broken chaining at t={a.t}")
        # checked in the association order return_to_go computes
        if self.rtg[-1] != self.steps[-1].r:
            raise ValueError("rtg tail mismatch")
        for t in range(len(self.steps) - 1):
            if self.rtg[t] != self.steps[t].r + self.rtg[t + 1]:
                raise ValueError(f"rtg suffix-sum violated at t={t}")

    def __len__(self):
        return len(self.steps)

    @property
    def total_return(self):
        return self.rtg[0]

    # cached array views for batch assembly (frozen dataclasses still allow
    # cached_property because it writes to __dict__ directly)
    @cached_property
    def states(self):
        return np.array([st.s for st in self.steps], dtype=np.float64)

    @cached_property
    def actions(self):
        return np.array([st.a for st in self.steps], dtype=np.float64)

    @cached_property
    def rewards(self):
        return np.array([st.r for st in self.steps], dtype=np.float64)

    @cached_property
    def next_states(self):
        return np.array([st.s_next for st in self.steps], dtype=np.float64)

    @cached_property
    def rtg_array(self):
        return np.array(self.rtg, dtype=np.float64)


@dataclass(frozen=True)
class NormalizationStats:
    state_mean: tuple
    state_std: tuple     # componentwise, floored at STD_FLOOR

    def __post_init__(self):
        if any(s < STD_FLOOR for s in self.state_std):
            raise ValueError("state_std below floor")

    @cached_property
    def mean_array(self):
        return np.array(self.state_mean, dtype=np.float64)

    @cached_property
    def std_array(self):
        return np.array(self.state_std, dtype=np.float64)


@dataclass(frozen=True)
class OfflineDataset:
    env_name: str
    dataset_type: str            # "medium" | "expert" | "mixed"
    tasks: tuple                 # TaskSpecs
    trajectories: dict           # task_id -> tuple of Trajectory
    stats: NormalizationStats
    seed: int

    def __post_init__(self):
        if self.dataset_type not in ("medium", "expert", "mixed"):
            raise ValueError(f"unknown dataset type {self.dataset_type!r}")
        ids = {t.task_id for t in self.tasks}
        for tid, trajs in self.trajectories.items():
            if tid not in ids:
                raise ValueError(f"trajectories for unknown task {tid}")
            for tr in trajs:
                if tr.task_id != tid:
                    raise ValueError("trajectory filed under wrong task")

    def all_trajectories(self):
        out = []
        for task in self.tasks:
            out.extend(self.trajectories.get(task.task_id, ()))
        return out

    def n_transitions(self):
        return sum(len(t) for t in self.all_trajectories())


@dataclass(frozen=True)
class RunConfig:
    h: int = 4                   # context horizon for the task encoder
    K: int = 8                   # history length (steps) fed to the policy
    k: int = 3                   # prompt length (steps)
    batch_size: int = 128
    dropout: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    warmup_steps: int = 10000
    lr: float = 1e-4
    wm_lr: float = 3e-4
    training_steps: int = 100000
    wm_steps: int = 20000
    eval_episodes: int = 5
    target_return_multiplier: float = 1.0
    seed: int = 0
    no_context: bool = False
    no_complementary: bool = False
    no_prompt: bool = False

    def __post_init__(self):
        if not self.k < self.K < HORIZON:
            raise ValueError("need k < K < horizon")
        for name in ("h", "K", "k", "batch_size", "warmup_steps", "lr",
                     "wm_lr", "training_steps", "wm_steps", "eval_episodes",
                     "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def variant_name(self):
        if self.no_context and self.no_prompt:
            return "dt"
        if self.no_context:
            return "no_context"
        if self.no_prompt:
            return "no_prompt"
        if self.no_complementary:
            return "no_com"
        return "meta_dt"

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return RunConfig(**d)


def return_to_go(rewards):
    """Suffix sums: out[t] = sum of rewards[t:]."""
    n = len(rewards)
    if n == 0:
        raise EmptyTrajectory("cannot compute return-to-go of nothing")
    out = [0.0] * n
    acc = 0.0
    for i in range(n - 1, -1, -1):
        acc = float(rewards[i]) + acc
        out[i] = acc
    return out


def stats_from_states(states):
    """NormalizationStats over an [N,2] array of visited states."""
    states = np.asarray(states, dtype=np.float64)
    if states.size == 0:
        raise EmptyDataset("no transitions to compute statistics from")
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), STD_FLOOR)
    return NormalizationStats(tuple(mean.tolist()), tuple(std.tolist()))


def compute_stats(dataset):
    trajs = dataset.all_trajectories()
    if not trajs:
        raise EmptyDataset("dataset has no trajectories")
    return stats_from_states(np.concatenate([t.states for t in trajs]))


def normalize_state(s, stats):
    return (np.asarray(s, dtype=np.float64) - stats.mean_array) / stats.std_array


# ---------------------------------------------------------------------------
# dataset files: JSON lines, line 0 = manifest, one trajectory per line.
# Floats are written with 17 significant digits so parsing returns the exact
# same double and files round-trip byte-identically.

def _num(x):
    return format(float(x), ".16e")


def _vec(v):
    return "[" + ",".join(_num(x) for x in v) + "]"


def _mat(m):
    return "[" + ",".join(_vec(row) for row in m) + "]"


def _task_line(t):
    goal = _vec(t.goal) if t.goal is not None else "null"
    wind = _vec(t.wind) if t.wind is not None else "null"
    return ('{"task_id":%d,"kind":"%s","goal":%s,"wind":%s,"split":"%s"}'
            % (t.task_id, t.kind, goal, wind, t.split))


def dataset_to_lines(ds):
    manifest = ('{"env":"%s","type":"%s","seed":%d,"tasks":[%s],'
                '"stats":{"state_mean":%s,"state_std":%s}}'
                % (ds.env_name, ds.dataset_type, ds.seed,
                   ",".join(_task_line(t) for t in ds.tasks),
                   _vec(ds.stats.state_mean), _vec(ds.stats.state_std)))
    lines = [manifest]
    for task in ds.tasks:
        for tr in ds.trajectories.get(task.task_id, ()):
            # states carry one extra row: the terminal successor state
            s = [st.s for st in tr.steps] + [tr.steps[-1].s_next]
            a = [st.a for st in tr.steps]
            lines.append('{"task_id":%d,"s":%s,"a":%s,"r":%s,"rtg":%s}'
                         % (tr.task_id, _mat(s), _mat(a),
                            _vec(st.r for st in tr.steps), _vec(tr.rtg)))
    return lines


def save_dataset(ds, path):
    with open(path, "w") as f:
        f.write("\n".join(dataset_to_lines(ds)) + "\n")


def _traj_from_record(rec):
    s, a, r, rtg = rec["s"], rec["a"], rec["r"], rec["rtg"]
    steps = tuple(
        Transition(tuple(s[t]), tuple(a[t]), r[t], tuple(s[t + 1]), t)
        for t in range(len(a)))
    return Trajectory(rec["task_id"], steps, tuple(rtg))


def load_dataset(path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln]
    if not lines:
        raise EmptyDataset(f"{path} is empty")
    man = json.loads(lines[0])
    tasks = tuple(
        TaskSpec(t["task_id"], t["kind"],
                 tuple(t["goal"]) if t["goal"] is not None else None,
                 tuple(t["wind"]) if t["wind"] is not None else None,
                 t["split"])
        for t in man["tasks"])
    trajs = {t.task_id: [] for t in tasks}
    for ln in lines[1:]:
        tr = _traj_from_record(json.loads(ln))
        trajs[tr.task_id].append(tr)
    stats = NormalizationStats(tuple(man["stats"]["state_mean"]),
                               tuple(man["stats"]["state_std"]))
    return OfflineDataset(man["env"], man["type"], tasks,
                          {k: tuple(v) for k, v in trajs.items()},
                          stats, man["seed"])
