"""Few-shot and zero-shot evaluation of a trained policy on test tasks.

A rollout feeds the policy its own growing episode: per timestep the
task-representation z comes from an h-step context built inside the current
episode only, the return-to-go starts at the target G* and shrinks by the
collected rewards, and (few-shot) a prompt is drawn from the demo pool of the
agent's previously finished episodes. Zero-shot runs a single episode with no
prompt and no demo bookkeeping.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import datagen, env as envmod
from .core import (HORIZON, STREAM_EVAL, Transition, Trajectory,
                   return_to_go, rng_stream)
from .metadt import EMPTY_PROMPT, AugmentedHistory, act, get_prompt
from .worldmodel import Z_DIM, context_array

REPORT_COLUMNS = ("mode", "env", "dataset_type", "ablation", "seed",
                  "task_id", "episode", "return")
SUMMARY_COLUMNS = ("env", "dataset_type", "method_variant", "mean", "stderr")


def target_return(datasets, multiplier):
    """G* = multiplier x the best episode return in the given training
    datasets (expert or mixed for the env; medium-only pipelines fall back
    to their own best)."""
    best = max(tr.total_return for ds in datasets
               for tr in ds.all_trajectories())
    return float(multiplier) * float(best)


@dataclass(frozen=True)
class EvalReport:
    """Per-episode returns for one evaluation pass over the test tasks; the
    task score is the final episode's return."""
    mode: str                 # "few_shot" | "zero_shot"
    env_name: str
    dataset_type: str
    ablation: str
    seed: int
    rows: tuple               # (task_id, episode, return, length)
    task_scores: dict         # task_id -> headline score

    @property
    def mean(self):
        return float(np.mean(list(self.task_scores.values())))

    @property
    def stderr(self):
        vals = np.array(list(self.task_scores.values()), dtype=np.float64)
        if len(vals) < 2:
            return 0.0
        return float(vals.std(ddof=1) / np.sqrt(len(vals)))


def _live_context(states, actions, rewards, t, h, stats):
    """Context window ending at the current (not yet acted) state s_t, built
    from this episode's own transitions; matches context_array on the
    finished trajectory."""
    arr = np.zeros((h + 1, 5), np.float64)
    mean, std = stats.mean_array, stats.std_array
    for row, i in enumerate(range(t - h, t)):
        if i >= 0:
            arr[row, :2] = (np.asarray(states[i]) - mean) / std
            arr[row, 2:4] = actions[i]
            arr[row, 4] = rewards[i]
    arr[h, :2] = (np.asarray(states[t]) - mean) / std
    return arr.astype(np.float32)


def rollout(env, task, policy, wm, target, prompt_source, config, rng,
            act_fn=None, cache_prompt=False):
    """One evaluation episode; returns the finished Trajectory.

    prompt_source is a callable rng -> PromptSegment, resampled every
    timestep unless cache_prompt holds it fixed for the episode; None means
    no prompt tokens at all (zero-shot and plain-DT evaluation). act_fn
    (task, env_state, prompt, history) -> action replaces the policy head
    when given, which lets tests drive rollouts with a scripted oracle."""
    if act_fn is None:
        def act_fn(task_, state_, prompt_, history_):
            return act(policy, prompt_, history_)

    K = config.K
    state = envmod.reset(task)
    states, actions, rewards = [], [], []
    zs, rtgs = [], []
    ret_so_far = 0.0
    cached = prompt_source(rng) if (cache_prompt
                                    and prompt_source is not None) else None
    for t in range(HORIZON):
        states.append(state.position)
        if policy is not None and policy.with_z:
            ctx = _live_context(states, actions, rewards, t, wm.h, wm.stats)
            z_t = wm.encode_tokens(ctx[None]).data[0]
        else:
            z_t = np.zeros(Z_DIM, np.float32)
        zs.append(tuple(float(v) for v in z_t))
        rtgs.append(target - ret_so_far)

        lo = max(0, t - K + 1)
        history = AugmentedHistory(
            tuple(zs[lo:]), tuple(rtgs[lo:]), tuple(states[lo:]),
            tuple(tuple(a) for a in actions[lo:]) + ((0.0, 0.0),),
            tuple(range(lo, t + 1)))
        if prompt_source is None:
            prompt = EMPTY_PROMPT
        elif cache_prompt:
            prompt = cached
        else:
            prompt = prompt_source(rng)
        a = np.asarray(act_fn(task, state, prompt, history), np.float64)
        nxt, r = envmod.step(state, task, a)
        actions.append((float(a[0]), float(a[1])))
        rewards.append(r)
        ret_so_far += r
        state = nxt

    steps = tuple(Transition(states[t], actions[t], rewards[t],
                             (states + [state.position])[t + 1], t)
                  for t in range(HORIZON))
    return Trajectory(task.task_id, steps, tuple(return_to_go(rewards)))


def evaluate_few_shot(env, test_tasks, policy, wm, config, target,
                      dataset_type="", act_fn=None, cache_prompt=False):
    """N-episode adaptation per task: the demo pool starts empty (cold-start
    episode runs with an empty prompt) and each finished episode joins it;
    the final episode's return is the task's few-shot score."""
    rows, scores = [], {}
    use_prompt = not config.no_prompt
    for task in test_tasks:
        demo = []
        for ep in range(config.eval_episodes):
            rng = rng_stream(config.seed, STREAM_EVAL, task.task_id, ep)
            if use_prompt:
                def source(r, demo=demo):
                    return get_prompt(demo, wm, config.k,
                                      not config.no_complementary, r)
            else:
                source = None
            traj = rollout(env, task, policy, wm, target, source, config,
                           rng, act_fn=act_fn, cache_prompt=cache_prompt)
            demo.append(traj)
            rows.append((task.task_id, ep, traj.total_return, len(traj)))
            scores[task.task_id] = traj.total_return
    return EvalReport("few_shot", env.name, dataset_type,
                      config.variant_name, config.seed, tuple(rows), scores)


def evaluate_zero_shot(env, test_tasks, policy, wm, config, target,
                       dataset_type="", act_fn=None):
    """Single no-prompt episode per task; never builds prompts or demos."""
    rows, scores = [], {}
    for task in test_tasks:
        rng = rng_stream(config.seed, STREAM_EVAL, task.task_id, 0)
        traj = rollout(env, task, policy, wm, target, None, config, rng,
                       act_fn=act_fn)
        rows.append((task.task_id, 0, traj.total_return, len(traj)))
        scores[task.task_id] = traj.total_return
    return EvalReport("zero_shot", env.name, dataset_type,
                      config.variant_name, config.seed, tuple(rows), scores)


def _variant(report):
    if report.mode == "zero_shot":
        return report.ablation + ":zero_shot"
    return report.ablation


def aggregate(reports):
    """Cross-seed summary: one row per (env, dataset_type, variant) with the
    mean of per-seed task means and the stderr across those seed means
    (single seed -> 0)."""
    groups = {}
    for rep in reports:
        key = (rep.env_name, rep.dataset_type, _variant(rep))
        groups.setdefault(key, []).append(rep.mean)
    out = []
    for (env_name, dstype, variant), means in sorted(groups.items()):
        arr = np.array(means, dtype=np.float64)
        stderr = 0.0 if len(arr) < 2 else float(
            arr.std(ddof=1) / np.sqrt(len(arr)))
        out.append({"env": env_name, "dataset_type": dstype,
                    "method_variant": variant,
                    "mean": float(arr.mean()), "stderr": stderr})
    return out


def write_report_csv(path, reports):
    """Per-episode rows for every report, in report order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for task_id, ep, ret, _ in rep.rows:
                w.writerow([rep.mode, rep.env_name, rep.dataset_type,
                            rep.ablation, rep.seed, task_id, ep,
                            repr(float(ret))])


def write_summary_csv(path, summary_rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in summary_rows:
            w.writerow([row["env"], row["dataset_type"],
                        row["method_variant"], repr(row["mean"]),
                        repr(row["stderr"])])


def expert_oracle(task, state, prompt, history):
    """Scripted-expert action selector in rollout's act_fn shape."""
    return datagen.expert_action(state, task)
