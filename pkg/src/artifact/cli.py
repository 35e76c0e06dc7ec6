"""Command-line pipeline: task sampling, data collection, world-model and
policy training, evaluation, ablations, sweeps, and report aggregation.

Every output file gets a sidecar manifest recording the command, a hash of
the resolved configuration, the seed, and digests of the input files. A
command whose outputs already exist with a matching manifest is a no-op; a
mismatch refuses to overwrite. All randomness flows from the single run seed
through the per-component stream codes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields, replace

from . import datagen, env as envmod, metadt, worldmodel
from . import eval as evalmod
from .core import RunConfig, TaskSpec, _task_line, load_dataset, save_dataset
from .eval import EvalReport
from .nn.checkpoint import load_params, save_params
from .nn.optim import ParameterStore

ABLATIONS = {
    "meta_dt": {},
    "no_context": {"no_context": True},
    "no_com": {"no_complementary": True},
    "no_prompt": {"no_prompt": True},
    "dt": {"no_context": True, "no_prompt": True},
}


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


class RefuseToOverwrite(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved run description: the RunConfig plus everything the pipeline
    needs to locate and size its artifacts."""
    run: RunConfig
    env: str = "point_robot"
    dataset_type: str = "expert"
    out: str = "runs"
    engine: str = "fast"
    ood: bool = False
    n_train_tasks: int = 45
    n_test_tasks: int = 5
    n_traj_per_task: int = 100
    top_m: int = 5
    seeds: tuple = ()            # extra seeds for ablate (first is run.seed)
    variants: tuple = ("no_context", "no_com", "no_prompt", "dt")
    sweep_h: tuple = ()
    sweep_k: tuple = ()
    sweep_n_train_tasks: tuple = ()


# ---------------------------------------------------------------- config --

def parse_config_file(path):
    """Flat key=value lines, # comments, dotted section prefixes allowed."""
    out = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _coerce(val, like):
    if isinstance(like, bool):
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {val!r}")
    if isinstance(like, int):
        return int(val)
    if isinstance(like, float):
        return float(val)
    if isinstance(like, tuple):
        if not val:
            return ()
        return tuple(int(v) if v.lstrip("-").isdigit() else float(v)
                     for v in val.split(","))
    return val


_KEY_ALIASES = {"dataset": "dataset_type", "sweep.h": "sweep_h",
                "sweep.k": "sweep_k",
                "sweep.n_train_tasks": "sweep_n_train_tasks"}


def resolve_config(args):
    """Merge defaults, config file, SEED env var, and flags (that order)."""
    file_kv = parse_config_file(args.config) if args.config else {}
    run_fields = {f.name: f.default for f in fields(RunConfig)}
    pipe_fields = {f.name: getattr(PipelineConfig, f.name)
                   for f in fields(PipelineConfig) if f.name != "run"}
    run_kv, pipe_kv = {}, {}
    for key, val in file_kv.items():
        name = _KEY_ALIASES.get(key, key)
        if name.startswith("run."):
            name = name[4:]
        if name == "ablation":
            run_kv.update(_ablation_flags(val))
        elif name in run_fields:
            run_kv[name] = _coerce(val, run_fields[name])
        elif name in pipe_fields:
            pipe_kv[name] = _coerce(val, pipe_fields[name])
        else:
            raise ConfigError(f"unknown config key {key!r}")

    seed = run_kv.pop("seed", RunConfig.seed)
    if os.environ.get("SEED"):
        seed = int(os.environ["SEED"])
    if args.seed is not None:
        seed = args.seed
    run_kv["seed"] = seed
    if args.ablation is not None:
        run_kv.update(_ablation_flags(args.ablation))
    for flag, name in (("env", "env"), ("dataset", "dataset_type"),
                       ("out", "out")):
        v = getattr(args, flag, None)
        if v is not None:
            pipe_kv[name] = v
    for flag, name in (("variants", "variants"), ("seeds", "seeds")):
        v = getattr(args, flag, None)
        if v is not None:
            pipe_kv[name] = tuple(
                int(x) if name == "seeds" else x for x in v.split(","))
    return PipelineConfig(run=RunConfig(**run_kv), **pipe_kv)


def _ablation_flags(variant):
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; choose from "
                          + ", ".join(ABLATIONS))
    base = {"no_context": False, "no_complementary": False,
            "no_prompt": False}
    base.update(ABLATIONS[variant])
    return base


# ------------------------------------------------------------- manifests --

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_dict(pcfg):
    d = {f.name: getattr(pcfg, f.name) for f in fields(PipelineConfig)
         if f.name not in ("run", "out")}
    d["run"] = {f.name: getattr(pcfg.run, f.name) for f in fields(RunConfig)}
    return d


# Fields a command's output does not depend on are normalized out of its
# guard hash so shared artifacts (tasks, datasets, world model) are reused
# across ablation variants and driver invocations.
_DRIVER_FIELDS = ("seeds", "variants", "sweep_h", "sweep_k",
                  "sweep_n_train_tasks")
_PRE_POLICY = ("sample-tasks", "collect", "train-wm")


def config_hash(command, pcfg, inputs):
    if command in _PRE_POLICY:
        pcfg = replace(pcfg, run=pcfg.run.replace(
            no_context=False, no_complementary=False, no_prompt=False))
    if command == "sample-tasks":
        pcfg = replace(pcfg, dataset_type="", n_traj_per_task=0)
    cfg = _config_dict(pcfg)
    for name in _DRIVER_FIELDS:
        cfg.pop(name, None)
    payload = json.dumps({"command": command, "config": cfg,
                          "inputs": inputs}, sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()


def _manifest_path(path):
    return path + ".manifest.json"


def write_manifest(path, command, pcfg, inputs):
    man = {"command": command, "config_hash": config_hash(command, pcfg,
                                                          inputs),
           "seed": pcfg.run.seed, "out": pcfg.out,
           "config": _config_dict(pcfg), "inputs": inputs}
    with open(_manifest_path(path), "w") as fh:
        json.dump(man, fh, sort_keys=True, indent=1, default=list)
        fh.write("\n")


def outputs_current(paths, command, pcfg, inputs):
    """True when all outputs exist with matching manifests (the command is a
    no-op); RefuseToOverwrite when an output exists under a different
    configuration; False when outputs are absent."""
    want = config_hash(command, pcfg, inputs)
    seen = 0
    for path in paths:
        if not os.path.exists(path):
            continue
        seen += 1
        try:
            man = json.load(open(_manifest_path(path)))
        except OSError:
            raise RefuseToOverwrite(f"{path} exists without a manifest; "
                                    "move it aside or change --out")
        if man.get("config_hash") != want:
            raise RefuseToOverwrite(
                f"{path} was produced by a different configuration "
                f"(manifest {_manifest_path(path)}); refusing to overwrite")
    if seen == len(paths):
        return True
    if seen:
        raise RefuseToOverwrite(
            f"partial outputs for `{command}` in {pcfg.out}; remove them")
    return False


# ------------------------------------------------------------ artifacts --

def _p(pcfg, what, variant=None, seed=None):
    seed = pcfg.run.seed if seed is None else seed
    base = {"tasks": f"tasks_{pcfg.env}_s{seed}.jsonl",
            "data": f"data_{pcfg.env}_{pcfg.dataset_type}_s{seed}.jsonl",
            "wm": f"wm_{pcfg.env}_{pcfg.dataset_type}_s{seed}.ckpt",
            "wm_curve": f"wm_{pcfg.env}_{pcfg.dataset_type}_s{seed}"
                        "_curve.csv",
            "mdt": f"mdt_{pcfg.env}_{pcfg.dataset_type}_{variant}_s{seed}"
                   ".ckpt",
            "mdt_curve": f"mdt_{pcfg.env}_{pcfg.dataset_type}_{variant}"
                         f"_s{seed}_curve.csv",
            "eval": f"eval_{pcfg.env}_{pcfg.dataset_type}_{variant}_s{seed}"
                    ".csv",
            "summary": "summary.csv",
            "ablation": f"ablation_{pcfg.env}_{pcfg.dataset_type}.csv"}
    return os.path.join(pcfg.out, base[what])


def _require(path, producer):
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found; run `artifact {producer}` "
                              "first")
    return path


def _write_curve(path, header, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def save_tasks(path, pcfg, train, test):
    head = ('{"env":"%s","seed":%d,"n_train":%d,"n_test":%d}'
            % (pcfg.env, pcfg.run.seed, len(train), len(test)))
    with open(path, "w") as fh:
        fh.write("\n".join([head] + [_task_line(t) for t in train + test])
                 + "\n")


def load_tasks(path):
    lines = [ln for ln in open(path).read().splitlines() if ln]
    tasks = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        tasks.append(TaskSpec(
            rec["task_id"], rec["kind"],
            tuple(rec["goal"]) if rec["goal"] is not None else None,
            tuple(rec["wind"]) if rec["wind"] is not None else None,
            rec["split"]))
    train = [t for t in tasks if t.split == "train"]
    test = [t for t in tasks if t.split == "test"]
    return train, test


def _load_store(path):
    store = ParameterStore()
    for name, arr in load_params(path).items():
        store.add(name, arr)
    return store


# -------------------------------------------------------------- commands --

def cmd_sample_tasks(pcfg):
    os.makedirs(pcfg.out, exist_ok=True)
    out = _p(pcfg, "tasks")
    if outputs_current([out], "sample-tasks", pcfg, {}):
        return [out]
    spec = envmod.make_env(pcfg.env)
    train, test = envmod.sample_tasks(spec, pcfg.n_train_tasks,
                                      pcfg.n_test_tasks, pcfg.run.seed,
                                      ood=pcfg.ood)
    save_tasks(out, pcfg, list(train), list(test))
    write_manifest(out, "sample-tasks", pcfg, {})
    return [out]


def cmd_collect(pcfg):
    os.makedirs(pcfg.out, exist_ok=True)
    out = _p(pcfg, "data")
    if pcfg.dataset_type == "mixed":
        med_p = _require(
            _p(replace(pcfg, dataset_type="medium"), "data"),
            "collect --dataset medium")
        exp_p = _require(
            _p(replace(pcfg, dataset_type="expert"), "data"),
            "collect --dataset expert")
        inputs = {"medium": _sha256(med_p), "expert": _sha256(exp_p)}
        if outputs_current([out], "collect", pcfg, inputs):
            return [out]
        ds = datagen.mix(load_dataset(med_p), load_dataset(exp_p),
                         pcfg.run.seed)
    else:
        tasks_p = _require(_p(pcfg, "tasks"), "sample-tasks")
        inputs = {"tasks": _sha256(tasks_p)}
        if outputs_current([out], "collect", pcfg, inputs):
            return [out]
        train, _ = load_tasks(tasks_p)
        spec = envmod.make_env(pcfg.env)
        if pcfg.dataset_type == "expert":
            policy = datagen.BehaviorPolicy("expert")
        else:
            noise = datagen.calibrate_medium(spec, train, pcfg.run.seed)
            policy = datagen.BehaviorPolicy("medium", noise_std=noise)
        ds = datagen.collect(spec, train, policy, pcfg.n_traj_per_task,
                             pcfg.run.seed)
    save_dataset(ds, out)
    write_manifest(out, "collect", pcfg, inputs)
    return [out]


def cmd_train_wm(pcfg):
    data_p = _require(_p(pcfg, "data"), "collect")
    out, curve_p = _p(pcfg, "wm"), _p(pcfg, "wm_curve")
    inputs = {"data": _sha256(data_p)}
    if outputs_current([out, curve_p], "train-wm", pcfg, inputs):
        return [out, curve_p]
    ds = load_dataset(data_p)
    wm, curve = worldmodel.train_world_model([ds], pcfg.run)
    save_params(out, wm.store.params)
    _write_curve(curve_p, ("step", "loss_reward", "loss_state"), curve)
    for path in (out, curve_p):
        write_manifest(path, "train-wm", pcfg, inputs)
    return [out, curve_p]


def cmd_train_mdt(pcfg):
    variant = pcfg.run.variant_name
    data_p = _require(_p(pcfg, "data"), "collect")
    inputs = {"data": _sha256(data_p)}
    need_wm = variant != "dt"
    if need_wm:
        wm_p = _require(_p(pcfg, "wm"), "train-wm")
        inputs["wm"] = _sha256(wm_p)
    out = _p(pcfg, "mdt", variant=variant)
    curve_p = _p(pcfg, "mdt_curve", variant=variant)
    if outputs_current([out, curve_p], "train-mdt", pcfg, inputs):
        return [out, curve_p]
    ds = load_dataset(data_p)
    wm = None
    if need_wm:
        wm = worldmodel.WorldModel(_load_store(wm_p), ds.stats, pcfg.run.h)
    policy, curve = metadt.train_policy(ds, wm, pcfg.run,
                                        engine=pcfg.engine,
                                        top_m=pcfg.top_m)
    save_params(out, policy.store.params)
    _write_curve(curve_p, ("step", "action_loss"), curve)
    for path in (out, curve_p):
        write_manifest(path, "train-mdt", pcfg, inputs)
    return [out, curve_p]


def cmd_eval(pcfg):
    variant = pcfg.run.variant_name
    tasks_p = _require(_p(pcfg, "tasks"), "sample-tasks")
    data_p = _require(_p(pcfg, "data"), "collect")
    mdt_p = _require(_p(pcfg, "mdt", variant=variant), "train-mdt")
    inputs = {"tasks": _sha256(tasks_p), "data": _sha256(data_p),
              "mdt": _sha256(mdt_p)}
    need_wm = variant != "dt"
    if need_wm:
        wm_p = _require(_p(pcfg, "wm"), "train-wm")
        inputs["wm"] = _sha256(wm_p)
    out = _p(pcfg, "eval", variant=variant)
    if outputs_current([out], "eval", pcfg, inputs):
        return [out]
    _, test = load_tasks(tasks_p)
    ds = load_dataset(data_p)
    spec = envmod.make_env(pcfg.env)
    wm = None
    if need_wm:
        wm = worldmodel.WorldModel(_load_store(wm_p), ds.stats, pcfg.run.h)
    policy = metadt.Policy(_load_store(mdt_p), ds.stats, pcfg.run.dropout,
                           with_z=not pcfg.run.no_context)
    target = evalmod.target_return([ds], pcfg.run.target_return_multiplier)
    few = evalmod.evaluate_few_shot(spec, test, policy, wm, pcfg.run,
                                    target, dataset_type=pcfg.dataset_type)
    zero = evalmod.evaluate_zero_shot(spec, test, policy, wm, pcfg.run,
                                      target, dataset_type=pcfg.dataset_type)
    evalmod.write_report_csv(out, [few, zero])
    write_manifest(out, "eval", pcfg, inputs)
    return [out]


def read_report_csv(path):
    """Rebuild EvalReports (one per mode+seed group) from a report CSV."""
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["mode"], row["env"], row["dataset_type"],
                   row["ablation"], int(row["seed"]))
            groups.setdefault(key, []).append(
                (int(row["task_id"]), int(row["episode"]),
                 float(row["return"])))
    out = []
    for (mode, env_name, dstype, ablation, seed), rows in groups.items():
        scores = {}
        for task_id, ep, ret in rows:
            scores[task_id] = ret      # rows are episode-ordered per task
        out.append(EvalReport(mode, env_name, dstype, ablation, seed,
                              tuple((t, e, r, None) for t, e, r in rows),
                              scores))
    return out


def _run_variant_pipeline(pcfg, variant, seed):
    sub = replace(pcfg, run=pcfg.run.replace(seed=seed,
                                             **_ablation_flags(variant)))
    cmd_sample_tasks(sub)
    if sub.dataset_type == "mixed":
        for dt in ("medium", "expert"):
            cmd_collect(replace(sub, dataset_type=dt))
    cmd_collect(sub)
    if variant != "dt":
        cmd_train_wm(sub)
    cmd_train_mdt(sub)
    return cmd_eval(sub)[0]


def cmd_ablate(pcfg):
    """Full Meta-DT plus each requested variant, trained and evaluated per
    seed; emits one few-shot summary row per variant."""
    variants = ["meta_dt"] + [v for v in pcfg.variants if v != "meta_dt"]
    seeds = pcfg.seeds or (pcfg.run.seed,)
    reports = []
    for seed in seeds:
        for variant in variants:
            path = _run_variant_pipeline(pcfg, variant, seed)
            reports.extend(r for r in read_report_csv(path)
                           if r.mode == "few_shot")
    out = _p(pcfg, "ablation")
    rows = evalmod.aggregate(reports)
    order = {v: i for i, v in enumerate(variants)}
    rows.sort(key=lambda r: order.get(r["method_variant"], 99))
    evalmod.write_summary_csv(out, rows)
    write_manifest(out, "ablate", pcfg, {})
    return [out]


def cmd_sweep(pcfg, axis_arg):
    """One full pipeline per value of the swept RunConfig field; summary
    rows labeled by the axis setting."""
    if axis_arg:
        name, _, vals = axis_arg.partition("=")
        axes = {name.strip(): tuple(int(v) for v in vals.split(","))}
    else:
        axes = {n: getattr(pcfg, f"sweep_{n}")
                for n in ("h", "k", "n_train_tasks")
                if getattr(pcfg, f"sweep_{n}")}
    if not axes or any(not v for v in axes.values()):
        raise ConfigError("sweep requires a non-empty axis "
                          "(--axis h=4,6,8 or sweep.* config keys)")
    reports = []
    for name, values in axes.items():
        for v in values:
            sub = replace(pcfg, out=os.path.join(pcfg.out,
                                                 f"sweep_{name}{v}"))
            if name in ("h", "k"):
                sub = replace(sub, run=sub.run.replace(**{name: v}))
            else:
                sub = replace(sub, n_train_tasks=v)
            path = _run_variant_pipeline(sub, sub.run.variant_name,
                                         sub.run.seed)
            for rep in read_report_csv(path):
                if rep.mode == "few_shot":
                    reports.append((f"{name}={v}", rep))
    groups = {}
    for label, rep in reports:
        groups.setdefault((rep.env_name, rep.dataset_type, label),
                          []).append(rep.mean)
    rows = []
    for (env_name, dstype, label), means in groups.items():
        n = len(means)
        mean = sum(means) / n
        var = sum((m - mean) ** 2 for m in means) / (n - 1) if n > 1 else 0.0
        rows.append({"env": env_name, "dataset_type": dstype,
                     "method_variant": label, "mean": mean,
                     "stderr": (var / n) ** 0.5})
    out = os.path.join(pcfg.out, "sweep.csv")
    evalmod.write_summary_csv(out, rows)
    write_manifest(out, "sweep", pcfg, {})
    return [out]


def cmd_report(pcfg):
    """Aggregate every eval CSV under --out into the summary table."""
    paths = sorted(p for p in os.listdir(pcfg.out)
                   if p.startswith("eval_") and p.endswith(".csv"))
    if not paths:
        raise MissingArtifact(f"no eval CSVs under {pcfg.out}; run "
                              "`artifact eval` first")
    reports = []
    for p in paths:
        reports.extend(read_report_csv(os.path.join(pcfg.out, p)))
    out = _p(pcfg, "summary")
    evalmod.write_summary_csv(out, evalmod.aggregate(reports))
    write_manifest(out, "report", pcfg,
                   {p: _sha256(os.path.join(pcfg.out, p)) for p in paths})
    return [out]


# ------------------------------------------------------------------ main --

def _parser():
    p = argparse.ArgumentParser(
        prog="artifact",
        description="offline meta-RL pipeline (Point-Robot scale)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("sample-tasks", "collect", "train-wm", "train-mdt",
                 "eval", "ablate", "sweep", "report"):
        c = sub.add_parser(name)
        c.add_argument("--config", default=None)
        c.add_argument("--seed", type=int, default=None)
        c.add_argument("--env", choices=("point_robot",
                                         "point_robot_param"), default=None)
        c.add_argument("--dataset", choices=("medium", "expert", "mixed"),
                       default=None)
        c.add_argument("--ablation", choices=tuple(ABLATIONS), default=None)
        c.add_argument("--out", default=None)
        if name == "ablate":
            c.add_argument("--variants", default=None,
                           help="comma list of ablation variants")
            c.add_argument("--seeds", default=None,
                           help="comma list of seeds")
        if name == "sweep":
            c.add_argument("--axis", default=None,
                           help="field=v1,v2,... over h, k, n_train_tasks")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        pcfg = resolve_config(args)
        os.makedirs(pcfg.out, exist_ok=True)
        cmd = args.command
        if cmd == "sample-tasks":
            outs = cmd_sample_tasks(pcfg)
        elif cmd == "collect":
            outs = cmd_collect(pcfg)
        elif cmd == "train-wm":
            outs = cmd_train_wm(pcfg)
        elif cmd == "train-mdt":
            outs = cmd_train_mdt(pcfg)
        elif cmd == "eval":
            outs = cmd_eval(pcfg)
        elif cmd == "ablate":
            outs = cmd_ablate(pcfg)
        elif cmd == "sweep":
            outs = cmd_sweep(pcfg, args.axis)
        else:
            outs = cmd_report(pcfg)
    except (ConfigError, MissingArtifact, RefuseToOverwrite) as e:
        print(f"artifact {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as e:
        print(f"artifact {args.command}: {type(e).__name__}: {e}",
              file=sys.stderr)
        return 1
    for path in outs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
