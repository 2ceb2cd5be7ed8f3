"""Command-line drivers for the three pipelines.

Subcommands: gen-data, train-cvae, relabel, train, eval, skills, sweep.
Config precedence: flags > --config file > defaults. Every command echoes its
fully-resolved config next to its outputs, and reruns with the same config
and seed reproduce outputs byte for byte.

Exit codes: 0 success, 2 usage, 3 validation, 4 training diverged,
5 partial skill failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cvae as cvae_mod
from . import envs, offline_rl, pipeline, reward, skills as skills_mod
from .cvae import CvaeConfig
from .dataset import DatasetError, concat, filter_expert_by_success, load, save, subsample_trajectories
from .numerics import TrainingDivergedError
from .offline_rl import IqlConfig
from .pipeline import STAGE_DATA, STAGE_EVAL, RewardConfig, spawn_rng
from .skills import SkillsConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_DIVERGED = 4
EXIT_PARTIAL_SKILLS = 5


class ValidationFailure(Exception):
    pass


@dataclass
class RunConfig:
    pipeline: str = "sparse"  # sparse | il | skills
    seed: int | None = None
    out: str = "runs/out"
    layout: str | None = None
    data: str | None = None
    expert_data: str | None = None
    cvae_checkpoint: str | None = None
    agent_checkpoint: str | None = None
    expert_k: int = 1
    episodes: int = 500
    mix: str = "expert:0.05,random:0.95"
    expert_episodes: int = 0
    fraction: float = 1.0
    dense_reward: bool = False
    eval_seeds: int = 10
    eval_episodes: int = 10
    eval_every: int | None = None
    sweep: str = "uplift"
    values: str = ""
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    skills: SkillsConfig = field(default_factory=SkillsConfig)

    def as_dict(self):
        out = dataclasses.asdict(self)
        out["cvae"]["hidden"] = list(self.cvae.hidden)
        out["iql"]["hidden"] = list(self.iql.hidden)
        return out


_SECTIONS = {"cvae": CvaeConfig, "reward": RewardConfig, "iql": IqlConfig, "skills": SkillsConfig}


def config_from_dict(obj):
    if not isinstance(obj, dict):
        raise ValidationFailure("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ValidationFailure(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            section_known = {f.name for f in fields(cls)}
            bad = set(value) - section_known
            if bad:
                raise ValidationFailure(f"unknown keys in [{key}]: {sorted(bad)}")
            if "hidden" in value:
                value = dict(value, hidden=tuple(value["hidden"]))
            kwargs[key] = cls(**value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _hidden_tuple(text):
    return tuple(int(x) for x in text.split(",") if x)


# flag dest -> (section, field) used when folding parsed args into the config
_FLAG_MAP = {
    "seed": (None, "seed"),
    "out": (None, "out"),
    "layout": (None, "layout"),
    "data": (None, "data"),
    "expert_data": (None, "expert_data"),
    "cvae_checkpoint": (None, "cvae_checkpoint"),
    "agent_checkpoint": (None, "agent_checkpoint"),
    "expert_k": (None, "expert_k"),
    "episodes": (None, "episodes"),
    "mix": (None, "mix"),
    "expert_episodes": (None, "expert_episodes"),
    "fraction": (None, "fraction"),
    "dense_reward": (None, "dense_reward"),
    "eval_seeds": (None, "eval_seeds"),
    "eval_episodes": (None, "eval_episodes"),
    "eval_every": (None, "eval_every"),
    "sweep": (None, "sweep"),
    "values": (None, "values"),
    "pipeline": (None, "pipeline"),
    "latent_dim": ("cvae", "latent_dim"),
    "cvae_hidden": ("cvae", "hidden"),
    "cvae_batch": ("cvae", "batch_size"),
    "cvae_iterations": ("cvae", "iterations"),
    "cvae_lr": ("cvae", "learning_rate"),
    "calibration_weight": ("cvae", "calibration_weight"),
    "elbo_samples": ("cvae", "elbo_samples"),
    "exclude_expert_from_mixed": ("cvae", "exclude_expert_from_mixed"),
    "temperature": ("reward", "temperature"),
    "sampling_mode": ("reward", "sampling_mode"),
    "expectile": ("iql", "expectile"),
    "beta": ("iql", "awr_temperature"),
    "discount": ("iql", "discount"),
    "polyak": ("iql", "polyak"),
    "iql_lr": ("iql", "learning_rate"),
    "iql_batch": ("iql", "batch_size"),
    "iql_hidden": ("iql", "hidden"),
    "dropout": ("iql", "dropout"),
    "steps": ("iql", "steps"),
    "reward_scale": ("iql", "reward_scale_mode"),
    "reward_shift": ("iql", "reward_shift"),
    "k": ("skills", "k"),
    "skills_mode": ("skills", "mode"),
    "pretrain_iterations": ("skills", "pretrain_iterations"),
    "finetune_iterations": ("skills", "finetune_iterations"),
    "min_cluster_fraction": ("skills", "min_cluster_fraction"),
}


def resolve_config(args):
    """defaults < config file < command-line flags; then seed fallback."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationFailure(f"config file not found: {path}")
        cfg = config_from_dict(json.loads(path.read_text(encoding="utf-8")))
    for dest, (section, name) in _FLAG_MAP.items():
        if not hasattr(args, dest):
            continue
        value = getattr(args, dest)
        if value is None:
            continue
        if section is None:
            cfg = replace(cfg, **{name: value})
        else:
            sub = replace(getattr(cfg, section), **{name: value})
            cfg = replace(cfg, **{section: sub})
    if cfg.seed is None and os.environ.get("CLUE_SEED"):
        cfg = replace(cfg, seed=int(os.environ["CLUE_SEED"]))
    return cfg


def _require(cfg, *names):
    for name in names:
        if getattr(cfg, name) in (None, ""):
            raise ValidationFailure(f"--{name.replace('_', '-')} (or config key '{name}') is required")


def _check_input_paths(cfg, *names):
    for name in names:
        value = getattr(cfg, name)
        if value and value not in envs.BUILTIN_LAYOUTS and not Path(value).exists():
            raise ValidationFailure(f"{name} path does not exist: {value}")


def _echo_config(cfg, outdir):
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(cfg.as_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _load_env(cfg):
    mode = "dense" if cfg.dense_reward else "sparse"
    return envs.load_layout(cfg.layout, reward_mode=mode)


def _load_data(cfg):
    data = load(cfg.data)
    if cfg.fraction < 1.0:
        data = subsample_trajectories(data, cfg.fraction, spawn_rng(cfg.seed, 30))
    return data


def _mixed_and_expert(cfg, data):
    """Expert from an external file (union goes to the CVAE) or filtered from data."""
    if cfg.expert_data:
        expert = load(cfg.expert_data)
        mixed = concat([data, expert])
    else:
        expert, _ = filter_expert_by_success(data, cfg.expert_k)
        mixed = data
    return mixed, expert


def cmd_gen_data(cfg):
    _require(cfg, "layout", "seed")
    _check_input_paths(cfg, "layout")
    env = _load_env(cfg)
    data = pipeline.generate_mixture_dataset(env, cfg.mix, cfg.episodes, cfg.seed)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save(data, outdir / "behavior.jsonl")
    success = float(np.mean([t.success for t in data.trajectories]))
    print(f"wrote {outdir / 'behavior.jsonl'}: {len(data)} episodes, "
          f"{data.n_transitions} transitions, success rate {success:.3f}")
    if cfg.expert_episodes > 0:
        expert_env = env
        expert = envs.generate_dataset(
            expert_env, envs.WaypointExpert(expert_env), cfg.expert_episodes,
            spawn_rng(cfg.seed, STAGE_DATA, 1),
        )
        save(expert, outdir / "expert.jsonl")
        print(f"wrote {outdir / 'expert.jsonl'}: {len(expert)} expert episodes")
    _echo_config(cfg, outdir)
    return EXIT_OK


def _histogram_rows(values, bins=20):
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return [(edges[i], edges[i + 1], int(counts[i])) for i in range(bins)]


def cmd_train_cvae(cfg):
    _require(cfg, "data", "seed")
    _check_input_paths(cfg, "data", "expert_data")
    data = _load_data(cfg)
    mixed, expert = _mixed_and_expert(cfg, data)
    model, report = pipeline.train_cvae(mixed, expert, cfg.cvae, cfg.seed)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    cvae_mod.save_cvae(model, outdir / "cvae.ckpt", default_temperature=cfg.reward.temperature)
    _write_csv(
        outdir / "cvae_report.csv",
        ["iteration", "elbo", "kl", "reconstruction", "calibration"],
        [(i, report.elbo[i], report.kl[i], report.reconstruction[i], report.calibration[i])
         for i in range(len(report))],
    )
    print(f"trained CVAE on {mixed.n_transitions} transitions "
          f"({expert.n_transitions} expert); final expert spread {report.final_expert_spread:.4f}")
    _echo_config(cfg, outdir)
    return EXIT_OK


def cmd_relabel(cfg):
    _require(cfg, "data", "seed")
    _check_input_paths(cfg, "data", "expert_data", "cvae_checkpoint")
    data = _load_data(cfg)
    mixed, expert = _mixed_and_expert(cfg, data)
    if cfg.cvae_checkpoint:
        model, sidecar = cvae_mod.load_cvae(cfg.cvae_checkpoint)
    else:
        model, _ = pipeline.train_cvae(mixed, expert, cfg.cvae, cfg.seed)
    labeler = reward.make_labeler(
        model, expert, temperature=cfg.reward.temperature, sampling_mode=cfg.reward.sampling_mode
    )
    rng = spawn_rng(cfg.seed, 99) if cfg.reward.sampling_mode == "sample" else None
    relabeled = reward.relabel(labeler, mixed, rng)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save(relabeled, outdir / "relabeled.jsonl")
    flat = relabeled.flat()
    _write_csv(outdir / "reward_hist.csv", ["bin_low", "bin_high", "count"],
               _histogram_rows(flat.rewards))
    report = {"n_transitions": int(len(flat)), "mean_reward": float(flat.rewards.mean())}
    originals = [t.original_rewards for t in relabeled.trajectories]
    if all(o is not None for o in originals):
        ground_truth = np.concatenate(originals)
        if ground_truth.std() > 0 and flat.rewards.std() > 0:
            report["pearson_correlation"] = float(np.corrcoef(flat.rewards, ground_truth)[0, 1])
        else:
            report["pearson_correlation"] = None
    (outdir / "relabel_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    corr = report.get("pearson_correlation")
    print(f"relabeled {len(flat)} transitions; mean intrinsic reward {report['mean_reward']:.4f}"
          + (f"; correlation with ground truth {corr:.3f}" if corr is not None else ""))
    _echo_config(cfg, outdir)
    return EXIT_OK


def cmd_train(cfg):
    _require(cfg, "data", "seed")
    _check_input_paths(cfg, "data", "layout")
    data = _load_data(cfg)
    eval_env = _load_env(cfg) if cfg.layout else None
    eval_every = cfg.eval_every
    if eval_env is not None and eval_every is None:
        eval_every = max(1, cfg.iql.steps // 10)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        agent, curves, _ = pipeline.train_iql(
            data, cfg.iql, cfg.seed, eval_env=eval_env,
            eval_episodes=cfg.eval_episodes, eval_every=eval_every,
        )
    except TrainingDivergedError as exc:
        _write_curves(outdir / "curves.csv", exc.report or [])
        _echo_config(cfg, outdir)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    offline_rl.save_agent(agent, outdir / "agent.ckpt")
    _write_curves(outdir / "curves.csv", curves)
    print(f"trained IQL for {cfg.iql.steps} steps on {data.n_transitions} transitions")
    _echo_config(cfg, outdir)
    return EXIT_OK


def _write_curves(path, curves):
    _write_csv(
        path,
        ["step", "v_loss", "q_loss", "pi_loss", "eval_return", "eval_success_rate"],
        [(r["step"], r["v_loss"], r["q_loss"], r["pi_loss"], r["eval_return"], r["eval_success_rate"])
         for r in curves],
    )


def cmd_eval(cfg):
    _require(cfg, "agent_checkpoint", "layout", "seed")
    _check_input_paths(cfg, "agent_checkpoint", "layout")
    agent = offline_rl.load_agent(cfg.agent_checkpoint)
    env = _load_env(cfg)
    rows = []
    for i in range(cfg.eval_seeds):
        result = envs.evaluate(env, agent, cfg.eval_episodes, spawn_rng(cfg.seed, STAGE_EVAL, i))
        rows.append((i, result.mean_return, result.success_rate))
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(outdir / "scores.csv", ["seed", "mean_return", "success_rate"], rows)
    returns = np.array([r[1] for r in rows])
    succ = np.array([r[2] for r in rows])
    print(f"return {returns.mean():.3f} ± {returns.std():.3f}; "
          f"success {succ.mean():.3f} ± {succ.std():.3f} "
          f"({cfg.eval_seeds} seeds x {cfg.eval_episodes} episodes)")
    _echo_config(cfg, outdir)
    return EXIT_OK


def cmd_skills(cfg):
    _require(cfg, "data", "seed")
    _check_input_paths(cfg, "data", "layout")
    data = _load_data(cfg)
    if data.is_labeled:
        print("dataset is reward-labeled; ignoring rewards for skill discovery")
        from dataclasses import replace as dc_replace

        from .dataset import from_trajectories

        data = from_trajectories([dc_replace(t, rewards=None) for t in data.trajectories])
    eval_env = _load_env(cfg) if cfg.layout else None
    library = skills_mod.learn_skills(
        data, cfg.skills.k, cfg.cvae, cfg.reward, cfg.iql, cfg.seed,
        skills_cfg=cfg.skills, eval_env=eval_env, eval_episodes=cfg.eval_episodes,
    )
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    skills_mod.save_library(library, outdir / "skills")
    _write_csv(outdir / "diversity.csv", ["skill_a", "skill_b", "final_state_distance"],
               skills_mod.diversity_matrix(library))
    if eval_env is not None:
        _dump_skill_rollouts(library, eval_env, outdir / "skills", cfg)
    failures = [e for e in library.entries if e.error is not None]
    print(f"learned {len(library.successful())} skills "
          f"({len(failures)} failures) from {data.n_transitions} transitions")
    _echo_config(cfg, outdir)
    return EXIT_PARTIAL_SKILLS if failures else EXIT_OK


def _dump_skill_rollouts(library, env, root, cfg, episodes=5):
    for entry in library.successful():
        rows = []
        rng = spawn_rng(cfg.seed, 20, entry.cluster_id)
        for _ in range(episodes):
            traj = envs.rollout(env, lambda s: offline_rl.act(entry.agent, s), rng)
            rows.append({
                "states": traj.observations.tolist(),
                "return": float(traj.rewards.sum()),
                "success": bool(traj.success),
            })
        path = Path(root) / str(entry.cluster_id) / "rollouts.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, separators=(",", ":")) + "\n")


def _sweep_values(cfg):
    if not cfg.values:
        raise ValidationFailure("--values is required for this sweep")
    return [float(v) for v in cfg.values.split(",") if v]


def cmd_sweep(cfg):
    _require(cfg, "data", "layout", "seed")
    _check_input_paths(cfg, "data", "layout")
    data = _load_data(cfg)
    env = _load_env(cfg)
    seeds = [cfg.seed + i for i in range(cfg.eval_seeds)]
    rows = []
    if cfg.sweep == "uplift":
        for seed in seeds:
            pair = pipeline.uplift_pair(
                data, cfg.expert_k, cfg.cvae, cfg.reward, cfg.iql, seed, env, cfg.eval_episodes
            )
            rows.append(("uplift", "", seed, "sparse", pair["sparse_return"], pair["sparse_success"]))
            rows.append(("uplift", "", seed, "relabeled", pair["relabeled_return"], pair["relabeled_success"]))
    elif cfg.sweep == "lambda":
        for value in _sweep_values(cfg):
            for seed in seeds:
                run = pipeline.run_offline_il(
                    *_mixed_and_expert(cfg, data), replace(cfg.cvae, calibration_weight=value),
                    cfg.reward, cfg.iql, seed, env, cfg.eval_episodes,
                )
                rows.append(("lambda", value, seed, "relabeled",
                             run.eval_result.mean_return, run.eval_result.success_rate))
    elif cfg.sweep == "temperature":
        for seed in seeds:
            mixed, expert = _mixed_and_expert(cfg, data)
            model, _ = pipeline.train_cvae(mixed, expert, cfg.cvae, seed)
            for value in _sweep_values(cfg):
                labeler = reward.make_labeler(model, expert, temperature=value,
                                              sampling_mode=cfg.reward.sampling_mode)
                relabeled = reward.relabel(labeler, mixed)
                agent, _, _ = pipeline.train_iql(relabeled, cfg.iql, seed)
                result = envs.evaluate(env, agent, cfg.eval_episodes, spawn_rng(seed, STAGE_EVAL, 0))
                rows.append(("temperature", value, seed, "relabeled",
                             result.mean_return, result.success_rate))
    elif cfg.sweep == "fraction":
        for value in _sweep_values(cfg):
            for seed in seeds:
                sub = subsample_trajectories(data, value, spawn_rng(seed, 31))
                pair = pipeline.uplift_pair(
                    sub, cfg.expert_k, cfg.cvae, cfg.reward, cfg.iql, seed, env, cfg.eval_episodes
                )
                rows.append(("fraction", value, seed, "sparse",
                             pair["sparse_return"], pair["sparse_success"]))
                rows.append(("fraction", value, seed, "relabeled",
                             pair["relabeled_return"], pair["relabeled_success"]))
    else:
        raise ValidationFailure(f"unknown sweep {cfg.sweep!r}")
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(outdir / "sweep.csv",
               ["sweep", "param_value", "seed", "arm", "mean_return", "success_rate"], rows)
    print(f"swept {cfg.sweep}: {len(rows)} rows -> {outdir / 'sweep.csv'}")
    _echo_config(cfg, outdir)
    return EXIT_OK


def _add_common(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--layout")
    p.add_argument("--fraction", type=float)
    p.add_argument("--eval-seeds", dest="eval_seeds", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int)


def _add_cvae_flags(p):
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--cvae-hidden", dest="cvae_hidden", type=_hidden_tuple)
    p.add_argument("--cvae-batch", dest="cvae_batch", type=int)
    p.add_argument("--cvae-iterations", dest="cvae_iterations", type=int)
    p.add_argument("--cvae-lr", dest="cvae_lr", type=float)
    p.add_argument("--lambda", dest="calibration_weight", type=float,
                   help="calibration regularizer weight")
    p.add_argument("--elbo-samples", dest="elbo_samples", type=int)
    p.add_argument("--exclude-expert-from-mixed", dest="exclude_expert_from_mixed",
                   action="store_const", const=True)
    p.add_argument("--expert-data", dest="expert_data")
    p.add_argument("--expert-k", dest="expert_k", type=int)


def _add_reward_flags(p):
    p.add_argument("--c", "--temperature", dest="temperature", type=float,
                   help="intrinsic reward temperature")
    p.add_argument("--sampling-mode", dest="sampling_mode", choices=["mean", "sample"])


def _add_iql_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--expectile", type=float)
    p.add_argument("--beta", type=float, help="advantage-weighted regression temperature")
    p.add_argument("--discount", type=float)
    p.add_argument("--polyak", type=float)
    p.add_argument("--iql-lr", dest="iql_lr", type=float)
    p.add_argument("--iql-batch", dest="iql_batch", type=int)
    p.add_argument("--iql-hidden", dest="iql_hidden", type=_hidden_tuple)
    p.add_argument("--dropout", type=float)
    p.add_argument("--reward-scale", dest="reward_scale", choices=["none", "return_range"])
    p.add_argument("--reward-shift", dest="reward_shift", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="clue", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll scripted policies into a dataset file")
    _add_common(p)
    p.add_argument("--episodes", type=_positive_int)
    p.add_argument("--mix", help="policy mixture, e.g. expert:0.05,random:0.95")
    p.add_argument("--expert-episodes", dest="expert_episodes", type=int,
                   help="also write a separate pure-expert dataset")
    p.add_argument("--dense-reward", dest="dense_reward", action="store_const", const=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cvae", help="fit the calibrated behavior embedding")
    _add_common(p)
    _add_cvae_flags(p)
    _add_reward_flags(p)
    p.set_defaults(func=cmd_train_cvae)

    p = sub.add_parser("relabel", help="write an intrinsically-relabeled dataset")
    _add_common(p)
    _add_cvae_flags(p)
    _add_reward_flags(p)
    p.add_argument("--cvae", dest="cvae_checkpoint", help="reuse a trained CVAE checkpoint")
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("train", help="train IQL on a labeled or relabeled dataset")
    _add_common(p)
    _add_iql_flags(p)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--dense-reward", dest="dense_reward", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score an agent checkpoint over seeds x episodes")
    _add_common(p)
    p.add_argument("--agent", dest="agent_checkpoint")
    p.add_argument("--dense-reward", dest="dense_reward", action="store_const", const=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("skills", help="unsupervised skill discovery via clustering")
    _add_common(p)
    _add_cvae_flags(p)
    _add_reward_flags(p)
    _add_iql_flags(p)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--skills-mode", dest="skills_mode", choices=["shared_finetune", "per_cluster"])
    p.add_argument("--pretrain-iterations", dest="pretrain_iterations", type=int)
    p.add_argument("--finetune-iterations", dest="finetune_iterations", type=int)
    p.add_argument("--min-cluster-fraction", dest="min_cluster_fraction", type=float)
    p.set_defaults(func=cmd_skills)

    p = sub.add_parser("sweep", help="experiment grids: uplift, lambda, temperature, fraction")
    _add_common(p)
    _add_cvae_flags(p)
    _add_reward_flags(p)
    _add_iql_flags(p)
    p.add_argument("--sweep", choices=["uplift", "lambda", "temperature", "fraction"])
    p.add_argument("--values", help="comma-separated sweep values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if cfg.seed is None:
            parser.error("seed is mandatory: pass --seed, set it in --config, or export CLUE_SEED")
        return args.func(cfg)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
