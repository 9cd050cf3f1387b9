"""Command line entry point: ``piddpg <train|evaluate|sweep|synth-profile|verify>``.

Relative ``--out`` paths resolve against ``$PIDDPG_OUT_ROOT`` when it is set;
``$PIDDPG_WORKERS`` sets the default sweep worker count.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from ..errors import ConfigError, DomainError, NumericError, ShapeError, StateError
from ..trainer import SWEEP_PARAMS, ActorPolicy, TrainConfig, eval_env_seed, evaluate
from .profiles import DESK_SPEC, SynthSpec, load_profile, save_profile, synth_profile

BUILTIN_SPECS = {"default": {}, "desk": DESK_SPEC}
# Desk preset: small float32 nets keep the desk-scale checks inside their time
# budget; the learning settings suit the per-interval fee scale of the desk profile.
DESK_CONFIG = {
    "hidden_channels": 4,
    "dense_units": [64, 32],
    "net_dtype": "float32",
    "reward_scale": 1.0,
    "gamma": 0.5,
    "actor_lr": 1e-3,
    "sigma0": 0.2,
}


def _out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get("PIDDPG_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _resolve_profile(ref: str | None, seed: int = 0):
    """A profile file, or ``builtin:default`` / ``builtin:desk``."""
    if ref is None:
        raise ConfigError("--profile is required (a file or builtin:default / builtin:desk)")
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in BUILTIN_SPECS:
            raise ConfigError(f"unknown builtin profile {name!r}; choose from {sorted(BUILTIN_SPECS)}")
        return synth_profile(BUILTIN_SPECS[name], seed)
    return load_profile(ref)


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc.msg} (line {exc.lineno})") from None


def _train_config(args, **fixed) -> TrainConfig:
    overrides = _load_json(args.config)
    if args.desk:
        overrides = {**DESK_CONFIG, **overrides}
    return TrainConfig.from_dict({**overrides, **fixed})


def cmd_train(args) -> int:
    from .runs import config_from_manifest, run_training

    if args.manifest:
        config, profile = config_from_manifest(args.manifest)
    else:
        fixed = {"algo": args.algo, "seed": args.seed}
        if args.episodes is not None:
            fixed["episodes"] = args.episodes
        config = _train_config(args, **fixed)
        profile = _resolve_profile(args.profile)
    out = _out_path(args.out)
    result = run_training(config, profile, out)
    last = result.metrics[-1]
    print(f"trained {config.algo} seed={config.seed} episodes={config.episodes} "
          f"last_reward={last.total_reward:.3f} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from ..agent import DDPGAgent

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    agent, meta = DDPGAgent.load(ckpt)
    profile = _resolve_profile(args.profile or str(ckpt.parent / "profile.json"))
    if profile.grid != agent.grid:
        raise ConfigError("profile map does not match the checkpoint's map")
    seeds = [eval_env_seed(args.seed, k) for k in range(1, args.runs + 1)]
    stats = evaluate(ActorPolicy(agent, args.refine), profile, args.runs, seeds, agent.config.memory_length)
    report = {"checkpoint": str(ckpt), "runs": args.runs, "seed": args.seed, "refine_steps": args.refine,
              "mean": stats.mean, "min": stats.min, "max": stats.max, "rewards": stats.rewards}
    text = json.dumps(report, indent=2)
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    from .runs import run_sweep

    values = [v for v in args.values.split(",") if v.strip()]
    fixed = {"algo": args.algo, "seed": args.seed}
    if args.episodes is not None:
        fixed["episodes"] = args.episodes
    config = _train_config(args, **fixed)
    profile = _resolve_profile(args.profile)
    workers = args.workers if args.workers is not None else int(os.environ.get("PIDDPG_WORKERS", "1"))
    out = _out_path(args.out)
    rows, gains = run_sweep(config, profile, args.param, values, args.runs, out, workers)
    print(f"sweep {args.param} over {values}: {len(rows)} episode rows, {len(gains)} refiner calls -> {out}")
    return 0


def cmd_synth(args) -> int:
    if args.spec in BUILTIN_SPECS:
        spec = BUILTIN_SPECS[args.spec]
    else:
        spec = _load_json(args.spec)
    profile = synth_profile(SynthSpec.from_dict(spec), args.seed)
    out = _out_path(args.out)
    save_profile(profile, out)
    print(f"profile: {profile.n_cells} cells, horizon {profile.horizon}, {profile.n_platforms} platforms -> {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piddpg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def training_flags(p):
        p.add_argument("--profile", help="profile JSON file, or builtin:default / builtin:desk")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--episodes", type=int)
        p.add_argument("--config", help="JSON file of training config overrides")
        p.add_argument("--desk", action="store_true", help="start from the desk preset (small float32 nets, desk learning settings)")
        p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one policy and write a run directory")
    p.add_argument("--algo", default="pi-ddpg", help="ddpg, pi-ddpg or fixed:<ratio>")
    p.add_argument("--manifest", help="re-run exactly the run described by this manifest")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="noise-free evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--profile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refine", type=int, default=0, help="refinement steps at evaluation time")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sensitivity sweep over one hyperparameter")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--algo", default="pi-ddpg")
    p.add_argument("--workers", type=int)
    training_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-profile", help="generate a synthetic scenario profile")
    p.add_argument("--spec", default="default", help="spec JSON file or builtin name (default, desk)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="run the invariant and oracle checks")
    p.add_argument("--quick", action="store_true", help="smaller instance counts")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, ShapeError, StateError, NumericError) as exc:
        print(f"piddpg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
