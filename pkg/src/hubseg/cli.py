"""Command-line front end; a thin shell over the library calls.

Commands
--------
run        generate episodes and score strategies, writing a metrics file
           and a run manifest beside it
sweep      re-run over a grid of one parameter, one metrics file per value
           plus a combined summary
gradcheck  verify analytic loss gradients against finite differences
gen        write one generated episode to a file

Config files are flat ``key = value`` text; ``#`` starts a comment. Any CLI
flag overrides the file. Exit codes: 0 success, 1 failed check, 2 bad
configuration, 3 unreadable/unwritable files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace

from . import __version__
from .core import SeededRng
from .episodes import EpisodeConfig, generate_synthetic_episode, atomic_write_text, write_episode
from .experiment import PipelineParams, parse_strategy, run_experiment, write_metrics
from .refine import gradient_check

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_EPISODE_KEYS = {f.name: f.type for f in fields(EpisodeConfig)}
_PARAM_KEYS = {f.name: f.type for f in fields(PipelineParams)}
_RUN_KEYS = ("episodes", "strategies", "out")
# "lambda" is the user-facing spelling of the PipelineParams field "lam".
_KEY_ALIASES = {"lambda": "lam"}

_INT_KEYS = {
    "n_way", "n_shot", "n_query", "points_per_cloud", "dim", "modes_per_class",
    "seed", "k", "eta", "opt_steps", "episodes",
}
_FLOAT_KEYS = {"shift", "noise", "gamma", "tau", "tau_seg", "lam", "epsilon", "opt_step_size"}


class ConfigError(Exception):
    pass


def parse_config_file(path: str) -> dict:
    """Flat key = value parser; unknown keys are rejected by name."""
    out: dict = {}
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = _KEY_ALIASES.get(key, key)
            out[key] = _parse_value(key, value, f"{path}:{lineno}")
    return out


def _parse_value(key: str, value: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key == "strategies":
            return tuple(s.strip() for s in value.split(",") if s.strip())
        if key == "out":
            return value
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    raise ConfigError(f"{where}: unknown config key {key!r}")


def resolve_run_config(file_values: dict, overrides: dict) -> tuple[EpisodeConfig, PipelineParams, tuple, int, str]:
    """Merge file values with CLI overrides (overrides win)."""
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    episode_kwargs, param_kwargs = {}, {}
    episodes, strategies, out = 100, ("hub", "fps"), "metrics.csv"
    for key, value in merged.items():
        if key in _EPISODE_KEYS:
            episode_kwargs[key] = value
        elif key in _PARAM_KEYS:
            param_kwargs[key] = value
        elif key == "episodes":
            episodes = value
        elif key == "strategies":
            strategies = tuple(value)
        elif key == "out":
            out = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg = EpisodeConfig(**episode_kwargs)
        params = PipelineParams(**param_kwargs)
        if episodes < 0:
            raise ValueError("episodes must be non-negative")
        for s in strategies:
            parse_strategy(s)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, params, strategies, episodes, out


def _manifest_text(cfg: EpisodeConfig, params: PipelineParams, strategies, episodes: int, out: str) -> str:
    entries = {f.name: getattr(cfg, f.name) for f in fields(EpisodeConfig)}
    entries.update({f.name: getattr(params, f.name) for f in fields(PipelineParams)})
    entries["episodes"] = episodes
    entries["strategies"] = ",".join(strategies)
    entries["out"] = out
    entries["artifact_version"] = __version__
    return "".join(f"{k} = {entries[k]}\n" for k in sorted(entries))


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--episodes", type=int, help="number of episodes")
    p.add_argument("--out", help="output file path")
    p.add_argument(
        "--strategy", action="append", dest="strategies",
        help="strategy to evaluate; repeat for several (replaces the config list)",
    )
    for key in ("n_way", "n_shot", "n_query", "points_per_cloud", "dim", "modes_per_class"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    for key in ("shift", "noise"):
        p.add_argument(f"--{key}", type=float, dest=key)
    for key in ("k", "eta", "opt_steps"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    for key in ("gamma", "tau", "tau_seg", "epsilon", "opt_step_size"):
        p.add_argument(f"--{key.replace('_', '-')}", type=float, dest=key)
    p.add_argument("--lambda", type=float, dest="lam", help="weight of the contrastive term")


def _collect_overrides(args: argparse.Namespace) -> dict:
    keys = list(_EPISODE_KEYS) + list(_PARAM_KEYS) + list(_RUN_KEYS)
    out = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = tuple(value) if key == "strategies" else value
    return out


def _load_and_resolve(args: argparse.Namespace):
    file_values = parse_config_file(args.config) if args.config else {}
    return resolve_run_config(file_values, _collect_overrides(args))


def cmd_run(args: argparse.Namespace) -> int:
    cfg, params, strategies, episodes, out = _load_and_resolve(args)
    report = run_experiment(cfg, episodes, strategies, params)
    write_metrics(report, out)
    atomic_write_text(out + ".manifest", _manifest_text(cfg, params, strategies, episodes, out))
    for s in strategies:
        agg = report.aggregates[s]
        print(f"{s}: mean mIoU {agg.mean:.4f} (std {agg.std:.4f}, n={agg.count})")
    print(f"wrote {out}")
    return EXIT_OK


_SWEEPABLE = ("k", "eta", "gamma", "lambda", "ratio")


def _apply_sweep_value(parameter: str, value: float, cfg, params, strategies):
    if parameter == "k":
        return cfg, replace(params, k=int(value)), strategies
    if parameter == "eta":
        return cfg, replace(params, eta=int(value)), strategies
    if parameter == "gamma":
        return cfg, replace(params, gamma=value), strategies
    if parameter == "lambda":
        return cfg, replace(params, lam=value), strategies
    # ratio: the sweep is over the mixing fraction itself
    return cfg, params, (f"mixed:{value:g}",)


def _sweep_out_path(base: str, parameter: str, value) -> str:
    stem, dot, ext = base.rpartition(".")
    tag = f"{parameter}_{value:g}"
    if dot:
        return f"{stem}_{tag}.{ext}"
    return f"{base}_{tag}"


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.parameter not in _SWEEPABLE:
        raise ConfigError(f"unknown sweep parameter {args.parameter!r}; choose from {_SWEEPABLE}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values: {exc}") from None
    if not values:
        raise ConfigError("sweep needs at least one value")
    cfg, params, strategies, episodes, out = _load_and_resolve(args)
    summary = ["parameter,value,strategy,count,mean,std"]
    for value in values:
        try:
            v_cfg, v_params, v_strategies = _apply_sweep_value(
                args.parameter, value, cfg, params, strategies
            )
            report = run_experiment(v_cfg, episodes, v_strategies, v_params)
        except ValueError as exc:
            raise ConfigError(f"{args.parameter}={value:g}: {exc}") from None
        v_out = _sweep_out_path(out, args.parameter, value)
        write_metrics(report, v_out)
        atomic_write_text(
            v_out + ".manifest",
            _manifest_text(v_cfg, v_params, v_strategies, episodes, v_out),
        )
        for s in v_strategies:
            agg = report.aggregates[s]
            summary.append(f"{args.parameter},{value:g},{s},{agg.count},{agg.mean!r},{agg.std!r}")
    summary_path = out + ".summary"
    atomic_write_text(summary_path, "\n".join(summary) + "\n")
    print("\n".join(summary))
    print(f"wrote {summary_path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    result = gradient_check(args.seed, args.cases, corrupt=args.corrupt)
    ok = result.max_rel_error < args.tolerance
    status = "PASS" if ok else "FAIL"
    print(
        f"{status}: max relative gradient error {result.max_rel_error:.3e} "
        f"over {result.cases} cases (tolerance {args.tolerance:g})"
    )
    if not ok:
        print(
            f"worst case: index {result.worst_case} "
            f"(rng stream [{args.seed}, {result.worst_case}])"
        )
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_gen(args: argparse.Namespace) -> int:
    cfg, _, _, _, _ = _load_and_resolve(args)
    path = args.out or "episode.json"
    episode = generate_synthetic_episode(cfg, SeededRng(cfg.seed, args.stream))
    write_episode(episode, path)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hubseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="score strategies over generated episodes")
    _add_override_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid over one parameter")
    _add_override_flags(p_sweep)
    p_sweep.add_argument("--parameter", required=True, help=f"one of {', '.join(_SWEEPABLE)}")
    p_sweep.add_argument("--values", required=True, help="comma-separated parameter values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--cases", type=int, default=50)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument(
        "--corrupt", type=float, default=0.0,
        help="bias added to analytic gradients (negative-control hook)",
    )
    p_grad.set_defaults(func=cmd_gradcheck)

    p_gen = sub.add_parser("gen", help="write one generated episode")
    _add_override_flags(p_gen)
    p_gen.add_argument("--stream", type=int, default=0, help="episode stream id")
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # Library-level rejections (degenerate episode layouts and the like)
        # are configuration problems from the CLI's point of view.
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
