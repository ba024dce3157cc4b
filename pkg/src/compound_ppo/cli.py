"""Command-line experiment runner: ``train``, ``sweep`` and ``eval``."""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime as _dt
import json
import logging
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_FORMAT_VERSION, PRESETS, TrainConfig, preset
from .losses import LOSS_NAMES
from .nn import CHECKPOINT_FORMAT_VERSION
from .rollout import FRAME_FORMAT_VERSION
from .training import METRICS_COLUMNS, TrainingDiverged, evaluate, serial_train

log = logging.getLogger("compound_ppo")

OUT_ENV_VAR = "COMPOUND_PPO_OUT"
METRICS_SCHEMA_VERSION = 1

# flag name -> TrainConfig field
_FLAG_FIELDS = {
    "env": "env", "loss": "loss", "w": "w", "clip_eps": "clip_eps", "gamma": "gamma", "lam": "lam",
    "lr": "lr", "c1": "c1", "c2": "c2", "steps": "total_steps", "rollout_len": "rollout_len",
    "num_envs": "num_envs", "minibatch": "minibatch", "epochs": "epochs", "seed": "seed",
    "mode": "mode", "samplers": "samplers", "trainers": "trainers",
}


def _eps_arg(text: str):
    if text.strip().lower() in ("inf", "none", "noclip", "no-clip"):
        return math.inf
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("clip eps must be positive or 'inf'")
    return value


def _add_config_flags(p: argparse.ArgumentParser, *, single_run: bool) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", type=Path, help="start from a config snapshot file")
    p.add_argument("--env", choices=["gridharvest", "chainreach"])
    if single_run:
        p.add_argument("--loss", choices=LOSS_NAMES)
        p.add_argument("--clip-eps", type=_eps_arg, help="positive float, or 'inf' to disable clipping")
        p.add_argument("--seed", type=int)
    p.add_argument("--w", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--c2", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--rollout-len", type=int)
    p.add_argument("--num-envs", type=int)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=["serial", "async"])
    p.add_argument("--samplers", type=int)
    p.add_argument("--trainers", type=int)
    p.add_argument("--out-dir", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compound-ppo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training job")
    _add_config_flags(train, single_run=True)

    sweep = sub.add_parser("sweep", help="train every (loss, eps, seed) combination")
    _add_config_flags(sweep, single_run=False)
    sweep.add_argument("--losses", default=",".join(LOSS_NAMES), help="comma-separated loss names")
    sweep.add_argument("--eps-list", default="0.1,0.2,0.3,0.5", help="comma-separated clip eps values")
    sweep.add_argument("--include-noclip", action="store_true", help="also run with clipping disabled")
    sweep.add_argument("--seeds", default="0", help="comma-separated seeds")
    sweep.add_argument("--jobs", type=int, default=1)

    ev = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    ev.add_argument("checkpoint", type=Path)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--env", choices=["gridharvest", "chainreach"])
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Config snapshot, then preset, then explicit flags; later wins."""
    if args.config is not None:
        base = TrainConfig.load(args.config).to_dict()
    elif args.preset is not None:
        base = preset(args.preset).to_dict()
    else:
        base = TrainConfig().to_dict()
    if args.config is not None and args.preset is not None:
        base.update(PRESETS[args.preset])
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[name] = value
    return TrainConfig.from_dict(base)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


def run_name(cfg: TrainConfig) -> str:
    eps = "inf" if cfg.clip_eps is None else f"{cfg.clip_eps:g}"
    return f"{cfg.env}_{cfg.loss}_eps{eps}_seed{cfg.seed}"


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def write_manifest(run_dir: Path, cfg: TrainConfig, **fields) -> dict:
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {
        "config": cfg.to_dict(),
        "format_versions": {
            "config": CONFIG_FORMAT_VERSION,
            "checkpoint": CHECKPOINT_FORMAT_VERSION,
            "experience_frame": FRAME_FORMAT_VERSION,
            "metrics_schema": METRICS_SCHEMA_VERSION,
        },
        "metrics_columns": list(METRICS_COLUMNS),
        "build": build_id(),
        "started": _now(),
        "finished": None,
    }
    manifest.update(fields)
    run_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def run_training(cfg: TrainConfig, run_dir: Path):
    """Train into ``run_dir``; returns the :class:`TrainResult`."""
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, cfg)
    if cfg.mode == "serial":
        result = serial_train(cfg, run_dir)
    else:
        from .async_training import async_train

        result = async_train(cfg, run_dir)
    write_manifest(run_dir, cfg, finished=_now())
    return result


def summarize(metrics: list[dict]) -> dict:
    total = sum(int(m["total_samples"]) for m in metrics)
    unclipped = sum(int(m["unclipped_samples"]) for m in metrics)
    final = float(metrics[-1]["mean_ep_return"]) if metrics else float("nan")
    return {"final_mean_return": final, "unclipped_fraction": unclipped / total if total else float("nan")}


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = args.out_dir if args.out_dir is not None else default_out_root() / run_name(cfg)
    log.debug("resolved config: %s", cfg.to_dict())
    try:
        result = run_training(cfg, run_dir)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    s = summarize(result.metrics)
    print(f"run dir: {run_dir}")
    print(f"updates: {len(result.metrics)}  final mean return: {s['final_mean_return']:.4f}  "
          f"unclipped fraction: {s['unclipped_fraction']:.4f}")
    return 0


def _sweep_job(cfg_dict: dict, run_dir: str) -> dict:
    cfg = TrainConfig.from_dict(cfg_dict)
    result = run_training(cfg, Path(run_dir))
    return summarize(result.metrics)


def _csv_list(text: str, conv=str) -> list:
    return [conv(x.strip()) for x in text.split(",") if x.strip()]


def cmd_sweep(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    losses = _csv_list(args.losses)
    bad = [x for x in losses if x not in LOSS_NAMES]
    if bad:
        print(f"unknown loss(es) {bad}; choose from {', '.join(LOSS_NAMES)}", file=sys.stderr)
        return 2
    eps_values: list = _csv_list(args.eps_list, _eps_arg)
    if args.include_noclip and math.inf not in eps_values:
        eps_values.append(math.inf)
    seeds = _csv_list(args.seeds, int)
    root = args.out_dir if args.out_dir is not None else default_out_root() / "sweep"
    root.mkdir(parents=True, exist_ok=True)

    jobs = []
    for loss in losses:
        for eps in eps_values:
            for seed in seeds:
                cfg = base.replace(loss=loss, clip_eps=eps, seed=seed)
                jobs.append((cfg, root / run_name(cfg)))

    results: dict[Path, dict] = {}
    if args.jobs <= 1:
        for cfg, run_dir in jobs:
            try:
                results[run_dir] = {"status": "ok", **_sweep_job(cfg.to_dict(), str(run_dir))}
            except Exception as exc:  # recorded; the sweep goes on
                results[run_dir] = {"status": f"failed: {exc}"}
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(_sweep_job, cfg.to_dict(), str(d)): d for cfg, d in jobs}
            for fut in concurrent.futures.as_completed(futures):
                d = futures[fut]
                try:
                    results[d] = {"status": "ok", **fut.result()}
                except Exception as exc:
                    results[d] = {"status": f"failed: {exc}"}

    lines = ["run,loss,eps,seed,final_mean_return,unclipped_fraction,status"]
    for cfg, run_dir in jobs:
        r = results[run_dir]
        eps = "inf" if cfg.clip_eps is None else repr(cfg.clip_eps)
        lines.append(",".join([
            run_dir.name, cfg.loss, eps, str(cfg.seed),
            repr(r.get("final_mean_return", math.nan)), repr(r.get("unclipped_fraction", math.nan)), r["status"],
        ]))
    (root / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    failed = sum(1 for r in results.values() if r["status"] != "ok")
    return 1 if failed else 0


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.checkpoint.is_file():
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 2
    try:
        res = evaluate(args.checkpoint, args.env, args.episodes, args.seed)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot evaluate {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    print(f"episodes: {len(res.returns)}")
    print(f"mean return: {res.mean:.4f}  95% CI: [{res.ci_low:.4f}, {res.ci_high:.4f}]")
    print(f"std: {float(np.std(res.returns, ddof=1)) if len(res.returns) > 1 else 0.0:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        return cmd_eval(args)
    except ValueError as exc:
        parser.error(str(exc))
    return 2  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
