"""Command-line entry point: ``dyseqdpp {train,summarize,evaluate,verify,synth}``.

Settings come from built-in defaults, then a JSON ``--config`` file, then flags.
The effective settings are echoed into every artifact a command writes.
Exit codes: 0 success, 1 verification or runtime failure, 2 configuration or
path error, 3 model/data incompatibility, 4 missing annotation.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io, metrics, rl, verify
from . import kernel_net as kn
from . import seq_model as sm
from .errors import (DySeqError, InvalidInput, InvalidLength, MissingAnnotation, ParseError, ShapeError,
                     VersionError)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_INCOMPATIBLE, EXIT_ANNOTATION = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class Incompatible(Exception):
    pass


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


DEFAULTS = {
    "train": {"data": None, "out": None, "seed": 0, "workers": None, "learning_rate": 0.1, "num_updates": 500,
              "num_trajectories": 8, "batch_size": 1, "sampling": "stochastic", "surrogate": "trajectory",
              "phi_mode": "concat", "initial_length": sm.DEFAULT_INITIAL_LENGTH, "fixed_length": None,
              "clip_norm": 10.0, "oracle_forced": False, "lengths": list(kn.DEFAULT_LENGTHS), "d_h1": 256,
              "d_h2": 128, "d_k": 128, "reward_mode": "full", "reward_metric": "f1", "gamma": None,
              "reward_protocol": "matching", "window": 12, "checkpoint_every": 0, "timings": None},
    "summarize": {"checkpoint": None, "data": None, "video": None, "out": None, "seed": 0, "mode": "greedy",
                  "fixed_length": None, "phi_mode": "concat", "initial_length": sm.DEFAULT_INITIAL_LENGTH},
    "evaluate": {"summary": None, "data": None, "out": None, "protocol": "matching",
                 "windows": ["8", "12", "16", "inf"], "matching": "weighted", "hamming_threshold": 0,
                 "checkpoint": None, "budget_fraction": metrics.DEFAULT_BUDGET_FRACTION},
    "verify": {"level": "full", "seed": 0, "suites": None, "inject_asymmetry": False},
    "synth": {"out": None, "seed": 0, "count": 1, "num_events": 12, "event_length_min": 2, "event_length_max": 9,
              "feature_dim": 64, "within_event_spread": 0.1, "cross_event_separation": 1.0,
              "repeat_far_events": True, "num_clusters": 8, "num_users": 3},
}


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _gamma(text: str):
    return None if text.lower() in ("none", "final") else float(text)


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="JSON file of settings; keys are the long flag names with underscores")
    if seed:
        p.add_argument("--seed", type=int, help="master seed; every random stream is derived from it (default 0)")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="dyseqdpp", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy with policy gradients", argument_default=S)
    _add_common(p)
    p.add_argument("--data", help="dataset directory or manifest (required)")
    p.add_argument("--out", help="output directory for checkpoint and log (required)")
    p.add_argument("--workers", type=int, help="processes for rollouts (default: available CPUs)")
    p.add_argument("--lr", dest="learning_rate", type=float, help="step size (default 0.1)")
    p.add_argument("--updates", dest="num_updates", type=int, help="number of gradient steps (default 500)")
    p.add_argument("--trajectories", dest="num_trajectories", type=int, help="rollouts per video per update (K)")
    p.add_argument("--batch-size", type=int, help="videos per update (default 1)")
    p.add_argument("--sampling", choices=("stochastic", "greedy"), help="how training rollouts pick actions")
    p.add_argument("--surrogate", choices=("trajectory", "per_step"), help="score-function weighting")
    p.add_argument("--phi-mode", choices=sm.PHI_MODES, help="features feeding the length softmax")
    p.add_argument("--initial-length", type=int, help="length of the first segment (default 10)")
    p.add_argument("--fixed-length", type=int, help="train FixedSeqDPP with this segment length")
    p.add_argument("--clip-norm", type=float, help="gradient norm clip; 0 disables (default 10)")
    p.add_argument("--oracle-forced", action="store_true", help="pin subsets to the oracle summary")
    p.add_argument("--lengths", type=_csv_ints, help="comma-separated segment length menu")
    p.add_argument("--d-h1", type=int, help="first hidden layer width (default 256)")
    p.add_argument("--d-h2", type=int, help="second hidden layer width (default 128)")
    p.add_argument("--d-k", type=int, help="kernel embedding width (default 128)")
    p.add_argument("--reward-mode", choices=("full", "partial"), help="score the whole or the partial summary")
    p.add_argument("--reward-metric", choices=("f1", "precision", "recall"), help="reward metric (default f1)")
    p.add_argument("--gamma", type=_gamma, help="discount in (0,1), or 'none' for final-summary-only rewards")
    p.add_argument("--reward-protocol", choices=("matching", "overlap"), help="reward protocol")
    p.add_argument("--window", type=float, help="matching window K for rewards (default 12)")
    p.add_argument("--checkpoint-every", type=int, help="also save a checkpoint every N updates (0: never)")
    p.add_argument("--timings", help="write per-update wall times to this file (not reproducible)")

    p = sub.add_parser("summarize", help="roll out a trained policy on videos", argument_default=S)
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint archive (required)")
    p.add_argument("--data", help="dataset directory or manifest (required)")
    p.add_argument("--video", help="summarize only this video id")
    p.add_argument("--out", help="output JSON file (default: stdout)")
    p.add_argument("--mode", choices=("greedy", "stochastic"), help="rollout mode (default greedy)")
    p.add_argument("--fixed-length", type=int, help="run FixedSeqDPP with this segment length")
    p.add_argument("--phi-mode", choices=sm.PHI_MODES, help="features feeding the length softmax")
    p.add_argument("--initial-length", type=int, help="length of the first segment (default 10)")

    p = sub.add_parser("evaluate", help="score summaries against user annotations", argument_default=S)
    _add_common(p, seed=False)
    p.add_argument("--summary", help="output of 'summarize' (matching protocol)")
    p.add_argument("--data", help="dataset directory or manifest (required)")
    p.add_argument("--out", help="output JSON file (default: stdout)")
    p.add_argument("--protocol", choices=("matching", "knapsack"), help="evaluation protocol")
    p.add_argument("--windows", type=_csv, help="comma-separated matching windows K, 'inf' allowed")
    p.add_argument("--matching", choices=("weighted", "cardinality"), help="matching edge weights")
    p.add_argument("--hamming-threshold", type=int, help="edge threshold in cardinality mode")
    p.add_argument("--checkpoint", help="checkpoint whose kernel scores shots (knapsack protocol)")
    p.add_argument("--budget-fraction", type=float, help="knapsack budget as a fraction of video length")

    p = sub.add_parser("verify", help="run the brute-force oracle suites", argument_default=S)
    _add_common(p)
    p.add_argument("--level", choices=verify.LEVELS, help="'quick' skips the 10^5-sample tests (default full)")
    p.add_argument("--suites", type=_csv, help=f"comma-separated subset of {','.join(verify.SUITES)}")
    p.add_argument("--inject-asymmetry", action="store_true", help="test hook: perturb kernels to be asymmetric")

    p = sub.add_parser("synth", help="generate a synthetic planted-event corpus", argument_default=S)
    _add_common(p)
    p.add_argument("--out", help="output dataset directory (required)")
    p.add_argument("--count", type=int, help="number of videos (default 1)")
    p.add_argument("--num-events", type=int, help="events per video (default 12)")
    p.add_argument("--event-length-min", type=int, help="shortest event in shots (default 2)")
    p.add_argument("--event-length-max", type=int, help="longest event in shots (default 9)")
    p.add_argument("--feature-dim", type=int, help="feature dimension (default 64)")
    p.add_argument("--within-event-spread", type=float, help="noise scale inside an event (default 0.1)")
    p.add_argument("--cross-event-separation", type=float, help="distance between cluster centres (default 1)")
    p.add_argument("--no-repeat", dest="repeat_far_events", action="store_false",
                   help="never let a cluster recur")
    p.add_argument("--num-clusters", type=int, help="distinct event clusters (default 8)")
    p.add_argument("--num-users", type=int, help="user summaries per video (default 3)")
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    cfg = dict(DEFAULTS[args.command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"config file {path}: unknown keys {unknown}")
        cfg.update(doc)
    cfg.update(flags)
    if args.command == "train" and cfg["workers"] is None:
        cfg["workers"] = default_workers()
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"missing required setting --{k.replace('_', '-')}")


def _load(path) -> list[data_io.VideoRecord]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset path does not exist: {p}")
    return data_io.load_dataset(p)


def _load_checkpoint(path) -> kn.PolicyParams:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint path does not exist: {p}")
    try:
        return kn.load_checkpoint(p)
    except VersionError as exc:
        raise Incompatible(str(exc)) from None
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read checkpoint {p}: {exc}") from None


def _json_text(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _emit(obj, out) -> None:
    text = _json_text(obj)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _check_dims(params: kn.PolicyParams, videos) -> None:
    for v in videos:
        if v.feature_dim != params.feature_dim:
            raise Incompatible(f"video {v.id} has feature dim {v.feature_dim}; checkpoint expects "
                               f"{params.feature_dim}")


def _policy(cfg: dict) -> sm.Policy:
    kind = sm.PolicyKind.fixed(cfg["fixed_length"]) if cfg.get("fixed_length") else sm.PolicyKind.dynamic()
    return sm.Policy(kind, cfg["phi_mode"], cfg["initial_length"])


# where an artifact is written, how many processes wrote it and where timings go
# cannot change its content, so those settings are left out of the echo
_NOT_ECHOED = ("out", "workers", "timings")


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in _NOT_ECHOED}


def _seed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# -- subcommands -----------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    videos = _load(cfg["data"])
    if not videos:
        raise ConfigError(f"dataset {cfg['data']} is empty")
    dims = {v.feature_dim for v in videos}
    if len(dims) != 1:
        raise Incompatible(f"videos have mixed feature dims {sorted(dims)}")
    train_cfg = rl.TrainConfig(
        num_trajectories=cfg["num_trajectories"], learning_rate=cfg["learning_rate"],
        num_updates=cfg["num_updates"], master_seed=cfg["seed"], sampling=cfg["sampling"],
        phi_mode=cfg["phi_mode"], oracle_forced=cfg["oracle_forced"], surrogate=cfg["surrogate"],
        clip_norm=cfg["clip_norm"] or None, batch_size=cfg["batch_size"], fixed_length=cfg["fixed_length"],
        initial_length=cfg["initial_length"], workers=max(1, cfg["workers"]))
    reward_cfg = rl.RewardConfig(mode=cfg["reward_mode"], metric=cfg["reward_metric"], gamma=cfg["gamma"],
                                 protocol=cfg["reward_protocol"], window=cfg["window"])
    params = kn.PolicyParams.init(dims.pop(), _seed_rng(cfg["seed"], 0), d_h1=cfg["d_h1"], d_h2=cfg["d_h2"],
                                  d_k=cfg["d_k"], lengths=cfg["lengths"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    kn.save_checkpoint(params, out / "initial.npz")
    every = cfg["checkpoint_every"]

    def callback(u, p, rec):
        if every and (u + 1) % every == 0:
            kn.save_checkpoint(p, out / f"checkpoint-{u + 1:06d}.npz")

    timings = [] if cfg["timings"] else None
    params, log = rl.train(params, videos, train_cfg, reward_cfg, callback=callback, timings=timings)
    kn.save_checkpoint(params, out / "checkpoint.npz")
    lines = [json.dumps({"config": _echo(cfg)}, sort_keys=True)] + [r.to_json() for r in log]
    (out / "train_log.jsonl").write_text("\n".join(lines) + "\n")
    if timings is not None:
        Path(cfg["timings"]).write_text("".join(f"{u} {t:.6f}\n" for u, t in enumerate(timings)))
    return EXIT_OK


def cmd_summarize(cfg: dict) -> int:
    _require(cfg, "checkpoint", "data")
    params = _load_checkpoint(cfg["checkpoint"])
    videos = _load(cfg["data"])
    if cfg["video"] is not None:
        videos = [v for v in videos if v.id == cfg["video"]]
        if not videos:
            raise ConfigError(f"video {cfg['video']!r} not found in {cfg['data']}")
    _check_dims(params, videos)
    policy = _policy(cfg)
    docs = []
    for i, v in enumerate(videos):
        traj = sm.rollout(params, v.features(), cfg["mode"], _seed_rng(cfg["seed"], i), policy)
        docs.append({"video": v.id, "policy": policy.kind.name, "summary": [int(j) for j in traj.summary],
                     "segments": [list(s) for s in traj.segments],
                     "lengths": [s.action.next_len for s in traj.steps],
                     "log_prob_subset": [s.log_prob_subset for s in traj.steps],
                     "log_prob_length": [s.log_prob_length for s in traj.steps]})
    _emit({"config": _echo(cfg), "summaries": docs}, cfg["out"])
    return EXIT_OK


def _windows(cfg: dict) -> list[float]:
    try:
        ws = [math.inf if str(w).lower() in ("inf", "infinity") else float(w) for w in cfg["windows"]]
    except ValueError:
        raise ConfigError(f"bad window list {cfg['windows']}") from None
    if not ws or any(w < 0 for w in ws):
        raise ConfigError("evaluate needs a non-empty list of non-negative windows")
    return ws


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "data")
    videos = {v.id: v for v in _load(cfg["data"])}
    reports = []
    if cfg["protocol"] == "matching":
        _require(cfg, "summary")
        path = Path(cfg["summary"])
        if not path.exists():
            raise ConfigError(f"summary path does not exist: {path}")
        try:
            doc = json.loads(path.read_text())
            entries = doc["summaries"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path} is not a summary document: {exc}") from None
        windows = _windows(cfg)
        for e in entries:
            v = videos.get(e["video"])
            if v is None:
                raise ConfigError(f"video {e['video']!r} is not in {cfg['data']}")
            if v.concepts is None or not v.user_summaries:
                raise MissingAnnotation(f"video {v.id} lacks concept vectors or user summaries")
            if any(not 0 <= i < v.num_shots for i in e["summary"]):
                raise Incompatible(f"summary for {v.id} indexes past its {v.num_shots} shots")
            reports.append(metrics.matching_report(v.id, e["summary"], v.user_summaries, v.concepts, windows,
                                                   cfg["matching"], cfg["hamming_threshold"]))
        mean = [{"K": row["K"], "f1": float(np.mean([r["windows"][j]["f1"] for r in reports]))}
                for j, row in enumerate(reports[0]["windows"])] if reports else []
    else:
        _require(cfg, "checkpoint")
        params = _load_checkpoint(cfg["checkpoint"])
        _check_dims(params, videos.values())
        for v in videos.values():
            if v.scene_boundaries is None or not v.user_summaries:
                raise MissingAnnotation(f"video {v.id} lacks scene boundaries or user summaries")
            scores = metrics.shot_scores_from_kernel(params, v.features())
            shots = metrics.summarize_by_scores(scores, v.scene_boundaries, v.shot_duration_seconds,
                                                cfg["budget_fraction"])
            s = metrics.overlap_f1_users(shots, v.user_summaries)
            reports.append({"video": v.id, "protocol": "knapsack", "summary": shots, "precision": s.precision,
                            "recall": s.recall, "f1": s.f1})
        mean = float(np.mean([r["f1"] for r in reports])) if reports else 0.0
    _emit({"config": _echo(cfg), "videos": reports, "mean_f1": mean}, cfg["out"])
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    opts = verify.VerifyOptions(cfg["level"], cfg["seed"], cfg["inject_asymmetry"])
    names = cfg["suites"]
    if names is not None and set(names) - set(verify.SUITES):
        raise ConfigError(f"unknown suites {sorted(set(names) - set(verify.SUITES))}")
    results = verify.run_suites(opts, names)
    for r in results:
        print(r.line(), flush=True)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"verification failed: {failed[0].name}: {failed[0].detail}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    try:
        spec = data_io.SynthSpec(
            num_events=cfg["num_events"], event_length_range=(cfg["event_length_min"], cfg["event_length_max"]),
            feature_dim=cfg["feature_dim"], within_event_spread=cfg["within_event_spread"],
            cross_event_separation=cfg["cross_event_separation"], repeat_far_events=cfg["repeat_far_events"],
            seed=cfg["seed"], num_clusters=cfg["num_clusters"], num_users=cfg["num_users"])
        spec.validate()
    except InvalidInput as exc:
        raise ConfigError(str(exc)) from None
    if cfg["count"] < 0:
        raise ConfigError("count must be non-negative")
    data_io.save_dataset(data_io.generate_corpus(spec, cfg["count"]), cfg["out"], metadata={"config": _echo(cfg)})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "summarize": cmd_summarize, "evaluate": cmd_evaluate, "verify": cmd_verify,
            "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](effective_config(args))
    except (ConfigError, ParseError, InvalidInput, InvalidLength) as exc:
        code, err = EXIT_CONFIG, exc
    except (Incompatible, ShapeError, VersionError) as exc:
        code, err = EXIT_INCOMPATIBLE, exc
    except MissingAnnotation as exc:
        code, err = EXIT_ANNOTATION, exc
    except DySeqError as exc:
        code, err = EXIT_VERIFY, exc
    print(f"dyseqdpp {args.command}: error: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
