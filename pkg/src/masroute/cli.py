"""Operator surface: train a router, inspect routing decisions, evaluate a
checkpoint against a dataset, and run the synthetic study with its
enumeration oracle.

All hyperparameters surface as flags with the standard defaults
(alpha 0.01, tau 1, gamma 6, lambda 15, K 5). Output is JSON unless
--pretty is given.

Exit codes: 2 config error, 3 backend bootstrap failure, 4 checkpoint/pool
fingerprint mismatch, 5 synthetic spec too large to enumerate.
"""
from __future__ import annotations

import argparse
import json
import sys
from collections import Counter

import numpy as np

from . import simenv, trainer
from .controller import RouterConfig, init_params, route
from .embedding import EncoderConfig, EncoderKind, make_encoder
from .executor import EvalKind, OpenAiCompatBackend, ScriptedMockBackend, build_topology, evaluate, execute
from .profiles import ProfileError, QueryRecord, load_dataset, load_profile_pool, pool_fingerprint
from .trainer import FingerprintMismatch, TrainConfig, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_FINGERPRINT = 4
EXIT_SPEC_TOO_LARGE = 5


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--llm-profiles", help="path to the LLM profile file")
    parser.add_argument("--role-profiles", help="path to the role profile file")
    parser.add_argument("--mode-profiles", help="path to the collaboration-mode profile file")
    parser.add_argument("--dataset", help="path to the JSONL query dataset")
    parser.add_argument("--checkpoint", help="checkpoint path (read or write per subcommand)")
    parser.add_argument("--backend", help="mock:<script.json> or remote")
    parser.add_argument("--gamma", type=int, default=6)
    parser.add_argument("--tau", type=float, default=1.0)
    parser.add_argument("--lambda", dest="lam", type=float, default=15.0)
    parser.add_argument("--alpha", type=float, default=0.01)
    parser.add_argument("--iters-k", type=int, default=5)
    parser.add_argument("--dim", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="output path (episode log / report)")
    parser.add_argument("--max-inflight", type=int, default=4)
    parser.add_argument("--pretty", action="store_true", help="human-readable output")
    parser.add_argument(
        "--eval-kind", choices=["exact", "numeric"], default="exact", help="utility matcher"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_train = sub.add_parser("train", help="train the routing controller")
    _add_common(p_train)
    p_route = sub.add_parser("route", help="route one query without executing")
    _add_common(p_route)
    p_route.add_argument("query", help="query text")
    p_eval = sub.add_parser("eval", help="route + execute a dataset once")
    _add_common(p_eval)
    p_sim = sub.add_parser("simulate", help="synthetic study against the enumeration oracle")
    _add_common(p_sim)
    p_sim.add_argument("--spec", help="SyntheticSpec JSON path (omit for the built-in spec)")
    p_sim.add_argument("--train-queries", type=int, help="training queries (default: spec value)")
    p_sim.add_argument("--holdout", type=int, default=500, help="held-out episode count")
    p_sim.add_argument("--skip-train", action="store_true", help="report only oracle and random")
    return parser


def _require(args, names: list[str]) -> bool:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        print(f"error: missing required flags: {', '.join(missing)}", file=sys.stderr)
        return False
    return True


def _load_pool(args):
    return load_profile_pool(
        args.llm_profiles, args.role_profiles, args.mode_profiles, gamma=args.gamma
    )


def _make_backends(args, pool):
    spec = args.backend
    if spec.startswith("mock:"):
        backend = ScriptedMockBackend.from_file(spec[len("mock:") :])
    elif spec == "remote":
        backend = OpenAiCompatBackend()
    else:
        raise ValueError(f"unknown backend {spec!r}")
    return {llm.name: backend for llm in pool.llms}


def _encoder(args):
    return make_encoder(EncoderConfig(dim=args.dim, kind=EncoderKind.FEATURE_HASH))


def _eval_kind(args) -> EvalKind:
    return EvalKind.EXACT_MATCH if args.eval_kind == "exact" else EvalKind.NUMERIC_MATCH


def _router_cfg(args) -> RouterConfig:
    return RouterConfig(gamma=args.gamma, tau=args.tau, dim=args.dim, seed=args.seed)


def _emit(obj: dict, pretty: bool) -> None:
    if pretty:
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    if not _require(
        args, ["llm_profiles", "role_profiles", "mode_profiles", "dataset", "backend", "checkpoint"]
    ):
        return EXIT_CONFIG
    try:
        pool = _load_pool(args)
        dataset = load_dataset(args.dataset)
    except (ProfileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        backends = _make_backends(args, pool)
    except Exception as exc:
        print(f"error: backend bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    router_cfg = _router_cfg(args)
    train_cfg = TrainConfig(alpha=args.alpha, lam=args.lam, k_iters=args.iters_k, seed=args.seed)
    params = init_params(router_cfg)
    encoder = _encoder(args)
    params, episodes = trainer.train(
        dataset,
        pool,
        backends,
        params,
        train_cfg,
        router_cfg,
        encoder=encoder,
        eval_kind=_eval_kind(args),
        max_inflight=args.max_inflight,
    )
    meta = {
        "router": {
            "gamma": router_cfg.gamma,
            "tau": router_cfg.tau,
            "dim": router_cfg.dim,
            "seed": router_cfg.seed,
            "hidden_dim": router_cfg.hidden_dim,
        },
        "pool_fingerprint": pool_fingerprint(pool),
        "baseline": episodes[-1].baseline if episodes else 0.0,
        "rng_state": {"seed": train_cfg.seed, "episodes_done": len(episodes)},
    }
    save_checkpoint(params, meta, args.checkpoint)
    out_path = args.out or str(args.checkpoint) + ".episodes.jsonl"
    trainer.write_episode_log(episodes, out_path)
    rewards = [ep.reward for ep in episodes]
    costs = [ep.cost for ep in episodes]
    _emit(
        {
            "episodes": len(episodes),
            "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
            "mean_cost": float(np.mean(costs)) if costs else 0.0,
            "checkpoint": str(args.checkpoint),
            "episode_log": str(out_path),
        },
        args.pretty,
    )
    return EXIT_OK


def cmd_route(args) -> int:
    if not _require(args, ["llm_profiles", "role_profiles", "mode_profiles", "checkpoint"]):
        return EXIT_CONFIG
    try:
        pool = _load_pool(args)
    except (ProfileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, meta = load_checkpoint(args.checkpoint, pool=pool)
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (trainer.CorruptCheckpoint, trainer.VersionMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    router = meta["router"]
    cfg = RouterConfig(
        gamma=args.gamma if args.gamma != 6 else int(router["gamma"]),
        tau=float(router["tau"]),
        dim=int(router["dim"]),
        seed=int(router["seed"]),
        hidden_dim=router.get("hidden_dim"),
    )
    encoder = make_encoder(EncoderConfig(dim=cfg.dim, kind=EncoderKind.FEATURE_HASH))
    record = QueryRecord(id="adhoc", query=args.query)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
    decision = route(record, pool, params, cfg, rng, encoder)
    _emit(decision.to_json_obj(), args.pretty)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not _require(
        args, ["llm_profiles", "role_profiles", "mode_profiles", "dataset", "backend", "checkpoint"]
    ):
        return EXIT_CONFIG
    try:
        pool = _load_pool(args)
        dataset = load_dataset(args.dataset)
    except (ProfileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, meta = load_checkpoint(args.checkpoint, pool=pool)
    except FingerprintMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (trainer.CorruptCheckpoint, trainer.VersionMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        backends = _make_backends(args, pool)
    except Exception as exc:
        print(f"error: backend bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    router = meta["router"]
    cfg = RouterConfig(
        gamma=int(router["gamma"]),
        tau=float(router["tau"]),
        dim=int(router["dim"]),
        seed=int(router["seed"]),
        hidden_dim=router.get("hidden_dim"),
    )
    encoder = make_encoder(EncoderConfig(dim=cfg.dim, kind=EncoderKind.FEATURE_HASH))
    kind = _eval_kind(args)
    correct = 0
    total_cost = 0.0
    ks = []
    mode_hist: Counter = Counter()
    llm_hist: Counter = Counter()
    failures = 0
    for i, record in enumerate(dataset):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, i]))
        decision = route(record, pool, params, cfg, rng, encoder)
        ks.append(decision.k)
        mode_hist[decision.mode.name] += 1
        for llm in decision.llms:
            llm_hist[llm.name] += 1
        plan = build_topology(decision)
        try:
            transcript, ledger = execute(
                plan, decision, record, backends, pool, max_inflight=args.max_inflight
            )
            total_cost += ledger.total
            if record.answer is not None and evaluate(transcript.final_answer, record, kind) == 1.0:
                correct += 1
        except Exception:
            failures += 1
    total_slots = sum(llm_hist.values()) or 1
    report = {
        "records": len(dataset),
        "accuracy": correct / len(dataset) if dataset else 0.0,
        "total_cost_usd": total_cost,
        "mean_k": float(np.mean(ks)) if ks else 0.0,
        "mode_histogram": dict(mode_hist),
        "llm_distribution": {name: n / total_slots for name, n in llm_hist.items()},
        "failures": failures,
    }
    _emit(report, args.pretty)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        spec = (
            simenv.SyntheticSpec.from_json_file(args.spec)
            if args.spec
            else simenv.default_spec()
        )
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: bad spec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        per_cluster = {
            c: simenv.oracle_best(spec, c, args.lam, args.gamma) for c in range(spec.n_clusters)
        }
    except simenv.SpecTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC_TOO_LARGE
    oracle_mean = float(np.mean([r.best_expected_reward for r in per_cluster.values()]))
    holdout, backends = simenv.make_env(spec, args.holdout, split="holdout")

    rng_random = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    random_stats = simenv.rollout(
        holdout,
        spec.pool,
        backends,
        lambda record, i: simenv.random_decision(spec.pool, args.gamma, rng_random),
        args.lam,
    )
    report = {
        "oracle": {
            str(c): {
                "best_expected_reward": r.best_expected_reward,
                "best_system": r.best_system,
                "enumeration_size": r.enumeration_size,
            }
            for c, r in per_cluster.items()
        },
        "oracle_mean_reward": oracle_mean,
        "random_mean_reward": random_stats.mean_reward,
    }
    if not args.skip_train:
        n_train = args.train_queries or spec.n_queries
        dataset, _ = simenv.make_env(spec, n_train, split="train")
        router_cfg = RouterConfig(gamma=args.gamma, tau=args.tau, dim=args.dim, seed=args.seed)
        train_cfg = TrainConfig(
            alpha=args.alpha, lam=args.lam, k_iters=args.iters_k, seed=args.seed
        )
        encoder = _encoder(args)
        params = init_params(router_cfg)
        params, episodes = trainer.train(
            dataset, spec.pool, backends, params, train_cfg, router_cfg, encoder=encoder
        )
        trained_stats = simenv.rollout(
            holdout,
            spec.pool,
            backends,
            lambda record, i: route(
                record,
                spec.pool,
                params,
                router_cfg,
                np.random.default_rng(np.random.SeedSequence([args.seed, 2, i])),
                encoder,
            ),
            args.lam,
        )
        report["trained_mean_reward"] = trained_stats.mean_reward
        report["trained_vs_oracle"] = (
            trained_stats.mean_reward / oracle_mean if oracle_mean else None
        )
        report["trained_vs_random"] = (
            trained_stats.mean_reward / random_stats.mean_reward
            if random_stats.mean_reward
            else None
        )
        report["training_episodes"] = len(episodes)
        if args.checkpoint:
            meta = {
                "router": {
                    "gamma": router_cfg.gamma,
                    "tau": router_cfg.tau,
                    "dim": router_cfg.dim,
                    "seed": router_cfg.seed,
                    "hidden_dim": router_cfg.hidden_dim,
                },
                "pool_fingerprint": pool_fingerprint(spec.pool),
                "baseline": episodes[-1].baseline if episodes else 0.0,
                "rng_state": {"seed": train_cfg.seed, "episodes_done": len(episodes)},
            }
            save_checkpoint(params, meta, args.checkpoint)
    if args.pretty:
        _print_simulate_table(report)
    else:
        _emit(report, pretty=False)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True)
    return EXIT_OK


def _print_simulate_table(report: dict) -> None:
    print(f"{'policy':<12} {'mean reward':>12}")
    print(f"{'oracle':<12} {report['oracle_mean_reward']:>12.4f}")
    if "trained_mean_reward" in report:
        print(f"{'trained':<12} {report['trained_mean_reward']:>12.4f}")
    print(f"{'random':<12} {report['random_mean_reward']:>12.4f}")
    for c, entry in sorted(report["oracle"].items()):
        best = entry["best_system"]
        print(
            f"cluster {c}: best={entry['best_expected_reward']:.4f} "
            f"mode={best['mode']} k={best['k']} llms={best['llm_counts']}"
        )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "route": cmd_route,
        "eval": cmd_eval,
        "simulate": cmd_simulate,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
