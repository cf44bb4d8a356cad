"""Policy-gradient training loop and parameter persistence.

Per query, K systems are sampled, executed, and scored with
reward = utility - lambda * cost. Each episode applies one SGD step on
(reward - baseline) * grad(log pi), where the baseline is an exponential
moving average of rewards.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import nn
from .controller import (
    ControllerParams,
    RouterConfig,
    RoutingDecision,
    decision_log_prob_grad,
    init_params,
    route,
)
from .embedding import Encoder
from .executor import (
    BackendFailure,
    EvalKind,
    LlmBackend,
    PostProcessHook,
    build_topology,
    evaluate,
    execute,
)
from .profiles import ProfilePool, QueryRecord, pool_fingerprint

CHECKPOINT_VERSION = 1


class VersionMismatch(RuntimeError):
    pass


class FingerprintMismatch(RuntimeError):
    pass


class CorruptCheckpoint(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    lam: float = 15.0
    k_iters: int = 5
    seed: int = 0
    max_queries: int | None = None
    baseline_decay: float = 0.9
    entropy_coeff: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.k_iters < 1:
            raise ValueError("k_iters must be >= 1")
        if not (0.0 <= self.baseline_decay < 1.0):
            raise ValueError("baseline_decay must be in [0, 1)")


@dataclass
class EpisodeRecord:
    query_id: str
    mode: str
    k: int
    roles: list[str]
    llms: list[str]
    utility: float
    cost: float
    reward: float
    baseline: float
    log_prob: float
    grad_norm: float
    failed: bool = False

    def to_json_obj(self) -> dict:
        return asdict(self)


def reward(utility: float, cost: float, lam: float) -> float:
    """reward = utility - lambda * dollar cost."""
    return utility - lam * cost


def episode_rng(seed: int, query_index: int, iteration: int) -> np.random.Generator:
    """Reproducible, order-independent stream for one (query, iteration)."""
    return np.random.default_rng(np.random.SeedSequence([seed, query_index, iteration]))


def _grad_norm(contrib: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in contrib.values()))


def train(
    dataset: list[QueryRecord],
    pool: ProfilePool,
    backends: Mapping[str, LlmBackend],
    params: ControllerParams,
    train_cfg: TrainConfig,
    router_cfg: RouterConfig,
    *,
    encoder: Encoder,
    eval_kind: EvalKind = EvalKind.EXACT_MATCH,
    hooks: Mapping[str, PostProcessHook] | None = None,
    max_inflight: int = 1,
    baseline: float = 0.0,
) -> tuple[ControllerParams, list[EpisodeRecord]]:
    """Run the routing/execution/update loop over the dataset.

    A failed backend episode contributes zero utility at its incurred cost
    and training continues. Returns the updated params and the episode log.
    """
    episodes: list[EpisodeRecord] = []
    b = baseline
    records = dataset if train_cfg.max_queries is None else dataset[: train_cfg.max_queries]
    for qi, record in enumerate(records):
        for t in range(train_cfg.k_iters):
            rng = episode_rng(train_cfg.seed, qi, t)
            decision = route(record, pool, params, router_cfg, rng, encoder)
            plan = build_topology(decision)
            failed = False
            try:
                transcript, ledger = execute(
                    plan, decision, record, backends, pool, hooks=hooks, max_inflight=max_inflight
                )
                utility = evaluate(transcript.final_answer, record, eval_kind)
                cost = ledger.total
            except BackendFailure as exc:
                failed = True
                utility = 0.0
                cost = exc.ledger.total
            r = reward(utility, cost, train_cfg.lam)
            advantage = r - b
            contrib = decision_log_prob_grad(
                decision,
                record,
                pool,
                params,
                router_cfg,
                encoder,
                weight=-advantage,
                entropy_weight=-train_cfg.entropy_coeff,
            )
            nn.sgd_step(params.store, train_cfg.alpha)
            episodes.append(
                EpisodeRecord(
                    query_id=record.id,
                    mode=decision.mode.name,
                    k=decision.k,
                    roles=[p.name for p in decision.roles],
                    llms=[p.name for p in decision.llms],
                    utility=utility,
                    cost=cost,
                    reward=r,
                    baseline=b,
                    log_prob=decision.log_prob_parts.total,
                    grad_norm=_grad_norm(contrib),
                    failed=failed,
                )
            )
            b = train_cfg.baseline_decay * b + (1.0 - train_cfg.baseline_decay) * r
    return params, episodes


def write_episode_log(episodes: list[EpisodeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_json_obj(), sort_keys=True) + "\n")


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(
    params: ControllerParams,
    meta: dict,
    path,
) -> None:
    """Persist all parameters plus metadata as JSON. Floats are written with
    full round-trippable precision. ``meta`` must include ``router`` (the
    RouterConfig fields) and ``pool_fingerprint``; ``baseline`` and
    ``rng_state`` are carried through when present."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "dim": meta["router"]["dim"],
        "pool_fingerprint": meta["pool_fingerprint"],
        "router": meta["router"],
        "baseline": meta.get("baseline", 0.0),
        "rng_state": meta.get("rng_state", {}),
        "params": {
            name: {"shape": list(pt.values.shape), "values": pt.values.ravel().tolist()}
            for name, pt in params.store.params.items()
        },
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_checkpoint(path, *, pool: ProfilePool | None = None) -> tuple[ControllerParams, dict]:
    """Load params and metadata. When ``pool`` is given, its fingerprint must
    match the one stored at save time; omit it to deliberately carry a
    trained controller onto an extended pool (inductive reuse)."""
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    for key in ("version", "dim", "pool_fingerprint", "router", "params"):
        if key not in payload:
            raise CorruptCheckpoint(f"{path}: missing key {key!r}")
    if payload["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {payload['version']}, expected {CHECKPOINT_VERSION}")
    if pool is not None and pool_fingerprint(pool) != payload["pool_fingerprint"]:
        raise FingerprintMismatch("checkpoint was trained against a different pool")
    router = payload["router"]
    cfg = RouterConfig(
        gamma=int(router["gamma"]),
        tau=float(router["tau"]),
        dim=int(router["dim"]),
        seed=int(router["seed"]),
        hidden_dim=router.get("hidden_dim"),
    )
    params = init_params(cfg)
    for name, pt in params.store.params.items():
        entry = payload["params"].get(name)
        if entry is None:
            raise CorruptCheckpoint(f"missing parameter {name!r}")
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != pt.values.size:
            raise CorruptCheckpoint(f"parameter {name!r} has wrong size")
        pt.values[...] = values.reshape(pt.values.shape)
    meta = {
        "router": router,
        "pool_fingerprint": payload["pool_fingerprint"],
        "baseline": payload.get("baseline", 0.0),
        "rng_state": payload.get("rng_state", {}),
        "dim": payload["dim"],
    }
    return params, meta
