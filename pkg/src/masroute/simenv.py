"""Synthetic routing environment with exactly known ground truth.

Queries come from a small number of clusters (distinct fixed phrases, so the
hash encoder separates them). Each agent turn succeeds independently with a
tabulated probability per (cluster, mode, llm); an agent whose role matches
the cluster's preferred set gets an independent extra success chance, so the
role effect composes multiplicatively on the failure side and the expected
utility of any system is a closed-form function of its (mode, k, role
multiset, llm counts). A brute-force enumerator maximizes the exact expected
reward over every system the controller can produce, giving a desk-scale
optimum to measure training against.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .controller import LatentState, LogProbParts, RoutingDecision
from .executor import EvalKind, build_topology, evaluate, execute, parse_framing, rounds_for_kind
from .profiles import (
    CollabModeProfile,
    LlmProfile,
    ProfilePool,
    QueryRecord,
    RoleProfile,
    TopologyKind,
    price_of,
)

ENUMERATION_LIMIT = 1_000_000


class SpecTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int
    pool: ProfilePool
    cluster_phrases: tuple[str, ...]
    utility_table: dict  # (cluster, mode name, llm name) -> base success prob
    role_affinity: dict  # cluster -> frozenset of preferred role names
    role_bonus: float
    token_table: dict  # (llm name, mode name) -> (prompt_tokens, completion_tokens)
    seed: int
    n_queries: int = 200

    def __post_init__(self):
        if self.n_clusters != len(self.cluster_phrases):
            raise ValueError("one phrase per cluster required")
        if not (0.0 <= self.role_bonus <= 1.0):
            raise ValueError("role_bonus must be in [0, 1]")
        for c in range(self.n_clusters):
            for mode in self.pool.modes:
                for llm in self.pool.llms:
                    p = self.utility_table.get((c, mode.name, llm.name))
                    if p is None or not (0.0 <= p <= 1.0):
                        raise ValueError(
                            f"utility_table missing/bad entry ({c}, {mode.name}, {llm.name})"
                        )
        for llm in self.pool.llms:
            for mode in self.pool.modes:
                pt, ct = self.token_table[(llm.name, mode.name)]
                if pt < 0 or ct < 0:
                    raise ValueError("token counts must be >= 0")

    def to_json_obj(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "seed": self.seed,
            "n_queries": self.n_queries,
            "role_bonus": self.role_bonus,
            "cluster_phrases": list(self.cluster_phrases),
            "llms": [
                {
                    "name": p.name,
                    "description": p.description,
                    "price_in": p.price_in,
                    "price_out": p.price_out,
                }
                for p in self.pool.llms
            ],
            "roles": [{"name": p.name, "description": p.description} for p in self.pool.roles],
            "modes": [
                {
                    "name": p.name,
                    "description": p.description,
                    "kind": p.topology_kind.value,
                    "min_agents": p.min_agents,
                    "max_agents": p.max_agents,
                }
                for p in self.pool.modes
            ],
            "utility": {
                str(c): {
                    mode.name: {
                        llm.name: self.utility_table[(c, mode.name, llm.name)]
                        for llm in self.pool.llms
                    }
                    for mode in self.pool.modes
                }
                for c in range(self.n_clusters)
            },
            "role_affinity": {
                str(c): sorted(self.role_affinity.get(c, ())) for c in range(self.n_clusters)
            },
            "tokens": {
                llm.name: {
                    mode.name: list(self.token_table[(llm.name, mode.name)])
                    for mode in self.pool.modes
                }
                for llm in self.pool.llms
            },
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SyntheticSpec":
        pool = ProfilePool(
            llms=tuple(
                LlmProfile(
                    name=e["name"],
                    description=e.get("description", ""),
                    price_in=float(e["price_in"]),
                    price_out=float(e["price_out"]),
                )
                for e in obj["llms"]
            ),
            roles=tuple(
                RoleProfile(name=e["name"], description=e.get("description", ""))
                for e in obj["roles"]
            ),
            modes=tuple(
                CollabModeProfile(
                    name=e["name"],
                    description=e.get("description", ""),
                    min_agents=int(e["min_agents"]),
                    max_agents=int(e["max_agents"]),
                    topology_kind=TopologyKind(e["kind"]),
                )
                for e in obj["modes"]
            ),
        )
        utility = {
            (int(c), mode_name, llm_name): float(p)
            for c, per_mode in obj["utility"].items()
            for mode_name, per_llm in per_mode.items()
            for llm_name, p in per_llm.items()
        }
        tokens = {
            (llm_name, mode_name): (int(pair[0]), int(pair[1]))
            for llm_name, per_mode in obj["tokens"].items()
            for mode_name, pair in per_mode.items()
        }
        affinity = {int(c): frozenset(names) for c, names in obj["role_affinity"].items()}
        return cls(
            n_clusters=int(obj["n_clusters"]),
            pool=pool,
            cluster_phrases=tuple(obj["cluster_phrases"]),
            utility_table=utility,
            role_affinity=affinity,
            role_bonus=float(obj["role_bonus"]),
            token_table=tokens,
            seed=int(obj["seed"]),
            n_queries=int(obj.get("n_queries", 200)),
        )

    @classmethod
    def from_json_file(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as f:
            return cls.from_json_obj(json.load(f))


@dataclass(frozen=True)
class OracleResult:
    best_expected_reward: float
    best_system: dict
    enumeration_size: int


def _hash01(*parts) -> float:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    h = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(h, "big") / 2.0**64


def answer_for(query_text: str) -> str:
    digest = hashlib.blake2b(query_text.encode("utf-8"), digest_size=6).hexdigest()
    return f"ANS-{digest}"


class SimBackend:
    """Scripted backend reproducing tabulated per-turn success draws.

    Round 0 turns succeed by their own (base or role-bonus) draw or by seeing
    a correct visible message; later rounds purely aggregate visible results.
    Responses and token counts are deterministic given (model, messages).
    """

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec

    def _cluster_of(self, query_text: str) -> int:
        for ci, phrase in enumerate(self.spec.cluster_phrases):
            if phrase in query_text:
                return ci
        raise ValueError(f"query does not carry a cluster phrase: {query_text[:80]!r}")

    def complete(self, model: str, messages: list[dict], temperature: float):
        user_msgs = [m["content"] for m in messages if m.get("role") == "user"]
        info = parse_framing(user_msgs[-1]) if user_msgs else None
        if info is None:
            raise ValueError("missing turn framing header")
        query_text = info["query"]
        cluster = self._cluster_of(query_text)
        answer = answer_for(query_text)
        spec = self.spec

        success = any(answer in m for m in user_msgs[:-1])
        if not success and info["round"] == 0:
            base = spec.utility_table[(cluster, info["mode"], model)]
            if _hash01(spec.seed, "base", query_text, model, info["agent"], info["round"]) < base:
                success = True
            elif info["role"] in spec.role_affinity.get(cluster, ()):
                draw = _hash01(spec.seed, "bonus", query_text, info["agent"], info["round"])
                success = draw < spec.role_bonus
        text = answer if success else f"WRONG-{info['agent']}-{info['round']}"
        pt, ct = spec.token_table[(model, info["mode"])]
        return text, pt, ct


def make_env(
    spec: SyntheticSpec, n_queries: int | None = None, *, split: str = "train"
) -> tuple[list[QueryRecord], dict[str, SimBackend]]:
    """Generate cluster-tagged queries with oracle answers and the scripted
    backend table keyed by model name."""
    count = spec.n_queries if n_queries is None else n_queries
    records = []
    for i in range(count):
        cluster = i % spec.n_clusters
        text = f"{spec.cluster_phrases[cluster]} case {split}-{i}"
        records.append(
            QueryRecord(
                id=f"{split}-{i}",
                query=text,
                answer=answer_for(text),
                domain=f"cluster{cluster}",
            )
        )
    backend = SimBackend(spec)
    return records, {llm.name: backend for llm in spec.pool.llms}


# -- closed-form expectations and the enumeration oracle -----------------------


def expected_utility(
    spec: SyntheticSpec, cluster: int, mode: CollabModeProfile, role_names, llm_names
) -> float:
    """P(final answer correct) = 1 - prod(1 - base_i) * prod(1 - bonus_i)."""
    fail = 1.0
    for name in llm_names:
        fail *= 1.0 - spec.utility_table[(cluster, mode.name, name)]
    preferred = spec.role_affinity.get(cluster, frozenset())
    for role in role_names:
        if role in preferred:
            fail *= 1.0 - spec.role_bonus
    return 1.0 - fail


def expected_cost(spec: SyntheticSpec, mode: CollabModeProfile, llm_names) -> float:
    rounds = rounds_for_kind(mode.topology_kind)
    total = 0.0
    for name in llm_names:
        llm = spec.pool.llms[spec.pool.llm_index(name)]
        pt, ct = spec.token_table[(name, mode.name)]
        total += rounds * price_of(llm, pt, ct)
    return total


def expected_reward(
    spec: SyntheticSpec, cluster: int, mode: CollabModeProfile, role_names, llm_names, lam: float
) -> float:
    return expected_utility(spec, cluster, mode, role_names, llm_names) - lam * expected_cost(
        spec, mode, llm_names
    )


def enumeration_size(pool: ProfilePool, gamma: int) -> int:
    n_r, n_m = len(pool.roles), len(pool.llms)
    total = 0
    for mode in pool.modes:
        lo = min(mode.min_agents, gamma)
        hi = min(mode.max_agents, gamma)
        for k in range(lo, hi + 1):
            total += math.comb(n_r + k - 1, k) * math.comb(n_m + k - 1, k)
    return total


def enumerate_systems(pool: ProfilePool, gamma: int):
    """Yield every (mode, k, role-name multiset, llm-name multiset) the
    controller can produce, each exactly once."""
    role_names = [r.name for r in pool.roles]
    llm_names = [m.name for m in pool.llms]
    for mode in pool.modes:
        lo = min(mode.min_agents, gamma)
        hi = min(mode.max_agents, gamma)
        for k in range(lo, hi + 1):
            for roles in itertools.combinations_with_replacement(role_names, k):
                for llms in itertools.combinations_with_replacement(llm_names, k):
                    yield mode, k, roles, llms


def oracle_best(spec: SyntheticSpec, cluster: int, lam: float, gamma: int) -> OracleResult:
    """Exhaustive argmax of the exact expected reward over the search space."""
    size = enumeration_size(spec.pool, gamma)
    if size > ENUMERATION_LIMIT:
        raise SpecTooLarge(f"{size} systems exceed the {ENUMERATION_LIMIT} enumeration limit")
    best_reward = -math.inf
    best_key = None
    best_system = None
    count = 0
    for mode, k, roles, llms in enumerate_systems(spec.pool, gamma):
        count += 1
        r = expected_reward(spec, cluster, mode, roles, llms, lam)
        key = (spec.pool.mode_index(mode.name), k, roles, llms)
        if r > best_reward or (r == best_reward and key < best_key):
            best_reward = r
            best_key = key
            best_system = {
                "mode": mode.name,
                "k": k,
                "roles": list(roles),
                "llm_counts": dict(Counter(llms)),
            }
    return OracleResult(
        best_expected_reward=best_reward, best_system=best_system, enumeration_size=count
    )


# -- baselines and rollouts -----------------------------------------------------


def random_decision(
    pool: ProfilePool, gamma: int, rng: np.random.Generator
) -> RoutingDecision:
    """Uniform-random system: mode, k within bounds, roles, and llms all
    uniform. Log-prob parts and latent are placeholders."""
    mode_index = int(rng.integers(len(pool.modes)))
    mode = pool.modes[mode_index]
    lo = min(mode.min_agents, gamma)
    hi = min(mode.max_agents, gamma)
    k = int(rng.integers(lo, hi + 1))
    role_indices = tuple(int(rng.integers(len(pool.roles))) for _ in range(k))
    llm_indices = tuple(int(rng.integers(len(pool.llms))) for _ in range(k))
    zeros = np.zeros(1)
    return RoutingDecision(
        mode=mode,
        k=k,
        roles=tuple(pool.roles[i] for i in role_indices),
        llms=tuple(pool.llms[i] for i in llm_indices),
        counts=tuple(int(n) for n in np.bincount(llm_indices, minlength=len(pool.llms))),
        log_prob_parts=LogProbParts(mode=0.0, roles=(0.0,) * k, llm_coeff=0.0, llm_terms=0.0),
        latent=LatentState(H=zeros, mu=zeros, sigma=zeros, eps=zeros, H_mode=zeros),
        seed_trace="uniform-random",
        k_star=float(k),
        mode_index=mode_index,
        role_indices=role_indices,
        llm_indices=llm_indices,
    )


@dataclass
class RolloutStats:
    mean_reward: float
    mean_utility: float
    mean_cost: float
    mean_k: float
    episodes: int
    mode_hist: dict = field(default_factory=dict)
    llm_share: dict = field(default_factory=dict)


def rollout(
    records: list[QueryRecord],
    pool: ProfilePool,
    backends,
    decision_fn,
    lam: float,
    *,
    eval_kind: EvalKind = EvalKind.EXACT_MATCH,
) -> RolloutStats:
    """Execute one episode per record with decisions from decision_fn(record,
    index); failures count as zero utility at incurred cost."""
    rewards, utilities, costs, ks = [], [], [], []
    mode_hist: Counter = Counter()
    llm_hist: Counter = Counter()
    for i, record in enumerate(records):
        decision = decision_fn(record, i)
        plan = build_topology(decision)
        try:
            transcript, ledger = execute(plan, decision, record, backends, pool)
            utility = evaluate(transcript.final_answer, record, eval_kind)
            cost = ledger.total
        except Exception:
            utility, cost = 0.0, 0.0
        rewards.append(utility - lam * cost)
        utilities.append(utility)
        costs.append(cost)
        ks.append(decision.k)
        mode_hist[decision.mode.name] += 1
        for llm in decision.llms:
            llm_hist[llm.name] += 1
    total_slots = sum(llm_hist.values()) or 1
    return RolloutStats(
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
        mean_utility=float(np.mean(utilities)) if utilities else 0.0,
        mean_cost=float(np.mean(costs)) if costs else 0.0,
        mean_k=float(np.mean(ks)) if ks else 0.0,
        episodes=len(records),
        mode_hist=dict(mode_hist),
        llm_share={name: n / total_slots for name, n in llm_hist.items()},
    )


# -- the default desk-scale study spec ------------------------------------------


def default_spec(seed: int = 7) -> SyntheticSpec:
    """4 LLMs x 6 roles x 4 modes x 2 clusters; tuned so that mode, roles,
    and llm choice all move the optimum."""
    llms = (
        LlmProfile("nano", "tiny generalist model, very cheap, shallow reasoning", 0.2, 0.8),
        LlmProfile("swift", "fast mid-size model, strong at arithmetic word problems", 0.6, 2.4),
        LlmProfile("sage", "mid-size model tuned for code synthesis and repair", 0.8, 3.2),
        LlmProfile("titan", "frontier-scale model, broadly strong, expensive", 2.5, 10.0),
    )
    roles = (
        RoleProfile("solver", "Work the problem step by step and state the result."),
        RoleProfile("checker", "Re-derive the result independently and flag mismatches."),
        RoleProfile("coder", "Write a complete implementation for the task."),
        RoleProfile("tester", "Probe the proposed solution with edge cases."),
        RoleProfile("planner", "Break the task into ordered subgoals."),
        RoleProfile("scribe", "Summarize the discussion into a final answer."),
    )
    modes = (
        CollabModeProfile(
            "CoT", "a single agent reasons step by step", 1, 1, TopologyKind.COT
        ),
        CollabModeProfile(
            "Chain", "agents reason sequentially, passing partial work forward", 2, 6,
            TopologyKind.CHAIN,
        ),
        CollabModeProfile(
            "Debate", "agents argue over two rounds and vote", 2, 6, TopologyKind.DEBATE
        ),
        CollabModeProfile(
            "Reflection", "later agents critique and revise earlier answers", 2, 6,
            TopologyKind.REFLECTION,
        ),
    )
    pool = ProfilePool(llms=llms, roles=roles, modes=modes)
    phrases = (
        "estimate the arithmetic total of the ledger numbers",
        "implement the parser routine in python code",
    )
    base = {
        # cluster 0: arithmetic word problems; swift shines, sage mediocre
        (0, "CoT"): {"nano": 0.20, "swift": 0.78, "sage": 0.42, "titan": 0.75},
        (0, "Chain"): {"nano": 0.22, "swift": 0.84, "sage": 0.45, "titan": 0.78},
        (0, "Debate"): {"nano": 0.18, "swift": 0.76, "sage": 0.40, "titan": 0.75},
        (0, "Reflection"): {"nano": 0.18, "swift": 0.74, "sage": 0.42, "titan": 0.73},
        # cluster 1: code synthesis; sage shines, swift mediocre
        (1, "CoT"): {"nano": 0.13, "swift": 0.45, "sage": 0.78, "titan": 0.75},
        (1, "Chain"): {"nano": 0.15, "swift": 0.48, "sage": 0.84, "titan": 0.78},
        (1, "Debate"): {"nano": 0.12, "swift": 0.42, "sage": 0.76, "titan": 0.75},
        (1, "Reflection"): {"nano": 0.13, "swift": 0.45, "sage": 0.80, "titan": 0.76},
    }
    utility = {
        (c, mode, llm): p
        for (c, mode), per_llm in base.items()
        for llm, p in per_llm.items()
    }
    affinity = {0: frozenset({"solver", "checker"}), 1: frozenset({"coder", "tester"})}
    tokens_per_llm = {"nano": (1800, 900), "swift": (2250, 1125), "sage": (2250, 1125), "titan": (1200, 600)}
    mode_scale = {"CoT": 1.0, "Chain": 1.0, "Debate": 1.3, "Reflection": 1.15}
    token_table = {
        (llm.name, mode.name): (
            int(tokens_per_llm[llm.name][0] * mode_scale[mode.name]),
            int(tokens_per_llm[llm.name][1] * mode_scale[mode.name]),
        )
        for llm in llms
        for mode in modes
    }
    return SyntheticSpec(
        n_clusters=2,
        pool=pool,
        cluster_phrases=phrases,
        utility_table=utility,
        role_affinity=affinity,
        role_bonus=0.12,
        token_table=token_table,
        seed=seed,
    )
