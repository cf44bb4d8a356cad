"""Topology materialization and execution of a routed multi-agent system.

A RoutingDecision becomes an ExecutionPlan (nodes, visibility edges, round
count, answer-extraction rule). Execution drives agent turns against pluggable
LLM backends, assembles prompts from role text, the query, and visible
messages, applies registered post-process hooks, extracts the final answer,
and accounts exact dollar cost per turn.

Visibility semantics: in multi-round plans messages travel across round
boundaries only (agents within a round act in parallel); single-round plans
deliver along forward edges as turns complete.
"""
from __future__ import annotations

import enum
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import requests

from .controller import RoutingDecision
from .profiles import LlmProfile, ProfilePool, QueryRecord, RoleProfile, TopologyKind, price_of

API_KEY_ENV = "MASROUTE_API_KEY"
BASE_URL_ENV = "MASROUTE_BASE_URL"

GRAPH_ROUNDS_DEFAULT = 2


class UnsupportedMode(ValueError):
    pass


class MissingBackend(RuntimeError):
    def __init__(self, model: str):
        super().__init__(f"no backend registered for model {model!r}")
        self.model = model


class NoOracle(ValueError):
    pass


class BackendFailure(RuntimeError):
    """A backend call failed after retries; partial results are preserved."""

    def __init__(self, node: int, cause: Exception, transcript: "Transcript", ledger: "CostLedger"):
        super().__init__(f"backend failure at node {node}: {cause}")
        self.node = node
        self.cause = cause
        self.transcript = transcript
        self.ledger = ledger


class AnswerRule(str, enum.Enum):
    LAST_NODE = "last_node"
    MAJORITY = "majority"


@dataclass(frozen=True)
class PlanNode:
    index: int
    role: RoleProfile
    llm: LlmProfile


@dataclass(frozen=True)
class ExecutionPlan:
    nodes: tuple[PlanNode, ...]
    edges: tuple[tuple[int, int], ...]
    rounds: int
    answer_rule: AnswerRule
    answer_node: int | None
    intra_round: bool
    mode_name: str


@dataclass
class Turn:
    node: int
    round: int
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    latency: float


@dataclass
class Transcript:
    turns: list[Turn] = field(default_factory=list)
    final_answer: str = ""
    warnings: list[str] = field(default_factory=list)


@dataclass
class CostLedger:
    per_turn: list[float] = field(default_factory=list)
    total: float = 0.0

    def charge(self, amount: float) -> None:
        self.per_turn.append(amount)
        self.total += amount


class LlmBackend(Protocol):
    def complete(
        self, model: str, messages: list[dict], temperature: float
    ) -> tuple[str, int, int]: ...


PostProcessHook = Callable[[str, str], str]


def passthrough_hook(text: str, query: str) -> str:
    return text


def rounds_for_kind(kind: TopologyKind, graph_rounds: int = GRAPH_ROUNDS_DEFAULT) -> int:
    if kind in (TopologyKind.DEBATE, TopologyKind.FULL_CONNECTED):
        return graph_rounds
    return 1


def build_topology(
    decision: RoutingDecision, *, graph_rounds: int = GRAPH_ROUNDS_DEFAULT
) -> ExecutionPlan:
    """Materialize the decision's collaboration mode into nodes, visibility
    edges, round count, and an answer-extraction rule."""
    k = decision.k
    kind = decision.mode.topology_kind
    nodes = tuple(
        PlanNode(index=i, role=decision.roles[i], llm=decision.llms[i]) for i in range(k)
    )
    if kind in (TopologyKind.IO, TopologyKind.COT):
        edges: tuple[tuple[int, int], ...] = ()
        rounds, rule, answer_node, intra = 1, AnswerRule.LAST_NODE, k - 1, True
    elif kind is TopologyKind.CHAIN:
        edges = tuple((i, i + 1) for i in range(k - 1))
        rounds, rule, answer_node, intra = 1, AnswerRule.LAST_NODE, k - 1, True
    elif kind is TopologyKind.REFLECTION:
        edges = tuple((j, i) for i in range(k) for j in range(i))
        rounds, rule, answer_node, intra = 1, AnswerRule.LAST_NODE, k - 1, True
    elif kind in (TopologyKind.FULL_CONNECTED, TopologyKind.DEBATE):
        edges = tuple((j, i) for i in range(k) for j in range(k) if j != i)
        rounds, rule, answer_node, intra = graph_rounds, AnswerRule.MAJORITY, None, False
    else:
        raise UnsupportedMode(str(kind))
    return ExecutionPlan(
        nodes=nodes,
        edges=edges,
        rounds=rounds,
        answer_rule=rule,
        answer_node=answer_node,
        intra_round=intra,
        mode_name=decision.mode.name,
    )


def _framing(plan: ExecutionPlan, node: PlanNode, rnd: int) -> str:
    return (
        f"[collaboration={plan.mode_name} | agent={node.index + 1}/{len(plan.nodes)}"
        f" | round={rnd + 1}/{plan.rounds} | role={node.role.name}]"
    )


def _visible(plan: ExecutionPlan, turn: Turn, node: int, rnd: int, edge_set) -> bool:
    if (turn.node, node) not in edge_set:
        return False
    if turn.round < rnd:
        return True
    return plan.intra_round and turn.round == rnd and turn.node != node


def _build_messages(
    plan: ExecutionPlan,
    node: PlanNode,
    rnd: int,
    query: str,
    done: list[Turn],
    edge_set,
) -> list[dict]:
    messages = [{"role": "system", "content": node.role.description}]
    for turn in done:
        if _visible(plan, turn, node.index, rnd, edge_set):
            src = plan.nodes[turn.node]
            header = f"[agent {turn.node + 1} | round {turn.round + 1} | {src.role.name}]"
            messages.append({"role": "user", "content": f"{header}\n{turn.response}"})
    messages.append({"role": "user", "content": f"{_framing(plan, node, rnd)}\n{query}"})
    return messages


def _call_with_retry(backend: LlmBackend, model: str, messages: list[dict]) -> tuple[str, int, int]:
    last_exc: Exception | None = None
    for _ in range(2):
        try:
            return backend.complete(model, messages, temperature=1.0)
        except Exception as exc:  # noqa: BLE001 - backend contract is opaque
            last_exc = exc
    raise last_exc


def execute(
    plan: ExecutionPlan,
    decision: RoutingDecision,
    query: QueryRecord,
    backends: Mapping[str, LlmBackend],
    pool: ProfilePool,
    *,
    hooks: Mapping[str, PostProcessHook] | None = None,
    max_inflight: int = 1,
) -> tuple[Transcript, CostLedger]:
    """Run every turn of the plan; returns the transcript and the exact cost
    ledger. On backend failure the partial transcript and incurred cost are
    preserved on the raised BackendFailure."""
    hooks = hooks or {}
    for node in plan.nodes:
        if node.llm.name not in backends:
            raise MissingBackend(node.llm.name)
    edge_set = set(plan.edges)
    transcript = Transcript()
    ledger = CostLedger()

    def run_turn(node: PlanNode, rnd: int) -> Turn:
        messages = _build_messages(plan, node, rnd, query.query, transcript.turns, edge_set)
        start = time.perf_counter()
        text, p_tok, c_tok = _call_with_retry(backends[node.llm.name], node.llm.name, messages)
        latency = time.perf_counter() - start
        return Turn(
            node=node.index,
            round=rnd,
            prompt="\n".join(m["content"] for m in messages),
            response=text,
            prompt_tokens=int(p_tok),
            completion_tokens=int(c_tok),
            latency=latency,
        )

    def record(turn: Turn, node: PlanNode) -> None:
        if node.role.post_process is not None:
            hook = hooks.get(node.role.post_process)
            if hook is None:
                transcript.warnings.append(
                    f"no hook registered for tag {node.role.post_process!r} (node {node.index})"
                )
            else:
                turn.response = hook(turn.response, query.query)
        transcript.turns.append(turn)
        ledger.charge(price_of(node.llm, turn.prompt_tokens, turn.completion_tokens))

    for rnd in range(plan.rounds):
        if plan.intra_round or max_inflight <= 1 or len(plan.nodes) == 1:
            for node in plan.nodes:
                try:
                    turn = run_turn(node, rnd)
                except Exception as exc:
                    raise BackendFailure(node.index, exc, transcript, ledger) from exc
                record(turn, node)
        else:
            # parallel round: prompts depend only on earlier rounds
            with ThreadPoolExecutor(max_workers=max_inflight) as tpe:
                futures = [(node, tpe.submit(run_turn, node, rnd)) for node in plan.nodes]
                for node, future in futures:
                    try:
                        turn = future.result()
                    except Exception as exc:
                        raise BackendFailure(node.index, exc, transcript, ledger) from exc
                    record(turn, node)

    transcript.final_answer = _extract_answer(plan, transcript)
    return transcript, ledger


def _extract_answer(plan: ExecutionPlan, transcript: Transcript) -> str:
    final_round = plan.rounds - 1
    last_turns = [t for t in transcript.turns if t.round == final_round]
    if plan.answer_rule is AnswerRule.LAST_NODE:
        for turn in last_turns:
            if turn.node == plan.answer_node:
                return turn.response
        return last_turns[-1].response if last_turns else ""
    groups: dict[str, tuple[int, int]] = {}  # normalized -> (count, first node)
    for turn in sorted(last_turns, key=lambda t: t.node):
        key = turn.response.strip()
        count, first = groups.get(key, (0, turn.node))
        groups[key] = (count + 1, first)
    if not groups:
        return ""
    best_key = min(groups, key=lambda key: (-groups[key][0], groups[key][1]))
    return best_key


class EvalKind(str, enum.Enum):
    EXACT_MATCH = "ExactMatch"
    NUMERIC_MATCH = "NumericMatch"


def evaluate(final_answer: str, record: QueryRecord, kind: EvalKind = EvalKind.EXACT_MATCH) -> float:
    """Utility in {0, 1}: normalized string equality, or numeric closeness."""
    if record.answer is None:
        raise NoOracle(f"record {record.id!r} has no oracle answer")
    if kind is EvalKind.EXACT_MATCH:
        return 1.0 if final_answer.strip().casefold() == record.answer.strip().casefold() else 0.0
    try:
        got = float(final_answer.strip())
        want = float(record.answer.strip())
    except ValueError:
        return 0.0
    return 1.0 if abs(got - want) <= 1e-6 * max(1.0, abs(want)) else 0.0


# -- backends -----------------------------------------------------------------


class ScriptMiss(RuntimeError):
    pass


@dataclass(frozen=True)
class ScriptRule:
    response: str
    prompt_tokens: int
    completion_tokens: int
    model: str | None = None
    contains: str | None = None


class ScriptedMockBackend:
    """Deterministic fake LLM: first rule matching (model, substring of the
    last user message) wins."""

    def __init__(self, rules: list[ScriptRule]):
        self.rules = list(rules)

    @classmethod
    def from_file(cls, path) -> "ScriptedMockBackend":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        rules = [
            ScriptRule(
                response=e["response"],
                prompt_tokens=int(e["prompt_tokens"]),
                completion_tokens=int(e["completion_tokens"]),
                model=e.get("model"),
                contains=e.get("contains"),
            )
            for e in raw
        ]
        return cls(rules)

    def complete(self, model: str, messages: list[dict], temperature: float):
        last_user = ""
        for msg in messages:
            if msg.get("role") == "user":
                last_user = msg.get("content", "")
        for rule in self.rules:
            if rule.model is not None and rule.model != model:
                continue
            if rule.contains is not None and rule.contains not in last_user:
                continue
            return rule.response, rule.prompt_tokens, rule.completion_tokens
        raise ScriptMiss(f"no script rule for model {model!r}")


class OpenAiCompatBackend:
    """Client for any /v1/chat/completions endpoint with usage accounting."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout_s: float = 120.0,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or "").rstrip("/")
        if not self.base_url:
            raise ValueError(f"remote backend needs base_url or {BASE_URL_ENV}")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout_s = timeout_s

    def complete(self, model: str, messages: list[dict], temperature: float):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(
            self.base_url + "/v1/chat/completions",
            json={"model": model, "messages": messages, "temperature": temperature},
            headers=headers,
            timeout=self.timeout_s,
        )
        resp.raise_for_status()
        payload = resp.json()
        text = payload["choices"][0]["message"]["content"]
        usage = payload.get("usage", {})
        return text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))


_FRAMING_RE = re.compile(
    r"^\[collaboration=(?P<mode>[^|\]]+) \| agent=(?P<agent>\d+)/(?P<k>\d+)"
    r" \| round=(?P<round>\d+)/(?P<rounds>\d+) \| role=(?P<role>[^\]]*)\]\n",
)


def parse_framing(last_user_message: str) -> dict | None:
    """Parse the executor's turn-framing header; returns None if absent."""
    m = _FRAMING_RE.match(last_user_message)
    if m is None:
        return None
    info = m.groupdict()
    return {
        "mode": info["mode"].strip(),
        "agent": int(info["agent"]) - 1,
        "k": int(info["k"]),
        "round": int(info["round"]) - 1,
        "rounds": int(info["rounds"]),
        "role": info["role"].strip(),
        "query": last_user_message[m.end() :],
    }
