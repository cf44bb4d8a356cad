"""Search-space data model: LLM backbones, agent roles, collaboration modes.

Profile files are JSON arrays, but the loader also accepts the looser
python-literal style these pools are commonly published in (single quotes,
trailing commas, `name = [...]` assignment prefixes, raw newlines inside
strings). Prices may live as explicit ``price_in``/``price_out`` fields or
embedded in description text ("$0.15 per million input tokens"); explicit
fields win.
"""
from __future__ import annotations

import ast
import enum
import hashlib
import json
import re
from dataclasses import dataclass, field


class ProfileError(ValueError):
    """Base class for profile/dataset ingestion failures."""


class MissingField(ProfileError):
    pass


class DuplicateName(ProfileError):
    pass


class EmptyPool(ProfileError):
    pass


class UnparseablePrice(ProfileError):
    pass


class BadLine(ProfileError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class DuplicateId(ProfileError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate id {record_id!r}")
        self.record_id = record_id


class TopologyKind(str, enum.Enum):
    IO = "IO"
    COT = "CoT"
    CHAIN = "Chain"
    FULL_CONNECTED = "FullConnected"
    DEBATE = "Debate"
    REFLECTION = "Reflection"


SINGLE_AGENT_KINDS = frozenset({TopologyKind.IO, TopologyKind.COT})

_KIND_BY_NAME = {k.value.lower(): k for k in TopologyKind}


@dataclass(frozen=True)
class LlmProfile:
    """One model endpoint with USD prices per million tokens."""

    name: str
    description: str
    price_in: float
    price_out: float

    def __post_init__(self):
        if not self.name:
            raise MissingField("LLM profile with empty name")
        if self.price_in < 0 or self.price_out < 0:
            raise ProfileError(f"negative price on {self.name!r}")


@dataclass(frozen=True)
class RoleProfile:
    """An agent persona: system-prompt text plus message-handling metadata.

    ``message_aggregation`` and ``post_process`` are opaque tags handed to
    executor hooks. Post fields are normalized: the string "None" means
    absent, and orphan post_description/post_output_format without a
    post_process tag are dropped.
    """

    name: str
    description: str
    message_aggregation: str = "Normal"
    output_format: str = ""
    post_process: str | None = None
    post_description: str | None = None
    post_output_format: str | None = None

    def __post_init__(self):
        if not self.name:
            raise MissingField("role profile with empty name")
        if self.post_process is None and (
            self.post_description is not None or self.post_output_format is not None
        ):
            raise ProfileError(f"role {self.name!r}: post fields without post_process")


@dataclass(frozen=True)
class CollabModeProfile:
    """A collaboration mode: topology kind plus agent-count bounds."""

    name: str
    description: str
    min_agents: int
    max_agents: int
    topology_kind: TopologyKind

    def __post_init__(self):
        if not self.name:
            raise MissingField("mode profile with empty name")
        if not (1 <= self.min_agents <= self.max_agents):
            raise ProfileError(
                f"mode {self.name!r}: bad agent bounds "
                f"({self.min_agents}, {self.max_agents})"
            )
        if self.topology_kind in SINGLE_AGENT_KINDS and (
            self.min_agents != 1 or self.max_agents != 1
        ):
            raise ProfileError(f"single-agent mode {self.name!r} must have bounds (1, 1)")


@dataclass(frozen=True)
class ProfilePool:
    """The full search space: LLMs x roles x collaboration modes."""

    llms: tuple[LlmProfile, ...]
    roles: tuple[RoleProfile, ...]
    modes: tuple[CollabModeProfile, ...]

    def __post_init__(self):
        for label, entries in (("llms", self.llms), ("roles", self.roles), ("modes", self.modes)):
            if not entries:
                raise EmptyPool(label)
            seen = set()
            for p in entries:
                if p.name in seen:
                    raise DuplicateName(p.name)
                seen.add(p.name)

    def llm_index(self, name: str) -> int:
        return _index_of(self.llms, name)

    def role_index(self, name: str) -> int:
        return _index_of(self.roles, name)

    def mode_index(self, name: str) -> int:
        return _index_of(self.modes, name)


def _index_of(entries, name: str) -> int:
    for i, p in enumerate(entries):
        if p.name == name:
            return i
    raise KeyError(name)


@dataclass(frozen=True)
class QueryRecord:
    id: str
    query: str
    answer: str | None = None
    domain: str | None = None


# -- parsing helpers ---------------------------------------------------------

_PRICE_RE = re.compile(
    r"\$\s*([0-9]+(?:\.[0-9]+)?)\s*per\s+million\s+(input|output)\s+tokens",
    re.IGNORECASE,
)


def _lower_keys(entry: dict) -> dict:
    return {str(k).lower(): v for k, v in entry.items()}


def _clean_str(value) -> str | None:
    if value is None:
        return None
    s = str(value)
    return None if s.strip() == "None" else s


def _parse_profile_text(text: str) -> list[dict]:
    """Parse a profile file: strict JSON array, or one-or-more python-literal
    arrays (possibly behind `name = [...]` assignments, with raw newlines
    inside string literals). All arrays found are concatenated."""
    try:
        data = json.loads(text)
        if isinstance(data, list):
            return data
        raise ProfileError("profile file must contain a JSON array")
    except json.JSONDecodeError:
        pass

    escaped, spans = _escape_and_locate_arrays(text)
    if not spans:
        raise ProfileError("no profile array found in file")
    entries: list[dict] = []
    for start, end in spans:
        try:
            value = ast.literal_eval(escaped[start:end])
        except (ValueError, SyntaxError) as exc:
            raise ProfileError(f"unparseable profile block: {exc}") from exc
        if not isinstance(value, list):
            raise ProfileError("profile block is not a list")
        entries.extend(value)
    return entries


def _escape_and_locate_arrays(text: str) -> tuple[str, list[tuple[int, int]]]:
    """Escape raw newlines inside string literals and return the character
    spans of every top-level ``[...]`` block in the escaped text."""
    out: list[str] = []
    spans: list[tuple[int, int]] = []
    quote: str | None = None
    depth = 0
    start = -1
    for ch in text.replace("\r\n", "\n"):
        if quote is not None:
            if ch == "\n":
                out.append("\\n")
                continue
            if ch == quote:
                quote = None
            out.append(ch)
            continue
        if ch in "'\"":
            quote = ch
        elif ch == "[":
            if depth == 0:
                start = len(out)
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0 and start >= 0:
                out.append(ch)
                spans.append((start, len(out)))
                start = -1
                continue
        out.append(ch)
    return "".join(out), spans


def _price_from_entry(entry: dict, name: str) -> tuple[float, float]:
    explicit_in = entry.get("price_in")
    explicit_out = entry.get("price_out")
    if explicit_in is not None and explicit_out is not None:
        try:
            return float(explicit_in), float(explicit_out)
        except (TypeError, ValueError) as exc:
            raise UnparseablePrice(f"{name!r}: bad explicit price fields") from exc
    prices: dict[str, float] = {}
    for amount, direction in _PRICE_RE.findall(entry.get("description", "") or ""):
        prices.setdefault(direction.lower(), float(amount))
    if explicit_in is not None:
        prices["input"] = float(explicit_in)
    if explicit_out is not None:
        prices["output"] = float(explicit_out)
    if "input" not in prices or "output" not in prices:
        raise UnparseablePrice(f"{name!r}: no parseable input/output prices")
    return prices["input"], prices["output"]


def _llm_from_entry(raw: dict) -> LlmProfile:
    entry = _lower_keys(raw)
    name = entry.get("name")
    if not name:
        raise MissingField(f"LLM entry missing Name: {raw!r:.120}")
    price_in, price_out = _price_from_entry(entry, name)
    return LlmProfile(
        name=str(name),
        description=str(entry.get("description", "")),
        price_in=price_in,
        price_out=price_out,
    )


def _role_from_entry(raw: dict) -> RoleProfile:
    entry = _lower_keys(raw)
    name = entry.get("name")
    if not name:
        raise MissingField(f"role entry missing Name: {raw!r:.120}")
    description = entry.get("description")
    if description is None:
        raise MissingField(f"role {name!r} missing Description")
    post_process = _clean_str(entry.get("postprocess", entry.get("post_process")))
    post_description = _clean_str(entry.get("postdescription", entry.get("post_description")))
    post_output = _clean_str(entry.get("postoutputformat", entry.get("post_output_format")))
    if post_process is None:
        post_description = None
        post_output = None
    return RoleProfile(
        name=str(name),
        description=str(description),
        message_aggregation=str(entry.get("messageaggregation", entry.get("message_aggregation", "Normal"))),
        output_format=str(entry.get("outputformat", entry.get("output_format", ""))),
        post_process=post_process,
        post_description=post_description,
        post_output_format=post_output,
    )


def _mode_from_entry(raw: dict, gamma: int) -> CollabModeProfile:
    entry = _lower_keys(raw)
    name = entry.get("name")
    if not name:
        raise MissingField(f"mode entry missing Name: {raw!r:.120}")
    kind_tag = entry.get("topology_kind", entry.get("kind", name))
    kind = _KIND_BY_NAME.get(str(kind_tag).lower())
    if kind is None:
        raise MissingField(f"mode {name!r}: unknown topology kind {kind_tag!r}")
    if kind in SINGLE_AGENT_KINDS:
        default_lo, default_hi = 1, 1
    else:
        default_lo, default_hi = 2, max(2, gamma)
    return CollabModeProfile(
        name=str(name),
        description=str(entry.get("description", "")),
        min_agents=int(entry.get("min_agents", default_lo)),
        max_agents=int(entry.get("max_agents", default_hi)),
        topology_kind=kind,
    )


# -- public operations -------------------------------------------------------


def load_profile_pool(llm_path, role_path, mode_path, *, gamma: int = 6) -> ProfilePool:
    """Read the three profile files and return a validated pool.

    ``gamma`` sets the default max_agents for multi-agent modes whose files
    carry no explicit bounds.
    """
    with open(llm_path, encoding="utf-8") as f:
        llm_entries = _parse_profile_text(f.read())
    with open(role_path, encoding="utf-8") as f:
        role_entries = _parse_profile_text(f.read())
    with open(mode_path, encoding="utf-8") as f:
        mode_entries = _parse_profile_text(f.read())
    return ProfilePool(
        llms=tuple(_llm_from_entry(e) for e in llm_entries),
        roles=tuple(_role_from_entry(e) for e in role_entries),
        modes=tuple(_mode_from_entry(e, gamma) for e in mode_entries),
    )


def pool_to_objects(pool: ProfilePool) -> tuple[list[dict], list[dict], list[dict]]:
    """Dump a pool back to the three JSON-serializable entry lists."""
    llms = [
        {
            "Name": p.name,
            "Description": p.description,
            "price_in": p.price_in,
            "price_out": p.price_out,
        }
        for p in pool.llms
    ]
    roles = []
    for p in pool.roles:
        entry = {
            "Name": p.name,
            "Description": p.description,
            "MessageAggregation": p.message_aggregation,
            "OutputFormat": p.output_format,
        }
        if p.post_process is not None:
            entry["PostProcess"] = p.post_process
            if p.post_description is not None:
                entry["PostDescription"] = p.post_description
            if p.post_output_format is not None:
                entry["PostOutputFormat"] = p.post_output_format
        roles.append(entry)
    modes = [
        {
            "Name": p.name,
            "Description": p.description,
            "topology_kind": p.topology_kind.value,
            "min_agents": p.min_agents,
            "max_agents": p.max_agents,
        }
        for p in pool.modes
    ]
    return llms, roles, modes


def load_dataset(path) -> list[QueryRecord]:
    """Read a JSONL query dataset; one object per nonblank line."""
    records: list[QueryRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BadLine(line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise BadLine(line_no, "line is not a JSON object")
            rid = obj.get("id")
            query = obj.get("query")
            if rid is None or not str(rid):
                raise BadLine(line_no, "missing id")
            if query is None or not str(query):
                raise BadLine(line_no, "missing query")
            rid = str(rid)
            if rid in seen:
                raise DuplicateId(rid)
            seen.add(rid)
            answer = obj.get("answer")
            domain = obj.get("domain")
            records.append(
                QueryRecord(
                    id=rid,
                    query=str(query),
                    answer=None if answer is None else str(answer),
                    domain=None if domain is None else str(domain),
                )
            )
    return records


def price_of(llm: LlmProfile, prompt_tokens: int, completion_tokens: int) -> float:
    """Dollar cost of one call: tokens times per-million prices."""
    if prompt_tokens < 0 or completion_tokens < 0:
        raise ValueError("token counts must be nonnegative")
    return prompt_tokens * llm.price_in / 1e6 + completion_tokens * llm.price_out / 1e6


def pool_fingerprint(pool: ProfilePool) -> str:
    """Stable hash of the pool's profile names, for checkpoint pinning."""
    payload = json.dumps(
        {
            "llms": [p.name for p in pool.llms],
            "roles": [p.name for p in pool.roles],
            "modes": [p.name for p in pool.modes],
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
