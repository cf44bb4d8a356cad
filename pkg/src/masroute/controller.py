"""Cascaded routing controller: collaboration-mode determination, sequential
role allocation, and per-agent LLM assignment, with a fully decomposed
log-probability for policy-gradient training.

The three stages share one differentiable graph:

- a query embedding is projected to the mean and (softplus) scale of a
  Gaussian latent, sampled by reparameterization;
- each candidate profile embedding is fused with the current context through
  a shared two-layer FFN, and scored by a temperature softmax over inner
  products;
- the agent count is ceil(delta * gamma) for a sigmoid head delta, clamped
  to the chosen mode's bounds, while the count likelihood keeps the
  pre-rounded value inside a Gamma-function multinomial coefficient so the
  agent-count head stays differentiable.
"""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .embedding import Encoder
from .profiles import CollabModeProfile, LlmProfile, ProfilePool, QueryRecord, RoleProfile


class EmptyPoolError(ValueError):
    pass


class StaleDecision(RuntimeError):
    """The recorded sample path no longer matches the pool/params."""


@dataclass(frozen=True)
class RouterConfig:
    gamma: int = 6
    tau: float = 1.0
    dim: int = 256
    seed: int = 0
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.tau <= 0:
            raise nn.NonPositiveTemperature(f"tau = {self.tau}")

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.dim


@dataclass
class ControllerParams:
    """All learnable pieces: latent heads, agent-count head, the shared
    fusion network, and the two context FFNs."""

    store: nn.ParamStore
    mu_head: nn.LinearParams
    sigma_head: nn.LinearParams
    delta_head: nn.LinearParams
    fuse: nn.FfnParams
    role_ctx: nn.FfnParams
    llm_ctx: nn.FfnParams


def init_params(cfg: RouterConfig) -> ControllerParams:
    """Fresh parameters: Glorot-uniform weights, zero biases. The scale
    head's bias starts negative so the latent noise is small relative to the
    query projection; the head can widen it during training."""
    d, h = cfg.dim, cfg.hidden
    store = nn.ParamStore(cfg.seed)
    params = ControllerParams(
        store=store,
        mu_head=store.linear("mu", d, d),
        sigma_head=store.linear("sigma", d, d),
        delta_head=store.linear("delta", d, 1),
        fuse=store.ffn("fuse", nn.FfnSpec(2 * d, h, d)),
        role_ctx=store.ffn("role_ctx", nn.FfnSpec(3 * d, h, d)),
        llm_ctx=store.ffn("llm_ctx", nn.FfnSpec(3 * d, h, d)),
    )
    params.sigma_head.bias.values[...] = -2.0
    return params


@dataclass(frozen=True, eq=False)
class LatentState:
    H: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    H_mode: np.ndarray


@dataclass(frozen=True)
class LogProbParts:
    mode: float
    roles: tuple[float, ...]
    llm_coeff: float
    llm_terms: float

    @property
    def total(self) -> float:
        return self.mode + sum(self.roles) + self.llm_coeff + self.llm_terms


@dataclass(frozen=True, eq=False)
class RoutingDecision:
    mode: CollabModeProfile
    k: int
    roles: tuple[RoleProfile, ...]
    llms: tuple[LlmProfile, ...]
    counts: tuple[int, ...]
    log_prob_parts: LogProbParts
    latent: LatentState
    seed_trace: str
    k_star: float
    mode_index: int
    role_indices: tuple[int, ...]
    llm_indices: tuple[int, ...]
    distributions: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "mode": self.mode.name,
            "k": self.k,
            "k_star": self.k_star,
            "roles": [r.name for r in self.roles],
            "llms": [m.name for m in self.llms],
            "counts": dict(Counter(m.name for m in self.llms)),
            "log_prob": {
                "mode": self.log_prob_parts.mode,
                "roles": list(self.log_prob_parts.roles),
                "llm_coeff": self.log_prob_parts.llm_coeff,
                "llm_terms": self.log_prob_parts.llm_terms,
                "total": self.log_prob_parts.total,
            },
            "seed_trace": self.seed_trace,
        }


def profile_text(p) -> str:
    """What the encoder sees for a profile: name plus description."""
    return f"{p.name}\n{p.description}"


@dataclass(frozen=True)
class PoolEmbeddings:
    modes: tuple[np.ndarray, ...]
    roles: tuple[np.ndarray, ...]
    llms: tuple[np.ndarray, ...]


def embed_pool(pool: ProfilePool, encoder: Encoder) -> PoolEmbeddings:
    modes = encoder.encode_batch([profile_text(m) for m in pool.modes])
    roles = encoder.encode_batch([profile_text(r) for r in pool.roles])
    llms = encoder.encode_batch([profile_text(m) for m in pool.llms])
    return PoolEmbeddings(
        modes=tuple(v.values for v in modes),
        roles=tuple(v.values for v in roles),
        llms=tuple(v.values for v in llms),
    )


def ln_multinomial_coeff(k_star: float, counts) -> float:
    """log of the Gamma-relaxed multinomial coefficient
    Gamma(k*+1) / prod Gamma(n_i + 1); exact for integer k*."""
    return nn.ln_gamma(k_star + 1.0) - sum(nn.ln_gamma(n + 1.0) for n in counts)


@dataclass(frozen=True)
class _Picks:
    mode: int
    roles: tuple[int, ...]
    llms: tuple[int, ...]


@dataclass
class _TraceResult:
    mode_index: int
    role_indices: list[int]
    llm_indices: list[int]
    k: int
    k_star: float
    eps: np.ndarray
    H: nn.Node
    mu: nn.Node
    sigma: nn.Node
    H_mode: nn.Node
    log_mode: nn.Node
    log_roles: list[nn.Node]
    ln_coeff: nn.Node
    llm_terms: nn.Node
    total: nn.Node
    entropy_total: nn.Node
    distributions: dict


def _clamp_k(k_raw: int, mode: CollabModeProfile, gamma: int) -> int:
    lo = min(mode.min_agents, gamma)
    hi = min(mode.max_agents, gamma)
    return int(min(max(k_raw, lo), hi))


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(rng.choice(len(probs), p=probs / probs.sum()))


def _as_vec(q_emb) -> np.ndarray:
    return q_emb.values if hasattr(q_emb, "values") else np.asarray(q_emb, dtype=np.float64)


def _trace(
    q_vec: np.ndarray,
    pool: ProfilePool,
    embs: PoolEmbeddings,
    params: ControllerParams,
    cfg: RouterConfig,
    *,
    eps: np.ndarray,
    rng: np.random.Generator | None = None,
    picks: _Picks | None = None,
) -> _TraceResult:
    """Build the controller graph once, either sampling fresh choices (rng)
    or replaying recorded ones (picks)."""
    if not pool.modes or not pool.roles or not pool.llms:
        raise EmptyPoolError("pool must have modes, roles and llms")
    d = cfg.dim
    if q_vec.shape != (d,):
        raise nn.ShapeMismatch(f"query embedding has shape {q_vec.shape}, expected ({d},)")

    q = nn.constant(q_vec)
    mu = nn.linear(params.mu_head, q)
    sigma = nn.softplus(nn.linear(params.sigma_head, q))
    H = nn.gaussian_sample(mu, sigma, eps)

    mode_tildes = [nn.ffn(params.fuse, nn.concat([nn.constant(e), H])) for e in embs.modes]
    mode_logits = nn.vector_of([nn.dot(q, t) for t in mode_tildes])
    mode_p = nn.softmax_t(mode_logits, cfg.tau)
    mode_index = picks.mode if picks is not None else _categorical(rng, mode_p.value)
    log_mode = nn.log(nn.pick(mode_p, mode_index))
    mode = pool.modes[mode_index]
    H_mode = mode_tildes[mode_index]

    delta = nn.sigmoid(nn.pick(nn.linear(params.delta_head, H), 0))
    k_star_node = nn.scale(delta, float(cfg.gamma))
    k_star = float(k_star_node.value)
    k = _clamp_k(math.ceil(k_star), mode, cfg.gamma)

    distributions = {"mode": mode_p.value.copy(), "mode_logits": mode_logits.value.copy()}

    role_indices: list[int] = []
    log_roles: list[nn.Node] = []
    chosen_tildes: list[nn.Node] = []
    role_dists = []
    entropies = [nn.entropy(mode_p)]
    zero_vec = nn.constant(np.zeros(d))
    for step in range(k):
        prev_mean = nn.mean_nodes(chosen_tildes) if chosen_tildes else zero_vec
        ctx = nn.ffn(params.role_ctx, nn.concat([H, H_mode, prev_mean]))
        tildes = [nn.ffn(params.fuse, nn.concat([nn.constant(e), ctx])) for e in embs.roles]
        logits = nn.vector_of([nn.dot(ctx, t) for t in tildes])
        p = nn.softmax_t(logits, cfg.tau)
        idx = picks.roles[step] if picks is not None else _categorical(rng, p.value)
        role_indices.append(idx)
        log_roles.append(nn.log(nn.pick(p, idx)))
        chosen_tildes.append(tildes[idx])
        role_dists.append(p.value.copy())
        entropies.append(nn.entropy(p))
    distributions["roles"] = role_dists

    h_llm = nn.ffn(params.llm_ctx, nn.concat([H, H_mode, nn.mean_nodes(chosen_tildes)]))
    llm_tildes = [nn.ffn(params.fuse, nn.concat([nn.constant(e), h_llm])) for e in embs.llms]
    llm_logits = nn.vector_of([nn.dot(h_llm, t) for t in llm_tildes])
    llm_p = nn.softmax_t(llm_logits, cfg.tau)
    if picks is not None:
        llm_indices = list(picks.llms)
    else:
        llm_indices = [_categorical(rng, llm_p.value) for _ in range(k)]
    counts = np.bincount(llm_indices, minlength=len(pool.llms))
    distributions["llm"] = llm_p.value.copy()

    # Gamma-relaxed multinomial coefficient on the pre-rounded agent count;
    # the Gamma(n+1) terms over realized counts are constants.
    const_term = -sum(math.lgamma(n + 1.0) for n in counts)
    ln_coeff = nn.add_const(nn.ln_gamma(nn.add_const(k_star_node, 1.0)), const_term)
    llm_term_nodes = [
        nn.scale(nn.log(nn.pick(llm_p, i)), float(n)) for i, n in enumerate(counts) if n > 0
    ]
    llm_terms = nn.sum_nodes(llm_term_nodes)
    entropies.extend(nn.entropy(llm_p) for _ in range(k))

    total = nn.sum_nodes([log_mode, *log_roles, ln_coeff, llm_terms])
    return _TraceResult(
        mode_index=mode_index,
        role_indices=role_indices,
        llm_indices=llm_indices,
        k=k,
        k_star=k_star,
        eps=eps,
        H=H,
        mu=mu,
        sigma=sigma,
        H_mode=H_mode,
        log_mode=log_mode,
        log_roles=log_roles,
        ln_coeff=ln_coeff,
        llm_terms=llm_terms,
        total=total,
        entropy_total=nn.sum_nodes(entropies),
        distributions=distributions,
    )


def _rng_trace(rng: np.random.Generator) -> str:
    state = repr(rng.bit_generator.state)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()[:16]


def _decision_from_trace(tr: _TraceResult, pool: ProfilePool, seed_trace: str) -> RoutingDecision:
    return RoutingDecision(
        mode=pool.modes[tr.mode_index],
        k=tr.k,
        roles=tuple(pool.roles[i] for i in tr.role_indices),
        llms=tuple(pool.llms[i] for i in tr.llm_indices),
        counts=tuple(int(n) for n in np.bincount(tr.llm_indices, minlength=len(pool.llms))),
        log_prob_parts=LogProbParts(
            mode=float(tr.log_mode.value),
            roles=tuple(float(n.value) for n in tr.log_roles),
            llm_coeff=float(tr.ln_coeff.value),
            llm_terms=float(tr.llm_terms.value),
        ),
        latent=LatentState(
            H=tr.H.value.copy(),
            mu=tr.mu.value.copy(),
            sigma=tr.sigma.value.copy(),
            eps=tr.eps.copy(),
            H_mode=tr.H_mode.value.copy(),
        ),
        seed_trace=seed_trace,
        k_star=tr.k_star,
        mode_index=tr.mode_index,
        role_indices=tuple(tr.role_indices),
        llm_indices=tuple(tr.llm_indices),
        distributions=tr.distributions,
    )


def determine_collaboration(
    q_emb: np.ndarray,
    pool: ProfilePool,
    params: ControllerParams,
    cfg: RouterConfig,
    rng: np.random.Generator,
    encoder: Encoder,
) -> tuple[CollabModeProfile, LatentState, int, float]:
    """Sample the latent, pick a collaboration mode, and derive the agent
    count. Returns (mode, latent, k, log p(mode))."""
    eps = rng.standard_normal(cfg.dim)
    embs = embed_pool(pool, encoder)
    q = nn.constant(_as_vec(q_emb))
    mu = nn.linear(params.mu_head, q)
    sigma = nn.softplus(nn.linear(params.sigma_head, q))
    H = nn.gaussian_sample(mu, sigma, eps)
    tildes = [nn.ffn(params.fuse, nn.concat([nn.constant(e), H])) for e in embs.modes]
    logits = np.array([float(nn.dot(q, t).value) for t in tildes])
    p = nn.softmax_t(logits, cfg.tau)
    idx = _categorical(rng, p)
    mode = pool.modes[idx]
    delta = nn.sigmoid(nn.pick(nn.linear(params.delta_head, H), 0))
    k_star = float(cfg.gamma) * float(delta.value)
    k = _clamp_k(math.ceil(k_star), mode, cfg.gamma)
    latent = LatentState(
        H=H.value.copy(),
        mu=mu.value.copy(),
        sigma=sigma.value.copy(),
        eps=eps.copy(),
        H_mode=tildes[idx].value.copy(),
    )
    return mode, latent, k, float(np.log(p[idx]))


def allocate_roles(
    q_emb: np.ndarray,
    mode: CollabModeProfile,
    H: np.ndarray,
    H_mode: np.ndarray,
    k: int,
    pool: ProfilePool,
    params: ControllerParams,
    cfg: RouterConfig,
    rng: np.random.Generator,
    encoder: Encoder,
) -> tuple[list[RoleProfile], float]:
    """Sequentially sample k roles; each step conditions on the latent, the
    mode embedding, and the mean of previously chosen role embeddings."""
    if k < 1:
        raise ValueError("k must be >= 1")
    embs = embed_pool(pool, encoder)
    h = nn.constant(H)
    hm = nn.constant(H_mode)
    chosen: list[nn.Node] = []
    roles: list[RoleProfile] = []
    log_prob = 0.0
    for _ in range(k):
        prev = nn.mean_nodes(chosen) if chosen else nn.constant(np.zeros(cfg.dim))
        ctx = nn.ffn(params.role_ctx, nn.concat([h, hm, prev]))
        tildes = [nn.ffn(params.fuse, nn.concat([nn.constant(e), ctx])) for e in embs.roles]
        logits = np.array([float(nn.dot(ctx, t).value) for t in tildes])
        p = nn.softmax_t(logits, cfg.tau)
        idx = _categorical(rng, p)
        roles.append(pool.roles[idx])
        chosen.append(tildes[idx])
        log_prob += float(np.log(p[idx]))
    return roles, log_prob


def route_llms(
    q_emb: np.ndarray,
    mode: CollabModeProfile,
    H: np.ndarray,
    H_mode: np.ndarray,
    roles: list[RoleProfile],
    pool: ProfilePool,
    params: ControllerParams,
    cfg: RouterConfig,
    rng: np.random.Generator,
    encoder: Encoder,
    k_star: float,
) -> tuple[list[LlmProfile], np.ndarray, float]:
    """Assign an LLM to each agent i.i.d. from the global compatibility
    softmax; the count-level log-likelihood adds the Gamma-relaxed
    multinomial coefficient over the pre-rounded agent count."""
    if not roles:
        raise ValueError("roles must be nonempty")
    embs = embed_pool(pool, encoder)
    h = nn.constant(H)
    hm = nn.constant(H_mode)
    role_tildes = []
    # recover role context refinements for the selected roles
    chosen: list[nn.Node] = []
    for role in roles:
        prev = nn.mean_nodes(chosen) if chosen else nn.constant(np.zeros(cfg.dim))
        ctx = nn.ffn(params.role_ctx, nn.concat([h, hm, prev]))
        idx = pool.role_index(role.name)
        tilde = nn.ffn(params.fuse, nn.concat([nn.constant(embs.roles[idx]), ctx]))
        chosen.append(tilde)
        role_tildes.append(tilde)
    h_llm = nn.ffn(params.llm_ctx, nn.concat([h, hm, nn.mean_nodes(role_tildes)]))
    tildes = [nn.ffn(params.fuse, nn.concat([nn.constant(e), h_llm])) for e in embs.llms]
    logits = np.array([float(nn.dot(h_llm, t).value) for t in tildes])
    p = nn.softmax_t(logits, cfg.tau)
    indices = [_categorical(rng, p) for _ in roles]
    counts = np.bincount(indices, minlength=len(pool.llms))
    log_f = ln_multinomial_coeff(k_star, counts) + float(
        sum(n * np.log(p[i]) for i, n in enumerate(counts) if n > 0)
    )
    return [pool.llms[i] for i in indices], counts, log_f


def route(
    query: QueryRecord,
    pool: ProfilePool,
    params: ControllerParams,
    cfg: RouterConfig,
    rng: np.random.Generator,
    encoder: Encoder,
) -> RoutingDecision:
    """Sample a full multi-agent system for the query. Deterministic given
    (params, pool, cfg, query text, rng state)."""
    seed_trace = _rng_trace(rng)
    q_vec = encoder.encode(query.query).values
    embs = embed_pool(pool, encoder)
    eps = rng.standard_normal(cfg.dim)
    tr = _trace(q_vec, pool, embs, params, cfg, eps=eps, rng=rng)
    return _decision_from_trace(tr, pool, seed_trace)


def _picks_for(decision: RoutingDecision, pool: ProfilePool) -> _Picks:
    mi = decision.mode_index
    if mi >= len(pool.modes) or pool.modes[mi].name != decision.mode.name:
        raise StaleDecision(f"mode {decision.mode.name!r} not at index {mi}")
    for idx, role in zip(decision.role_indices, decision.roles):
        if idx >= len(pool.roles) or pool.roles[idx].name != role.name:
            raise StaleDecision(f"role {role.name!r} not at index {idx}")
    for idx, llm in zip(decision.llm_indices, decision.llms):
        if idx >= len(pool.llms) or pool.llms[idx].name != llm.name:
            raise StaleDecision(f"llm {llm.name!r} not at index {idx}")
    if len(decision.role_indices) != decision.k or len(decision.llm_indices) != decision.k:
        raise StaleDecision("recorded path length disagrees with k")
    return _Picks(
        mode=mi, roles=decision.role_indices, llms=decision.llm_indices
    )


def replay_log_prob(
    decision: RoutingDecision,
    query: QueryRecord,
    pool: ProfilePool,
    params: ControllerParams,
    cfg: RouterConfig,
    encoder: Encoder,
) -> float:
    """Recompute log pi(S | Q) along the recorded sample path (fixed noise
    and fixed categorical choices) under the current parameters."""
    picks = _picks_for(decision, pool)
    q_vec = encoder.encode(query.query).values
    embs = embed_pool(pool, encoder)
    tr = _trace(q_vec, pool, embs, params, cfg, eps=decision.latent.eps, picks=picks)
    return float(tr.total.value)


def decision_log_prob_grad(
    decision: RoutingDecision,
    query: QueryRecord,
    pool: ProfilePool,
    params: ControllerParams,
    cfg: RouterConfig,
    encoder: Encoder,
    *,
    weight: float = 1.0,
    entropy_weight: float = 0.0,
) -> dict[str, np.ndarray]:
    """Accumulate weight * grad(log pi) (plus an optional entropy bonus term)
    into the parameter gradients; returns this call's contribution per
    parameter. With default weights this is exactly grad(log pi(S|Q))."""
    picks = _picks_for(decision, pool)
    q_vec = encoder.encode(query.query).values
    embs = embed_pool(pool, encoder)
    tr = _trace(q_vec, pool, embs, params, cfg, eps=decision.latent.eps, picks=picks)
    recomputed = float(tr.total.value)
    if abs(recomputed - decision.log_prob_parts.total) > 1e-8:
        raise StaleDecision(
            f"recomputed log-prob {recomputed} != recorded {decision.log_prob_parts.total}"
        )
    before = {name: pt.grad.copy() for name, pt in params.store.params.items()}
    objective = nn.scale(tr.total, weight)
    if entropy_weight != 0.0:
        objective = nn.add(objective, nn.scale(tr.entropy_total, entropy_weight))
    nn.backward(objective, seed=1.0)
    return {name: pt.grad - before[name] for name, pt in params.store.params.items()}
