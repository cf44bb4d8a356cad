"""Query-adaptive multi-agent system routing.

A learned cascaded controller picks a collaboration mode, an agent roster
(count, roles), and a per-agent LLM backbone for each query; the executor
runs the resulting topology against pluggable backends with exact cost
accounting; the trainer optimizes the controller by policy gradient on
utility minus dollar cost.
"""

__version__ = "0.1.0"

from .controller import RouterConfig, RoutingDecision, init_params, route
from .embedding import EncoderConfig, EncoderKind, make_encoder
from .executor import EvalKind, build_topology, evaluate, execute
from .profiles import (
    CollabModeProfile,
    LlmProfile,
    ProfilePool,
    QueryRecord,
    RoleProfile,
    load_dataset,
    load_profile_pool,
    price_of,
)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "RouterConfig",
    "RoutingDecision",
    "init_params",
    "route",
    "EncoderConfig",
    "EncoderKind",
    "make_encoder",
    "EvalKind",
    "build_topology",
    "evaluate",
    "execute",
    "CollabModeProfile",
    "LlmProfile",
    "ProfilePool",
    "QueryRecord",
    "RoleProfile",
    "load_dataset",
    "load_profile_pool",
    "price_of",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
