"""Agent-oriented planning for multi-agent LLM systems.

A meta-agent decomposes a query into sub-tasks, a reward model and a store of
representative works decide which agent can take each one, and unsolvable
pieces are replanned, re-described or split further before execution.
"""

from .agents import ExecutionRecord, build_agents
from .detector import DetectionReport, PlanDetector
from .embedding import Embedder, HashEmbedder, PairEmbedder
from .gateway import ChatRequest, ChatResponse, Gateway, ScriptedBackend, ScriptEntry
from .orchestrator import Orchestrator, Route, RoutingConfig, RoutingDecision, RunTrace, route
from .plan import DEFAULT_ROSTER, AgentDescriptor, Plan, Query, SubTask, parse_plan, splice, validate_plan
from .planner import MetaPlanner
from .reward import MLPRewardRegressor, RewardModel, TriScore, level_score
from .works import WorksStore

__version__ = "0.1.0"

__all__ = [
    "AgentDescriptor",
    "ChatRequest",
    "ChatResponse",
    "DEFAULT_ROSTER",
    "DetectionReport",
    "Embedder",
    "ExecutionRecord",
    "Gateway",
    "HashEmbedder",
    "MLPRewardRegressor",
    "MetaPlanner",
    "Orchestrator",
    "PairEmbedder",
    "Plan",
    "PlanDetector",
    "Query",
    "RewardModel",
    "Route",
    "RoutingConfig",
    "RoutingDecision",
    "RunTrace",
    "ScriptEntry",
    "ScriptedBackend",
    "SubTask",
    "TriScore",
    "WorksStore",
    "build_agents",
    "level_score",
    "parse_plan",
    "route",
    "splice",
    "validate_plan",
]
