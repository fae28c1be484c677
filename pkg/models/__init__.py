"""
HLSIRM - Models Package
"""
from models.domain import (
    AcceptanceLog,
    AlignedChain,
    ClusterResult,
    ClusterSelection,
    DiagnosticsReport,
    GroupResponses,
    InteractionSummary,
    MetricsReport,
    ModelState,
    ParameterSummary,
    PosteriorChain,
    PpcReport,
    ResponseDataset,
)
from models.schemas import (
    AlignOn,
    ChainConfig,
    FittedMode,
    Hyperparameters,
    PpcMode,
    ProposalBlock,
    RecodingRule,
    ReferencePolicy,
    RunConfig,
)

__all__ = [
    # Domain types
    "AcceptanceLog",
    "AlignedChain",
    "ClusterResult",
    "ClusterSelection",
    "DiagnosticsReport",
    "GroupResponses",
    "InteractionSummary",
    "MetricsReport",
    "ModelState",
    "ParameterSummary",
    "PosteriorChain",
    "PpcReport",
    "ResponseDataset",
    # Schemas
    "AlignOn",
    "ChainConfig",
    "FittedMode",
    "Hyperparameters",
    "PpcMode",
    "ProposalBlock",
    "RecodingRule",
    "ReferencePolicy",
    "RunConfig",
]
