"""
HLSIRM - Shared test fixtures
"""
import os

os.environ.setdefault("HLSIRM_PROGRESS_BAR", "false")

from typing import List, Optional  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from models.domain import AcceptanceLog, GroupResponses, ModelState, PosteriorChain, ResponseDataset  # noqa: E402
from models.schemas import ChainConfig, Hyperparameters  # noqa: E402


def make_dataset(matrices: List[np.ndarray], item_ids: Optional[List[str]] = None) -> ResponseDataset:
    """Dataset from one response matrix per group with generated ids."""
    p = np.asarray(matrices[0]).shape[1]
    item_ids = item_ids or [f"I{j + 1:02d}" for j in range(p)]
    groups = [
        GroupResponses(
            group_id=f"G{k + 1:02d}",
            respondent_ids=[f"S{i + 1:02d}" for i in range(np.asarray(Y).shape[0])],
            Y=np.asarray(Y, dtype=float),
        )
        for k, Y in enumerate(matrices)
    ]
    return ResponseDataset(groups=groups, item_ids=item_ids)


def make_state(group_sizes: List[int], p: int, D: int = 2, **overrides) -> ModelState:
    """Zero state with identity covariances, optionally overriding fields."""
    state = ModelState.zeros(group_sizes, p, D)
    for name, value in overrides.items():
        setattr(state, name, value)
    return state


@pytest.fixture
def hp() -> Hyperparameters:
    return Hyperparameters(D=2)


@pytest.fixture
def small_data() -> ResponseDataset:
    rng = np.random.default_rng(7)
    return make_dataset([rng.integers(0, 2, size=(4, 5)), rng.integers(0, 2, size=(3, 5))])


@pytest.fixture
def quick_config() -> ChainConfig:
    return ChainConfig(iterations=40, burn_in=20, thin=5, seed=11)


def make_chain(samples: List[ModelState], group_sizes: List[int], p: int, D: int = 2) -> PosteriorChain:
    """PosteriorChain wrapper around hand-built samples."""
    return PosteriorChain(
        samples=samples,
        acceptance_log=AcceptanceLog.empty(len(group_sizes), p),
        adaptation_trace=[],
        config=ChainConfig(iterations=10, burn_in=0, thin=1),
        hyperparameters=Hyperparameters(D=D),
        data_fingerprint="test",
        group_sizes=list(group_sizes),
    )
