"""
HLSIRM - Posterior Post-Processing

Procrustes alignment of samples, posterior summaries, interaction-adjusted
intercepts and plot-ready map records.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from models.domain import (
    AlignedChain,
    InteractionSummary,
    ModelState,
    ParameterSummary,
    PosteriorChain,
    ResponseDataset,
)
from models.schemas import AlignOn, ReferencePolicy
from utils.errors import ArgumentError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class ProcrustesFit:
    rotation: np.ndarray
    degenerate: bool
    residual: float


def procrustes_rotation(source: np.ndarray, target: np.ndarray, tol: float = 1e-10) -> ProcrustesFit:
    """
    Orthogonal R minimizing ||source @ R - target||_F (reflections allowed).

    No centering and no scaling: the inner-product model admits neither.
    A near rank-deficient cross-product makes the optimum ambiguous; one
    optimum is still returned and ``degenerate`` is set.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape or source.ndim != 2:
        raise ShapeError(f"source {source.shape} and target {target.shape} must be equal n x D matrices")
    n, D = source.shape
    if n < D:
        raise ShapeError(f"need at least D={D} points, got {n}")

    u, s, vh = np.linalg.svd(source.T @ target)
    rotation = u @ vh
    degenerate = bool(s.min() <= tol * max(float(s.max()), np.finfo(float).tiny))
    residual = float(np.linalg.norm(source @ rotation - target))
    return ProcrustesFit(rotation=rotation, degenerate=degenerate, residual=residual)


def alignment_stack(state: ModelState, align_on: AlignOn = AlignOn.ITEMS_AND_GROUPS) -> np.ndarray:
    """Configuration matrix the rotation is solved on: [W; Z_group] or W."""
    if align_on == AlignOn.ITEMS_ONLY:
        return state.item_positions
    return np.vstack([state.item_positions, state.group_positions])


def _samples_of(chain: Union[PosteriorChain, AlignedChain]) -> List[ModelState]:
    if not chain.samples:
        raise ArgumentError("cannot align an empty chain")
    return chain.samples


def _rotate_all(samples: List[ModelState], reference: np.ndarray, align_on: AlignOn):
    fits = [procrustes_rotation(alignment_stack(s, align_on), reference) for s in samples]
    rotated = [s.rotate(f.rotation) for s, f in zip(samples, fits)]
    return fits, rotated


def align_chain(
    chain: Union[PosteriorChain, AlignedChain],
    reference_policy: ReferencePolicy = ReferencePolicy.PILOT_MEAN,
    align_on: AlignOn = AlignOn.ITEMS_AND_GROUPS,
    reference: Optional[np.ndarray] = None,
) -> AlignedChain:
    """
    Rotate every sample onto a common reference configuration.

    With ``reference`` given the policy is ignored. ``last-sample`` uses the
    final sample; ``pilot-mean`` uses the element-wise mean of a first pass
    aligned to the final sample. The rotation found on the stack is applied
    to every position vector and to both covariance matrices.
    """
    samples = _samples_of(chain)
    source = chain.source if isinstance(chain, AlignedChain) else chain

    if reference is None:
        reference = alignment_stack(samples[-1], align_on)
        if ReferencePolicy(reference_policy) == ReferencePolicy.PILOT_MEAN:
            _, pilot = _rotate_all(samples, reference, align_on)
            reference = np.mean([alignment_stack(s, align_on) for s in pilot], axis=0)
    reference = np.asarray(reference, dtype=float)

    fits, rotated = _rotate_all(samples, reference, align_on)
    degenerate = [f.degenerate for f in fits]
    if any(degenerate):
        logger.warning("%d of %d samples had a degenerate Procrustes cross-product", sum(degenerate), len(fits))

    return AlignedChain(
        reference=reference,
        rotations=[f.rotation for f in fits],
        samples=rotated,
        summary=summarize(rotated),
        degenerate=degenerate,
        align_on=AlignOn(align_on),
        source=source,
    )


# ============== Summaries ==============

def parameter_draws(samples: Sequence[ModelState]) -> Dict[str, np.ndarray]:
    """Stack every parameter over samples; ragged blocks are concatenated."""
    draws = {
        "group_intercepts": np.stack([s.group_intercepts for s in samples]),
        "individual_intercepts": np.stack([np.concatenate(s.individual_intercepts) for s in samples]),
        "group_variances": np.stack([s.group_variances for s in samples]),
        "item_intercepts": np.stack([s.item_intercepts for s in samples]),
        "group_positions": np.stack([s.group_positions for s in samples]),
        "individual_positions": np.stack([np.concatenate(s.individual_positions) for s in samples]),
        "item_positions": np.stack([s.item_positions for s in samples]),
        "psi_z": np.stack([s.psi_z for s in samples]),
        "psi_w": np.stack([s.psi_w for s in samples]),
    }
    if samples[0].residuals is not None:
        draws["residuals"] = np.stack([np.concatenate(s.residuals) for s in samples])
    return draws


def summarize(chain: Union[AlignedChain, Sequence[ModelState]]) -> Dict[str, ParameterSummary]:
    """Posterior mean, sd and 95% equal-tailed interval of every parameter."""
    samples = chain.samples if isinstance(chain, AlignedChain) else list(chain)
    if not samples:
        raise ArgumentError("cannot summarize an empty chain")
    return {name: ParameterSummary.from_draws(values) for name, values in parameter_draws(samples).items()}


def posterior_mean_state(chain: Union[AlignedChain, PosteriorChain, Sequence[ModelState]]) -> ModelState:
    """ModelState of element-wise posterior means (residuals omitted)."""
    samples = chain.samples if isinstance(chain, (AlignedChain, PosteriorChain)) else list(chain)
    if not samples:
        raise ArgumentError("cannot average an empty chain")
    sizes = samples[0].group_sizes
    means = {name: values.mean(axis=0) for name, values in parameter_draws(samples).items()}
    cuts = np.cumsum(sizes)[:-1]
    return ModelState(
        group_intercepts=means["group_intercepts"],
        individual_intercepts=np.split(means["individual_intercepts"], cuts),
        group_variances=means["group_variances"],
        item_intercepts=means["item_intercepts"],
        group_positions=means["group_positions"],
        individual_positions=np.split(means["individual_positions"], cuts),
        item_positions=means["item_positions"],
        psi_z=means["psi_z"],
        psi_w=means["psi_w"],
        residuals=None,
    )


def interaction_draws(samples: Sequence[ModelState]):
    """Per-sample alpha-tilde (S, K) and beta-tilde (S, p)."""
    alpha, beta = [], []
    for s in samples:
        gram = s.group_positions @ s.item_positions.T
        alpha.append(s.group_intercepts + gram.mean(axis=1))
        beta.append(s.item_intercepts + gram.mean(axis=0))
    return np.asarray(alpha), np.asarray(beta)


def interaction_adjusted(chain: AlignedChain) -> InteractionSummary:
    """
    alpha~_(k) = alpha_(k) + mean_j <z_(k), w_j> and
    beta~_j = beta_j + mean_k <z_(k), w_j>, computed per sample then averaged.
    """
    samples = _samples_of(chain)
    alpha_draws, beta_draws = interaction_draws(samples)
    summary = chain.summary
    sizes = samples[0].group_sizes
    return InteractionSummary(
        alpha_tilde=ParameterSummary.from_draws(alpha_draws),
        beta_tilde=ParameterSummary.from_draws(beta_draws),
        alpha_tilde_draws=alpha_draws,
        beta_tilde_draws=beta_draws,
        group_positions=summary["group_positions"].mean,
        individual_positions=np.split(summary["individual_positions"].mean, np.cumsum(sizes)[:-1]),
        item_positions=summary["item_positions"].mean,
    )


# ============== Exports ==============

def _position_row(entity_type: str, entity_id: str, vector: np.ndarray, magnitude: float, angle: float) -> Dict[str, Any]:
    row: Dict[str, Any] = {"entity_type": entity_type, "entity_id": entity_id}
    for d, value in enumerate(vector):
        row[f"dim{d + 1}"] = float(value)
    row["magnitude"] = float(magnitude)
    row["angle_radians"] = float(angle)
    return row


def map_records(
    summary: InteractionSummary,
    data: ResponseDataset,
    covariates: Optional[Dict[str, Dict[str, Any]]] = None,
) -> List[Dict[str, Any]]:
    """
    Interaction-map rows for groups, individuals and items.

    Individuals carry their group in ``group_id``; group rows get the
    covariates of their group, one column per key.
    """
    covariates = covariates if covariates is not None else (data.covariates or {})
    keys = sorted({key for values in covariates.values() for key in values})
    rows: List[Dict[str, Any]] = []

    magnitudes, angles = summary.polar(summary.group_positions)
    for k, g in enumerate(data.groups):
        row = _position_row("group", g.group_id, summary.group_positions[k], magnitudes[k], angles[k])
        row["group_id"] = g.group_id
        for key in keys:
            row[key] = covariates.get(g.group_id, {}).get(key)
        rows.append(row)

    for k, g in enumerate(data.groups):
        positions = summary.individual_positions[k]
        magnitudes, angles = summary.polar(positions)
        for i, sid in enumerate(g.respondent_ids):
            row = _position_row("individual", sid, positions[i], magnitudes[i], angles[i])
            row["group_id"] = g.group_id
            rows.append(row)

    magnitudes, angles = summary.polar(summary.item_positions)
    for j, item_id in enumerate(data.item_ids):
        row = _position_row("item", item_id, summary.item_positions[j], magnitudes[j], angles[j])
        row["group_id"] = None
        rows.append(row)
    return rows


def item_inner_products(summary: InteractionSummary) -> np.ndarray:
    """p x p matrix of inner products between posterior-mean item vectors."""
    return summary.item_positions @ summary.item_positions.T
