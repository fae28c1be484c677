"""
HLSIRM - Domain Value Types

Datasets, parameter states, chains and reports. All arrays are numpy;
ragged per-group quantities are lists indexed by group.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from models.schemas import AlignOn, ChainConfig, Hyperparameters, PpcMode
from utils.errors import BoundsError, DuplicateRecordError, ResponseValueError, ShapeError, ValidityError
from utils.linalg import is_spd


# ============== Data ==============

@dataclass
class GroupResponses:
    """Responses of one group: ``Y`` is n_k x p over {0, 1, nan}."""
    group_id: str
    respondent_ids: List[str]
    Y: np.ndarray

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])


@dataclass
class ResponseDataset:
    """Ragged collection of K binary group matrices sharing p items."""
    groups: List[GroupResponses]
    item_ids: List[str]
    covariates: Optional[Dict[str, Dict[str, Any]]] = None

    def __post_init__(self):
        p = len(self.item_ids)
        if len(set(self.item_ids)) != p:
            raise DuplicateRecordError("item_ids must be unique")
        group_ids = [g.group_id for g in self.groups]
        if len(set(group_ids)) != len(group_ids):
            raise DuplicateRecordError("group_ids must be unique")
        for g in self.groups:
            g.Y = np.asarray(g.Y, dtype=float)
            if g.Y.ndim != 2 or g.Y.shape[1] != p:
                raise ShapeError(
                    f"group {g.group_id} has {g.Y.shape[-1] if g.Y.ndim else 0} columns, expected {p}"
                )
            if g.Y.shape[0] < 1:
                raise ShapeError(f"group {g.group_id} has no respondents")
            if len(g.respondent_ids) != g.Y.shape[0]:
                raise ShapeError(f"group {g.group_id} respondent ids do not match rows")
            if len(set(g.respondent_ids)) != len(g.respondent_ids):
                raise DuplicateRecordError(f"duplicate respondent ids in group {g.group_id}")
            observed = g.Y[~np.isnan(g.Y)]
            if not np.all((observed == 0.0) | (observed == 1.0)):
                raise ResponseValueError(f"group {g.group_id} has cells outside {{0, 1, missing}}")

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def p(self) -> int:
        return len(self.item_ids)

    @property
    def group_ids(self) -> List[str]:
        return [g.group_id for g in self.groups]

    @property
    def group_sizes(self) -> List[int]:
        return [g.n for g in self.groups]

    @property
    def N(self) -> int:
        return int(sum(self.group_sizes))

    def observed_cells(self) -> int:
        return int(sum(np.sum(~np.isnan(g.Y)) for g in self.groups))


# ============== Parameters ==============

@dataclass
class ModelState:
    """One point in parameter space."""
    group_intercepts: np.ndarray                # (K,)
    individual_intercepts: List[np.ndarray]     # K x (n_k,)
    group_variances: np.ndarray                 # (K,)
    item_intercepts: np.ndarray                 # (p,)
    group_positions: np.ndarray                 # (K, D)
    individual_positions: List[np.ndarray]      # K x (n_k, D)
    item_positions: np.ndarray                  # (p, D)
    psi_z: np.ndarray                           # (D, D)
    psi_w: np.ndarray                           # (D, D)
    residuals: Optional[List[np.ndarray]]       # K x (n_k, p), None when not stored

    @property
    def K(self) -> int:
        return int(self.group_intercepts.shape[0])

    @property
    def p(self) -> int:
        return int(self.item_intercepts.shape[0])

    @property
    def D(self) -> int:
        return int(self.item_positions.shape[1])

    @property
    def group_sizes(self) -> List[int]:
        return [int(a.shape[0]) for a in self.individual_intercepts]

    @classmethod
    def zeros(cls, group_sizes: List[int], p: int, D: int, variance: float = 1.0) -> "ModelState":
        """All intercepts, positions and residuals zero; unit covariances."""
        K = len(group_sizes)
        return cls(
            group_intercepts=np.zeros(K),
            individual_intercepts=[np.zeros(n) for n in group_sizes],
            group_variances=np.full(K, float(variance)),
            item_intercepts=np.zeros(p),
            group_positions=np.zeros((K, D)),
            individual_positions=[np.zeros((n, D)) for n in group_sizes],
            item_positions=np.zeros((p, D)),
            psi_z=np.eye(D),
            psi_w=np.eye(D),
            residuals=[np.zeros((n, p)) for n in group_sizes],
        )

    def copy(self, include_residuals: bool = True) -> "ModelState":
        keep = include_residuals and self.residuals is not None
        return ModelState(
            group_intercepts=self.group_intercepts.copy(),
            individual_intercepts=[a.copy() for a in self.individual_intercepts],
            group_variances=self.group_variances.copy(),
            item_intercepts=self.item_intercepts.copy(),
            group_positions=self.group_positions.copy(),
            individual_positions=[z.copy() for z in self.individual_positions],
            item_positions=self.item_positions.copy(),
            psi_z=self.psi_z.copy(),
            psi_w=self.psi_w.copy(),
            residuals=[e.copy() for e in self.residuals] if keep else None,
        )

    def rotate(self, R: np.ndarray) -> "ModelState":
        """Right-multiply every position by R; covariances map to R^T Psi R."""
        state = self.copy()
        state.group_positions = self.group_positions @ R
        state.individual_positions = [z @ R for z in self.individual_positions]
        state.item_positions = self.item_positions @ R
        state.psi_z = R.T @ self.psi_z @ R
        state.psi_w = R.T @ self.psi_w @ R
        return state

    def check_indices(self, k: int, i: Optional[int] = None, j: Optional[int] = None) -> None:
        if not 0 <= k < self.K:
            raise BoundsError(f"group index {k} out of range [0, {self.K})")
        if i is not None and not 0 <= i < self.group_sizes[k]:
            raise BoundsError(f"respondent index {i} out of range [0, {self.group_sizes[k]}) in group {k}")
        if j is not None and not 0 <= j < self.p:
            raise BoundsError(f"item index {j} out of range [0, {self.p})")

    def check_shapes(self, data: ResponseDataset) -> None:
        """Raise ShapeError unless the state matches ``data`` exactly."""
        if self.K != data.K or self.p != data.p or self.group_sizes != data.group_sizes:
            raise ShapeError(
                "state dimensions do not match dataset",
                details={
                    "state": {"K": self.K, "p": self.p, "sizes": self.group_sizes},
                    "data": {"K": data.K, "p": data.p, "sizes": data.group_sizes},
                },
            )
        if self.residuals is not None:
            for k, g in enumerate(data.groups):
                if self.residuals[k].shape != g.Y.shape:
                    raise ShapeError(f"residual matrix of group {k} has shape {self.residuals[k].shape}")

    def validate(self, data: Optional[ResponseDataset] = None) -> None:
        """Check every invariant; raise ValidityError or ShapeError."""
        if np.any(self.group_variances <= 0):
            raise ValidityError("group variances must be positive")
        for name in ("psi_z", "psi_w"):
            if not is_spd(getattr(self, name)):
                raise ValidityError(f"{name} must be symmetric positive definite")
        D = self.D
        if self.group_positions.shape != (self.K, D) or self.psi_z.shape != (D, D):
            raise ShapeError("position arrays disagree on the latent dimension")
        for z, a in zip(self.individual_positions, self.individual_intercepts):
            if z.shape != (a.shape[0], D):
                raise ShapeError("individual positions disagree with individual intercepts")
        if data is not None:
            self.check_shapes(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "group_intercepts": self.group_intercepts.tolist(),
            "individual_intercepts": [a.tolist() for a in self.individual_intercepts],
            "group_variances": self.group_variances.tolist(),
            "item_intercepts": self.item_intercepts.tolist(),
            "group_positions": self.group_positions.tolist(),
            "individual_positions": [z.tolist() for z in self.individual_positions],
            "item_positions": self.item_positions.tolist(),
            "psi_z": self.psi_z.tolist(),
            "psi_w": self.psi_w.tolist(),
            "residuals": None if self.residuals is None else [e.tolist() for e in self.residuals],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ModelState":
        D = len(payload["psi_z"])
        sizes = [len(a) for a in payload["individual_intercepts"]]
        residuals = payload.get("residuals")
        return cls(
            group_intercepts=np.asarray(payload["group_intercepts"], dtype=float),
            individual_intercepts=[np.asarray(a, dtype=float) for a in payload["individual_intercepts"]],
            group_variances=np.asarray(payload["group_variances"], dtype=float),
            item_intercepts=np.asarray(payload["item_intercepts"], dtype=float),
            group_positions=np.asarray(payload["group_positions"], dtype=float).reshape(-1, D),
            individual_positions=[
                np.asarray(z, dtype=float).reshape(n, D) for z, n in zip(payload["individual_positions"], sizes)
            ],
            item_positions=np.asarray(payload["item_positions"], dtype=float).reshape(-1, D),
            psi_z=np.asarray(payload["psi_z"], dtype=float),
            psi_w=np.asarray(payload["psi_w"], dtype=float),
            residuals=None
            if residuals is None
            else [np.asarray(e, dtype=float).reshape(n, -1) for e, n in zip(residuals, sizes)],
        )


# ============== Chains ==============

GROUP_BLOCK = "group"
ITEM_BLOCK = "item"
RESIDUAL_BLOCK = "residual"


@dataclass
class AcceptanceLog:
    """Accepted/proposed counts per block and index, split by phase."""
    accepted: Dict[str, np.ndarray]
    proposed: Dict[str, np.ndarray]
    burn_in_accepted: Dict[str, np.ndarray]
    burn_in_proposed: Dict[str, np.ndarray]

    @classmethod
    def empty(cls, K: int, p: int) -> "AcceptanceLog":
        def counts():
            return {
                GROUP_BLOCK: np.zeros(K, dtype=np.int64),
                ITEM_BLOCK: np.zeros(p, dtype=np.int64),
                RESIDUAL_BLOCK: np.zeros(K, dtype=np.int64),
            }
        return cls(counts(), counts(), counts(), counts())

    def record(self, block: str, accepted: np.ndarray, proposed: np.ndarray, burn_in: bool) -> None:
        acc = self.burn_in_accepted if burn_in else self.accepted
        prop = self.burn_in_proposed if burn_in else self.proposed
        acc[block] += accepted
        prop[block] += proposed

    def rates(self, burn_in: bool = False) -> Dict[str, float]:
        """Pooled acceptance rate per block; nan when nothing was proposed."""
        acc = self.burn_in_accepted if burn_in else self.accepted
        prop = self.burn_in_proposed if burn_in else self.proposed
        out = {}
        for block in (GROUP_BLOCK, ITEM_BLOCK, RESIDUAL_BLOCK):
            total = int(prop[block].sum())
            out[block] = float(acc[block].sum()) / total if total else float("nan")
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accepted": {b: v.tolist() for b, v in self.accepted.items()},
            "proposed": {b: v.tolist() for b, v in self.proposed.items()},
            "burn_in_accepted": {b: v.tolist() for b, v in self.burn_in_accepted.items()},
            "burn_in_proposed": {b: v.tolist() for b, v in self.burn_in_proposed.items()},
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "AcceptanceLog":
        def arrays(section):
            return {b: np.asarray(v, dtype=np.int64) for b, v in payload[section].items()}
        return cls(arrays("accepted"), arrays("proposed"), arrays("burn_in_accepted"), arrays("burn_in_proposed"))


@dataclass
class PosteriorChain:
    """Thinned post-burn-in samples plus sampler bookkeeping."""
    samples: List[ModelState]
    acceptance_log: AcceptanceLog
    adaptation_trace: List[Dict[str, Any]]
    config: ChainConfig
    hyperparameters: Hyperparameters
    data_fingerprint: str
    fitted_probability_mean: Optional[List[np.ndarray]] = None
    log_posterior_trace: List[float] = field(default_factory=list)
    group_sizes: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class ParameterSummary:
    """Posterior mean, sd and equal-tailed interval of one array-valued parameter."""
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_draws(cls, draws: np.ndarray, level: float = 0.95) -> "ParameterSummary":
        tail = (1.0 - level) / 2.0
        return cls(
            mean=draws.mean(axis=0),
            sd=draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1:]),
            lower=np.quantile(draws, tail, axis=0),
            upper=np.quantile(draws, 1.0 - tail, axis=0),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "sd": self.sd, "lower": self.lower, "upper": self.upper}


@dataclass
class AlignedChain:
    """Chain with every sample rotated onto a common reference."""
    reference: np.ndarray
    rotations: List[np.ndarray]
    samples: List[ModelState]
    summary: Dict[str, ParameterSummary]
    degenerate: List[bool]
    align_on: AlignOn
    source: PosteriorChain

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class InteractionSummary:
    """Interaction-adjusted intercepts and mean map coordinates."""
    alpha_tilde: ParameterSummary
    beta_tilde: ParameterSummary
    alpha_tilde_draws: np.ndarray                # (S, K)
    beta_tilde_draws: np.ndarray                 # (S, p)
    group_positions: np.ndarray                  # (K, D)
    individual_positions: List[np.ndarray]
    item_positions: np.ndarray                   # (p, D)

    @staticmethod
    def polar(positions: np.ndarray):
        magnitude = np.linalg.norm(positions, axis=1)
        angle = np.arctan2(positions[:, 1], positions[:, 0]) if positions.shape[1] >= 2 else np.where(
            positions[:, 0] >= 0, 0.0, np.pi
        )
        return magnitude, angle

    @property
    def group_magnitudes(self) -> np.ndarray:
        return self.polar(self.group_positions)[0]

    @property
    def group_angles(self) -> np.ndarray:
        return self.polar(self.group_positions)[1]

    @property
    def item_magnitudes(self) -> np.ndarray:
        return self.polar(self.item_positions)[0]

    @property
    def item_angles(self) -> np.ndarray:
        return self.polar(self.item_positions)[1]


# ============== Reports ==============

@dataclass
class ClusterResult:
    """Spectral clustering of item directions for one k."""
    k: int
    labels: np.ndarray                  # (p,), -1 marks unclustered items
    silhouette: Optional[float]
    dbi: float
    affinity: np.ndarray
    degenerate: bool = False
    dbi_infinite: bool = False
    excluded: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "labels": self.labels,
            "silhouette": self.silhouette,
            "dbi": None if self.dbi_infinite else self.dbi,
            "dbi_infinite": self.dbi_infinite,
            "degenerate": self.degenerate,
            "excluded": self.excluded,
        }


@dataclass
class ClusterSelection:
    """Clusterings over a range of k with the silhouette-recommended k."""
    results: List[ClusterResult]
    recommended_k: int

    def result(self, k: int) -> ClusterResult:
        for r in self.results:
            if r.k == k:
                return r
        raise KeyError(k)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "recommended_k": self.recommended_k,
            "curves": [
                {"k": r.k, "silhouette": r.silhouette, "dbi": None if r.dbi_infinite else r.dbi, "degenerate": r.degenerate}
                for r in self.results
            ],
        }


@dataclass
class PpcReport:
    """Observed vs replicated endorsement rates."""
    S: int
    mode: PpcMode
    item_observed: np.ndarray          # (p,)
    item_replicated: np.ndarray        # (S, p)
    group_observed: np.ndarray         # (K,)
    group_replicated: np.ndarray       # (S, K)
    intercept_coverage: Optional[np.ndarray] = None  # (K,)
    level: float = 0.95

    def _interval(self, replicated: np.ndarray) -> np.ndarray:
        tail = (1.0 - self.level) / 2.0
        return np.quantile(replicated, [tail, 1.0 - tail], axis=0)

    @property
    def item_coverage(self) -> np.ndarray:
        lo, hi = self._interval(self.item_replicated)
        return (self.item_observed >= lo) & (self.item_observed <= hi)

    @property
    def group_coverage(self) -> np.ndarray:
        lo, hi = self._interval(self.group_replicated)
        return (self.group_observed >= lo) & (self.group_observed <= hi)

    def coverage_rate(self) -> Dict[str, float]:
        return {"item": float(np.mean(self.item_coverage)), "group": float(np.mean(self.group_coverage))}

    def rows(self, item_ids: List[str], group_ids: List[str]) -> List[Dict[str, Any]]:
        """Plot-ready rows: observed value plus replicate quantiles per statistic."""
        out = []
        for kind, ids, observed, replicated, covered in (
            ("item", item_ids, self.item_observed, self.item_replicated, self.item_coverage),
            ("group", group_ids, self.group_observed, self.group_replicated, self.group_coverage),
        ):
            q = np.quantile(replicated, [0.025, 0.25, 0.5, 0.75, 0.975], axis=0)
            for idx, entity in enumerate(ids):
                out.append({
                    "statistic": f"{kind}_rate",
                    "entity_id": entity,
                    "observed": float(observed[idx]),
                    "q025": float(q[0, idx]),
                    "q25": float(q[1, idx]),
                    "q50": float(q[2, idx]),
                    "q75": float(q[3, idx]),
                    "q975": float(q[4, idx]),
                    "covered": bool(covered[idx]),
                })
        return out


@dataclass
class MetricsReport:
    """Confusion metrics at the F1-maximizing threshold plus AUC."""
    specificity: float
    sensitivity: float
    accuracy: float
    precision: float
    f1: float
    auc: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_group: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "f1": self.f1,
            "auc": self.auc,
            "threshold": self.threshold,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "per_group": self.per_group,
        }


@dataclass
class DiagnosticsReport:
    """Per-quantity ESS, Geweke z and (multi-chain) split R-hat."""
    n_samples: int
    n_chains: int
    quantities: Dict[str, Dict[str, Optional[float]]]

    def worst(self) -> Dict[str, Optional[float]]:
        ess = [q["ess"] for q in self.quantities.values() if q["ess"] is not None]
        rhat = [q["rhat"] for q in self.quantities.values() if q.get("rhat") is not None]
        geweke = [abs(q["geweke_z"]) for q in self.quantities.values() if q["geweke_z"] is not None]
        return {
            "min_ess": min(ess) if ess else None,
            "max_rhat": max(rhat) if rhat else None,
            "max_abs_geweke_z": max(geweke) if geweke else None,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "n_chains": self.n_chains,
            "worst": self.worst(),
            "quantities": self.quantities,
        }
