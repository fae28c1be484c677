"""
HLSIRM - Pydantic Schemas for Configuration Documents
"""
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from utils.linalg import is_spd


# ============== Enums ==============

class ProposalBlock(str, Enum):
    GROUP_INTERCEPT = "group_intercept"
    GROUP_POSITION = "group_position"
    ITEM = "item"
    RESIDUAL = "residual"


class ReferencePolicy(str, Enum):
    LAST_SAMPLE = "last-sample"
    PILOT_MEAN = "pilot-mean"


class AlignOn(str, Enum):
    ITEMS_AND_GROUPS = "items-and-groups"
    ITEMS_ONLY = "items-only"


class PpcMode(str, Enum):
    HIERARCHICAL_REDRAW = "hierarchical-redraw"
    FULL_POSTERIOR = "full-posterior"


class FittedMode(str, Enum):
    IN_SAMPLE = "in-sample"
    OUT_OF_SAMPLE = "out-of-sample"


class ThresholdPolicy(str, Enum):
    MAX_F1 = "max-f1"


class TruthDesign(str, Enum):
    PRIOR = "prior"
    SEPARATED = "separated"


DEFAULT_PROPOSAL_SCALES: Dict[str, float] = {
    ProposalBlock.GROUP_INTERCEPT.value: 1.0,
    ProposalBlock.GROUP_POSITION.value: 1.0,
    ProposalBlock.ITEM.value: 0.2,
    ProposalBlock.RESIDUAL.value: 1.0,
}


class StrictModel(BaseModel):
    """Base schema: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


# ============== Model Schemas ==============

class Hyperparameters(StrictModel):
    """Fixed prior constants. Omitted vectors and matrices take D-dependent defaults."""
    D: int = Field(2, ge=1, description="Latent dimension")
    alpha0: float = Field(0.0, description="Mean of group intercepts")
    sigma_alpha: float = Field(2.5, gt=0, description="Sd of group intercepts")
    beta0: float = Field(0.0, description="Mean of item intercepts")
    tau: float = Field(2.5, gt=0, description="Sd of item intercepts")
    z0: Optional[List[float]] = Field(None, description="Mean of group positions (default zero)")
    w0: Optional[List[float]] = Field(None, description="Mean of item positions (default zero)")
    kappa0: float = Field(1.0, gt=0, description="Precision multiplier for group positions")
    S_z: Optional[List[List[float]]] = Field(None, description="Inv-Wishart scale for Psi_z (default 2I)")
    S_w: Optional[List[List[float]]] = Field(None, description="Inv-Wishart scale for Psi_w (default 2I)")
    nu_z: Optional[float] = Field(None, description="Inv-Wishart dof for Psi_z (default D+1)")
    nu_w: Optional[float] = Field(None, description="Inv-Wishart dof for Psi_w (default D+1)")
    a_sigma: float = Field(1.0, gt=0)
    b_sigma: float = Field(1.0, gt=0)
    phi: float = Field(1.0, gt=0, description="Residual precision")

    @model_validator(mode="after")
    def fill_defaults(self) -> "Hyperparameters":
        d = self.D
        if self.z0 is None:
            self.z0 = [0.0] * d
        if self.w0 is None:
            self.w0 = [0.0] * d
        if self.S_z is None:
            self.S_z = (2.0 * np.eye(d)).tolist()
        if self.S_w is None:
            self.S_w = (2.0 * np.eye(d)).tolist()
        if self.nu_z is None:
            self.nu_z = float(d + 1)
        if self.nu_w is None:
            self.nu_w = float(d + 1)
        for name in ("z0", "w0"):
            if len(getattr(self, name)) != d:
                raise ValueError(f"{name} must have length D={d}")
        for name in ("S_z", "S_w"):
            matrix = np.asarray(getattr(self, name), dtype=float)
            if matrix.shape != (d, d) or not is_spd(matrix):
                raise ValueError(f"{name} must be a symmetric positive definite {d}x{d} matrix")
        for name in ("nu_z", "nu_w"):
            if getattr(self, name) <= d - 1:
                raise ValueError(f"{name} must exceed D-1={d - 1}")
        return self

    @property
    def z0_vec(self) -> np.ndarray:
        return np.asarray(self.z0, dtype=float)

    @property
    def w0_vec(self) -> np.ndarray:
        return np.asarray(self.w0, dtype=float)

    @property
    def S_z_mat(self) -> np.ndarray:
        return np.asarray(self.S_z, dtype=float)

    @property
    def S_w_mat(self) -> np.ndarray:
        return np.asarray(self.S_w, dtype=float)


class ChainConfig(StrictModel):
    """MCMC run settings."""
    iterations: int = Field(30000, ge=1)
    burn_in: int = Field(5000, ge=0)
    thin: int = Field(5, ge=1)
    seed: Optional[int] = Field(None, description="Falls back to the run seed")
    proposal_scales: Dict[ProposalBlock, float] = Field(
        default_factory=lambda: {ProposalBlock(k): v for k, v in DEFAULT_PROPOSAL_SCALES.items()}
    )
    adapt: bool = True
    target_acceptance: float = Field(0.234, gt=0, lt=1)
    residual_target: float = Field(0.44, gt=0, lt=1)
    adapt_decay: float = Field(0.6, gt=0.5, le=1.0, description="Robbins-Monro step t^(-decay)")
    checkpoint_every: Optional[int] = Field(None, ge=1)
    store_residuals: bool = False

    @field_validator("proposal_scales")
    @classmethod
    def validate_scales(cls, v):
        merged = {ProposalBlock(k): val for k, val in DEFAULT_PROPOSAL_SCALES.items()}
        merged.update(v)
        for block, scale in merged.items():
            if not scale > 0:
                raise ValueError(f"proposal scale for {block.value} must be positive")
        return merged

    @model_validator(mode="after")
    def validate_burn_in(self) -> "ChainConfig":
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        return self

    @property
    def n_samples(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


class RecodingRule(StrictModel):
    """Likert-to-binary rule: raw >= cutpoint codes as vulnerable (1)."""
    item_id: str = Field(..., min_length=1)
    scale_max: int = Field(..., description="2 (binary format), 5 or 7")
    vulnerability_cutpoint: int

    @field_validator("scale_max")
    @classmethod
    def validate_scale(cls, v):
        if v not in (2, 5, 7):
            raise ValueError("scale_max must be 2, 5 or 7")
        return v

    @model_validator(mode="after")
    def validate_cutpoint(self) -> "RecodingRule":
        if not 1 < self.vulnerability_cutpoint <= self.scale_max:
            raise ValueError("vulnerability_cutpoint must satisfy 1 < cutpoint <= scale_max")
        return self


# ============== Run Config Sections ==============

class SimulateOptions(StrictModel):
    """Options for the ``simulate`` subcommand."""
    groups: int = Field(6, ge=1)
    respondents_per_group: int = Field(50, ge=1)
    group_sizes: Optional[List[int]] = Field(None, description="Overrides respondents_per_group")
    items: int = Field(30, ge=1)
    design: TruthDesign = TruthDesign.PRIOR
    group_magnitude: float = Field(1.5, gt=0)
    item_cones: Optional[int] = Field(None, ge=1)
    cone_half_angle_deg: float = Field(10.0, ge=0, lt=90)
    truth: Optional[str] = Field(None, description="Truth JSON to simulate from instead of drawing one")
    suppress_residuals: bool = False

    @field_validator("group_sizes")
    @classmethod
    def validate_sizes(cls, v):
        if v is not None and (len(v) == 0 or any(n < 1 for n in v)):
            raise ValueError("group_sizes must be a non-empty list of positive integers")
        return v

    def sizes(self) -> List[int]:
        if self.group_sizes is not None:
            return list(self.group_sizes)
        return [self.respondents_per_group] * self.groups


class FitOptions(StrictModel):
    """Options for the ``fit`` subcommand."""
    dataset: Optional[str] = Field(None, description="Defaults to <out>/dataset.csv")
    recoding: Optional[List[RecodingRule]] = None
    min_acceptance: float = Field(0.05, ge=0, le=1)
    max_acceptance: float = Field(0.7, ge=0, le=1)
    resume: bool = True


class AnalyzeOptions(StrictModel):
    """Options for the ``analyze`` subcommand."""
    dataset: Optional[str] = None
    chain: Optional[str] = None
    covariates: Optional[str] = None
    reference_policy: ReferencePolicy = ReferencePolicy.PILOT_MEAN
    align_on: AlignOn = AlignOn.ITEMS_AND_GROUPS
    k_min: int = Field(2, ge=2)
    k_max: int = Field(7, ge=2)
    kmeans_restarts: int = Field(20, ge=1)
    affinity_power: float = Field(8.0, gt=0)
    silhouette_tolerance: float = Field(0.02, ge=0, description="Silhouettes this close to the best count as ties")
    ppc_replicates: int = Field(200, ge=1)
    ppc_mode: PpcMode = PpcMode.HIERARCHICAL_REDRAW
    fitted_mode: FittedMode = FittedMode.IN_SAMPLE
    out_of_sample_draws: int = Field(64, ge=1)

    @model_validator(mode="after")
    def validate_k_range(self) -> "AnalyzeOptions":
        if self.k_min > self.k_max:
            raise ValueError("k_min must not exceed k_max")
        return self


class RunConfig(StrictModel):
    """The single self-describing document behind every subcommand."""
    seed: int = 20240101
    threads: int = Field(1, ge=1)
    out: str = "out"
    hyperparameters: Hyperparameters = Field(default_factory=Hyperparameters)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    simulate: SimulateOptions = Field(default_factory=SimulateOptions)
    fit: FitOptions = Field(default_factory=FitOptions)
    analyze: AnalyzeOptions = Field(default_factory=AnalyzeOptions)

    def chain_seed(self) -> int:
        return self.chain.seed if self.chain.seed is not None else self.seed
