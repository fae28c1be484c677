"""
HLSIRM - MCMC Sampler

Metropolis-within-Gibbs: one joint MH decision per group block, joint
(beta_j, w_j) item moves, element-wise residual moves, and conjugate
updates for the variance components. Proposal scales adapt during burn-in
only and are frozen afterwards.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.special import expit, logit
from tqdm import tqdm

import storage
from config import settings
from models.domain import (
    GROUP_BLOCK,
    ITEM_BLOCK,
    RESIDUAL_BLOCK,
    AcceptanceLog,
    ModelState,
    PosteriorChain,
    ResponseDataset,
)
from models.schemas import ChainConfig, Hyperparameters, ProposalBlock
from services.data_service import dataset_fingerprint
from services.likelihood import (
    cell_log_likelihood,
    group_eta,
    group_log_target,
    item_log_likelihood,
    item_prior_each,
    log_posterior,
)
from utils.errors import NumericalError, ShapeError
from utils.linalg import is_spd, scatter

logger = logging.getLogger(__name__)


# ============== MH Kernels ==============

def block_size(n: int, D: int) -> int:
    """Coordinates in a group block: alpha_(k), n alpha_i, z_(k), n z_i."""
    return 1 + n + D + n * D


def block_proposal_sd(scales: Union[Tuple[float, float], np.ndarray], n: int, D: int) -> np.ndarray:
    """
    Per-coordinate proposal sd for a block of n respondents.

    A pair is read as (intercept scale, position scale) shared by the
    intercept and position coordinates; an array gives one sd per
    coordinate in block order.
    """
    scales = np.asarray(scales, dtype=float)
    size = block_size(n, D)
    if scales.shape == (2,):
        return np.concatenate([np.full(1 + n, scales[0]), np.full(D + n * D, scales[1])])
    if scales.shape != (size,):
        raise ShapeError(f"group block of {n} respondents needs 2 or {size} scales, got shape {scales.shape}")
    return scales


def group_block_precision(state: ModelState, data: ResponseDataset, hp: Hyperparameters, k: int) -> np.ndarray:
    """
    Diagonal of the expected information of group k's block at ``state``,
    conditional on everything outside the block.
    """
    state.check_indices(k)
    n, D = state.individual_positions[k].shape
    observed = ~np.isnan(data.groups[k].Y)
    prob = expit(group_eta(state, k))
    info = np.where(observed, prob * (1.0 - prob), 0.0)
    psi_inv = np.diag(np.linalg.inv(state.psi_z))
    sigma2 = state.group_variances[k]

    group_intercept = 1.0 / hp.sigma_alpha ** 2 + n / sigma2
    intercepts = info.sum(axis=1) + 1.0 / sigma2
    group_position = (hp.kappa0 + n) * psi_inv
    positions = info @ (state.item_positions ** 2) + psi_inv[None, :]
    return np.concatenate([[group_intercept], intercepts, group_position, positions.ravel()])


def update_group_block(
    state: ModelState,
    data: ResponseDataset,
    hp: Hyperparameters,
    k: int,
    scales: Union[Tuple[float, float], np.ndarray],
    rng: np.random.Generator,
) -> Tuple[ModelState, bool]:
    """
    Jointly perturb alpha_(k), all alpha_i(k), z_(k) and all z_i(k); accept once.

    ``scales`` is either (intercept scale, position scale) or one sd per
    block coordinate (see ``block_proposal_sd``). Only the slots of group k
    are written, so blocks of different groups may run concurrently.
    """
    state.check_indices(k)
    n, D = state.individual_positions[k].shape
    sd = block_proposal_sd(scales, n, D)
    current = group_log_target(state, data, hp, k)

    saved = (
        state.group_intercepts[k],
        state.individual_intercepts[k],
        state.group_positions[k].copy(),
        state.individual_positions[k],
    )
    step = sd * rng.standard_normal(sd.size)
    state.group_intercepts[k] = saved[0] + step[0]
    state.individual_intercepts[k] = saved[1] + step[1 : 1 + n]
    state.group_positions[k] = saved[2] + step[1 + n : 1 + n + D]
    state.individual_positions[k] = saved[3] + step[1 + n + D :].reshape(n, D)

    proposed = group_log_target(state, data, hp, k)
    accepted = bool(math.log(rng.random()) < proposed - current)
    if not accepted:
        state.group_intercepts[k] = saved[0]
        state.individual_intercepts[k] = saved[1]
        state.group_positions[k] = saved[2]
        state.individual_positions[k] = saved[3]
    return state, accepted


def update_items(
    state: ModelState,
    data: ResponseDataset,
    hp: Hyperparameters,
    scales: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[ModelState, np.ndarray]:
    """
    Propose every (beta_j, w_j) at once and accept each item independently.

    Items are conditionally independent given the respondents, so this is
    the same kernel as a sweep of ``update_item`` calls.
    """
    p, D = state.item_positions.shape
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (p,))
    current = item_log_likelihood(state, data) + item_prior_each(
        state.item_intercepts, state.item_positions, hp, state.psi_w
    )

    beta, W = state.item_intercepts, state.item_positions
    step = scales[:, None] * rng.standard_normal((p, 1 + D))
    state.item_intercepts = beta + step[:, 0]
    state.item_positions = W + step[:, 1:]
    proposed = item_log_likelihood(state, data) + item_prior_each(
        state.item_intercepts, state.item_positions, hp, state.psi_w
    )

    accepted = np.log(rng.random(p)) < proposed - current
    state.item_intercepts = np.where(accepted, state.item_intercepts, beta)
    state.item_positions = np.where(accepted[:, None], state.item_positions, W)
    return state, accepted


def update_item(
    state: ModelState,
    data: ResponseDataset,
    hp: Hyperparameters,
    j: int,
    scale: float,
    rng: np.random.Generator,
) -> Tuple[ModelState, bool]:
    """Joint random-walk MH move on (beta_j, w_j) for a single item."""
    state.check_indices(0, j=j)
    D = state.D

    def target() -> float:
        total = 0.0
        for k, g in enumerate(data.groups):
            eta = (
                state.individual_intercepts[k]
                + state.item_intercepts[j]
                + state.individual_positions[k] @ state.item_positions[j]
            )
            if state.residuals is not None:
                eta = eta + state.residuals[k][:, j]
            total += float(np.sum(cell_log_likelihood(g.Y[:, j], eta)))
        prior = item_prior_each(
            state.item_intercepts[j : j + 1], state.item_positions[j : j + 1], hp, state.psi_w
        )
        return total + float(prior[0])

    current = target()
    beta, w = state.item_intercepts[j], state.item_positions[j].copy()
    step = scale * rng.standard_normal(1 + D)
    state.item_intercepts[j] = beta + step[0]
    state.item_positions[j] = w + step[1:]
    accepted = bool(math.log(rng.random()) < target() - current)
    if not accepted:
        state.item_intercepts[j] = beta
        state.item_positions[j] = w
    return state, accepted


def update_residuals(
    state: ModelState,
    data: ResponseDataset,
    hp: Hyperparameters,
    scales: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[ModelState, np.ndarray, np.ndarray]:
    """
    Element-wise random-walk MH on every eps_ij(k), group-major then row-major.

    Cells with missing responses are refreshed from N(0, 1/phi). Returns the
    state plus per-group accepted and proposed counts over observed cells.
    """
    K = state.K
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (K,))
    accepted = np.zeros(K, dtype=np.int64)
    proposed = np.zeros(K, dtype=np.int64)
    prior_sd = 1.0 / math.sqrt(hp.phi)

    for k, g in enumerate(data.groups):
        eps = state.residuals[k]
        candidate = eps + scales[k] * rng.standard_normal(eps.shape)
        log_u = np.log(rng.random(eps.shape))
        fresh = rng.normal(0.0, prior_sd, size=eps.shape)

        base = group_eta(state, k, include_residuals=False)
        log_ratio = (
            cell_log_likelihood(g.Y, base + candidate)
            - cell_log_likelihood(g.Y, base + eps)
            - 0.5 * hp.phi * (candidate * candidate - eps * eps)
        )
        observed = ~np.isnan(g.Y)
        take = observed & (log_u < log_ratio)
        state.residuals[k] = np.where(observed, np.where(take, candidate, eps), fresh)
        accepted[k] = int(take.sum())
        proposed[k] = int(observed.sum())
    return state, accepted, proposed


# ============== Gibbs Kernels ==============

def group_variance_posterior(state: ModelState, hp: Hyperparameters, k: int) -> Tuple[float, float]:
    """Inverse-gamma (shape, scale) of sigma^2_(k) given its respondents."""
    deviations = state.individual_intercepts[k] - state.group_intercepts[k]
    n = deviations.shape[0]
    return hp.a_sigma + 0.5 * n, hp.b_sigma + 0.5 * float(deviations @ deviations)


def gibbs_group_variance(
    state: ModelState, hp: Hyperparameters, k: int, rng: np.random.Generator
) -> ModelState:
    shape, scale = group_variance_posterior(state, hp, k)
    state.group_variances[k] = float(stats.invgamma.rvs(shape, scale=scale, random_state=rng))
    return state


def covariance_posteriors(
    state: ModelState, hp: Hyperparameters
) -> Tuple[Tuple[float, np.ndarray], Tuple[float, np.ndarray]]:
    """Inverse-Wishart (df, scale) pairs for Psi_z and Psi_w."""
    z0, w0 = hp.z0_vec, hp.w0_vec
    S_z = hp.S_z_mat.copy()
    for k in range(state.K):
        S_z += scatter(state.individual_positions[k], state.group_positions[k])
    S_z += hp.kappa0 * scatter(state.group_positions, z0)
    S_w = hp.S_w_mat + scatter(state.item_positions, w0)
    df_z = hp.nu_z + sum(state.group_sizes) + state.K
    df_w = hp.nu_w + state.p
    return (df_z, 0.5 * (S_z + S_z.T)), (df_w, 0.5 * (S_w + S_w.T))


def gibbs_covariances(state: ModelState, hp: Hyperparameters, rng: np.random.Generator) -> ModelState:
    """Draw Psi_z then Psi_w from their conjugate inverse-Wishart conditionals."""
    D = state.D
    (df_z, S_z), (df_w, S_w) = covariance_posteriors(state, hp)
    for name, df, scale in (("psi_z", df_z, S_z), ("psi_w", df_w, S_w)):
        if not is_spd(scale):
            raise NumericalError(
                f"accumulated inverse-Wishart scale for {name} is not positive definite",
                details={"parameter": name, "df": df, "scale": scale.tolist(), "state": state.to_dict()},
            )
        draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
        setattr(state, name, np.asarray(draw, dtype=float).reshape(D, D))
    return state


# ============== Adaptation ==============

@dataclass
class AdaptationState:
    """
    Current proposal scales per block and index.

    Group block coordinate c of group k is proposed with sd
    ``exp(group_log_lambda[k]) * multiplier_c / sqrt(group_precision[k][c])``.
    The precision is the block's diagonal expected information, smoothed
    over burn-in; the multiplier is the configured intercept or position
    scale; lambda follows Robbins-Monro toward the target acceptance.
    """
    group_sizes: List[int]
    D: int
    group_log_lambda: np.ndarray
    group_precision: List[np.ndarray]
    multipliers: Tuple[float, float]
    item: np.ndarray
    residual: np.ndarray

    @classmethod
    def initial(cls, group_sizes: Sequence[int], p: int, D: int, config: ChainConfig) -> "AdaptationState":
        scales = config.proposal_scales
        sizes = [int(n) for n in group_sizes]
        return cls(
            group_sizes=sizes,
            D=D,
            group_log_lambda=np.array([math.log(2.38 / math.sqrt(block_size(n, D))) for n in sizes]),
            group_precision=[np.ones(block_size(n, D)) for n in sizes],
            multipliers=(scales[ProposalBlock.GROUP_INTERCEPT], scales[ProposalBlock.GROUP_POSITION]),
            item=np.full(p, scales[ProposalBlock.ITEM]),
            residual=np.full(len(sizes), scales[ProposalBlock.RESIDUAL]),
        )

    def observe_groups(
        self, state: ModelState, data: ResponseDataset, hp: Hyperparameters, weight: float = 1.0
    ) -> None:
        """Blend the current block information into the running precision."""
        for k in range(len(self.group_sizes)):
            fresh = group_block_precision(state, data, hp, k)
            self.group_precision[k] = (1.0 - weight) * self.group_precision[k] + weight * fresh

    def adapt(
        self,
        t: int,
        group_accepted: np.ndarray,
        item_accepted: np.ndarray,
        residual_rate: np.ndarray,
        config: ChainConfig,
    ) -> None:
        """Robbins-Monro step on the log scale toward the target rates."""
        gamma = t ** (-config.adapt_decay)
        self.group_log_lambda = self.group_log_lambda + gamma * (group_accepted.astype(float) - config.target_acceptance)
        self.item = self.item * np.exp(gamma * (item_accepted.astype(float) - config.target_acceptance))
        defined = ~np.isnan(residual_rate)
        residual_step = np.exp(gamma * (np.where(defined, residual_rate, config.residual_target) - config.residual_target))
        self.residual = self.residual * residual_step

    def group_scales(self, k: int) -> np.ndarray:
        n = self.group_sizes[k]
        intercept, position = self.multipliers
        multiplier = np.concatenate([np.full(1 + n, intercept), np.full(self.D + n * self.D, position)])
        return math.exp(self.group_log_lambda[k]) * multiplier / np.sqrt(self.group_precision[k])

    @property
    def group_intercept(self) -> np.ndarray:
        """Mean proposal sd over each group's intercept coordinates."""
        return np.array([self.group_scales(k)[: 1 + n].mean() for k, n in enumerate(self.group_sizes)])

    @property
    def group_position(self) -> np.ndarray:
        """Mean proposal sd over each group's position coordinates."""
        return np.array([self.group_scales(k)[1 + n :].mean() for k, n in enumerate(self.group_sizes)])

    def snapshot(self, t: int) -> Dict[str, Any]:
        return {
            "iteration": t,
            ProposalBlock.GROUP_INTERCEPT.value: self.group_intercept,
            ProposalBlock.GROUP_POSITION.value: self.group_position,
            ProposalBlock.ITEM.value: self.item.copy(),
            ProposalBlock.RESIDUAL.value: self.residual.copy(),
        }


def acceptance_rates(chain: PosteriorChain) -> Dict[str, float]:
    """Post-burn-in acceptance rate per block type."""
    return chain.acceptance_log.rates(burn_in=False)


# ============== Chain Runner ==============

class ChainRunner:
    """Runs one chain, with optional checkpointing and resume."""

    def __init__(
        self,
        data: ResponseDataset,
        hp: Hyperparameters,
        config: ChainConfig,
        seed: Optional[int] = None,
        threads: int = 1,
        checkpoint_path: Optional[Union[str, Path]] = None,
        progress: Optional[bool] = None,
    ):
        self.data = data
        self.hp = hp
        self.config = config
        self.seed = seed if seed is not None else (config.seed if config.seed is not None else settings.DEFAULT_SEED)
        self.threads = max(1, int(threads))
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.progress = settings.PROGRESS_BAR if progress is None else progress
        self.fingerprint = dataset_fingerprint(data)

    def initial_state(self, rng: np.random.Generator) -> ModelState:
        """
        Empirical-logit intercepts and a rank-D SVD start for the positions.

        Respondent and item intercepts come from smoothed row and column
        endorsement rates; positions from the leading singular vectors of the
        double-centered response matrix. Entities without observations start
        at their prior means. All positions get a small random jitter.
        """
        data, hp = self.data, self.hp
        D = hp.D
        state = ModelState.zeros(data.group_sizes, data.p, D)
        Y = np.vstack([g.Y for g in data.groups])
        observed = ~np.isnan(Y)
        filled = np.where(observed, Y, 0.0)

        def smoothed_rate(axis: int) -> Tuple[np.ndarray, np.ndarray]:
            counts = observed.sum(axis=axis)
            rates = np.clip((filled.sum(axis=axis) + 0.5) / (counts + 1.0), 0.05, 0.95)
            return rates, counts > 0

        row_rate, row_seen = smoothed_rate(1)
        col_rate, col_seen = smoothed_rate(0)
        item_logit = logit(col_rate)
        state.item_intercepts = np.where(col_seen, item_logit, hp.beta0)
        offset = item_logit[col_seen].mean() if col_seen.any() else 0.0
        alpha = np.where(row_seen, logit(row_rate) - offset, hp.alpha0)

        centered = np.where(observed, Y - row_rate[:, None] - col_rate[None, :] + col_rate.mean(), 0.0)
        U, s, Vt = np.linalg.svd(4.0 * centered, full_matrices=False)
        rank = min(D, s.size)
        Z = np.zeros((Y.shape[0], D))
        W = np.zeros((data.p, D))
        Z[:, :rank] = U[:, :rank] * np.sqrt(s[:rank])
        W[:, :rank] = Vt[:rank].T * np.sqrt(s[:rank])

        bounds = np.cumsum([0] + list(data.group_sizes))
        for k in range(data.K):
            rows = slice(bounds[k], bounds[k + 1])
            state.individual_intercepts[k] = alpha[rows].copy()
            state.group_intercepts[k] = float(alpha[rows].mean())
            state.group_variances[k] = max(float(alpha[rows].var()), 0.5)
            state.group_positions[k] = Z[rows].mean(axis=0) + 0.1 * rng.standard_normal(D)
            state.individual_positions[k] = Z[rows] + 0.1 * rng.standard_normal((bounds[k + 1] - bounds[k], D))
        state.item_positions = W + 0.1 * rng.standard_normal((data.p, D))
        return state

    def _fresh(self) -> Dict[str, Any]:
        rng = np.random.default_rng(self.seed)
        state = self.initial_state(rng)
        adaptation = AdaptationState.initial(self.data.group_sizes, self.data.p, self.hp.D, self.config)
        adaptation.observe_groups(state, self.data, self.hp)
        return {
            "iteration": 0,
            "state": state,
            "rng": rng,
            "adaptation": adaptation,
            "acceptance": AcceptanceLog.empty(self.data.K, self.data.p),
            "samples": [],
            "trace": [],
            "fitted_sum": [np.zeros(g.Y.shape) for g in self.data.groups],
            "log_posterior": [],
        }

    def _identity(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "hyperparameters": self.hp.model_dump(mode="json"),
            "data_fingerprint": self.fingerprint,
            "seed": self.seed,
            "threads": self.threads,
        }

    def _restore(self) -> Optional[Dict[str, Any]]:
        if self.checkpoint_path is None or not self.checkpoint_path.exists():
            return None
        payload = storage.load_checkpoint(self.checkpoint_path)
        if payload.get("identity") != self._identity():
            logger.warning("Checkpoint %s belongs to a different run; starting fresh", self.checkpoint_path)
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["rng_state"]
        payload["rng"] = rng
        logger.info("Resuming from checkpoint at iteration %d", payload["iteration"])
        return payload

    def _checkpoint(self, run: Dict[str, Any]) -> None:
        payload = {key: value for key, value in run.items() if key != "rng"}
        payload["rng_state"] = run["rng"].bit_generator.state
        payload["identity"] = self._identity()
        storage.save_checkpoint(self.checkpoint_path, payload)
        logger.info("Checkpoint written at iteration %d", run["iteration"])

    def _update_groups(
        self, state: ModelState, adaptation: AdaptationState, rng: np.random.Generator,
        pool: Optional[ThreadPoolExecutor], t: int,
    ) -> np.ndarray:
        K = self.data.K
        if pool is None:
            return np.array(
                [update_group_block(state, self.data, self.hp, k, adaptation.group_scales(k), rng)[1] for k in range(K)]
            )
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence([self.seed, t]).spawn(K)]
        results = pool.map(
            lambda k: update_group_block(state, self.data, self.hp, k, adaptation.group_scales(k), streams[k])[1],
            range(K),
        )
        return np.array(list(results))

    def run(self, resume: bool = True) -> PosteriorChain:
        config, data, hp = self.config, self.data, self.hp
        run = (self._restore() if resume else None) or self._fresh()
        state: ModelState = run["state"]
        rng: np.random.Generator = run["rng"]
        adaptation: AdaptationState = run["adaptation"]
        log: AcceptanceLog = run["acceptance"]
        ones_k = np.ones(data.K, dtype=np.int64)
        ones_p = np.ones(data.p, dtype=np.int64)

        pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        try:
            iterations = tqdm(
                range(run["iteration"] + 1, config.iterations + 1),
                initial=run["iteration"],
                total=config.iterations,
                desc="sampling",
                disable=not self.progress,
            )
            for t in iterations:
                burn_in = t <= config.burn_in

                group_acc = self._update_groups(state, adaptation, rng, pool, t)
                state, item_acc = update_items(state, data, hp, adaptation.item, rng)
                state, res_acc, res_prop = update_residuals(state, data, hp, adaptation.residual, rng)
                for k in range(data.K):
                    gibbs_group_variance(state, hp, k, rng)
                gibbs_covariances(state, hp, rng)

                log.record(GROUP_BLOCK, group_acc.astype(np.int64), ones_k, burn_in)
                log.record(ITEM_BLOCK, item_acc.astype(np.int64), ones_p, burn_in)
                log.record(RESIDUAL_BLOCK, res_acc, res_prop, burn_in)

                if burn_in and config.adapt:
                    with np.errstate(invalid="ignore", divide="ignore"):
                        residual_rate = np.where(res_prop > 0, res_acc / np.maximum(res_prop, 1), np.nan)
                    adaptation.adapt(t, group_acc, item_acc, residual_rate, config)
                    adaptation.observe_groups(state, data, hp, t ** (-config.adapt_decay))
                    logger.debug("Adapted scales at iteration %d: item mean %.4f", t, adaptation.item.mean())

                if t == config.burn_in:
                    logger.info("Burn-in complete at iteration %d: acceptance %s", t, log.rates(burn_in=True))

                if t % config.thin == 0:
                    run["trace"].append(adaptation.snapshot(t))

                if not burn_in and (t - config.burn_in) % config.thin == 0:
                    self._store(run, state, t)

                run["iteration"] = t
                if self.checkpoint_path and config.checkpoint_every and t % config.checkpoint_every == 0:
                    self._checkpoint(run)
        finally:
            if pool is not None:
                pool.shutdown()

        stored = len(run["samples"])
        fitted = [total / stored for total in run["fitted_sum"]] if stored else None
        logger.info("Chain finished: %d samples, acceptance %s", stored, log.rates())
        return PosteriorChain(
            samples=run["samples"],
            acceptance_log=log,
            adaptation_trace=run["trace"],
            config=config,
            hyperparameters=hp,
            data_fingerprint=self.fingerprint,
            fitted_probability_mean=fitted,
            log_posterior_trace=run["log_posterior"],
            group_sizes=data.group_sizes,
        )

    def _store(self, run: Dict[str, Any], state: ModelState, t: int) -> None:
        lp = log_posterior(state, self.data, self.hp)
        if not math.isfinite(lp):
            raise NumericalError(
                f"non-finite log posterior at iteration {t}",
                details={"iteration": t, "log_posterior": repr(lp), "state": state.to_dict()},
            )
        run["log_posterior"].append(lp)
        run["samples"].append(state.copy(include_residuals=self.config.store_residuals))
        for k in range(self.data.K):
            run["fitted_sum"][k] += expit(group_eta(state, k))


def run_chain(
    data: ResponseDataset,
    hp: Hyperparameters,
    config: ChainConfig,
    seed: Optional[int] = None,
    threads: int = 1,
    checkpoint_path: Optional[Union[str, Path]] = None,
    resume: bool = True,
    progress: Optional[bool] = None,
) -> PosteriorChain:
    """Run the sampler and return the thinned post-burn-in chain."""
    runner = ChainRunner(data, hp, config, seed=seed, threads=threads, checkpoint_path=checkpoint_path, progress=progress)
    return runner.run(resume=resume)
