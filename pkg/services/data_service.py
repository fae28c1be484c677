"""
HLSIRM - Data Service

Loads, recodes, saves and synthesizes hierarchical binary response data.
"""
import io
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from models.domain import GroupResponses, ModelState, ResponseDataset
from models.schemas import Hyperparameters, RecodingRule
from utils.errors import (
    ConfigurationError,
    DataFormatError,
    DuplicateRecordError,
    ResponseValueError,
    ShapeError,
)
from utils.helpers import hash_parts, strip_banner
from utils.linalg import require_spd

logger = logging.getLogger(__name__)

ID_COLUMNS = ("group_id", "student_id")


# ============== Loading ==============

def _read_frame(path: Union[str, Path]) -> Tuple[List[str], pd.DataFrame]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    text = strip_banner(path.read_text(encoding="utf-8"))
    if not text.strip():
        raise DataFormatError(f"dataset file is empty: {path}")
    try:
        header = pd.read_csv(io.StringIO(text), header=None, nrows=1, dtype=str, keep_default_na=False)
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataFormatError(f"malformed CSV in {path}: {exc}") from exc
    columns = [c.strip() for c in header.iloc[0].tolist()]
    if len(columns) < 3 or tuple(columns[:2]) != ID_COLUMNS:
        raise DataFormatError(
            "header must name group_id, student_id, then at least one item column",
            details={"header": columns},
        )
    if len(set(columns)) != len(columns) or any(not c for c in columns):
        raise DataFormatError("header contains empty or duplicate column names", details={"header": columns})
    if frame.isna().any().any():
        raise DataFormatError("every row must have one field per header column")
    frame.columns = columns
    return columns[2:], frame


def _binary_cells(frame: pd.DataFrame, item_ids: List[str]) -> np.ndarray:
    tokens = frame[item_ids].apply(lambda col: col.str.strip())
    values = np.full(tokens.shape, np.nan)
    observed = tokens.to_numpy() != ""
    numeric = tokens.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = observed & ~np.isin(numeric, (0.0, 1.0))
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        raise ResponseValueError(
            f"cell ({row + 1}, {item_ids[col]}) is {tokens.iat[row, col]!r}; expected 0, 1 or empty",
            details={"row": row + 1, "item_id": item_ids[col]},
        )
    values[observed] = numeric[observed]
    return values


def _raw_cells(frame: pd.DataFrame, item_ids: List[str]) -> np.ndarray:
    tokens = frame[item_ids].apply(lambda col: col.str.strip())
    observed = tokens.to_numpy() != ""
    numeric = tokens.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = observed & ~(np.isfinite(numeric) & (numeric == np.round(numeric)))
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        raise ResponseValueError(
            f"cell ({row + 1}, {item_ids[col]}) is {tokens.iat[row, col]!r}; expected an integer level",
            details={"row": row + 1, "item_id": item_ids[col]},
        )
    return np.where(observed, numeric, np.nan)


def _group_rows(frame: pd.DataFrame, cells: np.ndarray, item_ids: List[str]) -> ResponseDataset:
    group_col = frame["group_id"].str.strip().tolist()
    student_col = frame["student_id"].str.strip().tolist()
    if any(not g for g in group_col) or any(not s for s in student_col):
        raise DataFormatError("group_id and student_id must be non-empty on every row")

    order: Dict[str, List[int]] = {}
    seen = set()
    for row, (g, s) in enumerate(zip(group_col, student_col)):
        if (g, s) in seen:
            raise DuplicateRecordError(
                f"duplicate record for group {g!r}, student {s!r}",
                details={"group_id": g, "student_id": s, "row": row + 1},
            )
        seen.add((g, s))
        order.setdefault(g, []).append(row)

    groups = [
        GroupResponses(
            group_id=g,
            respondent_ids=[student_col[r] for r in rows],
            Y=cells[rows, :],
        )
        for g, rows in order.items()
    ]
    return ResponseDataset(groups=groups, item_ids=list(item_ids))


def load_dataset(path: Union[str, Path], rules: Optional[List[RecodingRule]] = None) -> ResponseDataset:
    """
    Read a wide CSV (group_id, student_id, item columns).

    Rows are grouped by first appearance of their group_id and keep file order
    within a group. Empty cells are missing. With ``rules`` the cells are raw
    Likert levels and are recoded to binary.
    """
    item_ids, frame = _read_frame(path)
    if rules:
        raw = pd.concat(
            [
                frame[list(ID_COLUMNS)].reset_index(drop=True),
                pd.DataFrame(_raw_cells(frame, item_ids), columns=item_ids),
            ],
            axis=1,
        )
        dataset = recode(raw, rules)
    else:
        dataset = _group_rows(frame, _binary_cells(frame, item_ids), item_ids)

    missing = dataset.N * dataset.p - dataset.observed_cells()
    logger.info(
        "Loaded dataset %s: K=%d N=%d p=%d missing=%d", path, dataset.K, dataset.N, dataset.p, missing
    )
    return dataset


def save_dataset(dataset: ResponseDataset, path: Union[str, Path], banner: Optional[str] = None) -> None:
    """Write ``dataset`` as wide CSV; missing cells are empty strings."""
    rows = []
    for g in dataset.groups:
        cells = np.where(np.isnan(g.Y), -1, g.Y).astype(int)
        for sid, row in zip(g.respondent_ids, cells):
            rows.append([g.group_id, sid] + ["" if v < 0 else str(v) for v in row])
    frame = pd.DataFrame(rows, columns=list(ID_COLUMNS) + list(dataset.item_ids))
    body = frame.to_csv(index=False, lineterminator="\n")
    Path(path).write_text((banner + "\n" if banner else "") + body, encoding="utf-8")


def _parse_scalar(token: str) -> Any:
    token = token.strip()
    if token == "":
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        value = float(token)
    except ValueError:
        return token
    return value if math.isfinite(value) else token


def load_covariates(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    """Group-level covariates from a CSV keyed by ``group_id``."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"covariates file not found: {path}")
    frame = pd.read_csv(io.StringIO(strip_banner(path.read_text(encoding="utf-8"))), dtype=str, keep_default_na=False)
    if "group_id" not in frame.columns:
        raise DataFormatError("covariates file must have a group_id column", details={"header": list(frame.columns)})
    covariates: Dict[str, Dict[str, Any]] = {}
    for record in frame.to_dict(orient="records"):
        gid = record.pop("group_id").strip()
        if gid in covariates:
            raise DuplicateRecordError(f"duplicate covariate row for group {gid!r}")
        covariates[gid] = {key: _parse_scalar(value) for key, value in record.items()}
    return covariates


def attach_covariates(dataset: ResponseDataset, covariates: Dict[str, Dict[str, Any]]) -> ResponseDataset:
    unknown = sorted(set(covariates) - set(dataset.group_ids))
    if unknown:
        raise ConfigurationError("covariates reference unknown groups", details={"group_ids": unknown})
    return replace(dataset, covariates=covariates)


# ============== Recoding ==============

def rules_for_items(item_ids: Sequence[str], scale_max: int, cutpoint: int) -> List[RecodingRule]:
    """One identical rule per item of a domain."""
    return [RecodingRule(item_id=i, scale_max=scale_max, vulnerability_cutpoint=cutpoint) for i in item_ids]


def recode_matrix(raw: np.ndarray, item_ids: Sequence[str], rules: List[RecodingRule]) -> np.ndarray:
    """Binary matrix: 1 iff raw >= cutpoint; nan passes through."""
    by_item = {rule.item_id: rule for rule in rules}
    raw = np.asarray(raw, dtype=float)
    out = np.full(raw.shape, np.nan)
    for col, item_id in enumerate(item_ids):
        rule = by_item.get(item_id)
        if rule is None:
            raise ConfigurationError(f"no recoding rule for item {item_id!r}", details={"item_id": item_id})
        column = raw[:, col]
        observed = ~np.isnan(column)
        levels = column[observed]
        if np.any((levels < 1) | (levels > rule.scale_max) | (levels != np.round(levels))):
            raise ResponseValueError(
                f"item {item_id!r} has raw values outside 1..{rule.scale_max}",
                details={"item_id": item_id, "scale_max": rule.scale_max},
            )
        out[observed, col] = (levels >= rule.vulnerability_cutpoint).astype(float)
    return out


def recode(raw: pd.DataFrame, rules: List[RecodingRule]) -> ResponseDataset:
    """
    Recode a wide frame of raw Likert levels into a ResponseDataset.

    ``raw`` has columns group_id, student_id and one column per item holding
    integer levels, with nan for missing answers.
    """
    item_ids = [c for c in raw.columns if c not in ID_COLUMNS]
    cells = recode_matrix(raw[item_ids].to_numpy(dtype=float), item_ids, rules)
    frame = raw[list(ID_COLUMNS)].astype(str)
    return _group_rows(frame, cells, item_ids)


# ============== Synthesis ==============

def _padded_ids(prefix: str, count: int) -> List[str]:
    width = max(2, len(str(count)))
    return [f"{prefix}{i + 1:0{width}d}" for i in range(count)]


def _mvn_rows(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, n: int) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    return mean + rng.standard_normal((n, cov.shape[0])) @ chol.T


def _invwishart(rng: np.random.Generator, df: float, scale: np.ndarray) -> np.ndarray:
    D = scale.shape[0]
    return np.asarray(stats.invwishart.rvs(df=df, scale=scale, random_state=rng), dtype=float).reshape(D, D)


def draw_from_prior(
    hp: Hyperparameters,
    group_sizes: Sequence[int],
    p: int,
    rng: np.random.Generator,
) -> ModelState:
    """Forward-sample every parameter from the prior stack."""
    K = len(group_sizes)
    psi_z = _invwishart(rng, hp.nu_z, hp.S_z_mat)
    psi_w = _invwishart(rng, hp.nu_w, hp.S_w_mat)
    variances = np.atleast_1d(stats.invgamma.rvs(hp.a_sigma, scale=hp.b_sigma, size=K, random_state=rng))
    group_intercepts = rng.normal(hp.alpha0, hp.sigma_alpha, size=K)
    group_positions = _mvn_rows(rng, hp.z0_vec, psi_z / hp.kappa0, K)
    individual_intercepts = [
        rng.normal(group_intercepts[k], math.sqrt(variances[k]), size=n) for k, n in enumerate(group_sizes)
    ]
    individual_positions = [_mvn_rows(rng, group_positions[k], psi_z, n) for k, n in enumerate(group_sizes)]
    item_intercepts = rng.normal(hp.beta0, hp.tau, size=p)
    item_positions = _mvn_rows(rng, hp.w0_vec, psi_w, p)
    residuals = [rng.normal(0.0, 1.0 / math.sqrt(hp.phi), size=(n, p)) for n in group_sizes]
    return ModelState(
        group_intercepts=group_intercepts,
        individual_intercepts=individual_intercepts,
        group_variances=variances.astype(float),
        item_intercepts=item_intercepts,
        group_positions=group_positions,
        individual_positions=individual_positions,
        item_positions=item_positions,
        psi_z=psi_z,
        psi_w=psi_w,
        residuals=residuals,
    )


def cone_labels(p: int, item_cones: int) -> np.ndarray:
    """Cone membership used by ``separated_truth``: item j sits in cone j mod C."""
    return np.arange(p) % item_cones


def separated_truth(
    hp: Hyperparameters,
    group_sizes: Sequence[int],
    p: int,
    seed: int,
    group_magnitude: float = 1.5,
    item_cones: Optional[int] = None,
    cone_half_angle_deg: float = 10.0,
) -> ModelState:
    """
    Prior draw with a designed geometry.

    Group vectors sit at evenly spaced angles with a fixed magnitude; with
    ``item_cones`` the item directions fall uniformly inside evenly spaced
    cones while keeping their prior magnitudes.
    """
    rng = np.random.default_rng(seed)
    state = draw_from_prior(hp, group_sizes, p, rng)
    K, D = len(group_sizes), hp.D

    angles = 2.0 * np.pi * np.arange(K) / K
    design = np.zeros((K, D))
    design[:, 0] = group_magnitude * np.cos(angles)
    if D >= 2:
        design[:, 1] = group_magnitude * np.sin(angles)
    state.group_positions = design
    state.individual_positions = [
        _mvn_rows(rng, design[k], state.psi_z, n) for k, n in enumerate(group_sizes)
    ]

    if item_cones is not None:
        if D < 2:
            raise ConfigurationError("item cones need a latent dimension of at least 2")
        centers = 2.0 * np.pi * np.arange(item_cones) / item_cones + np.pi / item_cones
        half = np.deg2rad(cone_half_angle_deg)
        theta = centers[cone_labels(p, item_cones)] + rng.uniform(-half, half, size=p)
        radius = np.linalg.norm(state.item_positions, axis=1)
        positions = np.zeros((p, D))
        positions[:, 0] = radius * np.cos(theta)
        positions[:, 1] = radius * np.sin(theta)
        state.item_positions = positions
    return state


def simulate_dataset(
    truth: Union[ModelState, Hyperparameters],
    seed: int,
    group_sizes: Optional[Sequence[int]] = None,
    p: Optional[int] = None,
    phi: Optional[float] = None,
    suppress_residuals: bool = False,
) -> Tuple[ResponseDataset, ModelState]:
    """
    Forward-simulate a dataset and return it with the generating state.

    With Hyperparameters every parameter is first drawn from the prior; with
    a ModelState the sizes come from the state. Residuals are always drawn
    fresh from N(0, 1/phi) unless suppressed, in which case they are zero.
    """
    rng = np.random.default_rng(seed)
    if isinstance(truth, Hyperparameters):
        if group_sizes is None or p is None:
            raise ShapeError("group_sizes and p are required when simulating from hyperparameters")
        if len(group_sizes) == 0 or any(n < 1 for n in group_sizes) or p < 1:
            raise ShapeError("group sizes and item count must be positive")
        state = draw_from_prior(truth, group_sizes, p, rng)
        phi = truth.phi if phi is None else phi
    else:
        require_spd(truth.psi_z, "psi_z")
        require_spd(truth.psi_w, "psi_w")
        truth.validate()
        if group_sizes is not None and list(group_sizes) != truth.group_sizes:
            raise ShapeError("group_sizes disagree with the supplied truth")
        if p is not None and p != truth.p:
            raise ShapeError("p disagrees with the supplied truth")
        state = truth.copy()
        phi = 1.0 if phi is None else phi

    sizes = state.group_sizes
    if suppress_residuals:
        state.residuals = [np.zeros((n, state.p)) for n in sizes]
    else:
        state.residuals = [rng.normal(0.0, 1.0 / math.sqrt(phi), size=(n, state.p)) for n in sizes]

    group_ids = _padded_ids("G", len(sizes))
    item_ids = _padded_ids("I", state.p)
    groups = []
    for k, n in enumerate(sizes):
        eta = (
            state.individual_intercepts[k][:, None]
            + state.item_intercepts[None, :]
            + state.individual_positions[k] @ state.item_positions.T
            + state.residuals[k]
        )
        Y = (rng.random((n, state.p)) < expit(eta)).astype(float)
        groups.append(GroupResponses(group_id=group_ids[k], respondent_ids=_padded_ids("S", n), Y=Y))

    dataset = ResponseDataset(groups=groups, item_ids=item_ids)
    logger.info("Simulated dataset: K=%d N=%d p=%d", dataset.K, dataset.N, dataset.p)
    return dataset, state


def dataset_fingerprint(dataset: ResponseDataset) -> str:
    """SHA-256 over ids and cell values; missing cells hash as -1."""
    parts = [("\x1f".join(dataset.item_ids)).encode("utf-8")]
    for g in dataset.groups:
        parts.append(g.group_id.encode("utf-8"))
        parts.append(("\x1f".join(g.respondent_ids)).encode("utf-8"))
        cells = np.where(np.isnan(g.Y), -1.0, g.Y).astype("<f8")
        parts.append(np.ascontiguousarray(cells).tobytes())
    return hash_parts(parts)
