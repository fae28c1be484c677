"""
HLSIRM - Linear predictor, likelihood and prior density tests
"""
import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from models.schemas import Hyperparameters
from services import likelihood
from tests.conftest import make_dataset, make_state
from utils.errors import BoundsError, ShapeError, ValidityError


def test_all_zero_predictor():
    state = make_state([1], 1)
    assert likelihood.linear_predictor(state, 0, 0, 0) == 0.0
    assert expit(0.0) == 0.5


def test_predictor_arithmetic():
    state = make_state(
        [1], 1,
        individual_intercepts=[np.array([0.5])],
        item_intercepts=np.array([-1.0]),
        individual_positions=[np.array([[1.0, 0.0]])],
        item_positions=np.array([[2.0, 0.0]]),
    )
    assert likelihood.linear_predictor(state, 0, 0, 0) == pytest.approx(1.5)


def test_orthogonal_vectors_do_not_interact():
    state = make_state(
        [1], 1,
        individual_positions=[np.array([[1.0, 1.0]])],
        item_positions=np.array([[-1.0, 1.0]]),
    )
    assert likelihood.linear_predictor(state, 0, 0, 0) == 0.0


def test_predictor_bounds():
    state = make_state([2], 3)
    with pytest.raises(BoundsError):
        likelihood.linear_predictor(state, 1, 0, 0)
    with pytest.raises(BoundsError):
        likelihood.linear_predictor(state, 0, 2, 0)
    with pytest.raises(BoundsError):
        likelihood.linear_predictor(state, 0, 0, 3)


@pytest.mark.parametrize("y", [0.0, 1.0])
def test_single_cell_at_zero(y):
    data = make_dataset([np.array([[y]])])
    assert likelihood.log_likelihood(make_state([1], 1), data) == pytest.approx(-0.693147, abs=1e-6)


def test_two_cells_match_probability_product():
    state = make_state(
        [2], 1,
        individual_intercepts=[np.array([0.7, -1.2])],
        item_intercepts=np.array([0.3]),
    )
    state.residuals = [np.array([[0.1], [-0.4]])]
    data = make_dataset([np.array([[1.0], [0.0]])])
    p1 = 1.0 / (1.0 + math.exp(-(0.7 + 0.3 + 0.1)))
    p2 = 1.0 / (1.0 + math.exp(-(-1.2 + 0.3 - 0.4)))
    assert likelihood.log_likelihood(state, data) == pytest.approx(math.log(p1 * (1.0 - p2)), rel=1e-12)


def test_missing_cells_contribute_nothing():
    state = make_state([2], 2, item_intercepts=np.array([3.0, -2.0]))
    full = make_dataset([np.array([[1.0, 0.0], [1.0, 1.0]])])
    partial = make_dataset([np.array([[1.0, np.nan], [np.nan, np.nan]])])
    expected = math.log(expit(3.0))
    assert likelihood.log_likelihood(state, partial) == pytest.approx(expected)
    assert likelihood.log_likelihood(state, full) < likelihood.log_likelihood(state, partial)


def test_extreme_predictor_stays_finite():
    state = make_state([1], 1, item_intercepts=np.array([800.0]))
    data = make_dataset([np.array([[0.0]])])
    value = likelihood.log_likelihood(state, data)
    assert np.isfinite(value) and value == pytest.approx(-800.0)


def test_dimension_mismatch():
    data = make_dataset([np.zeros((2, 3))])
    with pytest.raises(ShapeError):
        likelihood.log_likelihood(make_state([2], 4), data)


def test_prior_matches_independent_densities_in_one_dimension():
    hp = Hyperparameters(D=1)
    state = make_state([1], 1, D=1)
    state.residuals = [np.zeros((1, 1))]

    expected = (
        stats.norm.logpdf(0.0, 0.0, hp.sigma_alpha)       # group intercept
        + stats.norm.logpdf(0.0, 0.0, 1.0)                # individual intercept, variance 1
        + stats.norm.logpdf(0.0, 0.0, 1.0)                # group position, Psi_z/kappa0 = 1
        + stats.norm.logpdf(0.0, 0.0, 1.0)                # individual position
        + stats.invgamma.logpdf(1.0, hp.a_sigma, scale=hp.b_sigma)
        + stats.norm.logpdf(0.0, 0.0, hp.tau)             # item intercept
        + stats.norm.logpdf(0.0, 0.0, 1.0)                # item position
        + stats.norm.logpdf(0.0, 0.0, 1.0)                # residual, phi = 1
        + 2 * stats.invwishart.logpdf(1.0, df=hp.nu_z, scale=2.0)
    )
    assert likelihood.log_prior(state, hp) == pytest.approx(expected, rel=1e-10)


def test_invwishart_density_matches_scipy():
    psi = np.array([[1.3, 0.2], [0.2, 0.8]])
    scale = np.array([[2.0, 0.1], [0.1, 1.5]])
    ours = likelihood.invwishart_logpdf(psi, 4.5, scale)
    assert ours == pytest.approx(stats.invwishart.logpdf(psi, df=4.5, scale=scale), rel=1e-10)


def test_non_spd_covariance_rejected(hp):
    state = make_state([1], 1)
    state.psi_z = np.array([[1.0, 3.0], [3.0, 1.0]])
    with pytest.raises(ValidityError):
        likelihood.log_prior(state, hp)


def test_item_likelihood_sums_to_total(small_data, hp):
    rng = np.random.default_rng(2)
    state = make_state(small_data.group_sizes, small_data.p)
    state.item_positions = rng.normal(size=(small_data.p, 2))
    state.individual_positions = [rng.normal(size=(n, 2)) for n in small_data.group_sizes]
    assert likelihood.item_log_likelihood(state, small_data).sum() == pytest.approx(
        likelihood.log_likelihood(state, small_data)
    )


# ============== Invariances ==============

def scattered_state(data, D=2, seed=0):
    rng = np.random.default_rng(seed)
    state = make_state(data.group_sizes, data.p, D=D)
    state.group_intercepts = rng.normal(size=data.K)
    state.individual_intercepts = [rng.normal(size=n) for n in data.group_sizes]
    state.group_variances = rng.uniform(0.5, 2.0, size=data.K)
    state.item_intercepts = rng.normal(size=data.p)
    state.group_positions = rng.normal(size=(data.K, D))
    state.individual_positions = [rng.normal(size=(n, D)) for n in data.group_sizes]
    state.item_positions = rng.normal(size=(data.p, D))
    state.psi_z = np.array([[1.4, 0.3], [0.3, 0.9]])
    state.psi_w = np.array([[0.8, -0.2], [-0.2, 1.1]])
    state.residuals = [rng.normal(scale=0.5, size=(n, data.p)) for n in data.group_sizes]
    return state


@pytest.fixture
def gappy_data():
    rng = np.random.default_rng(19)
    matrices = [rng.integers(0, 2, size=(n, 6)).astype(float) for n in (5, 3, 4)]
    matrices[0][1, 2] = np.nan
    matrices[2][3, :2] = np.nan
    return make_dataset(matrices)


@pytest.mark.parametrize("seed", range(5))
def test_joint_rotation_leaves_likelihood_unchanged(gappy_data, seed):
    state = scattered_state(gappy_data)
    R, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(2, 2)))
    rotated = state.rotate(R)
    for k, n in enumerate(gappy_data.group_sizes):
        for i in range(n):
            for j in range(gappy_data.p):
                assert likelihood.linear_predictor(rotated, k, i, j) == pytest.approx(
                    likelihood.linear_predictor(state, k, i, j), abs=1e-12
                )
    assert abs(likelihood.log_likelihood(rotated, gappy_data) - likelihood.log_likelihood(state, gappy_data)) <= 1e-10


def test_permuting_respondents_items_and_groups(gappy_data):
    state = scattered_state(gappy_data)
    rng = np.random.default_rng(4)
    group_order = [2, 0, 1]
    rows = [rng.permutation(n) for n in gappy_data.group_sizes]
    cols = rng.permutation(gappy_data.p)

    shuffled_data = make_dataset([gappy_data.groups[k].Y[rows[k]][:, cols] for k in group_order])
    shuffled = make_state([gappy_data.group_sizes[k] for k in group_order], gappy_data.p)
    shuffled.individual_intercepts = [state.individual_intercepts[k][rows[k]] for k in group_order]
    shuffled.individual_positions = [state.individual_positions[k][rows[k]] for k in group_order]
    shuffled.residuals = [state.residuals[k][rows[k]][:, cols] for k in group_order]
    shuffled.item_intercepts = state.item_intercepts[cols]
    shuffled.item_positions = state.item_positions[cols]

    assert likelihood.log_likelihood(shuffled, shuffled_data) == pytest.approx(
        likelihood.log_likelihood(state, gappy_data), rel=1e-13
    )


# ============== Prior Terms ==============

def test_doubling_kappa0_changes_only_group_position_terms(gappy_data):
    state = scattered_state(gappy_data)
    base = Hyperparameters(D=2, kappa0=1.0)
    doubled = Hyperparameters(D=2, kappa0=2.0)
    psi_inv = np.linalg.inv(state.psi_z)
    quadratic = sum(z @ psi_inv @ z for z in state.group_positions)
    expected = 0.5 * gappy_data.K * 2 * math.log(2.0) - 0.5 * (2.0 - 1.0) * quadratic
    assert likelihood.log_prior(state, doubled) - likelihood.log_prior(state, base) == pytest.approx(expected, rel=1e-10)


def test_scaling_one_group_variance_touches_only_its_terms(gappy_data, hp):
    state = scattered_state(gappy_data)
    scaled = state.copy()
    scaled.group_variances[1] = 3.0 * state.group_variances[1]

    def own_terms(s):
        v = s.group_variances[1]
        return stats.invgamma.logpdf(v, hp.a_sigma, scale=hp.b_sigma) + stats.norm.logpdf(
            s.individual_intercepts[1], s.group_intercepts[1], math.sqrt(v)
        ).sum()

    difference = likelihood.log_prior(scaled, hp) - likelihood.log_prior(state, hp)
    assert difference == pytest.approx(own_terms(scaled) - own_terms(state), rel=1e-10)


# ============== Gradient ==============

def analytic_gradient(state, data, hp, name, index):
    """d log posterior / d one scalar, from the closed-form conditional terms."""
    k, i, j, d = index
    resid = [np.where(np.isnan(g.Y), 0.0, g.Y - expit(likelihood.group_eta(state, kk))) for kk, g in enumerate(data.groups)]
    psi_z_inv, psi_w_inv = np.linalg.inv(state.psi_z), np.linalg.inv(state.psi_w)
    if name == "individual_intercept":
        return resid[k][i].sum() - (state.individual_intercepts[k][i] - state.group_intercepts[k]) / state.group_variances[k]
    if name == "item_intercept":
        return sum(r[:, j].sum() for r in resid) - (state.item_intercepts[j] - hp.beta0) / hp.tau**2
    if name == "individual_position":
        z = state.individual_positions[k][i]
        return resid[k][i] @ state.item_positions[:, d] - (psi_z_inv @ (z - state.group_positions[k]))[d]
    if name == "item_position":
        likelihood_part = sum(r[:, j] @ z[:, d] for r, z in zip(resid, state.individual_positions))
        return likelihood_part - (psi_w_inv @ (state.item_positions[j] - hp.w0_vec))[d]
    raise ValueError(name)


def nudge(state, name, index, h):
    k, i, j, d = index
    moved = state.copy()
    if name == "individual_intercept":
        moved.individual_intercepts[k][i] += h
    elif name == "item_intercept":
        moved.item_intercepts[j] += h
    elif name == "individual_position":
        moved.individual_positions[k][i, d] += h
    else:
        moved.item_positions[j, d] += h
    return moved


@pytest.mark.parametrize(
    "name,index",
    [
        ("individual_intercept", (0, 1, 0, 0)),
        ("individual_intercept", (2, 3, 0, 0)),
        ("item_intercept", (0, 0, 2, 0)),
        ("item_intercept", (0, 0, 5, 0)),
        ("individual_position", (1, 2, 0, 1)),
        ("item_position", (0, 0, 3, 0)),
    ],
)
def test_gradient_matches_central_differences(gappy_data, hp, name, index):
    state = scattered_state(gappy_data)
    h = 1e-5
    numeric = (
        likelihood.log_posterior(nudge(state, name, index, h), gappy_data, hp)
        - likelihood.log_posterior(nudge(state, name, index, -h), gappy_data, hp)
    ) / (2 * h)
    assert numeric == pytest.approx(analytic_gradient(state, gappy_data, hp, name, index), rel=1e-5, abs=1e-7)
