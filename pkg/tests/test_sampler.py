"""
HLSIRM - MCMC kernel and chain runner tests
"""
import logging

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

import storage
from models.schemas import ChainConfig, Hyperparameters, ProposalBlock
from services import sampler
from services.evaluate import effective_sample_size
from tests.conftest import make_dataset, make_state
from utils.errors import NumericalError, ShapeError


def random_state(data, D=2, seed=0):
    rng = np.random.default_rng(seed)
    state = make_state(data.group_sizes, data.p, D=D)
    state.individual_intercepts = [rng.normal(size=n) for n in data.group_sizes]
    state.individual_positions = [rng.normal(size=(n, D)) for n in data.group_sizes]
    state.item_positions = rng.normal(size=(data.p, D))
    return state


# ============== MH Kernels ==============

def test_zero_scale_group_move_is_accepted_identity(small_data, hp):
    state = random_state(small_data)
    before = state.copy()
    state, accepted = sampler.update_group_block(state, small_data, hp, 1, (0.0, 0.0), np.random.default_rng(1))
    assert accepted
    np.testing.assert_array_equal(state.individual_intercepts[1], before.individual_intercepts[1])
    np.testing.assert_array_equal(state.group_positions, before.group_positions)


def test_huge_group_jump_is_rejected(small_data, hp):
    state = random_state(small_data)
    before = state.copy()
    state, accepted = sampler.update_group_block(state, small_data, hp, 0, (1e6, 1e6), np.random.default_rng(3))
    assert not accepted
    assert state.group_intercepts[0] == before.group_intercepts[0]
    np.testing.assert_array_equal(state.individual_positions[0], before.individual_positions[0])


def test_group_move_touches_only_its_group(small_data, hp):
    state = random_state(small_data)
    before = state.copy()
    rng = np.random.default_rng(5)
    for _ in range(20):
        state, _ = sampler.update_group_block(state, small_data, hp, 0, (0.5, 0.5), rng)
    np.testing.assert_array_equal(state.individual_intercepts[1], before.individual_intercepts[1])
    np.testing.assert_array_equal(state.individual_positions[1], before.individual_positions[1])
    np.testing.assert_array_equal(state.item_positions, before.item_positions)


def test_zero_scale_item_moves(small_data, hp):
    state = random_state(small_data)
    before = state.copy()
    state, accepted = sampler.update_items(state, small_data, hp, np.zeros(small_data.p), np.random.default_rng(0))
    assert accepted.all()
    np.testing.assert_array_equal(state.item_positions, before.item_positions)
    state, ok = sampler.update_item(state, small_data, hp, 2, 0.0, np.random.default_rng(0))
    assert ok


def test_missing_cells_refresh_residuals_from_prior():
    hp = Hyperparameters(D=2, phi=4.0)
    data = make_dataset([np.full((200, 50), np.nan)])
    state = make_state([200], 50)
    state, accepted, proposed = sampler.update_residuals(state, data, hp, np.ones(1), np.random.default_rng(8))
    eps = state.residuals[0]
    assert proposed[0] == 0 and accepted[0] == 0
    assert abs(eps.mean()) < 0.02
    assert eps.var() == pytest.approx(0.25, rel=0.05)


def test_positive_cell_tilts_residual_upward():
    hp = Hyperparameters(D=1)
    data = make_dataset([np.array([[1.0]])])
    state = make_state([1], 1, D=1)
    rng = np.random.default_rng(12)
    draws = []
    for _ in range(4000):
        state, _, _ = sampler.update_residuals(state, data, hp, np.array([2.0]), rng)
        draws.append(state.residuals[0][0, 0])
    assert np.mean(draws[500:]) > 0


@pytest.mark.slow
def test_residual_matches_quadrature():
    hp = Hyperparameters(D=1)
    data = make_dataset([np.array([[1.0]])])
    state = make_state([1], 1, D=1)
    state.item_intercepts = np.array([-0.5])

    def density(e):
        return expit(e - 0.5) * stats.norm.pdf(e)

    norm = integrate.quad(density, -12, 12)[0]
    mean = integrate.quad(lambda e: e * density(e), -12, 12)[0] / norm

    rng = np.random.default_rng(21)
    draws = np.empty(40000)
    for t in range(draws.size):
        state, _, _ = sampler.update_residuals(state, data, hp, np.array([2.4]), rng)
        draws[t] = state.residuals[0][0, 0]
    draws = draws[2000:]
    se = draws.std() / np.sqrt(effective_sample_size(draws)[()])
    assert abs(draws.mean() - mean) < 4 * se


@pytest.mark.slow
def test_single_item_matches_grid_posterior():
    hp = Hyperparameters(D=1, tau=1.5)
    Y = np.array([[1.0], [1.0], [0.0], [1.0], [0.0], [1.0]])
    data = make_dataset([Y])
    state = make_state([6], 1, D=1)
    state.individual_intercepts = [np.array([0.2, -0.3, 0.5, 0.0, -1.0, 0.8])]
    state.individual_positions = [np.array([[1.0], [0.5], [-1.0], [0.3], [-0.6], [1.2]])]
    state.residuals = [np.zeros((6, 1))]

    grid = np.linspace(-6, 6, 401)
    B, W = np.meshgrid(grid, grid, indexing="ij")
    eta = state.individual_intercepts[0][:, None, None] + B[None] + state.individual_positions[0][:, 0, None, None] * W[None]
    y = Y[:, 0][:, None, None]
    log_post = (y * np.log(expit(eta)) + (1 - y) * np.log(expit(-eta))).sum(axis=0)
    log_post += stats.norm.logpdf(B, 0, 1.5) + stats.norm.logpdf(W, 0, 1.0)
    weights = np.exp(log_post - log_post.max())
    weights /= weights.sum()
    beta_mean, w_mean = (weights * B).sum(), (weights * W).sum()

    rng = np.random.default_rng(4)
    draws = np.empty((30000, 2))
    for t in range(draws.shape[0]):
        state, _ = sampler.update_item(state, data, hp, 0, 1.2, rng)
        draws[t] = state.item_intercepts[0], state.item_positions[0, 0]
    draws = draws[1000:]
    ess = effective_sample_size(draws[None, ...])
    se = draws.std(axis=0) / np.sqrt(ess)
    assert abs(draws[:, 0].mean() - beta_mean) < 4 * se[0]
    assert abs(draws[:, 1].mean() - w_mean) < 4 * se[1]


@pytest.mark.slow
def test_group_block_matches_grid_posterior():
    # One respondent answering one item: the group-level scalars integrate out
    # to alpha_1 ~ N(alpha0, sigma_alpha^2 + sigma^2) and z_1 ~ N(0, 2 Psi_z).
    hp = Hyperparameters(D=1)
    data = make_dataset([np.array([[1.0]])])
    state = make_state([1], 1, D=1, item_intercepts=np.array([-0.5]), item_positions=np.array([[2.0]]))
    state.residuals = [np.zeros((1, 1))]
    shrink_alpha = hp.sigma_alpha**2 / (hp.sigma_alpha**2 + 1.0)

    a_grid = np.linspace(-16, 16, 801)
    z_grid = np.linspace(-9, 9, 601)
    A, Z = np.meshgrid(a_grid, z_grid, indexing="ij")
    log_post = np.log(expit(A - 0.5 + 2.0 * Z))
    log_post += stats.norm.logpdf(A, hp.alpha0, np.sqrt(hp.sigma_alpha**2 + 1.0)) + stats.norm.logpdf(Z, 0, np.sqrt(2.0))
    weights = np.exp(log_post - log_post.max())
    weights /= weights.sum()

    def moments(values):
        mean = (weights * values).sum()
        return mean, (weights * values**2).sum() - mean**2

    a_mean, a_var = moments(A)
    z_mean, z_var = moments(Z)
    expected = {
        "group_intercept": (shrink_alpha * a_mean, np.sqrt(hp.sigma_alpha**2 * 1.0 / (hp.sigma_alpha**2 + 1.0) + shrink_alpha**2 * a_var)),
        "intercept": (a_mean, np.sqrt(a_var)),
        "group_position": (0.5 * z_mean, np.sqrt(0.5 + 0.25 * z_var)),
        "position": (z_mean, np.sqrt(z_var)),
    }

    scales = 1.2 / np.sqrt(sampler.group_block_precision(state, data, hp, 0))
    rng = np.random.default_rng(6)
    draws = np.empty((60000, 4))
    for t in range(draws.shape[0]):
        state, _ = sampler.update_group_block(state, data, hp, 0, scales, rng)
        draws[t] = (
            state.group_intercepts[0],
            state.individual_intercepts[0][0],
            state.group_positions[0, 0],
            state.individual_positions[0][0, 0],
        )
    draws = draws[2000:]
    ess = effective_sample_size(draws[None, ...])
    for c, (name, (mean, sd)) in enumerate(expected.items()):
        se = draws[:, c].std() / np.sqrt(ess[c])
        assert abs(draws[:, c].mean() - mean) < 4 * se, name
        assert draws[:, c].std() == pytest.approx(sd, rel=0.1), name


def test_block_scale_array_must_match_block(small_data, hp):
    state = random_state(small_data)
    with pytest.raises(ShapeError):
        sampler.update_group_block(state, small_data, hp, 0, np.ones(5), np.random.default_rng(0))


# ============== Gibbs Kernels ==============

def test_variance_posterior_with_zero_spread(hp):
    state = make_state([5, 3], 2)
    state.group_intercepts = np.array([1.5, -0.5])
    state.individual_intercepts = [np.full(5, 1.5), np.full(3, -0.5)]
    shape, scale = sampler.group_variance_posterior(state, hp, 0)
    assert shape == hp.a_sigma + 2.5
    assert scale == hp.b_sigma


def test_variance_draw_moments(hp):
    state = make_state([10], 1)
    state.individual_intercepts = [np.linspace(-1.0, 1.0, 10)]
    shape, scale = sampler.group_variance_posterior(state, hp, 0)
    rng = np.random.default_rng(9)
    draws = np.array([sampler.gibbs_group_variance(state, hp, 0, rng).group_variances[0] for _ in range(20000)])
    mean = scale / (shape - 1)
    sd = np.sqrt(scale**2 / ((shape - 1) ** 2 * (shape - 2)))
    assert abs(draws.mean() - mean) < 4 * sd / np.sqrt(draws.size)


def test_covariance_posteriors_at_means(hp):
    state = make_state([4, 2], 3)
    (df_z, S_z), (df_w, S_w) = sampler.covariance_posteriors(state, hp)
    np.testing.assert_array_equal(S_z, hp.S_z_mat)
    np.testing.assert_array_equal(S_w, hp.S_w_mat)
    assert df_z == hp.nu_z + 6 + 2
    assert df_w == hp.nu_w + 3


def test_covariance_draw_moments(hp):
    state = make_state([10], 6)
    rng = np.random.default_rng(14)
    state.individual_positions = [rng.normal(size=(10, 2))]
    state.item_positions = rng.normal(size=(6, 2))
    (df_z, S_z), (df_w, S_w) = sampler.covariance_posteriors(state, hp)

    draws_z, draws_w = [], []
    for _ in range(20000):
        sampler.gibbs_covariances(state, hp, rng)
        draws_z.append(state.psi_z)
        draws_w.append(state.psi_w)
    for draws, df, S in ((np.array(draws_z), df_z, S_z), (np.array(draws_w), df_w, S_w)):
        expected = S / (df - 2 - 1)
        se = draws.std(axis=0) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - expected) < 4 * se)


def test_non_spd_scale_raises_with_state_dump(hp):
    state = make_state([2], 2)
    state.item_positions = np.array([[np.nan, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericalError) as err:
        sampler.gibbs_covariances(state, hp, np.random.default_rng(0))
    assert "state" in err.value.details


# ============== Adaptation ==============

def test_adaptation_direction():
    config = ChainConfig(iterations=10, burn_in=5, thin=1)
    adaptation = sampler.AdaptationState.initial([3, 4], 2, 2, config)
    before = adaptation.item.copy()
    residual = adaptation.residual.copy()
    lam = adaptation.group_log_lambda.copy()
    adaptation.adapt(1, np.array([True, False]), np.array([True, False]), np.array([np.nan, 0.9]), config)
    assert adaptation.item[0] > before[0] and adaptation.item[1] < before[1]
    assert adaptation.group_log_lambda[0] > lam[0] and adaptation.group_log_lambda[1] < lam[1]
    assert adaptation.residual[0] == residual[0]
    assert adaptation.residual[1] > residual[1]


def test_initial_block_scale_follows_block_size():
    config = ChainConfig(iterations=10, burn_in=5, thin=1)
    adaptation = sampler.AdaptationState.initial([3, 10], 5, 2, config)
    sizes = [sampler.block_size(3, 2), sampler.block_size(10, 2)]
    assert sizes == [1 + 3 + 2 + 6, 1 + 10 + 2 + 20]
    for k, size in enumerate(sizes):
        scales = adaptation.group_scales(k)
        assert scales.shape == (size,)
        np.testing.assert_allclose(scales, 2.38 / np.sqrt(size))


def test_block_scales_use_multipliers_and_precision(small_data, hp):
    config = ChainConfig(
        iterations=10, burn_in=5, thin=1,
        proposal_scales={ProposalBlock.GROUP_INTERCEPT: 2.0, ProposalBlock.GROUP_POSITION: 0.5},
    )
    state = random_state(small_data)
    adaptation = sampler.AdaptationState.initial(small_data.group_sizes, small_data.p, hp.D, config)
    adaptation.observe_groups(state, small_data, hp)

    n = small_data.group_sizes[1]
    precision = sampler.group_block_precision(state, small_data, hp, 1)
    lam = np.exp(adaptation.group_log_lambda[1])
    scales = adaptation.group_scales(1)
    np.testing.assert_allclose(scales[: 1 + n], lam * 2.0 / np.sqrt(precision[: 1 + n]))
    np.testing.assert_allclose(scales[1 + n :], lam * 0.5 / np.sqrt(precision[1 + n :]))
    assert adaptation.group_intercept[1] == pytest.approx(scales[: 1 + n].mean())


def test_block_precision_without_data_is_the_conditional_prior():
    hp = Hyperparameters(D=2, sigma_alpha=2.0, kappa0=3.0)
    data = make_dataset([np.full((4, 3), np.nan)])
    state = make_state([4], 3, D=2, group_variances=np.array([0.5]), psi_z=np.diag([2.0, 4.0]))
    precision = sampler.group_block_precision(state, data, hp, 0)
    assert precision[0] == pytest.approx(1 / 4.0 + 4 / 0.5)
    np.testing.assert_allclose(precision[1:5], 1 / 0.5)
    np.testing.assert_allclose(precision[5:7], (3.0 + 4) * np.array([0.5, 0.25]))
    np.testing.assert_allclose(precision[7:].reshape(4, 2), np.tile([0.5, 0.25], (4, 1)))


def test_observed_cells_add_information(small_data, hp):
    state = random_state(small_data)
    empty = make_dataset([np.full(g.Y.shape, np.nan) for g in small_data.groups])
    with_data = sampler.group_block_precision(state, small_data, hp, 0)
    prior_only = sampler.group_block_precision(state, empty, hp, 0)
    n = small_data.group_sizes[0]
    assert np.all(with_data[1 : 1 + n] > prior_only[1 : 1 + n])
    assert with_data[0] == prior_only[0]


def test_scales_freeze_after_burn_in(small_data, hp):
    config = ChainConfig(iterations=30, burn_in=10, thin=2, seed=3)
    chain = sampler.run_chain(small_data, hp, config, progress=False)
    frozen = [entry for entry in chain.adaptation_trace if entry["iteration"] >= 10]
    assert len(frozen) > 1
    for entry in frozen[1:]:
        for block in ProposalBlock:
            np.testing.assert_array_equal(entry[block.value], frozen[0][block.value])


def test_initial_state_orders_respondents_by_endorsement(hp):
    Y = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0], [np.nan, np.nan, np.nan, np.nan]])
    data = make_dataset([Y, np.array([[0.0, 1.0, 0.0, 1.0]])])
    config = ChainConfig(iterations=10, burn_in=5, thin=1, seed=1)
    state = sampler.ChainRunner(data, hp, config).initial_state(np.random.default_rng(0))
    alpha = state.individual_intercepts[0]
    assert alpha[0] > alpha[1]
    assert alpha[2] == hp.alpha0
    assert state.group_intercepts[0] == pytest.approx(alpha.mean())
    assert state.item_intercepts[0] > state.item_intercepts[2]
    state.validate(data)


def test_initial_state_without_observations_sits_at_prior_means():
    hp = Hyperparameters(D=2, alpha0=0.7, beta0=-0.4)
    data = make_dataset([np.full((3, 2), np.nan)])
    config = ChainConfig(iterations=10, burn_in=5, thin=1, seed=1)
    state = sampler.ChainRunner(data, hp, config).initial_state(np.random.default_rng(0))
    np.testing.assert_array_equal(state.individual_intercepts[0], np.full(3, 0.7))
    np.testing.assert_array_equal(state.item_intercepts, np.full(2, -0.4))
    assert np.all(np.abs(state.item_positions) < 1.0)


# ============== Chain Runner ==============

def test_single_stored_sample(small_data, hp):
    config = ChainConfig(iterations=25, burn_in=20, thin=5, seed=1)
    chain = sampler.run_chain(small_data, hp, config, progress=False)
    assert len(chain) == 1
    assert len(chain.log_posterior_trace) == 1


def test_default_sample_count():
    assert ChainConfig().n_samples == 5000


def test_acceptance_counts(small_data, hp, quick_config):
    chain = sampler.run_chain(small_data, hp, quick_config, progress=False)
    log = chain.acceptance_log
    assert log.proposed["group"].sum() == small_data.K * 20
    assert log.burn_in_proposed["item"].sum() == small_data.p * 20
    assert log.proposed["residual"].sum() == small_data.observed_cells() * 20
    rates = sampler.acceptance_rates(chain)
    assert set(rates) == {"group", "item", "residual"}


def chain_bytes(chain, path):
    storage.write_chain(path, chain)
    return path.read_bytes()


def test_serial_determinism(tmp_path, small_data, hp, quick_config):
    first = sampler.run_chain(small_data, hp, quick_config, progress=False)
    second = sampler.run_chain(small_data, hp, quick_config, progress=False)
    assert chain_bytes(first, tmp_path / "a.bin") == chain_bytes(second, tmp_path / "b.bin")


def test_threaded_run(small_data, hp, quick_config):
    chain = sampler.run_chain(small_data, hp, quick_config, threads=2, progress=False)
    assert len(chain) == quick_config.n_samples
    for state in chain.samples:
        state.validate(small_data)


def test_resume_matches_uninterrupted_run(tmp_path, monkeypatch, small_data, hp):
    config = ChainConfig(iterations=40, burn_in=15, thin=5, seed=8, checkpoint_every=10)
    reference = sampler.run_chain(small_data, hp, config, progress=False)

    checkpoint = tmp_path / "checkpoint.pkl"
    real_save = storage.save_checkpoint

    def interrupting_save(path, payload):
        real_save(path, payload)
        if payload["iteration"] == 20:
            raise KeyboardInterrupt

    monkeypatch.setattr(storage, "save_checkpoint", interrupting_save)
    with pytest.raises(KeyboardInterrupt):
        sampler.run_chain(small_data, hp, config, checkpoint_path=checkpoint, progress=False)
    monkeypatch.setattr(storage, "save_checkpoint", real_save)

    assert storage.load_checkpoint(checkpoint)["iteration"] == 20
    resumed = sampler.run_chain(small_data, hp, config, checkpoint_path=checkpoint, resume=True, progress=False)
    assert chain_bytes(resumed, tmp_path / "resumed.bin") == chain_bytes(reference, tmp_path / "reference.bin")


def test_foreign_checkpoint_is_ignored(tmp_path, caplog, small_data, hp):
    checkpoint = tmp_path / "checkpoint.pkl"
    other = ChainConfig(iterations=20, burn_in=5, thin=5, seed=2, checkpoint_every=10)
    sampler.run_chain(small_data, hp, other, checkpoint_path=checkpoint, progress=False)

    config = ChainConfig(iterations=20, burn_in=5, thin=5, seed=3, checkpoint_every=10)
    fresh = sampler.run_chain(small_data, hp, config, progress=False)
    with caplog.at_level(logging.WARNING):
        resumed = sampler.run_chain(small_data, hp, config, checkpoint_path=checkpoint, progress=False)
    assert "different run" in caplog.text
    assert chain_bytes(resumed, tmp_path / "r.bin") == chain_bytes(fresh, tmp_path / "f.bin")


def test_non_finite_log_posterior_aborts(monkeypatch, small_data, hp, quick_config):
    monkeypatch.setattr(sampler, "log_posterior", lambda state, data, hp: float("nan"))
    with pytest.raises(NumericalError) as err:
        sampler.run_chain(small_data, hp, quick_config, progress=False)
    assert err.value.details["iteration"] == quick_config.burn_in + quick_config.thin
    assert "state" in err.value.details


def test_stored_residuals_are_optional(small_data, hp):
    config = ChainConfig(iterations=30, burn_in=20, thin=5, seed=4, store_residuals=True)
    chain = sampler.run_chain(small_data, hp, config, progress=False)
    assert chain.samples[0].residuals is not None
    assert chain.fitted_probability_mean is not None


@pytest.mark.slow
def test_prior_only_run_recovers_prior_moments():
    hp = Hyperparameters(D=1, a_sigma=6.0, b_sigma=5.0, nu_z=12.0, nu_w=12.0, S_z=[[9.0]], S_w=[[9.0]])
    data = make_dataset([np.full((3, 3), np.nan), np.full((2, 3), np.nan)])
    config = ChainConfig(iterations=42000, burn_in=2000, thin=5, seed=17)
    chain = sampler.run_chain(data, hp, config, progress=False)
    samples = chain.samples

    # Inv-Gamma(6, 5) and, for D=1, Inv-Wishart(12, 9) = Inv-Gamma(6, 4.5)
    variance_sd = 5.0 / (5.0 * np.sqrt(4.0))
    psi_mean = 9.0 / (12.0 - 1 - 1)
    psi_sd = psi_mean / np.sqrt(4.0)
    checks = {
        "group_intercepts": (np.stack([s.group_intercepts for s in samples]), hp.alpha0, hp.sigma_alpha),
        "individual_intercepts": (
            np.stack([np.concatenate(s.individual_intercepts) for s in samples]),
            hp.alpha0,
            np.sqrt(hp.sigma_alpha**2 + 1.0),
        ),
        "item_intercepts": (np.stack([s.item_intercepts for s in samples]), hp.beta0, hp.tau),
        "group_variances": (np.stack([s.group_variances for s in samples]), 1.0, variance_sd),
        "psi_z": (np.array([s.psi_z[0] for s in samples]), psi_mean, psi_sd),
        "psi_w": (np.array([s.psi_w[0] for s in samples]), psi_mean, psi_sd),
        "group_positions": (np.stack([s.group_positions[:, 0] for s in samples]), 0.0, np.sqrt(psi_mean / hp.kappa0)),
        "individual_positions": (
            np.stack([np.concatenate(s.individual_positions)[:, 0] for s in samples]),
            0.0,
            np.sqrt(psi_mean / hp.kappa0 + psi_mean),
        ),
        "item_positions": (np.stack([s.item_positions[:, 0] for s in samples]), 0.0, np.sqrt(psi_mean)),
    }
    for name, (draws, mean, sd) in checks.items():
        ess = effective_sample_size(draws[None, ...])
        se = sd / np.sqrt(ess)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se), name
        np.testing.assert_allclose(draws.std(axis=0), sd, rtol=0.2, err_msg=name)
