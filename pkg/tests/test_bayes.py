import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from myoperf.bayes import (
    PriorSpec,
    SamplerData,
    SamplerOptions,
    _empty_csr,
    build_neighbor_graph,
    burn_in_temperatures,
    chain_rng,
    gelman_rubin,
    initial_state,
    log_hyperprior,
    log_likelihood,
    log_prior,
    mh_sweep,
    posterior_summary,
    run_chain,
    sample_chain,
    spatial_weights,
    tune_proposals,
)
from myoperf.kinetics import KineticParams, SampledCurve, forward_model, gamma_variate_aif, time_grid
from myoperf.phantom import build_phantom, simulate_series

STRESS = KineticParams(3.5, 0.08, 0.16, 1.0, 0.1)


def vid(r, c, width=6):
    return r * width + c


class TestNeighborGraph:
    full = build_neighbor_graph(np.ones((6, 6), dtype=bool))

    def test_interior_voxel_has_axial_neighbours(self):
        assert set(self.full.neighbors[vid(2, 3)]) == {vid(1, 3), vid(3, 3), vid(2, 2), vid(2, 4)}

    def test_corner_voxel(self):
        # missing top tries the diagonal (1, 1) after the out-of-grid ones; missing left repeats it
        assert self.full.neighbors[0] == (vid(1, 1), vid(1, 0), vid(0, 1))

    def test_edge_voxel_top_fallback_prefers_upper_left(self):
        mask = np.ones((6, 6), dtype=bool)
        mask[1, 3] = False
        g = build_neighbor_graph(mask)
        assert g.neighbors[vid(2, 3)][0] == vid(1, 2)

    def test_ring_mask(self):
        mask = np.zeros((7, 7), dtype=bool)
        mask[1:6, 1:6] = True
        mask[2:5, 2:5] = False
        g = build_neighbor_graph(mask)
        inside = set(np.flatnonzero(mask.ravel()).tolist())
        for v, nbs in g.neighbors.items():
            assert len(nbs) >= 2
            assert set(nbs) <= inside
            assert v not in nbs

    def test_isolated_voxel_falls_back_to_nearest(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, 0] = True
        mask[4, 3] = mask[4, 4] = True
        g = build_neighbor_graph(mask)
        assert g.neighbors[0] == (vid(4, 3, 5),)

    def test_axial_pairs_are_symmetric(self):
        for v, nbs in self.full.neighbors.items():
            r, c = divmod(v, 6)
            for n in nbs:
                nr, nc = divmod(n, 6)
                if abs(nr - r) + abs(nc - c) == 1:
                    assert v in self.full.neighbors[n]

    def test_rejects_empty_and_single(self):
        with pytest.raises(ValueError):
            build_neighbor_graph(np.zeros((3, 3), dtype=bool))
        single = np.zeros((3, 3), dtype=bool)
        single[1, 1] = True
        with pytest.raises(ValueError):
            build_neighbor_graph(single)


class TestDensities:
    aif = gamma_variate_aif(time_grid(0.03, 2.97))

    def test_perfect_fit_likelihood(self):
        assert self.aif.times.size == 100
        y = forward_model(STRESS, self.aif)
        assert log_likelihood(STRESS, 1.0, y, self.aif) == pytest.approx(-50 * math.log(2 * math.pi))

    def test_likelihood_linear_in_sse(self):
        y = forward_model(STRESS, self.aif)
        off = SampledCurve(y.times, y.values + 0.1)
        off2 = SampledCurve(y.times, y.values + 0.1 * math.sqrt(2))
        sse = 100 * 0.01
        drop = log_likelihood(STRESS, 0.5, off, self.aif) - log_likelihood(STRESS, 0.5, off2, self.aif)
        assert drop == pytest.approx(sse / (2 * 0.5), rel=1e-9)

    def test_sigma2_maximiser_is_mean_square(self):
        rng = np.random.default_rng(0)
        y = forward_model(STRESS, self.aif)
        noisy = SampledCurve(y.times, y.values + rng.normal(0, 0.05, y.values.size))
        sse = float(np.sum((noisy.values - y.values) ** 2))
        grid = np.linspace(0.5, 1.5, 2001) * sse / 100
        ll = [log_likelihood(STRESS, s2, noisy, self.aif) for s2 in grid]
        assert grid[int(np.argmax(ll))] == pytest.approx(sse / 100, rel=1e-3)

    def test_likelihood_needs_positive_variance(self):
        with pytest.raises(ValueError):
            log_likelihood(STRESS, 0.0, forward_model(STRESS, self.aif), self.aif)

    def spatial(self, theta, neighbors, weights=np.ones(4)):
        on = log_prior(theta, 0.1, (3.5, 1.0), neighbors, weights)
        off = log_prior(theta, 0.1, (3.5, 1.0), neighbors, weights, PriorSpec(spatial_scale=math.inf))
        return on - off

    def test_equal_neighbours_contribute_nothing(self):
        assert self.spatial(STRESS, [STRESS, STRESS]) == 0.0

    def test_single_neighbour_fb_difference(self):
        other = KineticParams(3.7, 0.08, 0.16, 1.0, 0.1)
        assert self.spatial(STRESS, [other]) == pytest.approx(-1.0)

    def test_tau0_outside_spatial_term(self):
        other = KineticParams(3.5, 0.08, 0.16, 1.0, 0.4)
        assert self.spatial(STRESS, [other]) == 0.0

    def test_vp_outside_support(self):
        bad = KineticParams(3.5, 0.45, 0.16, 1.0, 0.1)
        assert log_prior(bad, 0.1, (3.5, 1.0), [STRESS], np.ones(4)) == -math.inf

    @given(st.permutations(range(4)))
    def test_neighbour_order_irrelevant(self, order):
        nbs = [KineticParams(3.0 + 0.1 * k, 0.05 + 0.01 * k, 0.2, 1.0 - 0.1 * k, 0.1) for k in range(4)]
        w = spatial_weights(STRESS)
        base = log_prior(STRESS, 0.1, (3.0, 1.2), nbs, w)
        assert log_prior(STRESS, 0.1, (3.0, 1.2), [nbs[k] for k in order], w) == pytest.approx(base, rel=1e-13)

    def test_weights(self):
        assert spatial_weights(KineticParams(2.0, 0.08, 0.16, 1.0))[0] == 0.5
        assert spatial_weights(np.array([1.0, 1e-6, 1.0, 1.0, 0.0]))[1] == 1000.0
        np.testing.assert_array_equal(spatial_weights(np.ones(5)), np.ones(4))

    def test_hyperprior_bounds(self):
        assert log_hyperprior((3.0, 1.0)) == 0.0
        assert log_hyperprior((7.5, 1.0)) == -math.inf
        assert log_hyperprior((3.0, 0.0)) == -math.inf

    def test_non_hierarchical_spec(self):
        spec = PriorSpec.non_hierarchical()
        assert not spec.hierarchical
        assert (spec.fixed_fb_mean, spec.fb_var, spec.fixed_ps_mean, spec.ps_var) == (3.5, 0.2, 1.0, 0.2)

    @pytest.mark.parametrize("kw", [{"fb_var": 0}, {"spatial_scale": -1}, {"alpha_fb_bounds": (2, 1)},
                                    {"weights": "stale"}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            PriorSpec(**kw)


def test_tuning_formula():
    state = initial_state(1, PriorSpec(), np.random.default_rng(0))
    before = state.scales.copy()
    prop = np.full((1, 7), 50)
    tune_proposals(state, np.full((1, 7), 50), prop)
    np.testing.assert_allclose(state.scales, before * math.exp(0.766))
    state.scales[:] = before
    tune_proposals(state, np.full((1, 7), 11.7), prop)
    np.testing.assert_allclose(state.scales, before)


def test_burn_in_temperatures():
    temps = burn_in_temperatures(100, 8.0, 0.5)
    assert temps[0] == 8.0
    assert np.all(np.diff(temps) <= 0)
    assert np.all(temps[50:] == 1.0)
    assert np.all(burn_in_temperatures(100, 1.0, 0.5) == 1.0)


def one_voxel_data(seed=0, sigma=0.05):
    aif = gamma_variate_aif(time_grid(0.012, 3.0))
    y = forward_model(STRESS, aif).values
    y = y + np.random.default_rng(seed).normal(0, sigma, y.size)
    return SamplerData(y[None, :].copy(), aif.values.copy(), aif.dt)


def test_zero_scale_freezes_chain():
    data = one_voxel_data()
    opts = SamplerOptions(initial_scales=(0.0,) * 7, update_sigma2=False)
    state = initial_state(1, PriorSpec(), np.random.default_rng(1), opts, data)
    start = state.copy()
    rng = np.random.default_rng(2)
    for _ in range(20):
        mh_sweep(state, data, None, PriorSpec(), rng, opts)
    np.testing.assert_array_equal(state.theta, start.theta)
    np.testing.assert_array_equal(state.alpha, start.alpha)
    np.testing.assert_array_equal(state.accepted, state.proposed)


def test_prior_only_uniform_moments():
    spec = PriorSpec(spatial_scale=math.inf)
    data = SamplerData(np.zeros((4, 10)), np.zeros(10), 0.1)
    opts = SamplerOptions(use_likelihood=False, fixed_sigma2=1.0)
    run = sample_chain(data, _empty_csr(4), spec, 51_000, 1_000, chain_rng(5, 0), opts)
    draws = run.theta[1_000:]
    for k, top in ((1, 0.4), (2, 0.5)):
        x = draws[:, :, k].ravel()
        assert 0 < x.min() and x.max() <= top
        assert x.mean() == pytest.approx(top / 2, rel=0.02)
        assert x.var() == pytest.approx(top**2 / 12, rel=0.02)


def test_sigma2_gibbs_matches_inverse_gamma():
    data = one_voxel_data(seed=3)
    spec = PriorSpec.non_hierarchical()
    opts = SamplerOptions(update=(False,) * 5)
    run = sample_chain(data, _empty_csr(1), spec, 100_001, 1, chain_rng(0, 0), opts)
    theta = run.theta[0, 0]
    np.testing.assert_array_equal(run.theta[:, 0], np.broadcast_to(theta, run.theta[:, 0].shape))
    model = forward_model(KineticParams.from_array(theta), SampledCurve(time_grid(0.012, 3.0), data.aif))
    sse = float(np.sum((data.curves[0] - model.values) ** 2))
    shape = spec.ig_shape + data.curves.shape[1] / 2
    scale = spec.ig_scale + sse / 2
    draws = run.sigma2[1:, 0]
    assert draws.mean() == pytest.approx(scale / (shape - 1), rel=0.01)
    assert stats.kstest(draws, stats.invgamma(shape, scale=scale).cdf).statistic < 0.02


def test_single_site_stationary_density():
    data = one_voxel_data(seed=1, sigma=0.2)
    spec = PriorSpec.non_hierarchical()
    sigma2 = 0.04
    opts = SamplerOptions(update=(True, False, False, False, False), update_sigma2=False,
                          fixed_sigma2=sigma2, initial_scales=(0.5, 0, 0, 0, 0, 0, 0))
    run = sample_chain(data, _empty_csr(1), spec, 102_000, 2_000, chain_rng(7, 0), opts)
    fixed = run.theta[0, 0]
    f = run.theta[2_000:, 0, 0]

    edges = np.linspace(max(0.0, f.min()), f.max(), 41)
    mids = np.linspace(edges[0], edges[-1], 4001)
    aif = SampledCurve(time_grid(0.012, 3.0), data.aif)
    curve = SampledCurve(aif.times, data.curves[0])
    logp = np.array([log_likelihood(KineticParams(x, *fixed[1:]), sigma2, curve, aif)
                     - (x - 3.5) ** 2 / (2 * spec.fb_var) for x in mids])
    dens = np.exp(logp - logp.max())
    mass = np.array([np.trapezoid(dens[(mids >= a) & (mids <= b)], mids[(mids >= a) & (mids <= b)])
                     for a, b in zip(edges[:-1], edges[1:])])
    mass /= mass.sum()
    emp = np.histogram(f, edges)[0] / f.size
    assert 0.5 * np.abs(emp - mass).sum() < 0.05


def two_voxel_vp(weights):
    spec = PriorSpec.non_hierarchical(weights=weights)
    data = SamplerData(np.zeros((2, 10)), np.zeros(10), 0.1)
    opts = SamplerOptions(use_likelihood=False, fixed_sigma2=1.0, update=(False, True, False, False, False))
    graph = build_neighbor_graph(np.ones((1, 2), bool)).csr()
    run = sample_chain(data, graph, spec, 201_000, 1_000, chain_rng(11, 0), opts)
    return run.theta[1_000:, :, 1]


def test_current_weights_target_the_joint_density():
    x = two_voxel_vp("current")[:, 0]
    grid = np.linspace(0, 0.4, 801)[1:]
    a, b = np.meshgrid(grid, grid, indexing="ij")
    d = np.abs(a - b)
    joint = np.exp(-(d / np.maximum(a, 1e-3) + d / np.maximum(b, 1e-3)) / 0.2)
    marginal = joint.sum(axis=1)
    edges = np.linspace(0, 0.4, 21)
    mass = np.array([marginal[(grid > lo) & (grid <= hi)].sum() for lo, hi in zip(edges[:-1], edges[1:])])
    mass /= mass.sum()
    emp = np.histogram(x, edges)[0] / x.size
    assert 0.5 * np.abs(emp - mass).sum() < 0.05


def test_previous_weights_collapse_to_floor():
    # weights frozen per sweep break detailed balance and drag both voxels to zero
    assert two_voxel_vp("previous").mean() < 0.01


class TestGelmanRubin:
    def test_identical_chains(self):
        x = np.random.default_rng(0).normal(size=100)
        assert gelman_rubin(np.stack([x, x])) == pytest.approx(math.sqrt(99 / 100))

    def test_same_distribution(self):
        rng = np.random.default_rng(1)
        assert 0.99 <= gelman_rubin(rng.normal(size=(2, 10_000))) <= 1.01

    def test_disjoint_constants(self):
        x = np.stack([np.zeros(50), np.full(50, 10.0)])
        assert gelman_rubin(x) > 1.1

    def test_needs_two_chains(self):
        with pytest.raises(ValueError):
            gelman_rubin(np.zeros((1, 50)))

    def test_trailing_shape(self):
        assert gelman_rubin(np.random.default_rng(0).normal(size=(3, 40, 4, 5))).shape == (4, 5)


class TestPosteriorSummary:
    def test_constant(self):
        s = posterior_summary(np.full((2, 20, 3), 1.5))
        np.testing.assert_array_equal(s.median, 1.5)
        np.testing.assert_array_equal(s.cov, 0.0)

    def test_median(self):
        assert posterior_summary(np.array([1.0, 2, 3, 4, 5])).median == 3.0

    def test_cov(self):
        x = np.random.default_rng(2).normal(2.0, 0.2, size=10_000)
        assert posterior_summary(x).cov == pytest.approx(0.1, rel=0.1)

    def test_burn_in_dropped(self):
        x = np.concatenate([np.full(10, 100.0), np.ones(10)])
        assert posterior_summary(x, burn_in=10).median == 1.0
        with pytest.raises(ValueError):
            posterior_summary(x, burn_in=20)


@pytest.fixture(scope="module")
def small_series():
    return simulate_series(build_phantom("ischaemia", 3, 3), snr=15, seed=4)


def test_run_chain_deterministic_across_workers(small_series):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = run_chain(small_series, n_steps=300, burn_in=100, seed=9)
        b = run_chain(small_series, n_steps=300, burn_in=100, seed=9, workers=2)
        c = run_chain(small_series, n_steps=300, burn_in=100, seed=10)
    for x, y in zip(a.chains, b.chains):
        np.testing.assert_array_equal(x.theta, y.theta)
        np.testing.assert_array_equal(x.sigma2, y.sigma2)
    assert not np.array_equal(a.chains[0].theta, c.chains[0].theta)
    np.testing.assert_array_equal(a.rhat, b.rhat)


def test_run_chain_respects_supports(small_series):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_chain(small_series, n_steps=400, burn_in=100, seed=1)
    assert res.spec.support_mask(res.samples(burn_in=False)).all()
    assert res.spec.support_mask(res.medians).all()
    assert np.all(res.summary.cov >= 0)
    for run in res.chains:
        assert np.all(run.sigma2 > 0)
        lo, hi = res.spec.alpha_fb_bounds
        assert np.all((run.alpha[..., 0] >= lo) & (run.alpha[..., 0] <= hi))
    assert res.medians.shape == res.rhat.shape == (9, 5)
    assert res.acceptance.shape == (2, 9, 7)


def test_run_chain_warns_when_not_converged(small_series):
    with pytest.warns(RuntimeWarning, match="R-hat"):
        res = run_chain(small_series, n_steps=30, burn_in=10, seed=0)
    assert not res.converged and res.warnings


def test_run_chain_empty_mask(small_series):
    res = run_chain(small_series, mask=np.zeros((3, 3), dtype=bool))
    assert res.medians.shape == (0, 5) and res.chains == []


def test_run_chain_rejects_short_chain(small_series):
    with pytest.raises(ValueError):
        run_chain(small_series, n_steps=100, burn_in=100)
