"""Polynomial chaos regression, uncertainty propagation and constraint tightening."""
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from app.core.exceptions import RankDeficiencyError, UncertaintyDivergenceError
from app.engines.uncertainty.pce import (
    UNCERTAIN_COMPONENTS,
    PceBasis,
    backoffs,
    build_sample_pack,
    draw_samples,
    dump_node_uncertainty,
    kappa_from_p,
    pce_coefficients,
    pce_moments,
    propagate_uncertainty,
    robustified_bound,
    total_degree_indices,
)
from app.engines.vehicle.dynamics import VehicleState
from app.models.experiment import DisturbanceRanges, SnmpcParams

SIGMA = [0.2, 0.2, 0.01, 0.8, 0.6, 0.06, 0.001]


@pytest.fixture
def cornering_state():
    return VehicleState(x_pos=0.0, y_pos=0.0, psi=0.0, v_lon=20.0, psi_dot=0.15, a=0.5)


class TestKappaAndBound:
    @pytest.mark.parametrize("p, kappa", [(0.5, 1.0), (1.0, 0.0), (0.2, 2.0)])
    def test_kappa_from_p(self, p, kappa):
        assert kappa_from_p(p) == pytest.approx(kappa)

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
    def test_kappa_domain(self, p):
        with pytest.raises(ValueError):
            kappa_from_p(p)

    def test_robustified_bound(self):
        assert robustified_bound(0.7, 0.3, 0.0) == 0.7
        assert robustified_bound(0.7, 0.0, 1.8) == 0.7
        assert robustified_bound(0.8, 0.01, 2.0) == pytest.approx(1.0)

    def test_bound_is_monotone(self):
        kappas = np.linspace(0, 2, 11)
        variances = np.linspace(0, 0.5, 11)
        by_kappa = [robustified_bound(0.5, 0.04, k) for k in kappas]
        by_var = [robustified_bound(0.5, v, 1.0) for v in variances]
        assert np.all(np.diff(by_kappa) >= 0)
        assert np.all(np.diff(by_var) >= 0)

    def test_bound_rejects_negative_inputs(self):
        with pytest.raises(ValueError):
            robustified_bound(0.5, -0.1, 1.0)
        with pytest.raises(ValueError):
            robustified_bound(0.5, 0.1, -1.0)


class TestBasis:
    def test_term_count(self):
        assert PceBasis(3, 2).L == 10
        assert len(total_degree_indices(2, 3)) == math.comb(5, 3)

    def test_constant_term_first(self):
        alphas = total_degree_indices(3, 2)
        assert tuple(alphas[0]) == (0, 0, 0)
        assert [tuple(a) for a in alphas[1:4]] == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]

    def test_orthonormal_under_gaussian_measure(self):
        germ = np.random.default_rng(0).standard_normal((200_000, 3))
        phi = PceBasis().evaluate(germ)
        gram = phi.T @ phi / germ.shape[0]
        assert_allclose(gram, np.eye(10), atol=0.05)


class TestSamples:
    def test_zero_sigma_gives_identical_samples(self, cornering_state, rng):
        pack = draw_samples(cornering_state, [0.0] * 7, 20, rng)
        assert np.all(pack.state_samples == cornering_state.as_array())

    def test_only_uncertain_components_are_perturbed(self, cornering_state, rng):
        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        untouched = [i for i in range(8) if i not in UNCERTAIN_COMPONENTS]
        assert np.all(pack.state_samples[:, untouched] == cornering_state.as_array()[untouched])
        for j, component in enumerate(UNCERTAIN_COMPONENTS):
            offset = pack.state_samples[:, component] - cornering_state.as_array()[component]
            assert_allclose(offset, pack.germ_points[:, j] * SIGMA[3 + j])

    def test_law_of_large_numbers(self, cornering_state, rng):
        sigma = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        pack = draw_samples(cornering_state, sigma, 100_000, rng)
        v_lon = pack.state_samples[:, 3]
        assert abs(v_lon.mean() - 20.0) < 3.0 / math.sqrt(100_000)
        assert v_lon.std() == pytest.approx(1.0, rel=0.02)

    def test_same_seed_same_pack(self, cornering_state):
        a = draw_samples(cornering_state, SIGMA, 20, np.random.default_rng(7))
        b = draw_samples(cornering_state, SIGMA, 20, np.random.default_rng(7))
        assert np.array_equal(a.germ_points, b.germ_points)
        assert np.array_equal(a.state_samples, b.state_samples)

    def test_pseudoinverse_is_left_inverse(self, cornering_state, rng):
        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        assert_allclose(pack.regression_pseudoinverse @ pack.basis_matrix, np.eye(10), atol=1e-8)

    def test_too_few_samples(self, cornering_state, rng):
        with pytest.raises(ValueError):
            draw_samples(cornering_state, SIGMA, 9, rng)


class TestCoefficients:
    @pytest.fixture
    def pack(self, cornering_state, rng):
        return draw_samples(cornering_state, SIGMA, 20, rng)

    def test_constant_function(self, pack):
        c = pce_coefficients(np.full(20, 5.0), pack)
        assert c[0] == pytest.approx(5.0, abs=1e-10)
        assert_allclose(c[1:], 0.0, atol=1e-10)

    def test_linear_function(self, pack):
        c = pce_coefficients(pack.germ_points[:, 0], pack)
        assert c[1] == pytest.approx(1.0, abs=1e-8)
        mean, var = pce_moments(c)
        assert mean == pytest.approx(0.0, abs=1e-8)
        assert var == pytest.approx(1.0, abs=1e-8)

    def test_quadratic_function(self, pack):
        mean, var = pce_moments(pce_coefficients(pack.germ_points[:, 0] ** 2, pack))
        assert mean == pytest.approx(1.0, abs=1e-8)
        assert var == pytest.approx(2.0, abs=1e-8)

    def test_matrix_of_values(self, pack):
        values = np.column_stack([np.full(20, 2.0), pack.germ_points[:, 1]])
        assert pce_coefficients(values, pack).shape == (10, 2)

    def test_non_finite_values_rejected(self, pack):
        values = np.zeros(20)
        values[3] = np.nan
        with pytest.raises(ValueError):
            pce_coefficients(values, pack)

    def test_ill_conditioned_pack(self, cornering_state):
        germ = np.zeros((20, 3))
        pack = build_sample_pack(cornering_state, SIGMA, germ)
        with pytest.raises(RankDeficiencyError):
            pce_coefficients(np.ones(20), pack)


class TestPropagation:
    def test_zero_sigma_matches_nominal_rollout(self, cornering_state, snmpc_config, vehicle, rng):
        n = snmpc_config.n_nodes
        controls = np.tile([0.1, 0.01], (n, 1))
        pack = draw_samples(cornering_state, [0.0] * 7, 20, rng)
        nodes = propagate_uncertainty(pack, controls, SnmpcParams(kappa=1.0, N_u=n), snmpc_config, vehicle)
        assert len(nodes) == n
        assert all(node.h_var == 0.0 for node in nodes)

        params_short = SnmpcParams(kappa=1.0, N_u=1)
        nominal = propagate_uncertainty(pack, controls, params_short, snmpc_config, vehicle)
        for a, b in zip(nodes, nominal):
            assert_allclose(a.mean_state, b.mean_state, atol=1e-9)

    @pytest.mark.parametrize("n_u", [1, 5, 25])
    def test_no_variance_beyond_uph(self, cornering_state, snmpc_config, vehicle, rng, n_u):
        n = snmpc_config.n_nodes
        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        nodes = propagate_uncertainty(pack, np.zeros((n, 2)), SnmpcParams(kappa=1.0, N_u=n_u), snmpc_config, vehicle)
        assert nodes[0].h_var > 0.0
        assert all(node.h_var == 0.0 for node in nodes[n_u:])
        assert all(node.h_var >= 0.0 for node in nodes)
        assert [node.node for node in nodes] == list(range(n))

    def test_deterministic(self, cornering_state, snmpc_config, vehicle):
        n = snmpc_config.n_nodes
        runs = []
        for _ in range(2):
            pack = draw_samples(cornering_state, SIGMA, 20, np.random.default_rng(3))
            runs.append(propagate_uncertainty(pack, np.zeros((n, 2)), SnmpcParams(kappa=1.0, N_u=10), snmpc_config, vehicle))
        for a, b in zip(*runs):
            assert a.h_mean == b.h_mean and a.h_var == b.h_var
            assert np.array_equal(a.mean_state, b.mean_state)

    def test_linear_gaussian_closed_form(self, cornering_state, snmpc_config, rng):
        n = snmpc_config.n_nodes
        A_c = -0.5 * np.eye(8) + 0.2 * np.diag(np.ones(7), k=1)
        A_d = expm(A_c * snmpc_config.T_s)
        weights = np.array([0.0, 0.0, 0.0, 0.3, -0.5, 1.2, 0.0, 0.1])

        def step_fn(states, u):
            return states @ A_d.T

        def constraint_fn(states, u):
            return states @ weights

        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        nodes = propagate_uncertainty(
            pack, np.zeros((n, 2)), SnmpcParams(kappa=1.0, N_u=n), snmpc_config,
            step_fn=step_fn, constraint_fn=constraint_fn,
        )

        cov0 = np.zeros((8, 8))
        for j, component in enumerate(UNCERTAIN_COMPONENTS):
            cov0[component, component] = SIGMA[3 + j] ** 2
        mc = np.random.default_rng(11).standard_normal((100_000, 3))
        mc_states = np.tile(cornering_state.as_array(), (100_000, 1))
        for j, component in enumerate(UNCERTAIN_COMPONENTS):
            mc_states[:, component] += mc[:, j] * SIGMA[3 + j]

        for t in (0, 5, n - 1):
            transition = np.linalg.matrix_power(A_d, t)
            exact_var = weights @ transition @ cov0 @ transition.T @ weights
            assert nodes[t].h_var == pytest.approx(exact_var, rel=0.05)

            h_mc = (mc_states @ np.linalg.matrix_power(A_d, t).T) @ weights
            std_err = h_mc.var() * math.sqrt(2.0 / len(h_mc))
            assert abs(nodes[t].h_var - h_mc.var()) < 4.0 * std_err + 1e-9 * exact_var

    def test_divergent_samples(self, cornering_state, snmpc_config, rng):
        n = snmpc_config.n_nodes

        def exploding(states, u):
            return states * 5.0

        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        with pytest.raises(UncertaintyDivergenceError) as info:
            propagate_uncertainty(
                pack, np.zeros((n, 2)), SnmpcParams(kappa=1.0, N_u=n), snmpc_config, step_fn=exploding,
            )
        assert info.value.node == 2

    def test_domain_error_maps_to_divergence(self, snmpc_config, vehicle, rng):
        n = snmpc_config.n_nodes
        slow = VehicleState(x_pos=0.0, y_pos=0.0, psi=0.0, v_lon=0.5)
        pack = draw_samples(slow, [0, 0, 0, 2.0, 0, 0, 0], 20, np.random.default_rng(5))
        assert np.any(pack.state_samples[:, 3] < 0)
        with pytest.raises(UncertaintyDivergenceError):
            propagate_uncertainty(pack, np.zeros((n, 2)), SnmpcParams(kappa=1.0, N_u=n), snmpc_config, vehicle)

    def test_control_shape_checked(self, cornering_state, snmpc_config, vehicle, rng):
        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        with pytest.raises(ValueError):
            propagate_uncertainty(pack, np.zeros((3, 2)), SnmpcParams(kappa=1.0, N_u=2), snmpc_config, vehicle)

    def test_uph_beyond_horizon_rejected(self, cornering_state, snmpc_config, vehicle, rng):
        n = snmpc_config.n_nodes
        pack = draw_samples(cornering_state, SIGMA, 20, rng)
        with pytest.raises(ValueError):
            propagate_uncertainty(pack, np.zeros((n, 2)), SnmpcParams(kappa=1.0, N_u=n + 1), snmpc_config, vehicle)


def test_backoffs_and_dump(cornering_state, snmpc_config, vehicle, rng, tmp_path):
    n = snmpc_config.n_nodes
    pack = draw_samples(cornering_state, DisturbanceRanges().midpoints(), 20, rng)
    nodes = propagate_uncertainty(pack, np.zeros((n, 2)), SnmpcParams(kappa=0.5, N_u=4), snmpc_config, vehicle)
    tightening = backoffs(nodes, 0.5)
    assert tightening.shape == (n,)
    assert_allclose(tightening[:4], 0.5 * np.sqrt([node.h_var for node in nodes[:4]]))
    assert np.all(tightening[4:] == 0.0)

    path = tmp_path / "nodes.csv"
    dump_node_uncertainty(nodes, str(path))
    frame = pd.read_csv(path)
    assert len(frame) == n
    assert {"node", "h_mean", "h_var", "mean_v_lon"} <= set(frame.columns)
