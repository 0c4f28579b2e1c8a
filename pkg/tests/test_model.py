import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkobs.errors import DimensionError, InvalidParameter, InvalidWindow, SingularDynamics, TopologyMismatch
from dkobs.harness.scenario import generate_scenario
from dkobs.model import (
    AgentModel,
    NetworkModel,
    RelativeMeasurement,
    double_integrator,
    measure,
    observability_gramian,
    smallest_observable_window,
    step_truth,
    transition,
    verify_assumptions,
)
from dkobs.topology import build_topology

from _support import reference_config, t2_model


def scalar_chain(a=(1.0,), anchored=(0,), edges=()):
    n = len(a)
    topo = build_topology(n, edges, anchored, 1)
    one = np.eye(1)
    agents = [
        AgentModel(A=ai * one, H_local=one if i in anchored else None, R_local=one if i in anchored else None)
        for i, ai in enumerate(a)
    ]
    rel = {e: RelativeMeasurement(one, -one, one) for e in topo.sensing_edges}
    return NetworkModel(topo, agents, rel)


def double_integrator_pair():
    A, B = double_integrator(0.05)
    H = np.hstack([np.eye(2), np.zeros((2, 2))])
    topo = build_topology(2, [(0, 1)], [0], 4)
    agents = [AgentModel(A=A, B=B, H_local=H, R_local=np.eye(2)), AgentModel(A=A, B=B)]
    return NetworkModel(topo, agents, {(0, 1): RelativeMeasurement(H, -H, np.eye(2))})


class TestDynamics:
    def test_identity_dynamics(self):
        m = scalar_chain(a=(1.0, 1.0), anchored=(0, 1))
        np.testing.assert_array_equal(step_truth(m, np.array([1.0, 2.0]), 0), [1.0, 2.0])

    def test_scalar_multiply(self):
        m = scalar_chain(a=(2.0,))
        np.testing.assert_array_equal(step_truth(m, np.array([3.0]), 0), [6.0])

    def test_double_integrator_step(self):
        m = double_integrator_pair()
        x = np.array([0.0, 0.0, 1.0, 0.0, 0, 0, 0, 0])
        np.testing.assert_allclose(step_truth(m, x, 0)[:4], [0.05, 0.0, 1.0, 0.0], rtol=0, atol=1e-15)

    def test_input_enters_through_B(self):
        A, B = double_integrator(0.05)
        topo = build_topology(1, [], [], 4)
        m = NetworkModel(topo, [AgentModel(A=A, B=B, u=lambda k: np.array([1.0, -2.0]))], {})
        np.testing.assert_allclose(step_truth(m, np.zeros(4), 0), [0.00125, -0.0025, 0.05, -0.1])

    def test_wrong_state_length(self):
        with pytest.raises(DimensionError):
            step_truth(scalar_chain(), np.zeros(2), 0)

    def test_time_varying_dynamics(self):
        topo = build_topology(1, [], [0], 1)
        m = NetworkModel(topo, [AgentModel(A=lambda k: np.array([[k + 1.0]]), H_local=np.eye(1), R_local=np.eye(1))], {})
        assert step_truth(m, np.array([1.0]), 3)[0] == 4.0


class TestDoubleIntegrator:
    def test_blocks(self):
        A, B = double_integrator(0.05)
        np.testing.assert_array_equal(A[:2, 2:], 0.05 * np.eye(2))
        np.testing.assert_allclose(B[:2], 0.00125 * np.eye(2))
        np.testing.assert_allclose(B[2:], 0.05 * np.eye(2))

    @given(st.floats(1e-4, 10.0))
    def test_unit_determinant_and_inverse(self, Ts):
        A, _ = double_integrator(Ts)
        assert np.isclose(np.linalg.det(A), 1.0)
        Ainv = np.kron(np.array([[1.0, -Ts], [0.0, 1.0]]), np.eye(2))
        np.testing.assert_allclose(A @ Ainv, np.eye(4), atol=1e-12)

    @pytest.mark.parametrize("Ts", [0.0, -0.1])
    def test_rejects_nonpositive(self, Ts):
        with pytest.raises(InvalidParameter):
            double_integrator(Ts)


class TestMeasure:
    def test_position_fix(self):
        m = double_integrator_pair()
        x = np.array([3.0, 4.0, 9.0, 9.0, 0, 0, 0, 0])
        np.testing.assert_array_equal(measure(m, x, 0).local[0], [3.0, 4.0])

    def test_relative(self):
        m = double_integrator_pair()
        x = np.array([1.0, 0.0, 0, 0, 0.0, 1.0, 0, 0])
        np.testing.assert_array_equal(measure(m, x, 0).relative[(0, 1)], [1.0, -1.0])

    def test_zero_state(self):
        meas = measure(double_integrator_pair(), np.zeros(8), 0)
        assert all(not np.any(v) for v in [*meas.local.values(), *meas.relative.values()])

    def test_stack_matches_global_map(self):
        m = t2_model()
        x = np.array([0.7, -0.4])
        np.testing.assert_allclose(m.stack(measure(m, x, 0)), m.H_global(0) @ x)

    def test_block_incidence_sparsity(self):
        sc = generate_scenario(reference_config(steps=10))
        H = sc.model.H_global(0)
        d = sc.topology.state_dim
        for row in H:
            touched = {c // d for c in np.flatnonzero(row)}
            assert 1 <= len(touched) <= 2
        n_local = 2 * len(sc.topology.anchors)
        for row in H[:n_local]:
            assert len({c // d for c in np.flatnonzero(row)}) == 1

    def test_anchor_mismatch_rejected(self):
        topo = build_topology(2, [(0, 1)], [0], 1)
        one = np.eye(1)
        with pytest.raises(TopologyMismatch):
            NetworkModel(topo, [AgentModel(A=one), AgentModel(A=one)], {(0, 1): RelativeMeasurement(one, -one, one)})

    def test_relative_map_mismatch_rejected(self):
        topo = build_topology(2, [(0, 1)], [], 1)
        one = np.eye(1)
        with pytest.raises(TopologyMismatch):
            NetworkModel(topo, [AgentModel(A=one), AgentModel(A=one)], {})


class TestTransitionAndGramian:
    def test_transition_identity_and_semigroup(self):
        rng = np.random.default_rng(3)
        mats = [rng.standard_normal((2, 2)) + 2 * np.eye(2) for _ in range(6)]
        topo = build_topology(1, [], [0], 2)
        m = NetworkModel(topo, [AgentModel(A=lambda k: mats[k], H_local=np.eye(2), R_local=np.eye(2))], {})
        np.testing.assert_array_equal(transition(m, 3, 3), np.eye(2))
        for k in range(1, 6):
            np.testing.assert_allclose(transition(m, k, 0), mats[k - 1] @ transition(m, k - 1, 0))

    def test_transition_window(self):
        with pytest.raises(InvalidWindow):
            transition(scalar_chain(), 1, 2)

    def test_scalar_gramian(self):
        assert observability_gramian(scalar_chain(), 1, 1).G[0, 0] == 2.0

    def test_zero_output_gramian(self):
        topo = build_topology(2, [], [], 1)
        m = NetworkModel(topo, [AgentModel(A=np.eye(1))] * 2, {})
        g = observability_gramian(m, 3, 3)
        assert g.lam_min == 0.0 and not np.any(g.G)

    def test_window_error(self):
        with pytest.raises(InvalidWindow):
            observability_gramian(scalar_chain(), 0, 1)

    def test_scenario_gramian_frozen(self):
        # oracle: dense sum of (A^s)^T H^T H A^s with H built from the edge list
        sc = generate_scenario(reference_config(steps=10))
        g = observability_gramian(sc.model, 40, 40)
        assert g.lam_min == pytest.approx(1.5020860259327589, rel=1e-9)
        assert g.lam_max == pytest.approx(1095.713583908719, rel=1e-9)
        np.testing.assert_allclose(g.G, g.G.T, atol=1e-12)
        assert np.linalg.eigvalsh(g.G).min() >= -1e-10

    def test_smallest_window(self):
        assert smallest_observable_window(scalar_chain()) == 0
        assert smallest_observable_window(t2_model()) == 0
        # positions only: velocities need a second sample
        assert smallest_observable_window(double_integrator_pair()) == 1


class TestAssumptions:
    def test_identity_dynamics(self):
        m = scalar_chain()
        rep = verify_assumptions(m, horizon=5, K=3)
        assert rep.a_bar == 1.0 and rep.a_inv == 1.0
        assert rep.alpha1 == 4.0 and rep.alpha2 == 4.0
        assert rep.passed

    def test_zero_row_is_singular(self):
        topo = build_topology(1, [], [0], 2)
        A = np.array([[1.0, 0.0], [0.0, 0.0]])
        m = NetworkModel(topo, [AgentModel(A=A, H_local=np.eye(2), R_local=np.eye(2))], {})
        with pytest.raises(SingularDynamics):
            verify_assumptions(m, 3, 1)

    def test_scenario_satisfies_assumptions(self):
        sc = generate_scenario(reference_config(steps=10))
        rep = verify_assumptions(sc.model, horizon=60, K=40)
        assert rep.passed
        assert rep.a_bar == pytest.approx((0.05 + np.sqrt(0.05**2 + 4)) / 2, rel=1e-12)
        assert rep.alpha1 == pytest.approx(1.5020860259327589, rel=1e-9)
