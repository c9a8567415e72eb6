import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcf.causal import (
    ClampPlan,
    DimsConfig,
    Intervention,
    InterventionSpec,
    LinearSCM,
    TemporalGraph,
    ValidationError,
    acyclicity_value,
    apply_intervention,
    is_dag,
    is_regime_change,
    linear_gaussian_counterfactual,
    model_block_mask,
    observed_block_mask,
)


class TestDims:
    def test_defaults_match_blocked_layout(self):
        dims = DimsConfig()
        assert dims.d_W == 27 and dims.d_I == 64 and dims.d_V == 35
        assert dims.d == 126
        assert dims.block_of(0) == "weather"
        assert dims.block_of(8) == "generation"
        assert dims.block_of(26) == "market"

    def test_bad_partition_rejected(self):
        with pytest.raises(ValidationError):
            DimsConfig(d_W=10, w_blocks=(("weather", 4), ("rest", 5)))

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(ValidationError):
            DimsConfig(d_I=0)


class TestAcyclicity:
    def test_zero_matrix(self):
        assert acyclicity_value(np.zeros((3, 3))) == 0.0

    def test_strictly_lower_triangular_is_exactly_zero(self):
        rng = np.random.default_rng(5)
        a = np.tril(rng.normal(size=(5, 5)) * 3.0, k=-1)
        assert acyclicity_value(a) == 0.0

    def test_two_cycle_closed_form(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = np.e + np.exp(-1.0) - 2.0
        assert acyclicity_value(a) == pytest.approx(expected, abs=1e-9)
        assert acyclicity_value(a) == pytest.approx(1.086161, abs=1e-6)

    def test_rejects_nonsquare_and_nonfinite(self):
        with pytest.raises(ValidationError):
            acyclicity_value(np.zeros((2, 3)))
        bad = np.zeros((2, 2))
        bad[0, 1] = np.inf
        with pytest.raises(ValidationError):
            acyclicity_value(bad)

    def test_matches_dfs_on_all_binary_adjacencies_d3(self):
        d = 3
        off_diag = [(i, j) for i in range(d) for j in range(d) if i != j]
        for bits in itertools.product([0, 1], repeat=len(off_diag)):
            a = np.zeros((d, d))
            for (i, j), bit in zip(off_diag, bits):
                a[i, j] = bit
            assert (acyclicity_value(a) <= 1e-9) == is_dag(a != 0)

    @given(st.integers(min_value=0, max_value=2**12 - 1))
    @settings(max_examples=200, deadline=None)
    def test_weighted_support_equivalence_d4(self, code):
        d = 4
        rng = np.random.default_rng(code)
        a = np.zeros((d, d))
        positions = [(i, j) for i in range(d) for j in range(d) if i != j]
        for k, (i, j) in enumerate(positions):
            if (code >> k) & 1:
                a[i, j] = rng.uniform(0.2, 2.0)
        assert (acyclicity_value(a) <= 1e-9) == is_dag(a != 0)


class TestRegimeChange:
    def test_identical_inputs(self):
        g = np.array([[0.0, 1.0], [0.0, 0.0]])
        m = np.array([0.5, -0.25])
        changed, (edits, linf) = is_regime_change(g, g, m, m, 0.3, 0.1)
        assert not changed and edits == 0 and linf == 0.0

    def test_support_change_fires(self):
        g0 = np.zeros((2, 2))
        g1 = np.zeros((2, 2))
        g1[0, 1] = 0.5
        changed, (edits, linf) = is_regime_change(g1, g0, [1.0], [1.0], edge_tol=0.3)
        assert changed and edits == 1 and linf == 0.0

    def test_mechanism_shift_fires(self):
        g = np.array([[0.0, 0.7], [0.0, 0.0]])
        mech_tol = 0.05
        changed, (edits, linf) = is_regime_change(
            g, g, [1.0 + 2 * mech_tol], [1.0], edge_tol=0.3, mech_tol=mech_tol
        )
        assert changed and edits == 0 and linf == pytest.approx(2 * mech_tol)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            is_regime_change(np.zeros((2, 2)), np.zeros((3, 3)), [1.0], [1.0])


def _toy_graph(dims: DimsConfig, t_len: int) -> TemporalGraph:
    a = np.zeros((dims.d, dims.d))
    a[0, dims.d_W] = 0.8  # W0 -> I0
    a[1, 0] = 0.5  # W1 -> W0
    a[dims.d_W, dims.d_W + dims.d_I] = 1.2  # I0 -> V0
    return TemporalGraph([a], np.zeros(t_len, dtype=int), mask=model_block_mask(dims))


class TestIntervention:
    dims = DimsConfig(d_W=3, d_I=2, d_V=2, w_blocks=(("weather", 2), ("market", 1)))

    def test_spec_validation(self):
        spec = InterventionSpec(2, 3, (Intervention(0, "set", 1.0),))
        spec.validate(self.dims.d_W, 5)
        with pytest.raises(ValidationError):
            InterventionSpec(3, 2, ()).validate(3, 5)
        with pytest.raises(ValidationError):
            InterventionSpec(1, 9, ()).validate(3, 5)
        with pytest.raises(ValidationError):
            InterventionSpec(1, 2, (Intervention(7, "set", 0.0),)).validate(3, 5)
        with pytest.raises(ValidationError):
            InterventionSpec(
                1, 2, (Intervention(0, "set", 0.0), Intervention(0, "scale", 2.0))
            ).validate(3, 5)
        with pytest.raises(ValidationError):
            Intervention(0, "nudge", 1.0)

    def test_null_spec_leaves_graph_untouched(self):
        graph = _toy_graph(self.dims, 4)
        (mech, plan), out = apply_intervention(None, graph, InterventionSpec.null(), self.dims)
        assert out is graph or all(
            np.array_equal(out.at(t), graph.at(t)) for t in range(len(graph))
        )
        assert not plan.active(0)

    def test_set_surgery_cuts_in_edges_in_window_only(self):
        graph = _toy_graph(self.dims, 4)
        spec = InterventionSpec(2, 3, (Intervention(0, "set", 1.0),))
        _, out = apply_intervention(None, graph, spec, self.dims)
        for t in range(4):
            in_w0 = out.at(t)[:, 0]
            if t in (1, 2):  # 0-based steps for 1-based window [2, 3]
                assert np.all(in_w0 == 0.0)
            else:
                assert in_w0[1] == 0.5
            # edges not pointing at the target are untouched
            assert out.at(t)[0, self.dims.d_W] == 0.8

    def test_idempotence(self):
        graph = _toy_graph(self.dims, 4)
        spec = InterventionSpec(1, 4, (Intervention(1, "scale", 1.3),))
        _, once = apply_intervention(None, graph, spec, self.dims)
        _, twice = apply_intervention(None, once, spec, self.dims)
        for t in range(4):
            np.testing.assert_array_equal(once.at(t), twice.at(t))

    def test_clamp_plan_modes(self):
        spec = InterventionSpec(
            1, 2, (Intervention(0, "set", 5.0), Intervention(2, "scale", 2.0))
        )
        plan = ClampPlan(spec, 3, 4)
        row = np.array([1.0, 1.0, 1.0])
        factual = np.array([9.0, 9.0, 3.0])
        out = plan.apply(row, factual, 0)
        np.testing.assert_array_equal(out, [5.0, 1.0, 6.0])
        out = plan.apply(row, factual, 3)  # outside window
        np.testing.assert_array_equal(out, row)


class TestLinearCounterfactual:
    def test_null_spec_is_identity(self):
        rng = np.random.default_rng(3)
        a = np.triu(rng.normal(size=(4, 4)), k=1)
        b = rng.normal(size=(4, 4)) * 0.2
        scm = LinearSCM(a, b)
        x = rng.normal(size=(6, 4))
        out = linear_gaussian_counterfactual(scm, x, InterventionSpec.null())
        np.testing.assert_array_equal(out, x)

    def test_two_node_fixture(self):
        # x = u_x, y = 2x + u_y; observed (1, 3); do(x = 2) gives y* = 5
        scm = LinearSCM(np.array([[0.0, 2.0], [0.0, 0.0]]))
        observed = np.array([[1.0, 3.0]])
        spec = InterventionSpec(1, 1, (Intervention(0, "set", 2.0),))
        out = linear_gaussian_counterfactual(scm, observed, spec)
        np.testing.assert_allclose(out, [[2.0, 5.0]], atol=1e-12)

    def test_chain_fixture(self):
        # x -> y -> z with unit weights, observed (1, 2, 3), do(y = 0) -> z* = 1
        a = np.zeros((3, 3))
        a[0, 1] = 1.0
        a[1, 2] = 1.0
        scm = LinearSCM(a)
        spec = InterventionSpec(1, 1, (Intervention(1, "set", 0.0),))
        out = linear_gaussian_counterfactual(scm, np.array([[1.0, 2.0, 3.0]]), spec)
        np.testing.assert_allclose(out, [[1.0, 0.0, 1.0]], atol=1e-12)

    def test_scale_mode_fixture(self):
        # y = 2x + u_y with x scaled by 1.5: x* = 1.5, y* = 3 + 1 = 4
        scm = LinearSCM(np.array([[0.0, 2.0], [0.0, 0.0]]))
        spec = InterventionSpec(1, 1, (Intervention(0, "scale", 1.5),))
        out = linear_gaussian_counterfactual(scm, np.array([[1.0, 3.0]]), spec)
        np.testing.assert_allclose(out, [[1.5, 4.0]], atol=1e-12)

    def test_lagged_effects_propagate(self):
        # single node with self-lag 0.5; u recovered then replayed with do at t=2
        a = np.zeros((1, 1))
        b = np.array([[0.5]])
        scm = LinearSCM(a, b)
        x = np.array([[1.0], [1.5], [1.75]])
        spec = InterventionSpec(2, 2, (Intervention(0, "set", 10.0),))
        out = linear_gaussian_counterfactual(scm, x, spec)
        # u_3 = 1.75 - 0.75 = 1.0, so x3* = 0.5 * 10 + 1.0
        np.testing.assert_allclose(out[:, 0], [1.0, 10.0, 6.0], atol=1e-12)

    def test_intervened_node_ignores_upstream_perturbation(self):
        a = np.zeros((3, 3))
        a[0, 1] = 1.0
        a[1, 2] = 1.0
        scm = LinearSCM(a)
        spec = InterventionSpec(1, 1, (Intervention(1, "set", 0.0),))
        base = np.array([[1.0, 2.0, 3.0]])
        bumped = base.copy()
        bumped[0, 0] += 10.0  # x is non-ancestral to the clamped y and to u_z
        out_a = linear_gaussian_counterfactual(scm, base, spec)
        out_b = linear_gaussian_counterfactual(scm, bumped, spec)
        assert out_a[0, 1] == out_b[0, 1] == 0.0
        assert out_a[0, 2] == out_b[0, 2]

    def test_rejects_cyclic_and_nonfinite(self):
        cyc = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ValidationError):
            linear_gaussian_counterfactual(
                LinearSCM(cyc), np.ones((1, 2)), InterventionSpec.null()
            )
        scm = LinearSCM(np.zeros((2, 2)))
        with pytest.raises(ValidationError):
            linear_gaussian_counterfactual(
                scm, np.array([[np.nan, 1.0]]), InterventionSpec.null()
            )


class TestTemporalGraph:
    def test_validation_catches_diag_mask_and_cycles(self):
        dims = DimsConfig(d_W=2, d_I=2, d_V=2, w_blocks=(("weather", 2),))
        mask = model_block_mask(dims)
        bad_diag = np.zeros((6, 6))
        bad_diag[1, 1] = 0.5
        with pytest.raises(ValidationError, match="diagonal"):
            TemporalGraph([bad_diag], mask=mask)
        off_mask = np.zeros((6, 6))
        off_mask[4, 0] = 1.0  # V -> W forbidden
        with pytest.raises(ValidationError, match="mask"):
            TemporalGraph([off_mask], mask=mask)
        cyc = np.zeros((6, 6))
        cyc[0, 1] = 1.0
        cyc[1, 0] = 1.0
        with pytest.raises(ValidationError, match="acyclicity"):
            TemporalGraph([cyc], mask=mask)

    def test_observed_mask_forbids_v_to_w(self):
        mask = observed_block_mask(2, 3)
        assert not mask[2:, :2].any()
        assert mask[:2, 2:].all()
        assert not mask.diagonal().any()

    def test_step_indexing(self):
        m0, m1 = np.zeros((2, 2)), np.zeros((2, 2))
        m1[0, 1] = 1.0
        g = TemporalGraph([m0, m1], [0, 0, 1, 1, 0])
        assert len(g) == 5
        assert g.at(2)[0, 1] == 1.0
        assert g.at(4)[0, 1] == 0.0
        assert g.support(2)[0, 1]
