import numpy as np
import pytest

from gridcf.causal import ValidationError, acyclicity_value
from gridcf.discovery import (
    DiscoveryConfig,
    graphs_to_json,
    learn_graphs,
    make_windows,
    shd,
    stability_profile,
)


def _two_node_sem(n, seed, weight=1.5, noise=0.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = weight * x + noise * rng.normal(size=n)
    return np.column_stack([x, y])


def _ols(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    return float(xc @ yc / (xc @ xc))


class TestLearnGraphs:
    def test_two_node_sem_recovery_matches_ols_oracle(self):
        data = _two_node_sem(1000, seed=1)
        windows = [data[:500], data[500:]]
        cfg = DiscoveryConfig(window=500, stride=500)
        graph, diags = learn_graphs(windows, cfg)
        for w, diag in enumerate(diags):
            m = graph.at(w)
            assert m[0, 1] != 0.0 and m[1, 0] == 0.0, "expected single x->y edge"
            ols = _ols(windows[w][:, 0], windows[w][:, 1])
            assert abs(m[0, 1] - 1.5) <= 0.2
            assert abs(m[0, 1] - ols) <= 0.15
            assert diag.converged

    def test_pure_noise_gives_empty_graphs(self):
        rng = np.random.default_rng(9)
        windows = [rng.normal(size=(400, 4)) for _ in range(2)]
        graph, _ = learn_graphs(windows, DiscoveryConfig(window=400, stride=400))
        for t in range(len(graph)):
            assert not graph.support(t).any()

    def test_identical_windows_with_large_gamma_give_identical_graphs(self):
        data = _two_node_sem(1200, seed=4)
        windows = [data[:600], data[600:]]
        cfg = DiscoveryConfig(window=600, stride=600, gamma_stability=25.0)
        graph, _ = learn_graphs(windows, cfg)
        np.testing.assert_array_equal(graph.at(0), graph.at(1))

    def test_thresholded_graphs_satisfy_acyclicity(self):
        rng = np.random.default_rng(3)
        n, d = 500, 5
        w_true = np.zeros((d, d))
        w_true[0, 2], w_true[1, 2], w_true[2, 3], w_true[2, 4] = 1.2, -0.9, 1.5, 0.8
        x = np.empty((n, d))
        eps = 0.5 * rng.normal(size=(n, d))
        for j in range(d):
            x[:, j] = x[:, :j] @ w_true[:j, j] + eps[:, j] if j else eps[:, j]
        graph, diags = learn_graphs([x[:250], x[250:]], DiscoveryConfig())
        for t in range(len(graph)):
            assert acyclicity_value(graph.at(t)) <= 1e-8
        for diag in diags:
            hs = diag.accepted_h
            assert all(hs[k + 1] <= hs[k] + 1e-10 for k in range(len(hs) - 1))

    def test_scale_invariance_of_support(self):
        data = _two_node_sem(800, seed=6)
        cfg = DiscoveryConfig(window=400, stride=400)
        g1, _ = learn_graphs([data[:400], data[400:]], cfg)
        g2, _ = learn_graphs([100.0 * data[:400], 100.0 * data[400:]], cfg)
        for t in range(2):
            np.testing.assert_array_equal(g1.support(t), g2.support(t))

    def test_seeded_determinism(self):
        data = _two_node_sem(600, seed=8)
        cfg = DiscoveryConfig(window=300, stride=300)
        g1, _ = learn_graphs([data[:300], data[300:]], cfg)
        g2, _ = learn_graphs([data[:300], data[300:]], cfg)
        for t in range(2):
            np.testing.assert_array_equal(g1.at(t), g2.at(t))

    def test_mask_is_enforced(self):
        data = _two_node_sem(600, seed=2)
        mask = np.zeros((2, 2), dtype=bool)  # nothing allowed
        graph, _ = learn_graphs([data[:300], data[300:]], DiscoveryConfig(), mask=mask)
        for t in range(2):
            assert not graph.at(t).any()

    def test_input_validation(self):
        with pytest.raises(ValidationError, match="2 windows"):
            learn_graphs([np.zeros((10, 2))], DiscoveryConfig())
        bad = np.zeros((10, 2))
        bad[0, 0] = np.nan
        with pytest.raises(ValidationError, match="non-finite"):
            learn_graphs([bad, bad], DiscoveryConfig())


class TestMetrics:
    def test_shd_identical(self):
        g = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert shd(g, g) == 0

    def test_shd_spurious_edge(self):
        g_true = np.zeros((3, 3))
        g_est = g_true.copy()
        g_est[0, 1] = 0.7
        assert shd(g_est, g_true) == 1

    def test_shd_reversal_counts_one(self):
        g_true = np.zeros((2, 2))
        g_true[0, 1] = 1.0
        g_est = np.zeros((2, 2))
        g_est[1, 0] = 1.0
        assert shd(g_est, g_true) == 1

    def test_shd_threshold(self):
        g_true = np.zeros((2, 2))
        g_est = np.zeros((2, 2))
        g_est[0, 1] = 0.2
        assert shd(g_est, g_true, omega=0.3) == 0

    def test_shd_shape_mismatch(self):
        with pytest.raises(ValidationError):
            shd(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_stability_profile_constant(self):
        m = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(stability_profile([m, m, m]), [0, 0])

    def test_stability_profile_single_switch(self):
        a = np.zeros((3, 3))
        a[0, 1] = 1.0
        b = np.zeros((3, 3))
        b[0, 2] = 1.0
        profile = stability_profile([a, a, a, b, b])
        np.testing.assert_array_equal(profile, [0, 0, 2, 0])

    def test_stability_profile_alternating(self):
        a = np.zeros((2, 2))
        a[0, 1] = 1.0
        b = np.zeros((2, 2))
        profile = stability_profile([a, b, a, b])
        assert len(set(profile.tolist())) == 1

    def test_stability_profile_needs_two(self):
        with pytest.raises(ValidationError):
            stability_profile([np.zeros((2, 2))])


class TestWindowingAndExport:
    def test_make_windows_counts(self):
        data = np.arange(100, dtype=float).reshape(50, 2)
        wins, bounds = make_windows(data, 10, 10)
        assert len(wins) == 5
        assert bounds[0] == (0, 10) and bounds[-1] == (40, 50)
        wins, _ = make_windows(data, 10, 1)
        assert len(wins) == 41

    def test_make_windows_too_long(self):
        with pytest.raises(ValidationError):
            make_windows(np.zeros((5, 2)), 10, 1)

    def test_graph_json_shape(self):
        data = _two_node_sem(600, seed=12)
        wins, bounds = make_windows(data, 300, 300)
        graph, _ = learn_graphs(wins, DiscoveryConfig(window=300, stride=300))
        doc = graphs_to_json(graph, ["x", "y"], bounds)
        assert doc["nodes"] == ["x", "y"]
        assert len(doc["windows"]) == 2
        assert doc["windows"][0]["t_start"] == 0
        assert doc["windows"][0]["t_end"] == 300
        edge = doc["windows"][0]["edges"][0]
        assert edge["src"] == "x" and edge["dst"] == "y"
        assert abs(edge["weight"] - 1.5) < 0.3

    def test_piecewise_sem_switch_detected(self):
        rng = np.random.default_rng(21)

        def sem(n, fuel_col):
            x = rng.normal(size=(n, 4))
            x[:, 3] = 1.4 * x[:, fuel_col] + 0.4 * rng.normal(size=n)
            return x

        wins = [sem(400, 0) for _ in range(3)] + [sem(400, 1) for _ in range(3)]
        cfg = DiscoveryConfig(window=400, stride=400, gamma_stability=0.02)
        graph, _ = learn_graphs(wins, cfg)
        profile = stability_profile(graph)
        assert profile.argmax() == 2
        assert profile[2] > 0
