import itertools
import math

import numpy as np
import pytest

from htmem.autodiff import MlpParams
from htmem.cvae import CvaeModel
from htmem.plangraph import (
    NoPathError,
    Plan,
    PlanGraph,
    PlanningConfig,
    build_graph,
    jensen_bound_check,
    load_plan,
    plan_end_to_end,
    save_plan,
    scheme_weights,
    shortest_path,
)


class FixedScorer:
    """Scorer stub returning a preset logit matrix."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def pairwise_logits(self, obs, ctx):
        return self.logits


def graph_from_logits(logits, scheme="normalized", s_shortcut=0.5):
    n = len(logits)
    obs = np.zeros((n, 2))
    return build_graph(obs, FixedScorer(logits), np.zeros(2), scheme, s_shortcut)


def graph_from_weights(weights):
    w = np.array(weights, dtype=float)
    np.fill_diagonal(w, np.inf)
    n = len(w)
    return PlanGraph(np.zeros((n, 2)), np.zeros((n, n)), w, "inverse")


# ---------------------------------------------------------------------------
# independent path oracles


def brute_force_shortest(weights, start, goal):
    """Exhaustive enumeration over simple paths (positive weights make
    shortest paths simple)."""
    n = len(weights)
    best = math.inf
    nodes = [v for v in range(n) if v not in (start, goal)]
    if start == goal:
        return 0.0
    for r in range(len(nodes) + 1):
        for mid in itertools.permutations(nodes, r):
            path = (start, *mid, goal)
            total = 0.0
            ok = True
            for a, b in zip(path, path[1:]):
                w = weights[b][a]
                if not math.isfinite(w):
                    ok = False
                    break
                total += w
            if ok:
                best = min(best, total)
    return best


def bellman_ford(weights, start, goal):
    n = len(weights)
    dist = [math.inf] * n
    dist[start] = 0.0
    for _ in range(n - 1):
        changed = False
        for u in range(n):
            if not math.isfinite(dist[u]):
                continue
            for v in range(n):
                if v == u or not math.isfinite(weights[v][u]):
                    continue
                cand = dist[u] + weights[v][u]
                if cand < dist[v]:
                    dist[v] = cand
                    changed = True
        if not changed:
            break
    return dist[goal]


# ---------------------------------------------------------------------------
# weight schemes


def test_uniform_logits_normalized_weight_is_node_count():
    g = graph_from_logits(np.zeros((5, 5)), "normalized")
    off = ~np.eye(5, dtype=bool)
    assert np.allclose(g.weights[off], 5.0, atol=0)
    assert np.all(np.isinf(np.diag(g.weights)))


def test_uniform_logits_inverse_weight_is_one():
    g = graph_from_logits(np.zeros((4, 4)), "inverse")
    off = ~np.eye(4, dtype=bool)
    assert np.all(g.weights[off] == 1.0)


def test_normalized_matches_hand_computation():
    logits = np.array([[0.0, 1.0, -2.0], [0.5, 0.0, 0.3], [-1.0, 2.0, 0.0]])
    g = graph_from_logits(logits, "normalized")
    f = np.exp(logits)
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            want = f[:, j].sum() / f[i, j]
            assert g.weights[i, j] == pytest.approx(want, rel=1e-12)


def test_normalized_weights_at_least_one():
    rng = np.random.default_rng(0)
    g = graph_from_logits(rng.normal(size=(7, 7)) * 3, "normalized")
    off = ~np.eye(7, dtype=bool)
    assert np.all(g.weights[off] >= 1.0)


def test_normalized_column_shift_invariance():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 6))
    w0 = scheme_weights(logits, "normalized")
    shifted = logits.copy()
    shifted[:, 2] += 7.31  # constant added to all scores out of node 2
    w1 = scheme_weights(shifted, "normalized")
    off = ~np.eye(6, dtype=bool)
    assert np.max(np.abs(w1[off] - w0[off])) < 1e-9


def test_monotone_score_weight_relation():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 5))
    for scheme in ("inverse", "normalized"):
        w = scheme_weights(logits, scheme)
        j = 1
        order = np.argsort(logits[:, j])
        vals = [w[i, j] for i in order if i != j]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_threshold_scheme_edges_and_validation():
    logits = np.array([[0.0, 5.0], [-5.0, 0.0]])
    g = graph_from_logits(logits, "sptm_threshold", s_shortcut=0.9)
    assert np.isinf(g.weights[1, 0])  # sigmoid(-5) < 0.9: edge absent
    assert g.weights[0, 1] == 1.0
    with pytest.raises(ValueError):
        scheme_weights(logits, "sptm_threshold", s_shortcut=1.5)
    with pytest.raises(ValueError):
        scheme_weights(logits, "no_such_scheme")


def test_sptm_exp_weights_bounded_positive():
    rng = np.random.default_rng(3)
    w = scheme_weights(rng.normal(size=(4, 4)) * 100, "sptm_exp")
    off = ~np.eye(4, dtype=bool)
    assert np.all(w[off] > 0) and np.all(w[off] <= 1.0)


def test_weights_finite_for_extreme_logits():
    logits = np.array([[0.0, 500.0], [-500.0, 0.0]])
    for scheme in ("inverse", "normalized", "sptm_exp"):
        w = scheme_weights(logits, scheme)
        off = ~np.eye(2, dtype=bool)
        assert np.all(np.isfinite(w[off])), scheme
        assert np.all(w[off] > 0)


def test_build_graph_needs_two_nodes():
    with pytest.raises(ValueError):
        build_graph(np.zeros((1, 2)), FixedScorer(np.zeros((1, 1))), np.zeros(2))


# ---------------------------------------------------------------------------
# shortest path


def test_two_node_single_edge():
    g = graph_from_weights([[math.inf, 3.0], [2.5, math.inf]])
    plan = shortest_path(g, 0, 1)
    assert plan.node_indices == [0, 1]
    assert plan.total_weight == pytest.approx(2.5)
    assert np.allclose(plan.edge_weights, [2.5])


def test_start_equals_goal():
    g = graph_from_weights([[math.inf, 1.0], [1.0, math.inf]])
    plan = shortest_path(g, 0, 0)
    assert plan.node_indices == [0]
    assert plan.total_weight == 0.0
    assert len(plan.edge_weights) == 0


def test_shortest_path_vs_brute_force_100_graphs():
    rng = np.random.default_rng(4)
    for trial in range(100):
        n = int(rng.integers(3, 9))
        w = rng.uniform(0.1, 5.0, size=(n, n))
        g = graph_from_weights(w)
        plan = shortest_path(g, 0, n - 1)
        want = brute_force_shortest(g.weights, 0, n - 1)
        assert abs(plan.total_weight - want) < 1e-9, trial


def test_shortest_path_vs_bellman_ford_64_nodes():
    rng = np.random.default_rng(5)
    for trial in range(10):
        n = int(rng.integers(32, 65))
        w = rng.uniform(0.05, 4.0, size=(n, n))
        # knock out a third of the edges
        mask = rng.random((n, n)) < 0.33
        w[mask] = math.inf
        g = graph_from_weights(w)
        want = bellman_ford(g.weights, 0, n - 1)
        if math.isinf(want):
            with pytest.raises(NoPathError):
                shortest_path(g, 0, n - 1)
            continue
        plan = shortest_path(g, 0, n - 1)
        assert abs(plan.total_weight - want) < 1e-9, trial


def test_tie_break_lexicographic_smallest_sequence():
    inf = math.inf
    # two equal-cost two-hop routes 0->1->3 and 0->2->3
    w = np.full((4, 4), inf)
    w[1, 0] = 1.0  # 0 -> 1
    w[2, 0] = 1.0  # 0 -> 2
    w[3, 1] = 1.0  # 1 -> 3
    w[3, 2] = 1.0  # 2 -> 3
    g = graph_from_weights(w)
    plan = shortest_path(g, 0, 3)
    assert plan.node_indices == [0, 1, 3]


def test_no_path_under_threshold_scheme():
    logits = np.full((3, 3), -10.0)
    g = graph_from_logits(logits, "sptm_threshold", s_shortcut=0.5)
    with pytest.raises(NoPathError):
        shortest_path(g, 0, 2)


def test_path_totals_equal_edge_sums():
    rng = np.random.default_rng(6)
    w = rng.uniform(0.2, 2.0, size=(10, 10))
    g = graph_from_weights(w)
    plan = shortest_path(g, 3, 7)
    assert plan.total_weight == pytest.approx(plan.edge_weights.sum())
    assert plan.node_indices[0] == 3 and plan.node_indices[-1] == 7
    assert all(a != b for a, b in zip(plan.node_indices, plan.node_indices[1:]))


# ---------------------------------------------------------------------------
# end to end with a stub generator


def tiny_cvae(obs_dim=2, ctx_dim=2, d_z=2):
    enc = MlpParams([np.zeros((2 * d_z, obs_dim + ctx_dim))], [np.zeros(2 * d_z)], "identity")
    dec = MlpParams(
        [np.random.default_rng(0).uniform(0.1, 0.5, size=(obs_dim, d_z + ctx_dim))],
        [np.full(obs_dim, 0.4)],
        "identity",
    )
    return CvaeModel(enc, dec, obs_dim, ctx_dim, d_z)


def test_plan_end_to_end_zero_samples_is_direct_edge():
    cvae = tiny_cvae()
    scorer = FixedScorer(np.zeros((2, 2)))
    cfg = PlanningConfig(m_samples=0, scheme="inverse")
    plan, graph = plan_end_to_end(
        np.zeros(2), np.array([0.1, 0.1]), np.array([0.9, 0.9]), cvae, scorer, cfg, seed=0
    )
    assert plan.node_indices == [0, 1]
    assert graph.n_nodes == 2
    assert np.allclose(plan.observations[0], [0.1, 0.1])
    assert np.allclose(plan.observations[-1], [0.9, 0.9])


def test_plan_end_to_end_deterministic():
    cvae = tiny_cvae()

    class DistScorer:
        def pairwise_logits(self, obs, ctx):
            d = np.linalg.norm(obs[:, None, :] - obs[None, :, :], axis=2)
            return -5.0 * d.T

    cfg = PlanningConfig(m_samples=10, scheme="normalized")
    args = (np.zeros(2), np.array([0.0, 0.0]), np.array([1.0, 1.0]), cvae, DistScorer(), cfg)
    p1, _ = plan_end_to_end(*args, seed=5)
    p2, _ = plan_end_to_end(*args, seed=5)
    assert p1.node_indices == p2.node_indices
    assert p1.total_weight == p2.total_weight
    assert p1.node_indices[0] == 10 and p1.node_indices[-1] == 11


# ---------------------------------------------------------------------------
# likelihood bound


def test_jensen_equality_for_equal_weights():
    logits = np.zeros((4, 4))
    g = graph_from_logits(logits, "normalized")
    plan = shortest_path(g, 0, 3)
    lhs, rhs, holds = jensen_bound_check(g, plan)
    assert holds
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_jensen_bound_random_trials():
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(3, 10))
        g = graph_from_logits(rng.normal(size=(n, n)) * 2.0, "normalized")
        length = int(rng.integers(2, n + 1))
        idx = list(rng.choice(n, size=length, replace=False))
        edge_w = np.array([g.weights[idx[t + 1], idx[t]] for t in range(length - 1)])
        edge_l = np.array([g.logits[idx[t + 1], idx[t]] for t in range(length - 1)])
        plan = Plan(idx, g.observations[idx], edge_w, edge_l, float(edge_w.sum()), "normalized")
        _, _, holds = jensen_bound_check(g, plan)
        violations += not holds
    assert violations == 0


def test_jensen_requires_normalized_scheme_and_edges():
    g = graph_from_logits(np.zeros((3, 3)), "inverse")
    plan = shortest_path(g, 0, 2)
    with pytest.raises(ValueError):
        jensen_bound_check(g, plan)
    g2 = graph_from_logits(np.zeros((3, 3)), "normalized")
    single = Plan([0], g2.observations[[0]], np.array([]), np.array([]), 0.0, "normalized")
    with pytest.raises(ValueError):
        jensen_bound_check(g2, single)


def test_plan_json_roundtrip(tmp_path):
    g = graph_from_logits(np.random.default_rng(8).normal(size=(5, 5)), "normalized")
    plan = shortest_path(g, 0, 4)
    plan.seed = 123
    path = tmp_path / "plan.json"
    save_plan(plan, path, provenance={"config_hash": "abc"})
    loaded = load_plan(path)
    assert loaded.node_indices == plan.node_indices
    assert loaded.total_weight == plan.total_weight
    assert np.array_equal(loaded.observations, plan.observations)
    assert loaded.seed == 123
