import numpy as np
import pytest

from lexa import augment as ag
from lexa.features import FeaturedCasePair
from lexa.graphs import RelationTriplet, build_case_graph

T = RelationTriplet

# 99.9% two-sided normal quantile for the binomial interval checks
Z999 = 3.2905


def make_pair(n_fact=5, n_issue=3, dim=16, include_global=True, seed=0):
    rng = np.random.default_rng(seed)
    fact = build_case_graph([T(f"f{i}", f"r{i}", f"f{i+1}") for i in range(n_fact)],
                            include_global=include_global)
    issue = build_case_graph([T(f"i{i}", f"s{i}", f"i{i+1}") for i in range(n_issue)],
                             include_global=include_global,
                             node_id_offset=fact.num_nodes, edge_id_offset=fact.num_edges)

    def dense(rows):
        return rng.uniform(0.1, 1.0, size=(rows, dim))  # strictly nonzero entries

    return FeaturedCasePair(
        case_id="c1", fact_graph=fact, issue_graph=issue,
        fact_node_features=dense(fact.num_nodes),
        issue_node_features=dense(issue.num_nodes),
        fact_edge_features=dense(fact.num_edges),
        issue_edge_features=dense(issue.num_edges),
        dim=dim,
    )


class TestEdgeDrop:
    def test_epsilon_zero_is_exact_identity(self):
        pair = make_pair()
        out = ag.edge_drop(pair, 0.0, np.random.default_rng(1))
        assert out.fact_graph is pair.fact_graph
        np.testing.assert_array_equal(out.fact_edge_features, pair.fact_edge_features)

    def test_epsilon_one_drops_all_relations_keeps_global_links(self):
        pair = make_pair()
        out = ag.edge_drop(pair, 1.0, np.random.default_rng(2))
        assert len(out.fact_graph.relation_edges()) == 0
        assert len(out.issue_graph.relation_edges()) == 0
        expected_links = sum(1 for e in pair.fact_graph.edges if e.kind == "global_link")
        assert sum(1 for e in out.fact_graph.edges if e.kind == "global_link") == expected_links

    def test_node_set_and_node_features_untouched(self):
        pair = make_pair()
        out = ag.edge_drop(pair, 0.5, np.random.default_rng(3))
        assert out.fact_graph.num_nodes == pair.fact_graph.num_nodes
        assert out.fact_graph.global_node() is not None
        np.testing.assert_array_equal(out.fact_node_features, pair.fact_node_features)

    def test_feature_rows_follow_surviving_edges(self):
        pair = make_pair()
        out = ag.edge_drop(pair, 0.5, np.random.default_rng(4))
        assert out.fact_edge_features.shape[0] == out.fact_graph.num_edges
        surviving = {e.edge_id for e in out.fact_graph.edges}
        for pos, edge in enumerate(pair.fact_graph.edges):
            if edge.edge_id in surviving:
                new_pos = [e.edge_id for e in out.fact_graph.edges].index(edge.edge_id)
                np.testing.assert_array_equal(
                    out.fact_edge_features[new_pos], pair.fact_edge_features[pos])

    def test_identical_seed_identical_view(self):
        pair = make_pair()
        a = ag.edge_drop(pair, 0.4, np.random.default_rng(9))
        b = ag.edge_drop(pair, 0.4, np.random.default_rng(9))
        assert [e.edge_id for e in a.fact_graph.edges] == [e.edge_id for e in b.fact_graph.edges]

    def test_kept_count_within_binomial_interval(self):
        # 200 relation edges at eps=0.5 over 500 seeds, pooled Binomial(100000, 0.5)
        pair = make_pair(n_fact=200, n_issue=0, include_global=False, dim=4)
        total_kept = 0
        for seed in range(500):
            out = ag.edge_drop(pair, 0.5, np.random.default_rng(seed))
            total_kept += len(out.fact_graph.relation_edges())
        n, p = 500 * 200, 0.5
        margin = Z999 * np.sqrt(n * p * (1 - p))
        assert abs(total_kept - n * p) <= margin, total_kept


class TestFeatureMask:
    def test_p_zero_identity(self):
        pair = make_pair()
        out = ag.feature_mask(pair, "node", 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.fact_node_features, pair.fact_node_features)
        np.testing.assert_array_equal(out.issue_node_features, pair.issue_node_features)

    def test_p_one_zeroes_everything_keeps_shape(self):
        pair = make_pair()
        out = ag.feature_mask(pair, "edge", 1.0, np.random.default_rng(0))
        assert out.fact_edge_features.shape == pair.fact_edge_features.shape
        assert not out.fact_edge_features.any()
        assert not out.issue_edge_features.any()
        np.testing.assert_array_equal(out.fact_node_features, pair.fact_node_features)

    def test_masking_is_column_wise(self):
        pair = make_pair(dim=32)
        out = ag.feature_mask(pair, "node", 0.5, np.random.default_rng(7))
        zero_cols = ~out.fact_node_features.any(axis=0)
        kept_cols = ~zero_cols
        np.testing.assert_array_equal(
            out.fact_node_features[:, kept_cols], pair.fact_node_features[:, kept_cols])
        assert (out.fact_node_features[:, zero_cols] == 0).all()

    def test_topology_untouched(self):
        pair = make_pair()
        out = ag.feature_mask(pair, "node", 0.9, np.random.default_rng(1))
        assert out.fact_graph is pair.fact_graph
        assert out.issue_graph is pair.issue_graph

    def test_masked_column_count_within_binomial_interval(self):
        # one width-100 mask per seed at p=0.3, pooled Binomial(50000, 0.3)
        pair = make_pair(n_fact=3, n_issue=0, include_global=True, dim=100)
        total_masked = 0
        for seed in range(500):
            out = ag.feature_mask(pair, "node", 0.3, np.random.default_rng(seed))
            total_masked += int((~out.fact_node_features.any(axis=0)).sum())
        n, p = 500 * 100, 0.3
        margin = Z999 * np.sqrt(n * p * (1 - p))
        assert abs(total_masked - n * p) <= margin, total_masked

    def test_fact_and_issue_masks_are_independent_draws(self):
        pair = make_pair(dim=64)
        out = ag.feature_mask(pair, "node", 0.5, np.random.default_rng(3))
        fact_mask = ~out.fact_node_features.any(axis=0)
        issue_mask = ~out.issue_node_features.any(axis=0)
        assert not np.array_equal(fact_mask, issue_mask)


class TestConfig:
    def test_unknown_method_rejected(self):
        with pytest.raises(ag.AugmentError, match="one method per view"):
            ag.AugmentConfig(method="edge_drop+feat_mask_node").validate()

    def test_probability_ranges(self):
        with pytest.raises(ag.AugmentError, match="epsilon"):
            ag.AugmentConfig(epsilon=1.5).validate()

    def test_dispatcher_none_returns_same_pair(self):
        pair = make_pair()
        cfg = ag.AugmentConfig(method="none")
        assert ag.apply_augmentation(pair, cfg, np.random.default_rng(0)) is pair

    def test_dispatcher_routes_each_method(self):
        pair = make_pair()
        rng = np.random.default_rng(5)
        dropped = ag.apply_augmentation(pair, ag.AugmentConfig(method="edge_drop", epsilon=1.0), rng)
        assert len(dropped.fact_graph.relation_edges()) == 0
        masked = ag.apply_augmentation(
            pair, ag.AugmentConfig(method="feat_mask_edge", p_edge=1.0), rng)
        assert not masked.fact_edge_features.any()
