import numpy as np
import pytest

from lexa import autodiff as ad
from lexa import model as md
from lexa.features import StubProvider, attach_features, get_templates
from lexa.graphs import CaseDocument, CaseGraph, GraphEdge, GraphNode, RelationTriplet, build_case_pair

T = RelationTriplet


def two_node_graph():
    nodes = [GraphNode(0, "A", "entity"), GraphNode(1, "B", "entity")]
    edges = [GraphEdge(0, 0, 1, "relation", "r")]
    return CaseGraph(nodes=nodes, edges=edges)


def featured_pair(dim=8, seed=3, n_fact=3, n_issue=2, include_global=True, case_id="c1"):
    fact = [T(f"f{i}", f"rf{i}", f"f{i+1}") for i in range(n_fact)]
    issue = [T(f"i{i}", f"ri{i}", f"i{i+1}") for i in range(n_issue)]
    doc = CaseDocument(
        case_id=case_id,
        fact_text=" ".join(t.clause() for t in fact) or "",
        issue_text=" ".join(t.clause() for t in issue) or "",
        fact_triplets=fact,
        issue_triplets=issue,
    )
    fg, ig = build_case_pair(doc, include_global=include_global)
    return attach_features(doc, fg, ig, StubProvider(dim, seed), get_templates("p0"))


def config(**kw):
    base = dict(layers=2, heads=1, dim=8, dropout=0.0)
    base.update(kw)
    cfg = md.ModelConfig(**base)
    cfg.validate()
    return cfg


class TestInitParams:
    def test_same_seed_bit_identical(self):
        cfg = config(heads=2)
        a = md.init_params(cfg, 42)
        b = md.init_params(cfg, 42)
        assert a.tensors.keys() == b.tensors.keys()
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)

    def test_parameter_inventory(self):
        cfg = config(layers=2, heads=2)
        params = md.init_params(cfg, 0)
        assert len(params.tensors) == 2 * 2 * 4  # two matrices + two attention vectors each

    def test_glorot_bounds_hold_empirically(self):
        cfg = config(layers=2, heads=2, dim=8)
        mat_bound = np.sqrt(6.0 / 16)
        att_bound = np.sqrt(6.0 / 25)
        checked = 0
        for seed in range(300):
            params = md.init_params(cfg, seed)
            for name, t in params.tensors.items():
                bound = mat_bound if t.data.ndim == 2 else att_bound
                assert np.max(np.abs(t.data)) <= bound
                checked += t.data.size
        assert checked >= 10**5

    def test_gat_attention_vector_is_two_widths(self):
        params = md.init_params(config(gnn_kind="gat"), 0)
        assert params.tensors["layer0.head0.att_node"].data.shape == (16,)
        assert "layer0.head0.w_edge" not in params.tensors

    def test_gcn_single_weight_per_layer(self):
        params = md.init_params(config(gnn_kind="gcn"), 0)
        assert set(params.tensors) == {"layer0.weight", "layer1.weight"}


class TestEugatLayer:
    def test_brute_force_oracle_two_nodes_one_edge(self):
        # independent straight-line evaluation of the update rules
        graph = two_node_graph()
        h_a = np.array([0.1, -0.2])
        h_b = np.array([0.3, 0.05])
        h_e = np.array([0.07, 0.4])
        w_n = np.array([[0.2, -0.1], [0.15, 0.3]])
        w_e = np.array([[-0.25, 0.1], [0.05, 0.2]])
        att_n = np.array([0.3, -0.2, 0.12, 0.08, -0.15, 0.22])
        att_e = np.array([0.11, -0.07, 0.19, 0.23, -0.31, 0.13])
        slope = 0.01

        def leaky(x):
            return x if x >= 0 else slope * x

        pn_a, pn_b, pe = w_n @ h_a, w_n @ h_b, w_e @ h_e
        alpha = 1.0  # single in-edge softmax
        expected_b = h_b + alpha * (pn_a + pe)
        expected_a = h_a.copy()
        scalar = leaky(att_e @ np.concatenate([pn_b, pe, pn_a]))
        expected_e = h_e + scalar

        lp = md.LayerParams(
            w_node=[ad.Tensor(w_n, requires_grad=True)],
            w_edge=[ad.Tensor(w_e, requires_grad=True)],
            att_node=[ad.Tensor(att_n, requires_grad=True)],
            att_edge=[ad.Tensor(att_e, requires_grad=True)],
        )
        cfg = config(layers=1, dim=2)
        out_v, out_e = md.eugat_layer(
            ad.constant(np.stack([h_a, h_b])), ad.constant(h_e[None, :]), graph, lp, cfg)
        np.testing.assert_allclose(out_v.data[0], expected_a, atol=1e-12, rtol=0)
        np.testing.assert_allclose(out_v.data[1], expected_b, atol=1e-12, rtol=0)
        np.testing.assert_allclose(out_e.data[0], expected_e, atol=1e-12, rtol=0)

    def test_zero_params_are_exact_identity(self):
        pair = featured_pair()
        cfg = config()
        params = md.init_params(cfg, 1)
        for t in params.tensors.values():
            t.data[:] = 0.0
        h_v = ad.constant(pair.fact_node_features)
        h_e = ad.constant(pair.fact_edge_features)
        out_v, out_e = md.eugat_layer(h_v, h_e, pair.fact_graph, params.layer(0), cfg)
        np.testing.assert_array_equal(out_v.data, pair.fact_node_features)
        np.testing.assert_array_equal(out_e.data, pair.fact_edge_features)

    def test_attention_weights_sum_to_one_per_node(self):
        rng = np.random.default_rng(8)
        trips = [T("a", "r1", "b"), T("b", "r2", "c"), T("c", "r3", "a"),
                 T("a", "r4", "c"), T("d", "r5", "a")]
        doc = CaseDocument("cx", "t", "t", trips, [T("p", "q", "s")])
        fg, _ = build_case_pair(doc)
        n, e = fg.num_nodes, fg.num_edges
        cfg = config(layers=1, dim=4, heads=2)
        params = md.init_params(cfg, 5)
        collect = {}
        md.eugat_layer(ad.constant(rng.standard_normal((n, 4))),
                       ad.constant(rng.standard_normal((e, 4))),
                       fg, params.layer(0), cfg, collect=collect)
        dst = np.array([fg.node_position(edge.dst) for edge in fg.edges])
        assert len(collect["alpha"]) == 2
        for alpha in collect["alpha"]:
            for v in set(dst):
                assert abs(alpha[dst == v].sum() - 1.0) < 1e-9

    def test_node_without_in_edges_passes_through(self):
        # head-only node in a graph without a global node keeps its features
        graph = two_node_graph()
        cfg = config(layers=1, dim=2)
        params = md.init_params(cfg, 3)
        h_v = np.array([[0.5, -1.0], [0.2, 0.9]])
        h_e = np.array([[0.1, 0.1]])
        out_v, _ = md.eugat_layer(ad.constant(h_v), ad.constant(h_e), graph,
                                  params.layer(0), cfg)
        np.testing.assert_array_equal(out_v.data[0], h_v[0])

    def test_dimension_mismatch_rejected(self):
        graph = two_node_graph()
        cfg = config(layers=1, dim=4)
        params = md.init_params(cfg, 0)
        with pytest.raises(md.ModelError, match="shape"):
            md.eugat_layer(ad.constant(np.zeros((2, 2))), ad.constant(np.zeros((1, 2))),
                           graph, params.layer(0), cfg)

    def test_head_count_degeneracy(self):
        pair = featured_pair(dim=4)
        cfg1 = config(dim=4, heads=1)
        cfg2 = config(dim=4, heads=2)
        p1 = md.init_params(cfg1, 11)
        p2 = md.init_params(cfg2, 0)
        for layer in range(2):
            for head in range(2):
                for field in ("w_node", "w_edge", "att_node", "att_edge"):
                    src = p1.tensors[f"layer{layer}.head0.{field}"].data
                    p2.tensors[f"layer{layer}.head{head}.{field}"].data[:] = src
        r1 = md.case_representation(pair, p1, cfg1)
        r2 = md.case_representation(pair, p2, cfg2)
        np.testing.assert_array_equal(r1.data, r2.data)

    def test_dropout_scales_and_is_train_only(self):
        pair = featured_pair(dim=4)
        cfg = config(dim=4, dropout=0.5)
        params = md.init_params(cfg, 2)
        for t in params.tensors.values():
            t.data[:] = 0.0
        h_v = ad.constant(pair.fact_node_features)
        h_e = ad.constant(pair.fact_edge_features)
        eval_v, _ = md.eugat_layer(h_v, h_e, pair.fact_graph, params.layer(0), cfg,
                                   train_mode=False)
        np.testing.assert_array_equal(eval_v.data, pair.fact_node_features)
        train_v, _ = md.eugat_layer(h_v, h_e, pair.fact_graph, params.layer(0), cfg,
                                    train_mode=True, rng=np.random.default_rng(0))
        kept = train_v.data != 0
        np.testing.assert_allclose(train_v.data[kept], 2.0 * pair.fact_node_features[kept])


class TestBaselines:
    def test_edgegat_leaves_edges_untouched(self):
        pair = featured_pair(dim=4)
        cfg = config(dim=4, gnn_kind="edgegat")
        params = md.init_params(cfg, 7)
        h_e = ad.constant(pair.fact_edge_features)
        _, out_e = md.baseline_layer("edgegat", ad.constant(pair.fact_node_features), h_e,
                                     pair.fact_graph, params.layer(0), cfg)
        assert out_e is h_e

    def test_gcn_zero_weights_identity(self):
        pair = featured_pair(dim=4)
        cfg = config(dim=4, gnn_kind="gcn")
        params = md.init_params(cfg, 7)
        params.tensors["layer0.weight"].data[:] = 0.0
        out_v, _ = md.baseline_layer("gcn", ad.constant(pair.fact_node_features),
                                     ad.constant(pair.fact_edge_features),
                                     pair.fact_graph, params.layer(0), cfg)
        np.testing.assert_array_equal(out_v.data, pair.fact_node_features)

    def test_gat_equals_edgegat_when_edge_terms_vanish(self):
        pair = featured_pair(dim=4)
        cfg_eg = config(dim=4, gnn_kind="edgegat", layers=1)
        cfg_gat = config(dim=4, gnn_kind="gat", layers=1)
        p_eg = md.init_params(cfg_eg, 9)
        p_eg.tensors["layer0.head0.w_edge"].data[:] = 0.0
        p_gat = md.init_params(cfg_gat, 0)
        p_gat.tensors["layer0.head0.w_node"].data[:] = p_eg.tensors["layer0.head0.w_node"].data
        p_gat.tensors["layer0.head0.att_node"].data[:] = \
            p_eg.tensors["layer0.head0.att_node"].data[:8]
        zero_edges = ad.constant(np.zeros_like(pair.fact_edge_features))
        h_v = ad.constant(pair.fact_node_features)
        out_eg, _ = md.baseline_layer("edgegat", h_v, zero_edges, pair.fact_graph,
                                      p_eg.layer(0), cfg_eg)
        out_gat, _ = md.baseline_layer("gat", h_v, zero_edges, pair.fact_graph,
                                       p_gat.layer(0), cfg_gat)
        np.testing.assert_allclose(out_eg.data, out_gat.data, atol=1e-12)


class TestReadoutAndRepresentation:
    def test_global_readout_returns_global_row(self):
        pair = featured_pair(dim=4)
        h_v = ad.constant(pair.fact_node_features)
        out = md.readout(h_v, pair.fact_graph, "global_node")
        np.testing.assert_array_equal(
            out.data, pair.fact_node_features[pair.fact_graph.global_position()])

    def test_average_readout_known_matrix(self):
        graph = two_node_graph()
        h_v = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = md.readout(h_v, graph, "average")
        np.testing.assert_allclose(out.data, [2.0, 3.0])

    def test_single_node_average_is_that_row(self):
        graph = CaseGraph(nodes=[GraphNode(0, "only", "entity")], edges=[])
        out = md.readout(ad.constant(np.array([[5.0, 6.0]])), graph, "average")
        np.testing.assert_allclose(out.data, [5.0, 6.0])

    def test_global_readout_without_global_node_rejected(self):
        pair = featured_pair(dim=4, include_global=False)
        with pytest.raises(md.ModelError, match="without a global node"):
            md.readout(ad.constant(pair.fact_node_features), pair.fact_graph, "global_node")

    def test_representation_length_is_twice_dim(self):
        pair = featured_pair(dim=8)
        cfg = config(dim=8)
        rep = md.case_representation(pair, md.init_params(cfg, 3), cfg)
        assert rep.data.shape == (16,)

    def test_zero_params_concat_of_global_inputs(self):
        pair = featured_pair(dim=4)
        cfg = config(dim=4)
        params = md.init_params(cfg, 1)
        for t in params.tensors.values():
            t.data[:] = 0.0
        rep = md.case_representation(pair, params, cfg)
        expected = np.concatenate([
            pair.fact_node_features[pair.fact_graph.global_position()],
            pair.issue_node_features[pair.issue_graph.global_position()],
        ])
        np.testing.assert_array_equal(rep.data, expected)

    def test_permutation_invariance(self):
        pair = featured_pair(dim=4, n_fact=4, n_issue=3)
        cfg = config(dim=4, heads=2)
        params = md.init_params(cfg, 21)
        base = md.case_representation(pair, params, cfg)

        rng = np.random.default_rng(0)

        def permute(graph, nodes, edges):
            nperm = rng.permutation(graph.num_nodes)
            eperm = rng.permutation(graph.num_edges)
            new_graph = CaseGraph(
                nodes=[graph.nodes[i] for i in nperm],
                edges=[graph.edges[i] for i in eperm],
                node_id_offset=graph.node_id_offset,
                edge_id_offset=graph.edge_id_offset,
            )
            return new_graph, nodes[nperm], edges[eperm]

        fg, fn, fe = permute(pair.fact_graph, pair.fact_node_features, pair.fact_edge_features)
        ig, inn, ie = permute(pair.issue_graph, pair.issue_node_features, pair.issue_edge_features)
        shuffled = type(pair)(
            case_id=pair.case_id, fact_graph=fg, issue_graph=ig,
            fact_node_features=fn, issue_node_features=inn,
            fact_edge_features=fe, issue_edge_features=ie, dim=pair.dim)
        out = md.case_representation(shuffled, params, cfg)
        np.testing.assert_allclose(out.data, base.data, atol=1e-12, rtol=0)

    def test_gradients_reach_all_live_parameters(self):
        # the final layer's edge update never feeds the readout, so its
        # attention vector is the one legitimately gradient-free parameter
        pair = featured_pair(dim=4)
        cfg = config(dim=4)
        params = md.init_params(cfg, 2)
        rep = md.case_representation(pair, params, cfg)
        ad.dot(rep, ad.constant(np.arange(8.0))).backward()
        last = cfg.layers - 1
        for name, t in params.tensors.items():
            if name == f"layer{last}.head0.att_edge":
                assert t.grad is None
            else:
                assert t.grad is not None, name

    def test_small_end_to_end_grad_check(self):
        pair = featured_pair(dim=4, n_fact=2, n_issue=1)
        cfg = config(dim=4, heads=2)
        params = md.init_params(cfg, 17)
        probe = ad.constant(np.linspace(-1.0, 1.0, 8))

        def objective():
            rep = md.case_representation(pair, params, cfg)
            return ad.dot(rep, probe)

        report = ad.grad_check(objective, params.tensors, eps=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_error


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        cfg = config(dim=4, layers=1)
        params = md.init_params(cfg, 0)
        before = {n: t.data.copy() for n, t in params.tensors.items()}
        for t in params.tensors.values():
            t.grad = np.full_like(t.data, 0.7)
        state = md.init_adam_state(params)
        md.adam_step(params, state, lr=1e-3)
        for name, t in params.tensors.items():
            delta = np.abs(before[name] - t.data)
            np.testing.assert_allclose(delta, 1e-3, rtol=1e-6)

    def test_zero_gradient_no_decay_is_noop(self):
        cfg = config(dim=4, layers=1)
        params = md.init_params(cfg, 0)
        before = {n: t.data.copy() for n, t in params.tensors.items()}
        for t in params.tensors.values():
            t.grad = np.zeros_like(t.data)
        md.adam_step(params, md.init_adam_state(params), lr=1e-3)
        for name, t in params.tensors.items():
            np.testing.assert_array_equal(before[name], t.data)

    def test_weight_decay_is_decoupled(self):
        cfg = config(dim=4, layers=1)
        params = md.init_params(cfg, 0)
        name = next(iter(params.tensors))
        before = params.tensors[name].data.copy()
        for t in params.tensors.values():
            t.grad = np.zeros_like(t.data)
        md.adam_step(params, md.init_adam_state(params), lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(params.tensors[name].data, before * (1 - 0.1 * 0.01))

    def test_nonfinite_gradient_names_tensor(self):
        cfg = config(dim=4, layers=1)
        params = md.init_params(cfg, 0)
        for t in params.tensors.values():
            t.grad = np.zeros_like(t.data)
        bad = "layer0.head0.att_node"
        params.tensors[bad].grad[0] = np.nan
        with pytest.raises(md.ModelError, match=bad):
            md.adam_step(params, md.init_adam_state(params), lr=1e-3)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = config(dim=8, heads=2)
        params = md.init_params(cfg, 77)
        first = tmp_path / "model.ckpt"
        second = tmp_path / "model2.ckpt"
        md.save_checkpoint(first, params, cfg, seed=77)
        loaded, loaded_cfg, seed = md.load_checkpoint(first)
        assert seed == 77
        assert loaded_cfg.to_dict() == cfg.to_dict()
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name].data, params.tensors[name].data)
        md.save_checkpoint(second, loaded, loaded_cfg, seed=seed)
        assert first.read_bytes() == second.read_bytes()

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(md.ModelError, match="not a checkpoint"):
            md.load_checkpoint(path)
