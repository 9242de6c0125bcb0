"""Decoder-graph checks: rule enumeration oracles, execution, and the
analytic cost model."""

import numpy as np
import pytest

from freespace import nn
from freespace.decoder import (ConvBlockSpec, DecoderParams, build_topology,
                               cost_report, decode, topological_order)
from freespace.errors import ContractError

from oracles import conv2d_naive, instance_norm_naive, sigmoid


def unetpp_edges_enumerated(k):
    """Dense nested-skips rule, written out directly."""
    pairs = set()
    for i in range(k):
        for j in range(1, k - i):
            for earlier in range(j):
                pairs.add(((i, earlier), (i, j)))
            pairs.add(((i + 1, j - 1), (i, j)))
    return pairs


def roadsegv2_edges_enumerated(k):
    """Pruned rule: adjacent predecessor + row first + upsampled diagonal;
    final nodes also take every shallower first and deeper final node."""
    pairs = set()
    for i in range(k):
        final = k - 1 - i
        for j in range(1, final + 1):
            pairs.add(((i, j - 1), (i, j)))
            pairs.add(((i, 0), (i, j)))
            pairs.add(((i + 1, j - 1), (i, j)))
        if final >= 1:
            for other in range(k):
                if other < i:
                    pairs.add(((other, 0), (i, final)))
                elif other > i:
                    pairs.add(((other, k - 1 - other), (i, final)))
    return pairs


def unet3p_edges_enumerated(k):
    pairs = set()
    for i in range(k - 1):
        pairs.add(((i, 0), (i, 1)))
        for shallower in range(i):
            pairs.add(((shallower, 0), (i, 1)))
        for deeper in range(i + 1, k - 1):
            pairs.add(((deeper, 1), (i, 1)))
        pairs.add(((k - 1, 0), (i, 1)))
    return pairs


CHANNELS = {2: (16, 32), 3: (16, 32, 64), 4: (16, 32, 64, 128),
            5: (16, 32, 64, 128, 256)}


class TestBuildTopology:
    def test_unetpp_k2(self):
        g = build_topology("unetpp", 2, CHANNELS[2])
        assert g.nodes == frozenset({(0, 0), (0, 1), (1, 0)})
        got = {(e.src, e.dst, e.kind) for e in g.edges}
        assert got == {((0, 0), (0, 1), "same-scale"), ((1, 0), (0, 1), "upsample")}

    def test_roadsegv2_k2_coincides_with_unetpp(self):
        a = build_topology("roadsegv2", 2, CHANNELS[2])
        b = build_topology("unetpp", 2, CHANNELS[2])
        assert {(e.src, e.dst) for e in a.edges} == {(e.src, e.dst) for e in b.edges}

    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_edge_sets_match_enumeration(self, k):
        oracles = {"unetpp": unetpp_edges_enumerated,
                   "roadsegv2": roadsegv2_edges_enumerated,
                   "unet3p": unet3p_edges_enumerated}
        for kind, oracle in oracles.items():
            g = build_topology(kind, k, CHANNELS[k])
            assert {(e.src, e.dst) for e in g.edges} == oracle(k), kind

    def test_k5_pruning_and_interscale_counts(self):
        v2 = build_topology("roadsegv2", 5, CHANNELS[5])
        pp = build_topology("unetpp", 5, CHANNELS[5])
        same_v2 = sum(e.kind == "same-scale" for e in v2.edges)
        same_pp = sum(e.kind == "same-scale" for e in pp.edges)
        inter_v2 = sum(e.kind != "same-scale" for e in v2.edges)
        inter_pp = sum(e.kind != "same-scale" for e in pp.edges)
        assert same_v2 < same_pp
        assert inter_v2 > inter_pp

    @pytest.mark.parametrize("kind", ["roadsegv2", "unetpp", "unet3p"])
    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_dag_and_edge_kind_invariants(self, kind, k):
        g = build_topology(kind, k, CHANNELS[k])
        order = topological_order(g)   # raises on a cycle
        assert len(order) == len(g.nodes)
        position = {n: idx for idx, n in enumerate(order)}
        for e in g.edges:
            assert position[e.src] < position[e.dst]
            if e.kind == "upsample":
                assert e.src[0] > e.dst[0]
            elif e.kind == "downsample":
                assert e.src[0] < e.dst[0]
            else:
                assert e.src[0] == e.dst[0]
        for n in g.nodes:
            if n[1] > 0:
                assert g.incoming(n)

    def test_all_columns_variant_adds_edges(self):
        base = build_topology("roadsegv2", 4, CHANNELS[4])
        full = build_topology("roadsegv2", 4, CHANNELS[4], all_columns=True)
        assert len(full.edges) > len(base.edges)

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            build_topology("roadsegv2", 1, (16,))
        with pytest.raises(ContractError):
            build_topology("mystery", 3, CHANNELS[3])
        with pytest.raises(ContractError):
            build_topology("unetpp", 3, (16, 32))


class TestDecode:
    def test_zero_features_zero_biases_give_half(self):
        g = build_topology("roadsegv2", 2, (4, 8))
        params = DecoderParams(g, seed=0)
        fused = [np.zeros((4, 8, 8)), np.zeros((8, 4, 4))]
        out = decode(g, fused, params)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_output_in_open_interval_and_resolution(self):
        rng = np.random.default_rng(2)
        g = build_topology("roadsegv2", 4, CHANNELS[4])
        params = DecoderParams(g, seed=1)
        fused = [rng.normal(size=(CHANNELS[4][i], 16 >> i, 16 >> i)) for i in range(4)]
        out = decode(g, fused, params)
        assert out.shape == (1, 16, 16)
        assert out.data.min() > 0.0 and out.data.max() < 1.0

    def test_two_level_matches_hand_composed_oracle(self):
        g = build_topology("roadsegv2", 2, (3, 5))  # depthwise-separable blocks
        params = DecoderParams(g, seed=3)
        rng = np.random.default_rng(4)
        f0 = rng.normal(size=(3, 6, 6))
        f1 = rng.normal(size=(5, 3, 3))
        out = decode(g, [f0, f1], params)

        up = nn.upsample_bilinear(nn.Tensor(f1), 2).data  # engine op, checked vs naive
        stacked = np.concatenate([f0, up], axis=0)
        block = params.block_for((0, 1))
        dw = conv2d_naive(stacked, block.dw.w.data, block.dw.b.data, padding=1,
                          depthwise=True)
        pw = conv2d_naive(dw, block.pw.w.data, block.pw.b.data)
        act = np.maximum(instance_norm_naive(pw, block.bn.gamma.data,
                                             block.bn.beta.data), 0.0)
        expected = sigmoid(conv2d_naive(act, params.head.w.data, params.head.b.data))
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_non_dyadic_rejected(self):
        g = build_topology("unetpp", 2, (4, 8))
        params = DecoderParams(g)
        with pytest.raises(ContractError):
            decode(g, [np.zeros((4, 8, 8)), np.zeros((8, 5, 5))], params)
        with pytest.raises(ContractError):
            decode(g, [np.zeros((4, 9, 9)), np.zeros((8, 4, 4))], params)

    def test_unet3p_executes(self):
        g = build_topology("unet3p", 3, (4, 8, 16))
        params = DecoderParams(g, seed=5)
        rng = np.random.default_rng(6)
        fused = [rng.normal(size=(4, 8, 8)), rng.normal(size=(8, 4, 4)),
                 rng.normal(size=(16, 2, 2))]
        out = decode(g, fused, params)
        assert out.shape == (1, 8, 8)


class TestCostReport:
    def test_basic_block_closed_form(self):
        assert ConvBlockSpec("basic", 4, 8).param_count() == 4 * 8 * 9 + 8 == 296

    def test_separable_block_closed_form(self):
        spec = ConvBlockSpec("depthwise-separable", 4, 8)
        assert spec.param_count() == 4 * 9 + 4 + 4 * 8 + 8 == 80

    def test_mac_counts(self):
        assert ConvBlockSpec("basic", 4, 8).mac_count(2, 2) == 4 * 8 * 9 * 4
        assert ConvBlockSpec("depthwise-separable", 4, 8).mac_count(2, 2) == \
            (4 * 9 + 4 * 8) * 4

    @pytest.mark.parametrize("channels", [(16, 32, 64, 128), (8, 16, 32, 64),
                                          (32, 64, 128, 256)])
    def test_cost_ordering_across_topologies(self, channels):
        size = (16, 16)
        reports = {kind: cost_report(build_topology(kind, 4, channels), size)
                   for kind in ("roadsegv2", "unetpp", "unet3p")}
        assert reports["roadsegv2"].params < reports["unetpp"].params \
            < reports["unet3p"].params
        assert reports["roadsegv2"].macs < reports["unetpp"].macs \
            < reports["unet3p"].macs

    def test_report_additive_over_nodes(self):
        g = build_topology("roadsegv2", 3, (8, 16, 32))
        rep = cost_report(g, (8, 8))
        assert rep.params == sum(p for p, _ in rep.per_node.values())
        assert rep.macs == sum(m for _, m in rep.per_node.values())

    @pytest.mark.parametrize("kind", ["roadsegv2", "unetpp", "unet3p"])
    def test_analytic_count_matches_actual_parameters(self, kind):
        g = build_topology(kind, 3, (4, 8, 16))
        rep = cost_report(g, (8, 8))
        actual = sum(p.data.size for _, p in DecoderParams(g).params())
        assert rep.params == actual

    def test_separable_strictly_cheaper_per_node(self):
        g_ds = build_topology("roadsegv2", 4, CHANNELS[4])
        g_basic = build_topology("roadsegv2", 4, CHANNELS[4], block_kind="basic")
        for node in g_ds.compute_nodes():
            cin = g_ds.node_in_channels(node)
            cout = g_ds.channels[node[0]]
            assert cin > 1 and cout > 1
            assert ConvBlockSpec("depthwise-separable", cin, cout).param_count() < \
                ConvBlockSpec("basic", cin, cout).param_count()
        assert cost_report(g_ds, (16, 16)).params < cost_report(g_basic, (16, 16)).params

    def test_text_rendering(self):
        g = build_topology("unetpp", 2, (4, 8))
        text = cost_report(g, (4, 4)).as_text()
        assert "total" in text and "params" in text
