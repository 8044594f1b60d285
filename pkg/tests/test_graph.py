import json
import os

import numpy as np
import pytest

from hyquant.graph import (Graph, GraphError, GraphExecutionError, LayerSpec,
                           SiteCoverageError, check_site_coverage, forward_fp,
                           forward_quant, load_manifest, quant_attention,
                           run_layer, save_manifest)
from hyquant.quant import fit_minmax
from hyquant.tensor import Tensor
from hyquant.zoo import build_fixture
from oracles import attention_oracle

F32 = np.float32
DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def t(data):
    return Tensor(np.asarray(data, dtype=F32))


def single_linear_graph(w, bias=None):
    weights = {"w": t(w)}
    if bias is not None:
        weights["b"] = t(bias)
    layer = LayerSpec(0, "linear", {}, [-1], weights)
    return Graph(layers=[layer], input_shape=(w.shape[1],))


class TestGraphValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(GraphError, match="unknown layer kind"):
            Graph(layers=[LayerSpec(0, "wavelet", {}, [-1])], input_shape=(4,))

    def test_duplicate_ids_rejected(self):
        layers = [LayerSpec(0, "activation", {"fn": "relu"}, [-1]),
                  LayerSpec(0, "activation", {"fn": "relu"}, [0])]
        with pytest.raises(GraphError, match="duplicate"):
            Graph(layers=layers, input_shape=(4,))

    def test_forward_reference_rejected(self):
        layers = [LayerSpec(0, "add", {}, [-1, 1]),
                  LayerSpec(1, "activation", {"fn": "relu"}, [0])]
        with pytest.raises(GraphError, match="before it is produced"):
            Graph(layers=layers, input_shape=(4,))

    def test_mhsa_head_divisibility(self):
        rng = np.random.default_rng(0)
        weights = {n: t(rng.normal(0, 1, (6, 6)).astype(F32))
                   for n in ("w_q", "w_k", "w_v", "w_o")}
        with pytest.raises(GraphError, match="divisible"):
            Graph(layers=[LayerSpec(0, "mhsa", {"heads": 4}, [-1], weights)],
                  input_shape=(3, 6))


class TestForwardFP:
    def test_identity_linear(self):
        g = single_linear_graph(np.eye(4, dtype=F32))
        x = t(np.random.default_rng(0).normal(0, 1, (3, 4)).astype(F32))
        y, _ = forward_fp(g, x)
        np.testing.assert_array_equal(y.data, x.data)

    def test_empty_watch_returns_empty_cache(self):
        g = single_linear_graph(np.eye(4, dtype=F32))
        _, outs = forward_fp(g, t(np.zeros((2, 4))))
        assert outs == {}

    def test_golden_fixture_logits(self):
        with open(os.path.join(DATA_DIR, "golden_tiny_mvit_ln.json")) as f:
            golden = json.load(f)
        graph, _, _, _ = build_fixture(golden["fixture"])
        rng = np.random.default_rng(golden["input_seed"])
        x = t(rng.normal(0, 1, golden["input_shape"]).astype(F32))
        y, _ = forward_fp(graph, x)
        want = np.asarray(golden["logits"], dtype=np.float64).reshape(y.shape)
        np.testing.assert_allclose(y.data, want, atol=1e-5)

    def test_shape_failure_names_layer(self):
        g = single_linear_graph(np.eye(4, dtype=F32))
        with pytest.raises(GraphExecutionError, match="input shape"):
            forward_fp(g, t(np.zeros((2, 5))))
        layers = [LayerSpec(0, "linear", {}, [-1], {"w": t(np.eye(4, dtype=F32))}),
                  LayerSpec(1, "linear", {}, [0], {"w": t(np.eye(3, dtype=F32))})]
        g2 = Graph(layers=layers, input_shape=(4,))
        with pytest.raises(GraphExecutionError, match="layer 1"):
            forward_fp(g2, t(np.zeros((2, 4))))


class TestForwardQuant:
    def test_empty_qconfig_is_bitwise_fp(self):
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        y_fp, _ = forward_fp(graph, calib)
        y_q, _ = forward_quant(graph, calib, {})
        assert y_fp.data.tobytes() == y_q.data.tobytes()

    def _minmax_qconfig(self, graph, calib, bits):
        from hyquant.graph import _execute
        capture = {}
        _execute(graph, calib, {}, frozenset(), None, capture)
        cfg = {}
        for site in graph.quant_sites:
            scheme = "symmetric" if site.kind == "weight" else "asymmetric"
            cfg[site.key] = fit_minmax(Tensor._wrap(capture[site.key]), bits,
                                       scheme, "per_layer")
        return cfg

    def test_8bit_minmax_agreement_at_least_90_percent(self):
        graph, calib, ev, _ = build_fixture("tiny-mvit-ln")
        x = Tensor(ev.data[:64])
        cfg = self._minmax_qconfig(graph, calib, 8)
        y_fp, _ = forward_fp(graph, x)
        y_q, _ = forward_quant(graph, x, cfg)
        agreement = (np.argmax(y_fp.data, 1) == np.argmax(y_q.data, 1)).mean()
        assert agreement >= 0.90

    def test_1bit_degrades_below_8bit(self):
        graph, calib, ev, _ = build_fixture("tiny-mvit-ln")
        x = Tensor(ev.data[:64])
        y_fp, _ = forward_fp(graph, x)
        pred_fp = np.argmax(y_fp.data, 1)
        agreements = {}
        for bits in (8, 1):
            cfg = self._minmax_qconfig(graph, calib, bits)
            y_q, _ = forward_quant(graph, x, cfg)
            agreements[bits] = (pred_fp == np.argmax(y_q.data, 1)).mean()
        assert agreements[1] < agreements[8]

    def test_high_bit_stub_changes_little(self):
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        x = Tensor(calib.data[:8])
        y_fp, _ = forward_fp(graph, x)
        cfg32 = self._minmax_qconfig(graph, Tensor(calib.data[:8]), 32)
        for key in cfg32:
            y_q, _ = forward_quant(graph, x, {key: cfg32[key]})
            assert np.abs(y_q.data - y_fp.data).max() < 1e-4, key

    def test_unknown_site_rejected(self):
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        p = fit_minmax(t([-1.0, 1.0]), 8, "symmetric", "per_layer")
        with pytest.raises(SiteCoverageError, match="unknown site"):
            forward_quant(graph, calib, {(999, "weight"): p})

    def test_coverage_check_reports_missing_and_extra(self):
        graph, _, _, _ = build_fixture("tiny-mvit-ln")
        p = fit_minmax(t([-1.0, 1.0]), 8, "symmetric", "per_layer")
        with pytest.raises(SiteCoverageError, match="missing"):
            check_site_coverage(graph, {graph.quant_sites[0].key: p})


class TestQuantAttention:
    def test_single_head_identity_values_returns_attention_weights(self):
        rng = np.random.default_rng(3)
        q = rng.normal(0, 1, (1, 4, 4)).astype(F32)
        k = rng.normal(0, 1, (1, 4, 4)).astype(F32)
        v = np.eye(4, dtype=F32)[None]
        out = quant_attention(t(q), t(k), t(v), heads=1).data
        scores = (q[0] @ k[0].T) / 2.0
        e = np.exp(scores - scores.max(1, keepdims=True))
        probs = e / e.sum(1, keepdims=True)
        np.testing.assert_allclose(out[0], probs, atol=1e-6)

    def test_two_heads_equal_two_independent_single_heads(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.normal(0, 1, (2, 5, 8)).astype(F32) for _ in range(3))
        full = quant_attention(t(q), t(k), t(v), heads=2).data
        lo = quant_attention(t(q[:, :, :4]), t(k[:, :, :4]), t(v[:, :, :4]),
                             heads=1).data
        hi = quant_attention(t(q[:, :, 4:]), t(k[:, :, 4:]), t(v[:, :, 4:]),
                             heads=1).data
        np.testing.assert_allclose(full, np.concatenate([lo, hi], axis=-1),
                                   atol=1e-6)

    def test_unquantized_path_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        q, k, v = (rng.normal(0, 1, (2, 6, 12)).astype(F32) for _ in range(3))
        got = quant_attention(t(q), t(k), t(v), heads=3).data
        np.testing.assert_allclose(got, attention_oracle(q, k, v, 3), atol=1e-5)

    def test_head_divisibility_error(self):
        q = t(np.zeros((1, 4, 6)))
        with pytest.raises(GraphError, match="divisible"):
            quant_attention(q, q, q, heads=4)

    def test_post_softmax_rows_sum_to_one(self):
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        capture = {}
        mhsa = graph.layer(7)
        _, outs = forward_fp(graph, calib, watch={6})
        run_layer(mhsa, [outs[6]], {}, capture=capture)
        probs = capture[(7, "attn_probs")]
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_d_k_consistency_check(self):
        q = t(np.zeros((1, 4, 8)))
        with pytest.raises(GraphError, match="d_k"):
            quant_attention(q, q, q, heads=2, d_k=3)


class TestSites:
    def test_partial_mode_site_census(self):
        graph, _, _, _ = build_fixture("tiny-mvit-ln")
        by_layer = graph.sites_by_layer
        assert {s.name for s in by_layer[0]} == {"weight", "input"}
        assert {s.name for s in by_layer[7]} == {
            "input", "w_q", "w_k", "w_v", "w_o", "attn_q", "attn_k", "attn_v",
            "attn_probs", "proj_in"}
        assert by_layer[6] == ()  # norms carry no sites in partial mode
        assert by_layer[8] == ()  # adds never carry sites

    def test_full_mode_adds_norm_softmax_sites(self):
        graph, _, _, _ = build_fixture("tiny-mvit-ln")
        full = Graph(layers=graph.layers, input_shape=graph.input_shape,
                     output_id=graph.output_id, mode="full",
                     bridge_annotations=graph.bridge_annotations)
        partial_keys = {s.key for s in graph.quant_sites}
        full_keys = {s.key for s in full.quant_sites}
        added = full_keys - partial_keys
        assert (6, "input") in added and (9, "input") in added
        assert (7, "softmax_in") in added
        assert (1, "input") in added  # folded batch norm input

    def test_probs_site_pins_per_layer(self):
        graph, _, _, _ = build_fixture("tiny-mvit-ln")
        site = graph.site(7, "attn_probs")
        assert not site.allow_per_channel


class TestLayerKindDispatch:
    def test_standalone_softmax_layer(self):
        g = Graph(layers=[LayerSpec(0, "softmax", {"axis": -1}, [-1])],
                  input_shape=(5,))
        x = t(np.random.default_rng(0).normal(0, 2, (3, 5)).astype(F32))
        y, _ = forward_fp(g, x)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_matmul_layer_two_producers(self):
        rng = np.random.default_rng(1)
        eye = np.eye(4, dtype=F32)
        layers = [
            LayerSpec(0, "linear", {}, [-1], {"w": t(eye)}),
            LayerSpec(1, "linear", {}, [-1], {"w": t(2 * eye)}),
            LayerSpec(2, "matmul", {"transpose_b": True}, [0, 1]),
        ]
        g = Graph(layers=layers, input_shape=(4,))
        x = rng.normal(0, 1, (3, 4)).astype(F32)
        y, _ = forward_fp(g, t(x))
        np.testing.assert_allclose(y.data, x @ (2 * x).T, rtol=1e-5)

    def test_global_avg_pool(self):
        g = Graph(layers=[LayerSpec(0, "pool", {"op": "global_avg"}, [-1])],
                  input_shape=(3, 4, 4))
        x = np.random.default_rng(2).normal(0, 1, (2, 3, 4, 4)).astype(F32)
        y, _ = forward_fp(g, t(x))
        np.testing.assert_allclose(y.data, x.mean(axis=(2, 3)), rtol=1e-5)

    def test_tokens_to_nchw_inverts_nchw_to_tokens(self):
        layers = [
            LayerSpec(0, "reshape", {"op": "nchw_to_tokens"}, [-1]),
            LayerSpec(1, "reshape", {"op": "tokens_to_nchw", "h": 4, "w": 4}, [0]),
        ]
        g = Graph(layers=layers, input_shape=(3, 4, 4))
        x = np.random.default_rng(3).normal(0, 1, (2, 3, 4, 4)).astype(F32)
        y, _ = forward_fp(g, t(x))
        np.testing.assert_array_equal(y.data, x)


class TestFullQuantMode:
    def test_full_mode_calibrates_and_covers_norm_sites(self):
        from hyquant.calib import CalibOptions, SearchSpace, calibrate
        graph, calib, ev, labels = build_fixture("tiny-mvit-ln")
        full = Graph(layers=graph.layers, input_shape=graph.input_shape,
                     output_id=graph.output_id, mode="full",
                     bridge_annotations=graph.bridge_annotations)
        qcfg, _ = calibrate(full, calib, SearchSpace(candidates=4, iterations=1),
                            CalibOptions(), bits=8)
        assert set(qcfg) == {s.key for s in full.quant_sites}
        assert (6, "input") in qcfg and (7, "softmax_in") in qcfg
        y_fp, _ = forward_fp(full, ev)
        y_q, _ = forward_quant(full, ev, qcfg)
        agreement = (np.argmax(y_fp.data, 1) == np.argmax(y_q.data, 1)).mean()
        assert agreement >= 0.85  # full quantization still tracks FP closely


class TestManifest:
    def test_round_trip_bit_exact(self, tmp_path):
        graph, calib, _, _ = build_fixture("tiny-mvit-ln")
        path = tmp_path / "model.json"
        save_manifest(graph, str(path))
        back = load_manifest(str(path))
        assert back.input_shape == graph.input_shape
        assert back.mode == graph.mode
        assert back.bridge_annotations == graph.bridge_annotations
        assert [l.kind for l in back.layers] == [l.kind for l in graph.layers]
        for la, lb in zip(graph.layers, back.layers):
            assert la.attrs == lb.attrs and la.inputs == lb.inputs
            for name in la.weights:
                assert la.weights[name].data.tobytes() == \
                    lb.weights[name].data.tobytes()
        y0, _ = forward_fp(graph, calib)
        y1, _ = forward_fp(back, calib)
        assert y0.data.tobytes() == y1.data.tobytes()

    def test_unknown_kind_in_manifest_rejected(self, tmp_path):
        graph, _, _, _ = build_fixture("tiny-mvit-ln")
        path = tmp_path / "model.json"
        save_manifest(graph, str(path))
        doc = json.loads(path.read_text())
        doc["layers"][0]["kind"] = "quantum_fold"
        path.write_text(json.dumps(doc))
        with pytest.raises(GraphError, match="unknown layer kind 'quantum_fold'"):
            load_manifest(str(path))

    def test_bad_format_string_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"format": "something/9", "layers": []}))
        with pytest.raises(GraphError, match="format"):
            load_manifest(str(path))
