"""Stream algebra: attention/MLP forward passes, layouts, composition."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import icuda.tfcore as tc


def toy_layout(extra=()):
    slots = [("x", 2), ("y", 1), ("t", 1), ("s", 1), ("one", 1)]
    slots += list(extra)
    return tc.SlotLayout.build(slots)


def random_stream(layout, T, rng):
    H = rng.standard_normal((layout.dim, T))
    H[layout.row("one"), :] = 1.0
    return tc.TokenMatrix(H, layout, n_source=max(T - 2, 1), n_target=1)


def random_layer(dim, heads, rows, hidden, rng, scale=0.3):
    hs = [
        tc.AttentionHead(
            scale * rng.standard_normal((rows, dim)),
            scale * rng.standard_normal((rows, dim)),
            scale * rng.standard_normal((dim, dim)),
        )
        for _ in range(heads)
    ]
    W1 = scale * rng.standard_normal((hidden, dim))
    W2 = scale * rng.standard_normal((dim, hidden))
    return tc.TransformerLayer(hs, W1, W2)


class TestForward:
    def test_attention_matches_triple_loop(self, rng):
        layout = toy_layout([("w", 3)])
        T = 7
        tm = random_stream(layout, T, rng)
        layer = random_layer(layout.dim, heads=2, rows=3, hidden=4, rng=rng)

        out = tc.attn_forward(layer, tm).data
        D = layout.dim
        expected = tm.data.copy()
        for i in range(T):
            acc = np.zeros(D)
            for j in range(T):
                for head in layer.heads:
                    score = 0.0
                    for r in range(head.Q.shape[0]):
                        score += (head.Q[r] @ tm.data[:, i]) * (head.K[r] @ tm.data[:, j])
                    acc += max(score, 0.0) * (head.V @ tm.data[:, j])
            expected[:, i] += acc / T
        assert_allclose(out, expected, atol=1e-12)

    def test_mlp_matches_formula(self, rng):
        layout = toy_layout()
        tm = random_stream(layout, 5, rng)
        layer = random_layer(layout.dim, heads=0, rows=1, hidden=6, rng=rng)
        out = tc.mlp_forward(layer, tm).data
        expected = tm.data + layer.W2 @ np.maximum(layer.W1 @ tm.data, 0.0)
        assert_allclose(out, expected, atol=1e-12)

    def test_layer_is_mlp_after_attention(self, rng):
        layout = toy_layout([("w", 1)])
        tm = random_stream(layout, 6, rng)
        layer = random_layer(layout.dim, heads=1, rows=2, hidden=3, rng=rng)
        step = tc.layer_forward(layer, tm).data
        two = tc.mlp_forward(layer, tc.attn_forward(layer, tm)).data
        assert_allclose(step, two, atol=1e-13)

    def test_token_permutation_equivariance(self, rng):
        layout = toy_layout([("w", 2)])
        T = 8
        tm = random_stream(layout, T, rng)
        tf = tc.Transformer(
            [random_layer(layout.dim, 2, 2, 4, rng) for _ in range(3)],
            layout, readout=("y", None),
        )
        perm = rng.permutation(T)
        tm_p = tc.TokenMatrix(tm.data[:, perm], layout, tm.n_source, tm.n_target)
        out = tc.forward(tf, tm).data
        out_p = tc.forward(tf, tm_p).data
        assert_allclose(out_p, out[:, perm], atol=1e-10)

    def test_forward_trace_prefixes_match_forward(self, rng):
        layout = toy_layout()
        tm = random_stream(layout, 4, rng)
        layers = [random_layer(layout.dim, 1, 2, 3, rng) for _ in range(3)]
        tf = tc.Transformer(layers, layout, readout=("y", None))
        final, trace = tc.forward_trace(tf, tm)
        assert len(trace) == 3
        assert_allclose(final.data, trace[-1].data, atol=0)
        partial = tc.forward(tc.Transformer(layers[:2], layout, ("y", None)), tm)
        assert_allclose(trace[1].data, partial.data, atol=1e-13)

    def test_read_output_takes_query_column(self):
        layout = toy_layout()
        H = np.zeros((layout.dim, 4))
        H[layout.row("one"), :] = 1.0
        H[layout.row("y"), :] = [5.0, 6.0, 7.0, 8.0]
        tm = tc.TokenMatrix(H, layout, n_source=2, n_target=1)
        tf = tc.Transformer([tc.zero_layer(layout.dim)], layout, ("y", None))
        assert tc.read_output(tf, tm) == 8.0

    def test_nonfinite_output_raises(self):
        layout = toy_layout()
        H = np.zeros((layout.dim, 3))
        H[layout.row("one"), :] = 1.0
        H[layout.rows("x"), :] = 1e200
        tm = tc.TokenMatrix(H, layout, 1, 1)
        Q = np.zeros((1, layout.dim))
        K = np.zeros((1, layout.dim))
        V = np.zeros((layout.dim, layout.dim))
        Q[0, layout.rows("x")] = [1e200, 0.0]
        K[0, layout.rows("x")] = [1e200, 0.0]
        V[layout.row("y"), layout.row("one")] = 1.0
        zl = tc.zero_layer(layout.dim)
        layer = tc.TransformerLayer([tc.AttentionHead(Q, K, V)], zl.W1, zl.W2)
        tf = tc.Transformer([layer], layout, ("y", None))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(tc.ForwardError):
                tc.forward(tf, tm)


class TestLayout:
    def test_rows_and_width(self):
        layout = toy_layout([("w", 3)])
        assert layout.width("w") == 3
        sl = layout.rows("w")
        assert sl.stop - sl.start == 3
        assert layout.row("one") == layout.rows("one").start

    def test_duplicate_slot_rejected(self):
        with pytest.raises(tc.LayoutError):
            tc.SlotLayout.build([("x", 1), ("x", 2)])

    def test_row_of_wide_slot_rejected(self):
        layout = toy_layout([("w", 2)])
        with pytest.raises(tc.LayoutError):
            layout.row("w")

    def test_unknown_slot_rejected(self):
        with pytest.raises(tc.LayoutError):
            toy_layout().rows("nope")

    def test_stream_shape_checked(self):
        layout = toy_layout()
        with pytest.raises(tc.LayoutError):
            tc.TokenMatrix(np.zeros((layout.dim + 1, 3)), layout, 1, 1)


class TestComposition:
    def make_writer(self, slot, value):
        """One-layer part adding `value` to its private slot at every token."""
        layout = tc.SlotLayout.build(
            [("x", 1), ("y", 1), ("t", 1), ("s", 1), ("one", 1), (slot, 1)])
        D = layout.dim
        W1 = np.zeros((1, D))
        W1[0, layout.row("one")] = 1.0
        W2 = np.zeros((D, 1))
        W2[layout.row(slot), 0] = value
        layer = tc.TransformerLayer([], W1, W2)
        return tc.Transformer([layer], layout, readout=(slot, None))

    def test_union_shares_common_rows(self):
        p1 = self.make_writer("u", 2.0)
        p2 = self.make_writer("u", 3.0)
        unified, maps = tc.union_layout([p1, p2], ["a", "b"])
        names = [name for name, _, _ in unified.ranges]
        assert names.count("x") == 1 and names.count("one") == 1
        assert "a.u" in names and "b.u" in names
        assert maps[0]["u"] == "a.u" and maps[1]["u"] == "b.u"

    def test_union_rejects_shared_width_mismatch(self):
        p1 = self.make_writer("u", 2.0)
        layout2 = tc.SlotLayout.build(
            [("x", 2), ("y", 1), ("t", 1), ("s", 1), ("one", 1), ("v", 1)])
        p2 = tc.Transformer([tc.zero_layer(layout2.dim)], layout2, ("v", None))
        with pytest.raises(tc.LayoutError):
            tc.union_layout([p1, p2], ["a", "b"])

    def test_compose_runs_parts_on_disjoint_workspaces(self):
        p1 = self.make_writer("u", 2.0)
        p2 = self.make_writer("u", 3.0)
        unified, maps = tc.union_layout([p1, p2], ["a", "b"])
        tf = tc.compose([p1, p2], unified, maps, readout=("a.u", None))
        H = np.zeros((unified.dim, 3))
        H[unified.row("one"), :] = 1.0
        tm = tc.TokenMatrix(H, unified, 1, 1)
        out = tc.forward(tf, tm)
        assert_allclose(out.data[unified.row("a.u")], 2.0, atol=1e-13)
        assert_allclose(out.data[unified.row("b.u")], 3.0, atol=1e-13)

    def test_compose_rejects_overlapping_claims(self):
        p1 = self.make_writer("u", 2.0)
        p2 = self.make_writer("u", 3.0)
        unified, maps = tc.union_layout([p1, p2], ["a", "b"])
        clash = [dict(maps[0]), dict(maps[1])]
        clash[1]["u"] = "a.u"
        with pytest.raises(tc.LayoutError):
            tc.compose([p1, p2], unified, clash, readout=("a.u", None))


class TestDiagnostics:
    def test_operator_norm_matches_svd(self, rng):
        M = rng.standard_normal((6, 6))
        assert abs(tc.operator_norm(M) - np.linalg.norm(M, 2)) < 1e-6

    def test_describe_counts(self, rng):
        layout = toy_layout()
        layers = [random_layer(layout.dim, 2, 2, 5, rng) for _ in range(2)]
        tf = tc.Transformer(layers, layout, ("y", None))
        info = tc.describe(tf)
        assert info["num_layers"] == 2
        assert len(info["layers"]) == 2
        assert info["dim"] == layout.dim
        assert tc.tf_norm(tf) > 0.0

    def test_json_round_trip(self, rng):
        layout = toy_layout([("w", 1)])
        tf = tc.Transformer(
            [random_layer(layout.dim, 1, 2, 3, rng)], layout, ("y", None))
        tf2 = tc.from_json(tc.to_json(tf))
        tm = random_stream(layout, 5, rng)
        assert_allclose(tc.forward(tf2, tm).data, tc.forward(tf, tm).data,
                        atol=0)
