import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgforecast.substrate import (
    AdamState,
    CheckpointError,
    MaskError,
    NonFiniteGradient,
    ShapeError,
    adam_step,
    affine,
    cross_attention,
    grad_check,
    gru_step,
    init_attention,
    init_gru,
    init_mlp2,
    layer_norm,
    load_checkpoint,
    masked_self_attention,
    max_pool,
    mlp2,
    param,
    save_checkpoint,
)
from tgforecast.substrate import tensor as T
from tgforecast.substrate.gradcheck import analytic_gradients, directional_check


def P(**arrays):
    return {k: param(np.asarray(v, float), k) for k, v in arrays.items()}


# ---------------------------------------------------------------- affine / mlp2 / layer norm


class TestAffine:
    def test_zero(self):
        out = affine(np.array([3.0, -1.0]), P(W=np.zeros((4, 2)), b=np.zeros(4)))
        assert np.array_equal(out.data, np.zeros(4))

    def test_identity(self):
        x = np.array([0.3, -2.0, 5.0])
        assert np.array_equal(affine(x, P(W=np.eye(3), b=np.zeros(3))).data, x)

    def test_hand_value(self):
        out = affine(np.array([1.0, 1.0]), P(W=[[1, 2], [3, 4]], b=[1, 1]))
        assert np.array_equal(out.data, [4.0, 8.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            affine(np.ones(3), P(W=np.ones((2, 2)), b=np.zeros(2)))


class TestMlp2:
    def test_all_zero(self):
        p = P(**{"fc1.W": np.zeros((4, 3)), "fc1.b": np.zeros(4), "norm.gain": np.zeros(4),
                 "norm.bias": np.zeros(4), "fc2.W": np.zeros((2, 4)), "fc2.b": np.zeros(2)})
        assert np.array_equal(mlp2(np.array([1.0, 2.0, 3.0]), p).data, np.zeros(2))

    def test_deterministic(self, rng):
        p = {}
        init_mlp2(p, "m", 3, 5, 2, rng)
        from tgforecast.substrate import block

        x = rng.normal(size=3)
        assert np.array_equal(mlp2(x, block(p, "m")).data, mlp2(x, block(p, "m")).data)

    def test_hand_evaluation(self):
        # two hidden units so the layer norm is non-degenerate
        p = P(**{"fc1.W": [[1.0, 0.0], [0.0, 2.0]], "fc1.b": [0.5, 0.0], "norm.gain": [2.0, 1.0],
                 "norm.bias": [0.1, -0.2], "fc2.W": [[1.5, -1.0]], "fc2.b": [0.25]})
        x = np.array([1.0, 0.5])
        h = np.array([1.5, 1.0])
        mu, var = h.mean(), h.var()
        n = (h - mu) / math.sqrt(var + 1e-5) * np.array([2.0, 1.0]) + np.array([0.1, -0.2])
        expect = 1.5 * max(n[0], 0) - 1.0 * max(n[1], 0) + 0.25
        assert mlp2(x, p).data[0] == pytest.approx(expect, abs=1e-12)


class TestLayerNorm:
    def test_constant_input(self):
        out = layer_norm(np.full(4, 3.7), np.ones(4), np.zeros(4))
        assert np.array_equal(out.data, np.zeros(4))

    def test_pair(self):
        out = layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out.data, np.array([1.0, -1.0]) / math.sqrt(1 + 1e-5), rtol=0, atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=6)
        a = layer_norm(x, np.ones(6), np.zeros(6)).data
        b = layer_norm(x + 12.5, np.ones(6), np.zeros(6)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- attention


def attn_params(d, wq=None, wk=None, wv=None):
    return P(W_Q=np.zeros((d, d)) if wq is None else wq, W_K=np.zeros((d, d)) if wk is None else wk,
             W_V=np.eye(d) if wv is None else wv)


class TestSelfAttention:
    def test_single_node(self, rng):
        F = rng.normal(size=(1, 3))
        wv = rng.normal(size=(3, 3))
        p = attn_params(3, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), wv)
        out = masked_self_attention(F, np.ones((1, 1), bool), p)
        np.testing.assert_allclose(out.data, F @ wv.T, atol=1e-14)

    def test_diagonal_mask(self, rng):
        F = rng.normal(size=(4, 3))
        wv = rng.normal(size=(3, 3))
        p = attn_params(3, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), wv)
        out = masked_self_attention(F, np.eye(4, dtype=bool), p)
        np.testing.assert_allclose(out.data, F @ wv.T, atol=1e-14)

    def test_uniform_mean_over_present(self, rng):
        F = rng.normal(size=(5, 3))
        present = np.array([True, False, True, True, False])
        mask = np.outer(present, present)
        out = masked_self_attention(F, mask, attn_params(3), present)
        col_mean = F[present].mean(axis=0)
        np.testing.assert_allclose(out.data[present], np.tile(col_mean, (3, 1)), atol=1e-14)
        assert np.array_equal(out.data[~present], np.zeros((2, 3)))

    def test_all_false_row_for_present_node(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(MaskError):
            masked_self_attention(np.ones((2, 2)), mask, attn_params(2), np.array([True, True]))

    def test_rows_sum_to_one_and_masked_zero(self, rng):
        logits = T.as_var(rng.normal(size=(6, 6)) * 5)
        mask = rng.random((6, 6)) < 0.5
        np.fill_diagonal(mask, True)
        w = T.masked_softmax(logits, mask).data
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w[~mask] == 0.0)


class TestCrossAttention:
    def test_single_context_row(self, rng):
        wv = rng.normal(size=(3, 3))
        ctx = rng.normal(size=(1, 3))
        p = attn_params(3, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), wv)
        out = cross_attention(rng.normal(size=(4, 3)), ctx, p)
        np.testing.assert_allclose(out.data, np.tile(ctx @ wv.T, (4, 1)), atol=1e-14)

    def test_identical_context_rows(self, rng):
        row = rng.normal(size=3)
        ctx = np.tile(row, (5, 1))
        p1 = attn_params(3, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
        p2 = attn_params(3, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
        q = rng.normal(size=(2, 3))
        np.testing.assert_allclose(cross_attention(q, ctx, p1).data, cross_attention(q, ctx, p2).data, atol=1e-14)

    def test_hand_logits(self):
        # q.k / sqrt(2) with q = (sqrt(2) ln 3, 0), k rows (0,0) and (1,0) -> logits (0, ln 3)
        s = math.sqrt(2.0) * math.log(3.0)
        q = np.array([[s, 0.0]])
        ctx = np.array([[0.0, 4.0], [1.0, 8.0]])
        p = attn_params(2, np.eye(2), np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))
        out = cross_attention(q, ctx, p)
        np.testing.assert_allclose(out.data[0], 0.25 * ctx[0] + 0.75 * ctx[1], atol=1e-14)

    def test_empty_context(self):
        with pytest.raises(ShapeError):
            cross_attention(np.ones((1, 2)), np.zeros((0, 2)), attn_params(2))


# ---------------------------------------------------------------- GRU / max pool


def zero_gru(d):
    p = {}
    for g in "zrh":
        p[f"W_{g}"] = np.zeros((d, d))
        p[f"U_{g}"] = np.zeros((d, d))
        p[f"b_{g}"] = np.zeros(d)
    return P(**p)


class TestGru:
    def test_all_zero(self):
        assert np.array_equal(gru_step(np.zeros(3), np.zeros(3), zero_gru(3)).data, np.zeros(3))

    def test_half_decay(self):
        h = np.array([0.8, -2.0, 3.0])
        np.testing.assert_allclose(gru_step(np.ones(3), h, zero_gru(3)).data, 0.5 * h, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p = {}
        init_gru(p, "g", 4, 4, rng)
        p = {k[2:]: v for k, v in p.items()}
        for v in p.values():
            v.data = v.data * 5
        h = rng.uniform(-3, 3, size=4)
        out = gru_step(rng.normal(size=4) * 10, h, p).data
        assert np.max(np.abs(out)) <= max(np.max(np.abs(h)), 1.0) + 1e-12


class TestMaxPool:
    def test_single_row(self):
        assert np.array_equal(max_pool(np.array([[1.0, -3.0]])).data, [1.0, -3.0])

    def test_pair(self):
        assert np.array_equal(max_pool(np.array([[1.0, -2.0], [0.0, 5.0]])).data, [1.0, 5.0])

    def test_permutation(self, rng):
        rows = rng.normal(size=(7, 4))
        assert np.array_equal(max_pool(rows).data, max_pool(rows[rng.permutation(7)]).data)

    def test_empty(self):
        with pytest.raises(ShapeError):
            max_pool(np.zeros((0, 3)))


# ---------------------------------------------------------------- Adam


class TestAdam:
    def test_zero_gradient(self):
        p = P(w=[1.0, -2.0])
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
        assert np.array_equal(p["w"].data, [1.0, -2.0])

    def test_one_step(self):
        p = P(w=[0.0])
        adam_step(p, {"w": np.ones(1)}, AdamState(), 0.1)
        assert p["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = P(a=rng.normal(size=3), b=rng.normal(size=(2, 2)))
            s = AdamState()
            for _ in range(10):
                adam_step(p, {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))}, s, 0.01)
            return p["a"].data.tobytes() + p["b"].data.tobytes()

        assert run() == run()

    def test_non_finite_names_block(self):
        p = P(good=[1.0], bad=[1.0])
        with pytest.raises(NonFiniteGradient, match="bad"):
            adam_step(p, {"good": np.ones(1), "bad": np.array([np.nan])}, AdamState(), 0.1)
        assert p["good"].data[0] == 1.0

    def test_second_moment_nonnegative(self, rng):
        p = P(w=rng.normal(size=5))
        s = AdamState()
        for _ in range(5):
            adam_step(p, {"w": rng.normal(size=5)}, s, 0.01)
        assert np.all(s.v["w"] >= 0) and s.step == 5


# ---------------------------------------------------------------- gradient checks


class TestGradCheck:
    def test_quadratic(self, rng):
        params = P(x=rng.normal(size=5))
        err = grad_check(lambda: T.mul(T.sum_(T.mul(params["x"], params["x"])), 0.5), params)
        assert err < 1e-9

    def test_corrupted_gradient_detected(self, rng):
        params = P(x=rng.uniform(1, 2, size=4))
        loss = lambda: T.mul(T.sum_(T.mul(params["x"], params["x"])), 0.5)  # noqa: E731
        _, grads = analytic_gradients(loss, params)
        grads["x"] = grads["x"].copy()
        grads["x"][2] *= 2
        assert grad_check(loss, params, grads=grads) > 0.3

    def test_directional_detects_corruption(self, rng):
        params = P(x=rng.uniform(1, 2, size=4))
        loss = lambda: T.mul(T.sum_(T.mul(params["x"], params["x"])), 0.5)  # noqa: E731
        _, grads = analytic_gradients(loss, params)
        grads["x"] = grads["x"] * 2
        res = directional_check(loss, params, grads=grads, rng=rng)
        assert res.per_block["x"] > 0.3


def _rand_params(rng, **shapes):
    return {k: param(rng.normal(size=s), k) for k, s in shapes.items()}


def _primitive_cases(rng, kind):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    x = T.as_var(rng.normal(size=(n, d)))
    if kind == "affine":
        p = _rand_params(rng, W=(3, d), b=(3,))
        return p, lambda: affine(x, p)
    if kind == "layer_norm":
        p = _rand_params(rng, g=(d,), b=(d,))
        xs = param(rng.normal(size=(n, d)), "x")
        p["x"] = xs
        return p, lambda: layer_norm(xs, p["g"], p["b"])
    if kind == "mlp2":
        p = {}
        init_mlp2(p, "m", d, 4, 2, rng)
        p = {k[2:]: v for k, v in p.items()}
        for v in p.values():
            v.data = v.data + rng.normal(size=v.data.shape) * 0.1
        return p, lambda: mlp2(x, p)
    if kind == "self_attention":
        p = {}
        init_attention(p, "a", d, rng)
        p = {k[2:]: v for k, v in p.items()}
        m = rng.random((n, n)) < 0.5
        np.fill_diagonal(m, True)
        xs = param(rng.normal(size=(n, d)), "F")
        p["F"] = xs
        return p, lambda: masked_self_attention(xs, m, p)
    if kind == "cross_attention":
        p = {}
        init_attention(p, "a", d, rng)
        p = {k[2:]: v for k, v in p.items()}
        ctx = param(rng.normal(size=(n + 1, d)), "ctx")
        p["ctx"] = ctx
        return p, lambda: cross_attention(x, ctx, p)
    if kind == "gru":
        p = {}
        init_gru(p, "g", d, d, rng)
        p = {k[2:]: v for k, v in p.items()}
        for v in p.values():
            v.data = v.data + rng.normal(size=v.data.shape) * 0.1
        h = param(rng.normal(size=(n, d)), "h")
        p["h"] = h
        return p, lambda: gru_step(x, h, p)
    if kind == "max_pool":
        xs = param(rng.normal(size=(n + 1, d)), "x")
        return {"x": xs}, lambda: max_pool(xs)
    if kind == "l2_normalize":
        xs = param(rng.normal(size=(n, d)), "x")
        return {"x": xs}, lambda: T.l2_normalize(xs)
    if kind == "smooth_l1":
        xs = param(rng.normal(size=(n, d)) * 2, "x")
        xs.data[np.abs(np.abs(xs.data) - 1) < 1e-3] += 0.01
        return {"x": xs}, lambda: T.smooth_l1(xs)
    if kind == "log_softmax":
        xs = param(rng.normal(size=(n, d)), "x")
        return {"x": xs}, lambda: T.log_softmax(xs)
    if kind == "segment_ops":
        xs = param(rng.normal(size=(5, d)), "x")
        starts = np.array([0, 2, 3])
        return {"x": xs}, lambda: T.segment_broadcast(T.segment_max(xs, starts), starts, 5)
    raise AssertionError(kind)


KINDS = ["affine", "layer_norm", "mlp2", "self_attention", "cross_attention", "gru", "max_pool",
         "l2_normalize", "smooth_l1", "log_softmax", "segment_ops"]


@settings(max_examples=110, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 2**31 - 1))
def test_primitive_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    params, fwd = _primitive_cases(rng, kind)
    out_shape = fwd().shape
    weights = rng.normal(size=out_shape)

    def loss():
        return T.sum_(T.mul(fwd(), weights))

    assert grad_check(loss, params) < 1e-4


# ---------------------------------------------------------------- segment ops / scatter


def test_segment_max_values_and_ties():
    x = param(np.array([[1.0, 5.0], [3.0, 5.0], [-1.0, 0.0]]), "x")
    out = T.segment_max(x, np.array([0, 2]))
    assert np.array_equal(out.data, [[3.0, 5.0], [-1.0, 0.0]])
    T.backward(T.sum_(out))
    assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


def test_scatter_rows_places_and_routes():
    x = param(np.array([[1.0], [2.0]]), "x")
    out = T.scatter_rows(x, np.array([3, 0]), 4)
    assert np.array_equal(out.data[:, 0], [2.0, 0.0, 0.0, 1.0])
    T.backward(T.sum_(T.mul(out, np.arange(4.0)[:, None])))
    assert np.array_equal(x.grad[:, 0], [3.0, 0.0])


def test_masked_max_empty_slice_is_zero():
    x = param(np.array([[[2.0], [4.0]], [[1.0], [9.0]]]), "x")
    out = T.masked_max(x, np.array([[True, False], [False, False]]))
    assert np.array_equal(out.data[:, 0], [2.0, 0.0])


# ---------------------------------------------------------------- checkpoint


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        arrays = {"b.W": rng.normal(size=(3, 2)), "a": rng.normal(size=4)}
        save_checkpoint(tmp_path / "c.ckpt", arrays, "abc", {"d": 3})
        back, h, cfg = load_checkpoint(tmp_path / "c.ckpt")
        assert h == "abc" and cfg == {"d": 3}
        for k in arrays:
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_deterministic_bytes(self, tmp_path, rng):
        arrays = {"x": rng.normal(size=5), "y": rng.normal(size=(2, 2))}
        save_checkpoint(tmp_path / "1", arrays, "h")
        save_checkpoint(tmp_path / "2", dict(reversed(list(arrays.items()))), "h")
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"nonsense" * 4)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad")

    def test_truncated(self, tmp_path, rng):
        save_checkpoint(tmp_path / "c", {"x": rng.normal(size=10)}, "h")
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(raw[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")
