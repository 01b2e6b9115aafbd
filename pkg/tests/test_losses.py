import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srctrace.errors import (
    DegenerateBatchError,
    InvalidConfigError,
    InvalidScaleError,
    NonFiniteInputError,
    ShapeMismatchError,
    ZeroNormError,
)
from srctrace.losses import (
    BalancedBatch,
    CosineParams,
    HeadParams,
    MarginConfig,
    aam_softmax_loss,
    am_softmax_loss,
    angular_proto_loss,
    compute_loss,
    ge2e_centroids,
    ge2e_loss,
    softmax_loss,
)

from oracles import (
    angleproto_scalar,
    assert_grad_close,
    central_diff,
    ge2e_centroids_loop,
    ge2e_scalar,
    margin_loss_scalar,
    softmax_ce_mp,
)

# Frozen from the extended-precision / scalar-loop oracles in tests/oracles.py.
SOFTMAX_SEED7 = 2.113403761499045
GE2E_SEED5 = 9.284071173528561


def _head_case(seed, n=4, dim=3, T=5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    W = rng.standard_normal((dim, T))
    b = rng.standard_normal(T)
    y = rng.integers(0, T, n)
    return x, y, HeadParams(W, b)


class TestSoftmax:
    def test_uniform_logits(self):
        out = softmax_loss(np.ones((1, 3)), [0], HeadParams(np.zeros((3, 2)), np.zeros(2)))
        assert out.loss == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated(self):
        x = np.array([[1.0]])
        head = HeadParams(np.array([[100.0, 0.0]]), np.zeros(2))
        assert softmax_loss(x, [0], head).loss < 1e-40

    def test_seeded_value_against_mp_oracle(self):
        x, y, head = _head_case(7)
        live = softmax_ce_mp(x.tolist(), y, head.W.tolist(), head.b.tolist())
        assert live == pytest.approx(SOFTMAX_SEED7, rel=1e-15)
        assert softmax_loss(x, y, head).loss == pytest.approx(SOFTMAX_SEED7, rel=1e-12)

    def test_gradients(self):
        x, y, head = _head_case(3, n=6, dim=4, T=3)
        out = softmax_loss(x, y, head)
        f = lambda: softmax_loss(x, y, head).loss
        assert_grad_close(out.grad_embeddings, central_diff(f, x))
        assert_grad_close(out.grad_params["W"], central_diff(f, head.W))
        assert_grad_close(out.grad_params["b"], central_diff(f, head.b))

    def test_not_scale_invariant(self):
        x, y, head = _head_case(4)
        assert softmax_loss(x, y, head).loss != pytest.approx(softmax_loss(3 * x, y, head).loss)

    def test_errors(self):
        x, y, head = _head_case(1)
        with pytest.raises(ShapeMismatchError):
            softmax_loss(x[:, :2], y, head)
        with pytest.raises(ShapeMismatchError):
            softmax_loss(x, [0, 1, 2, 9], head)
        x[0, 0] = np.nan
        with pytest.raises(NonFiniteInputError):
            softmax_loss(x, y, head)


class TestMarginLosses:
    def test_m0_identity_example(self):
        x, y, head = _head_case(2, n=8, dim=6, T=4)
        cfg = MarginConfig(m=0.0, s=30.0)
        assert am_softmax_loss(x, y, head, cfg).loss == pytest.approx(
            aam_softmax_loss(x, y, head, cfg).loss, abs=1e-9
        )

    def test_am_saturation(self):
        x = np.array([[1.0, 0.0]])
        head = HeadParams(np.array([[1.0, -1.0], [0.0, 0.0]]), np.zeros(2))
        out = am_softmax_loss(x, [0], head, MarginConfig(0.3, 30.0))
        assert out.loss == pytest.approx(math.log1p(math.exp(-51.0)), rel=1e-9)
        assert out.loss < 1e-20

    def test_aam_saturation(self):
        x = np.array([[1.0, 0.0]])
        head = HeadParams(np.array([[1.0, -1.0], [0.0, 0.0]]), np.zeros(2))
        out = aam_softmax_loss(x, [0], head, MarginConfig(0.3, 30.0))
        # clamped target cosine is 1 - 1e-7, so theta ~ 4.5e-4
        theta = math.acos(1 - 1e-7)
        expected = math.log1p(math.exp(-30.0 - 30.0 * math.cos(theta + 0.3)))
        assert out.loss == pytest.approx(expected, rel=1e-9)
        assert out.loss < 1e-12

    def test_all_cosines_equal_closed_form(self):
        # x orthogonal to both class weights: every cosine is 0
        x = np.array([[0.0, 0.0, 1.0]])
        head = HeadParams(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), np.zeros(2))
        out = am_softmax_loss(x, [1], head, MarginConfig(0.3, 30.0))
        assert out.loss == pytest.approx(math.log1p(math.exp(9.0)), abs=1e-8)

    @pytest.mark.parametrize("angular", [False, True])
    def test_against_scalar_oracle(self, angular):
        x, y, head = _head_case(9, n=5, dim=4, T=3)
        fn = aam_softmax_loss if angular else am_softmax_loss
        expected = margin_loss_scalar(x.tolist(), list(y), head.W.tolist(), 0.3, 30.0, angular)
        assert fn(x, y, head).loss == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("fn", [am_softmax_loss, aam_softmax_loss])
    def test_gradients_seed11(self, fn):
        x, y, head = _head_case(11, n=6, dim=5, T=4)
        cfg = MarginConfig(0.3, 30.0)
        out = fn(x, y, head, cfg)
        f = lambda: fn(x, y, head, cfg).loss
        assert_grad_close(out.grad_embeddings, central_diff(f, x))
        assert_grad_close(out.grad_params["W"], central_diff(f, head.W))
        np.testing.assert_array_equal(out.grad_params["b"], 0.0)

    def test_bias_ignored(self):
        x, y, head = _head_case(5)
        shifted = HeadParams(head.W, head.b + 7.0)
        assert am_softmax_loss(x, y, head).loss == am_softmax_loss(x, y, shifted).loss

    def test_stored_weights_not_mutated(self):
        x, y, head = _head_case(5)
        before = head.W.copy()
        aam_softmax_loss(x, y, head)
        np.testing.assert_array_equal(head.W, before)

    def test_zero_norm(self):
        x, y, head = _head_case(5)
        x[1] = 0.0
        with pytest.raises(ZeroNormError):
            am_softmax_loss(x, y, head)
        x, y, head = _head_case(5)
        head.W[:, 2] = 0.0
        with pytest.raises(ZeroNormError):
            aam_softmax_loss(x, y, head)

    def test_margin_config_validation(self):
        with pytest.raises(InvalidConfigError):
            MarginConfig(m=0.3, s=1.0)
        with pytest.raises(InvalidConfigError):
            MarginConfig(m=2.0, s=30.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), m1=st.floats(0, 1.2), m2=st.floats(0, 1.2))
    def test_am_monotone_in_margin(self, seed, m1, m2):
        x, y, head = _head_case(seed, n=5, dim=4, T=3)
        lo, hi = sorted((m1, m2))
        assert am_softmax_loss(x, y, head, MarginConfig(lo, 30.0)).loss <= (
            am_softmax_loss(x, y, head, MarginConfig(hi, 30.0)).loss + 1e-12
        )

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), alpha=st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, alpha):
        x, y, head = _head_case(seed, n=5, dim=4, T=3)
        for fn in (am_softmax_loss, aam_softmax_loss):
            assert fn(alpha * x, y, head).loss == pytest.approx(fn(x, y, head).loss, abs=1e-9)


def _batch(seed, N, M, dim=4):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N * M, dim))


class TestGe2e:
    def test_constant_class_centroids(self):
        v = np.array([1.0, -2.0, 0.5])
        x = np.vstack([np.tile(v, (3, 1)), np.tile(-v, (3, 1))])
        full, excl = ge2e_centroids(BalancedBatch(x, 2, 3))
        np.testing.assert_allclose(full[0], v)
        np.testing.assert_allclose(excl[0], np.tile(v, (3, 1)))

    def test_two_rows_exclusion(self):
        u, v = np.array([1.0, 2.0]), np.array([3.0, -1.0])
        _, excl = ge2e_centroids(BalancedBatch(np.vstack([u, v]), 1, 2))
        np.testing.assert_array_equal(excl[0, 0], v)
        np.testing.assert_array_equal(excl[0, 1], u)

    def test_centroids_against_mean_oracle(self):
        x = _batch(21, 3, 4)
        full, excl = ge2e_centroids(BalancedBatch(x, 3, 4))
        ofull, oexcl = ge2e_centroids_loop(x.tolist(), 3, 4)
        np.testing.assert_allclose(full, ofull, rtol=1e-13)
        np.testing.assert_allclose(excl, oexcl, rtol=1e-13)

    def test_degenerate_value(self):
        out = ge2e_loss(BalancedBatch(np.ones((6, 4)), 2, 3), CosineParams(1.0, 0.0))
        assert out.loss == pytest.approx(3 * math.log(2), abs=1e-10)

    def test_seed5_against_scalar_oracle(self):
        x = _batch(5, 3, 3)
        assert ge2e_scalar(x.tolist(), 3, 3, 10.0, -5.0) == pytest.approx(GE2E_SEED5, rel=1e-14)
        out = ge2e_loss(BalancedBatch(x, 3, 3), CosineParams(10.0, -5.0))
        assert out.loss == pytest.approx(GE2E_SEED5, rel=1e-12)

    def test_gradients(self):
        x = _batch(8, 3, 4, dim=5)
        p = CosineParams(7.0, -2.0)
        out = ge2e_loss(BalancedBatch(x, 3, 4), p)
        f = lambda: ge2e_loss(BalancedBatch(x, 3, 4), p).loss
        assert_grad_close(out.grad_embeddings, central_diff(f, x))
        wb = np.array([p.w, p.b])
        g = lambda: ge2e_loss(BalancedBatch(x, 3, 4), CosineParams(wb[0], wb[1])).loss
        assert_grad_close([out.grad_params["w"], out.grad_params["b"]], central_diff(g, wb))

    def test_invalid_scale(self):
        with pytest.raises(InvalidScaleError):
            ge2e_loss(BalancedBatch(_batch(1, 2, 3), 2, 3), CosineParams(0.0, 0.0))

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            ge2e_loss(BalancedBatch(_batch(1, 3, 1), 3, 1))
        with pytest.raises(DegenerateBatchError):
            ge2e_centroids(BalancedBatch(_batch(1, 3, 1), 3, 1))

    def test_layout_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            BalancedBatch(np.ones((7, 2)), 2, 3)


class TestAngularProto:
    def test_degenerate_value(self):
        out = angular_proto_loss(BalancedBatch(np.ones((12, 3)), 4, 3), CosineParams(1.0, 0.0))
        assert out.loss == pytest.approx(math.log(4), abs=1e-10)

    def test_orthogonal_saturation(self):
        N, M = 4, 3
        x = np.repeat(np.eye(N), M, axis=0)
        out = angular_proto_loss(BalancedBatch(x, N, M), CosineParams(30.0, 0.0))
        assert out.loss == pytest.approx(math.log1p((N - 1) * math.exp(-30.0)), rel=1e-9)
        assert out.loss < 1e-10

    def test_against_scalar_oracle(self):
        x = _batch(17, 3, 4)
        expected = angleproto_scalar(x.tolist(), 3, 4, 10.0, -5.0)
        assert angular_proto_loss(BalancedBatch(x, 3, 4)).loss == pytest.approx(expected, rel=1e-12)

    def test_gradients_seed13(self):
        x = _batch(13, 4, 2)
        p = CosineParams(10.0, -5.0)
        out = angular_proto_loss(BalancedBatch(x, 4, 2), p)
        f = lambda: angular_proto_loss(BalancedBatch(x, 4, 2), p).loss
        assert_grad_close(out.grad_embeddings, central_diff(f, x))
        wb = np.array([p.w, p.b])
        g = lambda: angular_proto_loss(BalancedBatch(x, 4, 2), CosineParams(wb[0], wb[1])).loss
        assert_grad_close([out.grad_params["w"], out.grad_params["b"]], central_diff(g, wb))

    def test_invalid_scale(self):
        with pytest.raises(InvalidScaleError):
            angular_proto_loss(BalancedBatch(_batch(1, 2, 3), 2, 3), CosineParams(-1.0, 0.0))


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_permutation_equivariance_classification(self, seed):
        x, y, head = _head_case(seed, n=6, dim=4, T=3)
        perm = np.random.default_rng(seed).permutation(6)
        for fn in (softmax_loss, am_softmax_loss, aam_softmax_loss):
            a, b = fn(x, y, head), fn(x[perm], y[perm], head)
            assert b.loss == pytest.approx(a.loss, rel=1e-12)
            np.testing.assert_allclose(b.grad_embeddings, a.grad_embeddings[perm], rtol=1e-10, atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_permutation_equivariance_metric(self, seed):
        # permuting whole classes, and rows within a class for GE2E
        N, M, D = 3, 4, 5
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((N * M, D))
        cls_perm = rng.permutation(N)
        rows = np.concatenate([np.arange(c * M, (c + 1) * M) for c in cls_perm])
        for fn in (ge2e_loss, angular_proto_loss):
            a = fn(BalancedBatch(x, N, M))
            b = fn(BalancedBatch(x[rows], N, M))
            assert b.loss == pytest.approx(a.loss, rel=1e-12)
            np.testing.assert_allclose(b.grad_embeddings, a.grad_embeddings[rows], rtol=1e-10, atol=1e-14)
        within = np.concatenate([c * M + rng.permutation(M) for c in range(N)])
        a = ge2e_loss(BalancedBatch(x, N, M))
        b = ge2e_loss(BalancedBatch(x[within], N, M))
        assert b.loss == pytest.approx(a.loss, rel=1e-12)
        np.testing.assert_allclose(b.grad_embeddings, a.grad_embeddings[within], rtol=1e-10, atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), alpha=st.floats(0.01, 100.0))
    def test_metric_scale_invariance(self, seed, alpha):
        x = _batch(seed, 3, 3)
        for fn in (ge2e_loss, angular_proto_loss):
            assert fn(BalancedBatch(alpha * x, 3, 3)).loss == pytest.approx(
                fn(BalancedBatch(x, 3, 3)).loss, abs=1e-9
            )

    @settings(max_examples=30, deadline=None)
    @given(N=st.integers(1, 6), M=st.integers(2, 5))
    def test_degenerate_values_general(self, N, M):
        x = np.full((N * M, 3), 0.7)
        assert ge2e_loss(BalancedBatch(x, N, M), CosineParams(1.0, 0.0)).loss == pytest.approx(
            M * math.log(N), abs=1e-10
        )
        assert angular_proto_loss(BalancedBatch(x, N, M), CosineParams(1.0, 0.0)).loss == pytest.approx(
            math.log(N), abs=1e-10
        )

    def test_large_logits_finite(self):
        x, y, head = _head_case(0, n=4, dim=3, T=5)
        out = softmax_loss(1e3 * x, y, head)
        assert math.isfinite(out.loss)
        assert np.all(np.isfinite(out.grad_embeddings))


def test_compute_loss_dispatch():
    x, y, head = _head_case(0, n=6, dim=3, T=3)
    assert compute_loss("softmax", x, y, head).loss == softmax_loss(x, y, head).loss
    assert compute_loss("ge2e", x, None, CosineParams(), n_classes=2, per_class=3).loss == (
        ge2e_loss(BalancedBatch(x, 2, 3)).loss
    )
    with pytest.raises(InvalidConfigError):
        compute_loss("triplet", x, y, head)
    with pytest.raises(InvalidConfigError):
        compute_loss("angleproto", x, y, CosineParams())
