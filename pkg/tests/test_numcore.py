import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ville.numcore import (
    DomainError,
    EvaluationError,
    ShapeError,
    cosine_matrix,
    cosine_similarity,
    grad_check,
    log_softmax,
    precision,
    softmax_cross_entropy,
)

D = torch.float64


def t(*xs):
    return torch.tensor(xs, dtype=D)


class TestCosine:
    def test_identical(self):
        assert float(cosine_similarity(t(1, 0), t(1, 0))) == 1.0

    def test_orthogonal(self):
        assert float(cosine_similarity(t(1, 0), t(0, 1))) == 0.0

    def test_hand_value(self):
        assert float(cosine_similarity(t(3, 4), t(4, 3))) == pytest.approx(0.96, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(DomainError):
            cosine_similarity(t(0, 0), t(1, 0))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_similarity(t(1, 0), t(1, 0, 0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_positive_scale_invariance(self, seed, s):
        g = torch.Generator().manual_seed(seed)
        a, b = torch.randn(6, generator=g, dtype=D), torch.randn(6, generator=g, dtype=D)
        assert float(cosine_similarity(s * a, b)) == pytest.approx(float(cosine_similarity(a, b)), abs=1e-12)

    def test_matrix_matches_pairwise(self):
        a, b = torch.randn(3, 5, dtype=D), torch.randn(4, 5, dtype=D)
        m = cosine_matrix(a, b)
        for i in range(3):
            for j in range(4):
                assert float(m[i, j]) == pytest.approx(float(cosine_similarity(a[i], b[j])), abs=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        assert float(softmax_cross_entropy(torch.zeros(10, dtype=D), 3)) == pytest.approx(math.log(10), abs=1e-12)

    def test_saturated(self):
        logits = torch.zeros(10, dtype=D)
        logits[2] = 1000.0
        assert float(softmax_cross_entropy(logits, 2)) < 1e-6

    def test_hand_value(self):
        assert float(softmax_cross_entropy(t(1, 0), 0)) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert float(softmax_cross_entropy(t(1, 0), 0)) == pytest.approx(0.313262, abs=1e-6)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(t(1, 0), 2)
        with pytest.raises(IndexError):
            softmax_cross_entropy(t(1, 0), -1)

    def test_gradient_is_softmax_minus_onehot(self):
        x = torch.randn(7, dtype=D, requires_grad=True)
        softmax_cross_entropy(x, 4).backward()
        expected = torch.softmax(x.detach(), 0)
        expected[4] -= 1
        assert torch.allclose(x.grad, expected, atol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, seed, c):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(8, generator=g, dtype=D)
        assert abs(float(softmax_cross_entropy(x + c, 1)) - float(softmax_cross_entropy(x, 1))) < 1e-10

    def test_log_softmax_stable_for_large_logits(self):
        out = log_softmax(t(1e4, 0, -1e4))
        assert torch.isfinite(out).all()


class TestGradCheck:
    def test_quadratic(self):
        rep = grad_check(lambda x: (x**2).sum(), [t(3.0)])
        assert rep.max_rel_error < 1e-9
        assert rep.n_coords == 1

    def test_cross_entropy_random(self):
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            rep = grad_check(lambda x: softmax_cross_entropy(x, seed % 5), [torch.randn(5, generator=g)])
            assert rep.max_rel_error < 1e-6

    def test_cosine_random(self):
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            a, b = torch.randn(4, generator=g), torch.randn(4, generator=g)
            assert grad_check(cosine_similarity, [a, b]).ok(1e-4)

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x**2).sum()

            @staticmethod
            def backward(ctx, g):
                return torch.ones(3, dtype=D) * g

        rep = grad_check(Wrong.apply, [t(1.0, 2.0, 3.0)])
        assert not rep.ok(1e-4)

    def test_non_finite_value(self):
        with pytest.raises(EvaluationError):
            grad_check(lambda x: torch.log(x).sum(), [t(-1.0)])

    def test_runs_in_64_bit(self):
        seen = []

        def f(x):
            seen.append(x.dtype)
            return x.sum()

        grad_check(f, [torch.ones(2, dtype=torch.float32)])
        assert set(seen) == {torch.float64}


def test_precision_context_restores():
    before = torch.get_default_dtype()
    with precision(torch.float64):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == before
