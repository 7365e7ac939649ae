import logging

import numpy as np
import pytest

from stalab import autodiff as ad
from stalab.autodiff import ParameterStore
from stalab.combiners import (GradientBundle, combine_sum, cosreg_penalty, mgda_combine, min_norm_weights,
                              pcgrad_combine, pcgrad_project)


def B(*v):
    return GradientBundle.of(*[np.asarray(x, dtype=float) for x in v])


class TestSum:
    def test_examples(self):
        assert combine_sum(B((1, 0), (0, 1)), [1, 1]).tolist() == [1, 1]
        assert combine_sum(B((1, 0), (0, 1)), [2, 1]).tolist() == [2, 1]
        assert combine_sum(GradientBundle((0,), np.array([[3.0, 4.0]])), [0.5]).tolist() == [1.5, 2.0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            combine_sum(B((1, 0), (0, 1)), [1, 1, 1])
        with pytest.raises(ValueError):
            B((1, 0), (0, 1, 2))


class TestPCGrad:
    def test_orthogonal_untouched(self, rng):
        assert pcgrad_combine(B((1, 0), (0, 1)), rng).tolist() == [1, 1]

    def test_hand_projection(self, rng):
        proj = pcgrad_project(B((1, 0), (-1, 1)), rng)
        assert proj[0] == pytest.approx([0.5, 0.5])
        assert proj[1] == pytest.approx([0.0, 1.0])
        assert proj.sum(axis=0) == pytest.approx([0.5, 1.5])

    def test_antiparallel(self, rng):
        assert pcgrad_combine(B((1, 2), (-1, -2)), rng) == pytest.approx([0, 0])

    def test_no_conflict_equals_sum(self, rng):
        for _ in range(200):
            g = np.abs(rng.normal(size=(3, 5)))
            b = GradientBundle((0, 1, 2), g)
            assert np.array_equal(pcgrad_combine(b, rng), combine_sum(b))

    def test_zero_gradient_skipped_with_warning(self, rng, caplog):
        with caplog.at_level(logging.WARNING):
            out = pcgrad_combine(B((0, 0), (1, -1)), rng)
        assert out.tolist() == [1, -1]
        assert "zero gradient" in caplog.text


class TestMGDA:
    def test_identical(self):
        w, d = mgda_combine(B((1, 2), (1, 2)))
        assert w.tolist() == [0.5, 0.5] and d.tolist() == [1, 2]

    def test_hand_case(self):
        w, d = mgda_combine(B((2, 0), (0, 1)))
        assert w == pytest.approx([0.2, 0.8])
        assert d == pytest.approx([0.4, 0.8])
        assert d @ np.array([2, 0]) == pytest.approx(0.8)
        assert d @ np.array([0, 1]) == pytest.approx(0.8)

    def test_symmetric(self):
        w, d = mgda_combine(B((1, 0), (0, 1)))
        assert w == pytest.approx([0.5, 0.5]) and np.linalg.norm(d) == pytest.approx(np.sqrt(2) / 2)

    def test_all_zero(self):
        w, d = mgda_combine(B((0, 0), (0, 0), (0, 0)))
        assert w == pytest.approx([1 / 3] * 3) and not d.any()

    @pytest.mark.parametrize("T", [2, 3, 4, 6])
    def test_kkt_simplex_and_norm_bound(self, T):
        r = np.random.default_rng(T)
        for _ in range(200):
            g = r.normal(size=(T, 7))
            w, d = mgda_combine(GradientBundle(tuple(range(T)), g))
            assert abs(w.sum() - 1) <= 1e-12 and (w >= 0).all()
            assert (g @ d).min() >= d @ d - 1e-6
            assert np.linalg.norm(d) <= np.linalg.norm(g, axis=1).min() + 1e-9

    def test_frank_wolfe_reports_gap(self):
        g = np.random.default_rng(0).normal(size=(4, 6))
        w, it, gap = min_norm_weights(g @ g.T)
        assert gap <= 1e-8 and it >= 1


class TestCosReg:
    def test_examples(self):
        assert cosreg_penalty([np.array([1.0, 0]), np.array([0, 1.0])], 1.0).item() == 0.0
        assert cosreg_penalty([np.array([1.0, 2]), np.array([2, 4.0])], 1.0).item() == pytest.approx(1.0)
        assert cosreg_penalty([np.array([1.0, 0]), np.array([1.0, 1])], 1.0).item() == pytest.approx(0.5)
        assert cosreg_penalty([np.zeros(2), np.array([1.0, 1])], 1.0).item() == 0.0

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            cosreg_penalty([np.ones(2), np.ones(2)], -1.0)

    def test_penalty_gradient_through_vectors(self, rng):
        ps = ParameterStore({"a": rng.normal(size=4), "b": rng.normal(size=4)})
        err = ad.finite_diff_check(lambda p: cosreg_penalty([[p["a"]], [p["b"]]], 0.3), ps)
        assert err <= 1e-6


def test_bundle_cosines():
    c = B((1, 0), (0, 1), (0, 0)).cosines()
    assert c[0, 1] == 0 and c[0, 2] == 0 and c[0, 0] == pytest.approx(1)


def test_bundle_rejects_nonfinite():
    with pytest.raises(ad.NumericOverflowError):
        B((np.nan, 0), (0, 1))


@pytest.mark.parametrize("T,dim", [(5, 2), (8, 3), (12, 7)])
def test_mgda_kkt_with_dependent_gradients(T, dim):
    r = np.random.default_rng(T * 100 + dim)
    for _ in range(300):
        g = r.normal(size=(T, dim))
        w, d = mgda_combine(GradientBundle(tuple(range(T)), g))
        assert (g @ d).min() >= d @ d - 1e-6
