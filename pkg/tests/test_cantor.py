import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cantor_anderson.cantor import CantorParams, CantorSet, max_resolvable_depth
from cantor_anderson.errors import (
    DepthExceeded,
    EpsTooLarge,
    GapViolation,
    InvalidInterval,
    PrecisionLoss,
)


TOL = mpmath.mpf(2) ** -240


def mp_alpha(beta, L1, k, dps=80):
    """Independent endpoint oracle at a fixed decimal precision."""
    with mpmath.workdps(dps):
        return mpmath.mpf(1) if k == 0 else mpmath.exp(-mpmath.mpf(L1) ** (mpmath.mpf(beta) ** (k - 1)))


class TestParams:
    def test_scales_increase(self):
        p = CantorParams(4 / 3, 2.0, 6)
        L = [p.scale(k) for k in range(1, 7)]
        assert L[0] == 2.0
        assert all(b > a for a, b in zip(L, L[1:]))
        assert L[1] == pytest.approx(2 ** (4 / 3))

    @pytest.mark.parametrize("beta,L1,D", [(1.0, 2.0, 1), (1.5, 1.0, 1), (1.5, 2.0, 0)])
    def test_rejects_bad(self, beta, L1, D):
        with pytest.raises(ValueError):
            CantorParams(beta, L1, D)


class TestConstruction:
    def test_generation_zero(self):
        cs = CantorSet(CantorParams(4 / 3, 2.0, 1))
        (iv,) = cs.build_generation(0)
        assert iv.left == 0 and iv.right == 1 and iv.address == ""

    def test_generation_one_at_l1_2(self):
        cs = CantorSet(CantorParams(4 / 3, 2.0, 1))
        a, b = cs.build_generation(1)
        e2 = mp_alpha(4 / 3, 2.0, 1)
        assert a.left == 0
        assert abs(a.right - e2) < 1e-70
        with mpmath.workdps(80):
            one_minus = 1 - e2
        assert abs(b.left - one_minus) < 1e-70 and abs(b.right - 1) < 1e-70

    def test_generation_two_overlaps_at_l1_2(self):
        # alpha_1 - 2 alpha_2 < 0 for beta = 4/3, L1 = 2
        with pytest.raises(GapViolation):
            CantorSet(CantorParams(4 / 3, 2.0, 2))
        assert mp_alpha(4 / 3, 2.0, 1) - 2 * mp_alpha(4 / 3, 2.0, 2) < 0

    def test_endpoints_match_independent_oracle(self, cantor3):
        for k in range(cantor3.max_depth + 1):
            a = mp_alpha(4 / 3, 3.0, k)
            for j, iv in enumerate(cantor3.build_generation(k)):
                # left endpoint = sum over set bits of (alpha_{i-1} - alpha_i)
                with mpmath.workdps(80):
                    left = mpmath.fsum(
                        mp_alpha(4 / 3, 3.0, i - 1) - mp_alpha(4 / 3, 3.0, i)
                        for i, bit in enumerate(iv.address, start=1)
                        if bit == "1"
                    )
                assert abs(iv.left - left) < mpmath.mpf(10) ** -70
                assert abs((iv.right - iv.left) - a) < mpmath.mpf(10) ** -70

    def test_structure(self, cantor3):
        for k in range(1, cantor3.max_depth + 1):
            gen = cantor3.build_generation(k)
            parents = cantor3.build_generation(k - 1)
            assert len(gen) == 2**k
            assert [iv.address for iv in gen] == [format(j, f"0{k}b") for j in range(2**k)]
            for x, y in zip(gen, gen[1:]):
                assert x.right < y.left
            for j, par in enumerate(parents):
                lc, rc = gen[2 * j], gen[2 * j + 1]
                assert lc.address == par.address + "0" and rc.address == par.address + "1"
                assert lc.left == par.left and abs(rc.right - par.right) < TOL
                assert abs((rc.left - lc.right) - cantor3.gap[k]) < TOL

    def test_gaps(self, cantor3):
        for g in cantor3.gaps():
            k = g.generation
            expected = mp_alpha(4 / 3, 3.0, k - 1) - 2 * mp_alpha(4 / 3, 3.0, k)
            assert math.isclose(g.log_gap, float(mpmath.log(expected)), rel_tol=1e-12)
        assert cantor3.gap[1] == 1 - 2 * cantor3.alpha[1]

    def test_depth_exceeded(self, cantor3):
        with pytest.raises(DepthExceeded):
            cantor3.build_generation(7)

    def test_precision_loss(self):
        with pytest.raises(PrecisionLoss):
            CantorSet(CantorParams(4 / 3, 3.0, 12))
        d = max_resolvable_depth(4 / 3, 3.0)
        CantorSet(CantorParams(4 / 3, 3.0, d))
        with pytest.raises(PrecisionLoss):
            CantorSet(CantorParams(4 / 3, 3.0, d + 1))

    def test_precision_loss_in_float_paths(self, cantor3):
        with pytest.raises(PrecisionLoss):
            cantor3.float_tables(6)


class TestMeasure:
    def test_interval_masses_exact(self, cantor3):
        for k in range(cantor3.max_depth + 1):
            for iv in cantor3.build_generation(k):
                m = cantor3.measure_of(iv.left, iv.right)
                assert m.exact and m.dyadic == Fraction(1, 2**k)

    def test_total_and_gap(self, cantor3):
        assert cantor3.measure_of(0, 1).dyadic == 1
        lo = cantor3.alpha[1]
        hi = 1 - cantor3.alpha[1]
        m = cantor3.measure_of(lo + cantor3.gap[1] / 4, hi - cantor3.gap[1] / 4)
        assert m.value == 0 and m.exact

    @pytest.mark.parametrize("a,b", [(0.5, 0.2), (-0.1, 0.5), (0.2, 1.5)])
    def test_invalid(self, cantor3, a, b):
        with pytest.raises(InvalidInterval):
            cantor3.measure_of(a, b)

    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
    def test_additive_and_monotone(self, cantor3, xs):
        a, b, c = sorted(xs)
        left, right = cantor3.measure_of(a, b).value, cantor3.measure_of(b, c).value
        whole = cantor3.measure_of(a, c).value
        assert abs(left + right - whole) < 1e-60
        assert whole >= left and whole >= right

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_cdf_monotone(self, cantor3, x, y):
        x, y = sorted((x, y))
        assert cantor3.cdf(x) <= cantor3.cdf(y)

    def test_cdf_flat_on_gaps(self, cantor3):
        F = cantor3.cdf
        assert F(0) == 0 and F(1) == 1
        a = cantor3.alpha[1]
        assert F(a) == F(0.5) == F(1 - a) == mpmath.mpf(1) / 2


class TestClasses:
    def test_edges(self, cantor3):
        for k in range(1, 7):
            assert cantor3.class_of(0.0, k) == "0" * k
            assert cantor3.class_of(1.0, k) == "1" * k

    def test_gap(self, cantor3):
        assert cantor3.class_of(0.5, 1) is None
        cs = CantorSet(CantorParams(4 / 3, 2.0, 1))
        assert cs.class_of(0.5, 1) is None

    @given(st.floats(0, 1))
    def test_prefix_consistency(self, cantor3, v):
        prev = ""
        for k in range(1, 7):
            c = cantor3.class_of(v, k)
            if c is None:
                break
            assert c.startswith(prev)
            prev = c

    def test_classify_array_agrees(self, cantor3):
        rng = np.random.default_rng(5)
        v = rng.random(2000)
        for k in range(1, 4):
            arr = cantor3.classify_array(v, k)
            for x, j in zip(v[:300], arr[:300]):
                c = cantor3.class_of(float(x), k)
                assert (j == -1) if c is None else (j == int(c, 2))


class TestSampling:
    def test_depth_zero_uniform(self, cantor3):
        _, v = cantor3.sample_array(0, 20000, 1)
        assert abs(v.mean() - 0.5) < 0.02 and v.min() >= 0 and v.max() <= 1

    @given(st.integers(0, 2**32), st.integers(1, 4))
    def test_sample_lies_in_address(self, cantor3, seed, depth):
        s = cantor3.sample(depth, seed)
        iv = cantor3.interval(s.address)
        assert iv.left <= s.value <= iv.right
        for k in range(1, depth + 1):
            assert cantor3.class_of(s.value, k) == s.address[:k]

    def test_sample_array_classes(self, cantor3):
        idx, v = cantor3.sample_array(4, 5000, 11)
        assert (cantor3.classify_array(v, 4) == idx).all()
        assert (cantor3.classify_array(v, 2) == idx >> 2).all()

    def test_left_mass_binomial(self, cantor3):
        _, v = cantor3.sample_array(3, 10**5, 3)
        p = (v <= float(cantor3.alpha[1])).mean()
        assert abs(p - 0.5) <= 3 * math.sqrt(0.25 / 10**5)

    def test_deterministic(self, cantor3):
        a = cantor3.sample_array(3, 100, 42)
        b = cantor3.sample_array(3, 100, 42)
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all()


class TestModulus:
    def test_bound_at_scales(self, cantor3):
        ctx = cantor3.ctx
        for k in range(1, 6):
            # eps = exp(-L1^(beta^k)) = alpha_{k+1}
            eps = cantor3.alpha[k + 1]
            assert abs(cantor3.holder_bound(eps) - ctx.mpf(2) ** -k) < ctx.mpf(10) ** -60
            assert abs(cantor3.holder_bound(eps, "construction") - ctx.mpf(2) ** -(k + 1)) < ctx.mpf(10) ** -60

    def test_eps_too_large(self, cantor3):
        with pytest.raises(EpsTooLarge):
            cantor3.holder_bound(0.95)

    def test_sweep(self, cantor3):
        rows = cantor3.modulus_sweep(50)
        assert len(rows) == 50
        for eps, bound, emp in rows:
            assert emp <= 2 * bound
            k = cantor3.gap_generation(eps)
            assert k is not None and emp <= cantor3.ctx.mpf(2) ** -k

    def test_modulus_attains_single_interval(self, cantor3):
        # an eps just above alpha_k covers a full generation-k interval
        k = 3
        emp, _ = cantor3.empirical_modulus(cantor3.alpha[k] * 1.01)
        assert emp >= cantor3.ctx.mpf(2) ** -k
