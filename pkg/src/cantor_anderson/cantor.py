"""Hierarchical Cantor set with super-exponentially shrinking intervals.

Generation k consists of 2**k closed intervals of length alpha_k = exp(-L_k),
with L_1 given and L_{k+1} = L_k**beta.  Each interval keeps two children
flush with its left and right edges.  Interval addresses are bit strings;
bit 0 selects the left child.  Read left to right, the addresses of one
generation are the binary numerals 0 .. 2**k - 1 in increasing order.

Lengths live in log space.  Endpoints are sums of child offsets evaluated in
an mpmath context of configurable precision, because alpha_k falls below the
double-precision range after a handful of generations.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import mpmath
import numpy as np

from .errors import (
    DepthExceeded,
    EpsTooLarge,
    GapViolation,
    InvalidInterval,
    PrecisionLoss,
)

DEFAULT_PREC = 256
# bits of headroom kept between the smallest length and the working precision
GUARD_BITS = 64
# smallest interval length the float64 fast paths will accept
FLOAT_RESOLVABLE = 1e-10


@dataclass(frozen=True)
class CantorParams:
    beta: float
    L1: float
    max_depth: int

    def __post_init__(self):
        if not self.beta > 1:
            raise ValueError(f"beta must be > 1, got {self.beta}")
        if not self.L1 > 1:
            raise ValueError(f"L1 must be > 1, got {self.L1}")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValueError(f"max_depth must be an integer >= 1, got {self.max_depth}")

    def scale(self, k: int) -> float:
        """L_k = L1 ** (beta ** (k - 1)), k >= 1."""
        if k < 1:
            raise ValueError("scales are indexed from k = 1")
        return self.L1 ** (self.beta ** (k - 1))

    def log_alpha(self, k: int) -> float:
        """log of the generation-k interval length; alpha_0 = 1."""
        return 0.0 if k == 0 else -self.scale(k)


def max_resolvable_depth(beta: float, L1: float, prec: int = DEFAULT_PREC, cap: int = 16) -> int:
    """Deepest generation whose lengths stay resolvable at `prec` bits."""
    params = CantorParams(beta, L1, 1)
    budget = (prec - GUARD_BITS) * math.log(2)
    k = 1
    while k < cap and params.scale(k + 1) < budget:
        k += 1
    return k


@dataclass(frozen=True)
class CantorInterval:
    generation: int
    address: str
    log_length: float
    left: mpmath.mpf
    right: mpmath.mpf

    @property
    def index(self) -> int:
        return int(self.address, 2) if self.address else 0


@dataclass(frozen=True)
class GapSpec:
    generation: int
    log_gap: float


@dataclass(frozen=True)
class CantorSample:
    depth: int
    address: str
    value: mpmath.mpf

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class Mass:
    """Mass of an interval under mu^(D), D = max_depth.

    `dyadic` sums the leaves covered in full and is exact; `partial` adds the
    uniform share of leaves cut by an endpoint.  `exact` is True when no leaf
    is cut, in which case the answer also equals the mass under the limit
    measure.
    """

    dyadic: Fraction
    partial: mpmath.mpf
    exact: bool

    @property
    def value(self) -> float:
        return float(self.dyadic) + float(self.partial)

    def __float__(self):
        return self.value


class CantorSet:
    """Generations 0..max_depth of the Cantor set and the measures mu^(k)."""

    def __init__(self, params: CantorParams, prec: int = DEFAULT_PREC):
        self.params = params
        self.ctx = ctx = mpmath.MPContext()
        ctx.prec = prec
        D = params.max_depth

        if params.scale(D) >= (prec - GUARD_BITS) * math.log(2):
            raise PrecisionLoss(
                f"alpha_{D} = exp(-{params.scale(D):.6g}) is not resolvable next to "
                f"endpoints of size 1 at {prec} bits; lower max_depth or raise prec "
                f"(deepest resolvable depth: {max_resolvable_depth(params.beta, params.L1, prec)})"
            )

        # scales in the working precision: L1 ** (beta ** (k - 1)) with the given binary beta, L1
        beta, L1 = ctx.mpf(params.beta), ctx.mpf(params.L1)
        self.scales = [ctx.mpf(0)] + [L1 ** (beta ** (k - 1)) for k in range(1, D + 1)]
        self.alpha = [ctx.mpf(1)] + [ctx.exp(-self.scales[k]) for k in range(1, D + 1)]
        # offset of the right child's left endpoint from its parent's left endpoint
        self.offset = [None] + [self.alpha[k - 1] - self.alpha[k] for k in range(1, D + 1)]
        self.gap = [None] + [self.alpha[k - 1] - 2 * self.alpha[k] for k in range(1, D + 1)]
        for k in range(1, D + 1):
            if self.gap[k] <= 0:
                raise GapViolation(
                    f"generation {k}: alpha_{k-1} - 2 alpha_{k} = {ctx.nstr(self.gap[k], 6)} <= 0 "
                    f"(beta={params.beta}, L1={params.L1}); sibling intervals would overlap"
                )
        self._snap = ctx.mpf(2) ** (-(prec - 16))
        self._lefts = {0: [ctx.mpf(0)]}

    # -- structure -----------------------------------------------------------

    @property
    def max_depth(self) -> int:
        return self.params.max_depth

    def _check_depth(self, k: int):
        if k < 0:
            raise ValueError(f"generation must be >= 0, got {k}")
        if k > self.max_depth:
            raise DepthExceeded(f"generation {k} > max_depth {self.max_depth}")

    def lefts(self, k: int) -> list:
        """Left endpoints of generation k, in address order."""
        self._check_depth(k)
        if k not in self._lefts:
            prev = self.lefts(k - 1)
            off = self.offset[k]
            out = []
            for a in prev:
                out.append(a)
                out.append(a + off)
            self._lefts[k] = out
        return self._lefts[k]

    def left_of(self, address: str):
        k = len(address)
        self._check_depth(k)
        x = self.ctx.mpf(0)
        for i, bit in enumerate(address, start=1):
            if bit == "1":
                x += self.offset[i]
            elif bit != "0":
                raise ValueError(f"bad address {address!r}")
        return x

    def interval(self, address: str) -> CantorInterval:
        k = len(address)
        left = self.left_of(address)
        return CantorInterval(k, address, self.params.log_alpha(k), left, left + self.alpha[k])

    def build_generation(self, k: int) -> list[CantorInterval]:
        """The 2**k intervals of generation k in left-to-right order."""
        lefts = self.lefts(k)
        a = self.alpha[k]
        log_len = self.params.log_alpha(k)
        return [
            CantorInterval(k, format(j, f"0{k}b") if k else "", log_len, lo, lo + a)
            for j, lo in enumerate(lefts)
        ]

    def gaps(self) -> list[GapSpec]:
        return [GapSpec(k, float(self.ctx.log(self.gap[k]))) for k in range(1, self.max_depth + 1)]

    # -- measure -------------------------------------------------------------

    def measure_of(self, a, b) -> Mass:
        """mu^(max_depth)([a, b]) by descent through the address tree."""
        ctx = self.ctx
        a, b = ctx.mpf(a), ctx.mpf(b)
        if a > b or a < 0 or b > 1:
            raise InvalidInterval(f"[{a}, {b}] is not a subinterval of [0, 1]")
        D = self.max_depth
        tol = self._snap
        full = 0  # count of generation-D leaves, accumulated as numerator over 2**D
        partial = ctx.mpf(0)
        cut = False
        stack = [(0, ctx.mpf(0))]
        while stack:
            k, lo = stack.pop()
            hi = lo + self.alpha[k]
            if hi < a or lo > b:
                continue
            if a <= lo + tol and hi - tol <= b:
                full += 2 ** (D - k)
                continue
            if k == D:
                overlap = min(hi, b) - max(lo, a)
                frac = overlap / self.alpha[D]
                if frac <= tol:
                    continue
                if frac >= 1 - tol:
                    full += 1
                    continue
                partial += frac
                cut = True
                continue
            stack.append((k + 1, lo + self.offset[k + 1]))
            stack.append((k + 1, lo))
        return Mass(Fraction(full, 2**D), partial / 2**D, not cut)

    def _leaf_fraction(self, j: int, x):
        """Share of leaf j lying left of x, snapped to 0 or 1 near the ends."""
        lo = self.lefts(self.max_depth)[j]
        frac = (x - lo) / self.alpha[self.max_depth]
        if frac <= 1e-12:
            return self.ctx.mpf(0)
        if frac >= 1 - 1e-12:
            return self.ctx.mpf(1)
        return frac

    def cdf(self, x):
        """F(x) = mu^(max_depth)([0, x])."""
        ctx = self.ctx
        x = ctx.mpf(x)
        if x <= 0:
            return ctx.mpf(0)
        if x >= 1:
            return ctx.mpf(1)
        lefts = self.lefts(self.max_depth)
        j = bisect_right(lefts, x) - 1
        return (j + self._leaf_fraction(j, x)) / 2**self.max_depth

    # -- classes and sampling -----------------------------------------------

    def class_of(self, value, k: int) -> Optional[str]:
        """Address of the generation-k interval holding `value`, None in a gap."""
        self._check_depth(k)
        ctx = self.ctx
        v = ctx.mpf(value)
        if v < 0 or v > 1:
            raise ValueError(f"value {value} outside [0, 1]")
        lo = ctx.mpf(0)
        bits = []
        for i in range(1, k + 1):
            if v <= lo + self.alpha[i]:
                bits.append("0")
            elif v >= lo + self.offset[i]:
                lo += self.offset[i]
                bits.append("1")
            else:
                return None
        return "".join(bits)

    def float_tables(self, k: int):
        """float64 (alpha_1..k, offset_1..k) for vectorised paths."""
        self._check_depth(k)
        if k and float(self.alpha[k]) < FLOAT_RESOLVABLE:
            raise PrecisionLoss(f"alpha_{k} = {self.ctx.nstr(self.alpha[k], 3)} is below float64 resolution")
        alpha = np.array([float(self.alpha[i]) for i in range(1, k + 1)])
        offset = np.array([float(self.offset[i]) for i in range(1, k + 1)])
        return alpha, offset

    def classify_array(self, values: np.ndarray, k: int) -> np.ndarray:
        """Vectorised class_of returning interval indices, -1 for gap points."""
        alpha, offset = self.float_tables(k)
        v = np.asarray(values, dtype=float)
        lo = np.zeros_like(v)
        idx = np.zeros(v.shape, dtype=np.int64)
        in_gap = np.zeros(v.shape, dtype=bool)
        for i in range(k):
            left = v <= lo + alpha[i]
            right = v >= lo + offset[i]
            in_gap |= ~(left | right)
            go_right = right & ~left
            lo = np.where(go_right, lo + offset[i], lo)
            idx = 2 * idx + go_right
        return np.where(in_gap, -1, idx)

    def sample(self, depth: int, rng) -> CantorSample:
        """One draw from mu^(depth): uniform address, then uniform point inside."""
        self._check_depth(depth)
        rng = np.random.default_rng(rng)
        bits = "".join("1" if b else "0" for b in rng.integers(0, 2, size=depth))
        u = self.ctx.mpf(float(rng.random()))
        value = self.left_of(bits) + u * self.alpha[depth]
        return CantorSample(depth, bits, value)

    def sample_array(self, depth: int, size, rng):
        """Vectorised draws from mu^(depth) as (indices, float values)."""
        alpha, offset = self.float_tables(depth)
        rng = np.random.default_rng(rng)
        bits = rng.integers(0, 2, size=tuple(np.atleast_1d(size)) + (depth,))
        left = (bits * offset).sum(axis=-1)
        width = alpha[-1] if depth else 1.0
        values = left + rng.random(bits.shape[:-1]) * width
        idx = np.zeros(bits.shape[:-1], dtype=np.int64)
        for i in range(depth):
            idx = 2 * idx + bits[..., i]
        return idx, values

    # -- modulus of continuity ----------------------------------------------

    def holder_bound(self, eps, convention: str = "paper"):
        """(log|log eps| / log L1) ** (-log 2 / log beta), capped at 1.

        convention="paper" is normalised so that eps = exp(-L1**(beta**k))
        gives 2**-k; convention="construction" shifts the index by one so that
        eps = alpha_k gives 2**-k.
        """
        ctx = self.ctx
        eps = ctx.mpf(eps)
        if eps <= 0:
            raise ValueError("eps must be positive")
        if eps >= self.gap[1]:
            raise EpsTooLarge(f"eps = {ctx.nstr(eps, 6)} >= G_1 = {ctx.nstr(self.gap[1], 6)}")
        ratio = ctx.log(abs(ctx.log(eps))) / ctx.log(self.params.L1)
        if ratio <= 1:
            return ctx.mpf(1)
        bound = ratio ** (-ctx.log(2) / ctx.log(self.params.beta))
        if convention == "construction":
            bound = bound / 2
        elif convention != "paper":
            raise ValueError(f"unknown convention {convention!r}")
        return min(bound, ctx.mpf(1))

    def empirical_modulus(self, eps):
        """max over positions x of mu^(max_depth)([x, x + eps]).

        F(x + eps) - F(x) is piecewise linear in x with kinks only where x or
        x + eps meets a leaf endpoint, so scanning those anchors is exhaustive.
        Returns (mass, x).
        """
        ctx = self.ctx
        eps = ctx.mpf(eps)
        D = self.max_depth
        a = self.alpha[D]
        anchors = []
        for lo in self.lefts(D):
            anchors.extend((lo, lo + a, lo - eps, lo + a - eps))
        best, where = ctx.mpf(-1), None
        for x in anchors:
            m = self.cdf(x + eps) - self.cdf(x)
            if m > best:
                best, where = m, x
        return best, where

    def modulus_sweep(self, n_points: int = 50, lo_gen: Optional[int] = None):
        """Rows (eps, paper bound, empirical) on a log grid inside (G_lo, G_1)."""
        ctx = self.ctx
        lo_gen = lo_gen or self.max_depth
        g_hi, g_lo = self.gap[1], self.gap[lo_gen]
        rows = []
        log_hi, log_lo = ctx.log(g_hi), ctx.log(g_lo)
        for i in range(n_points):
            # open interval: stay strictly inside both ends
            t = ctx.mpf(i + 1) / (n_points + 1)
            eps = ctx.exp(log_lo + t * (log_hi - log_lo))
            emp, _ = self.empirical_modulus(eps)
            rows.append((eps, self.holder_bound(eps), emp))
        return rows

    def gap_generation(self, eps) -> Optional[int]:
        """k with G_{k+1} <= eps < G_k, None if eps is outside (G_D, G_1)."""
        eps = self.ctx.mpf(eps)
        for k in range(1, self.max_depth):
            if self.gap[k + 1] <= eps < self.gap[k]:
                return k
        return None
