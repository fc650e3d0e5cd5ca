"""Product-of-chains poset {1..K}^n under the componentwise order.

Rank numbers are exact big integers, LYM sums are exact rationals.  The
maximum-antichain oracle either runs a bipartite matching (Dilworth/König)
on the full comparability graph, or certifies optimality with an explicit
symmetric chain decomposition; both return a witness antichain.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import DimensionMismatch, LYMViolation, NotAnAntichain, SizeExceeded

DEFAULT_SIZE_CAP = 10**6
EXHAUSTIVE_LIMIT = 10**6
MATCHING_LIMIT = 2048
MATRIX_LIMIT = 4096


@dataclass(frozen=True)
class LatticePoset:
    K: int
    n: int

    def __post_init__(self):
        if self.K < 2 or self.n < 1:
            raise ValueError(f"need K >= 2 and n >= 1, got K={self.K}, n={self.n}")

    @property
    def size(self) -> int:
        return self.K**self.n

    @property
    def rank_range(self) -> tuple[int, int]:
        return self.n, self.K * self.n

    def elements(self) -> np.ndarray:
        """All K**n elements as rows, in lexicographic order."""
        grids = np.indices((self.K,) * self.n).reshape(self.n, -1).T
        return grids + 1


def rank(x: Sequence[int]) -> int:
    return int(sum(x))


@dataclass(frozen=True)
class RankProfile:
    K: int
    n: int
    counts: tuple  # counts[r - n] = N_r

    def __getitem__(self, r: int) -> int:
        i = r - self.n
        if 0 <= i < len(self.counts):
            return self.counts[i]
        return 0

    @property
    def ranks(self) -> range:
        return range(self.n, self.K * self.n + 1)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def max_count(self) -> int:
        return max(self.counts)

    @property
    def middle_rank(self) -> int:
        """Smallest rank attaining max_count."""
        return self.n + self.counts.index(self.max_count)

    def items(self):
        return zip(self.ranks, self.counts)


def rank_numbers(K: int, n: int, cap: int = DEFAULT_SIZE_CAP) -> RankProfile:
    """N_r for all r, as the n-fold convolution of K ones (sliding-window DP)."""
    LatticePoset(K, n)
    if K * n > cap:
        raise SizeExceeded(f"K*n = {K * n} exceeds cap {cap}")
    counts = [1] * K
    for _ in range(n - 1):
        width = len(counts) + K - 1
        out = [0] * width
        window = 0
        for r in range(width):
            if r < len(counts):
                window += counts[r]
            if r - K >= 0:
                window -= counts[r - K]
            out[r] = window
        counts = out
    return RankProfile(K, n, tuple(counts))


def is_comparable(x: Sequence[int], y: Sequence[int]) -> bool:
    if len(x) != len(y):
        raise DimensionMismatch(f"elements of length {len(x)} and {len(y)}")
    le = all(a <= b for a, b in zip(x, y))
    ge = all(a >= b for a, b in zip(x, y))
    return le or ge


def _find_comparable_pair(X: np.ndarray, block: int = 512):
    """First pair (i, j), i != j, with X[i] <= X[j] componentwise, else None."""
    m = len(X)
    for s in range(0, m, block):
        A = X[s : s + block]
        le = (A[:, None, :] <= X[None, :, :]).all(axis=-1)
        rows = np.arange(len(A))
        le[rows, s + rows] = False
        hit = np.argwhere(le)
        if len(hit):
            i, j = hit[0]
            return s + int(i), int(j)
    return None


class Antichain:
    """A set of pairwise incomparable elements of {1..K}^n (checked on construction)."""

    def __init__(self, K: int, n: int, elements: Iterable[Sequence[int]], validate: bool = True):
        self.K, self.n = K, n
        elems = {tuple(int(c) for c in x) for x in elements}
        for x in elems:
            if len(x) != n:
                raise DimensionMismatch(f"element {x} has length {len(x)}, expected {n}")
            if min(x) < 1 or max(x) > K:
                raise ValueError(f"element {x} outside {{1..{K}}}^{n}")
        self.elements = frozenset(elems)
        if validate and len(elems) > 1:
            X = np.array(sorted(elems))
            pair = _find_comparable_pair(X)
            if pair is not None:
                i, j = pair
                raise NotAnAntichain(f"{tuple(X[i])} <= {tuple(X[j])}")

    @classmethod
    def rank_level(cls, K: int, n: int, r: int) -> "Antichain":
        """All elements of rank r.  x <= y with equal rank forces x == y."""
        X = LatticePoset(K, n).elements()
        level = X[X.sum(axis=1) == r]
        return cls(K, n, (tuple(row) for row in level), validate=False)

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(sorted(self.elements))

    def __contains__(self, x):
        return tuple(x) in self.elements

    def __eq__(self, other):
        return (
            isinstance(other, Antichain)
            and (self.K, self.n) == (other.K, other.n)
            and self.elements == other.elements
        )

    def __hash__(self):
        return hash((self.K, self.n, self.elements))

    def __repr__(self):
        return f"Antichain(K={self.K}, n={self.n}, size={len(self)})"

    def rank_histogram(self) -> Counter:
        return Counter(rank(x) for x in self.elements)


def lym_sum(A: Antichain, profile: RankProfile) -> Fraction:
    """Sum over A of 1/N_{r(x)}, exactly.  Raises LYMViolation above 1."""
    if (A.K, A.n) != (profile.K, profile.n):
        raise DimensionMismatch(f"antichain over {(A.K, A.n)}, profile over {(profile.K, profile.n)}")
    total = sum((Fraction(c, profile[r]) for r, c in A.rank_histogram().items()), Fraction(0))
    if total > 1:
        raise LYMViolation(f"LYM sum {total} > 1 for {A!r}")
    return total


@dataclass(frozen=True)
class AntichainBound:
    K: int
    n: int
    exact: Fraction  # max_r N_r / K**n
    asymptotic: float  # 1 / (K sqrt(n))

    @property
    def ratio(self) -> float:
        return float(self.exact) / self.asymptotic


def antichain_probability_bound(K: int, n: int, cap: int = DEFAULT_SIZE_CAP) -> AntichainBound:
    profile = rank_numbers(K, n, cap)
    return AntichainBound(K, n, Fraction(profile.max_count, K**n), 1.0 / (K * math.sqrt(n)))


@dataclass(frozen=True)
class MaxRankCheck:
    K: int
    n: int
    lower: float
    value: int
    upper: float
    envelope: float

    @property
    def ratio(self) -> float:
        return math.exp(math.log(self.value) - math.log(self.envelope))

    @property
    def within(self) -> bool:
        return self.lower <= self.value <= self.upper


def max_rank_check(K: int, n: int, c: float = 0.5, C: float = 2.0, cap: int = DEFAULT_SIZE_CAP) -> MaxRankCheck:
    """max_r N_r against c, C times K^n / (sqrt((K-1)(K+1)) sqrt(n))."""
    profile = rank_numbers(K, n, cap)
    envelope = math.exp(n * math.log(K) - 0.5 * math.log((K - 1) * (K + 1)) - 0.5 * math.log(n))
    return MaxRankCheck(K, n, c * envelope, profile.max_count, C * envelope, envelope)


# -- maximum antichains -----------------------------------------------------


@dataclass(frozen=True)
class MaxAntichain:
    size: int
    witness: Antichain
    method: str
    chains: int  # size of the chain partition certifying optimality


def _encode(X: np.ndarray, K: int) -> np.ndarray:
    # Horner form; integer matmul has no BLAS path
    codes = X[:, 0] - 1
    for i in range(1, X.shape[1]):
        codes = codes * K + (X[:, i] - 1)
    return codes


def symmetric_chain_decomposition(K: int, n: int) -> list[np.ndarray]:
    """Partition {1..K}^n into saturated chains, one array (len, n) per chain.

    Built coordinate by coordinate: the product of a chain of length a with
    {1..K} is the a-by-K grid, split into min(a, K) hooks.
    """
    chains = [np.arange(1, K + 1).reshape(-1, 1)]
    for _ in range(n - 1):
        nxt = []
        for c in chains:
            a = len(c)
            for i in range(min(a, K)):
                up = np.column_stack([np.repeat(c[i : i + 1], K - i, axis=0), np.arange(1, K - i + 1)])
                across = np.column_stack([c[i + 1 :], np.full(a - i - 1, K - i)])
                nxt.append(np.vstack([up, across]))
        chains = nxt
    return chains


def verify_chain_partition(chains: list[np.ndarray], K: int, n: int) -> bool:
    """Every element exactly once, consecutive chain elements form covers."""
    X = chains[0] if len(chains) == 1 else np.vstack(chains)
    if X.shape != (K**n, n):
        return False
    # K**n rows that hit every code are a bijection
    seen = np.zeros(K**n, dtype=bool)
    seen[_encode(X, K)] = True
    if not seen.all():
        return False
    for c in chains:
        if len(c) > 1:
            d = np.diff(c, axis=0)
            if not ((d >= 0).all() and (d.sum(axis=1) == 1).all()):
                return False
    return True


def _comparability_graph(X: np.ndarray) -> csr_matrix:
    """Strict order x < y as a bipartite adjacency (left copy -> right copy)."""
    le = (X[:, None, :] <= X[None, :, :]).all(axis=-1)
    np.fill_diagonal(le, False)
    return csr_matrix(le)


def _max_antichain_by_matching(K: int, n: int) -> tuple[int, Antichain]:
    X = LatticePoset(K, n).elements()
    N = len(X)
    G = _comparability_graph(X)
    match = maximum_bipartite_matching(G, perm_type="column")  # left i -> right match[i]
    matched_left = match >= 0
    right_to_left = np.full(N, -1)
    right_to_left[match[matched_left]] = np.flatnonzero(matched_left)
    # König: alternating reachability from unmatched left vertices
    zl = ~matched_left.copy()
    zr = np.zeros(N, dtype=bool)
    frontier = list(np.flatnonzero(zl))
    while frontier:
        nxt = []
        for u in frontier:
            for v in G.indices[G.indptr[u] : G.indptr[u + 1]]:
                if not zr[v]:
                    zr[v] = True
                    w = right_to_left[v]
                    if w >= 0 and not zl[w]:
                        zl[w] = True
                        nxt.append(w)
        frontier = nxt
    size = N - int(matched_left.sum())
    keep = zl & ~zr
    witness = Antichain(K, n, (tuple(r) for r in X[keep]))
    if len(witness) != size:
        raise RuntimeError(f"König witness size {len(witness)} != {size}")
    return size, witness


def brute_force_max_antichain(K: int, n: int, method: str = "auto", limit: int = EXHAUSTIVE_LIMIT) -> MaxAntichain:
    """Exact maximum antichain cardinality with a witness.

    method="matching" runs Dilworth's theorem via bipartite matching on the
    full strict-order graph.  method="chains" builds a chain partition, checks
    it element by element, and pairs it with the largest rank level; equal
    sizes prove optimality.  "auto" uses matching on small posets.
    """
    poset = LatticePoset(K, n)
    if poset.size > limit:
        raise SizeExceeded(f"K^n = {poset.size} exceeds exhaustive limit {limit}")
    if method == "auto":
        method = "matching" if poset.size <= MATCHING_LIMIT else "chains"
    if method == "matching":
        size, witness = _max_antichain_by_matching(K, n)
        return MaxAntichain(size, witness, method, size)
    if method != "chains":
        raise ValueError(f"unknown method {method!r}")

    chains = symmetric_chain_decomposition(K, n)
    if not verify_chain_partition(chains, K, n):
        raise RuntimeError(f"chain decomposition of {{1..{K}}}^{n} failed verification")
    X = poset.elements()
    ranks = X.sum(axis=1)
    level = np.bincount(ranks).argmax()
    witness = Antichain(K, n, (tuple(r) for r in X[ranks == level]), validate=False)
    if len(witness) != len(chains):
        if poset.size <= MATCHING_LIMIT:
            return brute_force_max_antichain(K, n, "matching", limit)
        raise RuntimeError(f"certificate gap: {len(chains)} chains vs antichain of {len(witness)}")
    return MaxAntichain(len(witness), witness, method, len(chains))


# -- random antichains ------------------------------------------------------


@lru_cache(maxsize=32)
def _comparability_matrix(K: int, n: int):
    X = LatticePoset(K, n).elements()
    le = (X[:, None, :] <= X[None, :, :]).all(axis=-1)
    return X, le | le.T


def random_antichain(K: int, n: int, rng_seed, draws: int | None = None) -> Antichain:
    """Grow an antichain from uniform draws, keeping a draw iff incomparable to all kept.

    With draws=None on posets up to MATRIX_LIMIT elements every element is
    drawn once in random order, which yields a maximal antichain.
    """
    poset = LatticePoset(K, n)
    rng = np.random.default_rng(rng_seed)
    if draws is None and poset.size <= MATRIX_LIMIT:
        X, comp = _comparability_matrix(K, n)
        blocked = np.zeros(len(X), dtype=bool)
        kept = []
        for i in rng.permutation(len(X)):
            if not blocked[i]:
                kept.append(i)
                blocked |= comp[i]
        return Antichain(K, n, (tuple(X[i]) for i in kept))

    draws = draws if draws is not None else 4 * MATRIX_LIMIT
    kept = np.empty((0, n), dtype=np.int64)
    for _ in range(draws):
        x = rng.integers(1, K + 1, size=n)
        if len(kept):
            le = (kept <= x).all(axis=1)
            ge = (kept >= x).all(axis=1)
            if (le | ge).any():
                continue
        kept = np.vstack([kept, x])
    return Antichain(K, n, (tuple(r) for r in kept))
