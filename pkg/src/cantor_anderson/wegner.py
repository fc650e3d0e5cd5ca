"""Scale schedule, configuration classes, bconfsets and the Wegner experiment."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import mpmath
import numpy as np
from scipy.linalg import eigh_tridiagonal, eigvalsh_tridiagonal

from .cantor import CantorParams, CantorSet
from .errors import (
    ConstraintViolation,
    DepthExceeded,
    HypothesisFailed,
    InsufficientTrials,
    ShapeMismatch,
    ValueInGap,
    WindowEmpty,
)
from .hamiltonian import BoxSpec, Configuration, FiniteVolumeOperator, SingleSite, _site, laplacian
from .poset import antichain_probability_bound, is_comparable

DEFAULT_MAX_DEPTH = 16
TABLE_CAP = 2**20
CHUNK = 10_000


# -- scales ---------------------------------------------------------------------


@dataclass(frozen=True)
class Resolution:
    k: int
    lower: float  # L_{k-1}^(1+eps'), 0 for k = 1
    upper: float  # L_k^(1+eps')
    sandwich: tuple  # (L_{k-1}, L^(1-eps), L_k)

    def __int__(self):
        return self.k


class ScaleSchedule:
    """Scales L_k with eps' fixed by (1 + eps')(1 - eps) = 1."""

    def __init__(self, params: CantorParams, eps: float):
        if not 0 < eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {eps}")
        self.params = params
        self.eps = float(eps)
        self.eps_exact = Fraction(self.eps)
        self.eps_prime_exact = self.eps_exact / (1 - self.eps_exact)
        self.eps_prime = float(self.eps_prime_exact)
        self._cantor: Optional[CantorSet] = None

    @property
    def cantor(self) -> CantorSet:
        if self._cantor is None:
            self._cantor = CantorSet(self.params)
        return self._cantor

    def scale(self, k: int) -> float:
        return 0.0 if k == 0 else self.params.scale(k)

    def boundary(self, k: int) -> float:
        """L_k^(1+eps'); 0 for k = 0."""
        return 0.0 if k == 0 else self.params.scale(k) ** (1 + self.eps_prime)

    def resolution_of(self, L: float) -> Resolution:
        if L <= 0:
            raise ValueError("L must be positive")
        k = 1
        while L > self.boundary(k):
            k += 1
        return Resolution(k, self.boundary(k - 1), self.boundary(k), (self.scale(k - 1), L ** (1 - self.eps), self.scale(k)))

    def table(self, n: int) -> list[dict]:
        """Rows k, L_k, log alpha_k, G_k, and the resolution interval of scales for k = 1..n."""
        ctx = mpmath.MPContext()
        ctx.prec = 256
        alpha = lambda k: ctx.exp(-ctx.mpf(self.scale(k)))
        rows = []
        for k in range(1, n + 1):
            rows.append(
                {
                    "k": k,
                    "L_k": self.scale(k),
                    "log_alpha_k": -self.scale(k),
                    "alpha_k": math.exp(-self.scale(k)),
                    "G_k": float(alpha(k - 1) - 2 * alpha(k)),
                    "res_lower": self.boundary(k - 1),
                    "res_upper": self.boundary(k),
                }
            )
        return rows


def resolution_of(schedule: ScaleSchedule, L: float) -> Resolution:
    return schedule.resolution_of(L)


# -- classes -------------------------------------------------------------------


@dataclass(frozen=True)
class ConfigClass:
    """Per-site generation-k interval addresses."""

    box: BoxSpec
    resolution: int
    classes: tuple  # sorted ((site, address), ...)

    def __post_init__(self):
        items = self.classes.items() if isinstance(self.classes, Mapping) else self.classes
        norm = tuple(sorted((_site(z), str(a)) for z, a in items))
        for z, a in norm:
            if len(a) != self.resolution or set(a) - {"0", "1"}:
                raise ValueError(f"address {a!r} at {z} is not a generation-{self.resolution} address")
        object.__setattr__(self, "classes", norm)

    @classmethod
    def from_indices(cls, box: BoxSpec, k: int, sites: Sequence, indices: Sequence[int]) -> "ConfigClass":
        if len(sites) != len(indices):
            raise ShapeMismatch(f"{len(sites)} sites, {len(indices)} indices")
        return cls(box, k, tuple((z, format(int(j), f"0{k}b")) for z, j in zip(sites, indices)))

    @property
    def K(self) -> int:
        return 2**self.resolution

    @property
    def sites(self) -> list:
        return [z for z, _ in self.classes]

    @property
    def addresses(self) -> list:
        return [a for _, a in self.classes]

    @property
    def indices(self) -> np.ndarray:
        return np.array([int(a, 2) for a in self.addresses], dtype=np.int64)

    def as_dict(self) -> dict:
        return dict(self.classes)

    def restrict(self, sites) -> "ConfigClass":
        keep = {_site(z) for z in sites}
        missing = keep - set(self.sites)
        if missing:
            raise ShapeMismatch(f"sites {sorted(missing)} not in class")
        return ConfigClass(self.box, self.resolution, tuple(p for p in self.classes if p[0] in keep))

    def merge(self, other: "ConfigClass") -> "ConfigClass":
        if other.box != self.box or other.resolution != self.resolution:
            raise ShapeMismatch("classes on different boxes or resolutions")
        if set(self.sites) & set(other.sites):
            raise ShapeMismatch("overlapping site sets")
        return ConfigClass(self.box, self.resolution, self.classes + other.classes)


def classify(schedule: ScaleSchedule, box: BoxSpec, config: Configuration) -> ConfigClass:
    """[omega]_Lambda at the resolution of the box side."""
    k = schedule.resolution_of(box.side).k
    if k > schedule.params.max_depth:
        raise DepthExceeded(f"resolution {k} of L = {box.side} exceeds max_depth {schedule.params.max_depth}")
    cs = schedule.cantor
    out = []
    for z, v in sorted(config.weights().items()):
        a = cs.class_of(v, k)
        if a is None:
            raise ValueInGap(f"value {v!r} at site {z} lies in a gap of generation {k}")
        out.append((z, a))
    return ConfigClass(box, k, tuple(out))


def class_order(a: ConfigClass, b: ConfigClass) -> str:
    """'equal', 'less', 'greater' or 'incomparable' under the componentwise order."""
    if a.box != b.box or a.resolution != b.resolution or a.sites != b.sites:
        raise ShapeMismatch("classes differ in box, resolution or site set")
    x, y = tuple(a.indices + 1), tuple(b.indices + 1)
    if x == y:
        return "equal"
    if not is_comparable(x, y):
        return "incomparable"
    return "less" if all(p <= q for p, q in zip(x, y)) else "greater"


# -- density and bconfsets ------------------------------------------------------


@dataclass(frozen=True)
class DensityReport:
    dense: bool
    sub_side: float
    required: float
    worst_count: int
    worst_box: tuple  # center of the worst sub-box
    n_boxes: int


def check_density(box: BoxSpec, S, kappa: float = 0.05, kappa_prime: float = 0.05, delta_plus: float = 1.0) -> DensityReport:
    """#(S in shrunk sub-box) >= side'^(d - kappa') for all sub-boxes of side L^(1-kappa), stride 1."""
    if not 0 < kappa < 0.5:
        raise ValueError("kappa must lie in (0, 1/2)")
    d, L = box.dim, box.side
    sub = L ** (1 - kappa)
    required = sub ** (d - kappa_prime)
    half_hat = (sub - delta_plus) / 2
    axes = []
    for c in box.center:
        lo, hi = c - (L - sub) / 2, c + (L - sub) / 2
        pos = lo + np.arange(int(math.floor(hi - lo + 1e-12)) + 1)
        if pos[-1] < hi - 1e-12:
            pos = np.append(pos, hi)
        axes.append(pos)
    centers = np.array(list(itertools.product(*axes)))
    pts = np.array(sorted(_site(z) for z in S), dtype=float).reshape(-1, d)
    if len(pts):
        counts = (np.abs(pts[None, :, :] - centers[:, None, :]) < half_hat).all(axis=2).sum(axis=1)
    else:
        counts = np.zeros(len(centers), dtype=int)
    w = int(np.argmin(counts))
    return DensityReport(bool(counts[w] >= required), sub, required, int(counts[w]), tuple(float(c) for c in centers[w]), len(centers))


@dataclass(frozen=True)
class BConfSet:
    """Fixed classes on B, free sites S; B and S partition the box sites."""

    box: BoxSpec
    fixed_part: ConfigClass
    free_sites: frozenset

    def __post_init__(self):
        S = frozenset(_site(z) for z in self.free_sites)
        object.__setattr__(self, "free_sites", S)
        B = set(self.fixed_part.sites)
        if B & S:
            raise ShapeMismatch(f"sites {sorted(B & S)} are both fixed and free")
        if B | S != set(self.box.sites):
            raise ShapeMismatch("fixed and free sites do not cover the box")
        if self.fixed_part.box != self.box:
            raise ShapeMismatch("fixed part lives on a different box")

    @classmethod
    def build(cls, box: BoxSpec, k: int, free_sites, fixed_indices: Optional[Mapping] = None, rng=None) -> "BConfSet":
        """Fixed indices default to uniform random classes from rng, or 0 without one."""
        S = {_site(z) for z in free_sites}
        B = [z for z in box.sites if z not in S]
        if fixed_indices is None:
            if rng is None:
                idx = [0] * len(B)
            else:
                idx = np.random.default_rng(rng).integers(0, 2**k, size=len(B)).tolist()
        else:
            fixed_indices = {_site(z): v for z, v in fixed_indices.items()}
            idx = [fixed_indices[z] for z in B]
        return cls(box, ConfigClass.from_indices(box, k, B, idx), frozenset(S))

    @property
    def resolution(self) -> int:
        return self.fixed_part.resolution

    @property
    def K(self) -> int:
        return 2**self.resolution

    @property
    def free_order(self) -> list:
        return sorted(self.free_sites)

    @property
    def mass(self) -> Fraction:
        """P(fixed part) = 2^(-k |B|)."""
        return Fraction(1, 2 ** (self.resolution * len(self.fixed_part.classes)))

    def density(self, kappa: float = 0.05, kappa_prime: float = 0.05, delta_plus: float = 1.0) -> DensityReport:
        return check_density(self.box, self.free_sites, kappa, kappa_prime, delta_plus)

    def free_class(self, indices: Sequence[int]) -> ConfigClass:
        return ConfigClass.from_indices(self.box, self.resolution, self.free_order, indices)


def refine_bconfset(bconf: BConfSet, from_k: int, to_k: Optional[int] = None, max_depth: int = DEFAULT_MAX_DEPTH) -> list:
    """Split every fixed address into its two children: 2^|B| disjoint bconfsets."""
    if from_k != bconf.resolution:
        raise ValueError(f"bconfset is at resolution {bconf.resolution}, not {from_k}")
    to_k = from_k + 1 if to_k is None else to_k
    if to_k != from_k + 1:
        raise ValueError("refinement goes one generation at a time")
    if to_k > max_depth:
        raise DepthExceeded(f"generation {to_k} > max_depth {max_depth}")
    sites, addrs = bconf.fixed_part.sites, bconf.fixed_part.addresses
    out = []
    for bits in itertools.product("01", repeat=len(sites)):
        fixed = ConfigClass(bconf.box, to_k, tuple((z, a + b) for z, a, b in zip(sites, addrs, bits)))
        out.append(BConfSet(bconf.box, fixed, bconf.free_sites))
    return out


# -- Wegner experiment -----------------------------------------------------------


@dataclass(frozen=True)
class WegnerExperimentConfig:
    """Constants of the Wegner step at box side L, with ell = L^rho.

    Interval I = (E0 - exp(-c1 ell), E0 + exp(-c1 ell)); derivative window
    [exp(-c3 ell^(4/3) log ell), exp(-c2 ell)]; hit window half-width
    w = exp(-2 c3 ell^(4/3) log ell).
    """

    L: float
    E0: float
    c1: float
    c2: float
    c3: float
    beta: float = 4 / 3 + 0.01
    eps: float = 0.05
    rho: Optional[float] = None
    trials: int = 10**5
    seed: int = 0
    branch: int = 0
    offset: float = 0.5
    kappa: float = 0.05
    kappa_prime: float = 0.05
    z: float = 3.0
    require_dense: bool = True

    def __post_init__(self):
        if self.rho is None:
            object.__setattr__(self, "rho", 1 / self.beta)
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("c1, c2, c3 must be positive")
        if self.ell <= 1:
            raise ConstraintViolation(f"ell = L^rho = {self.ell} must exceed 1")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if not 0 <= self.offset <= 1:
            raise ValueError("offset must lie in [0, 1]")
        lhs, rhs = self.c3 * self.ell ** (4 / 3) * math.log(self.ell), self.L ** (1 - self.eps) / 4
        if lhs > rhs:
            raise ConstraintViolation(f"c3 ell^(4/3) log ell = {lhs:.6g} > L^(1-eps)/4 = {rhs:.6g}")
        if not math.isfinite(self.log_w) or self.w <= 0:
            raise ConstraintViolation(f"window exp({self.log_w}) underflows")

    @property
    def ell(self) -> float:
        return self.L**self.rho

    @property
    def log_D_min(self) -> float:
        return -self.c3 * self.ell ** (4 / 3) * math.log(self.ell)

    @property
    def log_D_max(self) -> float:
        return -self.c2 * self.ell

    @property
    def D_min(self) -> float:
        return math.exp(self.log_D_min)

    @property
    def D_max(self) -> float:
        return math.exp(self.log_D_max)

    @property
    def log_w(self) -> float:
        return 2 * self.log_D_min

    @property
    def w(self) -> float:
        return math.exp(self.log_w)

    @property
    def half_width_I(self) -> float:
        return math.exp(-self.c1 * self.ell)

    def in_I(self, E):
        return np.abs(np.asarray(E) - self.E0) < self.half_width_I

    def window_nonempty(self) -> bool:
        return self.log_D_min <= self.log_D_max

    def echo(self) -> dict:
        d = asdict(self)
        d.update(ell=self.ell, D_min=self.D_min, D_max=self.D_max, w=self.w, half_width_I=self.half_width_I)
        return d


def class_representatives(cantor: CantorSet, k: int, offset: float = 0.5) -> np.ndarray:
    """Point left_j + offset * alpha_k of each generation-k interval, in index order."""
    ctx = cantor.ctx
    return np.array([float(x + ctx.mpf(offset) * cantor.alpha[k]) for x in cantor.lefts(k)])


class BranchEvaluator:
    """E(omega) for class representatives: the `branch`-th sorted eigenvalue.

    Fixed sites carry their class representative; free-site classes come in
    as index arrays of shape (m, |S|).
    """

    def __init__(self, box: BoxSpec, site: SingleSite, bconf: BConfSet, cantor: CantorSet, branch: int = 0, offset: float = 0.5):
        k = bconf.resolution
        self.box, self.site, self.bconf, self.branch = box, site, bconf, branch
        self.params = cantor.params
        self.reps = class_representatives(cantor, k, offset)
        config = Configuration(
            {z: self.reps[int(a, 2)] for z, a in bconf.fixed_part.classes},
            bconf.free_sites,
        )
        op = FiniteVolumeOperator(box, site, config)
        if not 0 <= branch < op.dim:
            raise ValueError(f"branch {branch} out of range for dimension {op.dim}")
        self.order = bconf.free_order
        self.profiles = np.array([op.profile(z) for z in self.order]).reshape(len(self.order), op.dim)
        self.base_diag = op.matrix.diagonal().copy()
        self.lap = laplacian(box)
        self.tridiagonal = box.dim == 1
        self.off = np.full(op.dim - 1, -1.0 / box.mesh**2)
        self.weight = box.mesh**box.dim

    def potentials(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        return self.base_diag[None, :] + self.reps[idx] @ self.profiles

    def energies(self, idx) -> np.ndarray:
        diag = self.potentials(idx)
        j = self.branch
        if self.tridiagonal:
            return np.array([eigvalsh_tridiagonal(d, self.off, select="i", select_range=(j, j))[0] for d in diag])
        base = self.lap.toarray()
        mats = np.broadcast_to(base, (len(diag),) + base.shape).copy()
        n = base.shape[0]
        mats[:, np.arange(n), np.arange(n)] = diag
        return np.linalg.eigvalsh(mats)[:, j]

    def derivatives(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """(E, dE/dt_i) by first-order perturbation, shapes (m,) and (m, |S|)."""
        diag = self.potentials(idx)
        j = self.branch
        E, D = [], []
        for d in diag:
            if self.tridiagonal:
                lam, v = eigh_tridiagonal(d, self.off, select="i", select_range=(j, j))
                lam, v = lam[0], v[:, 0]
            else:
                m = self.lap.toarray()
                m[np.diag_indices_from(m)] = d
                w, V = np.linalg.eigh(m)
                lam, v = w[j], V[:, j]
            E.append(lam)
            D.append(self.profiles @ (v**2))  # h^d |psi|^2 with psi = v / h^(d/2)
        return np.array(E), np.array(D).reshape(len(E), len(self.order))


def _index_grid(K: int, n: int, start: int, stop: int) -> np.ndarray:
    """Base-K digits (most significant first) of start..stop-1."""
    r = np.arange(start, stop, dtype=np.int64)
    out = np.empty((len(r), n), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        out[:, i] = r % K
        r //= K
    return out


def _flat(idx: np.ndarray, K: int) -> np.ndarray:
    f = np.zeros(len(idx), dtype=np.int64)
    for i in range(idx.shape[1]):
        f = f * K + idx[:, i]
    return f


def _map_chunks(fn, chunks, threads: int):
    if threads <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, chunks))


def energy_table(evaluator: BranchEvaluator, threads: int = 1) -> np.ndarray:
    """E over all K^|S| free classes, flat index in base K (first free site most significant)."""
    K, n = evaluator.bconf.K, len(evaluator.order)
    total = K**n
    if total > TABLE_CAP:
        raise ValueError(f"K^|S| = {total} exceeds the table cap {TABLE_CAP}")
    bounds = [(s, min(s + CHUNK, total)) for s in range(0, total, CHUNK)]
    parts = _map_chunks(lambda b: evaluator.energies(_index_grid(K, n, *b)), bounds, threads)
    return np.concatenate(parts)


@dataclass
class CoverScan:
    n_covers: int
    n_failed: int
    min_separation: float
    threshold: float
    worst_pair: Optional[tuple]


def cover_separation_scan(table: np.ndarray, K: int, n: int, threshold: float) -> CoverScan:
    """min over all cover pairs (x, x + e_i) of E(x + e_i) - E(x).

    By monotonicity of E in every coordinate, every comparable distinct pair
    is separated by at least this amount.
    """
    T = table.reshape((K,) * n)
    worst, pair, failed, count = math.inf, None, 0, 0
    for i in range(n):
        diff = np.diff(T, axis=i)
        count += diff.size
        failed += int((diff < threshold).sum())
        j = int(np.argmin(diff))
        if diff.flat[j] < worst:
            worst = float(diff.flat[j])
            lo = np.unravel_index(j, diff.shape)
            hi = list(lo)
            hi[i] += 1
            pair = (tuple(int(a) for a in lo), tuple(int(a) for a in hi))
    return CoverScan(count, failed, worst, threshold, pair)


@dataclass
class SeparationReport:
    status: str  # equal | antichain pair | passed | failed | hypothesis_failed
    separation: float
    threshold: float
    margin: float
    two_w: float
    proof_bound: float
    derivative_range: tuple


def _proof_bound(cfg: WegnerExperimentConfig, schedule_k: int, params: CantorParams, n_free: int) -> float:
    """1/2 D_min e^{-L_{k-1}} - |S| D_max e^{-L_k} at resolution k."""
    Lkm1 = params.scale(schedule_k - 1) if schedule_k > 1 else 0.0
    Lk = params.scale(schedule_k)
    return 0.5 * cfg.D_min * math.exp(-Lkm1) - n_free * cfg.D_max * math.exp(-Lk)


def separation_check(
    box: BoxSpec,
    site: SingleSite,
    bconf: BConfSet,
    E0: float,
    cfg: WegnerExperimentConfig,
    pair,
    cantor: Optional[CantorSet] = None,
    evaluator: Optional[BranchEvaluator] = None,
    strict: bool = False,
) -> SeparationReport:
    """|E(omega') - E(omega)| for a pair of free-class assignments against exp(-c3 ell^(4/3) log ell)."""
    if E0 != cfg.E0:
        cfg = WegnerExperimentConfig(**{**asdict(cfg), "E0": E0})
    if evaluator is None:
        if cantor is None:
            raise ValueError("pass cantor= or evaluator=")
        evaluator = BranchEvaluator(box, site, bconf, cantor, cfg.branch, cfg.offset)
    a, b = (np.asarray(p.indices if isinstance(p, ConfigClass) else p, dtype=np.int64) for p in pair)
    if a.shape != (len(bconf.free_sites),) or b.shape != a.shape:
        raise ShapeMismatch(f"class assignments must have {len(bconf.free_sites)} entries")
    proof = _proof_bound(cfg, bconf.resolution, evaluator.params, len(a))
    if np.array_equal(a, b):
        return SeparationReport("equal", 0.0, cfg.D_min, -cfg.D_min, 2 * cfg.w, proof, (math.nan, math.nan))
    if not is_comparable(tuple(a + 1), tuple(b + 1)):
        return SeparationReport("antichain pair", math.nan, cfg.D_min, math.nan, 2 * cfg.w, proof, (math.nan, math.nan))
    E, D = evaluator.derivatives(np.stack([a, b]))
    inside = cfg.in_I(E)
    probed = D[inside]
    rng = (float(probed.min()), float(probed.max())) if probed.size else (math.nan, math.nan)
    sep = float(abs(E[1] - E[0]))
    if probed.size and (rng[0] < cfg.D_min or rng[1] > cfg.D_max):
        if strict:
            raise HypothesisFailed(f"derivatives {rng} outside [{cfg.D_min:.3g}, {cfg.D_max:.3g}]")
        return SeparationReport("hypothesis_failed", sep, cfg.D_min, sep - cfg.D_min, 2 * cfg.w, proof, rng)
    status = "passed" if sep >= cfg.D_min else "failed"
    return SeparationReport(status, sep, cfg.D_min, sep - cfg.D_min, 2 * cfg.w, proof, rng)


# -- sampling --------------------------------------------------------------------


def _chunk_rngs(seed: int, n_chunks: int):
    return [np.random.default_rng(np.random.SeedSequence([int(seed), i])) for i in range(n_chunks)]


def sample_free_classes(K: int, n: int, trials: int, seed: int) -> np.ndarray:
    """Uniform classes on {0..K-1}^n, deterministic in (seed, chunk index)."""
    sizes = [min(CHUNK, trials - s) for s in range(0, trials, CHUNK)]
    rngs = _chunk_rngs(seed, len(sizes))
    return np.concatenate([r.integers(0, K, size=(m, n)) for r, m in zip(rngs, sizes)]) if sizes else np.zeros((0, n), int)


def sample_classes_via_measure(cantor: CantorSet, k: int, n: int, trials: int, seed: int, depth: Optional[int] = None) -> np.ndarray:
    """Classes of coordinates drawn from mu^(depth) (depth >= k), classified at generation k."""
    depth = cantor.max_depth if depth is None else depth
    if depth < k:
        raise ValueError("sampling depth must be at least the resolution")
    sizes = [min(CHUNK, trials - s) for s in range(0, trials, CHUNK)]
    out = []
    for r, m in zip(_chunk_rngs(seed, len(sizes)), sizes):
        _, values = cantor.sample_array(depth, (m, n), r)
        idx = cantor.classify_array(values, k)
        if (idx < 0).any():
            raise ValueInGap("a sampled value fell in a gap")
        out.append(idx)
    return np.concatenate(out)


# -- Monte Carlo -------------------------------------------------------------------


@dataclass
class WegnerEstimate:
    trials: int
    hits: int
    estimate: float
    sigma: float
    ci_low: float
    ci_high: float
    exact_bound: float
    asymptotic: float
    distinct_hits: int
    hit_set_antichain: bool
    covers_checked: int
    covers_failed: int
    min_cover_separation: float
    derivative_range: tuple
    in_window_classes: int
    dense: bool
    E0: float
    w: float
    hit_classes: list = field(default_factory=list)

    @property
    def within_bound(self) -> bool:
        return self.estimate <= self.exact_bound + self.z_sigma

    z_sigma: float = 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["within_bound"] = self.within_bound
        return d


def wilson_interval(hits: int, n: int, z: float) -> tuple[float, float]:
    p = hits / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def _find_comparable(idx: np.ndarray) -> Optional[tuple]:
    for i in range(len(idx)):
        le = (idx[i] <= idx).all(axis=1)
        ge = (idx[i] >= idx).all(axis=1)
        hit = np.flatnonzero((le | ge) & (np.arange(len(idx)) != i))
        if hit.size:
            return tuple(idx[i]), tuple(idx[hit[0]])
    return None


def wegner_monte_carlo(
    box: BoxSpec,
    site: SingleSite,
    bconf: BConfSet,
    cfg: WegnerExperimentConfig,
    cantor: Optional[CantorSet] = None,
    evaluator: Optional[BranchEvaluator] = None,
    threads: int = 1,
) -> WegnerEstimate:
    """Estimate P(|E(omega) - E0| < w | [B]) by uniform class sampling."""
    if abs(box.side - cfg.L) > 1e-12 * cfg.L:
        raise ShapeMismatch(f"box side {box.side} differs from cfg.L = {cfg.L}")
    dens = bconf.density(cfg.kappa, cfg.kappa_prime, site.delta_plus)
    if cfg.require_dense and not dens.dense:
        raise ConstraintViolation(
            f"free sites not dense: {dens.worst_count} < {dens.required:.3g} in sub-box at {dens.worst_box}"
        )
    if evaluator is None:
        if cantor is None:
            raise ValueError("pass cantor= or evaluator=")
        evaluator = BranchEvaluator(box, site, bconf, cantor, cfg.branch, cfg.offset)
    K, n = bconf.K, len(bconf.free_sites)

    idx = sample_free_classes(K, n, cfg.trials, cfg.seed)
    flat = _flat(idx, K)
    uniq, inverse = np.unique(flat, return_inverse=True)
    uidx = idx[np.unique(inverse, return_index=True)[1]]
    bounds = [(s, min(s + CHUNK, len(uniq))) for s in range(0, len(uniq), CHUNK)]
    E_u = np.concatenate(_map_chunks(lambda b: evaluator.energies(uidx[b[0] : b[1]]), bounds, threads)) if bounds else np.zeros(0)

    # derivative hypothesis on every sampled class whose energy lies in I
    win = np.flatnonzero(cfg.in_I(E_u))
    if win.size == 0:
        raise HypothesisFailed(f"no sampled class has E in I = ({cfg.E0} +- {cfg.half_width_I:.3g}); branch does not enter I")
    D_parts = _map_chunks(
        lambda b: evaluator.derivatives(uidx[win[b[0] : b[1]]])[1],
        [(s, min(s + CHUNK, win.size)) for s in range(0, win.size, CHUNK)],
        threads,
    )
    D = np.concatenate(D_parts)
    drange = (float(D.min()), float(D.max()))
    if drange[0] < cfg.D_min or drange[1] > cfg.D_max:
        raise HypothesisFailed(
            f"measured derivatives in [{drange[0]:.4g}, {drange[1]:.4g}] on {win.size} classes in I, "
            f"hypothesis window [{cfg.D_min:.4g}, {cfg.D_max:.4g}]"
        )

    hit_u = np.abs(E_u - cfg.E0) < cfg.w
    hits = int(hit_u[inverse].sum())
    hit_idx = uidx[hit_u]

    # upward covers of every hit class; monotonicity reduces comparable pairs to these
    ups, base_E = [], []
    for r, e in zip(hit_idx, E_u[hit_u]):
        for i in range(n):
            if r[i] + 1 < K:
                u = r.copy()
                u[i] += 1
                ups.append(u)
                base_E.append(e)
    if ups:
        E_up = evaluator.energies(np.array(ups))
        seps = E_up - np.array(base_E)
        covers_failed = int((seps < cfg.D_min).sum())
        min_sep = float(seps.min())
    else:
        covers_failed, min_sep = 0, math.inf

    antichain = _find_comparable(hit_idx) is None
    p = hits / cfg.trials
    sigma = math.sqrt(p * (1 - p) / cfg.trials)
    lo, hi = wilson_interval(hits, cfg.trials, cfg.z)
    bound = antichain_probability_bound(K, n)
    exact = float(bound.exact)
    if lo <= exact <= hi:
        raise InsufficientTrials(f"confidence interval [{lo:.4g}, {hi:.4g}] contains the bound {exact:.4g}")
    return WegnerEstimate(
        trials=cfg.trials,
        hits=hits,
        estimate=p,
        sigma=sigma,
        ci_low=lo,
        ci_high=hi,
        exact_bound=exact,
        asymptotic=cfg.ell ** (-box.dim / 2),
        distinct_hits=int(hit_u.sum()),
        hit_set_antichain=antichain,
        covers_checked=len(ups),
        covers_failed=covers_failed,
        min_cover_separation=min_sep,
        derivative_range=drange,
        in_window_classes=int(win.size),
        dense=dens.dense,
        E0=cfg.E0,
        w=cfg.w,
        hit_classes=[tuple(int(v) for v in r) for r in hit_idx],
        z_sigma=cfg.z * sigma,
    )


# -- localization -----------------------------------------------------------------


@dataclass(frozen=True)
class LocalizationFit:
    eigenvalue: float
    m: float
    intercept: float
    r2: float
    x_max: tuple
    n_points: int


def cell_norms(box: BoxSpec, phi: np.ndarray) -> tuple[list, np.ndarray]:
    """||chi_x phi|| over the unit cells of the lattice sites."""
    sites = box.sites
    w = box.mesh**box.dim
    norms = np.array([math.sqrt(w * float(np.sum(phi[box.cell(z)] ** 2))) for z in sites])
    return sites, norms


def fit_decay(box: BoxSpec, phi: np.ndarray, fit_radius: Optional[float] = None, noise_floor: float = 1e-12) -> tuple:
    """Least-squares fit of log||chi_x phi|| = a - m |x - x_max|; returns (m, a, r2, x_max, n)."""
    sites, norms = cell_norms(box, phi)
    j = int(np.argmax(norms))
    x0 = np.array(sites[j], dtype=float)
    dist = np.linalg.norm(np.array(sites, dtype=float) - x0, axis=1)
    radius = box.side / 10 if fit_radius is None else fit_radius
    keep = (norms > noise_floor * norms[j]) & (dist <= radius)
    r, y = dist[keep], np.log(norms[keep])
    if len(r) < 3 or np.ptp(r) == 0:
        return math.nan, math.nan, math.nan, tuple(sites[j]), int(len(r))
    A = np.vstack([np.ones_like(r), r]).T
    (a, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([a, slope])
    tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1 - float(np.sum(resid**2)) / tot if tot > 0 else 1.0
    return float(-slope), float(a), r2, tuple(sites[j]), int(len(r))


def localization_fit(
    box: BoxSpec,
    site: SingleSite,
    config: Configuration,
    E_window: tuple,
    max_modes: Optional[int] = None,
    fit_radius: Optional[float] = None,
    noise_floor: float = 1e-12,
) -> list[LocalizationFit]:
    """Exponential decay fits for eigenfunctions with eigenvalue in E_window."""
    op = FiniteVolumeOperator(box, site, config)
    s = op.spectrum()
    lo, hi = E_window
    sel = np.flatnonzero((s.eigenvalues >= lo) & (s.eigenvalues <= hi))
    if sel.size == 0:
        raise WindowEmpty(f"no eigenvalue in [{lo}, {hi}]")
    if max_modes is not None:
        sel = sel[:max_modes]
    out = []
    for j in sel:
        m, a, r2, x0, npts = fit_decay(box, s.eigenvectors[:, j], fit_radius, noise_floor)
        out.append(LocalizationFit(float(s.eigenvalues[j]), m, a, r2, x0, npts))
    return out
