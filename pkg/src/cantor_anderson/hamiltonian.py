"""Finite-difference Anderson Hamiltonians on boxes with free sites.

H = -Laplacian (Dirichlet, (2d+1)-point stencil, mesh h) + sum_z w_z u(x - z),
where w_z is the background value on fixed sites and the free variable t_z
on free sites.  Grid functions are normalised in the inner product
h**d * sum(f * g).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, splu

from .errors import (
    BranchAmbiguity,
    DegenerateEigenvalue,
    EigsolverNoConvergence,
    EmptyBox,
    MeshTooCoarse,
)

DENSE_LIMIT = 4000


def _site(z) -> tuple:
    if isinstance(z, (int, np.integer)):
        return (int(z),)
    return tuple(int(c) for c in z)


@dataclass(frozen=True)
class SingleSite:
    """Single-site bump u with u_minus on the inner cube <= u <= u_plus on the outer cube.

    profile="indicator": u_plus on the half-open cube of side delta_minus.
    profile="bump": u_plus * prod_i phi(2 x_i / delta_plus) with the smooth
    phi(s) = exp(1 - 1/(1 - s^2)); requires delta_minus < delta_plus.
    """

    u_minus: float = 1.0
    u_plus: float = 1.0
    delta_minus: float = 1.0
    delta_plus: float = 1.0
    profile: str = "indicator"

    def __post_init__(self):
        if not (0 < self.u_minus <= self.u_plus):
            raise ValueError("need 0 < u_minus <= u_plus")
        if not (0 < self.delta_minus <= self.delta_plus):
            raise ValueError("need 0 < delta_minus <= delta_plus")
        if self.profile == "bump":
            s = self.delta_minus / self.delta_plus
            # minimum over the inner cube sits at its corner; d <= 2
            corner = self.u_plus * float(self._phi(np.array(s))) ** 2
            if corner < self.u_minus:
                raise ValueError("bump profile falls below u_minus on the inner cube")
        elif self.profile != "indicator":
            raise ValueError(f"unknown profile {self.profile!r}")

    @staticmethod
    def _phi(s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        inside = np.abs(s) < 1
        out[inside] = np.exp(1 - 1 / (1 - s[inside] ** 2))
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """u evaluated at points x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if self.profile == "indicator":
            half = self.delta_minus / 2
            inside = ((x >= -half) & (x < half)).all(axis=-1)
            return np.where(inside, self.u_plus, 0.0)
        return self.u_plus * np.prod(self._phi(2 * x / self.delta_plus), axis=-1)


@dataclass(frozen=True)
class BoxSpec:
    dim: int
    center: tuple
    side: float
    mesh: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        center = tuple(float(c) for c in np.atleast_1d(self.center))
        if len(center) != self.dim:
            raise ValueError(f"center {self.center} does not have {self.dim} coordinates")
        object.__setattr__(self, "center", center)
        if self.side <= 0 or self.mesh <= 0:
            raise EmptyBox("side and mesh must be positive")
        cells = self.side / self.mesh
        if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
            raise ValueError(f"side/mesh = {cells} is not an integer")
        if round(cells) < 2:
            raise EmptyBox(f"box of side {self.side} has no interior points at mesh {self.mesh}")

    @property
    def points_per_axis(self) -> int:
        return int(round(self.side / self.mesh)) - 1

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    def axis(self, i: int = 0) -> np.ndarray:
        lo = self.center[i] - self.side / 2
        return lo + self.mesh * np.arange(1, self.points_per_axis + 1)

    @property
    def points(self) -> np.ndarray:
        """Interior grid points, shape (size, dim), C order over axes."""
        axes = np.meshgrid(*[self.axis(i) for i in range(self.dim)], indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    def _sites_within(self, half: float) -> list:
        ranges = []
        for c in self.center:
            lo = math.floor(c - half) + 1
            hi = math.ceil(c + half) - 1
            ranges.append(range(lo, hi + 1))
        return [z for z in itertools.product(*ranges) if all(abs(zi - ci) < half for zi, ci in zip(z, self.center))]

    @property
    def sites(self) -> list:
        """Lattice sites strictly inside the open box."""
        return self._sites_within(self.side / 2)

    def shrunk_sites(self, delta_plus: float = 1.0) -> list:
        """Lattice sites of the shrunk box of side L - delta_plus."""
        return self._sites_within((self.side - delta_plus) / 2)

    def cell(self, z) -> np.ndarray:
        """Grid indices inside the unit cube [z - 1/2, z + 1/2)^d."""
        z = np.asarray(_site(z), dtype=float)
        P = self.points
        inside = ((P >= z - 0.5) & (P < z + 0.5)).all(axis=1)
        return np.flatnonzero(inside)


@dataclass
class Configuration:
    """Background values on fixed sites plus free sites with free values."""

    values: dict = field(default_factory=dict)
    free_sites: frozenset = frozenset()
    free_values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = {_site(k): float(v) for k, v in self.values.items()}
        self.free_sites = frozenset(_site(z) for z in self.free_sites)
        fv = {_site(k): float(v) for k, v in self.free_values.items()}
        self.free_values = {z: fv.get(z, 0.0) for z in self.free_sites}
        extra = set(fv) - self.free_sites
        if extra:
            raise ValueError(f"free values given for non-free sites {sorted(extra)}")
        clash = self.free_sites & set(self.values)
        if clash:
            raise ValueError(f"sites {sorted(clash)} are both fixed and free")

    @classmethod
    def constant(cls, box: BoxSpec, value: float = 0.0, free_sites=(), free_values=None) -> "Configuration":
        free = {_site(z) for z in free_sites}
        return cls({z: value for z in box.sites if z not in free}, free, free_values or {})

    @classmethod
    def from_values(cls, box: BoxSpec, values: Sequence[float], free_sites=(), free_values=None) -> "Configuration":
        """Values listed in box.sites order; entries on free sites are ignored."""
        free = {_site(z) for z in free_sites}
        sites = box.sites
        if len(values) != len(sites):
            raise ValueError(f"{len(values)} values for {len(sites)} sites")
        return cls({z: v for z, v in zip(sites, values) if z not in free}, free, free_values or {})

    @property
    def free_order(self) -> list:
        return sorted(self.free_sites)

    def weights(self) -> dict:
        w = dict(self.values)
        w.update(self.free_values)
        return w

    def check_covers(self, box: BoxSpec):
        expected = set(box.sites)
        got = set(self.values) | self.free_sites
        if got != expected:
            missing, stray = expected - got, got - expected
            raise ValueError(f"configuration does not cover the box: missing {sorted(missing)}, extra {sorted(stray)}")
        bad = [z for z, v in self.weights().items() if not 0.0 <= v <= 1.0]
        if bad:
            raise ValueError(f"values outside [0, 1] at {bad}")

    def with_free_values(self, t) -> "Configuration":
        if not isinstance(t, Mapping):
            t = dict(zip(self.free_order, t))
        return Configuration(self.values, self.free_sites, t)


@dataclass
class SpectralResult:
    eigenvalues: np.ndarray
    eigenvectors: Optional[np.ndarray]  # columns, h^d-normalised
    window: tuple = (-np.inf, np.inf)


def laplacian(box: BoxSpec) -> sp.csr_matrix:
    """-Laplacian with Dirichlet boundary, (2d+1)-point stencil."""
    N, h = box.points_per_axis, box.mesh
    one = sp.diags([-np.ones(N - 1), 2 * np.ones(N), -np.ones(N - 1)], [-1, 0, 1]) / h**2
    if box.dim == 1:
        return sp.csr_matrix(one)
    eye = sp.identity(N)
    return sp.csr_matrix(sp.kron(one, eye) + sp.kron(eye, one))


class FiniteVolumeOperator:
    """H_{omega, t_S, Lambda} on the interior grid of a box."""

    def __init__(self, box: BoxSpec, site: SingleSite, config: Configuration, _parts=None):
        if box.mesh > site.delta_minus / 4 + 1e-12:
            raise MeshTooCoarse(f"mesh {box.mesh} > delta_minus/4 = {site.delta_minus / 4}")
        config.check_covers(box)
        self.box, self.site, self.config = box, site, config
        if _parts is None:
            P = box.points
            profiles = {}
            for z in box.sites:
                vals = site(P - np.asarray(z, dtype=float))
                profiles[z] = vals
            _parts = (laplacian(box), profiles)
        self._lap, self._profiles = _parts
        w = config.weights()
        V = np.zeros(box.size)
        for z, prof in self._profiles.items():
            if w[z]:
                V += w[z] * prof
        self.potential = V
        self.matrix = sp.csr_matrix(self._lap + sp.diags(V))
        self._spectrum: Optional[SpectralResult] = None

    @property
    def dim(self) -> int:
        return self.box.size

    def profile(self, z) -> np.ndarray:
        """u(x - z) on the grid."""
        return self._profiles[_site(z)]

    def with_free_values(self, t) -> "FiniteVolumeOperator":
        return FiniteVolumeOperator(self.box, self.site, self.config.with_free_values(t), (self._lap, self._profiles))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def spectrum(self) -> SpectralResult:
        """Full decomposition (dense); restricted to DENSE_LIMIT."""
        if self._spectrum is None:
            if self.dim > DENSE_LIMIT:
                raise ValueError(f"dimension {self.dim} > {DENSE_LIMIT}: use eigenpairs_near")
            lam, V = np.linalg.eigh(self.dense())
            self._spectrum = SpectralResult(lam, V / self.box.mesh ** (self.box.dim / 2))
        return self._spectrum

    def eigenpairs_near(self, E: float, k: int = 6) -> SpectralResult:
        """k eigenpairs closest to E (shift-invert Lanczos above DENSE_LIMIT)."""
        if self.dim <= DENSE_LIMIT:
            s = self.spectrum()
            idx = np.sort(np.argsort(np.abs(s.eigenvalues - E))[:k])
            return SpectralResult(s.eigenvalues[idx], s.eigenvectors[:, idx])
        try:
            lam, V = eigsh(self.matrix, k=k, sigma=E, which="LM", tol=1e-12)
        except ArpackNoConvergence as exc:
            res = [np.linalg.norm(self.matrix @ v - l * v) for l, v in zip(exc.eigenvalues, exc.eigenvectors.T)]
            raise EigsolverNoConvergence(f"shift-invert at E={E}: residuals {res}") from exc
        order = np.argsort(lam)
        return SpectralResult(lam[order], V[:, order] / self.box.mesh ** (self.box.dim / 2))

    def norm_bound(self) -> float:
        return float(abs(self.matrix).sum(axis=1).max())


def assemble(box: BoxSpec, site: SingleSite, config: Configuration) -> FiniteVolumeOperator:
    return FiniteVolumeOperator(box, site, config)


def _pole_tol(op: FiniteVolumeOperator) -> float:
    return 1e-12 * max(1.0, op.norm_bound())


def resolvent_norm(op: FiniteVolumeOperator, E: float) -> float:
    """||(H - E)^-1|| = 1/dist(E, spectrum); inf at an eigenvalue."""
    lam = op.eigenpairs_near(E, k=1).eigenvalues
    d = float(np.min(np.abs(lam - E)))
    return math.inf if d <= _pole_tol(op) else 1.0 / d


def _resolvent_columns(op: FiniteVolumeOperator, E: float, cols: np.ndarray) -> np.ndarray:
    """Columns `cols` of (H - E)^-1 in the plain grid basis."""
    if op.dim <= DENSE_LIMIT:
        s = op.spectrum()
        V = s.eigenvectors * op.box.mesh ** (op.box.dim / 2)
        return (V / (s.eigenvalues - E)) @ V[cols].T
    lu = splu(sp.csc_matrix(op.matrix - E * sp.identity(op.dim)))
    rhs = np.zeros((op.dim, len(cols)))
    rhs[cols, np.arange(len(cols))] = 1.0
    return lu.solve(rhs)


def green_decay(op: FiniteVolumeOperator, E: float, x, y) -> float:
    """||chi_x (H - E)^-1 chi_y|| for the unit cubes around sites x and y."""
    if math.isinf(resolvent_norm(op, E)):
        return math.inf
    ix, iy = op.box.cell(x), op.box.cell(y)
    block = _resolvent_columns(op, E, iy)[ix]
    return float(np.linalg.norm(block, 2))


@dataclass(frozen=True)
class FreeProbePolicy:
    """Finite set of t_S values standing in for all of [0, 1]^S."""

    max_vertex_sites: int = 12
    n_random: int = 0
    seed: int = 0

    def probes(self, free_order: Sequence) -> list:
        n = len(free_order)
        out = []
        if n <= self.max_vertex_sites:
            out.extend(itertools.product((0.0, 1.0), repeat=n))
        rng = np.random.default_rng(self.seed)
        out.extend(tuple(r) for r in rng.random((self.n_random, n)))
        if not out:
            out.append(tuple([0.0] * n))
        return out


@dataclass
class GoodBoxVerdict:
    good: bool
    resolvent_bound: float
    worst_resolvent: float
    worst_probe: tuple
    worst_pair: Optional[tuple]
    worst_pair_ratio: float  # max of ||chi_x R chi_y|| / exp(-m|x-y|)
    n_probes: int
    n_pairs: int


def is_good_box(
    box: BoxSpec,
    site: SingleSite,
    config: Configuration,
    E: float,
    m: float,
    eps: float,
    probe: Optional[FreeProbePolicy] = None,
    probes: Optional[Sequence] = None,
) -> GoodBoxVerdict:
    """Check ||R(E)|| <= exp(L^(1-eps)) and the off-diagonal decay for every probe.

    `probes` overrides the policy with an explicit list of t_S tuples.
    """
    op = assemble(box, site, config)
    order = config.free_order
    if probes is None:
        probes = (probe or FreeProbePolicy()).probes(order) if order else [()]
    L = box.side
    bound = math.exp(L ** (1 - eps))
    sites = box.sites
    pairs = [
        (x, y)
        for x in sites
        for y in sites
        if math.dist(x, y) >= L / 10
    ]
    cells = {z: box.cell(z) for z in sites}
    worst_r, worst_probe = -1.0, None
    worst_ratio, worst_pair = 0.0, None
    for t in probes:
        h = op.with_free_values(t) if order else op
        r = resolvent_norm(h, E)
        if r > worst_r:
            worst_r, worst_probe = r, tuple(t)
        if math.isinf(r):
            worst_ratio = math.inf
            continue
        if not pairs:
            continue
        allcols = np.concatenate([cells[z] for z in sites])
        R = _resolvent_columns(h, E, allcols)
        offsets = np.cumsum([0] + [len(cells[z]) for z in sites])
        col_of = {z: slice(offsets[i], offsets[i + 1]) for i, z in enumerate(sites)}
        for x, y in pairs:
            block = R[cells[x]][:, col_of[y]]
            ratio = np.linalg.norm(block, 2) / math.exp(-m * math.dist(x, y))
            if ratio > worst_ratio:
                worst_ratio, worst_pair = ratio, (x, y)
    good = worst_r <= bound and worst_ratio <= 1.0
    return GoodBoxVerdict(good, bound, worst_r, worst_probe, worst_pair, worst_ratio, len(probes), len(pairs))


def _simple_index(op: FiniteVolumeOperator, lam: float, gap_tol: Optional[float]) -> int:
    ev = op.spectrum().eigenvalues
    j = int(np.argmin(np.abs(ev - lam)))
    if gap_tol is None:
        gap_tol = 1e-9 * max(1.0, float(ev[-1] - ev[0]))
    others = np.delete(ev, j)
    gap = float(np.min(np.abs(others - ev[j]))) if len(others) else math.inf
    if gap < gap_tol:
        raise DegenerateEigenvalue(f"eigenvalue {ev[j]:.12g} has a neighbour {gap:.3g} away (< {gap_tol:.3g})")
    return j


def eigenvalue_derivatives(
    op: FiniteVolumeOperator,
    eigenpair=None,
    index: Optional[int] = None,
    sites=None,
    gap_tol: Optional[float] = None,
) -> dict:
    """d lambda / d t_i = <psi, u(. - i) psi> for a simple eigenvalue.

    Pass either an eigenpair (lam, psi) or a sorted eigenvalue index.  Sites
    default to the configuration's free sites.
    """
    s = op.spectrum()
    if eigenpair is not None:
        lam, psi = eigenpair
        j = _simple_index(op, lam, gap_tol)
        psi = np.asarray(psi, dtype=float)
    else:
        j = index if index is not None else 0
        _simple_index(op, s.eigenvalues[j], gap_tol)
        psi = s.eigenvectors[:, j]
    w = op.box.mesh**op.box.dim
    psi2 = psi**2 / (w * np.sum(psi**2))
    sites = op.config.free_order if sites is None else [_site(z) for z in sites]
    return {z: float(w * np.dot(op.profile(z), psi2)) for z in sites}


@dataclass
class Branch:
    params: np.ndarray  # (m, |S|) points along the path
    values: np.ndarray  # (m,) eigenvalue on the branch
    overlaps: np.ndarray  # (m,) overlap with the previous step's eigenvector


def track_eigenvalue(
    op: FiniteVolumeOperator,
    path: Sequence,
    lam0: float,
    min_overlap: float = 0.9,
    initial_step: float = 0.125,
    max_refine: int = 30,
    tol: float = 1e-8,
) -> Branch:
    """Follow one eigenvalue branch along a polyline in t_S space by eigenvector overlap."""
    pts = [np.asarray(p, dtype=float) for p in path]
    order = op.config.free_order
    if any(p.shape != (len(order),) for p in pts):
        raise ValueError(f"path points must have {len(order)} coordinates")
    first = op.with_free_values(pts[0]).spectrum()
    j = int(np.argmin(np.abs(first.eigenvalues - lam0)))
    if abs(first.eigenvalues[j] - lam0) > tol * max(1.0, abs(lam0)):
        raise ValueError(f"{lam0} is not an eigenvalue at the start of the path")
    psi = first.eigenvectors[:, j]
    w = op.box.mesh**op.box.dim
    params, values, overlaps = [pts[0]], [first.eigenvalues[j]], [1.0]
    for a, b in zip(pts[:-1], pts[1:]):
        s, ds = 0.0, initial_step
        while s < 1.0:
            ds = min(ds, 1.0 - s)
            t = a + (s + ds) * (b - a)
            spec = op.with_free_values(t).spectrum()
            ov = np.abs(w * (spec.eigenvectors.T @ psi))
            k = int(np.argmax(ov))
            second = np.partition(ov, -2)[-2] if len(ov) > 1 else 0.0
            if ov[k] >= min_overlap and ov[k] > second:
                s += ds
                psi = spec.eigenvectors[:, k]
                params.append(t)
                values.append(spec.eigenvalues[k])
                overlaps.append(ov[k])
                ds *= 1.5
            else:
                ds /= 2
                if ds < 2.0**-max_refine:
                    raise BranchAmbiguity(f"overlap {ov[k]:.3f} < {min_overlap} near t = {t.tolist()}")
    return Branch(np.array(params), np.array(values), np.array(overlaps))
