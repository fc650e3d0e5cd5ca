import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cantor_anderson.errors import (
    BranchAmbiguity,
    DegenerateEigenvalue,
    EmptyBox,
    MeshTooCoarse,
)
from cantor_anderson.hamiltonian import (
    BoxSpec,
    Configuration,
    FreeProbePolicy,
    SingleSite,
    assemble,
    eigenvalue_derivatives,
    green_decay,
    is_good_box,
    laplacian,
    resolvent_norm,
    track_eigenvalue,
)


def dirichlet_eigs(N, h):
    """Closed form for the 1-d three-point Dirichlet Laplacian."""
    j = np.arange(1, N + 1)
    return np.sort(4 / h**2 * np.sin(j * np.pi / (2 * (N + 1))) ** 2)


BOX1 = BoxSpec(1, (0.5,), 10.0, 0.25)
SITE = SingleSite()


def zero_op(box=BOX1, free=(), site=SITE):
    return assemble(box, site, Configuration.constant(box, 0.0, free_sites=free))


class TestBox:
    def test_points_and_sites(self):
        assert BOX1.points_per_axis == 39
        assert BOX1.sites == [(z,) for z in range(-4, 6)]
        assert BOX1.shrunk_sites(1.0) == [(z,) for z in range(-4, 6) if abs(z - 0.5) < 4.5]

    def test_cells_partition_grid(self):
        cells = np.concatenate([BOX1.cell(z) for z in BOX1.sites])
        assert sorted(cells.tolist()) == list(range(BOX1.size))
        box2 = BoxSpec(2, (0.5, 0.5), 4.0, 0.25)
        cells = np.concatenate([box2.cell(z) for z in box2.sites])
        assert sorted(cells.tolist()) == list(range(box2.size))

    def test_empty_box(self):
        with pytest.raises(EmptyBox):
            BoxSpec(1, (0.0,), 0.25, 0.25)

    def test_mesh_too_coarse(self):
        box = BoxSpec(1, (0.5,), 4.0, 0.5)
        with pytest.raises(MeshTooCoarse):
            assemble(box, SITE, Configuration.constant(box, 0.0))

    def test_configuration_must_cover(self):
        with pytest.raises(ValueError):
            assemble(BOX1, SITE, Configuration({(0,): 0.5}))


class TestSpectrum:
    def test_closed_form_1d(self):
        ev = zero_op().spectrum().eigenvalues
        assert np.max(np.abs(ev - dirichlet_eigs(39, 0.25))) < 1e-10

    def test_tensor_sum_2d(self):
        box = BoxSpec(2, (0.5, 0.5), 3.0, 0.25)
        ev = zero_op(box).spectrum().eigenvalues
        one = dirichlet_eigs(box.points_per_axis, 0.25)
        expected = np.sort((one[:, None] + one[None, :]).ravel())
        assert np.max(np.abs(ev - expected)) < 1e-10

    def test_constant_shift(self):
        site = SingleSite(2.0, 2.0)
        op = assemble(BOX1, site, Configuration.constant(BOX1, 0.75))
        assert np.allclose(op.potential, 1.5)
        assert np.max(np.abs(op.spectrum().eigenvalues - dirichlet_eigs(39, 0.25) - 1.5)) < 1e-10

    def test_symmetric_and_normalised(self):
        rng = np.random.default_rng(0)
        op = assemble(BOX1, SITE, Configuration.from_values(BOX1, rng.random(10)))
        A = op.dense()
        assert np.array_equal(A, A.T)
        V = op.spectrum().eigenvectors
        assert np.allclose(0.25 * V.T @ V, np.eye(BOX1.size), atol=1e-10)

    @given(st.lists(st.floats(0, 1), min_size=10, max_size=10), st.lists(st.floats(0, 1), min_size=10, max_size=10))
    def test_monotone_in_configuration(self, a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        e_lo = assemble(BOX1, SITE, Configuration.from_values(BOX1, lo)).spectrum().eigenvalues
        e_hi = assemble(BOX1, SITE, Configuration.from_values(BOX1, hi)).spectrum().eigenvalues
        assert (e_hi >= e_lo - 1e-9).all()
        assert e_lo[0] > 0

    def test_mesh_refinement_second_order(self):
        errs = []
        for h in (0.5, 0.25, 0.125):
            box = BoxSpec(1, (0.5,), 4.0, h)
            site = SingleSite(delta_minus=4 * h, delta_plus=4 * h)
            lam = zero_op(box, site=site).spectrum().eigenvalues[0]
            errs.append(abs(lam - (math.pi / 4.0) ** 2))
        assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5

    def test_sparse_path_matches_dense(self):
        op = zero_op()
        dense = op.spectrum().eigenvalues
        near = op.eigenpairs_near(3.0, k=4).eigenvalues
        idx = np.sort(np.argsort(np.abs(dense - 3.0))[:4])
        assert np.allclose(near, dense[idx])

    def test_laplacian_row_sums(self):
        M = laplacian(BoxSpec(2, (0.5, 0.5), 3.0, 0.25)).toarray()
        assert np.isclose(M.sum(axis=1).max(), 16 * 2)


class TestBump:
    def test_profile_bounds(self):
        site = SingleSite(0.1, 1.0, 0.5, 1.0, profile="bump")
        x = np.linspace(-1, 1, 2001)[:, None]
        u = site(x)
        assert u.max() <= 1.0 and u.max() == pytest.approx(1.0)
        assert (u[np.abs(x[:, 0]) >= 0.5] == 0).all()
        assert (u[np.abs(x[:, 0]) <= 0.25] >= 0.1).all()

    def test_rejects_low_bump(self):
        with pytest.raises(ValueError):
            SingleSite(0.9, 1.0, 0.9, 1.0, profile="bump")


class TestResolvent:
    def test_below_spectrum(self):
        assert resolvent_norm(zero_op(), -1.0) <= 1.0

    def test_midpoint(self):
        op = zero_op()
        ev = op.spectrum().eigenvalues
        mid = (ev[3] + ev[4]) / 2
        assert resolvent_norm(op, mid) == pytest.approx(2 / (ev[4] - ev[3]), rel=1e-9)

    def test_pole(self):
        op = zero_op()
        assert math.isinf(resolvent_norm(op, op.spectrum().eigenvalues[2]))

    def test_green_bounded_and_decaying(self):
        box = BoxSpec(1, (0.5,), 20.0, 0.25)
        op = assemble(box, SingleSite(5.0, 5.0), Configuration.constant(box, 1.0))
        E = -1.0
        R = resolvent_norm(op, E)
        x = box.sites[0]
        g = [green_decay(op, E, x, y) for y in box.sites]
        assert max(g) <= R + 1e-12
        above = [v for v in g if v > 1e-12]  # spectral sums bottom out near 1e-17
        assert len(above) >= 10 and all(b < a for a, b in zip(above, above[1:]))
        assert max(g[12:]) < 1e-12


class TestGoodBox:
    box = BoxSpec(1, (0.5,), 20.0, 0.25)

    def test_good_below_spectrum(self):
        cfg = Configuration.constant(self.box, 1.0, free_sites=[(0,), (3,)])
        v = is_good_box(self.box, SingleSite(5.0, 5.0), cfg, E=-1.0, m=0.5, eps=0.5)
        assert v.good and v.n_probes == 4 and v.n_pairs > 0
        assert v.worst_resolvent <= 1.0

    def test_bad_at_eigenvalue(self):
        cfg = Configuration.constant(self.box, 0.0)
        E = assemble(self.box, SITE, cfg).spectrum().eigenvalues[0]
        v = is_good_box(self.box, SITE, cfg, E=E, m=0.1, eps=0.5)
        assert not v.good and math.isinf(v.worst_resolvent)

    def test_bad_when_decay_too_fast(self):
        cfg = Configuration.constant(self.box, 1.0)
        v = is_good_box(self.box, SingleSite(5.0, 5.0), cfg, E=-1.0, m=20.0, eps=0.5)
        assert not v.good and v.worst_pair_ratio > 1

    def test_probe_policy(self):
        p = FreeProbePolicy(max_vertex_sites=2, n_random=3, seed=1)
        assert len(p.probes([(0,), (1,)])) == 7
        assert len(p.probes([(0,), (1,), (2,)])) == 3
        assert p.probes([(0,), (1,), (2,)]) == p.probes([(0,), (1,), (2,)])


class TestDerivatives:
    free = [(-2,), (1,), (4,)]

    def op(self, t=(0.3, 0.6, 0.1)):
        rng = np.random.default_rng(3)
        cfg = Configuration.from_values(BOX1, rng.random(10), free_sites=self.free)
        return assemble(BOX1, SingleSite(4.0, 4.0), cfg).with_free_values(t)

    def test_linear_in_free_values(self):
        a, b = self.op((0, 0, 0)), self.op((0.5, 0, 0))
        assert np.allclose(b.potential - a.potential, 0.5 * a.profile((-2,)))

    @pytest.mark.parametrize("index", [0, 1, 5])
    def test_hellmann_feynman_vs_finite_difference(self, index):
        t = np.array([0.3, 0.6, 0.1])
        d = eigenvalue_derivatives(self.op(t), index=index)
        h = 1e-5
        for i, z in enumerate(self.free):
            e = np.zeros(3)
            e[i] = h
            fd = (self.op(t + e).spectrum().eigenvalues[index] - self.op(t - e).spectrum().eigenvalues[index]) / (2 * h)
            assert d[z] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_nonnegative_and_bounded(self):
        d = eigenvalue_derivatives(self.op(), index=2)
        assert all(0 <= v <= 4.0 for v in d.values())

    def test_eigenpair_input(self):
        op = self.op()
        s = op.spectrum()
        a = eigenvalue_derivatives(op, eigenpair=(s.eigenvalues[1], s.eigenvectors[:, 1]))
        b = eigenvalue_derivatives(op, index=1)
        assert a == pytest.approx(b)

    def test_degenerate(self):
        box = BoxSpec(2, (0.5, 0.5), 3.0, 0.25)
        op = zero_op(box, free=[(0, 0)])
        with pytest.raises(DegenerateEigenvalue):
            eigenvalue_derivatives(op, index=1)


class TestTracking:
    free = [(0,), (2,)]

    def base(self):
        return assemble(BOX1, SingleSite(4.0, 4.0), Configuration.constant(BOX1, 0.2, free_sites=self.free))

    def test_constant_path(self):
        op = self.base()
        lam = op.spectrum().eigenvalues[0]
        br = track_eigenvalue(op, [(0, 0), (0, 0)], lam)
        assert np.allclose(br.values, lam)

    def test_monotone_path(self):
        op = self.base()
        lam = op.spectrum().eigenvalues[0]
        br = track_eigenvalue(op, [(0, 0), (1, 1)], lam)
        assert (np.diff(br.values) >= -1e-12).all()
        assert br.values[-1] == pytest.approx(op.with_free_values((1, 1)).spectrum().eigenvalues[0])
        assert (br.overlaps >= 0.9).all()

    def test_round_trip(self):
        op = self.base()
        lam = op.spectrum().eigenvalues[1]
        br = track_eigenvalue(op, [(0, 0), (1, 0), (0, 0)], lam)
        assert br.values[-1] == pytest.approx(lam, abs=1e-10)

    def test_not_an_eigenvalue(self):
        with pytest.raises(ValueError):
            track_eigenvalue(self.base(), [(0, 0), (1, 1)], 123.456)

    def test_ambiguity_reported(self):
        op = self.base()
        lam = op.spectrum().eigenvalues[0]
        with pytest.raises(BranchAmbiguity):
            track_eigenvalue(op, [(0, 0), (1, 1)], lam, min_overlap=1.0 + 1e-9, max_refine=5)
