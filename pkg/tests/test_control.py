import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linboltz.control import (DisjointSet, build_classes, check_forward_invariance, check_gcc, extract_omega,
                              label_mask, lebeau_constant, project_equilibrium, stationary_basis)
from linboltz.errors import ConfigurationError, DegenerateError
from linboltz.fields import DistributionField
from linboltz.geometry import DomainSpec, PotentialSpec, build_grid
from linboltz.kernels import KernelSpec, Profile, apply_collision

ZERO = PotentialSpec.zero(1)
TRAP = PotentialSpec("harmonic_trap", 1, x0=(0.5,), eps=25.0, eta=0.1)


@pytest.fixture(scope="module")
def grid():
    return build_grid(DomainSpec("torus", 1), 6.0, 64, 64)


@pytest.fixture(scope="module")
def grid_odd():
    return build_grid(DomainSpec("torus", 1), 6.0, 64, 65)


@pytest.fixture(scope="module")
def two_class(grid):
    spec = KernelSpec.two_class()
    om = extract_omega(spec, grid)
    return spec, om, build_classes(om, spec, ZERO)


class TestDisjointSet:
    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.integers(0, 19), st.integers(0, 19)), max_size=40))
    def test_matches_naive_closure(self, edges):
        ds = DisjointSet(20)
        for a, b in edges:
            ds.union(a, b)
        # naive transitive closure
        comp = list(range(20))
        changed = True
        while changed:
            changed = False
            for a, b in edges:
                m = min(comp[a], comp[b])
                for i in (a, b):
                    if comp[i] != m:
                        comp[i] = m
                        changed = True
        for i in range(20):
            for j in range(20):
                assert (ds.find(i) == ds.find(j)) == (comp[i] == comp[j])


class TestOmega:
    def test_strip_single_component(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.5, 0.05, 0.1)), grid)
        assert om.n_components == 1
        xs = grid.x_points[om.projected, 0]
        assert xs.min() > 0.4 and xs.max() < 0.6
        assert np.all(om.mask[om.projected])

    def test_strip_wraps_around_torus(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.05, 0.1)), grid)
        assert om.n_components == 1

    def test_phi_zero_two_components(self, grid_odd):
        om = extract_omega(KernelSpec.phi_zero(), grid_odd)
        assert om.n_components == 2
        v = grid_odd.v_points[:, 0]
        assert not np.any(om.mask[:, np.abs(v) < 1e-12])

    def test_two_class_components(self, two_class, grid):
        _, om, _ = two_class
        assert om.n_components == 2
        v = grid.v_points[:, 0]
        for i in range(2):
            cells = om.cells(i)
            vs = v[cells % grid.n_v]
            assert np.all(vs < 0) or np.all(vs > 0)

    def test_empty_set(self, grid):
        with pytest.raises(DegenerateError):
            extract_omega(KernelSpec.linear_relaxation(0.0), grid)

    def test_label_mask_periodic(self, grid):
        mask = np.zeros(grid.shape, dtype=bool)
        mask[0, 10:20] = True
        mask[-1, 10:20] = True
        _, n = label_mask(mask, grid)
        assert n == 1


class TestGCC:
    def test_full_space(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(1.0), grid)
        rep = check_gcc(om, ZERO, T=0.01, n_samples=1000)
        assert rep.fraction == 1.0 and rep.holds

    def test_trap_fraction_zero(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.1, 0.2)), grid)
        rep = check_gcc(om, TRAP, T=10.0, n_samples=1000, mode="aeit", T_max=30.0,
                        box=([0.45], [0.55], [-0.45], [0.45]))
        assert rep.fraction == 0.0 and not rep.holds

    def test_free_transport_aeit(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.5, 0.05, 0.1)), grid)
        rep = check_gcc(om, ZERO, T=10.0, n_samples=2000, mode="aeit", T_max=200.0)
        assert rep.fraction >= 0.99
        finite = check_gcc(om, ZERO, T=1.0, n_samples=1000)
        assert not finite.holds and finite.witnesses

    def test_sample_floor(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(1.0), grid)
        with pytest.raises(ConfigurationError):
            check_gcc(om, ZERO, T=1.0, n_samples=10)


class TestLebeau:
    def test_constant_frequency(self, grid):
        est = lebeau_constant(KernelSpec.linear_relaxation(0.7), ZERO, None, 2.0, grid, n_samples=256, refine=2)
        assert est.c_minus == pytest.approx(0.7, abs=1e-12)
        assert est.c_plus == pytest.approx(0.7, abs=1e-12)

    def test_position_independent_kernel_is_min_frequency(self, grid):
        spec = KernelSpec.degenerate_v()
        vr = 3.0
        est = lebeau_constant(spec, ZERO, None, 1.0, grid, n_samples=512, refine=4, v_range=vr)
        from linboltz.control import FrequencyField
        from linboltz.kernels import grid_kernel

        # the flow preserves v, so C^- is the smallest (interpolated) frequency within the sampled range
        bf = FrequencyField(grid_kernel(spec, grid))
        b_edge = float(np.min(bf(np.zeros((2, 1)), np.array([[-vr], [vr]]))))
        assert est.c_minus == pytest.approx(b_edge, rel=1e-6)
        assert est.c_minus <= est.c_plus

    def test_degenerate_v_decreases_with_range(self, grid):
        spec = KernelSpec.degenerate_v()
        vals = [lebeau_constant(spec, ZERO, None, 1.0, grid, n_samples=256, refine=2, v_range=r).c_minus
                for r in (1.0, 2.0, 4.0)]
        assert vals[0] > vals[1] > vals[2] >= 0

    def test_bounds(self, grid):
        spec = KernelSpec.mult_example()
        est = lebeau_constant(spec, ZERO, None, 1.0, grid, n_samples=256, refine=2)
        from linboltz.kernels import grid_kernel

        assert 0 <= est.c_minus <= est.c_plus <= float(grid_kernel(spec, grid).freq.max()) + 1e-12

    def test_bad_horizon(self, grid):
        with pytest.raises(ConfigurationError):
            lebeau_constant(KernelSpec.linear_relaxation(1.0), ZERO, None, 0.0, grid)


class TestClasses:
    def test_two_class(self, two_class):
        _, _, cl = two_class
        assert cl.class_count == 2 and cl.reach_class_count == 2
        assert cl.counts_agree

    def test_two_class_regions_are_velocity_half_lines(self, two_class, grid):
        _, _, cl = two_class
        v = grid.v_points[:, 0]
        signs = set()
        for j in range(2):
            r = cl.region(j)
            vs = np.broadcast_to(v[None, :], grid.shape)[r]
            assert np.all(vs < 0) or np.all(vs > 0)
            assert np.all(r[:, v < 0]) or np.all(r[:, v > 0])
            signs.add(bool(np.all(vs > 0)))
        assert signs == {True, False}

    def test_phi_zero_single_class(self, grid_odd):
        spec = KernelSpec.phi_zero()
        om = extract_omega(spec, grid_odd)
        cl = build_classes(om, spec, ZERO)
        assert om.n_components == 2 and cl.class_count == 1 and cl.reach_class_count == 1

    def test_connected_gcc_one_class(self, grid):
        spec = KernelSpec.linear_relaxation(Profile.plateau(0.5, 0.05, 0.1))
        cl = build_classes(extract_omega(spec, grid), spec, ZERO)
        assert cl.class_count == 1 and cl.reach_class_count == 1

    def test_forward_invariance(self, two_class):
        _, _, cl = two_class
        assert check_forward_invariance(cl, ZERO, 1.0, n=2000) <= 0.01

    def test_kernel_mismatch(self, two_class):
        _, om, _ = two_class
        from linboltz.errors import ContractError

        with pytest.raises(ContractError):
            build_classes(om, KernelSpec.phi_zero(), ZERO)


class TestStationaryBasis:
    def test_one_class_is_normalized_maxwellian(self, grid):
        spec = KernelSpec.linear_relaxation(1.0)
        cl = build_classes(extract_omega(spec, grid), spec, ZERO)
        (f1,) = stationary_basis(cl, ZERO)
        W = grid.equilibrium(ZERO)
        np.testing.assert_allclose(f1.values, W / math.sqrt(np.sum(grid.cell_weights * W)), rtol=1e-14)

    def test_two_class_fields(self, two_class, grid):
        spec, _, cl = two_class
        basis = stationary_basis(cl, ZERO)
        W = grid.equilibrium(ZERO)
        G = np.array([[np.sum(grid.cell_weights * a.values * b.values / W) for b in basis] for a in basis])
        np.testing.assert_allclose(G, np.eye(2), atol=1e-12)
        v = grid.v_points[:, 0]
        for f in basis:
            supp = f.values > 0
            assert np.all(supp[:, v > 0]) or np.all(supp[:, v < 0])
            assert np.max(np.abs(apply_collision(spec, f.values, grid))) <= 1e-12 * np.max(f.values)

    def test_projection(self, two_class, grid):
        _, _, cl = two_class
        basis = stationary_basis(cl, ZERO)
        P = project_equilibrium(basis[1], basis, cl)
        np.testing.assert_allclose(P.values, basis[1].values, atol=1e-14)
        # orthogonal datum: zero mass in each region
        v = grid.v_points[:, 0]
        odd = np.sin(2 * np.pi * grid.x_points[:, 0])[:, None] * grid.M_h[None, :] * np.ones_like(v)[None]
        P0 = project_equilibrium(odd, basis, cl)
        assert np.max(np.abs(P0)) <= 1e-14

    def test_projection_one_class_with_potential(self, grid):
        spec = KernelSpec.linear_relaxation(1.0)
        cl = build_classes(extract_omega(spec, grid), spec, TRAP)
        basis = stationary_basis(cl, TRAP)
        f0 = np.random.default_rng(0).random(grid.shape)
        P = project_equilibrium(f0, basis, cl)
        W = grid.equilibrium(TRAP)
        cw = grid.cell_weights
        expected = np.sum(cw * f0) * W / np.sum(cw * W)
        np.testing.assert_allclose(P, expected, rtol=1e-12)
        assert DistributionField(grid, P).mass == pytest.approx(DistributionField(grid, f0).mass, rel=1e-12)
