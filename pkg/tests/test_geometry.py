import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from linboltz.errors import ConfigurationError, OutOfRangeError
from linboltz.geometry import (DomainSpec, PotentialSpec, build_grid, eval_gradient, eval_potential, hamiltonian,
                               maxwellian_density, truncation_mass_defect)


def trap2(eps=1.0, eta=0.2):
    return PotentialSpec("harmonic_trap", 2, x0=(0.5, 0.5), eps=eps, eta=eta)


class TestPotential:
    def test_zero_potential(self):
        pot = PotentialSpec.zero(2)
        assert eval_potential(pot, [0.3, 0.7]) == 0.0
        np.testing.assert_array_equal(eval_gradient(pot, [0.3, 0.7]), [0.0, 0.0])

    def test_trap_minimum(self):
        pot = trap2()
        assert eval_potential(pot, [0.5, 0.5]) == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(eval_gradient(pot, [0.5, 0.5]), [0.0, 0.0], atol=1e-15)

    def test_trap_quadratic_region(self):
        pot = trap2()
        assert eval_potential(pot, [0.6, 0.5]) == pytest.approx(0.005, rel=1e-12)
        np.testing.assert_allclose(eval_gradient(pot, [0.6, 0.5]), [0.1, 0.0], atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        pot = trap2(eps=25.0, eta=0.1)
        rng = np.random.default_rng(0)
        h = 1e-6
        for x in rng.random((20, 2)):
            g = eval_gradient(pot, x)
            fd = [(eval_potential(pot, x + h * e) - eval_potential(pot, x - h * e)) / (2 * h) for e in np.eye(2)]
            np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_cutoff_is_smooth_and_vanishes_far_away(self):
        pot = PotentialSpec("harmonic_trap", 1, x0=(0.5,), eps=25.0, eta=0.1)
        assert eval_potential(pot, [0.0]) == 0.0
        xs = np.linspace(0.0, 1.0, 2001)[:, None]
        V = np.asarray(eval_potential(pot, xs))
        assert np.all(np.isfinite(V))
        assert np.max(np.abs(np.diff(V))) < 0.01

    def test_tabulated_out_of_range(self, tmp_path):
        p = tmp_path / "pot.csv"
        rows = [f"{i},{0.1 * i},{0.1}" for i in range(10)]
        p.write_text("\n".join(rows) + "\n")
        pot = PotentialSpec.from_csv(p, 1, [10], origin=[0.0], spacing=[0.1])
        assert eval_potential(pot, [0.45]) == pytest.approx(0.45, abs=1e-12)
        with pytest.raises(OutOfRangeError):
            eval_potential(pot, [5.0])


class TestHamiltonian:
    def test_free(self):
        assert hamiltonian([0.1, 0.2], [3.0, 4.0], PotentialSpec.zero(2)) == pytest.approx(12.5)

    def test_trap_bottom(self):
        assert hamiltonian([0.5, 0.5], [0.0, 0.0], trap2()) == pytest.approx(0.0, abs=1e-15)

    def test_rest(self):
        assert hamiltonian([0.3], [0.0], PotentialSpec.zero(1)) == 0.0


class TestGrid:
    def test_mass_defect_against_erf(self):
        g = build_grid(DomainSpec("torus", 1), 6.0, 128, 128)
        exact_defect = 1.0 - erf(6.0 / math.sqrt(2.0))
        assert g.mass_defect == pytest.approx(exact_defect, rel=1e-10)
        assert g.mass_defect < 2e-9
        # midpoint quadrature of M over the box versus the closed form
        assert abs(g.raw_mass - erf(6.0 / math.sqrt(2.0))) < 2e-9

    def test_small_box_rejected(self):
        with pytest.raises(ConfigurationError):
            build_grid(DomainSpec("torus", 1), 0.5, 16, 4)

    def test_too_few_cells_rejected(self):
        with pytest.raises(ConfigurationError):
            build_grid(DomainSpec("torus", 1), 6.0, 3, 16)

    @settings(max_examples=20, deadline=None)
    @given(v_max=st.floats(2.0, 8.0), nv=st.integers(4, 64), d=st.sampled_from([1, 2]))
    def test_discrete_maxwellian_normalized(self, v_max, nv, d):
        g = build_grid(DomainSpec("torus", d), v_max, 4, nv)
        assert g.w_v * g.M_h.sum() == pytest.approx(1.0, rel=1e-13)
        assert g.w_x > 0 and g.w_v > 0
        assert np.allclose(np.diff(g.v_points[: g.nv[-1], -1]), g.dv[-1])

    def test_truncation_defect_2d(self):
        one = 1.0 - erf(4.0 / math.sqrt(2.0))
        assert truncation_mass_defect(4.0, 2) == pytest.approx(1.0 - (1.0 - one) ** 2, rel=1e-10)

    def test_maxwellian_density_values(self):
        assert maxwellian_density(np.array([[0.0]]), 1)[0] == pytest.approx(1.0 / math.sqrt(2 * math.pi))

    def test_disk_inside_mask(self):
        g = build_grid(DomainSpec("disk", 2, radius=1.0), 4.0, 32, 8)
        r = np.linalg.norm(g.x_points, axis=1)
        np.testing.assert_array_equal(g.inside, r < 1.0)
        assert g.domain_volume == pytest.approx(math.pi, rel=0.05)


class TestDomain:
    def test_polygon_orientation_checked(self):
        with pytest.raises(ConfigurationError):
            DomainSpec("polygon", 2, vertices=((0, 0), (0, 1), (1, 1), (1, 0)))

    def test_self_intersection_rejected(self):
        with pytest.raises(ConfigurationError):
            DomainSpec("polygon", 2, vertices=((0, 0), (1, 1), (1, 0), (0, 1)))

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            DomainSpec("sphere", 2)

    def test_roundtrip_dict(self):
        d = DomainSpec("stadium", 2, straight_length=1.0, cap_radius=0.5)
        assert DomainSpec(**d.to_dict()).to_dict() == d.to_dict()
