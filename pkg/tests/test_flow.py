import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linboltz.control import extract_omega
from linboltz.errors import ConfigurationError, ContractError
from linboltz.flow import (RELATIVISTIC, State, closed_form_harmonic, flow_points, flow_step, hitting_time, reflect,
                           trace)
from linboltz.geometry import DomainSpec, PotentialSpec, build_grid, hamiltonian
from linboltz.kernels import KernelSpec, Profile

TORUS2 = DomainSpec("torus", 2)
DISK = DomainSpec("disk", 2, radius=1.0)


def trap(dim=2, eps=1.0, eta=0.2):
    return PotentialSpec("harmonic_trap", dim, x0=(0.5,) * dim, eps=eps, eta=eta)


class TestFlowStep:
    def test_free_transport_exact(self):
        pot = PotentialSpec.zero(2)
        s = State.at([0.1, 0.2], [0.3, -0.7], pot)
        out = flow_step(s, pot, 0.01)
        np.testing.assert_array_equal(out.x, np.array([0.1, 0.2]) + 0.01 * np.array([0.3, -0.7]))
        np.testing.assert_array_equal(out.v, [0.3, -0.7])

    def test_matches_closed_form_harmonic(self):
        pot = trap()
        x, v = np.array([0.6, 0.5]), np.zeros(2)
        s = State.at(x, v, pot)
        h = 1e-3
        for _ in range(1000):
            s = flow_step(s, pot, h)
        ref = closed_form_harmonic(x, v, pot.x0, pot.eps, 1.0)
        np.testing.assert_allclose(s.x, ref.x, atol=1e-4)
        np.testing.assert_allclose(s.v, ref.v, atol=1e-4)

    def test_energy_drift_is_second_order(self):
        pot = trap(eps=25.0, eta=0.1)
        rng = np.random.default_rng(3)
        ratios = []
        for _ in range(20):
            x = 0.5 + rng.uniform(-0.1, 0.1, 2)
            v = rng.uniform(-0.5, 0.5, 2)
            d1 = trace(State.at(x, v, pot), pot, TORUS2, 5.0, 2e-3).energy_drift
            d2 = trace(State.at(x, v, pot), pot, TORUS2, 5.0, 1e-3).energy_drift
            ratios.append(d1 / d2)
        assert 3.2 <= np.median(ratios) <= 4.8

    def test_drift_constant_bounded(self):
        pot = trap(eps=25.0, eta=0.1)
        rng = np.random.default_rng(4)
        cs = [trace(State.at(0.5 + rng.uniform(-0.2, 0.2, 2), rng.normal(size=2), pot), pot, TORUS2, 0.5,
                    1e-3).drift_constant for _ in range(100)]
        assert np.all(np.isfinite(cs))


class TestReflect:
    def test_examples(self):
        np.testing.assert_array_equal(reflect([1.0, 0.0], [1.0, 0.0]), [-1.0, 0.0])
        np.testing.assert_array_equal(reflect([1.0, 1.0], [1.0, 0.0]), [-1.0, 1.0])

    def test_non_unit_normal(self):
        with pytest.raises(ContractError):
            reflect([1.0, 0.0], [2.0, 0.0])

    @settings(max_examples=50)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.floats(0, 2 * math.pi))
    def test_involution_and_norm(self, v, ang):
        n = np.array([math.cos(ang), math.sin(ang)])
        w = reflect(v, n)
        assert np.linalg.norm(w) == pytest.approx(np.linalg.norm(v), rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(reflect(w, n), v, atol=1e-12)


class TestTrace:
    def test_diameter_orbit(self):
        pot = PotentialSpec.zero(2)
        rec = trace(State.at([0.0, 0.0], [1.0, 0.0], pot), pot, DISK, 6.0, 0.01)
        times = [e.t for e in rec.events]
        np.testing.assert_allclose(times, [1.0, 3.0, 5.0], atol=1e-9)
        np.testing.assert_allclose([abs(e.point[0]) for e in rec.events], 1.0, atol=1e-9)

    def test_chord_lengths_circle_billiard(self):
        pot = PotentialSpec.zero(2)
        v = np.array([1.0, 0.37]) / np.hypot(1.0, 0.37)
        rec = trace(State.at([0.3, 0.1], v, pot), pot, DISK, 30.0, 0.01)
        assert rec.status == "completed" and len(rec.events) > 10
        e0 = rec.events[0]
        n0 = e0.point / np.linalg.norm(e0.point)
        sin_theta = abs(float(np.dot(e0.v_out, n0)))  # angle to the tangent
        pts = np.array([e.point for e in rec.events])
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        np.testing.assert_allclose(chords, 2.0 * sin_theta, atol=1e-8)

    def test_torus_rational_direction_periodic(self):
        pot = PotentialSpec.zero(2)
        rec = trace(State.at([0.2, 0.3], [1.0, 0.0], pot), pot, TORUS2, 1.0, 1e-2)
        np.testing.assert_allclose(rec.x[-1] % 1.0, [0.2, 0.3], atol=1e-12)

    def test_energy_conserved_across_reflections(self):
        pot = PotentialSpec.zero(2)
        rec = trace(State.at([0.1, -0.2], [0.8, 1.3], pot), pot, DISK, 20.0, 0.01)
        assert rec.energy_drift < 1e-12

    def test_relativistic_speed_bounded(self):
        pot = PotentialSpec.zero(1)
        x, v, st_ = flow_points(np.array([[0.0]]), np.array([[3.0]]), 1.0, pot, DomainSpec("torus", 1), 0.01,
                                RELATIVISTIC)
        assert (x[0, 0] % 1.0) == pytest.approx(3.0 / math.sqrt(10.0), abs=1e-12)


class TestClosedForm:
    def test_identity_at_zero(self):
        s = closed_form_harmonic([0.6, 0.4], [0.1, -0.2], (0.5, 0.5), 4.0, 0.0)
        np.testing.assert_allclose(s.x, [0.6, 0.4])
        np.testing.assert_allclose(s.v, [0.1, -0.2])

    def test_periodic(self):
        eps = 25.0
        s = closed_form_harmonic([0.6, 0.4], [0.1, -0.2], (0.5, 0.5), eps, 2 * math.pi / math.sqrt(eps))
        np.testing.assert_allclose(s.x, [0.6, 0.4], atol=1e-12)
        np.testing.assert_allclose(s.v, [0.1, -0.2], atol=1e-12)

    def test_bad_eps(self):
        with pytest.raises(ConfigurationError):
            closed_form_harmonic([0.6], [0.1], (0.5,), 0.0, 1.0)

    @settings(max_examples=50)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 50))
    def test_stays_in_trap(self, a, b, t):
        eps, eta, x0 = 25.0, 0.1, 0.5
        x, v = x0 + 0.99 * eta * a, 0.99 * math.sqrt(eps) * eta * b
        s = closed_form_harmonic([x], [v], (x0,), eps, t)
        assert abs(s.x[0] - x0) < 2 * eta
        assert abs(s.v[0]) < 2 * math.sqrt(eps) * eta


@pytest.fixture(scope="module")
def strip():
    """Collision set (0.4, 0.6) x velocity box; cell edges fall on 0.4 and 0.6."""
    grid = build_grid(DomainSpec("torus", 1), 6.0, 10, 16)
    return extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.5, 0.05, 0.1)), grid)


class TestHittingTime:
    def test_inside(self, strip):
        pot = PotentialSpec.zero(1)
        r = hitting_time(State.at([0.5], [1.0], pot), strip, pot, strip.grid.domain, 5.0, 1e-3)
        assert r.time == 0.0

    def test_linear_motion(self, strip):
        pot = PotentialSpec.zero(1)
        h = 1e-3
        r = hitting_time(State.at([0.0], [1.0], pot), strip, pot, strip.grid.domain, 5.0, h)
        assert r.time == pytest.approx(0.4, abs=h)

    def test_trapped_never_hits(self):
        grid = build_grid(DomainSpec("torus", 1), 6.0, 128, 64)
        pot = PotentialSpec("harmonic_trap", 1, x0=(0.5,), eps=25.0, eta=0.1)
        om = extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.1, 0.2)), grid)
        r = hitting_time(State.at([0.52], [0.2], pot), om, pot, grid.domain, 25.0, 5e-3)
        assert r.time is None and r.reason == "not_reached"


def test_hamiltonian_along_trap_orbit():
    pot = trap(dim=1, eps=25.0, eta=0.1)
    rec = trace(State.at([0.55], [0.3], pot), pot, DomainSpec("torus", 1), 10.0, 1e-3)
    H = hamiltonian(rec.x, rec.v, pot)
    assert np.max(np.abs(H - rec.H0)) < 1e-5
