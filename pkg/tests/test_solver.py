import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linboltz.control import build_classes, extract_omega, project_equilibrium, stationary_basis
from linboltz.errors import ConfigurationError, ContractError, NumericError
from linboltz.fields import DistributionField
from linboltz.geometry import DomainSpec, PotentialSpec, build_grid
from linboltz.kernels import KernelSpec, Profile, grid_kernel
from linboltz.solver import (CollisionStep, SpectralTransport, TransportOperator, class_masses,
                             dissipation_residual, evolve, fit_decay, heatmap_svg, observability_check,
                             read_snapshot, tau_survival, weighted_inner, weighted_norm, write_series_csv,
                             write_snapshot)

ZERO = PotentialSpec.zero(1)
TRAP = PotentialSpec("harmonic_trap", 1, x0=(0.5,), eps=25.0, eta=0.1)


@pytest.fixture(scope="module")
def grid():
    return build_grid(DomainSpec("torus", 1), 6.0, 64, 64)


def wave(grid, a=0.5):
    """W (1 + a cos 2 pi x)."""
    return grid.equilibrium(ZERO) * (1 + a * np.cos(2 * np.pi * grid.x_points[:, 0]))[:, None]


class TestNorms:
    def test_equilibrium_has_unit_norm(self, grid):
        W = grid.equilibrium(ZERO)
        assert weighted_norm(W, grid, ZERO) == pytest.approx(1.0, rel=1e-13)
        assert weighted_norm(W, grid, ZERO, p=math.inf) == pytest.approx(1.0, rel=1e-13)

    def test_zero(self, grid):
        assert weighted_norm(np.zeros(grid.shape), grid, ZERO) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_inner_product_consistent(self, grid, seed):
        f = np.random.default_rng(seed).normal(size=grid.shape) * grid.M_h
        assert weighted_inner(f, f, grid, ZERO) == pytest.approx(weighted_norm(f, grid, ZERO) ** 2, rel=1e-12)


class TestTransport:
    def test_free_transport_matches_shift(self):
        g = build_grid(DomainSpec("torus", 1), 6.0, 128, 128)
        dt = 0.013
        T = TransportOperator(g, ZERO, dt, g.equilibrium(ZERO), conservative=False)
        f0 = wave(g)
        x, v = g.x_points[:, 0][:, None], g.v_points[:, 0][None, :]
        exact = g.equilibrium(ZERO) * (1 + 0.5 * np.cos(2 * np.pi * (x - v * dt)))
        err = np.max(np.abs((T.apply(f0) - exact) / g.equilibrium(ZERO)))
        # linear interpolation error bound max|g''| dx^2 / 8
        bound = 0.5 * (2 * np.pi) ** 2 * g.dx[0] ** 2 / 8
        assert err <= bound * 1.001

    def test_spectral_shift_exact(self, grid):
        dt = 0.37
        S = SpectralTransport(grid, ZERO, dt)
        x, v = grid.x_points[:, 0][:, None], grid.v_points[:, 0][None, :]
        exact = grid.equilibrium(ZERO) * (1 + 0.5 * np.cos(2 * np.pi * (x - v * dt)))
        np.testing.assert_allclose(S.apply(wave(grid)), exact, atol=1e-13)

    def test_mass_fix_conserves_with_potential(self, grid):
        W = grid.equilibrium(TRAP)
        T = TransportOperator(grid, TRAP, 0.05, W)
        f = np.random.default_rng(0).random(grid.shape) * W
        m0 = np.sum(grid.cell_weights * f)
        for _ in range(20):
            f = T.apply(f)
        assert np.sum(grid.cell_weights * f) == pytest.approx(m0, rel=1e-12)
        np.testing.assert_allclose(T.apply(W), W, rtol=1e-12)


class TestCollisionStep:
    def test_methods_agree(self, grid):
        spec = KernelSpec.linear_relaxation(Profile.plateau(0.2, 0.1, 0.3))
        gk = grid_kernel(spec, grid)
        f = np.random.default_rng(1).random(grid.shape) * grid.M_h
        a = CollisionStep(gk, 0.1, "closed").apply(f)
        b = CollisionStep(gk, 0.1, "expm").apply(f)
        c = CollisionStep(gk, 0.1, "etd2").apply(f)
        np.testing.assert_allclose(a, b, atol=1e-13)
        np.testing.assert_allclose(c, b, atol=1e-4 * np.max(np.abs(f)))

    def test_semigroup(self, grid):
        gk = grid_kernel(KernelSpec.mult_example(), grid)
        f = np.random.default_rng(2).random(grid.shape) * grid.M_h
        one = CollisionStep(gk, 0.2).apply(f)
        two = CollisionStep(gk, 0.1).apply(CollisionStep(gk, 0.1).apply(f))
        np.testing.assert_allclose(one, two, atol=1e-13)


class TestEvolve:
    def test_free_transport_vs_analytic(self):
        g = build_grid(DomainSpec("torus", 1), 6.0, 128, 128)
        s = evolve(wave(g), None, ZERO, None, g, 0.01, 0.5, interp="spectral")
        x, v = g.x_points[:, 0][:, None], g.v_points[:, 0][None, :]
        exact = g.equilibrium(ZERO) * (1 + 0.5 * np.cos(2 * np.pi * (x - v * 0.5)))
        np.testing.assert_allclose(s.final.values, exact, atol=1e-12)
        assert np.all(s.dissipation == 0.0)

    def test_equilibrium_is_stationary(self, grid):
        spec = KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.1, 0.2))
        W = grid.equilibrium(TRAP)
        s = evolve(W, spec, TRAP, None, grid, 0.04, 10.0, output_every=25)
        assert weighted_norm(s.final.values - W, grid, TRAP) <= 1e-8 * weighted_norm(W, grid, TRAP)
        assert dissipation_residual(s) <= 1e-8

    def test_relaxation_monotone(self, grid):
        spec = KernelSpec.linear_relaxation(1.0)
        f0 = np.random.default_rng(3).random(grid.shape) * grid.M_h
        s = evolve(f0, spec, ZERO, None, grid, 0.02, 2.0)
        assert np.all(s.dissipation >= 0)
        assert np.all(np.diff(s.norm2) <= 1e-14 * s.norm2[0])
        assert np.ptp(s.mass) <= 1e-12 * s.mass[0]

    def test_dissipation_identity_holds(self, grid):
        spec = KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.15, 0.3))
        f0 = grid.equilibrium(ZERO) * (1 + 0.3 * np.sin(2 * np.pi * grid.x_points[:, 0])[:, None]
                                        * grid.v_points[:, 0][None])
        s = evolve(f0, spec, ZERO, None, grid, 1e-3, 0.2, interp="spectral", output_every=5)
        assert dissipation_residual(s) <= 1e-3

    def test_duhamel_scheme_second_order_mass(self, grid):
        spec = KernelSpec.linear_relaxation(1.0)
        f0 = wave(grid)
        drift = []
        for dt in (0.02, 0.01):
            s = evolve(f0, spec, ZERO, None, grid, dt, 1.0, scheme="duhamel_sl")
            assert s.distance[-1] < s.distance[0]
            drift.append(abs(s.mass[-1] - s.mass[0]) / s.mass[0])
        assert drift[0] <= 0.5 * 0.02 ** 2
        assert 3.0 <= drift[0] / drift[1] <= 5.0

    def test_class_masses_conserved(self, grid):
        spec = KernelSpec.two_class()
        cl = build_classes(extract_omega(spec, grid), spec, ZERO)
        f0 = np.random.default_rng(4).random(grid.shape) * grid.M_h
        s = evolve(f0, spec, ZERO, None, grid, 0.04, 20.0, classes=cl, output_every=25, compute_dissipation=False)
        cm = s.class_masses
        assert np.max(np.abs(cm - cm[0]) / np.abs(cm[0])) <= 1e-6
        assert np.sum(cm[0]) == pytest.approx(s.mass[0], rel=1e-12)
        basis = stationary_basis(cl, ZERO)
        m = class_masses(basis[0].values, cl)
        assert m[1] == 0.0 and m[0] > 0

    def test_cfl_guard(self, grid):
        with pytest.raises(ConfigurationError):
            evolve(wave(grid), None, ZERO, None, grid, 1.0, 2.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_reports_step(self, grid):
        gk = grid_kernel(KernelSpec.linear_relaxation(1.0), grid)
        gk.freq  # materialize
        f0 = wave(grid)
        f0[3, 3] = np.inf
        with pytest.raises(NumericError, match="step 1"):
            evolve(f0, gk, ZERO, None, grid, 0.02, 0.1)

    def test_snapshots(self, grid):
        s = evolve(wave(grid), KernelSpec.linear_relaxation(1.0), ZERO, None, grid, 0.04, 1.0,
                   snapshot_times=(0.0, 0.5))
        assert sorted(s.snapshots) == [0.0, 0.5]


class TestFitDecay:
    def test_exponential(self):
        t = np.linspace(0, 40, 400)
        r = fit_decay((t, np.exp(-0.3 * t)))
        assert r.gamma == pytest.approx(0.3, abs=1e-3)
        assert r.verdict == "exponential"

    def test_polynomial(self):
        t = np.linspace(0, 1000, 2000)
        r = fit_decay((t, (1 + t) ** -0.5))
        assert r.p == pytest.approx(0.5, abs=0.02)
        assert r.verdict == "polynomial-like"
        assert np.all(np.diff(r.window_rates) < 0)

    def test_floor_truncation(self):
        t = np.linspace(0, 100, 1000)
        d = np.maximum(np.exp(-t), 1e-16)
        r = fit_decay((t, d))
        assert r.floor_truncated
        assert r.gamma == pytest.approx(1.0, abs=1e-6)

    def test_stalled(self):
        t = np.linspace(0, 10, 100)
        assert fit_decay((t, 1.0 - 0.001 * t)).verdict == "stalled"

    def test_too_short(self):
        with pytest.raises(ContractError):
            fit_decay((np.arange(10.0), np.exp(-np.arange(10.0))))

    def test_degenerate_v_rates_decrease(self, grid):
        f0 = wave(grid)
        W = grid.equilibrium(ZERO)
        P = W * np.sum(grid.cell_weights * f0) / np.sum(grid.cell_weights * W)
        s = evolve(f0, KernelSpec.degenerate_v(), ZERO, None, grid, 0.04, 60.0, target=P, output_every=5,
                   compute_dissipation=False)
        r = fit_decay(s)
        assert np.all(np.diff(r.window_rates) < 0)


class TestSurvival:
    def test_full_space(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(1.0), grid)
        rep = tau_survival(om, ZERO, None, 10_000, [0.0, 0.1, 1.0])
        np.testing.assert_array_equal(rep.survival[1:], 0.0)

    def test_trap_survives(self):
        g = build_grid(DomainSpec("torus", 1), 6.0, 128, 64)
        om = extract_omega(KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.1, 0.2)), g)
        rep = tau_survival(om, TRAP, None, 10_000, [1.0, 5.0], box=([0.45], [0.55], [-0.4], [0.4]))
        np.testing.assert_array_equal(rep.survival, 1.0)

    def test_budget(self, grid):
        om = extract_omega(KernelSpec.linear_relaxation(1.0), grid)
        with pytest.raises(ConfigurationError):
            tau_survival(om, ZERO, None, 100, [1.0])


def test_observability_constant_finite(grid):
    spec = KernelSpec.linear_relaxation(1.0)
    W = grid.equilibrium(ZERO)
    runs = []
    for seed in range(3):
        f0 = W * (1 + 0.5 * np.random.default_rng(seed).random(grid.shape))
        P = W * np.sum(grid.cell_weights * f0) / np.sum(grid.cell_weights * W)
        runs.append(evolve(f0, spec, ZERO, None, grid, 0.02, 1.0, target=P))
    rep = observability_check(runs)
    assert np.isfinite(rep.K) and rep.K >= 1 and not rep.failures


class TestOutput:
    def test_snapshot_roundtrip(self, grid, tmp_path):
        f = DistributionField(grid, wave(grid), time=1.5)
        p = tmp_path / "s.lbz"
        write_snapshot(p, f)
        vals, hdr = read_snapshot(p)
        np.testing.assert_array_equal(vals, f.values)
        assert hdr["nx"] == [64] and hdr["nv"] == [64] and hdr["time"] == 1.5
        assert hdr["v_lo"] == [-6.0]

    def test_bad_snapshot(self, tmp_path):
        p = tmp_path / "bad.lbz"
        p.write_bytes(b"garbage")
        with pytest.raises(ConfigurationError):
            read_snapshot(p)

    def test_series_csv_and_svg(self, grid, tmp_path):
        s = evolve(wave(grid), KernelSpec.linear_relaxation(1.0), ZERO, None, grid, 0.04, 0.5)
        p = tmp_path / "s.csv"
        write_series_csv(p, s, ["config_hash=abc seed=1"])
        lines = p.read_text().splitlines()
        assert lines[0] == "# config_hash=abc seed=1"
        assert lines[1].startswith("t,l2_distance,mass,dissipation")
        assert len(lines) == 2 + len(s.times)
        svg = tmp_path / "f.svg"
        heatmap_svg(svg, s.final, title="final", description="config_hash=abc seed=1")
        text = svg.read_text()
        assert "config_hash=abc seed=1" in text
        heatmap_svg(tmp_path / "g.svg", s.final, title="final", description="config_hash=abc seed=1")
        assert (tmp_path / "g.svg").read_text() == text
