"""Acceptance scenarios.

Every scenario is a function returning a :class:`CriterionResult`; thresholds
are fixed inside the scenario and never adapted to the measured values.  The
same functions back ``linboltz paper-suite`` and ``tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.sparse.csgraph import connected_components

from .control import (build_classes, check_gcc, extract_omega, lebeau_constant, project_equilibrium,
                      stationary_basis)
from .flow import State, closed_form_harmonic, trace
from .geometry import DomainSpec, PotentialSpec, build_grid
from .kernels import (KernelSpec, Profile, apply_collision, bgk_equilibrium, bgk_kernel, dissipation,
                      fermi_dirac, grid_kernel, inject_asymmetry, maxwellian, validate_assumptions)
from .solver import (dissipation_residual, evolve, fit_decay, observability_check, tau_survival,
                     weighted_norm)

__all__ = ["CriterionResult", "CRITERIA", "run_criterion", "run_suite", "summary_table"]


@dataclass
class CriterionResult:
    """Outcome of one acceptance scenario.

    Attributes
    ----------
    number : int
    title : str
    passed : bool
    summary : str
        One-line description of the measured quantities.
    details : dict
        Measured values and thresholds (JSON-serializable).
    seconds : float
    """

    number: int
    title: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.title}: {self.summary}"

    def to_dict(self) -> dict:
        return {"number": self.number, "title": self.title, "passed": self.passed, "summary": self.summary,
                "details": _jsonable(self.details), "seconds": round(self.seconds, 3)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _torus_grid(nx=128, nv=128, v_max=6.0, dim=1):
    return build_grid(DomainSpec("torus", dim), v_max, nx, nv)


def _maxwell_projection(f0, W, grid):
    """``(int f0 / int W) W``: the projection when there is a single class."""
    cw = grid.cell_weights
    return W * (np.sum(cw * f0) / np.sum(cw * W))


# ---------------------------------------------------------------------------
# 1. Flow correctness
# ---------------------------------------------------------------------------


def criterion_flow(h: float = 1e-3, T: float = 10.0, tol: float = 1e-4) -> CriterionResult:
    pot = PotentialSpec("harmonic_trap", 2, (0.5, 0.5), 25.0, 0.1)
    dom = DomainSpec("torus", 2)
    x0, v0 = np.array([0.55, 0.47]), np.array([0.3, -0.2])
    rec = trace(State.at(x0, v0, pot), pot, dom, T, h)
    err = 0.0
    for t, x, v in zip(rec.times, rec.x, rec.v):
        ex = closed_form_harmonic(x0, v0, pot.x0, pot.eps, t)
        err = max(err, float(np.max(np.abs(x - ex.x))), float(np.max(np.abs(v - ex.v))))
    rec2 = trace(State.at(x0, v0, pot), pot, dom, T, h / 2)
    ratio = rec.energy_drift / rec2.energy_drift
    ok = err <= tol and 3.2 <= ratio <= 4.8
    return CriterionResult(1, "flow vs closed-form harmonic", ok,
                           f"max error {err:.2e} (tol {tol:g}); energy-drift ratio {ratio:.3f} (in [3.2, 4.8])",
                           {"max_error": err, "tol": tol, "drift_h": rec.energy_drift,
                            "drift_h2": rec2.energy_drift, "drift_ratio": ratio})


# ---------------------------------------------------------------------------
# 2. Billiard oracle
# ---------------------------------------------------------------------------


def criterion_billiard(n_bounces: int = 100, tol: float = 1e-6) -> CriterionResult:
    dom = DomainSpec("disk", 2, radius=1.0)
    pot = PotentialSpec.zero(2)
    x0 = np.array([0.3, 0.1])
    vhat = np.array([1.0, 0.37]) / math.hypot(1.0, 0.37)
    p = float(x0[0] * vhat[1] - x0[1] * vhat[0])  # signed impact parameter
    # first hit: |x0 + s vhat| = 1
    b = float(x0 @ vhat)
    s0 = -b + math.sqrt(b * b - float(x0 @ x0) + 1.0)
    first = x0 + s0 * vhat
    chord = 2.0 * math.sqrt(1.0 - p * p)
    step = math.copysign(2.0 * math.acos(abs(p)), p)
    T = s0 + (n_bounces - 0.5) * chord
    rec = trace(State.at(x0, vhat, pot), pot, dom, T, 0.01)
    hits = np.array([ev.point for ev in rec.events])
    theta0 = math.atan2(first[1], first[0])
    k = np.arange(len(hits))
    exact = np.stack([np.cos(theta0 + k * step), np.sin(theta0 + k * step)], axis=1)
    err = float(np.max(np.linalg.norm(hits - exact, axis=1))) if len(hits) else float("inf")
    ok = len(hits) == n_bounces and err <= tol
    return CriterionResult(2, "unit-disk billiard map", ok,
                           f"{len(hits)} bounces, max reflection-point error {err:.2e} (tol {tol:g})",
                           {"bounces": len(hits), "max_error": err, "tol": tol})


# ---------------------------------------------------------------------------
# 3. Dissipation identity
# ---------------------------------------------------------------------------


def criterion_dissipation(dt: float = 1e-3, T: float = 0.5, tol: float = 1e-3) -> CriterionResult:
    grid = _torus_grid()
    pot = PotentialSpec.zero(1)
    W = grid.equilibrium(pot)
    x, v = grid.x_points[:, 0], grid.v_points[:, 0]
    spec = KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.15, 0.3))
    f0 = W * (1 + 0.5 * np.cos(2 * np.pi * x)[:, None] * np.sin(v)[None]
              + 0.3 * np.sin(4 * np.pi * x)[:, None] * (v[None] ** 2 - 1))
    res = []
    for step in (dt, dt / 2):
        s = evolve(f0, spec, pot, None, grid, step, T, interp="spectral")
        res.append(dissipation_residual(s))
    ratio = res[0] / res[1]
    ok = res[0] <= tol and 3.2 <= ratio <= 4.8
    return CriterionResult(3, "dissipation identity", ok,
                           f"residual {res[0]:.2e} at dt={dt:g} (tol {tol:g}); halving ratio {ratio:.3f}",
                           {"residual_dt": res[0], "residual_dt2": res[1], "ratio": ratio, "tol": tol})


# ---------------------------------------------------------------------------
# 4. Weak coercivity
# ---------------------------------------------------------------------------


def _classwise_maxwellian(gk, W, rng):
    """``rho(x, block) W`` on the collision set, arbitrary off it.

    Blocks are the connected components of the velocity graph ``R(x)[v, w] > 0``
    restricted to velocities with ``b > 0``.
    """
    grid = gk.grid
    f = rng.uniform(0.1, 2.0, grid.shape) * W  # values off the collision set are arbitrary
    for R, members in gk.iter_groups():
        active = R.sum(axis=1) > 0
        idx = np.flatnonzero(active)
        if idx.size == 0:
            continue
        _, lab = connected_components((R[np.ix_(idx, idx)] > 0), directed=True, connection="weak")
        for ix in members:
            rho = rng.uniform(0.1, 2.0, lab.max() + 1)
            f[ix, idx] = rho[lab] * W[ix, idx]
    return f


def criterion_weak_coercivity(n: int = 50, seed: int = 0) -> CriterionResult:
    grid = _torus_grid(64, 64)
    pot = PotentialSpec.zero(1)
    W = grid.equilibrium(pot)
    specs = [KernelSpec.two_class(), KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.15, 0.3)),
             KernelSpec.mult_example(), KernelSpec.phi_zero(), KernelSpec.factorized(),
             KernelSpec.degenerate_v()]
    rng = np.random.default_rng(seed)
    worst_D, worst_C, min_D_random = 0.0, 0.0, np.inf
    for i in range(n):
        gk = grid_kernel(specs[i % len(specs)], grid)
        f = _classwise_maxwellian(gk, W, rng)
        f /= weighted_norm(f, grid, pot)
        worst_D = max(worst_D, dissipation(gk, f, grid, pot))
        worst_C = max(worst_C, weighted_norm(apply_collision(gk, f, grid), grid, pot))
        g = rng.uniform(0.0, 1.0, grid.shape) * W
        g /= weighted_norm(g, grid, pot)
        min_D_random = min(min_D_random, dissipation(gk, g, grid, pot))
    ok = worst_D <= 1e-12 and worst_C <= 1e-6 and min_D_random > 0
    return CriterionResult(4, "weak coercivity", ok,
                           f"class-wise Maxwellians: max D {worst_D:.1e}, max |Cf|/|f| {worst_C:.1e}; "
                           f"random fields: min D {min_D_random:.2e}",
                           {"max_D_maxwellian": worst_D, "max_C_maxwellian": worst_C,
                            "min_D_random": min_D_random, "n": n})


# ---------------------------------------------------------------------------
# 5. Lebeau example
# ---------------------------------------------------------------------------


def criterion_lebeau(n_samples: int = 2048, seed: int = 0) -> CriterionResult:
    grid = _torus_grid()
    pot = PotentialSpec.zero(1)
    spec = KernelSpec.mult_example()
    psi = spec.params["psi"]
    beta = integrate.quad(lambda u: float(psi(np.array([[u]]))[0]) * float(maxwellian(np.array([u]), 1)[0]),
                          -40, 40, points=[-3, -2, 2, 3], limit=200)[0]
    target = min(beta, 0.25)
    cm = {}
    for T in (1, 2, 4, 8):
        cm[T] = lebeau_constant(spec, pot, None, float(T), grid, n_samples=n_samples, seed=seed).c_minus
    ok = cm[1] >= target - 0.02 and all(c >= 0.2 * target for c in cm.values())
    return CriterionResult(5, "Lebeau example", ok,
                           f"beta={beta:.4f}; C-(1)={cm[1]:.3f} (>= {target - 0.02:.3f}); "
                           f"min over T={min(cm.values()):.3f} (>= {0.2 * target:.3f})",
                           {"beta": beta, "c_minus": cm, "bound_1": target - 0.02, "bound_T": 0.2 * target})


# ---------------------------------------------------------------------------
# 6. Exponential decay
# ---------------------------------------------------------------------------


def criterion_exponential(T: float = 60.0, dt: float = 0.02) -> CriterionResult:
    grid = _torus_grid()
    pot = PotentialSpec.zero(1)
    W = grid.equilibrium(pot)
    x, v = grid.x_points[:, 0], grid.v_points[:, 0]
    f0 = W * (1 + 0.3 * (v[None] ** 2 - 1) + 0.3 * np.sin(2 * np.pi * x)[:, None] * v[None])
    P = _maxwell_projection(f0, W, grid)
    details, ok = {}, True
    for name, spec in (("mult_example", KernelSpec.mult_example()),
                       ("linear_relaxation", KernelSpec.linear_relaxation(1.0))):
        s = evolve(f0, spec, pot, None, grid, dt, T, target=P, output_every=5, compute_dissipation=False)
        r = fit_decay(s)
        good = r.verdict == "exponential" and r.gamma_residual < 0.05 and r.window_spread < 0.2
        ok &= good
        details[name] = {"gamma": r.gamma, "residual": r.gamma_residual, "spread": r.window_spread,
                         "verdict": r.verdict, "pass": good}
    summ = "; ".join(f"{k}: gamma={d['gamma']:.3f} res={d['residual']:.3f} spread={d['spread']:.3f} {d['verdict']}"
                     for k, d in details.items())
    return CriterionResult(6, "exponential decay", ok, summ, details)


# ---------------------------------------------------------------------------
# 7. No uniform exponential rate
# ---------------------------------------------------------------------------


def criterion_degenerate(T: float = 100.0, dt: float = 0.02) -> CriterionResult:
    grid = _torus_grid()
    pot = PotentialSpec.zero(1)
    W = grid.equilibrium(pot)
    x, v = grid.x_points[:, 0], grid.v_points[:, 0]
    f0 = W * (1 + 0.3 * (v[None] ** 2 - 1) + 0.5 * np.cos(2 * np.pi * x)[:, None])
    P = _maxwell_projection(f0, W, grid)
    s = evolve(f0, KernelSpec.degenerate_v(), pot, None, grid, dt, T, target=P, output_every=10,
               compute_dissipation=False)
    r = fit_decay(s)
    drop = r.window_rates[0] / r.window_rates[-1]
    ok = drop >= 2 and r.verdict != "exponential"
    return CriterionResult(7, "no uniform exponential rate", ok,
                           f"window rates {r.window_rates[0]:.4f} -> {r.window_rates[-1]:.4f} (x{drop:.2f}); "
                           f"verdict {r.verdict}",
                           {"window_rates": r.window_rates, "drop": drop, "verdict": r.verdict})


# ---------------------------------------------------------------------------
# 8. Polynomial lower bound
# ---------------------------------------------------------------------------


def criterion_polynomial(N: int = 100_000, nv_fine: int = 3000, seed: int = 0) -> CriterionResult:
    pot = PotentialSpec.zero(1)
    spec = KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.1, 0.2))
    x0, delta = 0.5, 0.2
    grid = _torus_grid()
    omega = extract_omega(spec, grid)
    tg = np.geomspace(1.0, 100.0, 15)
    surv = tau_survival(omega, pot, None, N, tg, box=(x0 - delta / 2, x0 + delta / 2, -1.0, 1.0), seed=seed)
    slope_ok = abs(surv.slope + 0.5) <= 0.1
    # norm decay of the localized datum on a velocity grid fine enough to hold slow particles
    fine = _torus_grid(128, nv_fine)
    W = fine.equilibrium(pot)
    x, v = fine.x_points[:, 0], fine.v_points[:, 0]
    f0 = W * ((np.abs(x - x0) < delta / 2)[:, None] & (np.abs(v) < 1.0)[None])
    P = _maxwell_projection(f0, W, fine)
    s = evolve(f0, spec, pot, None, fine, 0.02, 100.0, target=P, output_every=25, compute_dissipation=False)
    sel = s.times >= 1.0
    p = float(-np.polyfit(np.log1p(s.times[sel]), np.log(s.distance[sel]), 1)[0])
    norm_ok = p <= 0.65
    ok = slope_ok and norm_ok
    return CriterionResult(8, "polynomial lower bound", ok,
                           f"survival slope {surv.slope:.3f} (target -0.5 +- 0.1: {'ok' if slope_ok else 'miss'}); "
                           f"norm tail exponent {p:.3f} (<= 0.65: {'ok' if norm_ok else 'miss'})",
                           {"survival_slope": surv.slope, "survival": surv.survival, "t": tg,
                            "norm_exponent": p, "slope_ok": slope_ok, "norm_ok": norm_ok})


# ---------------------------------------------------------------------------
# 9. Class structure
# ---------------------------------------------------------------------------


def criterion_classes(T: float = 250.0, dt: float = 0.02, seed: int = 1) -> CriterionResult:
    pot = PotentialSpec.zero(1)
    grid = _torus_grid()
    spec = KernelSpec.two_class()
    om = extract_omega(spec, grid)
    cl = build_classes(om, spec, pot)
    grid_odd = _torus_grid(128, 129)
    spec_z = KernelSpec.phi_zero()
    om_z = extract_omega(spec_z, grid_odd)
    cl_z = build_classes(om_z, spec_z, pot)
    W = grid.equilibrium(pot)
    rng = np.random.default_rng(seed)
    f0 = W * (1 + 0.5 * rng.random(grid.shape))
    basis = stationary_basis(cl, pot)
    P = project_equilibrium(f0, basis, cl)
    s = evolve(f0, spec, pot, None, grid, dt, T, target=P, classes=cl, output_every=50, compute_dissipation=False)
    cm = s.class_masses
    drift = float(np.max(np.abs(cm - cm[0]) / np.abs(cm[0])))
    ratio = float(s.distance[-1] / s.distance[0])
    checks = {
        "two_class_bowtie": cl.class_count == 2, "two_class_sim": cl.reach_class_count == 2,
        "phi_zero_components": om_z.n_components == 2, "phi_zero_classes": cl_z.reach_class_count == 1,
        "mass_drift": drift <= 1e-6, "convergence": ratio <= 1e-3,
    }
    ok = all(checks.values())
    return CriterionResult(9, "class structure", ok,
                           f"two_class {cl.class_count}/{cl.reach_class_count} classes; phi_zero "
                           f"{om_z.n_components} components/{cl_z.reach_class_count} class; class-mass drift "
                           f"{drift:.1e}; final/initial distance {ratio:.1e}",
                           {"checks": checks, "drift": drift, "distance_ratio": ratio})


# ---------------------------------------------------------------------------
# 10. Trapped potential
# ---------------------------------------------------------------------------


def criterion_trap(T: float = 50.0, seed: int = 0) -> CriterionResult:
    pot = PotentialSpec("harmonic_trap", 1, (0.5,), 25.0, 0.1)
    spec = KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.1, 0.2))
    grid = _torus_grid()
    om = extract_omega(spec, grid)
    box = (0.4, 0.6, -0.5, 0.5)
    gcc = check_gcc(om, pot, None, n_samples=2000, mode="aeit", T_max=T, seed=seed, box=box)
    surv = tau_survival(om, pot, None, 10_000, np.linspace(1.0, T, 11), box=box, seed=seed)
    # trap-supported bump, resolved phase space (cubic pull-back, 256 x 256, |v| <= 3)
    fine = build_grid(DomainSpec("torus", 1), 3.0, 256, 256)
    W = fine.equilibrium(pot)
    x, v = fine.x_points[:, 0], fine.v_points[:, 0]
    f0 = W * np.exp(-((x[:, None] - 0.55) ** 2 / 0.03 ** 2 + (v[None] - 0.1) ** 2 / 0.15 ** 2))
    P = _maxwell_projection(f0, W, fine)
    s = evolve(f0, spec, pot, None, fine, 0.02, T, target=P, output_every=50, interp="cubic",
               compute_dissipation=False)
    worst = float(np.min(s.distance / s.distance[0]))
    ok = gcc.fraction == 0.0 and bool(np.all(surv.survival == 1.0)) and worst >= 0.9
    return CriterionResult(10, "trapped potential", ok,
                           f"a.e.i.t. fraction {gcc.fraction:.3f}; survival min {np.min(surv.survival):.3f}; "
                           f"min distance ratio {worst:.3f} (>= 0.9)",
                           {"aeit_fraction": gcc.fraction, "survival": surv.survival, "min_distance_ratio": worst})


# ---------------------------------------------------------------------------
# 11. Stationarity of the basis
# ---------------------------------------------------------------------------


def criterion_stationarity(dt: float = 0.02, tol: float = 1e-8) -> CriterionResult:
    grid = _torus_grid()
    grid_odd = _torus_grid(128, 129)
    zero = PotentialSpec.zero(1)
    trap = PotentialSpec("harmonic_trap", 1, (0.5,), 25.0, 0.1)
    cases = [("two_class", KernelSpec.two_class(), zero, grid),
             ("phi_zero", KernelSpec.phi_zero(), zero, grid_odd),
             ("mult_example+trap", KernelSpec.mult_example(), trap, grid),
             ("linear_relaxation+trap", KernelSpec.linear_relaxation(1.0), trap, grid)]
    worst, per = 0.0, {}
    for name, spec, pot, g in cases:
        cl = build_classes(extract_omega(spec, g), spec, pot)
        errs = []
        for fj in stationary_basis(cl, pot):
            for scheme in ("strang",):
                out = evolve(fj, spec, pot, None, g, dt, dt, scheme=scheme, compute_dissipation=False).final
                errs.append(weighted_norm(out.values - fj.values, g, pot) / weighted_norm(fj, g, pot))
        per[name] = {"basis_size": len(errs), "max_step_change": max(errs)}
        worst = max(worst, max(errs))
    ok = worst <= tol
    return CriterionResult(11, "stationarity of the basis", ok,
                           f"max relative one-step change {worst:.1e} over {sum(p['basis_size'] for p in per.values())} "
                           f"basis fields (tol {tol:g})", per)


# ---------------------------------------------------------------------------
# 12. Specular stadium
# ---------------------------------------------------------------------------


def criterion_stadium(T: float = 40.0, dt: float = 0.05) -> CriterionResult:
    dom = DomainSpec("stadium", 2, straight_length=1.0, cap_radius=0.5)
    grid = build_grid(dom, 4.0, (40, 20), (20, 20))
    pot = PotentialSpec.zero(2)
    W = grid.equilibrium(pot)
    spec = KernelSpec.linear_relaxation(Profile.plateau((0.6, 0.0), 0.2, 0.35))
    x = grid.x_points
    f0 = W * (1 + np.exp(-((x[:, 0] + 0.6) ** 2 + x[:, 1] ** 2) / 0.1))[:, None]
    P = _maxwell_projection(f0, W, grid)
    s = evolve(f0, spec, pot, None, grid, dt, T, target=P, output_every=20, compute_dissipation=False)
    d = s.distance
    monotone = bool(np.all(np.diff(d) <= 1e-9 * d[0]))
    drop = float(d[0] / d[-1])
    ok = monotone and drop >= 10
    return CriterionResult(12, "specular stadium convergence", ok,
                           f"monotone={monotone}; drop x{drop:.1f} over T={T:g} (>= 10); "
                           f"aborted feet {s.meta['transport_aborted_feet']}",
                           {"distance": d, "drop": drop, "monotone": monotone, "meta": s.meta})


# ---------------------------------------------------------------------------
# 13. Kernel validation
# ---------------------------------------------------------------------------


def criterion_kernels(eps: float = 1e-3) -> CriterionResult:
    grid = _torus_grid()
    pot = PotentialSpec.zero(1)
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 1.5, (grid.n_x, grid.n_v, grid.n_v))
    table = KernelSpec.tabulated(0.5 * (a + a.transpose(0, 2, 1)))
    specs = [KernelSpec.linear_relaxation(1.0), KernelSpec.linear_relaxation(Profile.plateau(0.0, 0.15, 0.3)),
             KernelSpec.factorized(), KernelSpec.mult_example(), KernelSpec.degenerate_v(),
             KernelSpec.two_class(), KernelSpec.phi_zero(), table]
    per = {}
    for sp in specs:
        rep = validate_assumptions(sp, grid, pot)
        per[f"{sp.family}#{len(per)}"] = {"A1": rep.a1_pass, "A2": rep.a2_residual, "A3": rep.a3_value,
                                          "pass": rep.passed}
    bad = inject_asymmetry(KernelSpec.linear_relaxation(1.0), grid, eps, x_cell=3, v_cell=60, w_cell=70)
    rep = validate_assumptions(bad, grid, pot)
    match = abs(rep.a2_residual - eps) <= 0.1 * eps
    ok = all(p["pass"] for p in per.values()) and (not rep.passed) and match
    worst = max(p["A2"] for p in per.values())
    return CriterionResult(13, "kernel validation", ok,
                           f"{sum(p['pass'] for p in per.values())}/{len(per)} built-ins pass (max A2 residual "
                           f"{worst:.1e}); injected {eps:g} -> residual {rep.a2_residual:.3e}, flagged={not rep.passed}",
                           {"kernels": per, "injected": eps, "injected_residual": rep.a2_residual})


# ---------------------------------------------------------------------------
# 14. BGK
# ---------------------------------------------------------------------------


def criterion_bgk(T: float = 30.0, dt: float = 0.01, seed: int = 2) -> CriterionResult:
    grid = _torus_grid()
    pot = PotentialSpec("harmonic_trap", 1, (0.5,), 25.0, 0.1)
    F = bgk_equilibrium(grid, pot, fermi_dirac(0.0, 1.0))
    gk = bgk_kernel(1.0, F, grid)
    s = evolve(3.0 * F, gk, pot, None, grid, dt, 1.0, W=F, compute_dissipation=False)
    fixed = weighted_norm(s.final.values - 3.0 * F, grid, W=F) / weighted_norm(3.0 * F, grid, W=F)
    rng = np.random.default_rng(seed)
    f0 = F * (0.5 + rng.random(grid.shape))
    P = F * (np.sum(grid.cell_weights * f0) / np.sum(grid.cell_weights * F))
    s = evolve(f0, gk, pot, None, grid, dt, T, W=F, target=P, output_every=10, compute_dissipation=False)
    r = fit_decay(s)
    ratio = float(s.distance[-1] / s.distance[0])
    ok = fixed <= 1e-10 and r.verdict == "exponential" and ratio <= 1e-6
    return CriterionResult(14, "BGK relaxation", ok,
                           f"fixed-point drift {fixed:.1e}; gamma={r.gamma:.3f} ({r.verdict}); "
                           f"final/initial distance {ratio:.1e}",
                           {"fixed_point": fixed, "gamma": r.gamma, "verdict": r.verdict, "distance_ratio": ratio})


# ---------------------------------------------------------------------------
# 15. Observability
# ---------------------------------------------------------------------------


def criterion_observability(n_runs: int = 20, T: float = 8.0, seed: int = 0) -> CriterionResult:
    grid = _torus_grid(64, 64)
    pot = PotentialSpec.zero(1)
    W = grid.equilibrium(pot)
    x, v = grid.x_points[:, 0], grid.v_points[:, 0]
    spec = KernelSpec.linear_relaxation(1.0)
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(n_runs):
        f = np.zeros(grid.shape)
        for k in range(1, 4):
            for j in range(3):
                c = rng.normal(size=2)
                f += np.outer(c[0] * np.cos(2 * np.pi * k * x) + c[1] * np.sin(2 * np.pi * k * x), v ** j) / k
        runs.append(evolve(W * f, spec, pot, None, grid, 0.01, T, output_every=5))
    gamma_fit = float(min(fit_decay(r).gamma for r in runs))
    horizon = 1.0 / gamma_fit
    rep = observability_check(runs, T=horizon, gamma_fit=gamma_fit)
    ok = math.isfinite(rep.K) and not rep.failures and bool(rep.consistent)
    return CriterionResult(15, "observability", ok,
                           f"K={rep.K:.3f} at T=1/gamma={horizon:.3f}; gamma_K={rep.gamma_from_K:.3f} vs "
                           f"fitted {gamma_fit:.3f} (factor 2)",
                           {"K": rep.K, "gamma_K": rep.gamma_from_K, "gamma_fit": gamma_fit, "T": horizon})


CRITERIA = {
    1: criterion_flow,
    2: criterion_billiard,
    3: criterion_dissipation,
    4: criterion_weak_coercivity,
    5: criterion_lebeau,
    6: criterion_exponential,
    7: criterion_degenerate,
    8: criterion_polynomial,
    9: criterion_classes,
    10: criterion_trap,
    11: criterion_stationarity,
    12: criterion_stadium,
    13: criterion_kernels,
    14: criterion_bgk,
    15: criterion_observability,
}


def run_criterion(number: int, **kwargs) -> CriterionResult:
    """Run one scenario, timing it."""
    t0 = time.perf_counter()
    res = CRITERIA[number](**kwargs)
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(numbers=None, progress=None) -> list[CriterionResult]:
    """Run the selected scenarios (all by default); ``progress`` receives each result."""
    out = []
    for n in numbers or sorted(CRITERIA):
        res = run_criterion(n)
        out.append(res)
        if progress is not None:
            progress(res)
    return out


def summary_table(results: list[CriterionResult]) -> str:
    """Plain-text pass/fail table."""
    lines = [f"{'#':>3}  {'status':6}  {'seconds':>8}  criterion", "-" * 72]
    for r in results:
        lines.append(f"{r.number:>3}  {'PASS' if r.passed else 'FAIL':6}  {r.seconds:8.1f}  {r.title}")
        lines.append(f"{'':>3}  {'':6}  {'':>8}  {r.summary}")
    n_pass = sum(r.passed for r in results)
    lines.append("-" * 72)
    lines.append(f"{n_pass}/{len(results)} criteria passed")
    return "\n".join(lines)
