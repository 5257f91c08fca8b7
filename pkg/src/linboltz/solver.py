"""Time evolution, diagnostics, decay fitting and lower-bound measurements.

Transport
---------
The semi-Lagrangian pull-back is applied to the ratio ``f / W`` where ``W``
is the equilibrium (``e^{-V} M_h`` or a BGK equilibrium ``F``).  Both are
functions of the hamiltonian, hence invariant along characteristics, so

    f(t + dt, z) = W(z) (f / W)(t, phi_{-dt}(z))

is exact; interpolating the ratio makes equilibria and class indicators
``1_U W`` exactly invariant at grid level and, with linear interpolation,
gives positivity and the weighted maximum principle.  The pull-back is
assembled once as a sparse matrix.

Collisions
----------
The collision operator acts pointwise in position, so ``exp(tau C)`` is
computed once per distinct velocity-space kernel (``scipy.linalg.expm``), or
in closed form for relaxation-type kernels.  This step conserves mass exactly.

Schemes
-------
``strang``: half collision, transport, half collision.
``duhamel_sl``: attenuated pull-back with a trapezoidal gain quadrature,
``f^{n+1} = A T f + dt/2 [A T(G f) + G(f~)]`` with ``A = exp(-dt b(phi_{-dt/2}))``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.linalg import expm
from scipy.spatial import cKDTree

from .control import ClassStructure, OmegaPartition, resolving_steps, sample_phase_points
from .errors import ConfigurationError, ContractError, NumericError
from .fields import DistributionField, as_values
from .flow import IDENTITY, STATUS_OK, VelocityMap, first_entry_times, flow_points
from .geometry import DomainSpec, PhaseGrid, PotentialSpec
from .interp import stencil
from .kernels import GridKernel, KernelSpec, RankOneTerm, dissipation, grid_kernel

__all__ = [
    "DistributionField",
    "EvolutionSeries",
    "DecayReport",
    "SurvivalReport",
    "ObservabilityReport",
    "TransportOperator",
    "SpectralTransport",
    "CollisionStep",
    "evolve",
    "weighted_norm",
    "weighted_inner",
    "dissipation_residual",
    "class_masses",
    "fit_decay",
    "tau_survival",
    "observability_check",
    "write_snapshot",
    "read_snapshot",
    "write_series_csv",
    "heatmap_svg",
]

SCHEMES = ("strang", "duhamel_sl")
INTERPOLATIONS = ("linear", "cubic", "spectral")
DEFAULT_CFL_SAFETY = 16.0


# ---------------------------------------------------------------------------
# Weighted norms
# ---------------------------------------------------------------------------


def _weight(grid: PhaseGrid, pot: PotentialSpec | None, W: np.ndarray | None) -> np.ndarray:
    if W is not None:
        return W
    return grid.equilibrium(pot if pot is not None else PotentialSpec.zero(grid.dim))


def _ratio(f: np.ndarray, W: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    np.divide(f, W, out=out, where=W > 0)
    return out


def weighted_inner(f, g, grid: PhaseGrid, pot: PotentialSpec | None = None, W: np.ndarray | None = None) -> float:
    """Inner product ``sum w f g e^V / M_h`` (or ``/ W`` for an explicit equilibrium)."""
    a, b = as_values(f, grid), as_values(g, grid)
    return float(np.sum(grid.cell_weights * a * _ratio(b, _weight(grid, pot, W))))


def weighted_norm(f, grid: PhaseGrid, pot: PotentialSpec | None = None, p: float = 2,
                  W: np.ndarray | None = None) -> float:
    """Weighted norm: ``(sum w f^2 e^V / M_h)^{1/2}`` for ``p = 2``, ``max |f| e^V / M_h`` for ``p = inf``."""
    vals = as_values(f, grid)
    Wt = _weight(grid, pot, W)
    if p == 2:
        return math.sqrt(max(float(np.sum(grid.cell_weights * vals * _ratio(vals, Wt))), 0.0))
    if p in (np.inf, "inf"):
        r = np.abs(_ratio(vals, Wt))[grid.inside]
        return float(np.max(r)) if r.size else 0.0
    raise ConfigurationError("weighted_norm supports p = 2 or p = inf")


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


class TransportOperator:
    """Semi-Lagrangian pull-back of ``f / W`` over one step, as a sparse matrix.

    Parameters
    ----------
    grid : PhaseGrid
    pot : PotentialSpec
    dt : float
        Time step (feet are ``phi_{-dt}`` of the cell centres).
    W : ndarray
        Equilibrium used for the ratio.
    order : {'linear', 'cubic'}
    substeps : int
        Leapfrog substeps used to trace each foot.
    vmap : VelocityMap

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
    n_aborted : int
        Feet whose backward trace hit a corner or grazed the boundary
        (their pre-abort point is used).
    n_fallback : int
        Feet whose whole stencil lies outside the domain (nearest inside
        cell used).
    max_defect : float
        Largest per-cell mass defect ``1 - sum_i T[i, j]`` of the raw pull-back.

    Notes
    -----
    Interpolated pull-backs are not mass conservative once feet leave their
    velocity row (non-zero potential, reflections).  With ``conservative=True``
    the lost mass ``sum_j defect_j f_j`` is returned along the equilibrium,
    ``T f + W (defect . f) / sum W``.  Since ``T W = W`` the defect pairing
    vanishes on ``W``: equilibria stay exactly stationary and mass is
    conserved to rounding.  On the torus without potential the pull-back is
    already conservative and the correction is switched off.
    """

    def __init__(self, grid: PhaseGrid, pot: PotentialSpec, dt: float, W: np.ndarray, order: str = "linear",
                 substeps: int = 1, vmap: VelocityMap = IDENTITY, conservative: bool = True):
        if order not in ("linear", "cubic"):
            raise ConfigurationError(f"unknown interpolation {order!r}")
        self.grid, self.dt, self.order = grid, float(dt), order
        n_x, n_v = grid.shape
        rows = np.flatnonzero(np.repeat(grid.inside, n_v))
        ix, iv = np.divmod(rows, n_v)
        x0, v0 = grid.x_points[ix], grid.v_points[iv]
        xf, vf, status = flow_points(x0, v0, dt, pot, grid.domain, dt / max(1, substeps), vmap, direction=-1)
        self.n_aborted = int(np.count_nonzero(status != STATUS_OK))
        idx, w = stencil(grid, xf, vf, order)
        self.n_fallback = 0
        if not grid.domain.periodic:
            ok = grid.inside[idx // n_v]
            w = np.where(ok, w, 0.0)
            s = w.sum(axis=1)
            bad = np.abs(s) < 1e-12
            w[~bad] /= s[~bad, None]
            if np.any(bad):
                self.n_fallback = int(np.count_nonzero(bad))
                tree = cKDTree(grid.x_points[grid.inside])
                inside_idx = np.flatnonzero(grid.inside)
                _, near = tree.query(xf[bad])
                jv = np.clip(np.floor((vf[bad] + grid.v_max) / grid.dv).astype(np.int64), 0, np.asarray(grid.nv) - 1)
                jv = np.ravel_multi_index(tuple(jv.T), grid.nv)
                idx[bad] = (inside_idx[near] * n_v + jv)[:, None]
                w[bad] = 0.0
                w[bad, 0] = 1.0
        Wf = W.ravel()
        ratio = np.zeros_like(w)
        Ws = Wf[idx]
        np.divide(Wf[rows][:, None], Ws, out=ratio, where=Ws > 0)
        R = np.repeat(rows, idx.shape[1])
        self.matrix = sparse.csr_matrix(((w * ratio).ravel(), (R, idx.ravel())), shape=(n_x * n_v, n_x * n_v))
        self.matrix.sum_duplicates()
        # mass defect of every source cell (cell weights are uniform inside the domain)
        inside = np.repeat(grid.inside, n_v)
        defect = np.where(inside, 1.0 - np.asarray(self.matrix.sum(axis=0)).ravel(), 0.0)
        self.max_defect = float(np.max(np.abs(defect)))
        self.conservative = conservative and self.max_defect > 1e-15
        self._defect = defect
        self._Wf = np.where(inside, Wf, 0.0)
        self._Wmass = float(self._Wf.sum())

    def apply(self, f: np.ndarray) -> np.ndarray:
        fr = f.ravel()
        out = self.matrix @ fr
        if self.conservative:
            out += self._Wf * (float(self._defect @ fr) / self._Wmass)
        return out.reshape(f.shape)


class SpectralTransport:
    """Exact free transport on the torus by Fourier phase shifts (zero potential only)."""

    def __init__(self, grid: PhaseGrid, pot: PotentialSpec, dt: float, vmap: VelocityMap = IDENTITY):
        if not grid.domain.periodic or pot.kind != "zero":
            raise ConfigurationError("spectral transport needs the torus and a zero potential")
        self.grid, self.dt = grid, float(dt)
        self.n_aborted = self.n_fallback = 0
        nx = tuple(grid.nx)
        ks = np.meshgrid(*[np.fft.fftfreq(n, d=1.0 / n) for n in nx], indexing="ij")
        a = vmap.velocity(grid.v_points)
        phase = sum(k.ravel()[:, None] * a[None, :, i] for i, k in enumerate(ks))
        # shift of the cell-centred grid by -dt * a(v): f(x - dt a)
        self.factor = np.exp(-2j * np.pi * dt * phase).reshape(nx + (grid.n_v,))

    def apply(self, f: np.ndarray) -> np.ndarray:
        g = self.grid
        shape = tuple(g.nx) + (g.n_v,)
        axes = tuple(range(g.dim))
        F = np.fft.fftn(f.reshape(shape), axes=axes)
        return np.real(np.fft.ifftn(F * self.factor, axes=axes)).reshape(f.shape)


# ---------------------------------------------------------------------------
# Collisions
# ---------------------------------------------------------------------------


def _phi1(z):
    out = np.ones_like(z)
    big = np.abs(z) > 1e-8
    out[big] = np.expm1(z[big]) / z[big]
    out[~big] = 1.0 + z[~big] / 2.0
    return out


def _phi2(z):
    out = np.full_like(z, 0.5)
    big = np.abs(z) > 1e-4
    out[big] = (np.expm1(z[big]) - z[big]) / z[big] ** 2
    out[~big] = 0.5 + z[~big] / 6.0
    return out


class CollisionStep:
    """Solution operator ``exp(tau C)`` of the homogeneous collision equation.

    ``method``: ``'closed'`` for a single relaxation term ``c(x) h(x, w)``
    (uniform departure rate), ``'expm'`` for per-profile matrix exponentials,
    ``'etd2'`` for a second-order exponential integrator (large velocity
    grids); ``'auto'`` picks in that order.
    """

    def __init__(self, gk: GridKernel, tau: float, method: str = "auto", max_dense_nv: int = 1024):
        self.gk, self.tau = gk, float(tau)
        grid = gk.grid
        if method == "auto":
            if self._relaxation() is not None:
                method = "closed"
            elif grid.n_v <= max_dense_nv:
                method = "expm"
            else:
                method = "etd2"
        self.method = method
        if method == "closed":
            c, h, s = self._relaxation()
            lam = c * s
            self.decay = np.exp(-lam * tau)[:, None]
            self.target = np.where(s[:, None] > 0, h / np.where(s > 0, s, 1.0)[:, None], 0.0)
        elif method == "expm":
            self.props = []
            for R, members in gk.iter_groups():
                L = grid.w_v * R.T - np.diag(grid.w_v * R.sum(axis=1))
                self.props.append((members, expm(tau * L).T.copy()))
        elif method != "etd2":
            raise ConfigurationError(f"unknown collision method {method!r}")

    def _relaxation(self):
        """``(c, h, s)`` if the kernel is ``c(x) h(x, w)`` with ``s = w_v sum h``."""
        t = self.gk.terms
        if len(t) != 1 or not isinstance(t[0], RankOneTerm):
            return None
        g = t[0].g
        g0 = float(np.ravel(g)[0])
        if not np.all(g == g0):
            return None
        h = np.broadcast_to(t[0].h, self.gk.grid.shape)
        s = self.gk.grid.w_v * h.sum(axis=1)
        return t[0].coef * g0, h, s

    def apply(self, f: np.ndarray) -> np.ndarray:
        grid = self.gk.grid
        if self.method == "closed":
            m = grid.w_v * f.sum(axis=1, keepdims=True)
            return self.decay * f + (1.0 - self.decay) * m * self.target
        if self.method == "expm":
            out = np.empty_like(f)
            for members, PT in self.props:
                out[members] = f[members] @ PT
            return out
        b = self.gk.freq
        z = -b * self.tau
        G0 = self.gk.gain(f)
        a = np.exp(z) * f + self.tau * _phi1(z) * G0
        return a + self.tau * _phi2(z) * (self.gk.gain(a) - G0)


# ---------------------------------------------------------------------------
# Series
# ---------------------------------------------------------------------------


@dataclass
class EvolutionSeries:
    """Diagnostics recorded during :func:`evolve`.

    Attributes
    ----------
    times : ndarray
    distance : ndarray
        Weighted L2 distance to the target (``Pf0``, or zero).
    norm2 : ndarray
        Squared weighted L2 norm of ``f``.
    mass : ndarray
    dissipation : ndarray
        ``D(f)`` (``nan`` when not computed).
    class_masses : ndarray, shape (n_times, n_classes)
    sup_norm : ndarray
        Weighted sup norm ``max |f| / W``.
    min_value : ndarray
    snapshots : dict
        ``time -> values`` for requested snapshot times.
    meta : dict
    final : DistributionField
    """

    times: np.ndarray
    distance: np.ndarray
    norm2: np.ndarray
    mass: np.ndarray
    dissipation: np.ndarray
    class_masses: np.ndarray
    sup_norm: np.ndarray
    min_value: np.ndarray
    snapshots: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    final: DistributionField | None = None

    def rows(self) -> list[list]:
        out = []
        for k, t in enumerate(self.times):
            out.append([t, self.distance[k], self.mass[k], self.dissipation[k], self.norm2[k],
                        *self.class_masses[k].tolist()])
        return out

    def header(self) -> list[str]:
        return ["t", "l2_distance", "mass", "dissipation", "norm2"] + [
            f"class_mass_{j}" for j in range(self.class_masses.shape[1])
        ]


def class_masses(f, classes: ClassStructure) -> np.ndarray:
    """Masses ``int_{U_j} f`` of every class region."""
    grid = classes.omega.grid
    vals = as_values(f, grid)
    cw = grid.cell_weights
    return np.array([float(np.sum(cw * vals * classes.region(j))) for j in range(classes.reach_class_count)])


def evolve(f0, spec: KernelSpec | GridKernel | None, pot: PotentialSpec, dom: DomainSpec | None,
           grid: PhaseGrid, dt: float, T: float, scheme: str = "strang", interp: str = "linear",
           output_every: int = 1, target=None, classes: ClassStructure | None = None,
           W: np.ndarray | None = None, cfl_safety: float = DEFAULT_CFL_SAFETY, substeps: int = 1,
           compute_dissipation: bool = True, dissipation_method: str = "auto",
           snapshot_times=(), mass_fix: bool = True, renormalize: bool = False,
           vmap: VelocityMap = IDENTITY) -> EvolutionSeries:
    """Evolve ``f0`` under transport plus collisions.

    Parameters
    ----------
    f0 : DistributionField or ndarray
    spec : KernelSpec, GridKernel or None
        ``None`` means free transport.
    pot, dom, grid
        ``dom`` defaults to ``grid.domain``.
    dt, T : float
        Time step and final time (``round(T / dt)`` steps).
    scheme : {'strang', 'duhamel_sl'}
    interp : {'linear', 'cubic', 'spectral'}
        Pull-back interpolation; ``spectral`` is the exact Fourier shift
        (torus, zero potential).
    output_every : int
        Record diagnostics every this many steps (and at the end).
    target : DistributionField or ndarray, optional
        Field the distance is measured to (e.g. ``Pf0``); zero by default.
    classes : ClassStructure, optional
        Enables per-class masses.
    W : ndarray, optional
        Equilibrium for the weighted norms and the transported ratio
        (default ``e^{-V} M_h``).
    cfl_safety : float
        Require ``v_max dt <= cfl_safety * min(dx)``.
    mass_fix : bool
        Return the interpolation mass defect of the pull-back along the
        equilibrium (exact conservation; see :class:`TransportOperator`).
        The raw defect is reported in ``meta['transport_max_defect']``.
    renormalize : bool
        Rescale to the initial mass after each step.

    Raises
    ------
    ConfigurationError
        Invalid scheme/interpolation or violated step restriction.
    NumericError
        Non-finite values (with the step index).
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    if interp not in INTERPOLATIONS:
        raise ConfigurationError(f"unknown interpolation {interp!r}")
    if not (dt > 0 and T > 0):
        raise ConfigurationError("dt and T must be positive")
    speed = float(np.max(np.abs(vmap.velocity(grid.v_points))))
    if speed * dt > cfl_safety * float(np.min(grid.dx)):
        raise ConfigurationError(
            f"time step too large: v_max*dt = {speed * dt:.3g} exceeds {cfl_safety} x spacing {np.min(grid.dx):.3g}"
        )
    dom = grid.domain if dom is None else dom
    if dom is not grid.domain and dom.to_dict() != grid.domain.to_dict():
        raise ContractError("domain does not match the grid")
    f = np.array(as_values(f0, grid), dtype=float)
    f[~grid.inside] = 0.0
    W = _weight(grid, pot, W)
    gk = grid_kernel(spec, grid) if spec is not None else None
    tgt = np.zeros(grid.shape) if target is None else as_values(target, grid)
    n_steps = max(1, int(round(T / dt)))
    cw = grid.cell_weights

    if interp == "spectral":
        transport = SpectralTransport(grid, pot, dt, vmap)
        half_transport = None
    else:
        transport = TransportOperator(grid, pot, dt, W, interp, substeps, vmap, conservative=mass_fix)
        half_transport = None
    if gk is not None and scheme == "strang":
        half_coll = CollisionStep(gk, 0.5 * dt)
    elif gk is not None:
        if interp == "spectral":
            half_transport = SpectralTransport(grid, pot, 0.5 * dt, vmap)
            bmid = half_transport.apply(gk.freq)
        else:
            half_transport = TransportOperator(grid, pot, 0.5 * dt, np.ones(grid.shape), interp, substeps, vmap,
                                               conservative=False)
            bmid = half_transport.apply(gk.freq)
        atten = np.exp(-dt * np.maximum(bmid, 0.0))

    def record(k, f):
        diff = f - tgt
        times.append(k * dt)
        distance.append(math.sqrt(max(float(np.sum(cw * diff * _ratio(diff, W))), 0.0)))
        norm2.append(float(np.sum(cw * f * _ratio(f, W))))
        mass.append(float(np.sum(cw * f)))
        D = dissipation(gk, f, grid, W=W, method=dissipation_method) if (gk is not None and compute_dissipation) else (
            0.0 if gk is None else float("nan"))
        diss.append(D)
        cm.append(class_masses(f, classes) if classes is not None else np.zeros(0))
        r = np.abs(_ratio(f, W))[grid.inside]
        sup.append(float(np.max(r)))
        mins.append(float(np.min(f[grid.inside])))

    times, distance, norm2, mass, diss, cm, sup, mins = [], [], [], [], [], [], [], []
    snaps = {}
    snap_steps = {int(round(t / dt)): t for t in snapshot_times}
    record(0, f)
    if 0 in snap_steps:
        snaps[float(snap_steps[0])] = f.copy()
    m0 = mass[0]
    for k in range(1, n_steps + 1):
        if gk is None:
            f = transport.apply(f)
        elif scheme == "strang":
            f = half_coll.apply(f)
            f = transport.apply(f)
            f = half_coll.apply(f)
        else:
            Tf = transport.apply(f)
            TG = transport.apply(gk.gain(f))
            base = atten * Tf
            pred = base + dt * atten * TG
            f = base + 0.5 * dt * (atten * TG + gk.gain(pred))
        if renormalize:
            m = float(np.sum(cw * f))
            if m != 0:
                f *= m0 / m
        if not np.all(np.isfinite(f)):
            raise NumericError("non-finite values in the evolved field", step=k)
        if k % output_every == 0 or k == n_steps:
            record(k, f)
        if k in snap_steps:
            snaps[float(snap_steps[k])] = f.copy()
    meta = {
        "scheme": scheme, "interp": interp, "dt": dt, "T": n_steps * dt, "steps": n_steps,
        "kernel": getattr(spec, "family", getattr(gk, "name", "none")),
        "transport_aborted_feet": transport.n_aborted,
        "transport_max_defect": getattr(transport, "max_defect", 0.0), "mass_fix": mass_fix, "transport_fallback_feet": transport.n_fallback,
    }
    return EvolutionSeries(
        times=np.array(times), distance=np.array(distance), norm2=np.array(norm2), mass=np.array(mass),
        dissipation=np.array(diss),
        class_masses=np.array(cm) if classes is not None else np.zeros((len(times), 0)),
        sup_norm=np.array(sup), min_value=np.array(mins), snapshots=snaps, meta=meta,
        final=DistributionField(grid, f, time=n_steps * dt, meta=dict(meta)),
    )


def dissipation_residual(series: EvolutionSeries) -> float:
    """``max_k |(N_{k+1} - N_{k-1}) / (t_{k+1} - t_{k-1}) + D_k| / N_0`` with ``N = |f|^2``.

    The centred difference is second order in the output spacing.
    """
    t, N, D = series.times, series.norm2, series.dissipation
    if len(t) < 3:
        raise ContractError("dissipation_residual needs at least three samples")
    if np.any(np.isnan(D)):
        raise ContractError("series lacks dissipation samples")
    dN = (N[2:] - N[:-2]) / (t[2:] - t[:-2])
    return float(np.max(np.abs(dN + D[1:-1])) / N[0]) if N[0] > 0 else 0.0


# ---------------------------------------------------------------------------
# Decay fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecayReport:
    """Exponential and polynomial fits of a decaying distance.

    Attributes
    ----------
    gamma : float
        Exponential rate of ``d(t) ~ C exp(-gamma t)``.
    gamma_residual : float
        ``sqrt(SS_res / SS_tot)`` of the log-linear fit.
    p : float
        Exponent of ``d(t) ~ C (1 + t)^{-p}``.
    p_residual : float
    window_rates : list of float
        Exponential rates on five contiguous windows.
    window_bounds : list of (float, float)
    window_spread : float
        ``(max - min) / mean`` of the window rates.
    verdict : {'exponential', 'polynomial-like', 'stalled'}
    n_used : int
    floor_truncated : bool
    """

    gamma: float
    gamma_residual: float
    p: float
    p_residual: float
    window_rates: list
    window_bounds: list
    window_spread: float
    verdict: str
    n_used: int
    floor_truncated: bool

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "gamma_residual": self.gamma_residual, "p": self.p,
            "p_residual": self.p_residual, "window_rates": self.window_rates,
            "window_bounds": [list(b) for b in self.window_bounds], "window_spread": self.window_spread,
            "verdict": self.verdict, "n_used": self.n_used, "floor_truncated": self.floor_truncated,
        }


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r = math.sqrt(float(np.sum(res ** 2)) / ss_tot) if ss_tot > 0 else 0.0
    return float(coef[0]), r


def fit_decay(series, discard: float = 0.1, floor: float = 1e-12, n_windows: int = 5,
              stall_ratio: float = 0.9) -> DecayReport:
    """Fit the distance series by an exponential and by a power law.

    Parameters
    ----------
    series : EvolutionSeries or tuple (times, distances)
    discard : float
        Initial fraction of the samples ignored as a transient.
    floor : float
        Samples after the first one below ``floor * d(0)`` are dropped.
    stall_ratio : float
        Verdict ``stalled`` when the distance drops by less than this factor
        over the fitted range.
    """
    if isinstance(series, EvolutionSeries):
        t, d = series.times, series.distance
    else:
        t, d = (np.asarray(a, dtype=float) for a in series)
    truncated = False
    below = np.flatnonzero(d < floor * d[0])
    if below.size:
        t, d = t[:below[0]], d[:below[0]]
        truncated = True
    start = int(math.floor(discard * len(t)))
    t, d = t[start:], d[start:]
    if len(t) < 20:
        raise ContractError(f"fit_decay needs at least 20 samples after the transient (got {len(t)})")
    if np.any(d <= 0):
        raise ContractError("distances must be positive")
    ld = np.log(d)
    slope, r_e = _linfit(t, ld)
    pslope, r_p = _linfit(np.log1p(t), ld)
    edges = np.linspace(0, len(t), n_windows + 1).astype(int)
    rates, bounds = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a >= 2:
            rates.append(-_linfit(t[a:b], ld[a:b])[0])
            bounds.append((float(t[a]), float(t[b - 1])))
    mean = float(np.mean(rates))
    spread = float((max(rates) - min(rates)) / abs(mean)) if mean != 0 else float("inf")
    if d[-1] / d[0] > stall_ratio:
        verdict = "stalled"
    elif r_e <= r_p:
        verdict = "exponential"
    else:
        verdict = "polynomial-like"
    return DecayReport(-slope, r_e, -pslope, r_p, rates, bounds, spread, verdict, len(t), truncated)


# ---------------------------------------------------------------------------
# Hitting-time survival
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurvivalReport:
    """Monte Carlo survival function ``Leb{tau > t}`` (normalized to the box).

    Attributes
    ----------
    t : ndarray
    survival : ndarray
        Fraction of non-aborted samples with ``tau > t``.
    slope : float
        Least-squares slope of ``log survival`` against ``log t`` (where positive).
    n_samples, n_aborted : int
    box_volume : float
    """

    t: np.ndarray
    survival: np.ndarray
    slope: float
    n_samples: int
    n_aborted: int
    box_volume: float

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "survival": self.survival.tolist(), "slope": self.slope,
                "n_samples": self.n_samples, "n_aborted": self.n_aborted, "box_volume": self.box_volume}


def tau_survival(omega: OmegaPartition, pot: PotentialSpec, dom: DomainSpec | None, N: int, t_grid,
                 box=None, seed: int = 0, direction: int = -1, h=None,
                 vmap: VelocityMap = IDENTITY) -> SurvivalReport:
    """Survival function of the hitting time ``tau = inf{t >= 0 : phi_{-t}(x, v) in omega}``.

    ``direction=1`` uses the forward flow instead.
    """
    if N < 10_000:
        raise ConfigurationError("tau_survival needs at least 10^4 samples")
    grid = omega.grid
    dom = grid.domain if dom is None else dom
    t_grid = np.asarray(t_grid, dtype=float)
    x, v = sample_phase_points(grid, N, seed, box)
    steps = resolving_steps(grid, pot, v) if h is None else h
    times, status = first_entry_times(x, v, omega.contains, pot, dom, float(np.max(t_grid)), steps, vmap, direction)
    ok = status == STATUS_OK
    tau = np.where(np.isnan(times), np.inf, times)[ok]
    surv = np.array([np.mean(tau > t) for t in t_grid]) if tau.size else np.full(len(t_grid), np.nan)
    pos = (surv > 0) & (t_grid > 0)
    slope = float(np.polyfit(np.log(t_grid[pos]), np.log(surv[pos]), 1)[0]) if np.count_nonzero(pos) >= 2 else float("nan")
    if box is None:
        vol = float(grid.domain_volume * (2 * grid.v_max) ** grid.dim)
    else:
        xlo, xhi, vlo, vhi = (np.broadcast_to(np.asarray(b, dtype=float), (grid.dim,)) for b in box)
        vol = float(np.prod(xhi - xlo) * np.prod(vhi - vlo))
    return SurvivalReport(t_grid, surv, slope, int(N), int(np.count_nonzero(~ok)), vol)


# ---------------------------------------------------------------------------
# Observability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservabilityReport:
    """Observability constant ``K = max ||f0 - Pf0||^2 / int_0^T D``.

    Attributes
    ----------
    K : float
        ``inf`` when some run dissipates nothing.
    gamma_from_K : float
        ``-log(1 - 1/K) / (2 T)``: the norm decay rate implied by ``K``.
    per_run : list of float
    failures : list of int
        Runs with zero integrated dissipation and nonzero energy.
    gamma_fit : float or None
    consistent : bool or None
        ``gamma_from_K`` within a factor two of ``gamma_fit``.
    """

    K: float
    gamma_from_K: float
    per_run: list
    failures: list
    gamma_fit: float | None
    consistent: bool | None

    def to_dict(self) -> dict:
        return {"K": self.K, "gamma_from_K": self.gamma_from_K, "per_run": self.per_run,
                "failures": self.failures, "gamma_fit": self.gamma_fit, "consistent": self.consistent}


def observability_check(runs, T: float | None = None, gamma_fit: float | None = None,
                        factor: float = 2.0) -> ObservabilityReport:
    """Observability constant from a list of runs sharing the horizon ``T``.

    Each run's energy is its initial squared distance to the target
    (``||f0 - Pf0||^2``) and its observed dissipation ``int_0^T D dt`` is
    integrated by the trapezoid rule over the samples with ``t <= T``.
    """
    if not runs:
        raise ContractError("observability_check needs at least one run")
    T = float(runs[0].times[-1]) if T is None else float(T)
    ratios, failures = [], []
    for i, s in enumerate(runs):
        if np.any(np.isnan(s.dissipation)):
            raise ContractError("runs must record the dissipation")
        sel = s.times <= T + 1e-12
        E0 = float(s.distance[0] ** 2)
        if E0 <= 0:
            raise ContractError("initial data must differ from their equilibrium projection")
        ID = float(np.trapezoid(s.dissipation[sel], s.times[sel]))
        if ID <= 0:
            failures.append(i)
            ratios.append(float("inf"))
        else:
            ratios.append(E0 / ID)
    K = max(ratios)
    if np.isfinite(K) and K > 1:
        gK = -math.log(1.0 - 1.0 / K) / (2.0 * T)
    elif np.isfinite(K):
        gK = float("inf")
    else:
        gK = 0.0
    consistent = None
    if gamma_fit is not None and np.isfinite(K):
        consistent = bool(gamma_fit / factor <= gK <= gamma_fit * factor)
    return ObservabilityReport(float(K), float(gK), ratios, failures, gamma_fit, consistent)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"LBZSNAP1"


def write_snapshot(path: str | Path, f, grid: PhaseGrid | None = None) -> None:
    """Binary snapshot: magic, ``d``, ``nx``, ``nv`` (int32), ``dx``, ``dv``, ``x_lo``, ``v_lo``,
    time (float64), then the row-major ``(n_x, n_v)`` payload as little-endian float64."""
    if isinstance(f, DistributionField):
        grid, vals, t = f.grid, f.values, f.time
    else:
        vals, t = as_values(f, grid), 0.0
    d = grid.dim
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<i", d))
        fh.write(struct.pack(f"<{d}i", *grid.nx))
        fh.write(struct.pack(f"<{d}i", *grid.nv))
        fh.write(struct.pack(f"<{d}d", *grid.dx))
        fh.write(struct.pack(f"<{d}d", *grid.dv))
        fh.write(struct.pack(f"<{d}d", *grid.x_lo))
        fh.write(struct.pack(f"<{d}d", *([-grid.v_max] * d)))
        fh.write(struct.pack("<d", t))
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def read_snapshot(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a snapshot written by :func:`write_snapshot`; returns ``(values, header)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(SNAPSHOT_MAGIC):
        raise ConfigurationError(f"{path}: not a snapshot file")
    off = len(SNAPSHOT_MAGIC)
    (d,) = struct.unpack_from("<i", buf, off)
    off += 4
    hdr = {"dim": d}
    for name, fmt in (("nx", "i"), ("nv", "i"), ("dx", "d"), ("dv", "d"), ("x_lo", "d"), ("v_lo", "d")):
        vals = struct.unpack_from(f"<{d}{fmt}", buf, off)
        off += struct.calcsize(f"<{d}{fmt}")
        hdr[name] = list(vals)
    (hdr["time"],) = struct.unpack_from("<d", buf, off)
    off += 8
    n_x, n_v = int(np.prod(hdr["nx"])), int(np.prod(hdr["nv"]))
    data = np.frombuffer(buf, dtype="<f8", offset=off)
    if data.size != n_x * n_v:
        raise ConfigurationError(f"{path}: payload size mismatch")
    return data.reshape(n_x, n_v).copy(), hdr


def write_series_csv(path: str | Path, series: EvolutionSeries, header_lines=()) -> None:
    """Series as CSV (``t, l2_distance, mass, dissipation, norm2, class masses...``)."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(series.header())
        for row in series.rows():
            w.writerow([repr(float(c)) for c in row])


def heatmap_svg(path: str | Path, f, grid: PhaseGrid | None = None, title: str = "",
                description: str = "") -> None:
    """Self-contained SVG heatmap of a field (position x velocity in 1-D,
    position density in 2-D).  ``description`` is stored in the SVG metadata."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(f, DistributionField):
        grid, vals = f.grid, f.values
    else:
        vals = as_values(f, grid)
    plt.rcParams["svg.hashsalt"] = "linboltz"
    fig, ax = plt.subplots(figsize=(5, 4))
    if grid.dim == 1:
        lo, hi = grid.domain.bounding_box()
        im = ax.imshow(vals.T, origin="lower", aspect="auto",
                       extent=[lo[0], hi[0], -grid.v_max, grid.v_max], cmap="viridis")
        ax.set_xlabel("x")
        ax.set_ylabel("v")
    else:
        rho = (grid.w_v * vals.sum(axis=1)).reshape(grid.nx)
        rho = np.where(grid.inside.reshape(grid.nx), rho, np.nan)
        lo, hi = grid.domain.bounding_box()
        im = ax.imshow(rho.T, origin="lower", aspect="equal", extent=[lo[0], hi[0], lo[1], hi[1]], cmap="viridis")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    meta = {"Date": None}
    if description:
        meta["Description"] = description
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
