"""Geometric control: the collision set, control conditions, Lebeau constants
and the equivalence classes that index the stationary states.

* :func:`extract_omega` thresholds the collision frequency on the grid and
  splits the collision set into face-connected components (periodic in
  position on the torus).
* :func:`check_gcc` samples phase points and measures the fraction whose
  trajectory reaches the collision set within a horizon.
* :func:`lebeau_constant` estimates the extremal time averages of the
  collision frequency along trajectories.
* :func:`build_classes` links components through the flow and through
  positive kernel values, closes the links with union-find, builds the set of
  points whose forward trajectory reaches the collision set, and materializes
  one region ``U_j`` per class.
* :func:`stationary_basis` and :func:`project_equilibrium` give the
  orthonormal stationary fields and the projection of initial data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.stats import qmc

from .errors import ConfigurationError, ContractError, DegenerateError, NumericError
from .fields import DistributionField, as_values, like
from .flow import IDENTITY, STATUS_OK, VelocityMap, advance, first_entry_times, flow_points
from .geometry import DomainSpec, PhaseGrid, PotentialSpec
from .interp import stencil
from .kernels import GridKernel, KernelSpec, grid_kernel

__all__ = [
    "DisjointSet",
    "OmegaPartition",
    "GCCReport",
    "LebeauEstimate",
    "ClassStructure",
    "extract_omega",
    "check_gcc",
    "lebeau_constant",
    "trajectory_average",
    "build_classes",
    "stationary_basis",
    "project_equilibrium",
    "sample_phase_points",
    "resolving_steps",
    "check_forward_invariance",
]

OMEGA_THRESHOLD = 1e-8


# ---------------------------------------------------------------------------
# Union-find
# ---------------------------------------------------------------------------


class DisjointSet:
    """Union-find with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True

    def groups(self) -> list[list[int]]:
        """Classes as sorted lists, ordered by their smallest element."""
        out: dict[int, list[int]] = {}
        for a in range(len(self.parent)):
            out.setdefault(self.find(a), []).append(a)
        return sorted(out.values(), key=lambda g: g[0])


def label_mask(mask: np.ndarray, grid: PhaseGrid) -> tuple[np.ndarray, int]:
    """Face-connected components of a phase-space mask of shape ``(n_x, n_v)``.

    Position axes wrap around on the torus.  Labels are ``0..n-1`` ordered by
    first cell in C order; cells outside the mask get ``-1``.
    """
    shape = tuple(grid.nx) + tuple(grid.nv)
    m = mask.reshape(shape)
    structure = ndimage.generate_binary_structure(len(shape), 1)
    lab, n = ndimage.label(m, structure=structure)
    if n == 0:
        return np.full(mask.shape, -1, dtype=np.int64), 0
    ds = DisjointSet(n + 1)
    if grid.domain.periodic:
        for ax in range(grid.dim):
            first = np.take(lab, 0, axis=ax)
            last = np.take(lab, shape[ax] - 1, axis=ax)
            both = (first > 0) & (last > 0)
            for a, b in zip(first[both].ravel(), last[both].ravel()):
                ds.union(int(a), int(b))
    flat = lab.ravel()
    roots = np.array([ds.find(i) for i in range(n + 1)])
    merged = roots[flat]
    merged[flat == 0] = 0
    # compact relabel in order of first appearance
    _, first_idx = np.unique(merged, return_index=True)
    order = np.argsort(first_idx)
    keys = np.unique(merged)[order]
    mapping = {int(k): i for i, k in enumerate(k for k in keys if k != 0)}
    out = np.full(flat.shape, -1, dtype=np.int64)
    for k, i in mapping.items():
        out[merged == k] = i
    return out.reshape(mask.shape), len(mapping)


# ---------------------------------------------------------------------------
# Collision set
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OmegaPartition:
    """Grid cells where collisions act, with their connected components.

    Attributes
    ----------
    grid : PhaseGrid
    kernel : GridKernel
    mask : ndarray of bool, shape (n_x, n_v)
    labels : ndarray of int, shape (n_x, n_v)
        Component label per cell, ``-1`` outside the set.
    n_components : int
    threshold : float
        Absolute frequency threshold used for membership.
    """

    grid: PhaseGrid
    kernel: GridKernel
    mask: np.ndarray
    labels: np.ndarray
    n_components: int
    threshold: float

    @property
    def projected(self) -> np.ndarray:
        """Position cells that carry at least one cell of the set."""
        return np.any(self.mask, axis=1)

    def cells(self, i: int) -> np.ndarray:
        """Flat cell indices ``(ix * n_v + iv)`` of component ``i``."""
        return np.flatnonzero(self.labels.ravel() == i)

    def component_sizes(self) -> list[int]:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_components).tolist()

    def label_at(self, x, v) -> np.ndarray:
        """Component label of the cell containing each point (``-1`` if none)."""
        ix, iv = self.grid.x_cell_index(x), self.grid.v_cell_index(v)
        ok = (ix >= 0) & (iv >= 0)
        out = np.full(len(ix), -1, dtype=np.int64)
        out[ok] = self.labels[ix[ok], iv[ok]]
        return out

    def contains(self, x, v) -> np.ndarray:
        return self.label_at(x, v) >= 0

    def to_dict(self) -> dict:
        return {
            "n_components": self.n_components,
            "component_sizes": self.component_sizes(),
            "threshold": self.threshold,
            "cells": int(np.count_nonzero(self.mask)),
            "projected_cells": int(np.count_nonzero(self.projected)),
        }


def extract_omega(spec: KernelSpec | GridKernel, grid: PhaseGrid,
                  eps_omega: float = OMEGA_THRESHOLD) -> OmegaPartition:
    """Collision set ``{b > eps_omega * max b}`` and its components.

    Raises
    ------
    DegenerateError
        If the kernel vanishes identically.
    ContractError
        If a kernel whose collision set must be a product of a position set
        and the whole velocity box yields a set that is not of that form.
    """
    gk = grid_kernel(spec, grid)
    b = gk.freq
    bmax = float(np.max(b[grid.inside])) if np.any(grid.inside) else 0.0
    if not bmax > 0:
        raise DegenerateError("collision frequency vanishes identically: the collision set is empty")
    thr = eps_omega * bmax
    mask = (b > thr) & grid.inside[:, None]
    if isinstance(spec, KernelSpec) and spec.spatially_factorized:
        rows = mask[grid.inside]
        if not np.all(rows.all(axis=1) | ~rows.any(axis=1)):
            raise ContractError("collision set of a factorized kernel is not a product set")
    labels, n = label_mask(mask, grid)
    return OmegaPartition(grid, gk, mask, labels, n, thr)


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------


def resolving_steps(grid: PhaseGrid, pot: PotentialSpec, v: np.ndarray, cells: float = 0.5,
                    h_min: float = 1e-4, h_max: float = 0.05) -> np.ndarray:
    """Per-trajectory steps moving at most ``cells`` grid cells per step.

    The speed bound includes the energy a particle can gain from the potential.
    """
    sm = pot.smoothness
    speed = np.linalg.norm(v, axis=1) + math.sqrt(2.0 * 2.0 * sm["sup_V"])
    h = cells * float(np.min(grid.dx)) / np.maximum(speed, 1e-12)
    if sm["sup_grad"] > 0:
        h = np.minimum(h, cells * float(np.min(grid.dv)) / sm["sup_grad"])
    return np.clip(h, h_min, h_max)


def sample_phase_points(grid: PhaseGrid, n: int, seed: int = 0, box=None):
    """Scrambled-Sobol phase points, uniform in position (domain) and velocity.

    Parameters
    ----------
    box : tuple (x_lo, x_hi, v_lo, v_hi), optional
        Sampling box; defaults to the domain bounding box times the velocity box.
        Points outside a bounded domain are rejected and resampled.

    Returns
    -------
    x, v : ndarray, shape (n, d)
    """
    d = grid.dim
    dom = grid.domain
    if box is None:
        xlo, xhi = dom.bounding_box()
        vlo, vhi = np.full(d, -grid.v_max), np.full(d, grid.v_max)
    else:
        xlo, xhi, vlo, vhi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in box)
    sob = qmc.Sobol(2 * d, scramble=True, seed=seed)
    xs, vs = [], []
    got = 0
    while got < n:
        m = int(math.ceil(math.log2(max(2 * (n - got), 2))))
        u = sob.random_base2(m) if got == 0 else sob.random(2 ** m)
        x = xlo + u[:, :d] * (xhi - xlo)
        v = vlo + u[:, d:] * (vhi - vlo)
        if not dom.periodic:
            ok = dom.contains(x)
            x, v = x[ok], v[ok]
        else:
            x = dom.canonicalize(x)
        xs.append(x)
        vs.append(v)
        got += len(x)
    return np.concatenate(xs)[:n], np.concatenate(vs)[:n]


# ---------------------------------------------------------------------------
# Control conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GCCReport:
    """Sampled control fractions.

    Attributes
    ----------
    mode : {'finite_T', 'aeit'}
    horizon : float
    n_samples : int
    n_aborted : int
        Trajectories aborted at corners/grazing hits (excluded from fractions).
    fraction : float
        Controlled fraction on all samples.
    fraction_half : float
        Controlled fraction on the first half of the (nested) samples.
    holds : bool
    witnesses : list
        Up to five uncontrolled sample points ``(x, v)``.
    """

    mode: str
    horizon: float
    n_samples: int
    n_aborted: int
    fraction: float
    fraction_half: float
    holds: bool
    witnesses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "horizon": self.horizon, "n_samples": self.n_samples,
            "n_aborted": self.n_aborted, "fraction": self.fraction,
            "fraction_half": self.fraction_half, "holds": self.holds,
            "witnesses": [{"x": list(map(float, x)), "v": list(map(float, v))} for x, v in self.witnesses],
        }


def check_gcc(omega: OmegaPartition, pot: PotentialSpec, dom: DomainSpec | None = None, T: float = 10.0,
              n_samples: int = 10_000, mode: str = "finite_T", T_max: float | None = None,
              h=None, seed: int = 0, box=None, direction: int = 1, vmap: VelocityMap = IDENTITY,
              aeit_tol: float = 0.01) -> GCCReport:
    """Fraction of sampled phase points whose trajectory enters the collision set.

    Parameters
    ----------
    mode : {'finite_T', 'aeit'}
        ``finite_T`` uses horizon ``T`` and holds iff every non-aborted sample
        is controlled; ``aeit`` uses ``T_max`` (default ``20 T``) and holds iff
        both nested fractions are at least ``1 - aeit_tol``.
    h : float or ndarray, optional
        Step sizes; default :func:`resolving_steps`.
    direction : {1, -1}
        Forward or backward flow.
    """
    if n_samples < 1000:
        raise ConfigurationError("check_gcc needs at least 1000 samples")
    if mode not in ("finite_T", "aeit"):
        raise ConfigurationError(f"unknown GCC mode {mode!r}")
    grid = omega.grid
    dom = grid.domain if dom is None else dom
    horizon = T if mode == "finite_T" else (T_max if T_max is not None else 20.0 * T)
    x, v = sample_phase_points(grid, n_samples, seed, box)
    steps = resolving_steps(grid, pot, v) if h is None else h
    times, status = first_entry_times(x, v, omega.contains, pot, dom, horizon, steps, vmap, direction)
    ok = status == STATUS_OK
    hit = ok & ~np.isnan(times)

    def frac(sel):
        denom = np.count_nonzero(ok[sel])
        return float(np.count_nonzero(hit[sel]) / denom) if denom else float("nan")

    full = frac(slice(None))
    half = frac(slice(0, n_samples // 2))
    if mode == "finite_T":
        holds = bool(full == 1.0)
    else:
        holds = bool(min(full, half) >= 1.0 - aeit_tol)
    miss = np.flatnonzero(ok & np.isnan(times))[:5]
    return GCCReport(mode, float(horizon), int(n_samples), int(np.count_nonzero(~ok)), full, half, holds,
                     [(x[i], v[i]) for i in miss])


# ---------------------------------------------------------------------------
# Lebeau constants
# ---------------------------------------------------------------------------


class FrequencyField:
    """Continuous (multilinear) interpolant of the collision frequency."""

    def __init__(self, kernel: GridKernel):
        self.kernel = kernel
        self.grid = kernel.grid
        self.values = kernel.freq

    def __call__(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        idx, w = stencil(self.grid, x, v)
        out = np.sum(w * self.values.ravel()[idx], axis=1)
        # no collisions outside the velocity box
        outside = np.any(np.abs(v) > self.grid.v_max, axis=1)
        return np.where(outside, 0.0, out)


def trajectory_average(bf, x: np.ndarray, v: np.ndarray, T: float, pot: PotentialSpec, dom: DomainSpec,
                       grid: PhaseGrid, vmap: VelocityMap = IDENTITY, cells: float = 0.25) -> np.ndarray:
    """``(1/T) int_0^T b(phi_t(x, v)) dt`` by the trapezoid rule along trajectories.

    Each trajectory uses its own step so that it moves about ``cells`` grid
    cells per step.  Aborted trajectories give ``nan``.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    N = len(x)
    h0 = resolving_steps(grid, pot, v, cells=cells, h_min=1e-5, h_max=max(T / 16.0, 1e-5))
    n = np.maximum(1, np.ceil(T / h0 - 1e-12)).astype(np.int64)
    hs = T / n
    if dom.periodic and pot.kind == "zero" and vmap is IDENTITY:
        # straight lines: evaluate all samples at once, in chunks
        out = np.empty(N)
        budget = 2_000_000
        i = 0
        while i < N:
            j = i
            tot = 0
            while j < N and (tot + n[j] + 1 <= budget or j == i):
                tot += n[j] + 1
                j += 1
            counts = n[i:j] + 1
            owner = np.repeat(np.arange(i, j), counts)
            k = np.arange(tot) - np.repeat(np.cumsum(counts) - counts, counts)
            t = k * hs[owner]
            xt = dom.canonicalize(x[owner] + t[:, None] * v[owner])
            b = bf(xt, v[owner])
            wts = np.where((k == 0) | (k == n[owner]), 0.5, 1.0) * hs[owner]
            out[i:j] = np.bincount(owner - i, weights=wts * b, minlength=j - i) / T
            i = j
        return out
    acc = 0.5 * hs * bf(x, v)
    status = np.zeros(N, dtype=np.int64)
    live = np.arange(N)
    k = 0
    while live.size:
        k += 1
        xn, vn, st, _, _ = advance(x[live], v[live], hs[live], pot, dom, vmap)
        x[live], v[live] = xn, vn
        bad = st != STATUS_OK
        status[live[bad]] = st[bad]
        live = live[~bad]
        b = bf(x[live], v[live])
        wt = np.where(n[live] == k, 0.5, 1.0) * hs[live]
        acc[live] += wt * b
        live = live[n[live] > k]
    out = acc / T
    out[status != STATUS_OK] = np.nan
    return out


@dataclass(frozen=True)
class LebeauEstimate:
    """Estimated Lebeau constants at horizon ``T``.

    ``c_minus`` is the smallest trajectory average found (an upper bound for
    the true infimum); ``c_plus`` the largest (a lower bound for the supremum).

    Attributes
    ----------
    T : float
    c_minus, c_plus : float
    argmin, argmax : tuple of ndarray
        Phase points ``(x, v)`` attaining the estimates.
    n_samples : int
    n_aborted : int
    trace : list of dict
        Best values after sampling and after each refinement.
    """

    T: float
    c_minus: float
    c_plus: float
    argmin: tuple
    argmax: tuple
    n_samples: int
    n_aborted: int
    trace: list

    def to_dict(self) -> dict:
        return {
            "T": self.T, "c_minus": self.c_minus, "c_plus": self.c_plus,
            "argmin": {"x": self.argmin[0].tolist(), "v": self.argmin[1].tolist()},
            "argmax": {"x": self.argmax[0].tolist(), "v": self.argmax[1].tolist()},
            "n_samples": self.n_samples, "n_aborted": self.n_aborted, "trace": self.trace,
            "c_minus_is_upper_bound": True,
        }


def _energy_shell_samples(grid: PhaseGrid, pot: PotentialSpec, n: int, seed: int, n_shells: int,
                          v_range: float):
    """Phase points stratified over energy shells.

    Sample ``i`` lies in shell ``i mod n_shells`` of ``H in [min V, min V + v_range^2 / 2]``;
    position, energy within the shell and direction come from independent
    scrambled-Sobol coordinates.
    """
    d = grid.dim
    if d > 2:
        raise ConfigurationError("energy-shell sampling supports d <= 2")
    dom = grid.domain
    xlo, xhi = dom.bounding_box()
    sob = qmc.Sobol(d + 2, scramble=True, seed=seed)
    chunks, got = [], 0
    while got < n:
        u = sob.random(2 ** int(math.ceil(math.log2(max(2 * (n - got), 2)))))
        x = xlo + u[:, :d] * (xhi - xlo)
        if not dom.periodic:
            u = u[dom.contains(x)]
        chunks.append(u)
        got += len(u)
    u = np.concatenate(chunks)[:n]
    x = dom.canonicalize(xlo + u[:, :d] * (xhi - xlo))
    Vx = pot.value(x) if pot.kind != "zero" else np.zeros(n)
    Vmin = float(np.min(Vx))
    shell = np.arange(n) % n_shells
    H = Vmin + 0.5 * v_range ** 2 * (shell + u[:, d]) / n_shells
    speed = np.sqrt(2.0 * np.maximum(H - Vx, 0.0))
    if d == 1:
        direction = np.where(u[:, d + 1] < 0.5, -1.0, 1.0)[:, None]
    else:
        ang = 2.0 * np.pi * u[:, d + 1]
        direction = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    v = np.clip(speed[:, None] * direction, -v_range, v_range)
    return x, v


def lebeau_constant(spec: KernelSpec | GridKernel, pot: PotentialSpec, dom: DomainSpec | None,
                    T: float, grid: PhaseGrid, n_samples: int = 4096, refine: int = 10,
                    seed: int = 0, n_shells: int = 16, v_range: float | None = None,
                    maxfev: int = 120, vmap: VelocityMap = IDENTITY) -> LebeauEstimate:
    """Estimate ``C^-(T)`` and ``C^+(T)``.

    Stratified energy-shell sampling is followed by Nelder–Mead refinement of
    the functional ``(x, v) -> (1/T) int_0^T b(phi_t(x, v)) dt`` from the
    ``refine`` best samples (for both the minimum and the maximum).

    Parameters
    ----------
    v_range : float, optional
        Velocities are sampled with ``|v_i| <= v_range`` (default: the grid box).
    """
    if not T > 0:
        raise ConfigurationError("Lebeau horizon must be positive")
    dom = grid.domain if dom is None else dom
    gk = grid_kernel(spec, grid)
    bf = FrequencyField(gk)
    v_range = grid.v_max if v_range is None else min(float(v_range), grid.v_max)
    x, v = _energy_shell_samples(grid, pot, n_samples, seed, n_shells, v_range)
    J = trajectory_average(bf, x, v, T, pot, dom, grid, vmap)
    ok = ~np.isnan(J)
    if not np.any(ok):
        raise NumericError("every Lebeau trajectory aborted")
    d = grid.dim
    xlo, xhi = dom.bounding_box()

    def unpack(z):
        xz = z[:d].copy()
        vz = np.clip(z[d:], -v_range, v_range)
        if dom.periodic:
            xz = dom.canonicalize(xz[None])[0]
        return xz, vz

    def objective(z, sign):
        xz, vz = unpack(z)
        if not dom.periodic and not dom.contains(xz[None])[0]:
            return 1e300
        val = trajectory_average(bf, xz[None], vz[None], T, pot, dom, grid, vmap)[0]
        if np.isnan(val):
            return 1e300
        return sign * val

    trace = [{"stage": "sampling", "c_minus": float(np.nanmin(J)), "c_plus": float(np.nanmax(J))}]
    best = {}
    for sign, name in ((1.0, "min"), (-1.0, "max")):
        key = np.where(ok, sign * np.nan_to_num(J), np.inf)
        cand = np.argsort(key, kind="stable")[:max(1, min(refine, int(np.count_nonzero(ok))))]
        b_val = sign * J[cand[0]]
        b_pt = (x[cand[0]].copy(), v[cand[0]].copy())
        scale = np.concatenate([0.05 * (xhi - xlo), np.full(d, 0.05 * v_range)])
        for i in cand:
            z0 = np.concatenate([x[i], v[i]])
            simplex = np.vstack([z0] + [z0 + scale[j] * np.eye(2 * d)[j] for j in range(2 * d)])
            res = optimize.minimize(objective, z0, args=(sign,), method="Nelder-Mead",
                                    options={"maxfev": maxfev, "initial_simplex": simplex,
                                             "xatol": 1e-4, "fatol": 1e-7})
            if res.fun < b_val:
                b_val = float(res.fun)
                b_pt = unpack(res.x)
        best[name] = (sign * b_val, b_pt)
    c_minus, c_plus = best["min"][0], best["max"][0]
    trace.append({"stage": "nelder_mead", "c_minus": c_minus, "c_plus": c_plus})
    return LebeauEstimate(float(T), float(c_minus), float(c_plus), best["min"][1], best["max"][1],
                          int(n_samples), int(np.count_nonzero(~ok)), trace)


# ---------------------------------------------------------------------------
# Classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassStructure:
    """Components, their links and the resulting equivalence classes.

    Attributes
    ----------
    omega : OmegaPartition
    flow_edges : list of dict
        Links through the flow with witnesses ``(x, v, time, direction)``.
    kernel_edges : list of dict
        Links through the kernel with witnesses ``(x_cell, v1_cell, v2_cell, rate)``.
    classes : list of list of int
        Classes of collision-set components.
    reach_labels : ndarray of int, shape (n_x, n_v)
        Components of the sampled set of points whose forward trajectory
        reaches the collision set (``-1`` where not reached).
    n_reach_components : int
    reach_classes : list of list of int
        Classes of reachable-set components.
    region_labels : ndarray of int, shape (n_x, n_v)
        Class index of each cell (the regions ``U_j``), ``-1`` outside.
    controlled_fraction : float
        Fraction of phase cells (in the domain) covered by the reachable set.
    inconclusive : bool
        Class counts changed between the half and the full sampling budget.
    """

    omega: OmegaPartition
    flow_edges: list
    kernel_edges: list
    classes: list
    reach_labels: np.ndarray
    n_reach_components: int
    reach_classes: list
    region_labels: np.ndarray
    controlled_fraction: float
    inconclusive: bool

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def reach_class_count(self) -> int:
        return len(self.reach_classes)

    @property
    def counts_agree(self) -> bool:
        return self.class_count == self.reach_class_count

    def region(self, j: int) -> np.ndarray:
        return self.region_labels == j

    def to_dict(self) -> dict:
        return {
            "omega": self.omega.to_dict(),
            "flow_edges": self.flow_edges,
            "kernel_edges": self.kernel_edges,
            "classes": self.classes,
            "class_count": self.class_count,
            "reach_components": self.n_reach_components,
            "reach_classes": self.reach_classes,
            "reach_class_count": self.reach_class_count,
            "counts_agree": self.counts_agree,
            "region_cells": [int(np.count_nonzero(self.region_labels == j)) for j in range(self.reach_class_count)],
            "controlled_fraction": self.controlled_fraction,
            "inconclusive": self.inconclusive,
        }


def _flow_links(omega: OmegaPartition, pot: PotentialSpec, dom: DomainSpec, horizon: float,
                per_component: int, rng: np.random.Generator, vmap: VelocityMap, max_steps: int):
    """Search for flow links between components, in both time directions.

    Returns ``(links, half_keys)`` where ``links`` maps component pairs to
    validated witnesses and ``half_keys`` holds the pairs also found with half
    the trajectories and half the step budget.
    """
    grid = omega.grid
    n = omega.n_components
    found: dict[tuple[int, int], dict] = {}
    half_keys: set[tuple[int, int]] = set()
    if n < 2:
        return found, half_keys
    starts, comps, ranks = [], [], []
    for i in range(n):
        cells = omega.cells(i)
        pick = cells if len(cells) <= per_component else rng.choice(cells, per_component, replace=False)
        starts.append(np.sort(pick))
        comps.append(np.full(len(pick), i))
        ranks.append(np.arange(len(pick)))
    cells = np.concatenate(starts)
    comp = np.concatenate(comps)
    in_half = np.concatenate(ranks) < max(1, per_component // 2)
    ix, iv = np.divmod(cells, grid.n_v)
    x0 = grid.x_points[ix]
    v0 = grid.v_points[iv]
    hs = resolving_steps(grid, pot, v0)
    for direction in (1, -1):
        counter = {"k": 0}

        def visit(idx, x, v, direction=direction, counter=counter):
            counter["k"] += 1
            k = counter["k"]
            lab = omega.label_at(x, v)
            for j in np.flatnonzero((lab >= 0) & (lab != comp[idx])):
                src = int(idx[j])
                key = (int(min(comp[src], lab[j])), int(max(comp[src], lab[j])))
                if in_half[src] and k <= max_steps // 2:
                    half_keys.add(key)
                if key not in found:
                    found[key] = {
                        "components": [int(comp[src]), int(lab[j])],
                        "x": x0[src].tolist(), "v": v0[src].tolist(),
                        "steps": k, "step": float(hs[src]), "time": float(k * hs[src]),
                        "direction": direction,
                    }

        first_entry_times(x0, v0, lambda x, v: np.zeros(len(x), dtype=bool), pot, dom, horizon, hs, vmap,
                          direction, on_visit=visit, max_steps=max_steps)
    # re-validate every witness by re-tracing it
    for key in list(found):
        w = found[key]
        xs, vs, st = flow_points(np.array([w["x"]]), np.array([w["v"]]), w["steps"] * w["step"], pot, dom,
                                 w["step"], vmap, w["direction"])
        w["validated"] = bool(st[0] == STATUS_OK and omega.label_at(xs, vs)[0] == w["components"][1])
        if not w["validated"]:
            del found[key]
            half_keys.discard(key)
    return found, half_keys


def _kernel_links(omega: OmegaPartition):
    """Links through positive kernel values inside a position column."""
    grid = omega.grid
    gk = omega.kernel
    thr = omega.threshold
    found: dict[tuple[int, int], dict] = {}
    multi = [ix for ix in range(grid.n_x) if len(np.unique(omega.labels[ix][omega.labels[ix] >= 0])) >= 2]
    for ix in multi:
        lab = omega.labels[ix]
        present = np.unique(lab[lab >= 0])
        R = gk.rate_matrix(ix)
        for a_i, a in enumerate(present):
            for b in present[a_i + 1:]:
                key = (int(a), int(b))
                if key in found:
                    continue
                sa, sb = np.flatnonzero(lab == a), np.flatnonzero(lab == b)
                sub = np.maximum(R[np.ix_(sa, sb)], R[np.ix_(sb, sa)].T)
                if sub.max() > thr:
                    p, q = np.unravel_index(int(np.argmax(sub)), sub.shape)
                    v1, v2 = int(sa[p]), int(sb[q])
                    rate = max(R[v1, v2], R[v2, v1])
                    # re-validate against a freshly assembled rate matrix
                    R2 = gk.rate_matrix(ix)
                    if max(R2[v1, v2], R2[v2, v1]) > thr:
                        found[key] = {"components": [int(a), int(b)], "x_cell": int(ix),
                                      "v1_cell": v1, "v2_cell": v2, "rate": float(rate), "validated": True}
    return found


def _reachable(omega: OmegaPartition, pot: PotentialSpec, dom: DomainSpec, horizon: float,
               vmap: VelocityMap, max_steps: int):
    """Cells visited by backward trajectories from each component's cell centres.

    Returns
    -------
    full, half : ndarray of bool, shape (n_components, n_x, n_v)
        Visited cells within the full and within half the step budget; each
        component's own cells are included.
    """
    grid = omega.grid
    n = omega.n_components
    full = np.zeros((n,) + grid.shape, dtype=bool)
    half = np.zeros((n,) + grid.shape, dtype=bool)
    for i in range(n):
        full[i] = half[i] = omega.labels == i
    cells = np.flatnonzero(omega.mask.ravel())
    comp = omega.labels.ravel()[cells]
    ix, iv = np.divmod(cells, grid.n_v)
    x0, v0 = grid.x_points[ix], grid.v_points[iv]
    hs = resolving_steps(grid, pot, v0)
    counter = {"k": 0}

    def visit(idx, x, v):
        counter["k"] += 1
        jx, jv = grid.x_cell_index(x), grid.v_cell_index(v)
        ok = (jx >= 0) & (jv >= 0)
        full[comp[idx[ok]], jx[ok], jv[ok]] = True
        if counter["k"] <= max_steps // 2:
            half[comp[idx[ok]], jx[ok], jv[ok]] = True

    first_entry_times(x0, v0, lambda x, v: np.zeros(len(x), dtype=bool), pot, dom, horizon, hs, vmap,
                      -1, on_visit=visit, max_steps=max_steps)
    return full, half


def _classes_from(omega: OmegaPartition, links, reach: np.ndarray):
    """Classes of components and of reachable-set components.

    Reachable sets of single components are connected; two of them lie in the
    same connected component of the union exactly when they overlap.
    """
    n = omega.n_components
    ds = DisjointSet(n)
    for a, b in links:
        ds.union(a, b)
    classes = ds.groups()
    overlap = DisjointSet(n)
    flat = reach.reshape(n, -1)
    for a in range(n):
        for b in range(a + 1, n):
            if np.any(flat[a] & flat[b]):
                overlap.union(a, b)
    comps = overlap.groups()
    home = {a: r for r, members in enumerate(comps) for a in members}
    labels = np.full(omega.grid.shape, -1, dtype=np.int64)
    for r, members in enumerate(comps):
        labels[np.any(reach[members], axis=0)] = r
    ds2 = DisjointSet(len(comps))
    for a, b in links:
        ds2.union(home[a], home[b])
    return classes, labels, len(comps), ds2.groups()


def build_classes(omega: OmegaPartition, spec: KernelSpec | GridKernel | None, pot: PotentialSpec,
                  dom: DomainSpec | None = None, T_max: float = 50.0, per_component: int = 32,
                  max_steps: int = 4000, seed: int = 0, vmap: VelocityMap = IDENTITY) -> ClassStructure:
    """Equivalence classes of collision-set components and their regions.

    Parameters
    ----------
    omega : OmegaPartition
    spec : KernelSpec or GridKernel, optional
        Must match ``omega`` (kept for interface symmetry; ``omega`` carries the kernel).
    T_max : float
        Horizon of the flow-link search and of the reachable-set tracing.
    per_component : int
        Flow-link search trajectories per component and direction.
    max_steps : int
        Step budget per trajectory.
    """
    grid = omega.grid
    dom = grid.domain if dom is None else dom
    if spec is not None and grid_kernel(spec, grid) is not omega.kernel:
        raise ContractError("kernel does not match the collision set")
    rng = np.random.default_rng(seed)
    flow, flow_half = _flow_links(omega, pot, dom, T_max, per_component, rng, vmap, max_steps)
    kern = _kernel_links(omega)
    reach, reach_half = _reachable(omega, pot, dom, T_max, vmap, max_steps)
    inside = grid.inside[:, None] & np.ones(grid.n_v, dtype=bool)[None, :]
    links = sorted(set(flow) | set(kern))
    classes, reach_labels, n_reach, reach_classes = _classes_from(omega, links, reach)
    links_half = sorted(flow_half | set(kern))
    c_half, _, _, r_half = _classes_from(omega, links_half, reach_half)
    inconclusive = (len(c_half) != len(classes)) or (len(r_half) != len(reach_classes))
    region = np.full(grid.shape, -1, dtype=np.int64)
    for j, members in enumerate(reach_classes):
        region[np.isin(reach_labels, members)] = j
    frac = float(np.count_nonzero(np.any(reach, axis=0) & inside) / np.count_nonzero(inside))
    return ClassStructure(
        omega=omega,
        flow_edges=[flow[k] for k in sorted(flow)],
        kernel_edges=[kern[k] for k in sorted(kern)],
        classes=classes,
        reach_labels=reach_labels,
        n_reach_components=n_reach,
        reach_classes=reach_classes,
        region_labels=region,
        controlled_fraction=frac,
        inconclusive=bool(inconclusive),
    )


def check_forward_invariance(classes: ClassStructure, pot: PotentialSpec, t: float, n: int = 2000,
                             seed: int = 0, vmap: VelocityMap = IDENTITY) -> float:
    """Fraction of sampled reachable points leaving their component under ``phi_{-t}``.

    Points are sampled uniformly in reachable cells; images landing outside
    the velocity box are ignored.
    """
    grid = classes.omega.grid
    rng = np.random.default_rng(seed)
    cells = np.flatnonzero(classes.reach_labels.ravel() >= 0)
    pick = rng.choice(cells, n)
    ix, iv = np.divmod(pick, grid.n_v)
    x = grid.x_points[ix] + (rng.random((n, grid.dim)) - 0.5) * grid.dx
    v = grid.v_points[iv] + (rng.random((n, grid.dim)) - 0.5) * grid.dv
    if not grid.domain.periodic:
        keep = grid.domain.contains(x)
        x, v, pick = x[keep], v[keep], pick[keep]
    else:
        x = grid.domain.canonicalize(x)
    h = float(np.min(resolving_steps(grid, pot, v)))
    xt, vt, st = flow_points(x, v, t, pot, grid.domain, h, vmap, direction=-1)
    jx, jv = grid.x_cell_index(xt), grid.v_cell_index(vt)
    ok = (st == STATUS_OK) & (jx >= 0) & (jv >= 0)
    lab0 = classes.reach_labels.ravel()[pick[ok]]
    lab1 = classes.reach_labels[jx[ok], jv[ok]]
    return float(np.mean(lab0 != lab1)) if np.any(ok) else 0.0


# ---------------------------------------------------------------------------
# Stationary states
# ---------------------------------------------------------------------------


def stationary_basis(classes: ClassStructure, pot: PotentialSpec, grid: PhaseGrid | None = None,
                     W: np.ndarray | None = None) -> list[DistributionField]:
    """Orthonormal stationary fields ``1_{U_j} W / |1_{U_j} W|``.

    ``W`` defaults to ``e^{-V} M_h``.

    Raises
    ------
    DegenerateError
        If a region has zero measure.
    """
    grid = classes.omega.grid if grid is None else grid
    W = grid.equilibrium(pot) if W is None else W
    cw = grid.cell_weights
    out = []
    for j in range(classes.reach_class_count):
        ind = classes.region(j)
        norm2 = float(np.sum(cw * W * ind))
        if not norm2 > 0:
            raise DegenerateError(f"class region {j} has zero measure")
        out.append(DistributionField(grid, np.where(ind, W, 0.0) / math.sqrt(norm2),
                                     meta={"class": j, "region_cells": int(np.count_nonzero(ind))}))
    return out


def project_equilibrium(f0, basis: list[DistributionField], classes: ClassStructure | None = None):
    """Projection ``sum_j (int_{U_j} f0 / |1_{U_j} W|) f_j`` onto the stationary basis."""
    if not basis:
        raise ContractError("empty stationary basis")
    grid = basis[0].grid
    vals = as_values(f0, grid)
    cw = grid.cell_weights
    out = np.zeros(grid.shape)
    for fj in basis:
        ind = fj.values > 0
        # f_j has mass |1_U W|, so (mass_U / mass_fj) f_j = (int_U f0 / |1_U W|) f_j
        mass_U = float(np.sum(cw * vals * ind))
        mass_fj = float(np.sum(cw * fj.values))
        out += (mass_U / mass_fj) * fj.values
    return like(f0, out, grid)
