"""Collision kernels, the collision operator, dissipation and BGK.

Convention
----------
``k(x, v, w)`` is the rate density of jumps ``v -> w`` at position ``x``.
The collision operator and the collision frequency are

    C(f)(w) = int k(x, v, w) f(v) dv  -  b(x, w) f(w),     b(x, v) = int k(x, v, w) dw.

Every built-in family has the form ``k(x, v, w) = kt(x, v, w) M(w)`` with a
symmetric ``kt``; on the grid the renormalized discrete Maxwellian ``M_h`` is
used in place of ``M`` so that ``C(rho(x) M_h) = 0`` holds to rounding error.

On a :class:`~linboltz.geometry.PhaseGrid` a kernel is represented as a sum of
terms (:class:`GridKernel`):

* rank-one terms ``a(x) g(v) h(w)`` (``g``/``h`` may depend on ``x``),
* dense terms ``a(x) Q[v, w]``,
* a full table ``R[x, v, w]``.

The dissipation relative to an equilibrium ``W`` (``C(W) = 0``) is

    D_W(f) = sum_x w_x sum_{v,w} w_v^2 k(x, v, w) W(v) (f(v)/W(v) - f(w)/W(w))^2,

which is ``-2 <C(f), f>`` in the space weighted by ``1/W``.  With
``W = e^{-V} M_h`` it is the usual Boltzmann dissipation, with the BGK
equilibrium ``F`` it is the BGK dissipation.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.stats import qmc

from .errors import AssumptionViolation, ConfigurationError, ContractError, DegenerateError
from .fields import as_values, like
from .flow import IDENTITY, VelocityMap
from .geometry import PhaseGrid, PotentialSpec, _as_points, _min_image, maxwellian_density

__all__ = [
    "Profile",
    "KernelSpec",
    "GridKernel",
    "KernelReport",
    "NondegeneracyReport",
    "maxwellian",
    "eval_kernel",
    "collision_frequency",
    "grid_kernel",
    "validate_assumptions",
    "apply_collision",
    "dissipation",
    "inner_form",
    "symmetrized_apply",
    "bgk_equilibrium",
    "bgk_kernel",
    "bgk_apply",
    "bgk_dissipation",
    "check_nondegeneracy",
    "inject_asymmetry",
    "weighted_inner",
    "fermi_dirac",
    "default_kstar",
]

#: Above this many velocity cells the dissipation uses the expanded quadratic form.
DENSE_DISSIPATION_MAX_NV = 1024

#: Elements per batch when forming dense per-position velocity matrices.
_BATCH_ELEMENTS = 4_000_000


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

_SPATIAL_KINDS = {"constant", "plateau", "bump"}
_VELOCITY_KINDS = {"constant", "gauss_plateau", "one_sided", "abs_ramp"}


@dataclass(frozen=True, eq=False)
class Profile:
    """A nonnegative continuous function of position or of velocity.

    Spatial kinds
        ``constant(value)``;
        ``plateau(center, inner, outer, height=1)``: ``height`` within
        distance ``inner`` of ``center``, linear ramp down to zero at
        distance ``outer``;
        ``bump(center, radius, height=1)``: C-infinity bump.
    Velocity kinds
        ``constant(value)``;
        ``gauss_plateau(r, s)``: one on ``|v| <= r``, Gaussian tail of width ``s``;
        ``one_sided(sign, s, axis=0)``: ``1 - exp(-|v_axis|/s)`` where
        ``sign * v_axis > 0`` and zero elsewhere;
        ``abs_ramp(s)``: ``1 - exp(-|v|/s)`` (vanishes only at ``v = 0``).

    Distances on the torus use the minimum-image convention.
    """

    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _SPATIAL_KINDS | _VELOCITY_KINDS:
            raise ConfigurationError(f"unknown profile kind {self.kind!r}")
        p = dict(self.params)
        object.__setattr__(self, "params", p)
        if self.kind == "constant" and p.get("value", 1.0) < 0:
            raise ConfigurationError("constant profile must be nonnegative")
        if self.kind == "plateau":
            if not 0 <= p["inner"] < p["outer"]:
                raise ConfigurationError("plateau requires 0 <= inner < outer")
            if p.get("height", 1.0) < 0:
                raise ConfigurationError("plateau height must be nonnegative")
        if self.kind == "bump" and not p["radius"] > 0:
            raise ConfigurationError("bump radius must be positive")
        if self.kind in ("gauss_plateau",) and not (p["r"] >= 0 and p["s"] > 0):
            raise ConfigurationError("gauss_plateau requires r >= 0, s > 0")
        if self.kind in ("one_sided", "abs_ramp") and not p["s"] > 0:
            raise ConfigurationError(f"{self.kind} requires s > 0")
        if self.kind == "one_sided" and p["sign"] not in (-1, 1):
            raise ConfigurationError("one_sided sign must be +1 or -1")

    # constructors -------------------------------------------------------
    @classmethod
    def constant(cls, value: float = 1.0) -> "Profile":
        return cls("constant", {"value": float(value)})

    @classmethod
    def plateau(cls, center, inner: float, outer: float, height: float = 1.0) -> "Profile":
        return cls("plateau", {"center": list(np.atleast_1d(np.asarray(center, dtype=float))),
                               "inner": float(inner), "outer": float(outer), "height": float(height)})

    @classmethod
    def bump(cls, center, radius: float, height: float = 1.0) -> "Profile":
        return cls("bump", {"center": list(np.atleast_1d(np.asarray(center, dtype=float))),
                            "radius": float(radius), "height": float(height)})

    @classmethod
    def gauss_plateau(cls, r: float = 2.0, s: float = 1.0) -> "Profile":
        return cls("gauss_plateau", {"r": float(r), "s": float(s)})

    @classmethod
    def one_sided(cls, sign: int, s: float = 0.5, axis: int = 0) -> "Profile":
        return cls("one_sided", {"sign": int(sign), "s": float(s), "axis": int(axis)})

    @classmethod
    def abs_ramp(cls, s: float = 0.5) -> "Profile":
        return cls("abs_ramp", {"s": float(s)})

    # evaluation -----------------------------------------------------------
    def _distance(self, pts: np.ndarray, periodic: bool) -> np.ndarray:
        c = np.asarray(self.params["center"], dtype=float)
        if c.size == 1 and pts.shape[1] > 1:
            c = np.full(pts.shape[1], c[0])
        diff = pts - c[None, :]
        if periodic:
            diff = _min_image(diff)
        return np.linalg.norm(diff, axis=1)

    def __call__(self, pts, periodic: bool = False) -> np.ndarray:
        """Evaluate at points of shape ``(N, d)``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        p = self.params
        k = self.kind
        if k == "constant":
            return np.full(len(pts), p.get("value", 1.0))
        if k == "plateau":
            r = self._distance(pts, periodic)
            ramp = (p["outer"] - r) / (p["outer"] - p["inner"])
            return p.get("height", 1.0) * np.clip(ramp, 0.0, 1.0)
        if k == "bump":
            r = self._distance(pts, periodic) / p["radius"]
            out = np.zeros(len(pts))
            m = r < 1
            out[m] = np.exp(1.0 - 1.0 / (1.0 - r[m] ** 2))
            return p.get("height", 1.0) * out
        speed = np.linalg.norm(pts, axis=1)
        if k == "gauss_plateau":
            excess = np.maximum(speed - p["r"], 0.0)
            return np.exp(-0.5 * (excess / p["s"]) ** 2)
        if k == "one_sided":
            comp = pts[:, p.get("axis", 0)]
            return np.where(p["sign"] * comp > 0, 1.0 - np.exp(-np.abs(comp) / p["s"]), 0.0)
        if k == "abs_ramp":
            return 1.0 - np.exp(-speed / p["s"])
        raise ConfigurationError(f"unknown profile kind {k!r}")  # pragma: no cover

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d) -> "Profile":
        if isinstance(d, Profile):
            return d
        if isinstance(d, (int, float)):
            return cls.constant(float(d))
        d = dict(d)
        kind = d.pop("kind")
        ctor = getattr(cls, kind, None)
        if ctor is None or kind not in _SPATIAL_KINDS | _VELOCITY_KINDS:
            raise ConfigurationError(f"unknown profile kind {kind!r}")
        try:
            return ctor(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad parameters for profile {kind!r}: {exc}") from None


def default_kstar(c: float = 0.5, ell: float = 1.0) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Symmetric factor ``1 + c exp(-|v - w|^2 / (2 ell^2))`` used by the factorized family."""

    def kstar(v, w):
        diff = v[:, None, :] - w[None, :, :]
        return 1.0 + c * np.exp(-0.5 * np.sum(diff ** 2, axis=-1) / ell ** 2)

    return kstar


# ---------------------------------------------------------------------------
# Kernel specification
# ---------------------------------------------------------------------------

FAMILIES = ("linear_relaxation", "factorized", "mult_example", "degenerate_v",
            "two_class", "phi_zero", "tabulated")

#: Families whose reduced kernel ``kt`` is symmetric in its velocity arguments.
SYMMETRIC_FAMILIES = {"linear_relaxation", "factorized", "mult_example", "degenerate_v",
                      "two_class", "phi_zero"}


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Declarative description of a collision kernel.

    Use the constructors (:meth:`linear_relaxation`, :meth:`factorized`,
    :meth:`mult_example`, :meth:`degenerate_v`, :meth:`two_class`,
    :meth:`phi_zero`, :meth:`tabulated`) rather than the raw initializer.

    Attributes
    ----------
    family : str
    params : dict
        Profiles and numbers; for ``tabulated`` the array ``kt`` of shape
        ``(n_x, n_v, n_v)`` holding ``kt[x, v, w]`` (rate ``v -> w`` is
        ``kt * M(w)``).
    """

    family: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "params", dict(self.params))

    # constructors -------------------------------------------------------
    @classmethod
    def linear_relaxation(cls, sigma: Profile | float = 1.0) -> "KernelSpec":
        """``k = sigma(x) M(w)``."""
        return cls("linear_relaxation", {"sigma": Profile.from_dict(sigma)})

    @classmethod
    def factorized(cls, sigma: Profile | float = 1.0, kstar: Callable | None = None,
                   lambda0: float | None = None, c: float = 0.5, ell: float = 1.0) -> "KernelSpec":
        """``k = sigma(x) k*(v, w) M(w)`` with ``k*(v, w) + k*(w, v) >= lambda0``.

        ``kstar`` is a vectorized callable ``kstar(v, w) -> (N, M)`` matrix; by
        default ``1 + c exp(-|v - w|^2 / (2 ell^2))`` for which ``lambda0 = 2``.
        """
        custom = kstar is not None
        if kstar is None:
            if c < 0:
                raise ConfigurationError("factorized kernel requires c >= 0")
            kstar = default_kstar(c, ell)
            lambda0 = 2.0 if lambda0 is None else lambda0
        if lambda0 is None or not lambda0 > 0:
            raise ConfigurationError("factorized kernel requires lambda0 > 0")
        return cls("factorized", {"sigma": Profile.from_dict(sigma), "kstar": kstar,
                                  "lambda0": float(lambda0), "c": float(c), "ell": float(ell),
                                  "custom_kstar": custom})

    @classmethod
    def mult_example(cls, alpha: Profile | None = None, psi: Profile | None = None) -> "KernelSpec":
        """``k = [alpha(x) + psi(v) psi(w)] M(w)``.

        Defaults: ``alpha`` is one on ``|x| <= 1/4`` with support in
        ``|x| < 1/3`` (torus, centred at 0), ``psi`` is one on ``[-2, 2]``.
        """
        alpha = Profile.plateau(0.0, 0.25, 1.0 / 3.0) if alpha is None else Profile.from_dict(alpha)
        psi = Profile.gauss_plateau(2.0, 1.0) if psi is None else Profile.from_dict(psi)
        return cls("mult_example", {"alpha": alpha, "psi": psi})

    @classmethod
    def degenerate_v(cls) -> "KernelSpec":
        """Position-independent ``k(x, v, w) = M(v) M(w)^2``; ``b(v) = M(v) int M^2``."""
        return cls("degenerate_v", {})

    @classmethod
    def two_class(cls, alpha: Profile | None = None, beta: Profile | None = None,
                  phi: Profile | None = None, Psi: Profile | None = None) -> "KernelSpec":
        """``k = [alpha(x) phi(v) phi(w) + beta(x) Psi(v) Psi(w)] M(w)``.

        Defaults: ``alpha`` supported in ``(1/2, 1)``, ``beta`` in ``(0, 1/2)``,
        ``phi`` supported on ``v < 0`` and ``Psi`` on ``v > 0``.
        """
        alpha = Profile.plateau(0.75, 0.125, 0.25) if alpha is None else Profile.from_dict(alpha)
        beta = Profile.plateau(0.25, 0.125, 0.25) if beta is None else Profile.from_dict(beta)
        phi = Profile.one_sided(-1, 0.5) if phi is None else Profile.from_dict(phi)
        Psi = Profile.one_sided(+1, 0.5) if Psi is None else Profile.from_dict(Psi)
        return cls("two_class", {"alpha": alpha, "beta": beta, "phi": phi, "Psi": Psi})

    @classmethod
    def phi_zero(cls, phi: Profile | None = None) -> "KernelSpec":
        """``k = phi(v) phi(w) M(w)`` with ``phi(0) = 0`` and ``phi > 0`` elsewhere."""
        phi = Profile.abs_ramp(0.5) if phi is None else Profile.from_dict(phi)
        return cls("phi_zero", {"phi": phi})

    @classmethod
    def tabulated(cls, kt: np.ndarray) -> "KernelSpec":
        """Kernel given by a table ``kt[x_cell, v_cell, w_cell]``; rate ``v -> w`` is ``kt M(w)``."""
        kt = np.array(kt, dtype=float)
        if kt.ndim != 3 or kt.shape[1] != kt.shape[2]:
            raise ConfigurationError("tabulated kernel must have shape (n_x, n_v, n_v)")
        if not np.all(np.isfinite(kt)):
            raise ConfigurationError("tabulated kernel contains non-finite values")
        kt.setflags(write=False)
        return cls("tabulated", {"kt": kt})

    @classmethod
    def from_table_file(cls, path: str | Path, n_x: int | None = None, n_v: int | None = None) -> "KernelSpec":
        """Load a tabulated kernel from ``.npy`` or from CSV rows ``x_cell, v_cell, w_cell, value``.

        Missing CSV entries are zero; ``n_x``/``n_v`` default to the largest
        index present plus one.
        """
        path = Path(path)
        if path.suffix == ".npy":
            return cls.tabulated(np.load(path))
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3])))
                except (ValueError, IndexError):
                    raise ConfigurationError(f"bad kernel table row {rec!r} in {path}") from None
        if not rows:
            raise ConfigurationError(f"empty kernel table {path}")
        arr = np.array(rows)
        nx = int(arr[:, 0].max()) + 1 if n_x is None else n_x
        nv = int(arr[:, 1:3].max()) + 1 if n_v is None else n_v
        kt = np.zeros((nx, nv, nv))
        kt[arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int)] = arr[:, 3]
        return cls.tabulated(kt)

    # metadata -------------------------------------------------------------
    @property
    def symmetric(self) -> bool:
        """True when the family guarantees a symmetric reduced kernel."""
        return self.family in SYMMETRIC_FAMILIES

    @property
    def spatially_factorized(self) -> bool:
        """True when the collision set has the form ``omega_x x (all velocities)``."""
        return self.family in ("linear_relaxation", "factorized")

    def to_dict(self) -> dict:
        out = {"family": self.family}
        for key, val in self.params.items():
            if isinstance(val, Profile):
                out[key] = val.to_dict()
            elif key == "kt":
                out[key] = {"shape": list(val.shape), "sum": float(val.sum())}
            elif callable(val):
                continue
            else:
                out[key] = val
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "KernelSpec":
        d = dict(d)
        family = d.pop("family", None)
        if family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {family!r}")
        if family == "tabulated":
            if "path" not in d:
                raise ConfigurationError("tabulated kernel requires 'path'")
            return cls.from_table_file(d["path"])
        if family == "factorized":
            d.pop("custom_kstar", None)
        try:
            return getattr(cls, family)(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad parameters for kernel {family!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Pointwise evaluation
# ---------------------------------------------------------------------------


def maxwellian(v, d: int) -> np.ndarray | float:
    """Maxwellian ``(2 pi)^{-d/2} exp(-|v|^2 / 2)``."""
    val = maxwellian_density(v, d)
    return float(val[0]) if np.ndim(v) == 0 or (np.ndim(v) == 1 and d > 1) else val


def eval_kernel(spec: KernelSpec, x, v, w, grid: PhaseGrid | None = None) -> np.ndarray | float:
    """Rate density ``k(x, v, w)`` of jumps ``v -> w`` at ``x``.

    Uses the exact Maxwellian.  ``x``, ``v``, ``w`` are single points or
    equally long arrays of points.  Tabulated kernels need ``grid`` to locate
    cells.

    Raises
    ------
    AssumptionViolation
        If a tabulated value is negative.
    """
    d = grid.dim if grid is not None else (1 if np.ndim(v) == 0 else np.shape(v)[-1])
    single = np.ndim(v) == 0 or (np.ndim(v) == 1 and d > 1)
    X, Vv, Ww = _as_points(x, d), _as_points(v, d), _as_points(w, d)
    n = max(len(X), len(Vv), len(Ww))
    X, Vv, Ww = (np.broadcast_to(a, (n, d)) for a in (X, Vv, Ww))
    periodic = grid.domain.periodic if grid is not None else True
    Mw, Mv = maxwellian_density(Ww, d), maxwellian_density(Vv, d)
    p = spec.params
    fam = spec.family
    if fam == "linear_relaxation":
        val = p["sigma"](X, periodic) * Mw
    elif fam == "factorized":
        ks = np.array([p["kstar"](Vv[i:i + 1], Ww[i:i + 1])[0, 0] for i in range(n)])
        val = p["sigma"](X, periodic) * ks * Mw
    elif fam == "mult_example":
        val = (p["alpha"](X, periodic) + p["psi"](Vv) * p["psi"](Ww)) * Mw
    elif fam == "degenerate_v":
        val = Mv * Mw ** 2
    elif fam == "two_class":
        val = (p["alpha"](X, periodic) * p["phi"](Vv) * p["phi"](Ww)
               + p["beta"](X, periodic) * p["Psi"](Vv) * p["Psi"](Ww)) * Mw
    elif fam == "phi_zero":
        val = p["phi"](Vv) * p["phi"](Ww) * Mw
    else:
        if grid is None:
            raise ContractError("tabulated kernels need a grid to be evaluated")
        ix, iv, iw = grid.x_cell_index(X), grid.v_cell_index(Vv), grid.v_cell_index(Ww)
        if np.any(ix < 0) or np.any(iv < 0) or np.any(iw < 0):
            raise ContractError("point outside the tabulated kernel's grid")
        kt = p["kt"][ix, iv, iw]
        if np.any(kt < 0):
            raise AssumptionViolation("tabulated kernel has a negative value (positivity violated)")
        val = kt * Mw
    return float(val[0]) if single and n == 1 else val


# ---------------------------------------------------------------------------
# Grid representation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RankOneTerm:
    """Rate ``coef(x) g(v) h(w)``; ``g``/``h`` have shape ``(n_v,)`` or ``(n_x, n_v)``."""

    coef: np.ndarray
    g: np.ndarray
    h: np.ndarray


@dataclass(frozen=True, eq=False)
class DenseTerm:
    """Rate ``coef(x) Q[v, w]``."""

    coef: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True, eq=False)
class TableTerm:
    """Rate ``R[x, v, w]``."""

    R: np.ndarray


def _row(arr: np.ndarray, ix):
    return arr if arr.ndim == 1 else arr[ix]


class GridKernel:
    """A collision kernel materialized on a phase grid.

    Parameters
    ----------
    grid : PhaseGrid
    terms : list of RankOneTerm, DenseTerm or TableTerm
    name : str
    """

    def __init__(self, grid: PhaseGrid, terms, name: str = "kernel"):
        self.grid = grid
        self.terms = list(terms)
        self.name = name
        self._dense_cache: dict[int, np.ndarray] = {}
        n_x, n_v = grid.shape
        for t in self.terms:
            if isinstance(t, RankOneTerm):
                ok = t.coef.shape == (n_x,) and all(a.shape in ((n_v,), (n_x, n_v)) for a in (t.g, t.h))
            elif isinstance(t, DenseTerm):
                ok = t.coef.shape == (n_x,) and t.Q.shape == (n_v, n_v)
            else:
                ok = t.R.shape == (n_x, n_v, n_v)
            if not ok:
                raise ContractError("kernel term shapes do not match the grid")
        self.freq = self._frequency()
        self._group_of, self._group_rep = self._profile_groups()

    # basic operators ------------------------------------------------------
    def _frequency(self) -> np.ndarray:
        g = self.grid
        b = np.zeros(g.shape)
        for t in self.terms:
            if isinstance(t, RankOneTerm):
                hs = g.w_v * (t.h.sum(axis=-1) if t.h.ndim == 1 else t.h.sum(axis=1)[:, None])
                b += t.coef[:, None] * t.g * hs
            elif isinstance(t, DenseTerm):
                b += t.coef[:, None] * (g.w_v * t.Q.sum(axis=1))[None, :]
            else:
                b += g.w_v * t.R.sum(axis=2)
        return b

    def gain(self, f: np.ndarray) -> np.ndarray:
        """``sum_v w_v k(x, v, w) f(x, v)``."""
        g = self.grid
        out = np.zeros(g.shape)
        for t in self.terms:
            if isinstance(t, RankOneTerm):
                s = g.w_v * np.sum(f * t.g, axis=1)
                out += (t.coef * s)[:, None] * t.h
            elif isinstance(t, DenseTerm):
                out += t.coef[:, None] * (g.w_v * (f @ t.Q))
            else:
                out += g.w_v * np.einsum("xv,xvw->xw", f, t.R)
        return out

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Collision operator ``gain(f) - b f``."""
        return self.gain(f) - self.freq * f

    # profile groups ---------------------------------------------------------
    def _profile_groups(self):
        """Group positions whose velocity-space kernel is identical."""
        n_x = self.grid.n_x
        feats = []
        for t in self.terms:
            if isinstance(t, TableTerm):
                return np.arange(n_x), np.arange(n_x)
            feats.append(t.coef[:, None])
            if isinstance(t, RankOneTerm):
                for a in (t.g, t.h):
                    if a.ndim == 2:
                        feats.append(a)
        if not feats:
            return np.zeros(n_x, dtype=np.int64), np.zeros(1, dtype=np.int64)
        F = np.ascontiguousarray(np.hstack(feats))
        _, rep, inv = np.unique(F, axis=0, return_index=True, return_inverse=True)
        return inv.ravel().astype(np.int64), rep.astype(np.int64)

    @property
    def n_groups(self) -> int:
        return len(self._group_rep)

    @property
    def group_of(self) -> np.ndarray:
        """Group index of every position cell."""
        return self._group_of

    def group_members(self, gid: int) -> np.ndarray:
        return np.flatnonzero(self._group_of == gid)

    def rate_matrix(self, ix: int) -> np.ndarray:
        """Dense ``(n_v, n_v)`` matrix of rates ``v -> w`` at position cell ``ix``."""
        gid = int(self._group_of[ix])
        if gid in self._dense_cache:
            return self._dense_cache[gid]
        n_v = self.grid.n_v
        R = np.zeros((n_v, n_v))
        for t in self.terms:
            if isinstance(t, RankOneTerm):
                R += t.coef[ix] * np.outer(_row(t.g, ix), _row(t.h, ix))
            elif isinstance(t, DenseTerm):
                R += t.coef[ix] * t.Q
            else:
                R += t.R[ix]
        if len(self._dense_cache) * n_v * n_v < 8 * _BATCH_ELEMENTS:
            self._dense_cache[gid] = R
        return R

    def iter_groups(self):
        """Yield ``(rate_matrix, member_indices)`` for every profile group."""
        order = np.argsort(self._group_of, kind="stable")
        bounds = np.searchsorted(self._group_of[order], np.arange(self.n_groups + 1))
        for gid in range(self.n_groups):
            members = order[bounds[gid]:bounds[gid + 1]]
            yield self.rate_matrix(int(self._group_rep[gid])), members

    def generator(self, ix: int) -> np.ndarray:
        """Matrix ``L`` with ``(L f)_w = C(f)(w)`` at position cell ``ix``."""
        R = self.rate_matrix(ix)
        return self.grid.w_v * R.T - np.diag(self.freq[ix])

    # derived quantities -------------------------------------------------
    def frequency_at(self, x, v) -> np.ndarray:
        """Collision frequency at arbitrary points by cell lookup (zero outside the grid)."""
        g = self.grid
        ix, iv = np.broadcast_arrays(g.x_cell_index(x), g.v_cell_index(v))
        ok = (ix >= 0) & (iv >= 0)
        out = np.zeros(len(ix))
        out[ok] = self.freq[ix[ok], iv[ok]]
        return out

    def symmetrized(self) -> "GridKernel":
        """Kernel with reduced part ``(kt + kt^T)/2``; rates ``kbar(v, w) M_h(w)``."""
        M = self.grid.M_h
        if all(isinstance(t, RankOneTerm) and t.g.ndim == 1 and t.h.ndim == 1 for t in self.terms):
            # kt = g(v) h(w) / M(w); symmetrize term by term
            terms = []
            for t in self.terms:
                hm = t.h / M
                terms.append(RankOneTerm(0.5 * t.coef, t.g, hm * M))
                terms.append(RankOneTerm(0.5 * t.coef, hm, t.g * M))
            return GridKernel(self.grid, terms, self.name + "_sym")
        n_x, n_v = self.grid.shape
        R = np.empty((n_x, n_v, n_v))
        for Rg, members in self.iter_groups():
            kt = Rg / M[None, :]
            R[members] = (0.5 * (kt + kt.T) * M[None, :])[None]
        return GridKernel(self.grid, [TableTerm(R)], self.name + "_sym")

    def reduced_sup(self) -> float:
        """``max kbar`` with ``kbar = (kt + kt^T)/2`` and ``kt = k / M_h(w)``."""
        M = self.grid.M_h
        best = 0.0
        for Rg, _ in self.iter_groups():
            kt = Rg / M[None, :]
            best = max(best, float(np.max(0.5 * (kt + kt.T))))
        return best


def _spatial(profile: Profile, grid: PhaseGrid) -> np.ndarray:
    vals = profile(grid.x_points, grid.domain.periodic)
    return np.where(grid.inside, vals, 0.0)


def build_grid_kernel(spec: KernelSpec, grid: PhaseGrid) -> GridKernel:
    """Materialize ``spec`` on ``grid`` (without caching)."""
    p = spec.params
    M = grid.M_h
    V = grid.v_points
    ones = np.ones(grid.n_v)
    fam = spec.family
    if fam == "linear_relaxation":
        terms = [RankOneTerm(_spatial(p["sigma"], grid), ones, M)]
    elif fam == "factorized":
        Q = p["kstar"](V, V) * M[None, :]
        if np.any(Q < 0):
            raise AssumptionViolation("factorized kernel k* takes negative values")
        terms = [DenseTerm(_spatial(p["sigma"], grid), Q)]
    elif fam == "mult_example":
        psi = p["psi"](V)
        terms = [RankOneTerm(_spatial(p["alpha"], grid), ones, M),
                 RankOneTerm(np.where(grid.inside, 1.0, 0.0), psi, psi * M)]
    elif fam == "degenerate_v":
        terms = [RankOneTerm(np.where(grid.inside, 1.0, 0.0), M, M * M)]
    elif fam == "two_class":
        phi, Psi = p["phi"](V), p["Psi"](V)
        terms = [RankOneTerm(_spatial(p["alpha"], grid), phi, phi * M),
                 RankOneTerm(_spatial(p["beta"], grid), Psi, Psi * M)]
    elif fam == "phi_zero":
        phi = p["phi"](V)
        terms = [RankOneTerm(np.where(grid.inside, 1.0, 0.0), phi, phi * M)]
    else:
        kt = p["kt"]
        if kt.shape != (grid.n_x, grid.n_v, grid.n_v):
            raise ConfigurationError(
                f"tabulated kernel shape {kt.shape} does not match grid {(grid.n_x, grid.n_v, grid.n_v)}"
            )
        R = kt * M[None, None, :] * np.where(grid.inside, 1.0, 0.0)[:, None, None]
        terms = [TableTerm(R)]
    return GridKernel(grid, terms, fam)


def grid_kernel(spec: KernelSpec | GridKernel, grid: PhaseGrid) -> GridKernel:
    """Grid representation of ``spec`` (cached on the grid)."""
    if isinstance(spec, GridKernel):
        if spec.grid is not grid:
            raise ContractError("grid kernel belongs to a different grid")
        return spec
    key = ("kernel", id(spec))
    hit = grid._cache.get(key)
    if hit is None or hit[0] is not spec:
        hit = (spec, build_grid_kernel(spec, grid))
        grid._cache[key] = hit
    return hit[1]


def collision_frequency(spec: KernelSpec | GridKernel, x, v, grid: PhaseGrid) -> np.ndarray | float:
    """Collision frequency ``b(x, v) = sum_w w_v k(x, v, w)`` at grid cells containing the points."""
    gk = grid_kernel(spec, grid)
    single = np.ndim(v) == 0 or (np.ndim(v) == 1 and grid.dim > 1)
    out = gk.frequency_at(x, v)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Weighted products, collision operator and dissipation
# ---------------------------------------------------------------------------


def _safe_ratio(f: np.ndarray, W: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    np.divide(f, W, out=out, where=W > 0)
    return out


def weighted_inner(f: np.ndarray, g: np.ndarray, W: np.ndarray, grid: PhaseGrid) -> float:
    """``sum w f g / W`` over cells with ``W > 0``."""
    return float(np.sum(grid.cell_weights * f * _safe_ratio(g, W)))


def _equilibrium(grid: PhaseGrid, pot: PotentialSpec | None, W: np.ndarray | None) -> np.ndarray:
    if W is not None:
        return W
    return grid.equilibrium(pot if pot is not None else PotentialSpec.zero(grid.dim))


def apply_collision(spec: KernelSpec | GridKernel, f, grid: PhaseGrid):
    """Collision operator ``C(f)`` (gain minus loss with the same quadrature).

    Returns an array, or a field when ``f`` is a field.
    """
    vals = as_values(f, grid)
    return like(f, grid_kernel(spec, grid).apply(vals), grid)


def inner_form(spec: KernelSpec | GridKernel, f, grid: PhaseGrid, pot: PotentialSpec | None = None,
               W: np.ndarray | None = None) -> float:
    """``-2 <C(f), f>`` in the space weighted by ``1 / W`` (default ``W = e^{-V} M_h``)."""
    vals = as_values(f, grid)
    W = _equilibrium(grid, pot, W)
    return -2.0 * weighted_inner(grid_kernel(spec, grid).apply(vals), vals, W, grid)


def _dissipation_double(gk: GridKernel, f: np.ndarray, W: np.ndarray) -> float:
    grid = gk.grid
    u = _safe_ratio(f, W)
    n_v = grid.n_v
    per_x = np.zeros(grid.n_x)
    chunk = max(1, _BATCH_ELEMENTS // (n_v * n_v))
    for R, members in gk.iter_groups():
        members = members[grid.inside[members]]
        for s in range(0, len(members), chunk):
            idx = members[s:s + chunk]
            U = u[idx]
            diff2 = (U[:, :, None] - U[:, None, :]) ** 2
            per_x[idx] = np.einsum("vw,xv,xvw->x", R, W[idx], diff2)
    return float(grid.w_x * grid.w_v ** 2 * np.sum(per_x))


def _dissipation_expanded(gk: GridKernel, f: np.ndarray, W: np.ndarray) -> float:
    grid = gk.grid
    u = _safe_ratio(f, W)
    cw = grid.cell_weights
    val = np.sum(cw * (gk.freq * f * u - 2.0 * u * gk.gain(f) + u * u * gk.gain(W)))
    return float(max(val, 0.0))


def dissipation(spec: KernelSpec | GridKernel, f, grid: PhaseGrid, pot: PotentialSpec | None = None,
                W: np.ndarray | None = None, method: str = "auto", return_inner: bool = False):
    """Dissipation ``D(f)`` as the symmetric double sum.

    Parameters
    ----------
    spec : KernelSpec or GridKernel
    f : DistributionField or ndarray
    grid : PhaseGrid
    pot : PotentialSpec, optional
        Determines the equilibrium ``W = e^{-V} M_h`` (zero potential by default).
    W : ndarray, optional
        Explicit equilibrium (overrides ``pot``), e.g. a BGK equilibrium.
    method : {'auto', 'double', 'expanded'}
        ``double`` is the manifestly nonnegative double sum; ``expanded`` uses
        two gain evaluations (for very large velocity grids); ``auto`` picks
        ``double`` up to ``DENSE_DISSIPATION_MAX_NV`` velocity cells.
    return_inner : bool
        Also return the cross-check ``-2 <C(f), f>``.
    """
    vals = as_values(f, grid)
    gk = grid_kernel(spec, grid)
    W = _equilibrium(grid, pot, W)
    if method == "auto":
        method = "double" if grid.n_v <= DENSE_DISSIPATION_MAX_NV else "expanded"
    if method == "double":
        D = _dissipation_double(gk, vals, W)
    elif method == "expanded":
        D = _dissipation_expanded(gk, vals, W)
    else:
        raise ConfigurationError(f"unknown dissipation method {method!r}")
    if return_inner:
        return D, -2.0 * weighted_inner(gk.apply(vals), vals, W, grid)
    return D


def symmetrized_apply(spec: KernelSpec | GridKernel, f, grid: PhaseGrid, cap: float = 1e12):
    """Collision operator built from the symmetrized reduced kernel.

    Warns (``RuntimeWarning``) when the reduced kernel's sup exceeds ``cap``,
    in which case the coercivity bound ``sup(kbar) D(f) >= |C_sym(f)|^2`` is
    not informative.
    """
    vals = as_values(f, grid)
    gk = grid_kernel(spec, grid)
    if gk.reduced_sup() > cap:
        warnings.warn("reduced kernel is not bounded on this grid; symmetrized bound inapplicable",
                      RuntimeWarning, stacklevel=2)
    key = ("sym", id(gk))
    hit = grid._cache.get(key)
    if hit is None or hit[0] is not gk:
        hit = (gk, gk.symmetrized())
        grid._cache[key] = hit
    return like(f, hit[1].apply(vals), grid)


def inject_asymmetry(spec: KernelSpec, grid: PhaseGrid, eps: float, x_cell: int = 0,
                     v_cell: int = 0, w_cell: int = 1) -> KernelSpec:
    """Tabulated copy of ``spec`` with one extra jump rate ``v_cell -> w_cell``.

    The added rate is ``eps / (w_v M_h(v))`` so that the discrete balance
    residual ``|C(M_h)|`` equals ``eps`` at ``(x_cell, w_cell)`` and
    ``(x_cell, v_cell)``.
    """
    gk = grid_kernel(spec, grid)
    M = grid.M_h
    kt = np.empty((grid.n_x, grid.n_v, grid.n_v))
    for R, members in gk.iter_groups():
        kt[members] = (R / M[None, :])[None]
    kt[x_cell, v_cell, w_cell] += eps / (grid.w_v * M[v_cell] * M[w_cell])
    return KernelSpec.tabulated(kt)


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelReport:
    """Results of :func:`validate_assumptions`.

    Attributes
    ----------
    family : str
    min_value : float
        Smallest rate on the grid (positivity requires ``>= 0``).
    a2_residual : float
        ``max |C(M_h)|`` over the grid.
    a3_value : float
        ``sup_x sum_{v,w} w_v^2 k^2 M_h(v) / M_h(w)``.
    gain_bound : float
        ``sqrt(a3_value)``, a bound on the gain operator norm.
    a3prime_value : float
        ``sup_x sum w_v^2 k(v,w)^2 M_h(v)/M_h(w) (phi(w)/phi(v) - 1)^2``
        with ``phi = lambda exp(H / 4)``.
    a3prime_lambda : float
    a3prime_dominates : bool
        Whether ``b <= phi`` on the grid.
    reduced_sup : float
        ``max kbar``.
    reduced_asymmetry : float
        ``max |kt - kt^T|``.
    lambda0_observed : float or None
        For the factorized family: ``min (k* + k*^T)``.
    tol_a2 : float
    """

    family: str
    min_value: float
    a2_residual: float
    a3_value: float
    gain_bound: float
    a3prime_value: float
    a3prime_lambda: float
    a3prime_dominates: bool
    reduced_sup: float
    reduced_asymmetry: float
    lambda0_observed: float | None
    tol_a2: float

    @property
    def a1_pass(self) -> bool:
        return self.min_value >= 0

    @property
    def a2_pass(self) -> bool:
        return self.a2_residual <= self.tol_a2

    @property
    def a3_pass(self) -> bool:
        return bool(np.isfinite(self.a3_value))

    @property
    def a3prime_pass(self) -> bool:
        return bool(np.isfinite(self.a3prime_value) and self.a3prime_dominates)

    @property
    def passed(self) -> bool:
        return self.a1_pass and self.a2_pass and self.a3_pass

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "A1": {"min_value": self.min_value, "pass": self.a1_pass},
            "A2": {"residual": self.a2_residual, "tolerance": self.tol_a2, "pass": self.a2_pass},
            "A3": {"value": self.a3_value, "pass": self.a3_pass},
            "A3prime": {"value": self.a3prime_value, "lambda": self.a3prime_lambda,
                        "theta": "lambda*exp(t/4)", "dominates_frequency": self.a3prime_dominates,
                        "pass": self.a3prime_pass},
            "gain_bound": self.gain_bound,
            "reduced_kernel": {"sup": self.reduced_sup, "asymmetry": self.reduced_asymmetry},
            "lambda0_observed": self.lambda0_observed,
            "pass": self.passed,
        }


def validate_assumptions(spec: KernelSpec | GridKernel, grid: PhaseGrid, pot: PotentialSpec | None = None,
                         tol_a2: float = 1e-10) -> KernelReport:
    """Check positivity, equilibrium balance, the square-integrability bound and its
    weighted strengthening on the grid.

    Raises
    ------
    AssumptionViolation
        If a negative rate is found.
    """
    gk = grid_kernel(spec, grid)
    pot = pot if pot is not None else PotentialSpec.zero(grid.dim)
    M = grid.M_h
    w = grid.w_v
    inside = grid.inside
    # A2: C(M_h) = 0 at every position
    res = gk.apply(np.repeat(M[None, :], grid.n_x, axis=0))
    a2 = float(np.max(np.abs(res[inside])))
    # phi = lambda exp(H/4) dominating b
    Vx = grid.potential_values(pot)
    H = 0.5 * np.sum(grid.v_points ** 2, axis=1)[None, :] + Vx[:, None]
    lam = max(1.0, float(np.max((gk.freq * np.exp(-H / 4.0))[inside])))
    dominates = bool(np.all(gk.freq[inside] <= lam * np.exp(H[inside] / 4.0) * (1 + 1e-12)))
    ratio_M = M[:, None] / M[None, :]
    min_val, a3, a3p, kbar_sup, asym = np.inf, 0.0, 0.0, 0.0, 0.0
    for R, members in gk.iter_groups():
        members = members[inside[members]]
        if len(members) == 0:
            continue
        min_val = min(min_val, float(R.min()))
        a3 = max(a3, float(w * w * np.sum(R * R * ratio_M)))
        kt = R / M[None, :]
        kbar_sup = max(kbar_sup, float(np.max(0.5 * (kt + kt.T))))
        asym = max(asym, float(np.max(np.abs(kt - kt.T))))
        # (phi(w)/phi(v) - 1)^2 depends on x only through H, which shifts both
        # energies by V(x); the ratio exp((|w|^2 - |v|^2)/8) is x-independent.
        e = 0.5 * np.sum(grid.v_points ** 2, axis=1)
        fac = (np.exp((e[None, :] - e[:, None]) / 4.0) - 1.0) ** 2
        a3p = max(a3p, float(w * w * np.sum(R * R * ratio_M * fac)))
    if min_val < 0:
        raise AssumptionViolation(f"kernel takes the negative value {min_val:.3e} on the grid")
    lam0 = None
    if isinstance(spec, KernelSpec) and spec.family == "factorized":
        ks = spec.params["kstar"](grid.v_points, grid.v_points)
        lam0 = float(np.min(ks + ks.T))
    fam = spec.family if isinstance(spec, KernelSpec) else gk.name
    return KernelReport(
        family=fam,
        min_value=float(min_val),
        a2_residual=a2,
        a3_value=a3,
        gain_bound=math.sqrt(a3),
        a3prime_value=a3p,
        a3prime_lambda=lam,
        a3prime_dominates=dominates,
        reduced_sup=kbar_sup,
        reduced_asymmetry=asym,
        lambda0_observed=lam0,
        tol_a2=tol_a2,
    )


# ---------------------------------------------------------------------------
# Linearized BGK
# ---------------------------------------------------------------------------


def bgk_equilibrium(grid: PhaseGrid, pot: PotentialSpec, phi: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """``F(x, v) = phi(H(x, v))`` on the grid (zero outside the domain)."""
    Vx = grid.potential_values(pot)
    H = 0.5 * np.sum(grid.v_points ** 2, axis=1)[None, :] + Vx[:, None]
    F = np.asarray(phi(H), dtype=float)
    return np.where(grid.inside[:, None], F, 0.0)


def fermi_dirac(mu: float = 0.0, theta: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Energy profile ``1 / (1 + exp((E - mu) / theta))``."""

    def phi(E):
        return 1.0 / (1.0 + np.exp((np.asarray(E) - mu) / theta))

    return phi


def bgk_kernel(sigma: Profile | np.ndarray | float, F: np.ndarray, grid: PhaseGrid) -> GridKernel:
    """Grid kernel of the linearized BGK operator ``sigma (rho_f / rho_F F - f)``.

    Raises
    ------
    DegenerateError
        If ``rho_F = sum_v w_v F`` vanishes at a domain cell.
    """
    F = np.asarray(F, dtype=float)
    if F.shape != grid.shape:
        raise ContractError("BGK equilibrium has the wrong shape")
    if np.any(F[grid.inside] <= 0):
        raise DegenerateError("BGK equilibrium must be positive on the domain")
    rho = grid.w_v * F.sum(axis=1)
    if np.any(rho[grid.inside] <= 0):
        raise DegenerateError("BGK equilibrium has zero density at some position")
    if isinstance(sigma, (int, float)):
        sigma = Profile.constant(float(sigma))
    sig = _spatial(sigma, grid) if isinstance(sigma, Profile) else np.where(grid.inside, sigma, 0.0)
    target = _safe_ratio(F, np.where(rho > 0, rho, 1.0)[:, None])
    return GridKernel(grid, [RankOneTerm(sig, np.ones(grid.n_v), target)], "bgk")


def bgk_apply(sigma, F: np.ndarray, f, grid: PhaseGrid):
    """``sigma(x) (rho_f / rho_F F - f)``."""
    gk = bgk_kernel(sigma, F, grid)
    return like(f, gk.apply(as_values(f, grid)), grid)


def bgk_dissipation(sigma, F: np.ndarray, f, grid: PhaseGrid, method: str = "auto") -> float:
    """BGK dissipation ``sum_x w_x sigma / rho_F sum_{v,w} w_v^2 F F' (f/F - f'/F')^2``."""
    gk = bgk_kernel(sigma, F, grid)
    return dissipation(gk, f, grid, W=F, method=method)


# ---------------------------------------------------------------------------
# Non-degeneracy of the velocity map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NondegeneracyReport:
    """Worst-direction measures ``Leb{v in box : |a(v).xi| <= eps}``.

    Attributes
    ----------
    eps : ndarray
    measure : ndarray
        Worst (largest) measure over the sampled directions, per ``eps``.
    box_volume : float
    gamma : float
        Fitted exponent of ``measure ~ C eps^gamma`` (nan if not fittable).
    degenerate : bool
    """

    eps: np.ndarray
    measure: np.ndarray
    box_volume: float
    gamma: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "measure": self.measure.tolist(),
                "box_volume": self.box_volume, "gamma": self.gamma, "degenerate": self.degenerate}


def check_nondegeneracy(vmap: VelocityMap | Callable = IDENTITY, eps=None, n_samples: int = 2 ** 15,
                        d: int = 1, v_box: float = 1.0, n_directions: int = 64,
                        seed: int = 0) -> NondegeneracyReport:
    """Monte Carlo (scrambled Sobol) estimate of the non-degeneracy measure.

    Parameters
    ----------
    vmap : VelocityMap or callable
        The velocity map ``a`` (``a(v)`` for arrays of shape ``(N, d)``).
    eps : float or array, optional
        Thresholds; default ``logspace(-2.5, -0.5, 9)``.
    n_samples : int
        Sobol points in the box ``[-v_box, v_box]^d``.
    d : int
    n_directions : int
        Directions sampled on the sphere (both signs in 1-D).

    Returns
    -------
    NondegeneracyReport
        The map is flagged degenerate when the worst measure does not vanish
        as ``eps -> 0`` (some measure at the smallest ``eps`` exceeds half the
        box) or jumps faster than any power law between consecutive ``eps``.
    """
    a = vmap.velocity if isinstance(vmap, VelocityMap) else vmap
    eps_arr = np.logspace(-2.5, -0.5, 9) if eps is None else np.atleast_1d(np.asarray(eps, dtype=float))
    if np.any(eps_arr <= 0):
        raise ConfigurationError("eps must be positive")
    m = int(math.ceil(math.log2(max(n_samples, 2))))
    pts = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)
    v = (2.0 * pts - 1.0) * v_box
    av = np.asarray(a(v), dtype=float).reshape(len(v), d)
    if d == 1:
        xis = np.array([[1.0]])
    else:
        rng = np.random.default_rng(seed)
        xis = rng.normal(size=(n_directions, d))
        xis /= np.linalg.norm(xis, axis=1, keepdims=True)
    proj = np.abs(av @ xis.T)  # (N, n_dir)
    vol = (2.0 * v_box) ** d
    meas = np.array([vol * np.max(np.mean(proj <= e, axis=0)) for e in eps_arr])
    gamma = float("nan")
    degenerate = bool(meas[np.argmin(eps_arr)] > 0.5 * vol)
    if len(eps_arr) >= 2:
        order = np.argsort(eps_arr)
        le, lm = np.log(eps_arr[order]), meas[order]
        pos = lm > 0
        if np.any(~pos) and np.any(pos):
            degenerate = True
        if np.count_nonzero(pos) >= 2:
            gamma = float(np.polyfit(le[pos], np.log(lm[pos]), 1)[0])
            jumps = np.diff(np.log(lm[pos])) / np.diff(le[pos])
            if np.max(jumps) > 3.0 * d + 1.0:
                degenerate = True
    return NondegeneracyReport(eps_arr, meas, vol, gamma, degenerate)
