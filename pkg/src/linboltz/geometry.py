"""Domains, potentials, the hamiltonian and the discrete phase-space grid.

Positions live either on the flat torus ``[0, 1)^d`` (periodic, no boundary)
or in a bounded billiard table (ball, simple polygon, Bunimovich stadium)
whose boundary is piecewise C¹.  Velocities are truncated to the box
``[-v_max, v_max]^d``; the midpoint rule is used in every direction so that
the same nodes serve transport interpolation and collision quadrature.

Fields on a :class:`PhaseGrid` are stored as two-dimensional arrays of shape
``(n_x_cells, n_v_cells)`` where both multi-indices are raveled in C order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import erf

from .errors import ConfigurationError, ContractError, NumericError, OutOfRangeError

__all__ = [
    "DomainSpec",
    "PotentialSpec",
    "PhaseGrid",
    "build_grid",
    "canonicalize",
    "eval_potential",
    "eval_gradient",
    "hamiltonian",
    "maxwellian_density",
    "truncation_mass_defect",
]

MAX_MASS_DEFECT = 0.10


def _as_points(x, d: int) -> np.ndarray:
    """Return ``x`` as a float array of shape ``(N, d)``.

    A 1-D input is read as ``N`` scalar points when ``d == 1`` and as a single
    point otherwise.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if d == 1 else arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ContractError(f"expected points of dimension {d}, got shape {np.shape(x)}")
    return arr


def _is_single(x, d: int) -> bool:
    arr = np.asarray(x)
    return arr.ndim == 0 or (arr.ndim == 1 and (d > 1 or arr.size == 1))


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


def _segment_intersect(p1, p2, q1, q2) -> bool:
    """Proper intersection test for two closed segments in the plane."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_segment(a, b, c):
        return min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15 and min(
            a[1], b[1]
        ) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if (o1 > 0) != (o2 > 0) and (o3 > 0) != (o4 > 0) and o1 * o2 != 0 and o3 * o4 != 0:
        return True
    if o1 == 0 and on_segment(p1, p2, q1):
        return True
    if o2 == 0 and on_segment(p1, p2, q2):
        return True
    if o3 == 0 and on_segment(q1, q2, p1):
        return True
    if o4 == 0 and on_segment(q1, q2, p2):
        return True
    return False


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Spatial domain.

    Parameters
    ----------
    kind : {"torus", "disk", "polygon", "stadium"}
        ``torus`` is ``R^d / Z^d`` represented on ``[0, 1)^d``.  ``disk`` is the
        centred ball of the given radius (an interval when ``dim == 1``).
        ``polygon`` is a simple, positively oriented polygon in the plane.
        ``stadium`` is the set of points at distance ``< cap_radius`` from the
        segment ``[-L/2, L/2] x {0}``; it is C¹ with no corners.
    dim : int
        Spatial dimension.
    radius : float
        Disk radius.
    vertices : sequence of (x, y)
        Polygon vertices, counter-clockwise.
    straight_length, cap_radius : float
        Stadium parameters.
    """

    kind: str = "torus"
    dim: int = 1
    radius: float = 1.0
    vertices: tuple = ()
    straight_length: float = 1.0
    cap_radius: float = 0.5

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("domain.dim must be a positive integer")
        if self.kind == "torus":
            return
        if self.kind == "disk":
            if not self.radius > 0:
                raise ConfigurationError("domain.radius must be positive")
            return
        if self.kind == "polygon":
            if self.dim != 2:
                raise ConfigurationError("polygon domains require dim = 2")
            verts = np.asarray(self.vertices, dtype=float)
            if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
                raise ConfigurationError("domain.vertices must list at least 3 points (x, y)")
            object.__setattr__(self, "vertices", tuple(map(tuple, verts.tolist())))
            area = self._signed_area(verts)
            if area <= 0:
                raise ConfigurationError(
                    "domain.vertices must be positively oriented (counter-clockwise)"
                )
            m = len(verts)
            for i in range(m):
                for j in range(i + 1, m):
                    if j == i + 1 or (i == 0 and j == m - 1):
                        continue
                    if _segment_intersect(verts[i], verts[(i + 1) % m], verts[j], verts[(j + 1) % m]):
                        raise ConfigurationError("domain.vertices describe a self-intersecting polygon")
            return
        if self.kind == "stadium":
            if self.dim != 2:
                raise ConfigurationError("stadium domains require dim = 2")
            if not (self.straight_length >= 0 and self.cap_radius > 0):
                raise ConfigurationError("stadium needs straight_length >= 0 and cap_radius > 0")
            return
        raise ConfigurationError(f"unknown domain kind {self.kind!r}")

    # -- basic queries -----------------------------------------------------
    @staticmethod
    def _signed_area(verts: np.ndarray) -> float:
        x, y = verts[:, 0], verts[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def periodic(self) -> bool:
        return self.kind == "torus"

    @property
    def corners(self) -> np.ndarray:
        """Corner set of the boundary (empty for C¹ boundaries)."""
        if self.kind == "polygon":
            return np.asarray(self.vertices, dtype=float)
        return np.zeros((0, self.dim))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the axis-aligned box holding the domain."""
        d = self.dim
        if self.kind == "torus":
            return np.zeros(d), np.ones(d)
        if self.kind == "disk":
            return -self.radius * np.ones(d), self.radius * np.ones(d)
        if self.kind == "polygon":
            verts = np.asarray(self.vertices)
            return verts.min(axis=0), verts.max(axis=0)
        half = 0.5 * self.straight_length + self.cap_radius
        return np.array([-half, -self.cap_radius]), np.array([half, self.cap_radius])

    def volume(self) -> float:
        """Lebesgue measure of the domain."""
        if self.kind == "torus":
            return 1.0
        if self.kind == "disk":
            d = self.dim
            return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius**d
        if self.kind == "polygon":
            return self._signed_area(np.asarray(self.vertices))
        return 2 * self.cap_radius * self.straight_length + math.pi * self.cap_radius**2

    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        """Wrap torus positions into ``[0, 1)^d``; identity for bounded domains."""
        if self.kind != "torus":
            return np.asarray(x, dtype=float)
        y = np.mod(np.asarray(x, dtype=float), 1.0)
        # np.mod can return exactly 1.0 for tiny negative inputs.
        return np.where(y >= 1.0, 0.0, y)

    # -- boundary machinery --------------------------------------------------
    def _stadium_projection(self, x: np.ndarray) -> np.ndarray:
        half = 0.5 * self.straight_length
        p = np.zeros_like(x)
        p[:, 0] = np.clip(x[:, 0], -half, half)
        return p

    def boundary_function(self, x) -> np.ndarray:
        """Signed boundary function: negative inside, positive outside.

        For the torus the function is identically ``-1``.
        """
        pts = _as_points(x, self.dim)
        if self.kind == "torus":
            return -np.ones(len(pts))
        if self.kind == "disk":
            return np.linalg.norm(pts, axis=1) - self.radius
        if self.kind == "stadium":
            return np.linalg.norm(pts - self._stadium_projection(pts), axis=1) - self.cap_radius
        dist, _ = self._polygon_distance(pts)
        inside = self._polygon_inside(pts)
        return np.where(inside, -dist, dist)

    def contains(self, x) -> np.ndarray:
        """Boolean mask of points strictly inside the domain."""
        return self.boundary_function(x) < 0

    def _polygon_distance(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        verts = np.asarray(self.vertices)
        a = verts
        b = np.roll(verts, -1, axis=0)
        e = b - a  # (m, 2)
        rel = pts[:, None, :] - a[None, :, :]  # (N, m, 2)
        t = np.clip(np.sum(rel * e[None], axis=2) / np.sum(e * e, axis=1)[None], 0.0, 1.0)
        proj = a[None] + t[..., None] * e[None]
        dist = np.linalg.norm(pts[:, None, :] - proj, axis=2)
        idx = np.argmin(dist, axis=1)
        return dist[np.arange(len(pts)), idx], idx

    def _polygon_inside(self, pts: np.ndarray) -> np.ndarray:
        verts = np.asarray(self.vertices)
        x, y = pts[:, 0:1], pts[:, 1:2]
        x1, y1 = verts[:, 0][None], verts[:, 1][None]
        x2, y2 = np.roll(verts[:, 0], -1)[None], np.roll(verts[:, 1], -1)[None]
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        crossings = np.sum(cond & (x < xint), axis=1)
        return crossings % 2 == 1

    def normal(self, x) -> np.ndarray:
        """Outward unit normal at (or near) boundary points."""
        pts = _as_points(x, self.dim)
        if self.kind == "torus":
            raise ContractError("the torus has no boundary")
        if self.kind == "disk":
            r = np.linalg.norm(pts, axis=1, keepdims=True)
            return pts / np.where(r == 0, 1.0, r)
        if self.kind == "stadium":
            diff = pts - self._stadium_projection(pts)
            r = np.linalg.norm(diff, axis=1, keepdims=True)
            return diff / np.where(r == 0, 1.0, r)
        _, idx = self._polygon_distance(pts)
        verts = np.asarray(self.vertices)
        e = np.roll(verts, -1, axis=0) - verts
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n[idx]

    def corner_distance(self, x) -> np.ndarray:
        """Distance from each point to the nearest corner (``inf`` if none)."""
        pts = _as_points(x, self.dim)
        c = self.corners
        if len(c) == 0:
            return np.full(len(pts), np.inf)
        return np.min(np.linalg.norm(pts[:, None, :] - c[None], axis=2), axis=1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        if self.kind == "disk":
            out["radius"] = self.radius
        elif self.kind == "polygon":
            out["vertices"] = [list(v) for v in self.vertices]
        elif self.kind == "stadium":
            out["straight_length"] = self.straight_length
            out["cap_radius"] = self.cap_radius
        return out


def canonicalize(x, domain: DomainSpec) -> np.ndarray:
    """Canonical representative of a position (idempotent)."""
    return domain.canonicalize(x)


def _min_image(diff: np.ndarray) -> np.ndarray:
    return diff - np.round(diff)


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------


def _smooth_step(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """C-infinity step S(t) rising from 0 (t <= 0) to 1 (t >= 1) and S'(t)."""
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
        s = a / (a + b)
        da = np.where(t > 0, a / np.where(t > 0, t * t, 1.0), 0.0)
        db = np.where(t < 1, -b / np.where(t < 1, (1.0 - t) ** 2, 1.0), 0.0)
        ds = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return s, np.nan_to_num(ds)


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    """External potential ``V(x)``.

    Parameters
    ----------
    kind : {"zero", "harmonic_trap", "tabulated"}
    x0 : sequence of float
        Trap centre.
    eps : float
        Trap stiffness; ``V = eps |x - x0|^2 / 2`` on ``B(x0, 2 eta)``.
    eta : float
        Trap radius parameter.
    cutoff_outer : float, optional
        Radius beyond which the smooth cutoff has switched ``V`` off.  Defaults
        to ``min(4 eta, 0.5)`` on the torus and ``4 eta`` otherwise.
    table_values, table_gradients : ndarray, optional
        Tabulated ``V`` (shape ``n_1 x ... x n_d``) and its gradient
        (shape ``n_1 x ... x n_d x d``) on nodes ``origin + i * spacing``.
    """

    kind: str = "zero"
    dim: int = 1
    x0: tuple = ()
    eps: float = 1.0
    eta: float = 0.1
    cutoff_outer: float | None = None
    periodic: bool = True
    table_values: np.ndarray | None = None
    table_gradients: np.ndarray | None = None
    table_origin: tuple = ()
    table_spacing: tuple = ()

    def __post_init__(self):
        if self.kind == "zero":
            return
        if self.kind == "harmonic_trap":
            x0 = tuple(float(c) for c in np.atleast_1d(self.x0)) if len(np.atleast_1d(self.x0)) else (0.5,) * self.dim
            if len(x0) != self.dim:
                raise ConfigurationError("potential.x0 must have one coordinate per dimension")
            object.__setattr__(self, "x0", x0)
            if not self.eps > 0:
                raise ConfigurationError("potential.eps must be positive")
            if not self.eta > 0:
                raise ConfigurationError("potential.eta must be positive")
            outer = self.cutoff_outer
            if outer is None:
                outer = min(4 * self.eta, 0.5) if self.periodic else 4 * self.eta
            if not outer > 2 * self.eta:
                raise ConfigurationError(
                    "potential cutoff must act strictly outside B(x0, 2*eta): need cutoff_outer > 2*eta"
                )
            if self.periodic and outer > 0.5:
                raise ConfigurationError("on the torus the trap cutoff radius must not exceed 1/2")
            object.__setattr__(self, "cutoff_outer", float(outer))
            return
        if self.kind == "tabulated":
            vals = np.asarray(self.table_values, dtype=float)
            grads = np.asarray(self.table_gradients, dtype=float)
            if vals.ndim != self.dim or grads.shape != vals.shape + (self.dim,):
                raise ConfigurationError("tabulated potential: values/gradients shapes are inconsistent")
            if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(grads))):
                raise ConfigurationError("tabulated potential contains non-finite entries")
            object.__setattr__(self, "table_values", vals)
            object.__setattr__(self, "table_gradients", grads)
            origin = tuple(self.table_origin) or (0.0,) * self.dim
            spacing = tuple(self.table_spacing) or tuple(1.0 / n for n in vals.shape)
            object.__setattr__(self, "table_origin", origin)
            object.__setattr__(self, "table_spacing", spacing)
            return
        raise ConfigurationError(f"unknown potential kind {self.kind!r}")

    # -- tabulated helpers -------------------------------------------------
    @cached_property
    def _interpolators(self):
        axes = [
            self.table_origin[i] + self.table_spacing[i] * np.arange(self.table_values.shape[i])
            for i in range(self.dim)
        ]
        v = RegularGridInterpolator(axes, self.table_values, bounds_error=True)
        g = [
            RegularGridInterpolator(axes, self.table_gradients[..., i], bounds_error=True)
            for i in range(self.dim)
        ]
        return v, g

    def _table_query(self, pts: np.ndarray, which):
        try:
            return which(pts)
        except ValueError as exc:
            raise OutOfRangeError(f"tabulated potential queried outside its table: {exc}") from None

    # -- evaluation --------------------------------------------------------
    def _trap_parts(self, pts: np.ndarray):
        diff = pts - np.asarray(self.x0)[None]
        if self.periodic:
            diff = _min_image(diff)
        r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        r1, r2 = 2 * self.eta, self.cutoff_outer
        psi = np.ones_like(r)
        dpsi_dr = np.zeros_like(r)
        ramp = r > r1
        if np.any(ramp):
            s, ds = _smooth_step((r2 - r[ramp]) / (r2 - r1))
            psi[ramp] = s
            dpsi_dr[ramp] = -ds / (r2 - r1)
        return diff, r, psi, dpsi_dr

    def value(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        if self.kind == "zero":
            return np.zeros(len(pts))
        if self.kind == "harmonic_trap":
            _, r, psi, _ = self._trap_parts(pts)
            return 0.5 * self.eps * r * r * psi
        v, _ = self._interpolators
        return self._table_query(pts, v)

    def gradient(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        if self.kind == "zero":
            return np.zeros_like(pts)
        if self.kind == "harmonic_trap":
            diff, r, psi, dpsi = self._trap_parts(pts)
            # d/dx [eps r^2/2 psi(r)] = eps psi diff + eps r^2/2 psi'(r) diff / r
            return self.eps * diff * (psi + 0.5 * r * dpsi)[:, None]
        _, g = self._interpolators
        return np.stack([self._table_query(pts, gi) for gi in g], axis=1)

    @cached_property
    def smoothness(self) -> dict:
        """Sampled sup-norms of ``V``, ``grad V`` and ``Hess V`` (metadata)."""
        if self.kind == "zero":
            return {"sup_V": 0.0, "sup_grad": 0.0, "sup_hess": 0.0}
        if self.kind == "tabulated":
            lo = np.asarray(self.table_origin)
            hi = lo + np.asarray(self.table_spacing) * (np.asarray(self.table_values.shape) - 1)
        else:
            reach = self.cutoff_outer
            lo = np.asarray(self.x0) - reach
            hi = np.asarray(self.x0) + reach
        n = 64 if self.dim == 1 else 24
        axes = [np.linspace(lo[i], hi[i], n) for i in range(self.dim)]
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        g = self.gradient(pts)
        step = 1e-5 * float(np.max(hi - lo))
        hess = 0.0
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = step
            pp = np.clip(pts + e, lo, hi)
            pm = np.clip(pts - e, lo, hi)
            dg = (self.gradient(pp) - self.gradient(pm)) / np.maximum(
                (pp - pm)[:, i : i + 1], 1e-300
            )
            hess = max(hess, float(np.max(np.abs(dg))))
        return {
            "sup_V": float(np.max(np.abs(self.value(pts)))),
            "sup_grad": float(np.max(np.abs(g))),
            "sup_hess": hess,
        }

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        if self.kind == "harmonic_trap":
            out.update(x0=list(self.x0), eps=self.eps, eta=self.eta, cutoff_outer=self.cutoff_outer)
        return out

    @classmethod
    def zero(cls, dim: int = 1) -> "PotentialSpec":
        """Shared zero potential of the given dimension."""
        return _ZERO_POTENTIALS.setdefault(dim, cls("zero", dim))

    @classmethod
    def from_csv(cls, path: str | Path, dim: int, shape: Sequence[int], origin=None, spacing=None):
        """Load a tabulated potential from rows ``(i_1..i_d, value, g_1..g_d)``."""
        shape = tuple(int(s) for s in shape)
        vals = np.full(shape, np.nan)
        grads = np.full(shape + (dim,), np.nan)
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    nums = [float(c) for c in row]
                except ValueError:
                    if lineno == 1:
                        continue  # header
                    raise ConfigurationError(f"{path}:{lineno}: non-numeric entry") from None
                if len(nums) != 2 * dim + 1:
                    raise ConfigurationError(f"{path}:{lineno}: expected {2 * dim + 1} columns")
                idx = tuple(int(c) for c in nums[:dim])
                vals[idx] = nums[dim]
                grads[idx] = nums[dim + 1 :]
        if np.any(np.isnan(vals)):
            raise ConfigurationError(f"{path}: table does not cover every node")
        return cls(
            kind="tabulated",
            dim=dim,
            table_values=vals,
            table_gradients=grads,
            table_origin=tuple(origin or ()),
            table_spacing=tuple(spacing or ()),
        )


_ZERO_POTENTIALS: dict[int, PotentialSpec] = {}


def eval_potential(spec: PotentialSpec, x) -> np.ndarray | float:
    """Value of ``V`` at ``x`` (scalar for a single point)."""
    out = spec.value(x)
    return float(out[0]) if _is_single(x, spec.dim) else out


def eval_gradient(spec: PotentialSpec, x) -> np.ndarray:
    """Gradient of ``V`` at ``x``; raises :class:`NumericError` if non-finite."""
    g = spec.gradient(x)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite potential gradient")
    return g[0] if _is_single(x, spec.dim) else g


def hamiltonian(x, v, spec: PotentialSpec) -> np.ndarray | float:
    """``H(x, v) = |v|^2 / 2 + V(x)``."""
    vel = _as_points(v, spec.dim)
    out = 0.5 * np.sum(vel * vel, axis=1) + spec.value(x)
    return float(out[0]) if _is_single(v, spec.dim) else out


# ---------------------------------------------------------------------------
# Phase grid
# ---------------------------------------------------------------------------


def maxwellian_density(v, d: int) -> np.ndarray:
    """Standard Maxwellian ``(2 pi)^{-d/2} exp(-|v|^2 / 2)`` on points ``(N, d)``."""
    pts = _as_points(v, d)
    return (2 * np.pi) ** (-d / 2) * np.exp(-0.5 * np.sum(pts * pts, axis=1))


def truncation_mass_defect(v_max: float, d: int) -> float:
    """Exact Maxwellian mass outside the box ``[-v_max, v_max]^d``."""
    return float(1.0 - erf(v_max / math.sqrt(2.0)) ** d)


def _per_axis(n, d: int, name: str) -> tuple[int, ...]:
    vals = (int(n),) * d if np.isscalar(n) else tuple(int(k) for k in n)
    if len(vals) != d:
        raise ConfigurationError(f"{name} must be an integer or one integer per axis")
    if min(vals) < 4:
        raise ConfigurationError(f"{name} must be at least 4 per axis")
    return vals


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    """Tensor grid over (position box) x (velocity box) with midpoint weights.

    Attributes
    ----------
    domain : DomainSpec
    nx, nv : tuple of int
        Cells per axis in position and velocity.
    v_max : float
    x_lo, dx : ndarray
        Lower corner of the position box and cell widths.
    dv : ndarray
        Velocity cell widths.
    x_points : ndarray, shape (n_x, d)
        Cell centres in position.
    v_points : ndarray, shape (n_v, d)
        Cell centres in velocity.
    inside : ndarray of bool, shape (n_x,)
        Position cells whose centre lies inside the domain.
    w_x, w_v : float
        Cell volumes (strictly positive).
    M_h : ndarray, shape (n_v,)
        Discrete Maxwellian renormalized so that ``sum(w_v * M_h) == 1``.
    raw_mass : float
        ``sum(w_v * M(v))`` before renormalization.
    mass_defect : float
        Exact truncation defect ``1 - int_{box} M``.
    """

    domain: DomainSpec
    nx: tuple
    nv: tuple
    v_max: float
    x_lo: np.ndarray
    dx: np.ndarray
    dv: np.ndarray
    x_points: np.ndarray
    v_points: np.ndarray
    inside: np.ndarray
    w_x: float
    w_v: float
    M_h: np.ndarray
    raw_mass: float
    mass_defect: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_x(self) -> int:
        return int(np.prod(self.nx))

    @property
    def n_v(self) -> int:
        return int(np.prod(self.nv))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_v)

    @property
    def quadrature_defect(self) -> float:
        """``1 - sum(w_v M(v_j))`` for the unnormalized Maxwellian."""
        return 1.0 - self.raw_mass

    @property
    def cell_weights(self) -> np.ndarray:
        """Phase-space quadrature weights, zero on cells outside the domain."""
        if "cw" not in self._cache:
            w = np.where(self.inside, self.w_x * self.w_v, 0.0)
            cw = np.repeat(w[:, None], self.n_v, axis=1)
            cw.setflags(write=False)
            self._cache["cw"] = cw
        return self._cache["cw"]

    @property
    def domain_volume(self) -> float:
        """Quadrature volume of the position domain."""
        return float(self.w_x * np.count_nonzero(self.inside))

    def maxwellian(self, v) -> np.ndarray:
        """Renormalized Maxwellian ``M(v) / raw_mass`` at arbitrary velocities."""
        return maxwellian_density(v, self.dim) / self.raw_mass

    def potential_values(self, pot: PotentialSpec) -> np.ndarray:
        key = ("V", id(pot))
        if key not in self._cache:
            vals = np.zeros(self.n_x)
            pts = self.x_points[self.inside]
            vals[self.inside] = pot.value(pts)
            self._cache[key] = (pot, vals)
        return self._cache[key][1]

    def equilibrium(self, pot: PotentialSpec) -> np.ndarray:
        """Unnormalized Maxwellian equilibrium ``e^{-V(x)} M_h(v)`` (zero outside)."""
        V = self.potential_values(pot)
        return np.where(self.inside, np.exp(-V), 0.0)[:, None] * self.M_h[None, :]

    def x_cell_index(self, x) -> np.ndarray:
        """Flat position-cell index for each point, ``-1`` outside the box/domain."""
        pts = self.domain.canonicalize(_as_points(x, self.dim))
        idx = np.floor((pts - self.x_lo[None]) / self.dx[None]).astype(np.int64)
        nx = np.asarray(self.nx)
        ok = np.all((idx >= 0) & (idx < nx[None]), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, nx - 1).T), self.nx)
        flat = np.where(ok, flat, -1)
        inside = np.zeros(len(flat), dtype=bool)
        inside[ok] = self.inside[flat[ok]]
        return np.where(inside, flat, -1)

    def v_cell_index(self, v) -> np.ndarray:
        """Flat velocity-cell index for each velocity, ``-1`` outside the box."""
        pts = _as_points(v, self.dim)
        idx = np.floor((pts + self.v_max) / self.dv[None]).astype(np.int64)
        nv = np.asarray(self.nv)
        ok = np.all((idx >= 0) & (idx < nv[None]), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, nv - 1).T), self.nv)
        return np.where(ok, flat, -1)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "nx": list(self.nx),
            "nv": list(self.nv),
            "v_max": self.v_max,
            "mass_defect": self.mass_defect,
            "quadrature_defect": self.quadrature_defect,
        }


def build_grid(domain: DomainSpec, v_max: float = 6.0, nx=128, nv=128) -> PhaseGrid:
    """Build the discrete phase space.

    Parameters
    ----------
    domain : DomainSpec
    v_max : float
        Velocity truncation; the box is ``[-v_max, v_max]^d``.
    nx, nv : int or sequence of int
        Cells per axis (at least 4).

    Returns
    -------
    PhaseGrid
        With the discrete Maxwellian renormalized to unit discrete mass.

    Raises
    ------
    ConfigurationError
        If the truncated Maxwellian mass defect exceeds 10 %.
    """
    d = domain.dim
    nx_t = _per_axis(nx, d, "nx")
    nv_t = _per_axis(nv, d, "nv")
    if not v_max > 0:
        raise ConfigurationError("v_max must be positive")
    defect = truncation_mass_defect(v_max, d)
    if defect > MAX_MASS_DEFECT:
        raise ConfigurationError(
            f"v_max = {v_max} truncates {defect:.1%} of the Maxwellian mass (limit {MAX_MASS_DEFECT:.0%})"
        )
    lo, hi = domain.bounding_box()
    dx = (hi - lo) / np.asarray(nx_t)
    dv = np.full(d, 2 * v_max) / np.asarray(nv_t)
    x_axes = [lo[i] + (np.arange(nx_t[i]) + 0.5) * dx[i] for i in range(d)]
    v_axes = [-v_max + (np.arange(nv_t[i]) + 0.5) * dv[i] for i in range(d)]
    x_points = np.stack([a.ravel() for a in np.meshgrid(*x_axes, indexing="ij")], axis=1)
    v_points = np.stack([a.ravel() for a in np.meshgrid(*v_axes, indexing="ij")], axis=1)
    inside = np.ones(len(x_points), dtype=bool) if domain.periodic else domain.contains(x_points)
    if not np.any(inside):
        raise ConfigurationError("no grid cell centre lies inside the domain; increase nx")
    w_x = float(np.prod(dx))
    w_v = float(np.prod(dv))
    M = maxwellian_density(v_points, d)
    raw = float(np.sum(w_v * M))
    if 1.0 - raw > MAX_MASS_DEFECT:
        raise ConfigurationError(
            f"velocity grid captures only {raw:.3f} of the Maxwellian mass (limit {1 - MAX_MASS_DEFECT:.2f})"
        )
    M_h = M / raw
    for arr in (x_points, v_points, inside, M_h, dx, dv, lo):
        arr.setflags(write=False)
    return PhaseGrid(
        domain=domain,
        nx=nx_t,
        nv=nv_t,
        v_max=float(v_max),
        x_lo=lo,
        dx=dx,
        dv=dv,
        x_points=x_points,
        v_points=v_points,
        inside=inside,
        w_x=w_x,
        w_v=w_v,
        M_h=M_h,
        raw_mass=raw,
        mass_defect=defect,
    )
