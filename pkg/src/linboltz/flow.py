"""Hamiltonian characteristics, specular reflection and hitting times.

The free Hamiltonian ``H = A(v) + V(x)`` (``A(v) = |v|^2/2`` by default) is
integrated with the Störmer–Verlet (leapfrog) scheme

    v_{1/2} = v - h/2 grad V(x),  x' = x + h a(v_{1/2}),  v' = v_{1/2} - h/2 grad V(x')

where ``a = grad A`` is the velocity map.  In bounded domains a step that
leaves the domain is cut at the boundary by bisection on the signed boundary
function, the velocity is reflected, ``R v = v - 2 (v.n) n``, and the rest of
the step is completed from the hit point.  Corner hits, grazing hits and
runaway reflection counts abort the trajectory; these events form null sets
and callers are expected to resample.

Backward flow ``phi_{-t}(x, v)`` is obtained by time reversal: run the forward
flow from ``(x, -v)`` and flip the final velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError
from .geometry import DomainSpec, PotentialSpec, _as_points

__all__ = [
    "VelocityMap",
    "IDENTITY",
    "RELATIVISTIC",
    "State",
    "ReflectionEvent",
    "TrajectoryRecord",
    "flow_step",
    "reflect",
    "trace",
    "closed_form_harmonic",
    "hitting_time",
    "advance",
    "flow_points",
    "first_entry_times",
    "STATUS_OK",
    "STATUS_CORNER",
    "STATUS_GRAZING",
    "STATUS_MAX_REFLECTIONS",
]

STATUS_OK = 0
STATUS_CORNER = 1
STATUS_GRAZING = 2
STATUS_MAX_REFLECTIONS = 3
STATUS_NAMES = {
    STATUS_OK: "completed",
    STATUS_CORNER: "corner_hit",
    STATUS_GRAZING: "grazing_hit",
    STATUS_MAX_REFLECTIONS: "max_reflections",
}

EVENT_TOL = 1e-10
GRAZING_TOL = 1e-8
CORNER_TOL = 1e-8
REFLECTION_CAP = 1_000_000


@dataclass(frozen=True)
class VelocityMap:
    """Transport velocity ``a(v) = grad A(v)`` and kinetic energy ``A(v)``."""

    name: str
    velocity: Callable[[np.ndarray], np.ndarray]
    kinetic: Callable[[np.ndarray], np.ndarray]


IDENTITY = VelocityMap(
    "identity",
    lambda v: v,
    lambda v: 0.5 * np.sum(v * v, axis=-1),
)
RELATIVISTIC = VelocityMap(
    "relativistic",
    lambda v: v / np.sqrt(1.0 + np.sum(v * v, axis=-1, keepdims=True)),
    lambda v: np.sqrt(1.0 + np.sum(v * v, axis=-1)),
)
VELOCITY_MAPS = {"identity": IDENTITY, "relativistic": RELATIVISTIC}


def energy(x: np.ndarray, v: np.ndarray, pot: PotentialSpec, vmap: VelocityMap = IDENTITY) -> np.ndarray:
    """Generalized hamiltonian ``A(v) + V(x)`` on arrays of points."""
    return vmap.kinetic(v) + pot.value(x)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class State:
    """A phase point with time stamp and the energy recorded at trajectory start."""

    x: np.ndarray
    v: np.ndarray
    t: float = 0.0
    H0: float | None = None

    @classmethod
    def at(cls, x, v, pot: PotentialSpec, t: float = 0.0, vmap: VelocityMap = IDENTITY) -> "State":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        H0 = float(energy(x[None], v[None], pot, vmap)[0])
        return cls(x, v, t, H0)


@dataclass(frozen=True)
class ReflectionEvent:
    t: float
    point: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray


@dataclass
class TrajectoryRecord:
    """Sampled trajectory with reflection events and termination status."""

    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    H: np.ndarray
    H0: float
    h: float
    events: list = field(default_factory=list)
    status: str = "completed"

    @property
    def final(self) -> State:
        return State(self.x[-1].copy(), self.v[-1].copy(), float(self.times[-1]), self.H0)

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.H - self.H0)))

    @property
    def drift_constant(self) -> float:
        """Measured ``C`` in ``max |H - H0| <= C h^2``."""
        return self.energy_drift / self.h**2

    def to_rows(self) -> list[list]:
        """CSV rows ``kind, t, x..., v..., H`` with reflection events appended."""
        rows = []
        for t, x, v, H in zip(self.times, self.x, self.v, self.H):
            rows.append(["sample", float(t), *map(float, x), *map(float, v), float(H)])
        for ev in self.events:
            rows.append(
                ["reflection", float(ev.t), *map(float, ev.point), *map(float, ev.v_out), float("nan")]
            )
        return rows


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def reflect(v, n) -> np.ndarray:
    """Specular reflection ``v - 2 (v.n) n`` (vectorized over leading axes).

    Raises
    ------
    ContractError
        If ``n`` is not a unit vector.
    """
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    norms = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ContractError("reflect() requires a unit normal")
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


def _leapfrog(x, v, h, pot: PotentialSpec, vmap: VelocityMap):
    hh = np.asarray(h, dtype=float)
    hcol = hh[:, None] if hh.ndim == 1 else hh
    if pot.kind == "zero":
        return x + hcol * vmap.velocity(v), v
    g = pot.gradient(x)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite potential gradient in flow step")
    vh = v - 0.5 * hcol * g
    xn = x + hcol * vmap.velocity(vh)
    g2 = pot.gradient(xn)
    if not np.all(np.isfinite(g2)):
        raise NumericError("non-finite potential gradient in flow step")
    return xn, vh - 0.5 * hcol * g2


def flow_step(s: State, pot: PotentialSpec, h: float, vmap: VelocityMap = IDENTITY,
              domain: DomainSpec | None = None) -> State:
    """One Störmer–Verlet step (positions canonicalized on the torus)."""
    if not h > 0:
        raise ContractError("flow_step requires h > 0")
    x, v = _leapfrog(np.atleast_1d(s.x)[None], np.atleast_1d(s.v)[None], h, pot, vmap)
    if domain is not None:
        x = domain.canonicalize(x)
    return State(x[0], v[0], s.t + h, s.H0)


def advance(x, v, h, pot: PotentialSpec, dom: DomainSpec, vmap: VelocityMap = IDENTITY,
            event_tol: float = EVENT_TOL, grazing_tol: float = GRAZING_TOL,
            corner_tol: float = CORNER_TOL, max_hits: int = 1000, record_events: bool = False):
    """Advance many points by one (possibly per-point) step ``h``.

    Parameters
    ----------
    x, v : ndarray, shape (N, d)
    h : float or ndarray, shape (N,)
        Step sizes (non-negative).

    Returns
    -------
    x, v : ndarray
        New phase points (torus positions canonicalized).
    status : ndarray of int
        ``STATUS_*`` codes; aborted points keep their pre-abort state.
    n_hits : ndarray of int
        Reflections performed during the step.
    events : list of (index, t_offset, point, v_in, v_out)
        Only when ``record_events`` is true.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    N = len(x)
    rem = np.broadcast_to(np.asarray(h, dtype=float), (N,)).copy()
    status = np.zeros(N, dtype=np.int64)
    n_hits = np.zeros(N, dtype=np.int64)
    events = []
    if dom.periodic:
        xn, vn = _leapfrog(x, v, rem, pot, vmap)
        return dom.canonicalize(xn), vn, status, n_hits, events
    elapsed = np.zeros(N)
    active = np.flatnonzero(rem > 0)
    while active.size:
        xa, va, ra = x[active], v[active], rem[active]
        xn, vn = _leapfrog(xa, va, ra, pot, vmap)
        out = dom.boundary_function(xn) > 0
        done = active[~out]
        x[done], v[done], rem[done] = xn[~out], vn[~out], 0.0
        if not np.any(out):
            break
        idx = active[out]
        xo, vo, ro = xa[out], va[out], ra[out]
        lo = np.zeros(len(idx))
        hi = ro.copy()
        while True:
            wide = (hi - lo) > event_tol
            if not np.any(wide):
                break
            mid = 0.5 * (lo + hi)
            xm, _ = _leapfrog(xo, vo, mid, pot, vmap)
            inside = dom.boundary_function(xm) <= 0
            lo = np.where(wide & inside, mid, lo)
            hi = np.where(wide & ~inside, mid, hi)
        xh, vh = _leapfrog(xo, vo, lo, pot, vmap)
        nrm = dom.normal(xh)
        speed = np.linalg.norm(vh, axis=1)
        vdotn = np.sum(vh * nrm, axis=1)
        corner = dom.corner_distance(xh) < corner_tol
        grazing = (~corner) & (np.abs(vdotn) < grazing_tol * np.maximum(speed, 1e-300))
        vout = vh - 2.0 * vdotn[:, None] * nrm
        ok = ~(corner | grazing)
        status[idx[corner]] = STATUS_CORNER
        status[idx[grazing]] = STATUS_GRAZING
        x[idx[ok]] = xh[ok]
        v[idx[ok]] = vout[ok]
        elapsed[idx] += lo
        rem[idx[ok]] = ro[ok] - lo[ok]
        rem[idx[~ok]] = 0.0
        n_hits[idx[ok]] += 1
        if record_events:
            for j in np.flatnonzero(ok):
                events.append((int(idx[j]), float(elapsed[idx[j]]), xh[j].copy(), vh[j].copy(), vout[j].copy()))
        runaway = idx[ok][n_hits[idx[ok]] > max_hits]
        status[runaway] = STATUS_MAX_REFLECTIONS
        rem[runaway] = 0.0
        active = idx[ok][rem[idx[ok]] > 0]
    return x, v, status, n_hits, events


def flow_points(x, v, t: float, pot: PotentialSpec, dom: DomainSpec, h: float,
                vmap: VelocityMap = IDENTITY, direction: int = 1):
    """Flow arrays of points for time ``t`` (``direction=-1``: backward flow).

    Returns ``(x_t, v_t, status)``.
    """
    x = _as_points(x, dom.dim).copy()
    v = _as_points(v, dom.dim).copy()
    if direction < 0:
        v = -v
    n_steps = max(1, int(math.ceil(t / h - 1e-12)))
    step = t / n_steps
    status = np.zeros(len(x), dtype=np.int64)
    for _ in range(n_steps):
        live = status == STATUS_OK
        if not np.any(live):
            break
        xn, vn, st, _, _ = advance(x[live], v[live], step, pot, dom, vmap)
        x[live], v[live] = xn, vn
        status[live] = st
    if direction < 0:
        v = -v
    return x, v, status


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def trace(s: State, pot: PotentialSpec, dom: DomainSpec, T: float, h: float,
          vmap: VelocityMap = IDENTITY, sample_every: int = 1,
          reflection_cap: int = REFLECTION_CAP, event_tol: float = EVENT_TOL,
          grazing_tol: float = GRAZING_TOL, corner_tol: float = CORNER_TOL) -> TrajectoryRecord:
    """Integrate a (broken) characteristic up to time ``T``.

    Steps have size ``h`` except the last one, which lands exactly on ``T``.
    Samples are stored every ``sample_every`` steps plus at ``T``.
    """
    if not (T > 0 and h > 0):
        raise ContractError("trace requires T > 0 and h > 0")
    x = np.atleast_1d(np.asarray(s.x, dtype=float)).copy()[None]
    v = np.atleast_1d(np.asarray(s.v, dtype=float)).copy()[None]
    if not dom.periodic and dom.boundary_function(x)[0] >= 0:
        raise ContractError("trace requires an interior starting point")
    x = dom.canonicalize(x)
    H0 = s.H0 if s.H0 is not None else float(energy(x, v, pot, vmap)[0])
    times, xs, vs = [s.t], [x[0].copy()], [v[0].copy()]
    events: list[ReflectionEvent] = []
    status = STATUS_OK
    t = s.t
    n_steps = int(math.floor(T / h + 1e-9))
    steps = [h] * n_steps
    tail = T - n_steps * h
    if tail > 1e-12 * max(T, 1.0):
        steps.append(tail)
    total_hits = 0
    for k, step in enumerate(steps, start=1):
        xn, vn, st, nh, evs = advance(
            x, v, step, pot, dom, vmap, event_tol, grazing_tol, corner_tol, record_events=True
        )
        for _, off, p, vin, vout in evs:
            events.append(ReflectionEvent(t + off, p, vin, vout))
        total_hits += int(nh[0])
        if st[0] != STATUS_OK:
            status = int(st[0])
            break
        x, v = xn, vn
        t = s.t + (k * h if k <= n_steps else T)
        if total_hits > reflection_cap:
            status = STATUS_MAX_REFLECTIONS
            break
        if k % sample_every == 0 or k == len(steps):
            times.append(t)
            xs.append(x[0].copy())
            vs.append(v[0].copy())
    X, Vv = np.array(xs), np.array(vs)
    H = energy(X, Vv, pot, vmap)
    return TrajectoryRecord(np.array(times), X, Vv, H, H0, h, events, STATUS_NAMES[status])


def closed_form_harmonic(x, v, x0, eps: float, t: float) -> State:
    """Exact flow of ``V = eps |x - x0|^2 / 2`` (valid while the orbit stays quadratic)."""
    if not eps > 0:
        raise ConfigurationError("closed_form_harmonic requires eps > 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    w = math.sqrt(eps)
    c, s = math.cos(w * t), math.sin(w * t)
    X = x0 + (x - x0) * c + (v / w) * s
    Xi = -(x - x0) * w * s + v * c
    return State(X, Xi, t)


# ---------------------------------------------------------------------------
# Hitting times
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HitResult:
    time: float | None
    reason: str = "hit"


def first_entry_times(x, v, member: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      pot: PotentialSpec, dom: DomainSpec, T_max: float, h,
                      vmap: VelocityMap = IDENTITY, direction: int = 1,
                      on_visit: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None,
                      max_steps: int | None = None):
    """First sample time at which each trajectory satisfies ``member``.

    Parameters
    ----------
    member : callable
        ``member(x, v) -> bool array``.
    h : float or ndarray, shape (N,)
        Step size, possibly per trajectory; samples are taken at ``k * h``.
    direction : {1, -1}
        Forward or backward flow.
    on_visit : callable, optional
        Called as ``on_visit(indices, x, v)`` on every sample of the still
        running trajectories (used to mark visited cells).
    max_steps : int, optional
        Cap on the number of steps of any trajectory.

    Returns
    -------
    times : ndarray
        ``nan`` where no entry happened within ``T_max``.
    status : ndarray of int
        Abort codes (``STATUS_OK`` for completed or entered trajectories).
    """
    x = _as_points(x, dom.dim).copy()
    v = _as_points(v, dom.dim).copy()
    x = dom.canonicalize(x)
    N = len(x)
    hs = np.broadcast_to(np.asarray(h, dtype=float), (N,)).copy()
    if np.any(hs <= 0):
        raise ContractError("first_entry_times requires positive steps")
    limit = np.ceil(T_max / hs - 1e-12).astype(np.int64)
    if max_steps is not None:
        limit = np.minimum(limit, int(max_steps))
    times = np.full(N, np.nan)
    status = np.zeros(N, dtype=np.int64)
    sgn = 1.0 if direction >= 0 else -1.0
    inside = np.asarray(member(x, v), dtype=bool)
    times[inside] = 0.0
    live = np.flatnonzero(~inside & (limit > 0))
    vv = sgn * v  # internal forward-flow velocity
    k = 0
    while live.size:
        k += 1
        xn, vn, st, _, _ = advance(x[live], vv[live], hs[live], pot, dom, vmap)
        x[live], vv[live] = xn, vn
        bad = st != STATUS_OK
        status[live[bad]] = st[bad]
        live = live[~bad]
        if live.size == 0:
            break
        phys_v = sgn * vv[live]
        if on_visit is not None:
            on_visit(live, x[live], phys_v)
        hit = np.asarray(member(x[live], phys_v), dtype=bool)
        times[live[hit]] = k * hs[live[hit]]
        live = live[~hit]
        live = live[limit[live] > k]
    return times, status


def hitting_time(s: State, omega, pot: PotentialSpec, dom: DomainSpec, T_max: float, h: float,
                 vmap: VelocityMap = IDENTITY, direction: int = 1) -> HitResult:
    """First sample time at which the trajectory of ``s`` enters an omega cell.

    ``omega`` is an :class:`~linboltz.control.OmegaPartition` (anything with a
    ``contains(x, v)`` method works).  Returns ``HitResult(None, reason)``
    when no entry happens within ``T_max`` or the trajectory aborts.
    """
    times, status = first_entry_times(
        np.atleast_1d(s.x)[None], np.atleast_1d(s.v)[None], omega.contains, pot, dom, T_max, h,
        vmap, direction,
    )
    if status[0] != STATUS_OK:
        return HitResult(None, STATUS_NAMES[int(status[0])])
    if np.isnan(times[0]):
        return HitResult(None, "not_reached")
    return HitResult(float(times[0]), "hit")
