"""Experiment configuration files.

A configuration is a YAML document with the sections ``domain``,
``potential``, ``kernel``, ``grid``, ``solver``, ``flow``, ``budgets`` and
the scalars ``seed``, ``threads``, ``output_dir``, ``velocity_map``.  Every
section is optional and falls back to the defaults below.  Errors carry the
offending field path and, when known, its line in the file.

Example
-------
.. code-block:: yaml

    domain: {kind: torus, dim: 1}
    potential: {kind: harmonic_trap, x0: [0.5], eps: 25.0, eta: 0.1}
    kernel:
      family: linear_relaxation
      sigma: {kind: plateau, center: [0.0], inner: 0.1, outer: 0.2}
    grid: {nx: 128, nv: 128, v_max: 6.0}
    solver: {scheme: strang, dt: 0.02, T: 20.0, output_every: 5,
             initial: {kind: perturbation, amplitude: 0.5, mode: 1}}
    seed: 0
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigurationError, LinBoltzError
from .flow import VELOCITY_MAPS, VelocityMap
from .geometry import DomainSpec, PhaseGrid, PotentialSpec, build_grid
from .kernels import KernelSpec, Profile, bgk_equilibrium, bgk_kernel, fermi_dirac, grid_kernel

__all__ = ["ExperimentConfig", "load_config", "parse_config", "DEFAULTS"]

DEFAULTS: dict[str, Any] = {
    "domain": {"kind": "torus", "dim": 1},
    "potential": {"kind": "zero"},
    "kernel": {"family": "linear_relaxation", "sigma": 1.0},
    "grid": {"nx": 128, "nv": 128, "v_max": 6.0},
    "solver": {
        "scheme": "strang", "dt": 0.02, "T": 10.0, "interp": "linear", "output_every": 5,
        "snapshot_times": [], "mass_fix": True, "target": "projection",
        "initial": {"kind": "perturbation", "amplitude": 0.5, "mode": 1, "v_power": 0},
    },
    "flow": {"points": [], "T": 10.0, "h": 1e-3, "sample_every": 10},
    "budgets": {
        "gcc": {"mode": "finite_T", "T": 10.0, "T_max": None, "n_samples": 10_000, "box": None},
        "lebeau": {"T": [1.0], "n_samples": 2048, "refine": 10},
        "classes": {"T_max": 50.0, "per_component": 32, "max_steps": 4000},
        "tau": {"n_samples": 10_000, "t_max": 100.0, "n_times": 15, "box": None, "direction": -1},
    },
    "seed": 0,
    "threads": 1,
    "output_dir": "linboltz-output",
    "velocity_map": "identity",
}

# Sections whose fields depend on a ``kind``/``family`` switch: replaced
# wholesale and validated by the constructors rather than key-checked here.
_OPEN = {"domain", "potential", "kernel", "solver.initial", "budgets.gcc.box", "budgets.tau.box"}


def _merge(base: dict, over: dict, path: str, lines: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        p = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigurationError(_where(f"unknown field '{p}'", p, lines))
        if p not in _OPEN and isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, p, lines)
        else:
            out[key] = val
    return out


def _where(msg: str, path: str, lines: dict) -> str:
    line = lines.get(path)
    while line is None and "." in path:
        path = path.rsplit(".", 1)[0]
        line = lines.get(path)
    return f"line {line}: {msg}" if line is not None else msg


def _line_map(text: str) -> dict:
    """Field path -> 1-based line number, from the YAML node tree."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                out[p] = k.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, "")
    return out


@dataclass
class ExperimentConfig:
    """A fully resolved experiment.

    Attributes
    ----------
    raw : dict
        Merged configuration (defaults filled in); the config hash is computed
        from its canonical JSON form.
    domain : DomainSpec
    potential : PotentialSpec
    kernel_params : dict
        Kernel section; ``family: bgk`` selects the linearized BGK operator
        (``sigma``, ``mu``, ``theta``).
    grid : PhaseGrid
    seed, threads : int
    output_dir : Path
    velocity_map : VelocityMap
    source : str
    """

    raw: dict
    domain: DomainSpec
    potential: PotentialSpec
    kernel_params: dict
    grid: PhaseGrid
    seed: int
    threads: int
    output_dir: Path
    velocity_map: VelocityMap
    source: str = "<dict>"
    _lines: dict = field(default_factory=dict, repr=False)
    _kernel: Any = field(default=None, repr=False)

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def flow(self) -> dict:
        return self.raw["flow"]

    @property
    def budgets(self) -> dict:
        return self.raw["budgets"]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def is_bgk(self) -> bool:
        return self.kernel_params.get("family") == "bgk"

    def error(self, msg: str, path: str) -> ConfigurationError:
        return ConfigurationError(_where(f"{path}: {msg}", path, self._lines))

    def kernel(self):
        """``KernelSpec`` (or a ``GridKernel`` for BGK), built once."""
        if self._kernel is None:
            if self.is_bgk:
                p = dict(self.kernel_params)
                F = self.equilibrium()
                self._kernel = bgk_kernel(Profile.from_dict(p.get("sigma", 1.0)), F, self.grid)
            else:
                try:
                    self._kernel = KernelSpec.from_dict(self.kernel_params)
                except (ConfigurationError, KeyError, TypeError) as exc:
                    raise self.error(str(exc), "kernel") from None
        return self._kernel

    def grid_kernel(self):
        return grid_kernel(self.kernel(), self.grid)

    def equilibrium(self) -> np.ndarray:
        """``e^{-V} M_h`` or, for BGK, the Fermi–Dirac equilibrium ``F(H)``."""
        if self.is_bgk:
            p = self.kernel_params
            return bgk_equilibrium(self.grid, self.potential, fermi_dirac(float(p.get("mu", 0.0)),
                                                                          float(p.get("theta", 1.0))))
        return self.grid.equilibrium(self.potential)

    def initial_field(self) -> np.ndarray:
        """Initial datum described by ``solver.initial``.

        Kinds: ``equilibrium`` (``scale``), ``perturbation`` (``amplitude``,
        ``mode``, ``v_power``: ``W (1 + a cos(2 pi k x_1) v_1^p)``), ``random``
        (``amplitude``: ``W (1 + a U)`` with ``U`` uniform, seeded), ``box``
        (``x_lo``, ``x_hi``, ``v_lo``, ``v_hi``: ``W 1_box``) and ``snapshot``
        (``path``).
        """
        from .solver import read_snapshot

        init = dict(self.solver.get("initial") or {})
        kind = init.pop("kind", "perturbation")
        W = self.equilibrium()
        g = self.grid
        x, v = g.x_points, g.v_points
        try:
            if kind == "equilibrium":
                return float(init.get("scale", 1.0)) * W
            if kind == "perturbation":
                a, k, p = float(init.get("amplitude", 0.5)), int(init.get("mode", 1)), int(init.get("v_power", 0))
                return W * (1.0 + a * np.cos(2 * np.pi * k * x[:, 0])[:, None] * (v[:, 0] ** p)[None])
            if kind == "random":
                rng = np.random.default_rng(self.seed)
                return W * (1.0 + float(init.get("amplitude", 0.5)) * rng.random(g.shape))
            if kind == "box":
                lo_x = np.broadcast_to(np.asarray(init["x_lo"], float), (g.dim,))
                hi_x = np.broadcast_to(np.asarray(init["x_hi"], float), (g.dim,))
                lo_v = np.broadcast_to(np.asarray(init["v_lo"], float), (g.dim,))
                hi_v = np.broadcast_to(np.asarray(init["v_hi"], float), (g.dim,))
                mx = np.all((x >= lo_x) & (x <= hi_x), axis=1)
                mv = np.all((v >= lo_v) & (v <= hi_v), axis=1)
                return W * (mx[:, None] & mv[None, :])
            if kind == "snapshot":
                vals, _ = read_snapshot(init["path"])
                if vals.shape != g.shape:
                    raise ConfigurationError("snapshot grid does not match the configured grid")
                return vals
        except KeyError as exc:
            raise self.error(f"missing field {exc}", "solver.initial") from None
        raise self.error(f"unknown initial kind {kind!r}", "solver.initial.kind")


def parse_config(data: dict | None, source: str = "<dict>", lines: dict | None = None) -> ExperimentConfig:
    """Validate a configuration mapping and build the specs it references."""
    lines = lines or {}
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    raw = _merge(DEFAULTS, data, "", lines)
    for sec in ("domain", "potential", "kernel"):
        if not isinstance(raw[sec], dict):
            raise ConfigurationError(_where(f"{sec}: must be a mapping", sec, lines))

    def build(ctor, section, path):
        try:
            return ctor(section)
        except LinBoltzError as exc:
            raise ConfigurationError(_where(f"{path}: {exc}", path, lines)) from None
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigurationError(_where(f"{path}: invalid value ({exc})", path, lines)) from None

    def mk_domain(d):
        d = dict(d)
        if "vertices" in d:
            d["vertices"] = tuple(tuple(map(float, p)) for p in d["vertices"])
        return DomainSpec(**d)

    domain = build(mk_domain, raw["domain"], "domain")

    def mk_potential(d):
        d = dict(d)
        kind = d.get("kind", "zero")
        d.setdefault("dim", domain.dim)
        d.setdefault("periodic", domain.periodic)
        if kind == "tabulated":
            return PotentialSpec.from_csv(d["path"], d["dim"], d["shape"], d.get("origin"), d.get("spacing"))
        if "x0" in d:
            d["x0"] = tuple(np.atleast_1d(np.asarray(d["x0"], dtype=float)).tolist())
        return PotentialSpec(**d)

    potential = build(mk_potential, raw["potential"], "potential")
    if potential.dim != domain.dim:
        raise ConfigurationError(_where("potential.dim: must equal domain.dim", "potential.dim", lines))
    g = raw["grid"]
    grid = build(lambda s: build_grid(domain, float(s["v_max"]), s["nx"], s["nv"]), g, "grid")
    vm = raw["velocity_map"]
    if vm not in VELOCITY_MAPS:
        raise ConfigurationError(_where(f"velocity_map: unknown map {vm!r}", "velocity_map", lines))
    try:
        seed, threads = int(raw["seed"]), int(raw["threads"])
    except (TypeError, ValueError):
        raise ConfigurationError(_where("seed/threads must be integers", "seed", lines)) from None
    if threads < 1:
        raise ConfigurationError(_where("threads: must be at least 1", "threads", lines))
    s = raw["solver"]
    for key in ("dt", "T"):
        if not isinstance(s[key], (int, float)) or not s[key] > 0:
            raise ConfigurationError(_where(f"solver.{key}: must be a positive number", f"solver.{key}", lines))
    if s["scheme"] not in ("strang", "duhamel_sl"):
        raise ConfigurationError(_where(f"solver.scheme: unknown scheme {s['scheme']!r}", "solver.scheme", lines))
    if s["interp"] not in ("linear", "cubic", "spectral"):
        raise ConfigurationError(_where(f"solver.interp: unknown interpolation {s['interp']!r}",
                                        "solver.interp", lines))
    if s["target"] not in ("projection", "maxwellian", "none"):
        raise ConfigurationError(_where(f"solver.target: unknown target {s['target']!r}", "solver.target", lines))
    kernel_params = dict(raw["kernel"])
    if "family" not in kernel_params:
        raise ConfigurationError(_where("kernel.family: missing", "kernel", lines))
    cfg = ExperimentConfig(raw=raw, domain=domain, potential=potential, kernel_params=kernel_params, grid=grid,
                           seed=seed, threads=threads, output_dir=Path(str(raw["output_dir"])),
                           velocity_map=VELOCITY_MAPS[vm], source=source, _lines=lines)
    cfg.kernel()  # resolve now so that kernel errors surface as configuration errors
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a YAML configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark is not None else ""
        raise ConfigurationError(f"{path}: {where}{getattr(exc, 'problem', None) or exc}") from None
    try:
        return parse_config(data, str(path), _line_map(text))
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
