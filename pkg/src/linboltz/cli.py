"""Command-line experiment runner.

Every analysis is a subcommand reading one YAML configuration file (see
:mod:`linboltz.config`)::

    linboltz validate-kernel  CONFIG   -> kernel_report.json
    linboltz flow             CONFIG   -> trajectory_<i>.csv
    linboltz omega            CONFIG   -> omega.json, omega_mask.pbm, omega.svg
    linboltz gcc              CONFIG   -> gcc.json
    linboltz lebeau           CONFIG   -> lebeau.json
    linboltz classes          CONFIG   -> classes.json, basis_<j>.lbz (+ .json sidecar)
    linboltz simulate         CONFIG   -> series.csv, summary.json, snapshots, final.svg
    linboltz decay            CONFIG   -> series.csv, decay.json, decay.svg
    linboltz tau              CONFIG   -> survival.csv, survival.json, survival.svg
    linboltz paper-suite [--only N ...] -> suite.json and a pass/fail table

Artifacts go to ``<output_dir>/<command>/``; the environment variable
``LINBOLTZ_OUTPUT_DIR`` overrides ``output_dir``.  Each artifact records the
configuration hash and the seed.

Exit status: 0 success, 2 configuration error, 3 numeric failure,
4 acceptance failure (failed kernel validation or a failed suite criterion).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ExperimentConfig, load_config
from .control import build_classes, check_gcc, extract_omega, lebeau_constant, project_equilibrium, stationary_basis
from .errors import AssumptionViolation, ConfigurationError, ContractError, LinBoltzError, NumericError
from .flow import State, trace
from .kernels import validate_assumptions
from .solver import evolve, fit_decay, heatmap_svg, tau_survival, write_series_csv, write_snapshot

__all__ = ["main", "build_parser", "run", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERIC", "EXIT_ACCEPTANCE"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4
OUTPUT_ENV = "LINBOLTZ_OUTPUT_DIR"


class _Acceptance(Exception):
    """A check ran to completion and failed."""


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


class _Run:
    """Output directory and provenance for one command."""

    def __init__(self, command: str, cfg: ExperimentConfig | None, out_root: Path):
        self.command = command
        self.cfg = cfg
        self.dir = out_root / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    @property
    def provenance(self) -> dict:
        prov = {"command": self.command, "linboltz_version": __version__}
        if self.cfg is not None:
            prov.update(config_hash=self.cfg.config_hash, seed=self.cfg.seed, threads=self.cfg.threads)
        return prov

    @property
    def tag(self) -> str:
        return " ".join(f"{k}={v}" for k, v in sorted(self.provenance.items()))

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.written.append(p)
        return p

    def json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        doc = {"provenance": self.provenance, **_jsonable(payload)}
        p.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return p

    def csv(self, name: str, header: list[str], rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            fh.write(f"# {self.tag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(c)) if isinstance(c, (float, np.floating)) else c for c in row])
        return p

    def snapshot(self, name: str, f, grid, extra: dict | None = None) -> Path:
        p = self.path(name)
        write_snapshot(p, f, grid)
        self.json(name + ".json", {"snapshot": name, "format": "LBZSNAP1", **(extra or {})})
        return p


def _plot(path: Path, description: str, draw) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "linboltz"
    fig, ax = plt.subplots(figsize=(5, 4))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)


def _write_pbm(path: Path, mask: np.ndarray, comment: str) -> None:
    """Plain PBM (P1): one row per velocity cell (top = largest v), columns = position cells."""
    m = np.asarray(mask, dtype=np.uint8)
    with open(path, "w") as fh:
        fh.write(f"P1\n# {comment}\n{m.shape[1]} {m.shape[0]}\n")
        for row in m:
            fh.write(" ".join(map(str, row.tolist())) + "\n")


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def _omega(cfg: ExperimentConfig):
    return extract_omega(cfg.kernel(), cfg.grid)


def _classes(cfg: ExperimentConfig, omega=None):
    omega = _omega(cfg) if omega is None else omega
    b = cfg.budgets["classes"]
    return build_classes(omega, cfg.kernel(), cfg.potential, cfg.domain, T_max=float(b["T_max"]),
                         per_component=int(b["per_component"]), max_steps=int(b["max_steps"]),
                         seed=cfg.seed, vmap=cfg.velocity_map)


def _simulate(cfg: ExperimentConfig):
    s = cfg.solver
    W = cfg.equilibrium()
    f0 = cfg.initial_field()
    classes, target = None, None
    if s["target"] == "projection":
        classes = _classes(cfg)
        target = project_equilibrium(f0, stationary_basis(classes, cfg.potential, cfg.grid, W=W), classes)
    elif s["target"] == "maxwellian":
        cw = cfg.grid.cell_weights
        target = W * (np.sum(cw * f0) / np.sum(cw * W))
    series = evolve(f0, cfg.kernel(), cfg.potential, cfg.domain, cfg.grid, float(s["dt"]), float(s["T"]),
                    scheme=s["scheme"], interp=s["interp"], output_every=int(s["output_every"]), target=target,
                    classes=classes, W=W, snapshot_times=tuple(float(t) for t in s["snapshot_times"]),
                    mass_fix=bool(s["mass_fix"]), vmap=cfg.velocity_map)
    return series, classes


def _write_series(run: _Run, series) -> None:
    write_series_csv(run.path("series.csv"), series, header_lines=[run.tag])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_validate_kernel(cfg: ExperimentConfig, run: _Run, args) -> str:
    rep = validate_assumptions(cfg.kernel(), cfg.grid, cfg.potential, tol_a2=args.tol_a2)
    run.json("kernel_report.json", rep.to_dict())
    if not rep.passed:
        raise _Acceptance(f"kernel {rep.family} fails its assumptions "
                          f"(A1 {rep.a1_pass}, A2 {rep.a2_pass}, A3 {rep.a3_pass})")
    return f"kernel {rep.family}: A1/A2/A3 pass (A2 residual {rep.a2_residual:.2e})"


def cmd_flow(cfg: ExperimentConfig, run: _Run, args) -> str:
    fl = cfg.flow
    if not fl["points"]:
        raise cfg.error("no trajectories requested (flow.points is empty)", "flow.points")
    d = cfg.domain.dim
    header = ["kind", "t"] + [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)] + ["H"]
    statuses = []
    for i, pt in enumerate(fl["points"]):
        try:
            x, v = np.asarray(pt["x"], float).reshape(d), np.asarray(pt["v"], float).reshape(d)
        except (KeyError, TypeError, ValueError):
            raise cfg.error(f"entry {i} must have 'x' and 'v' of length {d}", "flow.points") from None
        rec = trace(State.at(x, v, cfg.potential), cfg.potential, cfg.domain, float(fl["T"]), float(fl["h"]),
                    vmap=cfg.velocity_map, sample_every=int(fl["sample_every"]))
        run.csv(f"trajectory_{i}.csv", header, rec.to_rows())
        statuses.append(f"{i}:{rec.status}(drift {rec.energy_drift:.1e})")
    return "trajectories " + ", ".join(statuses)


def cmd_omega(cfg: ExperimentConfig, run: _Run, args) -> str:
    om = _omega(cfg)
    run.json("omega.json", om.to_dict())
    g = cfg.grid
    if g.dim == 1:
        mask = om.mask.T[::-1]
        labels = om.labels
    else:
        mask = np.any(om.mask, axis=1).reshape(g.nx).T[::-1]
        labels = None
    _write_pbm(run.path("omega_mask.pbm"), mask, run.tag)

    def draw(ax):
        if labels is not None:
            lab = np.where(labels >= 0, labels, np.nan).astype(float)
            lo, hi = g.domain.bounding_box()
            ax.imshow(lab.T, origin="lower", aspect="auto", extent=[lo[0], hi[0], -g.v_max, g.v_max],
                      cmap="tab10", interpolation="nearest")
            ax.set_xlabel("x")
            ax.set_ylabel("v")
        else:
            ax.imshow(mask, aspect="equal", cmap="Greys", interpolation="nearest")
            ax.set_xlabel("x1 cell")
            ax.set_ylabel("x2 cell")
        ax.set_title(f"collision set: {om.n_components} component(s)")

    _plot(run.path("omega.svg"), run.tag, draw)
    return f"collision set: {om.n_components} component(s), sizes {om.component_sizes()}"


def cmd_gcc(cfg: ExperimentConfig, run: _Run, args) -> str:
    b = cfg.budgets["gcc"]
    rep = check_gcc(_omega(cfg), cfg.potential, cfg.domain, T=float(b["T"]), n_samples=int(b["n_samples"]),
                    mode=b["mode"], T_max=None if b["T_max"] is None else float(b["T_max"]), seed=cfg.seed,
                    box=b["box"], vmap=cfg.velocity_map)
    run.json("gcc.json", rep.to_dict())
    return f"{rep.mode}: controlled fraction {rep.fraction:.4f} (holds={rep.holds})"


def cmd_lebeau(cfg: ExperimentConfig, run: _Run, args) -> str:
    b = cfg.budgets["lebeau"]
    Ts = b["T"] if isinstance(b["T"], (list, tuple)) else [b["T"]]
    ests = [lebeau_constant(cfg.kernel(), cfg.potential, cfg.domain, float(T), cfg.grid,
                            n_samples=int(b["n_samples"]), refine=int(b["refine"]), seed=cfg.seed,
                            vmap=cfg.velocity_map) for T in Ts]
    run.json("lebeau.json", {"estimates": [e.to_dict() for e in ests]})
    return "; ".join(f"T={e.T:g}: C-={e.c_minus:.4f} C+={e.c_plus:.4f}" for e in ests)


def cmd_classes(cfg: ExperimentConfig, run: _Run, args) -> str:
    cs = _classes(cfg)
    run.json("classes.json", cs.to_dict())
    basis = stationary_basis(cs, cfg.potential, cfg.grid, W=cfg.equilibrium())
    for j, fj in enumerate(basis):
        run.snapshot(f"basis_{j}.lbz", fj, cfg.grid, {"class": j, **fj.meta})
    return f"{cs.class_count} class(es) of collision-set components, {cs.reach_class_count} reachable class(es)"


def cmd_simulate(cfg: ExperimentConfig, run: _Run, args) -> str:
    series, _ = _simulate(cfg)
    _write_series(run, series)
    for t, vals in sorted(series.snapshots.items()):
        run.snapshot(f"snapshot_t{t:g}.lbz", vals, cfg.grid, {"time": t})
    run.snapshot("final.lbz", series.final, cfg.grid, {"time": series.final.time})
    heatmap_svg(run.path("final.svg"), series.final, title=f"t = {series.final.time:g}", description=run.tag)
    d = series.distance
    ratio = d[-1] / d[0] if d[0] > 0 else 0.0
    run.json("summary.json", {"meta": series.meta, "initial_distance": d[0], "final_distance": d[-1],
                              "distance_ratio": ratio, "mass_initial": series.mass[0],
                              "mass_final": series.mass[-1]})
    return f"{series.meta['steps']} steps; distance {d[0]:.3e} -> {d[-1]:.3e}"


def cmd_decay(cfg: ExperimentConfig, run: _Run, args) -> str:
    series, _ = _simulate(cfg)
    _write_series(run, series)
    rep = fit_decay(series)
    run.json("decay.json", {"decay": rep.to_dict(), "meta": series.meta})
    t, d = series.times, series.distance

    def draw(ax):
        ax.semilogy(t[d > 0], d[d > 0], lw=1.2, label="distance")
        t0 = t[len(t) // 10]
        i0 = len(t) // 10
        if np.isfinite(rep.gamma) and d[i0] > 0:
            ax.semilogy(t, d[i0] * np.exp(-rep.gamma * (t - t0)), "--", lw=0.8, label=f"exp fit, gamma={rep.gamma:.3g}")
        ax.set_xlabel("t")
        ax.set_ylabel("weighted L2 distance")
        ax.set_title(f"verdict: {rep.verdict}")
        ax.legend()

    _plot(run.path("decay.svg"), run.tag, draw)
    return f"verdict {rep.verdict}: gamma={rep.gamma:.4g} (res {rep.gamma_residual:.3f}), p={rep.p:.3g}"


def cmd_tau(cfg: ExperimentConfig, run: _Run, args) -> str:
    b = cfg.budgets["tau"]
    t_grid = np.logspace(0.0, math.log10(float(b["t_max"])), int(b["n_times"]))
    rep = tau_survival(_omega(cfg), cfg.potential, cfg.domain, int(b["n_samples"]), t_grid, box=b["box"],
                       seed=cfg.seed, direction=int(b["direction"]), vmap=cfg.velocity_map)
    run.csv("survival.csv", ["t", "survival"], zip(rep.t, rep.survival))
    run.json("survival.json", rep.to_dict())

    def draw(ax):
        pos = rep.survival > 0
        ax.loglog(rep.t[pos], rep.survival[pos], "o-", ms=3)
        ax.set_xlabel("t")
        ax.set_ylabel("survival fraction")
        ax.set_title(f"log-log slope {rep.slope:.3f}")

    _plot(run.path("survival.svg"), run.tag, draw)
    return f"survival slope {rep.slope:.3f} ({rep.n_samples} samples, {rep.n_aborted} aborted)"


def cmd_paper_suite(cfg: ExperimentConfig | None, run: _Run, args) -> str:
    from .suite import CRITERIA, run_suite, summary_table

    unknown = [n for n in args.only or [] if n not in CRITERIA]
    if unknown:
        raise ConfigurationError(f"--only: unknown criterion number(s) {unknown} (valid: 1-{len(CRITERIA)})")
    results = run_suite(args.only or None, progress=lambda r: print(r.line(), flush=True))
    payload = {"criteria": []}
    for r in results:
        d = r.to_dict()
        d.pop("seconds")  # wall time is not reproducible
        payload["criteria"].append(d)
    payload["all_passed"] = all(r.passed for r in results)
    run.json("suite.json", payload)
    print(summary_table(results))
    failed = [r.number for r in results if not r.passed]
    if failed:
        raise _Acceptance(f"criteria failed: {failed}")
    return f"{len(results)} criteria passed"


COMMANDS = {
    "validate-kernel": (cmd_validate_kernel, "check positivity, equilibrium balance and integrability of the kernel"),
    "flow": (cmd_flow, "trace characteristics from flow.points"),
    "omega": (cmd_omega, "extract the collision set and its components"),
    "gcc": (cmd_gcc, "sample the geometric control condition"),
    "lebeau": (cmd_lebeau, "estimate the Lebeau constants"),
    "classes": (cmd_classes, "equivalence classes and stationary basis"),
    "simulate": (cmd_simulate, "evolve the initial datum"),
    "decay": (cmd_decay, "evolve and classify the decay"),
    "tau": (cmd_tau, "hitting-time survival function"),
    "paper-suite": (cmd_paper_suite, "run every acceptance scenario"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linboltz", description="Linear Boltzmann phase-space experiments.")
    parser.add_argument("--version", action="version", version=f"linboltz {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        if name == "paper-suite":
            p.add_argument("config", nargs="?", help="optional YAML file (output_dir, threads)")
            p.add_argument("--only", type=int, nargs="+", metavar="N", help="criterion numbers to run")
        else:
            p.add_argument("config", help="YAML experiment file")
        if name == "validate-kernel":
            p.add_argument("--tol-a2", type=float, default=1e-10, help="equilibrium-balance tolerance")
    return parser


def run(command: str, config: str | Path | None, args: argparse.Namespace | None = None,
        out=None, err=None) -> int:
    """Execute one command; returns the exit status."""
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    args = args if args is not None else argparse.Namespace(only=None, tol_a2=1e-10)
    try:
        cfg = load_config(config) if config is not None else None
        root = Path(os.environ.get(OUTPUT_ENV) or (cfg.output_dir if cfg is not None else "linboltz-output"))
        r = _Run(command, cfg, root)
        func = COMMANDS[command][0]
        with threadpool_limits(limits=cfg.threads if cfg is not None else 1):
            msg = func(cfg, r, args)
    except _Acceptance as exc:
        print(f"linboltz {command}: FAILED: {exc}", file=err)
        return EXIT_ACCEPTANCE
    except (ConfigurationError, ContractError) as exc:
        print(f"linboltz {command}: configuration error: {exc}", file=err)
        return EXIT_CONFIG
    except AssumptionViolation as exc:
        print(f"linboltz {command}: FAILED: {exc}", file=err)
        return EXIT_ACCEPTANCE
    except NumericError as exc:
        print(f"linboltz {command}: numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    except LinBoltzError as exc:
        print(f"linboltz {command}: error: {exc}", file=err)
        return EXIT_NUMERIC
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"linboltz {command}: numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    print(f"{command}: {msg}", file=out)
    for p in r.written:
        print(f"  wrote {p}", file=out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
