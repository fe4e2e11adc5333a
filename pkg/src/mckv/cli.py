"""Config-driven batch runner: one JSON spec in, one artifact directory out.

Every run echoes its fully defaulted spec next to its outputs, so the
archived directory alone reproduces the run.  Artifacts are hashed into a
manifest; identical (spec, seed) pairs produce byte-identical CSV/JSON
artifacts regardless of thread count.

Exit codes: 0 success, 2 non-convergence (reports still written),
3 validation error, 4 numerical blow-up.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import entrance as entrance_mod
from . import integrate, lift, measure, verify
from ._parallel import resolve_threads
from .errors import BlowUpError, ConstructionError, MckvError, SpecValidationError
from .integrate import SimConfig
from .measure import dirac, flow_to_bytes, flow_to_csv
from .model import MODEL_BUILDERS, CurieWeissParams, ForcingSpec, SinusoidTerm, build_model

__all__ = ["RunSpec", "load_spec", "emit_spec", "execute", "emit_plot", "ArtifactSet", "main"]

COMMANDS = ("simulate", "entrance", "fixed_point", "lift_invariance", "qp_rep", "check", "bistable")

_SIM_DEFAULTS = {
    "n_particles": 20000,
    "dt": 1e-3,
    "seed": 0,
    "n_canon": 2048,
    "record_stride": 100,
    "tame_drift": False,
}
_TOL_DEFAULTS = {"tol": 0.02, "rel_tol": 1e-7}
_LIFT_DEFAULTS = {"resolution": 32, "T_multiple": 25, "t_checks": [0.25, 0.5], "n_samples": 512}


@dataclass(frozen=True)
class RunSpec:
    """Validated description of one batch run (all defaults filled)."""

    command: str
    model: dict
    sim: dict
    window: tuple
    anchor: tuple
    tolerances: dict
    max_iter: int = 12
    anchors: tuple = ()
    thetas: tuple = ()
    profile: Optional[dict] = None
    lift_options: dict = field(default_factory=dict)
    output_dir: str = "mckv_out"
    emit_plots: bool = False

    def sim_config(self) -> SimConfig:
        return SimConfig(**self.sim)


def _need(table: dict, key: str, path: str):
    if key not in table:
        raise SpecValidationError(f"{path}.{key}", "missing required field")
    return table[key]


def _positive(value, path: str):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise SpecValidationError(path, f"expected a number, got {value!r}") from None
    if v <= 0:
        raise SpecValidationError(path, f"must be positive, got {v}")
    return v


def load_spec(source) -> RunSpec:
    """Parse and validate a run spec from a path, JSON text, or dict.

    Missing optional fields are filled with defaults; errors carry the field
    path that failed.
    """
    if isinstance(source, RunSpec):
        return source
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        p = Path(text)
        if not text.lstrip().startswith("{") and p.suffix == ".json":
            if not p.exists():
                raise SpecValidationError("spec", f"file not found: {text}")
            text = p.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecValidationError("spec", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise SpecValidationError("spec", "top level must be an object")

    command = _need(raw, "command", "spec")
    if command not in COMMANDS:
        raise SpecValidationError("command", f"unknown command {command!r}; choose from {COMMANDS}")

    model_tbl = _need(raw, "model", "spec")
    name = _need(model_tbl, "name", "model")
    if name not in MODEL_BUILDERS:
        raise SpecValidationError("model.name", f"unknown model {name!r}; built-ins: {sorted(MODEL_BUILDERS)}")
    model = {"name": name, "params": dict(model_tbl.get("params", {}))}

    sim = dict(_SIM_DEFAULTS)
    sim.update(raw.get("sim", {}))
    _positive(sim["dt"], "sim.dt")
    for key in ("n_particles", "n_canon", "record_stride", "seed"):
        if int(sim[key]) != sim[key]:
            raise SpecValidationError(f"sim.{key}", "must be an integer")
        sim[key] = int(sim[key])
    sim["tame_drift"] = bool(sim["tame_drift"])

    window = raw.get("window", [0.0, 5.0])
    if len(window) != 2 or not window[1] > window[0]:
        raise SpecValidationError("window", f"need [t0, t1] with t1 > t0, got {window}")
    window = (float(window[0]), float(window[1]))

    anchor = raw.get("anchor", [0.0])
    if isinstance(anchor, (int, float)):
        anchor = [anchor]
    anchor = tuple(float(v) for v in anchor)

    tol = dict(_TOL_DEFAULTS)
    tol.update(raw.get("tolerances", {}))
    _positive(tol["tol"], "tolerances.tol")
    _positive(tol["rel_tol"], "tolerances.rel_tol")

    max_iter = int(raw.get("max_iter", 12))
    if max_iter < 1:
        raise SpecValidationError("max_iter", "must be >= 1")

    anchors = tuple(float(v) for v in raw.get("anchors", []))
    thetas = tuple(float(v) for v in raw.get("thetas", []))
    if command == "bistable":
        if name != "curie_weiss":
            raise SpecValidationError("model.name", "bistable runs need the curie_weiss model")
        if len(anchors) != 2:
            raise SpecValidationError("anchors", "bistable runs need exactly two anchors")
        if len(thetas) != 2:
            raise SpecValidationError("thetas", "bistable runs need exactly two radii")
        for i, th in enumerate(thetas):
            _positive(th, f"thetas[{i}]")

    profile = raw.get("profile")
    if command == "check" and profile is None:
        raise SpecValidationError("profile", "check runs need a dissipativity profile")

    lift_options = dict(_LIFT_DEFAULTS)
    lift_options.update(raw.get("lift_options", {}))

    return RunSpec(
        command=command,
        model=model,
        sim=sim,
        window=window,
        anchor=anchor,
        tolerances=tol,
        max_iter=max_iter,
        anchors=anchors,
        thetas=thetas,
        profile=dict(profile) if profile else None,
        lift_options=lift_options,
        output_dir=str(raw.get("output_dir", "mckv_out")),
        emit_plots=bool(raw.get("emit_plots", False)),
    )


def emit_spec(spec: RunSpec) -> str:
    """Canonical JSON text of a spec; ``load_spec`` inverts it."""
    table = {
        "command": spec.command,
        "model": spec.model,
        "sim": spec.sim,
        "window": list(spec.window),
        "anchor": list(spec.anchor),
        "tolerances": spec.tolerances,
        "max_iter": spec.max_iter,
        "anchors": list(spec.anchors),
        "thetas": list(spec.thetas),
        "profile": spec.profile,
        "lift_options": spec.lift_options,
        "output_dir": spec.output_dir,
        "emit_plots": spec.emit_plots,
    }
    return json.dumps(table, indent=2, sort_keys=True)


def _profile_from_table(table: dict) -> verify.DissipativityProfile:
    def forcing(part):
        if isinstance(part, (int, float)):
            return ForcingSpec(constant=float(part))
        terms = tuple(
            SinusoidTerm(float(t[0]), float(t[1]), float(t[2]) if len(t) > 2 else 0.0)
            for t in part.get("terms", [])
        )
        return ForcingSpec(constant=float(part.get("constant", 0.0)), terms=terms)

    return verify.DissipativityProfile(
        alpha=forcing(_need(table, "alpha", "profile")),
        beta=forcing(table.get("beta", 0.0)),
        gamma=forcing(table.get("gamma", 0.0)),
        c_sigma=_positive(_need(table, "c_sigma", "profile"), "profile.c_sigma"),
        c_sigma_lower=_positive(table.get("c_sigma_lower", table.get("c_sigma")), "profile.c_sigma_lower"),
        L=_positive(table.get("L", 1.0), "profile.L"),
        kappa=float(table.get("kappa", 1.0)),
        d=int(table.get("d", 1)),
    )


def _cw_params(spec: RunSpec) -> CurieWeissParams:
    from .model import _forcing_from_table

    params = spec.model["params"]
    return CurieWeissParams(
        beta=float(params["beta"]),
        k=float(params["k"]),
        sigma=float(params["sigma"]),
        forcing=_forcing_from_table(params.get("forcing")),
    )


@dataclass
class ArtifactSet:
    """Manifest of produced files: output-relative path -> sha256."""

    out_dir: str
    files: dict
    exit_code: int = 0
    partial: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "files": dict(sorted(self.files.items())),
            "exit_code": self.exit_code,
            "partial": self.partial,
            "notes": self.notes,
        }


def _flow_summary(flow) -> dict:
    rows = []
    for t, mu in zip(flow.node_times(), flow.measures):
        m = measure.mean(mu)
        m2 = measure.moment(mu, 2)
        var = m2 - float(m @ m)
        rows.append({"t": float(t), "mean": [float(v) for v in m], "variance": float(var)})
    return {"nodes": rows}


class _Writer:
    def __init__(self, out: Path):
        self.out = out
        self.files: dict = {}

    def text(self, name: str, content: str):
        path = self.out / name
        path.write_text(content)
        self.files[name] = hashlib.sha256(content.encode()).hexdigest()

    def binary(self, name: str, content: bytes):
        path = self.out / name
        path.write_bytes(content)
        self.files[name] = hashlib.sha256(content).hexdigest()

    def json(self, name: str, obj):
        self.text(name, json.dumps(obj, indent=2, sort_keys=True))


def execute(spec, out_dir: Optional[str] = None, seed: Optional[int] = None, threads: Optional[int] = None) -> ArtifactSet:
    """Run one spec and write its artifacts; never writes outside the output directory."""
    spec = load_spec(spec)
    if seed is not None:
        spec = replace(spec, sim={**spec.sim, "seed": int(seed)})
    out = Path(out_dir or os.environ.get("MCKV_OUT") or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(threads)
    w = _Writer(out)
    w.text("spec_echo.json", emit_spec(spec))

    cfg = spec.sim_config()
    tol = spec.tolerances["tol"]
    rel_tol = spec.tolerances["rel_tol"]
    exit_code = 0
    notes = []

    try:
        mdl = build_model(spec.model["name"], spec.model["params"])
        t0, t1 = spec.window

        if spec.command == "simulate":
            flow = integrate.run_selfconsistent(mdl, dirac(spec.anchor, dim=mdl.dim), t0, t1, cfg)
            w.text("flow.csv", flow_to_csv(flow))
            w.binary("flow.bin", flow_to_bytes(flow))
            summary = _flow_summary(flow)
            w.json("summary.json", summary)
            if spec.emit_plots:
                _plot_flow(w, out, summary)

        elif spec.command == "entrance":
            flow, report = entrance_mod.pullback_entrance(mdl, None, spec.window, spec.anchor, tol, cfg)
            w.text("flow.csv", flow_to_csv(flow))
            w.binary("flow.bin", flow_to_bytes(flow))
            w.json("pullback_report.json", report.to_dict())
            if not report.converged:
                exit_code = 2
                notes.append("pull-back did not reach tolerance")

        elif spec.command == "fixed_point":
            flow, report = entrance_mod.solve_fixed_point(
                mdl, spec.window, spec.anchor, tol, spec.max_iter, cfg
            )
            w.text("flow.csv", flow_to_csv(flow))
            w.binary("flow.bin", flow_to_bytes(flow))
            w.json("fixed_point_report.json", report.to_dict())
            summary = _flow_summary(flow)
            w.json("summary.json", summary)
            if spec.emit_plots:
                _plot_flow(w, out, summary)
                _plot_residuals(w, out, report.residuals)
            if not report.converged:
                exit_code = 2
                notes.append("fixed point did not converge")

        elif spec.command == "lift_invariance":
            if mdl.qp is None or mdl.qp.n != 1:
                raise SpecValidationError("model", "lift_invariance needs a model with one period")
            tau = mdl.qp.periods[0]
            flow, report = entrance_mod.solve_fixed_point(
                mdl, spec.window, spec.anchor, tol, spec.max_iter, cfg
            )
            if not report.converged:
                exit_code = 2
                notes.append("fixed point did not converge")
            pflow = measure.with_extension(flow, "periodic", tau)
            opts = spec.lift_options
            mu_hat = lift.cesaro_lift(pflow, opts["T_multiple"] * tau, (tau,))
            ts = [frac * tau for frac in opts["t_checks"]]
            residuals = lift.invariance_residual(
                mdl, mu_hat, ts, cfg, n_samples=int(opts["n_samples"]), threads=threads
            )
            w.text("lifted.csv", lift.lifted_to_csv(mu_hat))
            w.json("lifted_summary.json", lift.lifted_summary(mu_hat))
            w.json(
                "invariance.json",
                {"t_checks": [float(t) for t in ts], "residuals": [float(r) for r in residuals]},
            )

        elif spec.command == "qp_rep":
            if mdl.qp is None:
                raise SpecValidationError("model", "qp_rep needs a quasi-periodic model")
            opts = spec.lift_options
            grid = lift.uniform_base_grid(mdl.qp.periods, int(opts["resolution"]))
            mu_hat, report = lift.qp_representation(
                mdl, grid, spec.window, spec.anchor, tol, cfg, max_iter=spec.max_iter, threads=threads
            )
            w.json("qp_report.json", report)
            if mu_hat is not None:
                w.text("lifted.csv", lift.lifted_to_csv(mu_hat))
                summary = lift.lifted_summary(mu_hat)
                w.json("lifted_summary.json", summary)
                if spec.emit_plots:
                    _plot_torus(w, out, summary)
            if report["n_converged"] < report["n_bases"]:
                exit_code = 2
                notes.append("some bases did not converge; partial representation written")

        elif spec.command == "check":
            profile = _profile_from_table(spec.profile)
            report = verify.check_assumptions(mdl, profile)
            w.json("assumptions.json", report.to_dict())
            lines = ["name,worst_margin,n_samples,passed,required"]
            for row in report.rows:
                lines.append(
                    f"{row.name},{row.worst_margin!r},{row.n_samples},{row.passed},{row.required}"
                )
            w.text("margins.csv", "\n".join(lines) + "\n")

        elif spec.command == "bistable":
            params = _cw_params(spec)
            report = verify.multistability_run(
                params, spec.anchors, spec.thetas, spec.window, tol, cfg,
                max_iter=spec.max_iter, threads=threads,
            )
            w.json("bistability_report.json", report.to_dict())
            if any(not e["converged"] for e in report.anchors) and report.classification != "balls-overlap":
                exit_code = 2
                notes.append("at least one anchor solver did not converge")

    except BlowUpError as exc:
        notes.append(str(exc))
        art = ArtifactSet(str(out), w.files, exit_code=4, partial=True, notes=notes)
        w.json("manifest.json", art.to_dict())
        return art

    art = ArtifactSet(str(out), w.files, exit_code=exit_code, partial=exit_code != 0, notes=notes)
    w.json("manifest.json", art.to_dict())
    return art


# ---------------------------------------------------------------------------
# Plot emission (SVG + CSV twin with exactly the plotted numbers)
# ---------------------------------------------------------------------------

def emit_plot(data: dict, kind: str, path) -> str:
    """Write a self-contained SVG plot plus a CSV twin of the plotted numbers."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mckv"
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    csv_lines = []
    try:
        if kind == "flow_mean_band":
            ts, means, stds = data["t"], data["mean"], data["std"]
            if len(ts) == 0:
                raise ConstructionError("empty series")
            ax.plot(ts, means, marker="o" if len(ts) < 3 else None, lw=1.5)
            lo = [m - s for m, s in zip(means, stds)]
            hi = [m + s for m, s in zip(means, stds)]
            ax.fill_between(ts, lo, hi, alpha=0.25)
            ax.set_xlabel("t")
            ax.set_ylabel("mean (band: +- std)")
            csv_lines = ["t,mean,std"] + [f"{t!r},{m!r},{s!r}" for t, m, s in zip(ts, means, stds)]
        elif kind == "residual_history":
            res = data["residuals"]
            if len(res) == 0:
                raise ConstructionError("empty series")
            its = list(range(1, len(res) + 1))
            ax.semilogy(its, res, marker="o")
            mono = all(b <= a for a, b in zip(res, res[1:]))
            ax.set_title("residuals" + (" (monotone)" if mono else " (non-monotone)"))
            ax.set_xlabel("iterate")
            ax.set_ylabel("window-sup W2 residual")
            csv_lines = ["iterate,residual"] + [f"{i},{r!r}" for i, r in zip(its, res)]
        elif kind == "torus_heatmap":
            bases, values = data["bases"], data["values"]
            if len(values) == 0:
                raise ConstructionError("empty series")
            arr = np.asarray(values, dtype=float)[None, :]
            im = ax.imshow(arr, aspect="auto", interpolation="nearest")
            fig.colorbar(im, ax=ax)
            ax.set_yticks([])
            ax.set_xlabel("base index")
            csv_lines = ["base,value"] + [
                f"{'/'.join(repr(c) for c in np.atleast_1d(b))},{v!r}" for b, v in zip(bases, values)
            ]
        else:
            raise ConstructionError(f"unknown plot kind {kind!r}")
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    Path(str(path) + ".csv").write_text("\n".join(csv_lines) + "\n")
    return str(path)


def _plot_flow(w: _Writer, out: Path, summary: dict):
    nodes = summary["nodes"]
    data = {
        "t": [n["t"] for n in nodes],
        "mean": [n["mean"][0] for n in nodes],
        "std": [math.sqrt(max(n["variance"], 0.0)) for n in nodes],
    }
    emit_plot(data, "flow_mean_band", out / "flow_mean_band.svg")
    for name in ("flow_mean_band.svg", "flow_mean_band.svg.csv"):
        w.files[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()


def _plot_residuals(w: _Writer, out: Path, residuals):
    if not residuals:
        return
    emit_plot({"residuals": list(residuals)}, "residual_history", out / "residual_history.svg")
    for name in ("residual_history.svg", "residual_history.svg.csv"):
        w.files[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()


def _plot_torus(w: _Writer, out: Path, summary: dict):
    data = {
        "bases": [f["base"] for f in summary["fibers"]],
        "values": [f["mean"][0] for f in summary["fibers"]],
    }
    emit_plot(data, "torus_heatmap", out / "torus_heatmap.svg")
    for name in ("torus_heatmap.svg", "torus_heatmap.svg.csv"):
        w.files[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mckv", description="mean-field SDE measure toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--spec", required=True, help="path to the JSON run spec")
    parser.add_argument("--seed", type=int, default=None, help="override sim.seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (env MCKV_THREADS)")
    args = parser.parse_args(argv)

    try:
        spec = load_spec(args.spec)
        if spec.command != args.command:
            raise SpecValidationError("command", f"spec says {spec.command!r}, CLI asked for {args.command!r}")
        art = execute(spec, out_dir=args.out, seed=args.seed, threads=args.threads)
    except (SpecValidationError, ConstructionError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return 4
    for name in sorted(art.files):
        print(f"{art.files[name][:12]}  {name}")
    if art.notes:
        for note in art.notes:
            print(f"note: {note}", file=sys.stderr)
    return art.exit_code


if __name__ == "__main__":
    sys.exit(main())
