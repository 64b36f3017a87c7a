"""Experiment driver: ``torus-qve run|validate|list-presets``.

A manifest is a JSON document (see ``SCHEMA``) naming a kernel, sizes, solver
and sampling options, and a list of analyses. ``run`` resolves the analyses
into a dependency-ordered plan, executes it per size, and writes a bundle:

    manifest.json      copy of the input (after --seed override)
    provenance.json    seed, version, rng, timestamps
    summary.json       pass/fail per check
    N<size>/...        per-analysis CSV and JSON outputs

Exit codes: 0 all checks pass, 1 a check failed, 2 invalid input.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import defaults
from . import ensemble as ens
from . import qve
from . import spectral_lab as lab
from . import torus_kernel as tk

SCHEMA_VERSION = "torus_qve.experiment/1"
OUTPUT_ENV = "TORUS_QVE_OUTPUT"

ANALYSES = ("certify", "qve", "density", "qprofile", "sample", "locallaw", "universality", "delocalization", "scaling")
PREREQUISITES = {
    "certify": (),
    "qve": (),
    "density": ("qve",),
    "qprofile": (),
    "sample": (),
    "locallaw": ("sample",),
    "universality": ("density", "sample"),
    "delocalization": ("sample",),
    "scaling": (),
}

SCHEMA = {
    "type": "object",
    "required": ["schema", "kernel", "sizes", "analyses"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "kernel": {
            "type": "object",
            "required": ["preset"],
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": list(tk.PRESETS)},
                "params": {"type": "object"},
            },
        },
        "sizes": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
        "symmetry_class": {"enum": list(tk.SYMMETRY_CLASSES)},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "eta_start": {"type": "number", "exclusiveMinimum": 0},
                "eta_stop": {"type": "number", "exclusiveMinimum": 0},
                "eta_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "eta_star": {"type": "number", "exclusiveMinimum": 0},
                "gamma": {"type": "number"},
                "tau": {
                    "type": "object",
                    "required": ["start", "stop", "step"],
                    "properties": {"start": {"type": "number"}, "stop": {"type": "number"}, "step": {"type": "number", "exclusiveMinimum": 0}},
                },
                "qprofile_z": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}}},
                "locallaw_tau": {"type": "array", "items": {"type": "number"}},
            },
        },
        "sampling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"count": {"type": "integer", "minimum": 0}, "seed": {"type": "integer", "minimum": 0}},
        },
        "analyses": {"type": "array", "items": {"enum": list(ANALYSES)}, "uniqueItems": True},
        "output": {"type": "string"},
    },
}


class ManifestError(ValueError):
    pass


def _version() -> str:
    try:
        return metadata.version("torus-qve")
    except metadata.PackageNotFoundError:
        return "unknown"


# --------------------------------------------------------------------------
# validation and planning
# --------------------------------------------------------------------------


def load_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from exc


def resolve_plan(analyses) -> list:
    """Requested analyses plus their prerequisites, in dependency order."""
    plan = []

    def visit(a):
        for pre in PREREQUISITES[a]:
            visit(pre)
        if a not in plan:
            plan.append(a)

    for a in ANALYSES:  # canonical order keeps the plan deterministic
        if a in analyses:
            visit(a)
    return plan


def validate_manifest(m: dict) -> list:
    """Return the list of diagnostics (empty when the manifest is valid)."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(m), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        return [f"{path}: {e.message}"]
    diags = []
    solver = m.get("solver", {})
    gamma = solver.get("gamma", defaults.GAMMA)
    if not 0 < gamma < 1:
        diags.append(f"solver/gamma: {gamma} violates the tolerance exponent γ ∈ (0,1) constraint")
    plan = resolve_plan(m["analyses"])
    count = m.get("sampling", {}).get("count", 0)
    if "sample" in plan and count < 1:
        users = [a for a in m["analyses"] if "sample" in resolve_plan([a]) and a != "sample"]
        who = ", ".join(users) or "sample"
        diags.append(f"sampling/count: the sample stage needs count >= 1 (required by {who})")
    if "scaling" in m["analyses"]:
        if len(set(m["sizes"])) < 4:
            diags.append("sizes: scaling needs at least 4 distinct sizes")
        if not {"locallaw", "delocalization"} & set(m["analyses"]):
            diags.append("analyses: scaling needs locallaw or delocalization")
    tau = solver.get("tau")
    if tau and tau["stop"] <= tau["start"]:
        diags.append("solver/tau: stop must exceed start")
    if solver.get("eta_stop", defaults.ETA_STOP) > solver.get("eta_start", defaults.ETA_START):
        diags.append("solver/eta_stop: must not exceed eta_start")
    kernel = m["kernel"]
    cls = m.get("symmetry_class", "real_symmetric")
    for N in sorted(set(m["sizes"])):
        try:
            tk.build_kernel(kernel["preset"], kernel.get("params", {}), N, cls)
        except (tk.KernelError, ValueError, KeyError, TypeError) as exc:
            diags.append(f"kernel: N={N}: {exc}")
            break
        if N > defaults.MAX_EIGEN_N and {"locallaw", "universality", "delocalization"} & set(plan):
            diags.append(f"sizes: N={N} exceeds the eigensolver cap {defaults.MAX_EIGEN_N}")
    return diags


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------


def _solver_options(m: dict) -> qve.SolverOptions:
    s = m.get("solver", {})
    return qve.SolverOptions(tol=s.get("tol", defaults.QVE_TOL), max_iter=s.get("max_iter", defaults.QVE_MAX_ITER))


def _tau_grid(m: dict) -> np.ndarray:
    t = m.get("solver", {}).get("tau", {"start": -3.0, "stop": 3.0, "step": 0.01})
    n = int(round((t["stop"] - t["start"]) / t["step"]))
    return np.round(t["start"] + t["step"] * np.arange(n + 1), 12)


def _etas(m: dict) -> list:
    s = m.get("solver", {})
    etas = defaults.eta_schedule(s.get("eta_start", defaults.ETA_START), s.get("eta_stop", defaults.ETA_STOP), s.get("eta_ratio", defaults.ETA_RATIO))
    star = s.get("eta_star", defaults.ETA_STAR)
    if not any(np.isclose(e, star, rtol=1e-9) for e in etas):
        etas = sorted(set(etas) | {star}, reverse=True)
    return etas


def _check(name: str, passed: bool, detail) -> dict:
    return {"check": name, "passed": bool(passed), "detail": detail}


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_size(m: dict, N: int, out: Path) -> dict:
    """Execute the per-size part of the plan; returns checks and scalars."""
    plan = resolve_plan(m["analyses"])
    d = out / f"N{N}"
    d.mkdir(parents=True, exist_ok=True)
    cls = m.get("symmetry_class", "real_symmetric")
    kernel = m["kernel"]
    pair = tk.build_kernel(kernel["preset"], kernel.get("params", {}), N, cls)
    symbol = tk.fourier_symbol(pair)
    opts = _solver_options(m)
    solver = m.get("solver", {})
    gamma = solver.get("gamma", defaults.GAMMA)
    sampling = m.get("sampling", {})
    count, seed = sampling.get("count", 0), sampling.get("seed", 0)
    checks, scalars = [], {"N": N}
    solution = dens = stream = None

    for stage in plan:
        if stage == "certify":
            certs = {"bochner": tk.check_bochner(symbol)}
            try:
                certs["R2"] = tk.check_nonresonance_r2(symbol)
            except tk.StructureError as exc:
                certs["R2_error"] = str(exc)
            try:
                certs["R1"] = tk.check_nonresonance_r1(pair)
            except tk.StructureError as exc:
                certs["R1_error"] = str(exc)
            if cls == "complex_hermitian":
                certs["ab_compatibility"] = tk.check_ab_compatibility(symbol, 0.0)
            _dump(d / "certificates.json", {k: (v.to_json() if hasattr(v, "to_json") else v) for k, v in certs.items()})
            checks.append(_check("certify.bochner", certs["bochner"].holds, certs["bochner"].witness))
            if "ab_compatibility" in certs:
                checks.append(_check("certify.ab_compatibility", certs["ab_compatibility"].holds, certs["ab_compatibility"].witness))
        elif stage == "qve":
            solution = qve.solve_qve_grid(symbol, _tau_grid(m), _etas(m), opts)
            solution.write_csv(d / "qve_solution.csv", phi_stride=max(1, N // 16))
            _dump(d / "qve_summary.json", solution.summary())
            checks.append(_check("qve.converged", not solution.failed, {"failed_points": solution.failed[:10]}))
        elif stage == "density":
            dens = qve.density(solution, solver.get("eta_star", defaults.ETA_STAR))
            try:
                qve.support_and_edge(dens)
            except qve.FitError as exc:
                checks.append(_check("density.edge_fit", False, str(exc)))
            dens.write_csv(d / "density.csv")
            _dump(d / "density_summary.json", dens.summary())
            scalars.update(rho0=float(dens(0.0)), beta=dens.beta, edge_exponent=dens.edge_exponent)
            checks.append(_check("density.mass", abs(dens.mass - 1) <= 1e-2, {"mass": dens.mass}))
        elif stage == "qprofile":
            zs = [complex(a, b) for a, b in solver.get("qprofile_z", [[0.0, 1.0]])]
            prof = qve.q_profile_direct(symbol, zs, opts)
            prof.write_csv(d / "qprofile.csv")
            fits = []
            for k in range(len(zs)):
                try:
                    fits.append(qve.q_decay_fit(prof, "exponential", k))
                except qve.FitError as exc:
                    fits.append({"error": str(exc)})
            _dump(d / "qprofile_fit.json", {"z": zs, "fits": fits})
            checks.append(_check("qprofile.finite", bool(np.all(np.isfinite(prof.q))), {}))
        elif stage == "sample":
            stream = ens.StreamBatch(symbol, cls, count, seed)
            if count >= 100:
                batch = stream.materialize() if N <= 64 else None
                if batch is not None:
                    rep = ens.empirical_covariance(batch, pair)
                    _dump(d / "covariance.json", {k: v for k, v in rep.items() if k != "rows"})
                    checks.append(_check("sample.covariance", rep["passes"], {"max_studentized": rep["max_studentized"]}))
        elif stage == "locallaw":
            eta = N ** (gamma - 1)
            zs = [complex(t, eta) for t in solver.get("locallaw_tau", [0.0])]
            prof = qve.q_profile_direct(symbol, zs, opts)
            rep = lab.local_law_report(stream, prof, zs, gamma, profile_symbol=symbol)
            rep.write_csv(d / "locallaw.csv")
            rep.write_json(d / "locallaw.json")
            med = max(a["trace_ratio_median"] for a in rep.aggregates)
            scalars["trace_q90"] = max(a["trace_error_q90"] for a in rep.aggregates)
            scalars["trace_errors"] = [r["trace_error"] for r in rep.rows]
            checks.append(_check("locallaw.trace_median", med <= 10, {"median_ratio": med}))
        elif stage == "universality":
            ref = ens.StreamBatch(symbol, cls, count, seed + 1, reference=True)
            ga = lab.gap_statistics(stream, dens)
            gr = lab.gap_statistics(ref, lab.semicircle_density())
            ga.write_csv(d / "gaps.csv")
            gr.write_csv(d / "gaps_reference.csv")
            cmp_ = lab.universality_compare(ga, gr, min_gaps=1)
            _dump(d / "universality.json", cmp_)
            checks.append(_check("universality.ks", cmp_["max_ks"] <= 0.05, {"ks": cmp_["max_ks"], "gaps": int(ga.gaps[1].size)}))
        elif stage == "delocalization":
            rep = lab.delocalization_report(stream)
            rows = [{"replica": r["replica"], "scaled_sup": r["scaled_sup"], **{f"proj_{k}": v for k, v in enumerate(r["scaled_proj"])}} for r in rep["rows"]]
            lab._write_rows(d / "delocalization.csv", rows)
            _dump(d / "delocalization.json", {k: v for k, v in rep.items() if k != "rows"})
            scalars["deloc"] = {k: v for k, v in rep.items() if k != "rows"}
            checks.append(_check("delocalization.not_localized", not rep["localized"], {"scaled_sup_q90": rep["scaled_sup_q90"]}))
    return {"N": N, "checks": checks, "scalars": scalars}


def _scaling(m: dict, results: list, out: Path) -> list:
    checks = []
    gamma = m.get("solver", {}).get("gamma", defaults.GAMMA)
    table = {}
    if "locallaw" in m["analyses"]:
        vals = {r["N"]: r["scalars"]["trace_errors"] for r in results}
        fit = lab.scaling_fit(vals, -gamma, min_replicas=1)
        table["trace_error"] = fit.to_json()
        checks.append(_check("scaling.trace_error", fit.passes, {"fitted": fit.fitted_exponent, "predicted": -gamma}))
    if "delocalization" in m["analyses"]:
        sc = lab.delocalization_scaling([r["scalars"]["deloc"] for r in results])
        table["delocalization"] = sc
        checks.append(_check("scaling.delocalization", sc["passes"], sc))
    _dump(out / "scaling.json", table)
    return checks


def bundle_dir(m: dict, manifest_path, out_override=None) -> Path:
    root = out_override or m.get("output") or os.environ.get(OUTPUT_ENV) or "results"
    name = m.get("name") or Path(manifest_path).stem
    return Path(root) / name


def run(manifest_path, out=None, seed=None, jobs: int = 1) -> int:
    try:
        m = load_manifest(manifest_path)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if seed is not None:
        m = copy.deepcopy(m)
        m.setdefault("sampling", {})["seed"] = int(seed)
    diags = validate_manifest(m)
    if diags:
        print(f"error: {diags[0]}", file=sys.stderr)
        return 2
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    d = bundle_dir(m, manifest_path, out)
    d.mkdir(parents=True, exist_ok=True)
    _dump(d / "manifest.json", m)
    sizes = sorted(set(m["sizes"]))
    per_size = [a for a in resolve_plan(m["analyses"]) if a != "scaling"]
    results = []
    if per_size:
        if jobs > 1 and len(sizes) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(run_size, [m] * len(sizes), sizes, [d] * len(sizes)))
        else:
            results = [run_size(m, N, d) for N in sizes]
    checks = [dict(c, N=r["N"]) for r in results for c in r["checks"]]
    if "scaling" in m["analyses"]:
        checks += _scaling(m, results, d)
    scalars = [{k: v for k, v in r["scalars"].items() if k not in ("trace_errors", "deloc")} for r in results]
    passed = all(c["passed"] for c in checks)
    _dump(d / "summary.json", {"passed": passed, "checks": checks, "results": scalars})
    _dump(d / "provenance.json", {
        "seed": m.get("sampling", {}).get("seed", 0),
        "version": _version(),
        "rng": ens.RNG_NAME,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "defaults": defaults.DEFAULTS,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })
    if not passed:
        failing = [c["check"] + (f" (N={c['N']})" if "N" in c else "") for c in checks if not c["passed"]]
        print(f"check failed: {failing[0]}", file=sys.stderr)
        return 1
    print(f"ok: {d}")
    return 0


def validate(manifest_path) -> int:
    try:
        m = load_manifest(manifest_path)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    diags = validate_manifest(m)
    for msg in diags:
        print(f"error: {msg}", file=sys.stderr)
    if not diags:
        print(f"valid: plan = {resolve_plan(m['analyses'])}")
    return 2 if diags else 0


PRESET_HELP = {
    "delta": ("(none)", "a = b = delta_{x0} delta_{y0}; flat symbol, semicircle law"),
    "factorized_exp": ("nu", "a_xy = exp(-nu(|x|+|y|)) normalized; rank-one symbol"),
    "power_law": ("kappa", "a_xy = (1+|x|+|y|)^-(kappa+3) normalized"),
    "custom_table": ("a[, b]", "user-supplied N x N tables"),
}


def list_presets() -> str:
    lines = [f"{'preset':<16}{'params':<10}description"]
    for name in tk.PRESETS:
        params, desc = PRESET_HELP.get(name, ("", ""))
        lines.append(f"{name:<16}{params:<10}{desc}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="torus-qve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment manifest")
    p_run.add_argument("manifest")
    p_run.add_argument("--out", help=f"output root (default: manifest 'output', ${OUTPUT_ENV}, or ./results)")
    p_run.add_argument("--seed", type=int, help="override the sampling seed")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel workers across sizes")
    p_val = sub.add_parser("validate", help="check a manifest without running it")
    p_val.add_argument("manifest")
    sub.add_parser("list-presets", help="show kernel presets")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.manifest, args.out, args.seed, args.jobs)
    if args.command == "validate":
        return validate(args.manifest)
    print(list_presets())
    return 0


if __name__ == "__main__":
    sys.exit(main())
