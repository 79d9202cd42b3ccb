"""Command-line entry point: solve | optimize | diagnose | sweep-p.

Configs are line-based key=value files with [section] headers. Every run
directory receives a manifest.json recording the config echo, version,
seed, wall time and sha256 hashes of the artifacts; --check re-runs the
config into a scratch directory and verifies those hashes. Exit codes:
0 success, 1 numerical failure (partial artifacts retained), 2 usage or
validation errors.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import dataclasses
import hashlib
import json
import math
import pathlib
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .diagnostics import (
    classify_boundary,
    el_residual,
    scaling_check,
    simplicity_report,
    torsion_probe,
    weiss_profile,
    write_weiss_csv,
)
from .domain import (
    Grid,
    GridDomain,
    difference,
    disk,
    extract_boundary,
    read_grid_dump,
    read_field_dump,
    rectangle,
    star_blob,
    volume,
    write_boundary_csv,
    write_grid_dump,
)
from .objective import (
    ObjectiveSpec,
    PenaltySpec,
    RegularizationParams,
    WeightVector,
    kappa_clusters,
)
from .optimizer import (
    OptimizeAborted,
    OptimizerConfig,
    optimize,
    p_continuation,
    write_trace_csv,
)
from .spectral import (
    SpectralError,
    Spectrum,
    solve_spectrum,
    solve_torsion,
    write_spectrum_csv,
)

VERSION_STRING = f"v{__version__}"


class ConfigError(Exception):
    """Anything wrong with a config file or its referenced paths."""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def load_config(path) -> configparser.ConfigParser:
    p = pathlib.Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(p) as f:
            cp.read_file(f)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {p}: {err}") from err
    return cp


def _get(cp, section, key, cast, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    raw = cp.get(section, key).strip()
    try:
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from err


def build_grid(cp) -> Grid:
    x0 = _get(cp, "grid", "x0", float, -2.0)
    y0 = _get(cp, "grid", "y0", float, -2.0)
    x1 = _get(cp, "grid", "x1", float, 2.0)
    y1 = _get(cp, "grid", "y1", float, 2.0)
    nx = _get(cp, "grid", "nx", int, 257)
    ny = _get(cp, "grid", "ny", int, 257)
    if nx < 8 or ny < 8:
        raise ConfigError(f"grid too small: nx={nx} ny={ny}")
    try:
        return Grid.from_box(x0, y0, x1, y1, nx, ny)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def build_shape(cp, seed: int) -> GridDomain:
    kind = _get(cp, "shape", "kind", str, required=True)
    if kind == "file":
        path = pathlib.Path(_get(cp, "shape", "path", str, required=True))
        if not path.is_file():
            raise ConfigError(f"domain dump not found: {path}")
        return read_grid_dump(path)
    grid = build_grid(cp)
    cx = _get(cp, "shape", "cx", float, 0.0)
    cy = _get(cp, "shape", "cy", float, 0.0)
    if kind == "disk":
        return disk(grid, (cx, cy), _get(cp, "shape", "r", float, 1.0))
    if kind == "square":
        half = 0.5 * _get(cp, "shape", "side", float, 2.0)
        return rectangle(grid, cx - half, cy - half, cx + half, cy + half)
    if kind == "rectangle":
        return rectangle(
            grid,
            _get(cp, "shape", "x0", float, required=True),
            _get(cp, "shape", "y0", float, required=True),
            _get(cp, "shape", "x1", float, required=True),
            _get(cp, "shape", "y1", float, required=True),
        )
    if kind == "lshape":
        half = 0.5 * _get(cp, "shape", "side", float, 2.0)
        box = rectangle(grid, cx - half, cy - half, cx + half, cy + half)
        notch = rectangle(grid, cx, cy, cx + half + grid.h, cy + half + grid.h)
        return difference(box, notch)
    rng = np.random.default_rng(seed)
    r0 = _get(cp, "shape", "r0", float, 0.9)
    amp = _get(cp, "shape", "amp", float, 0.2)
    n_modes = _get(cp, "shape", "modes", int, 5)
    if kind == "blob":
        mirror = _get(cp, "shape", "mirror", bool, False)
        return star_blob(grid, (cx, cy), r0, amp, n_modes, rng, mirror_x=mirror)
    if kind == "two_blobs":
        sep = _get(cp, "shape", "sep", float, 2.1)
        left = star_blob(grid, (-0.5 * sep, cy), r0, amp, n_modes, rng,
                         mirror_x=True)
        # exact mirror image about x = 0 on a symmetric node lattice
        phi = np.minimum(left.phi, left.phi[:, ::-1])
        return GridDomain(grid, phi)
    raise ConfigError(f"unknown shape kind {kind!r}")


def build_objective(cp) -> ObjectiveSpec:
    family = _get(cp, "objective", "family", str, "single")
    n = _get(cp, "objective", "n", int, 1)
    kwargs = {}
    if family == "single":
        kwargs["index"] = _get(cp, "objective", "index", int, n)
    elif family == "linear":
        raw = _get(cp, "objective", "coeffs", str, required=True)
        kwargs["coeffs"] = tuple(float(v) for v in raw.split())
    elif family == "softmin":
        raw = _get(cp, "objective", "subset", str, None)
        if raw is not None:
            kwargs["subset"] = tuple(int(v) for v in raw.split())
        kwargs["beta"] = _get(cp, "objective", "beta", float, 1.0)
    try:
        return ObjectiveSpec(family=family, n=n, **kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def build_optimizer(cp, spec: ObjectiveSpec, seed: int) -> OptimizerConfig:
    ref_path = _get(cp, "penalty", "reference", str, None)
    reference = None
    if ref_path is not None:
        ref_file = pathlib.Path(ref_path)
        if not ref_file.is_file():
            raise ConfigError(f"penalty reference dump not found: {ref_file}")
        reference = read_grid_dump(ref_file)
    pen = PenaltySpec(s=_get(cp, "penalty", "s", float, 0.0), reference=reference)
    try:
        reg = RegularizationParams(
            p=_get(cp, "regularization", "p", float, 32.0),
            quad_nodes=_get(cp, "regularization", "quad_nodes", int, 4),
        )
        return OptimizerConfig(
            spec=spec,
            reg=reg,
            pen=pen,
            dt0=_get(cp, "optimizer", "dt0", float, 0.5),
            max_steps=_get(cp, "optimizer", "max_steps", int, 200),
            conv_tol=_get(cp, "optimizer", "conv_tol", float, 1e-6),
            reinit_every=_get(cp, "optimizer", "reinit_every", int, 5),
            seed=seed,
            eig_tol=_get(cp, "optimizer", "eig_tol", float, 1e-8),
            modes=_get(cp, "optimizer", "modes", int, None),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _sha256(path: pathlib.Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_echo(cp) -> dict:
    return {s: dict(cp.items(s)) for s in cp.sections()}


def write_manifest(out: pathlib.Path, cp, command: str, seed: int,
                   wall: float, extra: dict) -> None:
    artifacts = {
        p.name: _sha256(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "name": _get(cp, "run", "name", str, out.name) if cp.has_section("run") else out.name,
        "version": VERSION_STRING,
        "command": command,
        "seed": seed,
        "wall_time_s": wall,
        "config": _config_echo(cp),
        "artifacts": artifacts,
    }
    manifest.update(extra)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def write_xi_csv(w: WeightVector, path) -> None:
    with open(path, "w") as f:
        f.write("k,xi\n")
        for k, val in enumerate(w.xi, start=1):
            f.write(f"{k},{repr(float(val))}\n")


def _write_spectrum_artifacts(out: pathlib.Path, d: GridDomain, sp: Spectrum) -> None:
    write_spectrum_csv(sp, out / "spectrum.csv")
    from .domain import write_field_dump

    for k in range(len(sp)):
        write_field_dump(d.grid, sp.modes[k], out / f"mode_{k + 1}.grid")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(cp, out: pathlib.Path, seed: int) -> int:
    d = build_shape(cp, seed)
    M = _get(cp, "solve", "modes", int, 3)
    if M < 1:
        raise ConfigError(f"[solve] modes must be >= 1, got {M}")
    tol = _get(cp, "solve", "tol", float, 1e-8)
    t0 = time.perf_counter()
    try:
        sp = solve_spectrum(d, M, tol=tol, seed=seed)
    except (SpectralError, ValueError) as err:
        print(f"eigensolver failed: {err}", file=sys.stderr)
        write_grid_dump(d, out / "domain.grid")
        write_manifest(out, cp, "solve", seed, time.perf_counter() - t0,
                       {"converged": False})
        return 1
    write_grid_dump(d, out / "domain.grid")
    _write_spectrum_artifacts(out, d, sp)
    write_boundary_csv(extract_boundary(d), out / "boundary.csv")
    if _get(cp, "solve", "torsion", bool, True):
        from .domain import write_field_dump

        tf = solve_torsion(d, tol=tol)
        write_field_dump(d.grid, tf.v, out / "torsion.grid")
    write_manifest(out, cp, "solve", seed, time.perf_counter() - t0,
                   {"converged": True,
                    "lambdas": [float(v) for v in sp.lambdas]})
    return 0


def cmd_optimize(cp, out: pathlib.Path, seed: int) -> int:
    d0 = build_shape(cp, seed)
    spec = build_objective(cp)
    cfg = build_optimizer(cp, spec, seed)
    t0 = time.perf_counter()
    try:
        trace = optimize(cfg, d0)
        code = 0
    except OptimizeAborted as err:
        print(f"optimize aborted: {err}", file=sys.stderr)
        trace = err.trace
        code = 1
    except ValueError as err:
        raise ConfigError(str(err)) from err
    write_trace_csv(trace, out / "trace.csv", spec.n)
    extra = {"converged": bool(trace.converged), "stalled": bool(trace.stalled)}
    if trace.domain is not None:
        write_grid_dump(trace.domain, out / "domain.grid")
        write_boundary_csv(extract_boundary(trace.domain), out / "boundary.csv")
        _write_spectrum_artifacts(out, trace.domain, trace.spectrum)
        write_xi_csv(trace.weights, out / "xi.csv")
        final = trace.records[-1]
        extra.update(
            objective=final.objective,
            objective_F=trace.objective_F,
            volume=final.volume,
            lambdas=list(final.lambdas),
        )
    write_manifest(out, cp, "optimize", seed, time.perf_counter() - t0, extra)
    return code


def cmd_sweep_p(cp, out: pathlib.Path, seed: int) -> int:
    d0 = build_shape(cp, seed)
    spec = build_objective(cp)
    cfg = build_optimizer(cp, spec, seed)
    raw = _get(cp, "sweep", "schedule", str, "4 8 16 32")
    try:
        schedule = [float(v) for v in raw.split()]
    except ValueError as err:
        raise ConfigError(f"bad [sweep] schedule: {raw!r}") from err
    if not schedule:
        raise ConfigError("empty [sweep] schedule")
    t0 = time.perf_counter()
    try:
        traces = p_continuation(cfg, d0, schedule)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    stages = []
    with open(out / "xi_trace.csv", "w") as f:
        f.write("p,k,xi\n")
        for p, tr in zip(schedule, traces):
            write_trace_csv(tr, out / f"trace_p{p:g}.csv", spec.n)
            if tr.weights is not None:
                for k, val in enumerate(tr.weights.xi, start=1):
                    f.write(f"{p:g},{k},{repr(float(val))}\n")
            final = tr.records[-1]
            stages.append({
                "p": p,
                "converged": bool(tr.converged),
                "stalled": bool(tr.stalled),
                "objective": final.objective,
                "objective_F": tr.objective_F,
                "E": final.E,
                "lambdas": list(final.lambdas),
            })
    code = 0 if len(traces) == len(schedule) and traces[-1].domain is not None else 1
    last = traces[-1] if traces else None
    if last is not None and last.domain is not None:
        write_grid_dump(last.domain, out / "domain.grid")
        _write_spectrum_artifacts(out, last.domain, last.spectrum)
        write_xi_csv(last.weights, out / "xi.csv")
    write_manifest(out, cp, "sweep-p", seed, time.perf_counter() - t0,
                   {"stages": stages})
    return code


def _load_diagnose_inputs(cp):
    dom_path = pathlib.Path(_get(cp, "diagnose", "domain", str, required=True))
    spec_path = pathlib.Path(_get(cp, "diagnose", "spectrum", str, required=True))
    xi_path = pathlib.Path(_get(cp, "diagnose", "xi", str, required=True))
    for p in (dom_path, spec_path, xi_path):
        if not p.is_file():
            raise ConfigError(f"input not found: {p}")
    d = read_grid_dump(dom_path)
    lambdas, resid = [], []
    with open(spec_path) as f:
        header = f.readline()
        if not header.startswith("k,lambda"):
            raise ConfigError(f"{spec_path} is not a spectrum CSV")
        for line in f:
            _, lam, rs = line.strip().split(",")
            lambdas.append(float(lam))
            resid.append(float(rs))
    modes = []
    for k in range(1, len(lambdas) + 1):
        mode_path = spec_path.parent / f"mode_{k}.grid"
        if not mode_path.is_file():
            raise ConfigError(f"input not found: {mode_path}")
        grid, field = read_field_dump(mode_path)
        if grid != d.grid:
            raise ConfigError(
                f"grid header of {mode_path} does not match {dom_path}"
            )
        modes.append(field)
    sp = Spectrum(
        lambdas=np.array(lambdas),
        modes=np.stack(modes),
        resid=np.array(resid),
        generation=d.generation,
    )
    xi = []
    with open(xi_path) as f:
        header = f.readline()
        if not header.startswith("k,xi"):
            raise ConfigError(f"{xi_path} is not a weight CSV")
        for line in f:
            _, val = line.strip().split(",")
            xi.append(float(val))
    if len(xi) > len(lambdas):
        raise ConfigError(
            f"{xi_path} lists {len(xi)} weights but only {len(lambdas)} modes exist"
        )
    kappa = np.array(lambdas[: len(xi)])
    w = WeightVector(
        xi=np.array(xi),
        cluster_tags=kappa_clusters(kappa),
        pen=PenaltySpec(s=0.0),
    )
    return d, sp, w


def cmd_diagnose(cp, out: pathlib.Path, seed: int) -> int:
    t0 = time.perf_counter()
    d, sp, w = _load_diagnose_inputs(cp)
    h = d.grid.h
    bm = extract_boundary(d)
    report: dict = {
        "n_boundary": int(len(bm)),
        "lambdas": [float(v) for v in sp.lambdas],
        "xi": [float(v) for v in w.xi],
        "xi_symmetrized": [float(v) for v in w.symmetrized()],
        "simplicity": dataclasses.asdict(simplicity_report(sp)),
    }
    if len(bm) > 0:
        el = el_residual(d, sp, w, bm)
        report["el_residual"] = {
            "median": el.median,
            "median_abs": el.median_abs,
            "p90_abs": el.p90_abs,
            "n_reliable": int(len(el.values)),
        }
        radii_raw = _get(cp, "diagnose", "radii", str, None)
        if radii_raw is not None:
            radii = [float(v) for v in radii_raw.split()]
        else:
            radii = [4 * h, 6 * h, 8 * h, 12 * h]
        stride = max(1, len(bm) // _get(cp, "diagnose", "probes", int, 48))
        probe_idx = range(0, len(bm), stride)
        probes = [weiss_profile(d, sp, w, bm.points[i], radii) for i in probe_idx]
        write_weiss_csv(probes, out / "weiss.csv")
        report["weiss"] = {
            "radii": radii,
            "W_smallest_r": [p.values[0] for p in probes],
            "c_hat_max": max(p.c_hat for p in probes),
        }
        labels = classify_boundary(d, bm, radii)
        counts: dict[str, int] = {}
        for lab in labels:
            counts[lab.label.value] = counts.get(lab.label.value, 0) + 1
        report["boundary_labels"] = counts
        tf = solve_torsion(d)
        flags = [torsion_probe(d, tf, bm.points[i], radii[0]).value for i in probe_idx]
        report["torsion_violations"] = int(flags.count("VIOLATION"))
    if cp.has_section("objective"):
        spec = build_objective(cp)
        if len(sp) >= spec.n:
            rep = scaling_check(spec, sp)
            report["scaling"] = {
                "s": [float(v) for v in rep.s_values],
                "forward": [float(v) for v in rep.forward],
                "backward": [float(v) for v in rep.backward],
            }
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out, cp, "diagnose", seed, time.perf_counter() - t0, {})
    return 0


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

_COMMANDS = {
    "solve": cmd_solve,
    "optimize": cmd_optimize,
    "diagnose": cmd_diagnose,
    "sweep-p": cmd_sweep_p,
}


def run_single(command: str, config_path: str, out_dir: str,
               seed_override: int | None, check: bool) -> int:
    """One config through one subcommand; returns the exit code."""
    try:
        cp = load_config(config_path)
        seed = seed_override if seed_override is not None else _get(cp, "run", "seed", int, 0)
        out = pathlib.Path(out_dir)
        if check:
            return _run_check(command, cp, out, seed)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[command](cp, out, seed)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (SpectralError, OptimizeAborted) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 1


def _run_check(command: str, cp, out: pathlib.Path, seed: int) -> int:
    """Verify the recorded hashes against both the files on disk (artifact
    integrity) and a fresh rerun in a scratch directory (reproducibility)."""
    manifest_path = out / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"cannot check: {manifest_path} does not exist")
    with open(manifest_path) as f:
        recorded = json.load(f).get("artifacts", {})
    on_disk = {
        p.name: _sha256(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    with tempfile.TemporaryDirectory(prefix="eigenshape-check-") as tmp:
        scratch = pathlib.Path(tmp)
        code = _COMMANDS[command](cp, scratch, seed)
        if code != 0:
            print(f"check rerun failed with exit code {code}", file=sys.stderr)
            return code
        fresh = {
            p.name: _sha256(p)
            for p in sorted(scratch.iterdir())
            if p.is_file() and p.name != "manifest.json"
        }
    failed = False
    for label, current in (("on disk", on_disk), ("on rerun", fresh)):
        mismatched = sorted(
            set(k for k in recorded if recorded.get(k) != current.get(k))
            | set(k for k in current if k not in recorded)
        )
        for name in mismatched:
            print(f"hash mismatch {label}: {name}", file=sys.stderr)
        failed = failed or bool(mismatched)
    if failed:
        return 1
    print(f"check passed: {len(recorded)} artifacts match")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eigenshape",
        description="Spectral shape optimization and free-boundary diagnostics.",
    )
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("solve", "solve the spectrum (and torsion) of a fixed shape"),
        ("optimize", "run the level-set gradient flow"),
        ("diagnose", "free-boundary diagnostics on saved artifacts"),
        ("sweep-p", "p-continuation over an ascending schedule"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, action="append",
                        help="config file (repeatable; fans out with --jobs)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for multiple configs")
        sp.add_argument("--check", action="store_true",
                        help="re-run and verify artifact hashes against manifest.json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configs = args.config
    if len(configs) == 1:
        return run_single(args.command, configs[0], args.out, args.seed, args.check)
    outs = []
    for c in configs:
        stem = pathlib.Path(c).stem
        outs.append(str(pathlib.Path(args.out) / stem))
    if len(set(outs)) != len(outs):
        print("error: config stems collide; use distinct file names", file=sys.stderr)
        return 2
    jobs = max(1, args.jobs)
    codes = []
    if jobs == 1:
        for c, o in zip(configs, outs):
            codes.append(run_single(args.command, c, o, args.seed, args.check))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(run_single, args.command, c, o, args.seed, args.check)
                for c, o in zip(configs, outs)
            ]
            codes = [f.result() for f in futures]
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
