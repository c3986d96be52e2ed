"""Command-line pipeline: simulate -> reconstruct -> quantify -> sweep -> report.

Every stage reads and writes plain files, so each can be rerun on its own.
Exit codes: 0 success, 2 bad configuration or input, 3 solver failure
(anything already computed is kept next to the target with a ``.partial``
suffix), 1 anything else. Errors are also printed to stderr as one JSON
object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .detector import (
    DetectorConfig,
    JitterModel,
    TruncationWarning,
    probe_grid,
    read_records_csv,
    simulate_counts,
    theoretical_povm,
)
from .fock import HermitianBanded
from .measures import (
    MeasureError,
    dephasing_gap_lower_bound,
    solve_diamond,
    solve_nsid,
    summarize,
)
from .solver import PROGRAM_SCHEMA
from .tomography import (
    POVM_SCHEMA,
    ReconstructionError,
    ReconstructionSettings,
    bootstrap_reconstruct,
    load_povm,
    povm_to_json,
    reconstruct_povm,
)

logger = logging.getLogger("cohmeter")

CONFIG_SCHEMA = "cohmeter.experiment/1"
MEASURES_SCHEMA = "cohmeter.measures/1"
SWEEP_SCHEMA = "cohmeter.sweep/1"
PLOT_COLUMNS = ("overlap", "lo_intensity", "series", "value", "err_lo", "err_hi")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorGrid:
    lo_intensity: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 4.0)
    overlap: tuple[float, ...] = (0.99, 0.85, 0.75)
    lo_phase: float = 0.0
    reflectivity: float = 0.5
    efficiency: float = 0.59
    dark_click: float = 0.0

    def configs(self) -> list[DetectorConfig]:
        """Grid points ordered by overlap, then LO intensity."""
        return [
            DetectorConfig(lo, m, self.lo_phase, self.reflectivity, self.efficiency, self.dark_click)
            for m in self.overlap
            for lo in self.lo_intensity
        ]


@dataclass(frozen=True)
class ProbeSpec:
    phases: int = 12
    amplitudes: int = 10
    min_mean: float = 0.05
    max_mean: float = 40.0
    include_vacuum: bool = False

    def probes(self) -> list[complex]:
        return probe_grid(self.phases, self.amplitudes, self.min_mean, self.max_mean, self.include_vacuum)


@dataclass(frozen=True)
class MeasureSpec:
    dim_eval: int = 50
    tolerance: float = 1e-6
    formulation: str = "blocks"
    max_iter: int = 50_000


@dataclass(frozen=True)
class ExperimentConfig:
    detector: DetectorGrid = field(default_factory=DetectorGrid)
    probes: ProbeSpec = field(default_factory=ProbeSpec)
    shots: int = 100_000
    jitter: JitterModel = field(default_factory=JitterModel)
    reconstruction: ReconstructionSettings = field(default_factory=ReconstructionSettings)
    measure: MeasureSpec = field(default_factory=MeasureSpec)
    resamples: int = 20
    seed: int = 0
    parallelism: int = 1

    def to_json(self) -> dict:
        out = asdict(self)
        out["detector"]["lo_intensity"] = list(self.detector.lo_intensity)
        out["detector"]["overlap"] = list(self.detector.overlap)
        return {"schema": CONFIG_SCHEMA, **out}


_SECTIONS = {
    "detector": DetectorGrid,
    "probes": ProbeSpec,
    "jitter": JitterModel,
    "reconstruction": ReconstructionSettings,
    "measure": MeasureSpec,
}
_SCALARS = {"shots": int, "resamples": int, "seed": int, "parallelism": int}


def _section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    values = dict(data)
    for key in ("lo_intensity", "overlap"):
        if key in values:
            if not isinstance(values[key], list) or not values[key]:
                raise ConfigError(f"'{name}.{key}' must be a non-empty list")
            values[key] = tuple(float(v) for v in values[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}': {exc}") from exc


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a config object. Every key is optional except ``schema``."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if data.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"config schema must be {CONFIG_SCHEMA!r}, got {data.get('schema')!r}")
    unknown = sorted(set(data) - set(_SECTIONS) - set(_SCALARS) - {"schema"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _section(name, cls, data[name])
    for name, kind in _SCALARS.items():
        if name in data:
            value = data[name]
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"'{name}' must be an integer")
            kwargs[name] = kind(value)
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.detector.configs()
    except ValueError as exc:
        raise ConfigError(f"invalid detector grid: {exc}") from exc
    if cfg.shots < 1:
        raise ConfigError("'shots' must be >= 1")
    if cfg.resamples < 0:
        raise ConfigError("'resamples' must be >= 0")
    if cfg.parallelism < 1:
        raise ConfigError("'parallelism' must be >= 1")
    p = cfg.probes
    if p.phases < 1 or p.amplitudes < 1 or not 0 < p.min_mean <= p.max_mean:
        raise ConfigError("probe grid needs phases >= 1, amplitudes >= 1 and 0 < min_mean <= max_mean")
    band = cfg.reconstruction.band
    if band > 0 and p.phases < 2 * band + 1:
        raise ConfigError(f"band {band} needs at least {2 * band + 1} probe phases, got {p.phases}")
    m = cfg.measure
    if not 1 <= m.dim_eval:
        raise ConfigError("'measure.dim_eval' must be >= 1")
    if not (m.tolerance > 0 and math.isfinite(m.tolerance)):
        raise ConfigError("'measure.tolerance' must be positive")
    if m.formulation not in ("blocks", "full", "difference"):
        raise ConfigError(f"unknown measure formulation {m.formulation!r}")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    rec, meas = cfg.reconstruction, cfg.measure
    try:
        if getattr(args, "dim", None) is not None:
            rec = replace(rec, dim=args.dim)
        if getattr(args, "band", None) is not None:
            rec = replace(rec, band=args.band)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "tol", None) is not None:
        meas = replace(meas, tolerance=args.tol)
    meas = replace(meas, dim_eval=min(meas.dim_eval, rec.dim))
    cfg = replace(cfg, reconstruction=rec, measure=meas)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "parallelism", None) is not None:
        cfg = replace(cfg, parallelism=args.parallelism)
    _validate(cfg)
    return cfg


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _write_json(path, obj) -> None:
    atomic_write(path, _dumps(obj))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _records_text(records) -> str:
    return _csv_text(
        ("alpha_re", "alpha_im", "shots", "clicks"),
        [(repr(r.alpha.real), repr(r.alpha.imag), r.shots, r.clicks) for r in records],
    )


def _point_name(cfg: DetectorConfig) -> str:
    return f"m{cfg.overlap:g}_lo{cfg.lo_intensity:g}"


def _detector_json(cfg: DetectorConfig) -> dict:
    return asdict(cfg)


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def _measures(povm, spec: MeasureSpec) -> tuple[dict, dict]:
    """Diamond, NSID and lower bound of a binary POVM; raises SolverFailure."""
    try:
        dia = solve_diamond(povm, formulation=spec.formulation, tol=spec.tolerance, max_iter=spec.max_iter)
        nsid = solve_nsid(povm, tol=spec.tolerance, max_iter=spec.max_iter)
    except MeasureError as exc:
        raise SolverFailure(str(exc)) from exc
    values = {
        "measure_diamond": dia.value,
        "measure_nsid": nsid.value,
        "lower_bound": dephasing_gap_lower_bound(povm),
    }
    return values, {"diamond": dia.report.to_json(), "nsid": nsid.report.to_json()}


def _truncate(povm, dim: int) -> list[HermitianBanded]:
    return [p.truncated(min(dim, p.dim)) for p in povm]


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    probes = cfg.probes.probes()
    manifest = {"schema": SWEEP_SCHEMA, "config": cfg.to_json(), "points": []}
    for index, det in enumerate(cfg.detector.configs()):
        records = simulate_counts(det, probes, cfg.shots, cfg.jitter, _derived_seed(cfg.seed, index))
        name = f"records_{_point_name(det)}.csv"
        atomic_write(out / name, _records_text(records))
        manifest["points"].append({"index": index, "detector": _detector_json(det), "records": name})
    _write_json(out / "simulation.json", manifest)
    return manifest


def cmd_reconstruct(records_path: Path, settings: ReconstructionSettings, out: Path) -> dict:
    records = read_records_csv(records_path)
    try:
        pi0, pi1, fit = reconstruct_povm(records, settings)
    except ReconstructionError as exc:
        if exc.best is not None:
            meta = {"source": records_path.name, "fit": {"solver": exc.report.to_json()}}
            _write_json(_partial(out), povm_to_json(list(exc.best), meta))
        raise SolverFailure(str(exc)) from exc
    doc = povm_to_json([pi0, pi1], {"source": records_path.name, "fit": fit.to_json()})
    _write_json(out, doc)
    return doc


def cmd_quantify(povm_path: Path, spec: MeasureSpec, out: Path) -> dict:
    povm, meta = load_povm(povm_path)
    if len(povm) != 2:
        raise ConfigError(f"{povm_path}: the pipeline handles binary detectors only, got {len(povm)} outcomes")
    dim = min(spec.dim_eval, povm[0].dim)
    values, reports = _measures(_truncate(povm, dim), spec)
    doc = {
        "schema": MEASURES_SCHEMA,
        "config": {"povm": povm_path.name, "povm_meta": meta, "dim_eval": dim, "measure": asdict(spec)},
        **values,
        "uncertainty": None,
        "solver_reports": reports,
    }
    _write_json(out, doc)
    return doc


def _partial(path: Path) -> Path:
    return path.with_name(path.name + ".partial")


def _run_point(job: dict) -> dict:
    """One grid point of the sweep; writes its files and returns its summary."""
    cfg: ExperimentConfig = job["config"]
    det: DetectorConfig = job["detector"]
    index: int = job["index"]
    folder = Path(job["out"]) / "points" / _point_name(det)
    spec = cfg.measure
    records = simulate_counts(det, cfg.probes.probes(), cfg.shots, cfg.jitter, _derived_seed(cfg.seed, index))
    atomic_write(folder / "records.csv", _records_text(records))
    try:
        pi0, pi1, fit = reconstruct_povm(records, cfg.reconstruction)
    except ReconstructionError as exc:
        if exc.best is not None:
            _write_json(_partial(folder / "povm.json"), povm_to_json(list(exc.best), {"fit": {"solver": exc.report.to_json()}}))
        raise SolverFailure(f"{_point_name(det)}: {exc}") from exc
    _write_json(folder / "povm.json", povm_to_json([pi0, pi1], {"detector": _detector_json(det), "fit": fit.to_json()}))

    result = {
        "schema": MEASURES_SCHEMA,
        "config": {"detector": _detector_json(det), "dim_eval": spec.dim_eval, "measure": asdict(spec)},
        "uncertainty": None,
    }
    try:
        values, reports = _measures(_truncate([pi0, pi1], spec.dim_eval), spec)
        result.update(values)
        reports["reconstruction"] = fit.to_json()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            theory = theoretical_povm(det, spec.dim_eval, band=None)
        t_values, t_reports = _measures(theory, spec)
        result["theoretical"] = t_values
        reports["theoretical"] = t_reports
        result["solver_reports"] = reports

        if cfg.resamples > 0:
            ensemble = bootstrap_reconstruct(records, cfg.reconstruction, cfg.resamples,
                                             _derived_seed(cfg.seed, index, 1), cfg.jitter)
            boot = [_measures(_truncate(p, spec.dim_eval), spec)[0]["measure_diamond"] for p in ensemble]
            result["uncertainty"] = {"measure_diamond": summarize(boot).to_json()}
        else:
            ensemble = []
    except (ReconstructionError, SolverFailure) as exc:
        _write_json(_partial(folder / "measures.json"), result)
        raise SolverFailure(f"{_point_name(det)}: {exc}") from exc
    result["fig2"] = _fig2_entries(pi0, ensemble)
    _write_json(folder / "measures.json", result)
    return {"index": index, "name": _point_name(det), "detector": _detector_json(det)}


def _fig2_entries(pi0: HermitianBanded, ensemble) -> dict:
    diag = pi0.diagonals[0].real
    off = np.abs(pi0.diagonals[1]) if pi0.band >= 1 else np.zeros(0)
    out = {"diagonal": diag.tolist(), "offdiagonal": off.tolist(),
           "diagonal_std": [0.0] * len(diag), "offdiagonal_std": [0.0] * len(off)}
    if len(ensemble) > 1:
        diags = np.array([p[0].diagonals[0].real for p in ensemble])
        out["diagonal_std"] = diags.std(axis=0, ddof=1).tolist()
        if pi0.band >= 1:
            offs = np.array([np.abs(p[0].diagonals[1]) for p in ensemble])
            out["offdiagonal_std"] = offs.std(axis=0, ddof=1).tolist()
    return out


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    detectors = cfg.detector.configs()
    jobs = [{"config": cfg, "detector": det, "index": i, "out": str(out)} for i, det in enumerate(detectors)]
    done, failure = [], None
    if cfg.parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            futures = [pool.submit(_run_point, job) for job in jobs]
            for fut in futures:
                try:
                    done.append(fut.result())
                except SolverFailure as exc:
                    failure = failure or exc
    else:
        for job in jobs:
            try:
                done.append(_run_point(job))
            except SolverFailure as exc:
                failure = exc
                break
    done.sort(key=lambda p: p["index"])
    manifest = {"schema": SWEEP_SCHEMA, "config": cfg.to_json(),
                "points": [{**p, "path": f"points/{p['name']}"} for p in done]}
    if failure is not None:
        _write_json(_partial(out / "sweep.json"), manifest)
        raise failure
    _write_json(out / "sweep.json", manifest)
    return manifest


def cmd_report(sweep_dir: Path, out: Path) -> dict:
    manifest_path = sweep_dir / "sweep.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"no sweep manifest at {manifest_path}") from exc
    if manifest.get("schema") != SWEEP_SCHEMA:
        raise ConfigError(f"{manifest_path}: unsupported schema {manifest.get('schema')!r}")

    summary, fig3, fig2 = [], [], []
    seen = set()
    for point in manifest["points"]:
        det = point["detector"]
        key = (det["overlap"], det["lo_intensity"])
        if key in seen:
            raise ConfigError(f"duplicate grid point {key} in {manifest_path}")
        seen.add(key)
        res = json.loads((sweep_dir / point["path"] / "measures.json").read_text(encoding="utf-8"))
        m, lo = key
        unc = (res.get("uncertainty") or {}).get("measure_diamond")
        std = unc["std"] if unc else 0.0
        theory = res["theoretical"]
        summary.append((m, lo, res["measure_diamond"], std, res["measure_nsid"], res["lower_bound"],
                        theory["measure_diamond"], theory["measure_nsid"], theory["lower_bound"]))
        value = res["measure_diamond"]
        fig3.append((m, lo, "reconstructed", value, value - std, value + std))
        fig3.append((m, lo, "theoretical", theory["measure_diamond"], theory["measure_diamond"], theory["measure_diamond"]))
        bars = res["fig2"]
        for series, vals, errs in (("diagonal", bars["diagonal"], bars["diagonal_std"]),
                                   ("offdiagonal", bars["offdiagonal"], bars["offdiagonal_std"])):
            for j, (v, e) in enumerate(zip(vals, errs)):
                fig2.append((m, lo, series, j, v, v - e, v + e))

    atomic_write(out / "summary.csv", _csv_text(
        ("overlap", "lo_intensity", "measure_reconstructed", "measure_reconstructed_std", "nsid_reconstructed",
         "lower_bound_reconstructed", "measure_theoretical", "nsid_theoretical", "lower_bound_theoretical"),
        summary))
    atomic_write(out / "fig3.csv", _csv_text(PLOT_COLUMNS, fig3))
    atomic_write(out / "fig2.csv", _csv_text(PLOT_COLUMNS[:3] + ("photon",) + PLOT_COLUMNS[3:], fig2))
    return {"points": len(summary)}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def version_text() -> str:
    return (
        f"cohmeter {__version__}\n"
        f"schemas: config={CONFIG_SCHEMA} povm={POVM_SCHEMA} measures={MEASURES_SCHEMA} "
        f"sweep={SWEEP_SCHEMA} program={PROGRAM_SCHEMA}\n"
        f"build: python {platform.python_version()}, numpy {np.__version__}, scipy {scipy.__version__}"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohmeter", description="Weak-field homodyne detector coherence pipeline.")
    parser.add_argument("--version", action="store_true", help="print schema and build info")
    sub = parser.add_subparsers(dest="command")

    def common(p, config_required=False):
        p.add_argument("--config", type=Path, required=config_required, help="experiment config JSON")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--parallelism", type=int)
        p.add_argument("--dim", type=int)
        p.add_argument("--band", type=int)
        p.add_argument("--tol", type=float)

    common(sub.add_parser("simulate", help="write probe records for every grid point"), config_required=True)
    p = sub.add_parser("reconstruct", help="fit a POVM to a probe-record CSV")
    p.add_argument("records", type=Path)
    common(p)
    p = sub.add_parser("quantify", help="coherence measures of a POVM file")
    p.add_argument("povm", type=Path)
    common(p)
    common(sub.add_parser("sweep", help="simulate, reconstruct and quantify the whole grid"), config_required=True)
    p = sub.add_parser("report", help="summary and plot data from a sweep directory")
    p.add_argument("sweep_dir", type=Path)
    common(p)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("COHMETER_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"COHMETER_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)


def _error(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def _dispatch(args) -> None:
    base = load_config(args.config) if args.config else parse_config({"schema": CONFIG_SCHEMA})
    cfg = _apply_overrides(base, args)
    if args.command == "simulate":
        cmd_simulate(cfg, args.out)
    elif args.command == "reconstruct":
        rec = cfg.reconstruction
        if args.tol is not None:
            rec = replace(rec, solver_tol=args.tol)
        if not args.records.exists():
            raise ConfigError(f"records file not found: {args.records}")
        try:
            cmd_reconstruct(args.records, rec, args.out)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    elif args.command == "quantify":
        if not args.povm.exists():
            raise ConfigError(f"POVM file not found: {args.povm}")
        spec = replace(cfg.measure, dim_eval=args.dim if args.dim is not None else base.measure.dim_eval)
        try:
            cmd_quantify(args.povm, spec, args.out)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{args.povm}: {exc}") from exc
    elif args.command == "sweep":
        cmd_sweep(cfg, args.out)
    elif args.command == "report":
        cmd_report(args.sweep_dir, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.version:
        print(version_text())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        _setup_logging()
        _dispatch(args)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except SolverFailure as exc:
        return _error("solver", exc, EXIT_SOLVER)
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        logger.debug("unhandled error", exc_info=True)
        return _error(type(exc).__name__, exc, EXIT_FAILURE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
