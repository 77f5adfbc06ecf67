"""Command-line front end: select, fit, sample, evaluate, diagnose.

Every run reads one JSON config, writes its artifacts into the output
directory, and always leaves a ``manifest.json`` with checksums behind,
flagged ``partial`` when the run failed.

Exit codes: 0 success, 2 config/usage error, 3 numeric failure,
4 external-target transport failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import PoEError, TransportError
from .expert_selection import SelectionConfig, build_pool
from .metrics import DEFAULT_SAMPLES, EvaluationReport, evaluate, gaussian_baseline
from .poe_model import ExpertPool, PoEDensity, load_pool, save_pool
from .score_match import FitConfig, fit, hessian_diagnostics
from .simplex_sampling import draw_weighted_batch, estimate_log_normalizer
from .targets import (
    DEFAULT_NORMALIZER_BUDGET,
    ReferenceSamples,
    external_target,
    load_reference_samples,
    make_zoo_target,
    poe_target,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TRANSPORT = 0, 2, 3, 4
DIAGNOSE_GRID = [10, 100, 500, 1_000, 5_000, 10_000, 50_000, 100_000]

log = logging.getLogger("poevi")


class ConfigError(ValueError):
    pass


def tool_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0+unknown"


@dataclass
class RunConfig:
    """Parsed run configuration; ``to_dict`` and ``from_dict`` round-trip exactly."""

    target: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    seed: int = 0

    SECTIONS = ("target", "selection", "fit", "metrics", "output")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cls.SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(**{k: copy.deepcopy(doc.get(k, {})) for k in cls.SECTIONS}, seed=doc.get("seed", 0))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.SECTIONS} | {"seed": self.seed}

    def validate(self) -> None:
        for k in self.SECTIONS:
            if not isinstance(getattr(self, k), dict):
                raise ConfigError(f"section {k!r} must be an object")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if self.target:
            sources = [k for k in ("zoo", "external", "pool") if self.target.get(k) is not None]
            if len(sources) != 1:
                raise ConfigError(f"target needs exactly one of zoo, external, pool; got {sources or 'none'}")
        try:
            self.selection_config()
            self.fit_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def selection_config(self) -> SelectionConfig:
        doc = {k: v for k, v in self.selection.items() if k != "mode_starts"}
        name = self.target.get("zoo")
        base = SelectionConfig.for_target(name, **doc) if name else SelectionConfig(**doc)
        if "seed" not in doc:
            base.seed = self.seed
        return base

    def fit_config(self) -> FitConfig:
        doc = {k: v for k, v in self.fit.items() if k != "alpha0"}
        doc.setdefault("seed", self.seed)
        return FitConfig.from_dict(doc)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.get("dir", "poevi-out"))


def build_target(cfg: RunConfig):
    t = cfg.target
    if not t:
        raise ConfigError("config has no target section")
    budget = int(cfg.metrics.get("normalizer_budget", DEFAULT_NORMALIZER_BUDGET))
    if t.get("zoo") is not None:
        params = dict(t.get("params", {}))
        if t["zoo"] in ("diamond", "poe_example"):
            params.setdefault("normalizer_budget", budget)
            params.setdefault("seed", cfg.seed)
        try:
            return make_zoo_target(t["zoo"], **params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for target {t['zoo']!r}: {exc}") from exc
    if t.get("external") is not None:
        return external_target(t["external"], t.get("dim"), float(t.get("timeout", 30.0)))
    try:
        poe = load_pool(t["pool"])
    except OSError as exc:
        raise ConfigError(f"cannot read target pool {t['pool']}: {exc}") from exc
    return poe_target(poe, budget, cfg.seed, name=f"pool:{Path(t['pool']).name}")


def _pool_path(args, cfg: RunConfig) -> Path:
    if args.pool:
        return Path(args.pool)
    default = cfg.output_dir / "pool.json"
    if default.exists():
        return default
    raise ConfigError("no pool given: pass --pool or run select into the same output directory")


def _read_pool(path) -> PoEDensity:
    try:
        return load_pool(path)
    except OSError as exc:
        raise ConfigError(f"cannot read pool {path}: {exc}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed pool file {path}: {exc}") from exc


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _write_rows(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def cmd_select(args, cfg: RunConfig, out: Path) -> list:
    target = build_target(cfg)
    try:
        starts = cfg.selection.get("mode_starts")
        starts = None if starts is None else [np.asarray(s, dtype=float) for s in starts]
        pool, report = build_pool(target, cfg.selection_config(), starts, return_report=True)
    finally:
        target.close()
    files = [save_pool(out / "pool.json", pool), report.save(out / "selection_report.json")]
    print(f"selected {len(pool)} experts around {len(report.modes)} mode(s)")
    return files


def cmd_fit(args, cfg: RunConfig, out: Path) -> list:
    poe = _read_pool(_pool_path(args, cfg))
    fcfg = cfg.fit_config()
    alpha0 = cfg.fit.get("alpha0")
    alpha0 = np.ones(poe.n_experts) if alpha0 is None else np.asarray(alpha0, dtype=float)
    args.manifest_extra["alpha0"] = alpha0.tolist()
    target = build_target(cfg)
    try:
        trace = fit(poe.experts, target, fcfg, alpha0)
    finally:
        target.close()
    header, rows = trace.to_rows(record_wall_time=bool(cfg.output.get("record_wall_time", False)))
    files = [_write_rows(out / "trace.csv", header, rows),
             save_pool(out / "fitted_pool.json", poe.experts, trace.final_alpha)]
    final = trace.records[-1]
    print(f"empirical_fisher {final.empirical_fisher:.6g}")
    print(f"active_experts {trace.active_count}")
    return files


def cmd_sample(args, cfg: RunConfig, out: Path) -> list:
    poe = _read_pool(_pool_path(args, cfg))
    b = args.batch_size if args.batch_size is not None else int(cfg.metrics.get("sample_size", 100_000))
    if b < 1:
        raise ConfigError(f"batch size must be at least 1, got {b}")
    batch = draw_weighted_batch(poe, b, cfg.seed)
    ess = batch.ess()
    files = [batch.to_csv(out / "samples.csv"), _write_json(out / "ess.json", ess.to_dict())]
    print(f"relative_ess {ess.relative_ess:.4f}")
    return files


def _reference(cfg: RunConfig, target) -> ReferenceSamples:
    n = int(cfg.metrics.get("n_samples", DEFAULT_SAMPLES))
    path = cfg.metrics.get("reference_samples")
    if path:
        try:
            ref = load_reference_samples(path)
        except OSError as exc:
            raise ConfigError(f"cannot read reference samples {path}: {exc}") from exc
        ref.check_dim(target.dim)
        return ref
    if not target.has_sampler:
        raise ConfigError(f"target {target.name!r} has no exact sampler; ingest reference samples and "
                          "set metrics.reference_samples to their CSV path")
    return ReferenceSamples(target.sample(n, np.random.default_rng(cfg.seed)), source=f"{target.name} sampler")


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> list:
    poe = _read_pool(_pool_path(args, cfg))
    target = build_target(cfg)
    budget = int(cfg.metrics.get("normalizer_budget", DEFAULT_NORMALIZER_BUDGET))
    try:
        ref = _reference(cfg, target)
        poe_rep = evaluate(ref, target, poe, budget, cfg.seed)
        base = gaussian_baseline(ref)
        base_rep = evaluate(ref, target, base, budget, cfg.seed)
    finally:
        target.close()
    doc = {"poe": poe_rep.to_dict(), "gaussian_baseline": base_rep.to_dict(), "reference": ref.source}
    for name, rep in (("poe", poe_rep), ("gaussian_baseline", base_rep)):
        kl = "n/a" if rep.forward_kl is None else f"{rep.forward_kl:.6g}"
        print(f"{name}: fisher_under_p {rep.fisher_under_p:.6g} forward_kl {kl}")
    return [_write_json(out / "evaluation.json", doc)]


def cmd_diagnose(args, cfg: RunConfig, out: Path) -> list:
    poe = _read_pool(_pool_path(args, cfg))
    grid = [int(b) for b in cfg.metrics.get("diagnose_grid", DIAGNOSE_GRID)]
    budget = int(cfg.metrics.get("normalizer_budget", DEFAULT_NORMALIZER_BUDGET))
    ref = estimate_log_normalizer(poe, budget, np.random.SeedSequence([cfg.seed, 1]))
    rows = []
    for i, b in enumerate(grid):
        batch = draw_weighted_batch(poe, b, np.random.SeedSequence([cfg.seed, 2, i]))
        est = batch.log_normalizer_contrib
        lmin, lmax, rmin = hessian_diagnostics(batch, poe.experts)
        rows.append({"batch_size": b, "log_normalizer": est, "log_normalizer_error": abs(est - ref),
                     "relative_ess": batch.ess().relative_ess, "lambda_min": lmin, "lambda_max": lmax,
                     "r_min": rmin})
    header = list(rows[0])
    files = [_write_json(out / "diagnostics.json", {"reference_log_normalizer": ref, "reference_budget": budget,
                                                     "rows": rows}),
             _write_rows(out / "diagnostics.csv", header, [[repr(r[h]) for h in header] for r in rows])]
    print(f"reference log normalizer {ref:.6g} over {len(grid)} batch sizes")
    return files


COMMANDS = {"select": cmd_select, "fit": cmd_fit, "sample": cmd_sample, "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose}


def _checksum(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg_doc, started: str, files, status: str, exit_code: int,
                   error: str | None = None, extra: dict | None = None) -> Path:
    inventory = []
    for f in files:
        f = Path(f)
        if f.exists():
            inventory.append({"path": f.name, "sha256": _checksum(f), "bytes": f.stat().st_size})
    doc = {
        "command": command,
        "tool_version": tool_version(),
        "config": cfg_doc,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "status": status,
        "exit_code": exit_code,
        "partial": status != "ok",
        "error": error,
        "files": inventory,
    }
    if extra:
        doc.update(extra)
    return _write_json(out / "manifest.json", doc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poevi", description="Product-of-t-experts variational inference")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("select", "build an expert pool from the target"),
                           ("fit", "learn expert weights by score matching"),
                           ("sample", "draw weighted samples from a pool"),
                           ("evaluate", "compare a pool and a Gaussian baseline against the target"),
                           ("diagnose", "normalizer error, ESS and curvature over batch sizes")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--output", help="output directory (overrides output.dir)")
        p.add_argument("--pool", help="expert pool JSON")
        if name == "sample":
            p.add_argument("-B", "--batch-size", type=int, help="number of draws")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, TransportError):
        return EXIT_TRANSPORT
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (PoEError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.time()
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.selection.pop("seed", None)
            cfg.fit.pop("seed", None)
        if args.output:
            cfg.output["dir"] = args.output
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"config error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    args.manifest_extra = {}
    files, status, code, error = [], "ok", EXIT_OK, None
    try:
        files = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:
        code = _exit_code(exc)
        status, error = "error", f"{type(exc).__name__}: {exc}"
        print(f"{args.command} failed: {error}", file=sys.stderr)
        # whatever this run managed to write before failing
        files = sorted(p for p in out.iterdir()
                       if p.is_file() and p.name != "manifest.json" and p.stat().st_mtime >= t0 - 1.0)
    write_manifest(out, args.command, cfg.to_dict(), started, files, status, code, error, args.manifest_extra)
    return code


if __name__ == "__main__":
    sys.exit(main())
