"""Experiment orchestration, persistence and the ``mfgmm`` command line.

A run is described by a JSON config naming a scenario, the mixture, the truth,
the priors and a block of run flags. Every flag has an explicit default that is
written into the manifest, so a manifest fully describes what was executed.
Stage outputs (CSV with headers, JSON with sorted keys) are deterministic for a
fixed config and seed; timings live only in the manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, landscape, mean_field, p1_forms, spd_geometry
from .errors import BudgetError, ConfigError, MfgmmError, NumericalError
from .gmm_core import (
    Assignment,
    Dataset,
    MixtureConfig,
    PriorConfig,
    TrueMixture,
    generate_dataset,
    lambda0_of,
    read_dataset_csv,
    read_json,
    write_dataset_csv,
    write_json,
)

STAGES = ("generate", "convexity", "cavi", "landscape", "p1-check", "concentration")
SCENARIOS = STAGES + ("full-pipeline",)

DEFAULT_FLAGS = {
    "l0": 0.1,
    "exact_z_budget": mean_field.ENUMERATION_BUDGET,
    "cavi_backend": "auto",
    "cavi_tol": 1e-8,
    "cavi_max_iter": 500,
    "cavi_init_noise": 0.05,
    "convexity_geodesics": 200,
    "convexity_steps": 64,
    "convexity_sampler": "cutoff",
    "lattice_stride": 1,
    "lattice_budget": landscape.LATTICE_BUDGET,
    "weighting": "conditional",
    "p1_random_A": 50,
    "p1_tolerance": 1e-6,
    "vertex_mean_tol": 0.2,
    "vertex_precision_rtol": 0.2,
    "vertex_cells": 2,
    "concentration_betas": [0.5, 1.0, 2.0],
    "concentration_moments": "empirical",
    "grid_mean": 17,
    "grid_log_precision": 9,
    "grid_weight": 9,
}


def stage_rng(seed, stage, worker=0):
    """Independent stream per (seed, stage, worker)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode()), int(worker)]))


def resolve_threads(cli_value=None):
    if cli_value is not None:
        return max(1, int(cli_value))
    env = os.environ.get("MFGMM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MFGMM_THREADS must be an integer, got {env!r}") from None
    return 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    scenario: str
    mixture: MixtureConfig
    truth: dict
    priors: PriorConfig
    flags: dict
    output_dir: str = "out"

    _TOP = {"scenario", "mixture", "truth", "priors", "flags", "output_dir"}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - cls._TOP
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for req in ("scenario", "mixture", "truth"):
            if req not in d:
                raise ConfigError(f"missing config field: {req}")
        scenario = d["scenario"]
        if scenario not in SCENARIOS:
            raise ConfigError(f"scenario: expected one of {list(SCENARIOS)}, got {scenario!r}")
        try:
            mixture = MixtureConfig.from_dict(d["mixture"])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"mixture: {e}") from None
        truth = d["truth"]
        for f in ("weights", "means", "precisions"):
            if f not in truth:
                raise ConfigError(f"truth.{f}: missing")
        w, m, p = (np.asarray(truth[f], dtype=float) for f in ("weights", "means", "precisions"))
        if w.shape != (mixture.K,) or m.shape != (mixture.K, mixture.P) or p.shape != (mixture.K, mixture.P, mixture.P):
            raise ConfigError(f"truth: shapes {w.shape}, {m.shape}, {p.shape} do not match K={mixture.K}, P={mixture.P}")
        priors = PriorConfig.from_dict(d.get("priors", {}))
        flags = dict(DEFAULT_FLAGS)
        given = d.get("flags", {})
        unknown = set(given) - set(DEFAULT_FLAGS)
        if unknown:
            raise ConfigError(f"flags: unknown fields {sorted(unknown)}")
        flags.update(given)
        if flags["cavi_backend"] not in ("auto", "laplace", "quadrature"):
            raise ConfigError(f"flags.cavi_backend: unknown backend {flags['cavi_backend']!r}")
        if flags["weighting"] not in ("class_weighted", "conditional"):
            raise ConfigError(f"flags.weighting: unknown weighting {flags['weighting']!r}")
        return cls(scenario, mixture, {"weights": w.tolist(), "means": m.tolist(), "precisions": p.tolist()},
                   priors, flags, str(d.get("output_dir", "out")))

    def to_dict(self):
        return {"scenario": self.scenario, "mixture": self.mixture.to_dict(), "truth": self.truth,
                "priors": self.priors.to_dict(), "flags": self.flags, "output_dir": self.output_dir}

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def lambda0(self):
        return max(1, lambda0_of(self.mixture.N, self.flags["l0"]))


def load_config(path):
    try:
        return ExperimentConfig.from_dict(read_json(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"{path}: {e}") from None


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str
    scenario: str
    flags: dict
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


class _Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.seed = cfg.mixture.seed
        self.outputs = {}
        self._data = None

    def data(self):
        if self._data is None:
            m = self.cfg.mixture
            t = self.cfg.truth
            self._data = generate_dataset(m, np.array(t["weights"]), np.array(t["means"]),
                                          np.array(t["precisions"]))
        return self._data

    def write_json(self, stage, name, obj):
        path = self.out / name
        write_json(path, obj)
        self.outputs.setdefault(stage, []).append(name)

    def register(self, stage, name):
        self.outputs.setdefault(stage, []).append(name)


def stage_generate(ctx: _Context):
    ds, truth = ctx.data()
    write_dataset_csv(ctx.out / "data.csv", ds)
    ctx.register("generate", "data.csv")
    ctx.write_json("generate", "truth.json", truth.to_dict())
    ctx.write_json("generate", "priors.json", ctx.cfg.priors.to_dict())
    return {"status": "ok", "N": ds.N, "class_sizes": truth.class_sizes.tolist()}


def stage_convexity(ctx: _Context):
    ds, truth = ctx.data()
    f = ctx.cfg.flags
    z = Assignment(truth.true_labels, truth.K)
    lam0 = ctx.cfg.lambda0
    if not z.admissible(lam0):
        return {"status": "skipped", "reason": f"true labeling has a class below lambda0={lam0}"}
    rep = spd_geometry.convexity_scan(ds, z, ctx.cfg.priors, geodesics=f["convexity_geodesics"],
                                      steps=f["convexity_steps"], rng=stage_rng(ctx.seed, "convexity"),
                                      lambda0=lam0, sampler=f["convexity_sampler"])
    with open(ctx.out / "convexity.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["geodesic_id", "t", "second_diff"])
        for g, t, v in rep.records:
            w.writerow([int(g), repr(float(t)), repr(float(v))])
    ctx.register("convexity", "convexity.csv")
    summary = rep.to_summary()
    ctx.write_json("convexity", "convexity.json", summary)
    return {"status": "ok", **summary}


def _backend(cfg: ExperimentConfig):
    b = cfg.flags["cavi_backend"]
    if b == "auto":
        return "quadrature" if cfg.mixture.P == 1 else "laplace"
    return b


CRITICAL_RTOL = 1e-4
CRITICAL_ATOL = 1e-10


def critical_point_ok(residual, scale):
    """Residual within ``CRITICAL_RTOL`` of the per-sheet gradient scale.

    When every sheet is already critical (a single labeling, K = 1) the scale
    vanishes and the absolute floor applies instead.
    """
    return bool(residual <= max(CRITICAL_RTOL * scale, CRITICAL_ATOL))


def cavi_on(ds: Dataset, K, priors, lambda0, backend, beta, flags, rng, threads=1, true_labels=None):
    """Enumerate, run CAVI and evaluate the critical-point diagnostics."""
    labs = mean_field.enumerate_labelings(ds, K, lambda0, budget=flags["exact_z_budget"], threads=threads)
    cfg = mean_field.CaviSettings(beta=beta, lambda0=lambda0, backend=backend, tol=flags["cavi_tol"],
                                  max_iter=flags["cavi_max_iter"], init_noise=flags["cavi_init_noise"])
    state = mean_field.run_cavi(ds, labs, priors, cfg, rng=rng)
    R = mean_field.r_corrections(state, labs, priors, beta)
    res = mean_field.critical_point_residual(state.mode, labs, priors, beta, lambda0, R)
    scale = mean_field.mean_sheet_gradient_norm(state.mode, labs, priors, lambda0)
    d = mean_field.state_to_dict(state, labs, true_labels)
    d.update({"backend": backend, "lambda0": lambda0, "beta": beta, "critical_residual": res,
              "mean_sheet_gradient_norm": scale, "relative_residual": res / scale,
              "log_z_at_mode": mean_field.marginal_partition(state.mode, labs, priors, beta, R)})
    return state, labs, R, d


def stage_cavi(ctx: _Context):
    ds, truth = ctx.data()
    cfg = ctx.cfg
    if cfg.mixture.K ** ds.N > cfg.flags["exact_z_budget"]:
        return {"status": "skipped",
                "reason": f"K^N = {cfg.mixture.K ** ds.N} exceeds exact_z_budget {cfg.flags['exact_z_budget']}"}
    _, _, _, d = cavi_on(ds, cfg.mixture.K, cfg.priors, cfg.lambda0, _backend(cfg), cfg.mixture.beta, cfg.flags,
                         stage_rng(ctx.seed, "cavi"), ctx.threads, truth.true_labels)
    ctx.write_json("cavi", "cavi_state.json", d)
    return {"status": "ok", "converged": d["converged"], "iterations": d["iteration"],
            "relative_residual": d["relative_residual"], "residual_trace": d["trace"]["residual"],
            "pass": critical_point_ok(d["critical_residual"], d["mean_sheet_gradient_norm"])}


def stage_landscape(ctx: _Context):
    _, truth = ctx.data()
    cfg = ctx.cfg
    spec = landscape.LatticeSpec(tuple(truth.class_sizes), cfg.flags["lattice_stride"])
    res = landscape.sweep(spec, truth, cfg.priors, cfg.mixture.beta, cfg.lambda0, weighting=cfg.flags["weighting"],
                          budget=cfg.flags["lattice_budget"], threads=ctx.threads)
    landscape.write_records_csv(ctx.out / "landscape.csv", res)
    ctx.register("landscape", "landscape.csv")
    ctx.write_json("landscape", "landscape.json", res.summary())
    return {"status": "ok", "A_star": res.best.A.tolist(), "F_A_star": res.best.F, "n_cells": len(res.records)}


def p1_cross_validation(truth: TrueMixture, priors, lambda0, n, rng, weighting="conditional"):
    """Closed forms against numerical minimisation on ``n`` random interior Markov matrices."""
    devs, rows = [], []
    for _ in range(n):
        A = landscape.random_markov(rng, truth.K, low=0.02)
        a = landscape.m_of(A, truth, priors, lambda0, weighting, method="closed")
        b = landscape.m_of(A, truth, priors, lambda0, weighting, method="newton")
        dev = max(float(np.max(np.abs(a.point.means - b.point.means))),
                  float(np.max(np.abs(a.point.precisions - b.point.precisions))),
                  float(np.max(np.abs(a.point.weights - b.point.weights))))
        devs.append(dev)
        rows.append({"A": A.tolist(), "deviation": dev, "phi_hat_closed": a.phi_hat, "phi_hat_newton": b.phi_hat})
    return float(max(devs)) if devs else 0.0, rows


def stage_p1_check(ctx: _Context):
    _, truth = ctx.data()
    cfg = ctx.cfg
    if truth.P != 1:
        return {"status": "skipped", "reason": "closed forms need P = 1"}
    f = cfg.flags
    worst, rows = p1_cross_validation(truth, cfg.priors, cfg.lambda0, f["p1_random_A"],
                                      stage_rng(ctx.seed, "p1-check"), f["weighting"])
    verdict = p1_forms.vertex_recovery_check(truth, cfg.priors, beta=cfg.mixture.beta, lambda0=cfg.lambda0,
                                             stride=f["lattice_stride"], mu_tol=f["vertex_mean_tol"],
                                             lam_rtol=f["vertex_precision_rtol"], vertex_cells=f["vertex_cells"],
                                             weighting=f["weighting"])
    report = {"max_deviation": worst, "tolerance": f["p1_tolerance"], "pass": worst <= f["p1_tolerance"],
              "cases": rows, "vertex": verdict.to_dict()}
    ctx.write_json("p1-check", "p1_check.json", report)
    return {"status": "ok", "max_deviation": worst, "pass": report["pass"], "vertex_status": verdict.status}


def stage_concentration(ctx: _Context):
    ds, truth = ctx.data()
    cfg = ctx.cfg
    if truth.P != 1 or truth.K > 2 or truth.K ** ds.N > cfg.flags["exact_z_budget"]:
        return {"status": "skipped", "reason": "needs P = 1, K <= 2 and an enumerable labeling set"}
    f = cfg.flags
    grid = landscape.ParameterGrid.around(ds, cfg.priors.R, f["grid_mean"], f["grid_log_precision"], f["grid_weight"])
    rep = landscape.concentration_check(ds, truth, cfg.priors, f["concentration_betas"], cfg.lambda0, grid,
                                        backend=_backend(cfg), weighting=f["weighting"],
                                        moments=f["concentration_moments"], rng=stage_rng(ctx.seed, "concentration"))
    d = rep.to_dict()
    ctx.write_json("concentration", "concentration.json", d)
    return {"status": "ok", "distances": rep.distances, "nonincreasing": rep.nonincreasing}


STAGE_FUNCS = {"generate": stage_generate, "convexity": stage_convexity, "cavi": stage_cavi,
               "landscape": stage_landscape, "p1-check": stage_p1_check, "concentration": stage_concentration}


def run(config, out_dir=None, seed=None, threads=None):
    """Run the configured scenario; write outputs and ``manifest.json`` into the output directory."""
    cfg = load_config(config) if isinstance(config, (str, Path)) else config
    if seed is not None:
        cfg.mixture = MixtureConfig(cfg.mixture.K, cfg.mixture.P, cfg.mixture.N, cfg.mixture.beta, int(seed))
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out, resolve_threads(threads))
    stages = list(STAGES) if cfg.scenario == "full-pipeline" else (
        ["generate", cfg.scenario] if cfg.scenario != "generate" else ["generate"])
    manifest = RunManifest(cfg.config_hash(), cfg.mixture.seed, __version__, cfg.scenario, cfg.flags)
    for st in stages:
        t0 = time.perf_counter()
        manifest.stages[st] = STAGE_FUNCS[st](ctx)
        manifest.timings[st] = time.perf_counter() - t0
    manifest.outputs = {st: [{"file": name, "sha256": _sha256(out / name)} for name in names]
                        for st, names in ctx.outputs.items()}
    write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


class CorruptFileError(MfgmmError):
    pass


def _read_csv_checked(path, numeric_columns):
    """Rows of a CSV as dicts; a malformed row raises with the file name and 1-based row number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CorruptFileError(f"{path}: empty file (row 1)") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CorruptFileError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            rec = dict(zip(header, row))
            for col in numeric_columns(header):
                try:
                    rec[col] = float(rec[col])
                except ValueError:
                    raise CorruptFileError(f"{path}: row {lineno} column {col!r} is not a number: {rec[col]!r}") from None
            rows.append(rec)
    return rows


def report(manifest_path):
    """One summary document with a section per stage; absent stages are marked ``"not run"``."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    man = RunManifest.from_dict(read_json(manifest_path))
    summary = {"config_hash": man.config_hash, "seed": man.seed, "version": man.version,
               "scenario": man.scenario, "errors": []}

    def load(stage, fn):
        if stage not in man.stages:
            return "not run"
        st = man.stages[stage]
        if st.get("status") != "ok":
            return st
        missing = [o["file"] for o in man.outputs.get(stage, []) if not (base / o["file"]).exists()]
        if missing:
            summary["errors"].append(f"{stage}: missing outputs {missing}")
            return {"status": "missing outputs", "files": missing}
        try:
            return fn()
        except CorruptFileError as e:
            summary["errors"].append(str(e))
            return {"status": "corrupt", "error": str(e)}

    def generate():
        rows = _read_csv_checked(base / "data.csv", lambda h: h)
        return {"status": "ok", "N": len(rows), "class_sizes": read_json(base / "truth.json")["classSizes"]}

    def convexity():
        rows = _read_csv_checked(base / "convexity.csv", lambda h: h)
        s = read_json(base / "convexity.json")
        return {"status": "ok", "C_hat": s["C_hat"], "min": s["min"], "pass": s["pass"], "samples": len(rows)}

    def cavi():
        s = read_json(base / "cavi_state.json")
        return {"status": "ok", "converged": s["converged"], "iterations": s["iteration"],
                "relative_residual": s["relative_residual"],
                "pass": critical_point_ok(s["critical_residual"], s["mean_sheet_gradient_norm"]), "residual_trace": s["trace"]["residual"],
                "kl_trace": s["trace"]["kl"]}

    def land():
        rows = _read_csv_checked(base / "landscape.csv",
                                 lambda h: [c for c in h if c != "solver_status"])
        s = read_json(base / "landscape.json")
        return {"status": "ok", "A_star": s["A_star"], "F_A_star": s["F_A_star"], "cells": len(rows),
                "log_z_eff": s["log_z_eff"]}

    def p1():
        s = read_json(base / "p1_check.json")
        return {"status": "ok", "max_deviation": s["max_deviation"], "pass": s["pass"],
                "vertex_verdict": s["vertex"]["status"], "vertex_message": s["vertex"]["message"]}

    def conc():
        s = read_json(base / "concentration.json")
        return {"status": "ok", "betas": s["betas"], "distances": s["distances"],
                "nonincreasing": s["distance_nonincreasing"]}

    for stage, fn in zip(STAGES, (generate, convexity, cavi, land, p1, conc)):
        summary[stage] = load(stage, fn)
    return summary


def report_markdown(summary):
    lines = [f"# mfgmm report ({summary['scenario']}, seed {summary['seed']})", ""]
    for stage in STAGES:
        lines.append(f"## {stage}")
        sec = summary[stage]
        if isinstance(sec, str):
            lines.append(sec)
        else:
            for k, v in sec.items():
                lines.append(f"- {k}: {v}")
        lines.append("")
    if summary["errors"]:
        lines.append("## errors")
        lines.extend(f"- {e}" for e in summary["errors"])
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="mfgmm", description="Mean-field GMM analysis toolkit")
    sub = p.add_subparsers(dest="scenario", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)

    for name in ("generate", "convexity", "concentration", "full-pipeline"):
        common(sub.add_parser(name))
    sp = sub.add_parser("cavi")
    common(sp, config_required=False)
    sp.add_argument("--data", help="dataset CSV; runs directly and writes the state to --out")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--exact-z", dest="backend", action="store_const", const="quadrature")
    mode.add_argument("--laplace", dest="backend", action="store_const", const="laplace")
    sp = sub.add_parser("landscape")
    common(sp, config_required=False)
    sp.add_argument("--truth")
    sp.add_argument("--priors")
    sp.add_argument("--lattice", help='"N1,N2[,stride]"')
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--l0", type=float, default=DEFAULT_FLAGS["l0"])
    sp = sub.add_parser("p1-check")
    common(sp, config_required=False)
    sp.add_argument("--truth")
    sp.add_argument("--priors")
    sp.add_argument("--A", dest="A", help="JSON file holding a Markov matrix or a list of them")
    sp.add_argument("--l0", type=float, default=DEFAULT_FLAGS["l0"])
    sp = sub.add_parser("report")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("json", "markdown"), default="json")
    return p


def _cli_cavi(args):
    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        raise ConfigError("cavi --data needs --config for K, beta, priors and flags")
    ds = read_dataset_csv(args.data)
    flags = dict(cfg.flags)
    backend = args.backend or _backend(cfg)
    lam0 = max(1, lambda0_of(ds.N, flags["l0"]))
    seed = cfg.mixture.seed if args.seed is None else args.seed
    _, _, _, d = cavi_on(ds, cfg.mixture.K, cfg.priors, lam0, backend, cfg.mixture.beta, flags,
                         stage_rng(seed, "cavi"), resolve_threads(args.threads))
    write_json(args.out or "state.json", d)
    return 0


def _cli_landscape(args):
    truth = TrueMixture.from_dict(read_json(args.truth))
    priors = PriorConfig.from_dict(read_json(args.priors)) if args.priors else PriorConfig()
    spec = landscape.LatticeSpec.parse(args.lattice) if args.lattice else landscape.LatticeSpec(tuple(truth.class_sizes))
    lam0 = max(1, lambda0_of(sum(spec.class_sizes), args.l0))
    res = landscape.sweep(spec, truth, priors, args.beta, lam0, threads=resolve_threads(args.threads))
    out = Path(args.out or "records.csv")
    landscape.write_records_csv(out, res)
    write_json(out.with_suffix(".json"), res.summary())
    return 0


def _cli_p1(args):
    truth = TrueMixture.from_dict(read_json(args.truth))
    priors = PriorConfig.from_dict(read_json(args.priors)) if args.priors else PriorConfig()
    lam0 = max(1, lambda0_of(truth.N, args.l0))
    raw = np.asarray(read_json(args.A)["A"] if args.A.endswith(".json") else json.loads(args.A), dtype=float)
    mats = raw[None] if raw.ndim == 2 else raw
    cases = []
    for A in mats:
        A = landscape.check_markov(A)
        sol = p1_forms.solve_fixed_point(A, truth, priors)
        num = landscape.m_of(A, truth, priors, lam0, method="newton")
        co = p1_forms.coefficients(A, truth, 1.0, sol.means)
        cases.append({"A": A.tolist(), "coefficients": co.to_dict(), "mu_hat": sol.means.tolist(),
                      "mu_leading": p1_forms.mu_leading(A, truth).tolist(),
                      "mu_bisection": p1_forms.mu_bisection(A, truth, priors).tolist(),
                      "lambda_hat": sol.precisions.tolist(), "lambda_asymptotic": sol.precisions_asymptotic.tolist(),
                      "per_class_value": p1_forms.per_class_value(A, truth, sol.means).tolist(),
                      "delta_means": float(np.max(np.abs(sol.means - num.point.means[:, 0]))),
                      "delta_precisions": float(np.max(np.abs(sol.precisions - num.point.precisions[:, 0, 0])))})
    write_json(args.out or "report.json", {"cases": cases})
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.scenario == "report":
            summary = report(args.manifest)
            text = (report_markdown(summary) if args.format == "markdown"
                    else json.dumps(summary, indent=2, sort_keys=True) + "\n")
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return 1 if summary["errors"] else 0
        if args.scenario == "cavi" and args.data:
            return _cli_cavi(args)
        if args.scenario == "landscape" and args.truth:
            return _cli_landscape(args)
        if args.scenario == "p1-check" and args.truth:
            if not args.A:
                raise ConfigError("p1-check --truth needs --A")
            return _cli_p1(args)
        if not getattr(args, "config", None):
            raise ConfigError(f"{args.scenario} needs --config")
        cfg = load_config(args.config)
        cfg.scenario = args.scenario
        if args.scenario == "cavi" and args.backend:
            cfg.flags["cavi_backend"] = args.backend
        manifest = run(cfg, args.out, args.seed, args.threads)
        sys.stdout.write(json.dumps({"output_dir": args.out or cfg.output_dir, "stages": manifest.stages},
                                    indent=2, sort_keys=True, default=float) + "\n")
        return 0
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 2
    except BudgetError as e:
        sys.stderr.write(f"budget error: {e}\n")
        return 3
    except NumericalError as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return 4
    except (FileNotFoundError, CorruptFileError) as e:
        sys.stderr.write(f"config error: {e}\n")
        return 2
