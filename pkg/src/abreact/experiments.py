"""Declarative experiment runner: typed configs, replica fan-out, reports and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import gaussian, kernels, observables, oracle
from .dynamics import (
    InteractionMode,
    make_rng,
    run_with_snapshots,
    simulate_marginals,
)
from .lattice import Lattice, OccupancyField, Rectangle, block_counts

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Check",
    "ExperimentResult",
    "KINDS",
    "SIMULATION_KINDS",
    "THREADS_ENV",
    "default_config",
    "run_experiment",
    "write_bundle",
    "CriterionVerdict",
    "acceptance_suite",
]

THREADS_ENV = "ABREACT_THREADS"

KINDS = (
    "simulate",
    "density-scan",
    "theorem1",
    "theorem3",
    "microscale",
    "segregation",
    "oracle-check",
    "kernel-scan",
    "gaussian-check",
)
SIMULATION_KINDS = ("simulate", "density-scan", "theorem1", "theorem3", "microscale", "segregation")
MODES = {m.value: m for m in InteractionMode}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# --- configuration ------------------------------------------------------------------


def _floats(v) -> tuple[float, ...]:
    return tuple(float(x) for x in v)


def _ints(v) -> tuple[int, ...]:
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, typed experiment description.

    Text form: one ``key = value`` per line, ``#`` comments, comma-separated tuples.
    Unknown keys are rejected.
    """

    kind: str
    d: int = 1
    sides: tuple[int, ...] = ()
    lam: float = 1.0
    full_start: bool = False
    mode: str = "two-type-annihilate"
    times: tuple[float, ...] = ()
    replicas: int = 1
    seed: int = 0
    threads: int = 0
    out: str = ""
    # rectangles in macroscopic (rescaled) units
    rect_lower: tuple[float, ...] = (0.0,)
    rect_upper: tuple[float, ...] = (1.0,)
    # density-scan checks
    amplitude_tol: float = 0.15
    slope_window: tuple[float, ...] = ()
    slope_target: float = -0.25
    slope_tol: float = 0.02
    # theorem1 / theorem3 / microscale checks
    alpha: float = 0.01
    ks_reference: int = 20000
    min_corr: float = 0.95
    min_type_corr: float = 0.9
    cell_side: int = 4
    dispersion_low: float = 0.85
    dispersion_high: float = 1.15
    max_contamination: float = 0.1
    # segregation
    box_scale: float = 0.25
    fixed_box: int = 0
    max_final: float = 0.1
    # oracle-check
    z_max: float = 3.0
    martingale_replicas: int = 10000
    martingale_time: float = 16.0
    martingale_box: int = 8
    martingale_side: int = 64
    # kernel-scan / gaussian-check
    samples: int = 10000
    smoothing_time: float = 1.0
    variance_rtol: float = 0.02

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type == "tuple[int, ...]":
                object.__setattr__(self, f.name, _ints(v))
            elif f.type == "tuple[float, ...]":
                object.__setattr__(self, f.name, _floats(v))

    # -- text round trip --

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                s = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                s = "true" if v else "false"
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = _parse_value(types[key], val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if "kind" not in values:
            raise ConfigError("missing required key 'kind'")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- derived --

    @property
    def interaction(self) -> InteractionMode:
        return MODES[self.mode]

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.sides)

    @property
    def rect(self) -> Rectangle:
        return Rectangle(self.rect_lower, self.rect_upper)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.mode not in MODES and not (self.kind == "oracle-check" and self.mode == "all"):
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {tuple(MODES)}")
        if not 1 <= self.d <= 3:
            raise ConfigError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.replicas < 1:
            raise ConfigError("replicas must be positive")
        if self.threads < 0:
            raise ConfigError("threads must be non-negative (0 = environment default)")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if any(t < 0 for t in self.times) or any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigError("times must be non-negative and strictly increasing")
        if len(self.rect_lower) != len(self.rect_upper):
            raise ConfigError("rect_lower and rect_upper differ in dimension")
        if self.kind in SIMULATION_KINDS:
            if len(self.sides) != self.d:
                raise ConfigError(f"sides {self.sides} do not match d={self.d}")
            if any(s < 2 for s in self.sides):
                raise ConfigError("every side must be at least 2")
            if not self.times:
                raise ConfigError("simulation kinds need a time grid")
            if not self.full_start and not self.lam > 0:
                raise ConfigError("lam must be positive unless full_start is set")
            if self.full_start and self.interaction is InteractionMode.TWO_TYPE_ANNIHILATE:
                raise ConfigError("full_start is a single-type initial condition")
            need = 12 * math.sqrt(max(self.times))
            if min(self.sides) < need:
                raise ConfigError(
                    f"torus side {min(self.sides)} is below 12 sqrt(t_max) = {need:.1f}"
                )
            if self.kind in ("theorem1", "theorem3", "microscale") and self.full_start:
                raise ConfigError(f"{self.kind} needs a two-type Poisson start")
            if self.kind in ("theorem1", "theorem3") and len(self.rect_lower) != self.d:
                raise ConfigError("rectangle dimension differs from d")
        if self.kind == "density-scan" and self.slope_window:
            lo, hi = (self.slope_window + (0.0,))[:2]
            if len(self.slope_window) != 2 or lo >= hi:
                raise ConfigError("slope_window needs two increasing times")
            if sum(lo <= t <= hi for t in self.times) < 2:
                raise ConfigError("slope_window holds fewer than two grid times")
        if self.kind == "oracle-check":
            if self.martingale_side < 12 * math.sqrt(self.martingale_time):
                raise ConfigError("martingale_side is below 12 sqrt(martingale_time)")
        return self


def _parse_value(typ: str, val: str):
    if typ == "str":
        return val
    if typ == "int":
        return int(val, 0)
    if typ == "float":
        return float(val)
    if typ == "bool":
        low = val.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    parts = [p.strip() for p in val.split(",") if p.strip()]
    if typ == "tuple[int, ...]":
        return tuple(int(p, 0) for p in parts)
    if typ == "tuple[float, ...]":
        return tuple(float(p) for p in parts)
    raise ValueError(f"unsupported type {typ}")


def _dyadic(lo: int, hi: int) -> tuple[float, ...]:
    out = []
    t = lo
    while t <= hi:
        out.append(float(t))
        t *= 2
    return tuple(out)


def default_config(kind: str) -> ExperimentConfig:
    """Configurations used by the acceptance suite, one per experiment kind."""
    base = {
        "simulate": dict(sides=(1024,), times=(0.0, 16.0, 64.0), replicas=1),
        "density-scan": dict(sides=(1 << 16,), times=_dyadic(16, 4096), replicas=50,
                             slope_window=(256.0, 4096.0)),
        "theorem1": dict(sides=(512,), times=(1024.0,), replicas=500),
        "theorem3": dict(sides=(512,), times=(1024.0,), replicas=500),
        "microscale": dict(sides=(1024,), times=(4096.0,), replicas=200),
        "segregation": dict(sides=(4096,), times=(16.0, 64.0, 256.0, 1024.0), replicas=30,
                            fixed_box=16),
        "oracle-check": dict(mode="all", times=(0.25, 0.5, 1.0, 2.0), replicas=100000),
        "kernel-scan": dict(times=(16.0, 64.0, 256.0)),
        "gaussian-check": dict(samples=10000),
    }
    if kind not in base:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return ExperimentConfig(kind=kind, **base[kind]).validate()


def resolve_threads(config: ExperimentConfig, override: int | None = None) -> int:
    """Thread budget: explicit override, then config, then the environment, then 1."""
    if override:
        return int(override)
    if config.threads:
        return config.threads
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive")
        return n
    return 1


# --- results ------------------------------------------------------------------------


@dataclass
class Check:
    """One acceptance-tagged comparison."""

    name: str
    measured: float | list
    target: str
    passed: bool
    anchor: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[dict] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    tables: dict[str, str] = field(default_factory=dict)
    snapshots: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    wall_time: float = 0.0
    audits: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def metric(self, name: str, value, anchor: str, se=None, **extra):
        row = {"name": name, "value": _plain(value), "anchor": anchor}
        if se is not None:
            row["se"] = _plain(se)
        row.update({k: _plain(v) for k, v in extra.items()})
        self.metrics.append(row)

    def check(self, name: str, measured, target: str, passed: bool, anchor: str) -> Check:
        c = Check(name, _plain(measured), target, bool(passed), anchor)
        self.checks.append(c)
        return c

    def get_metric(self, name: str) -> dict:
        for m in self.metrics:
            if m["name"] == name:
                return m
        raise KeyError(name)

    def report(self) -> dict:
        return {
            "config": {f.name: _plain(getattr(self.config, f.name))
                       for f in dataclasses.fields(self.config)},
            "metrics": self.metrics,
            "checks": [c.to_dict() for c in self.checks],
            "audits": self.audits,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True, allow_nan=True) + "\n"

    def summary(self) -> str:
        lines = [f"experiment {self.config.kind} (seed {self.config.seed}, "
                 f"{self.config.replicas} replicas, {self.wall_time:.1f} s)"]
        for m in self.metrics:
            se = f" +- {_fmt(m['se'])}" if "se" in m else ""
            lines.append(f"  {m['name']}: {_fmt(m['value'])}{se}   [{m['anchor']}]")
        for c in self.checks:
            lines.append(f"  {'PASS' if c.passed else 'FAIL'} {c.name}: {_fmt(c.measured)} "
                         f"(target {c.target})   [{c.anchor}]")
        return "\n".join(lines) + "\n"


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(x)}" for k, x in v.items()) + "}"
    return str(v)


def write_bundle(result: ExperimentResult, out_dir) -> Path:
    """Write ``report.json``, ``summary.txt``, one CSV per table and retained snapshots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.to_json())
    (out / "summary.txt").write_text(result.summary())
    for name, text in result.tables.items():
        (out / f"{name}.csv").write_text(text)
    if result.snapshots:
        np.savez_compressed(out / "snapshots.npz", **result.snapshots)
    return out


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)
                              for x in row))
    return "\n".join(lines) + "\n"


# --- replica fan-out -------------------------------------------------------------------


def _replica_snapshots(cfg: ExperimentConfig, replica: int, times) -> list[tuple[float, OccupancyField]]:
    mode = cfg.interaction
    lam = None if cfg.full_start else cfg.lam
    return run_with_snapshots(cfg.lattice, mode, times, cfg.seed, lam=lam, replica=replica)


def _density_task(args):
    cfg, r = args
    snaps = _replica_snapshots(cfg, r, cfg.times)
    m = cfg.lattice.n_sites
    return [(f.totals[0] / m, f.totals[1] / m) for _, f in snaps], len(snaps)


def _pair_task(args):
    cfg, r = args
    times = (0.0, cfg.times[-1]) if cfg.times[-1] > 0 else (0.0,)
    snaps = _replica_snapshots(cfg, r, times)
    f0, ft = snaps[0][1], snaps[-1][1]
    return (f0.a, f0.b, ft.a, ft.b), len(snaps)


def _segregation_task(args):
    cfg, r = args
    snaps = _replica_snapshots(cfg, r, cfg.times)
    scaled, fixed = [], []
    for t, f in snaps:
        scaled.append(observables.minority_fraction(f, max(1, round(cfg.box_scale * math.sqrt(t)))))
        fixed.append(observables.minority_fraction(f, cfg.fixed_box) if cfg.fixed_box else float("nan"))
    return (scaled, fixed), len(snaps)


def _fan_out(task: Callable, cfg: ExperimentConfig, threads: int) -> tuple[list, int]:
    """Run ``task((cfg, r))`` for every replica; results are ordered by replica index."""
    jobs = [(cfg, r) for r in range(cfg.replicas)]
    if threads > 1 and cfg.replicas > 1:
        with ProcessPoolExecutor(max_workers=min(threads, cfg.replicas)) as pool:
            out = list(pool.map(task, jobs, chunksize=max(1, cfg.replicas // (4 * threads))))
    else:
        out = []
        for job in jobs:
            try:
                out.append(task(job))
            except Exception as exc:
                raise RuntimeError(
                    f"replica {job[1]} (seed {cfg.seed}) failed: {exc}"
                ) from exc
    return [o[0] for o in out], sum(o[1] for o in out)


def _fields_from(cfg: ExperimentConfig, arrays) -> tuple[OccupancyField, OccupancyField]:
    lat = cfg.lattice
    a0, b0, at, bt = arrays
    return OccupancyField(lat, a0, b0), OccupancyField(lat, at, bt)


# --- experiment kinds -------------------------------------------------------------------


def density_reference(mode: InteractionMode, lam: float, d: int) -> tuple[float, float, str] | None:
    """``(amplitude, exponent, label)`` with ``rho(t) ~ amplitude * t^{-exponent}``."""
    if mode is InteractionMode.TWO_TYPE_ANNIHILATE:
        return observables.amplitude_target(lam, d), d / 4, "two-type density amplitude (lam/pi)^1/2 (4 pi)^-d/4"
    if d == 1 and mode is InteractionMode.SINGLE_TYPE_COALESCE:
        return 1 / math.sqrt(math.pi), 0.5, "coalescing density 1/sqrt(pi t)"
    if d == 1 and mode is InteractionMode.SINGLE_TYPE_ANNIHILATE:
        return 0.5 / math.sqrt(math.pi), 0.5, "single-type annihilating density 1/(2 sqrt(pi t))"
    return None


def _run_density(cfg: ExperimentConfig, threads: int, res: ExperimentResult):
    per, res.audits = _fan_out(_density_task, cfg, threads)
    dens = np.array(per)  # (replica, time, type)
    mode = cfg.interaction
    if mode is InteractionMode.TWO_TYPE_ANNIHILATE or mode is InteractionMode.FREE:
        rho = dens.mean(axis=2)
        label = "per-type density (mean of A and B)"
    else:
        rho = dens[:, :, 1]
        label = "single-type density"
    series = observables.MetricSeries("rho", cfg.times, rho, anchor=label)
    res.tables["density"] = series.to_csv()
    res.tables["density_replicas"] = series.to_csv(full=True)
    for t, (m, s) in zip(cfg.times, zip(series.mean, series.se)):
        res.metric(f"rho(t={t:g})", m, label, se=s if series.n > 1 else None)
    ref = density_reference(mode, cfg.lam, cfg.d)
    if ref is not None and cfg.times[0] > 0:
        amp0, expo, anchor = ref
        amp = observables.MetricSeries("amplitude", cfg.times, rho * np.asarray(cfg.times) ** expo,
                                       reference=amp0, anchor=anchor)
        res.tables["amplitude"] = amp.to_csv()
        res.metric("amplitude target", amp0, anchor)
        for t, m, s in zip(cfg.times, amp.mean, amp.se):
            res.metric(f"amplitude(t={t:g})", m, anchor, se=s if amp.n > 1 else None)
        final = float(amp.mean[-1])
        ratio = final / amp0
        res.metric("amplitude ratio at final time", ratio, anchor)
        if cfg.amplitude_tol > 0:
            res.check(f"amplitude at t={cfg.times[-1]:g} within {cfg.amplitude_tol:.0%} of target",
                      final, f"{amp0:.6g} +- {cfg.amplitude_tol:.0%}",
                      abs(ratio - 1) <= cfg.amplitude_tol, anchor)
    if cfg.slope_window:
        lo, hi = cfg.slope_window
        times = np.asarray(cfg.times)
        sel = (times >= lo) & (times <= hi)
        ts = times[sel]
        slope = observables.loglog_slope(ts, series.mean[sel])
        anchor = "density decay exponent -d/4"
        res.metric(f"log-log slope over [{lo:g}, {hi:g}]", slope, anchor)
        res.check(f"slope over [{lo:g}, {hi:g}]", slope, f"{cfg.slope_target:g} +- {cfg.slope_tol:g}",
                  abs(slope - cfg.slope_target) <= cfg.slope_tol, anchor)


def _pairs(cfg: ExperimentConfig, threads: int) -> tuple[list, int]:
    arrays, audits = _fan_out(_pair_task, cfg, threads)
    return [_fields_from(cfg, a) for a in arrays], audits


def _retain(res: ExperimentResult, pairs):
    res.snapshots = {
        "a0": np.stack([p[0].a for p in pairs]), "b0": np.stack([p[0].b for p in pairs]),
        "at": np.stack([p[1].a for p in pairs]), "bt": np.stack([p[1].b for p in pairs]),
    }


def _analyze_theorem1(cfg: ExperimentConfig, pairs, res: ExperimentResult):
    T = cfg.times[-1]
    rep = observables.macro_gaussian_test([p[1] for p in pairs], cfg.rect, cfg.lam, T,
                                          rng_seed=cfg.seed, n_reference=cfg.ks_reference)
    anchor = "macroscopic Gaussian limit of the signed block"
    res.metric("sigma2_D", rep.sigma2, "block variance 2 lam int_D int_D N_2(x-y)")
    res.metric("scaled signed variance", float(np.var(rep.scaled_signed, ddof=1)), anchor)
    res.metric("KS p signed (raw counts)", rep.raw_signed_p, anchor, statistic=rep.raw_signed_stat)
    res.metric("KS p signed (unit jitter)", rep.signed_p, anchor, statistic=rep.signed_stat)
    res.metric("KS p A block vs (Phi*N_1)^-", rep.a_p, "per-type macroscopic limit", statistic=rep.a_stat)
    res.metric("KS p B block vs (Phi*N_1)^+", rep.b_p, "per-type macroscopic limit", statistic=rep.b_stat)
    res.metric("zero-atom share A", float(np.mean(rep.scaled_a == 0)), "per-type macroscopic limit")
    res.check("signed block KS p-value", rep.signed_p, f"> {cfg.alpha:g}", rep.signed_p > cfg.alpha, anchor)
    res.check("A block KS p-value", rep.a_p, f"> {cfg.alpha:g}", rep.a_p > cfg.alpha,
              "per-type macroscopic limit")
    res.check("B block KS p-value", rep.b_p, f"> {cfg.alpha:g}", rep.b_p > cfg.alpha,
              "per-type macroscopic limit")
    res.tables["theorem1_blocks"] = _csv(
        ["replica", "signed", "a", "b"],
        [(i, s, a, b) for i, (s, a, b) in enumerate(zip(rep.scaled_signed, rep.scaled_a, rep.scaled_b))],
    )


def _analyze_theorem3(cfg: ExperimentConfig, pairs, res: ExperimentResult):
    T = cfg.times[-1]
    rect = cfg.rect.scaled(math.sqrt(T))
    rep = observables.theorem3_diagnostic(pairs, rect, T)
    anchor = "sample-path agreement with the smoothed initial field"
    for label, st in (("signed", rep.signed), ("A", rep.a), ("B", rep.b)):
        res.metric(f"pearson r {label}", st.pearson_r, anchor, rmse=st.rmse, degenerate=st.degenerate)
    res.check("signed correlation", rep.signed.pearson_r, f">= {cfg.min_corr:g}",
              not rep.signed.degenerate and rep.signed.pearson_r >= cfg.min_corr, anchor)
    for label, st in (("A", rep.a), ("B", rep.b)):
        res.check(f"{label} correlation", st.pearson_r, f">= {cfg.min_type_corr:g}",
                  not st.degenerate and st.pearson_r >= cfg.min_type_corr, anchor)
    res.tables["theorem3_pairs"] = _csv(
        ["replica", "signed", "signed_pred", "a", "a_pred", "b", "b_pred"],
        [(i, *[float(v) for pair in zip(o, p) for v in pair])
         for i, (o, p) in enumerate(zip(rep.observed, rep.predicted))],
    )


def _run_microscale(cfg: ExperimentConfig, threads: int, res: ExperimentResult):
    pairs, res.audits = _pairs(cfg, threads)
    _retain(res, pairs)
    t = cfg.times[-1]
    rep = observables.microscale_poisson_test(pairs, t, cfg.cell_side, cfg.lam)
    anchor = "microscopic Poisson mixture limit"
    res.metric("windows", rep.n_windows, anchor)
    res.metric("conditional dispersion", rep.dispersion, anchor, se=rep.dispersion_se)
    res.metric("minority cell contamination", rep.contamination, "local segregation")
    res.metric("intensity scale", rep.intensity_scale, "mixing law variance 2 lam (4 pi)^-d/2")
    res.metric("KS p intensity vs half-normal", rep.intensity_p, anchor, statistic=rep.intensity_stat)
    res.check("conditional dispersion", rep.dispersion,
              f"in [{cfg.dispersion_low:g}, {cfg.dispersion_high:g}]",
              cfg.dispersion_low <= rep.dispersion <= cfg.dispersion_high, anchor)
    res.check("minority contamination", rep.contamination, f"< {cfg.max_contamination:g}",
              rep.contamination < cfg.max_contamination, "local segregation")
    res.check("intensity KS p-value", rep.intensity_p, f"> {cfg.alpha:g}",
              rep.intensity_p > cfg.alpha, "mixing law of the local intensity")
    res.tables["intensities"] = _csv(["replica", "intensity"], list(enumerate(rep.intensities)))


def _run_segregation(cfg: ExperimentConfig, threads: int, res: ExperimentResult):
    per, res.audits = _fan_out(_segregation_task, cfg, threads)
    scaled = np.array([p[0] for p in per])
    fixed = np.array([p[1] for p in per])
    anchor = "minority fraction at boxes of side box_scale sqrt(t)"
    s = observables.MetricSeries("minority", cfg.times, scaled, anchor=anchor)
    res.tables["minority"] = s.to_csv()
    for t, m, e in zip(cfg.times, s.mean, s.se):
        res.metric(f"minority(t={t:g}, R={max(1, round(cfg.box_scale * math.sqrt(t)))})", m,
                   anchor, se=e if s.n > 1 else None)
    if cfg.fixed_box:
        fs = observables.MetricSeries("minority_fixed", cfg.times, fixed)
        res.tables["minority_fixed_box"] = fs.to_csv()
        for t, m, e in zip(cfg.times, fs.mean, fs.se):
            res.metric(f"minority(t={t:g}, R={cfg.fixed_box}) [diagnostic]", m,
                       "minority fraction at fixed box side", se=e if fs.n > 1 else None)
    means = s.mean
    res.check("minority fraction strictly decreasing", list(means), "strictly decreasing",
              bool(np.all(np.diff(means) < 0)), anchor)
    res.check("final minority fraction", float(means[-1]), f"< {cfg.max_final:g}",
              means[-1] < cfg.max_final, anchor)


# --- oracle certification ---------------------------------------------------------------


def tiny_system(mode: InteractionMode) -> OccupancyField:
    """Small starting configurations for the engine-versus-uniformization comparison."""
    if mode is InteractionMode.TWO_TYPE_ANNIHILATE:
        lat = Lattice((4,))
        return OccupancyField.from_counts(lat, {0: (1, 0), 1: (1, 0), 2: (0, 1)})
    if mode is InteractionMode.SINGLE_TYPE_ANNIHILATE:
        lat = Lattice((5,))
        return OccupancyField.from_counts(lat, {0: (0, 1), 1: (0, 1), 2: (0, 1)})
    if mode is InteractionMode.SINGLE_TYPE_COALESCE:
        lat = Lattice((4,))
        return OccupancyField.from_counts(lat, {i: (0, 1) for i in range(4)})
    lat = Lattice((3, 3))
    return OccupancyField.from_counts(lat, {0: (0, 1), 4: (1, 0)})


def _z_scores(sim_mean, exact_mean, exact_var, n) -> np.ndarray:
    se = np.sqrt(exact_var / n)
    diff = sim_mean - exact_mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 1e-12, diff / np.where(se > 1e-12, se, 1.0),
                     np.where(np.abs(diff) < 1e-12, 0.0, np.inf))
    return z


def _run_oracle(cfg: ExperimentConfig, threads: int, res: ExperimentResult):
    modes = list(InteractionMode) if cfg.mode == "all" else [cfg.interaction]
    times = cfg.times
    rows = []
    anchor = "exact transient law of the particle chain"
    for k, mode in enumerate(modes):
        init = tiny_system(mode)
        gen = oracle.build_generator(init, mode)
        sim_mean, _ = simulate_marginals(init, mode, times, cfg.replicas, [cfg.seed, 100 + k])
        p0 = gen.point_mass(init)
        zmax = 0.0
        for i, t in enumerate(times):
            dist = oracle.transient_distribution(gen, p0, t)
            mean, var = oracle.marginal_table(gen, dist)
            z = _z_scores(sim_mean[i], mean, var, cfg.replicas)
            for site in range(init.lattice.n_sites):
                for c, kind in enumerate("ab"):
                    rows.append((mode.value, t, site, kind, float(mean[site, c]),
                                 float(sim_mean[i, site, c]), float(z[site, c])))
            zmax = max(zmax, float(np.max(np.abs(z))))
        res.metric(f"max |z| {mode.value}", zmax, anchor, states=gen.n_states)
        res.check(f"oracle marginals {mode.value}", zmax, f"all |z| <= {cfg.z_max:g}",
                  zmax <= cfg.z_max, anchor)
    res.tables["oracle_z"] = _csv(["mode", "time", "site", "type", "exact", "simulated", "z"], rows)

    # two particles on a ring of two sites: every jump annihilates, survival exp(-2t)
    pair = OccupancyField.from_counts(Lattice((2,)), {0: (1, 0), 1: (0, 1)})
    t_pair = 0.5
    m, _ = simulate_marginals(pair, InteractionMode.TWO_TYPE_ANNIHILATE, [t_pair], cfg.replicas,
                              [cfg.seed, 200])
    surv = float(m[0, :, 0].sum())
    exact = math.exp(-2 * t_pair)
    z = (surv - exact) / math.sqrt(exact * (1 - exact) / cfg.replicas)
    res.metric("pair survival at t=0.5", surv, "pair annihilation at total rate 2", exact=exact, z=z)
    res.check("pair survival", z, f"|z| <= {cfg.z_max:g} around {exact:.6f}", abs(z) <= cfg.z_max,
              "pair annihilation at total rate 2")

    _martingale(cfg, res)


def _martingale(cfg: ExperimentConfig, res: ExperimentResult):
    """Free walkers: the mean signed count in a box equals the walk-kernel smoothed start."""
    lat = Lattice((cfg.martingale_side,))
    start = run_with_snapshots(lat, InteractionMode.TWO_TYPE_ANNIHILATE, [0.0], [cfg.seed, 300],
                               lam=cfg.lam)[0][1]
    t = cfg.martingale_time
    box = Rectangle((0.0,), (float(cfg.martingale_box),))
    pred = observables.conditional_mean_field(start, t).block_sum(box)
    vals = np.empty(cfg.martingale_replicas)
    for r in range(cfg.martingale_replicas):
        f = run_with_snapshots(lat, InteractionMode.FREE, [t], [cfg.seed, 301], initial=start,
                               replica=r)[0][1]
        vals[r] = block_counts(f, box).signed
    mean, se = observables.mean_ci(vals)
    z = (mean - pred) / se
    anchor = "free-walk conditional expectation identity"
    res.metric("free-mode box mean", mean, anchor, se=se, predicted=pred, z=z)
    res.check("free-mode martingale identity", z, f"|z| <= {cfg.z_max:g}", abs(z) <= cfg.z_max, anchor)


# --- kernel and Gaussian suites ----------------------------------------------------------


def _run_kernel_scan(cfg: ExperimentConfig, res: ExperimentResult, walk=None):
    make_walk = walk or kernels.walk_table
    d = cfg.d
    anchor = "lattice heat kernel"
    check_times = sorted({0.5, 1.0, 4.0, *cfg.times})
    norm_err = max(abs(make_walk(t, d).total() - 1.0) for t in check_times)
    res.metric("max normalization error", norm_err, anchor)
    res.check("walk-kernel normalization", norm_err, "<= 1e-12", norm_err <= 1e-12, anchor)
    var_err = 0.0
    for t in check_times:
        tab = make_walk(t, d, threshold=1e-15)
        for ax in range(d):
            var_err = max(var_err, abs(tab.coordinate_variance(ax) - t))
    res.metric("max per-coordinate variance error", var_err, anchor)
    res.check("per-coordinate variance", var_err, "<= 1e-8", var_err <= 1e-8, anchor)
    ck_err = 0.0
    for s, t in ((1.0, 3.0), (4.0, 12.0), (16.0, 48.0)):
        ks = make_walk(s, 1, threshold=1e-15).values
        kt = make_walk(t, 1, threshold=1e-15).values
        both = np.convolve(ks, kt)
        r = (both.size - 1) // 2
        kst = make_walk(s + t, 1, radius=r).values
        ck_err = max(ck_err, float(np.max(np.abs(both - kst))))
    res.metric("max Chapman-Kolmogorov error", ck_err, anchor)
    res.check("Chapman-Kolmogorov", ck_err, "<= 1e-10", ck_err <= 1e-10, anchor)

    rows = kernels.kernel_gap_scan(cfg.times, d, walk=walk)
    res.tables["kernel_gap"] = _csv(["t", "sup", "l1", "l2sq"], [(r.t, r.sup, r.l1, r.l2) for r in rows])
    exps = {"sup": (d + 1) / 2, "l1": 0.5, "l2": d / 2 + 1}
    gap_anchor = "local limit theorem gap bounds"
    ok = True
    ratios = {}
    for name, alpha in exps.items():
        vals = np.array([getattr(r, name) for r in rows])
        ts = np.array([r.t for r in rows])
        rs = vals[1:] / vals[:-1]
        bound = 2.0 * (ts[1:] / ts[:-1]) ** (-alpha)
        ratios[name] = list(rs)
        res.metric(f"gap ratios {name}", list(rs), gap_anchor, bound=list(bound),
                   fitted_exponent=-observables.loglog_slope(ts, vals))
        ok &= bool(np.all(rs <= bound))
    res.check("gap scan decay", ratios, "successive ratios <= 2 x bound rate", ok, gap_anchor)


def _run_gaussian(cfg: ExperimentConfig, res: ExperimentResult):
    n = cfg.samples
    seed = cfg.seed
    sheet_anchor = "Brownian sheet"
    sheet = gaussian.sample_brownian_sheet([[-1.0, 0.0, 1.0, 2.0]] * 2, [seed, 1], size=n)
    w11 = sheet.at((1.0, 1.0))
    v = float(np.var(w11, ddof=1))
    sd = math.sqrt(2.0 / (n - 1))
    res.metric("Var W(1,1)", v, sheet_anchor, se=sd)
    res.check("Var W(1,1)", v, "1 +- 3 sigma", abs(v - 1) <= 3 * sd, sheet_anchor)
    vals = sheet.values
    axis_max = float(max(np.abs(vals[:, 1, :]).max(), np.abs(vals[:, :, 1]).max()))
    res.metric("max |W| on axes", axis_max, sheet_anchor)
    res.check("W vanishes on axes", axis_max, "== 0", axis_max == 0.0, sheet_anchor)

    wn_anchor = "white-noise covariance |D1 n D2|"
    rect = Rectangle((-1.0, 0.0), (1.0, 2.0))
    phi = gaussian.white_noise_rectangle(sheet, rect)
    v = float(np.var(phi, ddof=1))
    sd = rect.volume * math.sqrt(2.0 / (n - 1))
    res.metric("Var Phi(D)", v, wn_anchor, se=sd, target=rect.volume)
    res.check("Var Phi(D)", v, f"{rect.volume:g} +- 3 sigma", abs(v - rect.volume) <= 3 * sd, wn_anchor)

    t = cfg.smoothing_time
    d = 1
    pts = np.linspace(0.0, 8.0, 33)
    sm = gaussian.sample_smoothed_field(pts, t, [seed, 2], size=n).values
    target = (4 * math.pi * t) ** (-d / 2)
    pooled = float(np.mean(np.var(sm, axis=0, ddof=1)))
    res.metric("pooled pointwise variance", pooled, "smoothed white-noise variance (4 pi t)^-d/2",
               target=target)
    res.check("pointwise variance", pooled / target - 1, f"|rel err| <= {cfg.variance_rtol:g}",
              abs(pooled / target - 1) <= cfg.variance_rtol, "smoothed white-noise variance")
    cov_anchor = "smoothed white-noise covariance N_2t"
    cov_ok = True
    zs = []
    for lag in (2, 4, 8):  # grid spacing 0.25
        x, y = sm[:, 0], sm[:, lag]
        c = float(np.mean((x - x.mean()) * (y - y.mean())) * n / (n - 1))
        exact = float(kernels.normal_kernel([pts[lag]], 2 * t))
        se = math.sqrt((target * target + exact * exact) / n)
        z = (c - exact) / se
        zs.append(z)
        cov_ok &= abs(z) <= 3
    res.metric("covariance z at lags 0.5, 1, 2", zs, cov_anchor)
    res.check("empirical covariance", zs, "all |z| <= 3", cov_ok, cov_anchor)

    M = 4.0
    sm2 = gaussian.sample_smoothed_field(pts, M * t, [seed, 3], size=n).values
    v1 = float(np.var(sm[:, 0], ddof=1))
    v2 = float(np.var(sm2[:, 0], ddof=1))
    ratio = v2 / v1
    se = ratio * math.sqrt(4.0 / (n - 1))
    expect = M ** (-d / 2)
    res.metric("variance ratio t -> 4t", ratio, "Brownian scaling of smoothed white noise", se=se,
               target=expect)
    res.check("scaling ratio", ratio, f"{expect:g} +- 3 sigma", abs(ratio - expect) <= 3 * se,
              "Brownian scaling of smoothed white noise")


def _run_simulate(cfg: ExperimentConfig, res: ExperimentResult):
    snaps = _replica_snapshots(cfg, 0, cfg.times)
    res.audits = len(snaps)
    m = cfg.lattice.n_sites
    for t, f in snaps:
        na, nb = f.totals
        res.metric(f"counts(t={t:g})", [na, nb], "particle counts (A, B)")
        res.tables[f"snapshot_t{t:g}"] = f.to_csv()
    res.tables["densities"] = _csv(["time", "rho_a", "rho_b"],
                                   [(t, f.totals[0] / m, f.totals[1] / m) for t, f in snaps])


# --- entry points ----------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, threads: int | None = None,
                   kernel_walk=None) -> ExperimentResult:
    """Run one experiment deterministically from ``(config, seed)``.

    ``kernel_walk`` replaces the walk-kernel tabulator in kernel scans (fault injection).
    """
    cfg = config.validate()
    nthreads = resolve_threads(cfg, threads)
    res = ExperimentResult(cfg)
    started = time.perf_counter()
    kind = cfg.kind
    if kind == "simulate":
        _run_simulate(cfg, res)
    elif kind == "density-scan":
        _run_density(cfg, nthreads, res)
    elif kind in ("theorem1", "theorem3"):
        pairs, res.audits = _pairs(cfg, nthreads)
        _retain(res, pairs)
        (_analyze_theorem1 if kind == "theorem1" else _analyze_theorem3)(cfg, pairs, res)
    elif kind == "microscale":
        _run_microscale(cfg, nthreads, res)
    elif kind == "segregation":
        _run_segregation(cfg, nthreads, res)
    elif kind == "oracle-check":
        _run_oracle(cfg, nthreads, res)
    elif kind == "kernel-scan":
        _run_kernel_scan(cfg, res, walk=kernel_walk)
    elif kind == "gaussian-check":
        _run_gaussian(cfg, res)
    res.wall_time = time.perf_counter() - started
    return res


@dataclass
class CriterionVerdict:
    number: int
    title: str
    passed: bool
    measured: dict
    target: str
    wall_time: float
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        shown = ", ".join(f"{k}={_fmt(_plain(v))}" for k, v in self.measured.items())
        return f"[{status}] criterion {self.number:2d} {self.title}: {shown} (target {self.target})"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["measured"] = {k: _plain(v) for k, v in self.measured.items()}
        return d


FAST_EXCLUDED = (1, 11)


def _verdict(num, title, results: Sequence[ExperimentResult], target: str, started: float,
             checks: Sequence[str] | None = None, extra: dict | None = None,
             extra_pass: bool = True, note: str = "") -> CriterionVerdict:
    measured = {}
    ok = extra_pass
    for r in results:
        for c in r.checks:
            if checks is None or c.name in checks:
                measured[c.name] = c.measured
                ok &= c.passed
    measured.update(extra or {})
    return CriterionVerdict(num, title, bool(ok), measured, target, time.perf_counter() - started, note)


def acceptance_suite(selector: str = "all", seed: int = 20240611, threads: int | None = None,
                     only: Sequence[int] | None = None,
                     progress: Callable[[CriterionVerdict], None] | None = None) -> list[CriterionVerdict]:
    """Run the acceptance criteria. ``fast`` skips the two t=4096 experiments."""
    if selector not in ("all", "fast"):
        raise ConfigError(f"selector must be 'all' or 'fast', got {selector!r}")
    wanted = set(range(1, 13)) if only is None else set(only)
    if selector == "fast":
        wanted -= set(FAST_EXCLUDED)
    verdicts: list[CriterionVerdict] = []
    audits = 0

    def emit(v: CriterionVerdict):
        verdicts.append(v)
        if progress is not None:
            progress(v)

    def run(cfg):
        nonlocal audits
        r = run_experiment(cfg.replace(seed=seed), threads)
        audits += r.audits
        return r

    if 1 in wanted:
        s = time.perf_counter()
        r = run(default_config("density-scan"))
        emit(_verdict(1, "d=1 density amplitude and exponent", [r],
                      "amplitude 0.29966 +-15%, slope -0.25 +- 0.02", s))
    if 2 in wanted:
        s = time.perf_counter()
        cfg = default_config("density-scan").replace(
            d=2, sides=(512, 512), times=_dyadic(64, 1024), replicas=20,
            slope_window=(64.0, 1024.0), slope_target=-0.5, slope_tol=0.05, amplitude_tol=0.0)
        r = run(cfg)
        emit(_verdict(2, "d=2 density exponent", [r], "slope -0.5 +- 0.05", s))
    if 3 in wanted:
        s = time.perf_counter()
        base = default_config("density-scan").replace(
            full_start=True, times=(1024.0,), replicas=20, slope_window=())
        coal = run(base.replace(mode=InteractionMode.SINGLE_TYPE_COALESCE.value, amplitude_tol=0.05))
        ann = run(base.replace(mode=InteractionMode.SINGLE_TYPE_ANNIHILATE.value, amplitude_tol=0.0))
        scaled = coal.get_metric("amplitude(t=1024)")["value"] * math.sqrt(math.pi)
        ratio = ann.get_metric("rho(t=1024)")["value"] / coal.get_metric("rho(t=1024)")["value"]
        emit(_verdict(3, "single-type oracles", [coal], "rho sqrt(pi t) in [0.95, 1.05], ratio in [0.45, 0.55]",
                      s, extra={"rho*sqrt(pi t)": scaled, "annihilating/coalescing": ratio},
                      extra_pass=0.95 <= scaled <= 1.05 and 0.45 <= ratio <= 0.55))
    oracle_res = None
    if 4 in wanted or 5 in wanted:
        s0 = time.perf_counter()
        oracle_res = run(default_config("oracle-check"))
    if 4 in wanted:
        names = [c.name for c in oracle_res.checks if c.name != "free-mode martingale identity"]
        emit(_verdict(4, "exact-oracle certification", [oracle_res], "all |z| <= 3", s0, checks=names))
    if 5 in wanted:
        emit(_verdict(5, "free-mode martingale identity", [oracle_res], "|z| <= 3", s0,
                      checks=["free-mode martingale identity"]))
    if 6 in wanted:
        s = time.perf_counter()
        r = run(default_config("kernel-scan"))
        emit(_verdict(6, "kernel suite", [r], "norm 1e-12, variance 1e-8, CK 1e-10, gap rates", s))
    if 7 in wanted:
        s = time.perf_counter()
        r = run(default_config("gaussian-check"))
        emit(_verdict(7, "Gaussian-field suite", [r], "3 sigma / 2%", s))
    if 8 in wanted or 9 in wanted:
        s = time.perf_counter()
        cfg = default_config("theorem1").replace(seed=seed)
        pairs, n_aud = _pairs(cfg, resolve_threads(cfg, threads))
        audits += n_aud
        r1 = ExperimentResult(cfg)
        r3 = ExperimentResult(cfg.replace(kind="theorem3"))
        if 8 in wanted:
            _analyze_theorem1(cfg, pairs, r1)
            emit(_verdict(8, "macroscopic Gaussian limit", [r1], "KS p > 0.01 (signed, A, B)", s,
                          extra={k: r1.get_metric(k)["value"] for k in ("KS p signed (raw counts)",)}))
        if 9 in wanted:
            s = time.perf_counter()
            _analyze_theorem3(cfg, pairs, r3)
            emit(_verdict(9, "sample-path correlation", [r3], "r >= 0.95 signed, >= 0.9 per type", s))
    if 10 in wanted:
        s = time.perf_counter()
        r = run(default_config("segregation"))
        emit(_verdict(10, "segregation trend", [r], "strictly decreasing, final < 0.1", s,
                      extra={"fixed-box diagnostic": [m["value"] for m in r.metrics
                                                      if m["name"].endswith("[diagnostic]")]}))
    if 11 in wanted:
        s = time.perf_counter()
        r = run(default_config("microscale"))
        emit(_verdict(11, "microscopic Poisson mixture", [r],
                      "dispersion in [0.85, 1.15], contamination < 0.1, KS p > 0.01", s))
    if 12 in wanted:
        s = time.perf_counter()
        small = ExperimentConfig(kind="density-scan", sides=(2048,), times=_dyadic(1, 256),
                                 replicas=4, seed=seed, slope_window=(16.0, 256.0),
                                 amplitude_tol=0.0, slope_tol=1.0).validate()
        j1 = run_experiment(small, 1).to_json()
        j2 = run_experiment(small, 1).to_json()
        snaps = [run_with_snapshots(Lattice((64, 64)), InteractionMode.TWO_TYPE_ANNIHILATE,
                                    [0.0, 8.0, 64.0], seed, lam=1.0, replica=7) for _ in range(2)]
        csv_same = all(a[1].to_csv() == b[1].to_csv() for a, b in zip(*snaps))
        audits += 2 * len(snaps[0]) + 2
        emit(_verdict(12, "determinism and audits", [], "identical duplicates, exact audits", s,
                      extra={"json identical": j1 == j2, "snapshots identical": csv_same,
                             "audits passed": audits},
                      extra_pass=j1 == j2 and csv_same and audits > 0))
    return verdicts
