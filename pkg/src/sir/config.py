"""Benchmark configuration: strict TOML loading, defaults, manifest hashing.

Unknown keys are rejected, validation failures name the offending table and
field, and every message is anchored to a line of the source file where one
can be found.  The effective (defaults-filled) configuration serializes
canonically, so its hash is stable under key reordering.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from . import rfenv

__all__ = [
    "ConfigError",
    "Fig3Params",
    "Fig5Params",
    "Fig6Params",
    "BenchConfig",
    "load_config",
    "default_fig5_scenario",
    "config_hash",
    "make_manifest",
]


class ConfigError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = int(line)
        self.message = message
        loc = f"{self.path}:{self.line}" if line > 0 else self.path
        super().__init__(f"{loc}: {message}")


def _anchor(raw: str, key: str, start_line: int = 0) -> int:
    """1-based line of the first assignment of ``key`` at or after start_line."""
    pat = re.compile(r"^\s*\"?" + re.escape(key) + r"\"?\s*=")
    for i, line in enumerate(raw.splitlines(), start=1):
        if i >= start_line and pat.match(line):
            return i
    return 0


def _table_line(raw: str, header: str, occurrence: int = 1) -> int:
    """1-based line of the n-th [header] or [[header]] table declaration."""
    pat = re.compile(r"^\s*\[+\s*" + re.escape(header) + r"\s*\]+")
    seen = 0
    for i, line in enumerate(raw.splitlines(), start=1):
        if pat.match(line):
            seen += 1
            if seen == occurrence:
                return i
    return 0


@dataclass(frozen=True)
class Fig3Params:
    grid_db: tuple = tuple(range(-16, 2, 2))
    windows: int = 4000
    samples_per_window: int = 500
    noise_var: float = 1.0
    mean_dwell: int = 200
    level_count: int = 4
    sweeps: int = 300
    burnin: int = 150
    prune_weight: float = 0.01


@dataclass(frozen=True)
class Fig5Params:
    k_max: int = 20
    sweeps: int = 500
    burnin: int = 250
    kappa: float = 50.0
    alpha: float = 1.0
    gamma: float = 1.0
    merge_tol: float = 1.0
    occupancy_margin: float = 0.5
    query_points: int = 1000


@dataclass(frozen=True)
class Fig6Params:
    n_channels: int = 16
    subsets: tuple = (1, 2, 4, 8, 16)
    p01: float = 0.2
    p11: float = 0.9
    spans: int = 120
    test_spans: int = 30
    span_len: int = 50
    discount: float = 0.9
    window: int = 8
    eps_start: float = 1.0
    eps_end: float = 0.02


@dataclass(frozen=True)
class BenchConfig:
    path: str
    scenario: rfenv.ScenarioConfig | None
    fig3: Fig3Params
    fig5: Fig5Params
    fig6: Fig6Params
    effective: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.effective)


_SCENARIO_KEYS = {"area_km", "noise_var", "samples_per_window", "slot_duration",
                  "seed", "n_channels", "pus", "sus"}
_PU_KEYS = {"position", "coverage_radius", "channel", "power_levels",
            "level_priors", "mean_dwell"}
_SU_KEYS = {"start", "end", "n_samples", "cluster_head"}


def default_fig5_scenario() -> rfenv.ScenarioConfig:
    """Three always-on PUs on distinct channels with two pairwise coverage
    overlaps (six spatial spectrum states including outside-all), nine SU
    tracks arranged so every region and every disk diameter is sampled."""
    pus = [
        rfenv.PuNode(position=(3.2, 4.2), coverage_radius=2.2, channel=0,
                     power_levels=(3.0,), level_priors=(1.0,)),
        rfenv.PuNode(position=(6.4, 4.2), coverage_radius=2.2, channel=1,
                     power_levels=(3.0,), level_priors=(1.0,)),
        rfenv.PuNode(position=(8.0, 7.6), coverage_radius=2.2, channel=2,
                     power_levels=(3.0,), level_priors=(1.0,)),
    ]
    sus = [
        rfenv.SuTrack(start=(0.0, 4.2), end=(12.0, 4.2), n_samples=400, cluster_head=0),
        rfenv.SuTrack(start=(0.0, 7.6), end=(12.0, 7.6), n_samples=400, cluster_head=0),
        rfenv.SuTrack(start=(4.8, 0.8), end=(9.6, 11.0), n_samples=400, cluster_head=0),
        rfenv.SuTrack(start=(3.2, 0.0), end=(3.2, 12.0), n_samples=400, cluster_head=1),
        rfenv.SuTrack(start=(8.0, 0.0), end=(8.0, 12.0), n_samples=400, cluster_head=1),
        rfenv.SuTrack(start=(6.4, 0.0), end=(6.4, 12.0), n_samples=400, cluster_head=1),
        rfenv.SuTrack(start=(0.0, 1.0), end=(12.0, 1.0), n_samples=400, cluster_head=2),
        rfenv.SuTrack(start=(11.0, 0.0), end=(11.0, 12.0), n_samples=400, cluster_head=2),
        rfenv.SuTrack(start=(0.0, 10.5), end=(12.0, 10.5), n_samples=400, cluster_head=2),
    ]
    return rfenv.ScenarioConfig(area_km=(12.0, 12.0), pus=tuple(pus), sus=tuple(sus),
                                noise_var=1.0, samples_per_window=500, seed=0,
                                n_channels=3)


def _check_keys(doc: dict, allowed: set, table: str, raw: str, path,
                table_line: int = 0) -> None:
    for key in doc:
        if key not in allowed:
            line = _anchor(raw, key, table_line)
            raise ConfigError(path, line,
                              f"unknown key '{key}' in [{table}]" if table
                              else f"unknown key '{key}'")


def _coerce(doc: dict, defaults, table: str, raw: str, path, table_line: int):
    """Build a params dataclass from a TOML table, rejecting unknown keys and
    type mismatches."""
    allowed = set(defaults.__dataclass_fields__)
    _check_keys(doc, allowed, table, raw, path, table_line)
    kwargs = {}
    for key, value in doc.items():
        cur = getattr(defaults, key)
        if isinstance(cur, tuple):
            if not isinstance(value, list):
                raise ConfigError(path, _anchor(raw, key, table_line),
                                  f"[{table}] {key}: expected an array")
            value = tuple(value)
        elif isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ConfigError(path, _anchor(raw, key, table_line),
                                  f"[{table}] {key}: expected a boolean")
        elif isinstance(cur, int) and not isinstance(cur, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(path, _anchor(raw, key, table_line),
                                  f"[{table}] {key}: expected an integer")
        elif isinstance(cur, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(path, _anchor(raw, key, table_line),
                                  f"[{table}] {key}: expected a number")
            value = float(value)
        kwargs[key] = value
    return type(defaults)(**kwargs)


def _build_scenario(doc: dict, raw: str, path) -> rfenv.ScenarioConfig:
    sec_line = _table_line(raw, "scenario")
    _check_keys(doc, _SCENARIO_KEYS, "scenario", raw, path, sec_line)
    pus = []
    for i, pu_doc in enumerate(doc.get("pus", [])):
        line = _table_line(raw, "scenario.pus", i + 1)
        _check_keys(pu_doc, _PU_KEYS, "scenario.pus", raw, path, line)
        try:
            pus.append(rfenv.PuNode(
                position=tuple(pu_doc["position"]),
                coverage_radius=float(pu_doc["coverage_radius"]),
                channel=int(pu_doc["channel"]),
                power_levels=tuple(float(p) for p in pu_doc["power_levels"]),
                level_priors=tuple(float(p) for p in pu_doc["level_priors"]),
                mean_dwell=float(pu_doc.get("mean_dwell", 50.0)),
            ))
        except KeyError as exc:
            raise ConfigError(path, line,
                              f"[scenario.pus] #{i + 1}: missing field {exc}") from exc
        except ValueError as exc:
            bad = _anchor(raw, _guess_field(str(exc), _PU_KEYS), line) or line
            raise ConfigError(path, bad, f"[scenario.pus] #{i + 1}: {exc}") from exc
    sus = []
    for i, su_doc in enumerate(doc.get("sus", [])):
        line = _table_line(raw, "scenario.sus", i + 1)
        _check_keys(su_doc, _SU_KEYS, "scenario.sus", raw, path, line)
        try:
            sus.append(rfenv.SuTrack(
                start=tuple(su_doc["start"]), end=tuple(su_doc["end"]),
                n_samples=int(su_doc["n_samples"]),
                cluster_head=int(su_doc.get("cluster_head", 0)),
            ))
        except KeyError as exc:
            raise ConfigError(path, line,
                              f"[scenario.sus] #{i + 1}: missing field {exc}") from exc
        except ValueError as exc:
            bad = _anchor(raw, _guess_field(str(exc), _SU_KEYS), line) or line
            raise ConfigError(path, bad, f"[scenario.sus] #{i + 1}: {exc}") from exc
    try:
        return rfenv.ScenarioConfig(
            area_km=tuple(doc.get("area_km", (12.0, 12.0))),
            pus=tuple(pus), sus=tuple(sus),
            noise_var=float(doc.get("noise_var", 1.0)),
            samples_per_window=int(doc.get("samples_per_window", 500)),
            slot_duration=float(doc.get("slot_duration", 1.0)),
            seed=int(doc.get("seed", 0)),
            n_channels=doc.get("n_channels"),
        )
    except ValueError as exc:
        bad = _anchor(raw, _guess_field(str(exc), _SCENARIO_KEYS), sec_line) or sec_line
        raise ConfigError(path, bad, f"[scenario]: {exc}") from exc


def _guess_field(message: str, keys: set) -> str:
    for key in keys:
        if key.replace("_", " ") in message or key in message:
            return key
    return ""


def load_config(path) -> BenchConfig:
    """Parse and validate a benchmark TOML file, filling defaults."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(path, 0, "config file not found")
    raw = p.read_text()
    try:
        doc = tomli.loads(raw)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(path, int(m.group(1)) if m else 0,
                          f"TOML parse error: {exc}") from exc
    _check_keys(doc, {"scenario", "fig3", "fig5", "fig6"}, "", raw, path)
    scenario = None
    if "scenario" in doc:
        scenario = _build_scenario(doc["scenario"], raw, path)
    fig3 = _coerce(doc.get("fig3", {}), Fig3Params(), "fig3", raw, path,
                   _table_line(raw, "fig3"))
    fig5 = _coerce(doc.get("fig5", {}), Fig5Params(), "fig5", raw, path,
                   _table_line(raw, "fig5"))
    fig6 = _coerce(doc.get("fig6", {}), Fig6Params(), "fig6", raw, path,
                   _table_line(raw, "fig6"))
    _validate_params(fig3, fig5, fig6, path)
    effective = {
        "scenario": _scenario_dict(scenario) if scenario is not None else None,
        "fig3": _params_dict(fig3),
        "fig5": _params_dict(fig5),
        "fig6": _params_dict(fig6),
    }
    return BenchConfig(path=str(path), scenario=scenario, fig3=fig3, fig5=fig5,
                       fig6=fig6, effective=effective)


def _validate_params(fig3: Fig3Params, fig5: Fig5Params, fig6: Fig6Params,
                     path) -> None:
    if fig3.windows < 2 or fig3.samples_per_window < 1:
        raise ConfigError(path, 0, "[fig3]: windows and samples_per_window must be >= 2 and >= 1")
    if fig3.noise_var <= 0:
        raise ConfigError(path, 0, "[fig3]: noise_var must be > 0")
    if fig3.mean_dwell < 1:
        raise ConfigError(path, 0, "[fig3]: mean_dwell must be >= 1")
    if not (0 <= fig3.burnin < fig3.sweeps):
        raise ConfigError(path, 0, "[fig3]: need 0 <= burnin < sweeps")
    if fig3.level_count < 2:
        raise ConfigError(path, 0, "[fig3]: level_count must be >= 2")
    if fig5.k_max < 2 or not (0 <= fig5.burnin < fig5.sweeps):
        raise ConfigError(path, 0, "[fig5]: need k_max >= 2 and 0 <= burnin < sweeps")
    if fig5.merge_tol <= 0 or fig5.occupancy_margin <= 0:
        raise ConfigError(path, 0, "[fig5]: merge_tol and occupancy_margin must be > 0")
    if fig5.query_points < 1:
        raise ConfigError(path, 0, "[fig5]: query_points must be >= 1")
    if fig6.n_channels < 1:
        raise ConfigError(path, 0, "[fig6]: n_channels must be >= 1")
    for u in fig6.subsets:
        if fig6.n_channels % u != 0:
            raise ConfigError(path, 0,
                              f"[fig6]: subset count {u} must divide n_channels")
    for name in ("p01", "p11"):
        v = getattr(fig6, name)
        if not (0.0 <= v <= 1.0):
            raise ConfigError(path, 0, f"[fig6]: {name} must lie in [0, 1]")
    if not (0.0 < fig6.discount < 1.0):
        raise ConfigError(path, 0, "[fig6]: discount must lie in (0, 1)")
    if fig6.spans < 1 or fig6.test_spans < 1 or fig6.span_len < 1:
        raise ConfigError(path, 0, "[fig6]: span counts must be >= 1")
    if fig6.window < 1:
        raise ConfigError(path, 0, "[fig6]: window must be >= 1")
    if not (0.0 <= fig6.eps_end <= fig6.eps_start <= 1.0):
        raise ConfigError(path, 0, "[fig6]: need 0 <= eps_end <= eps_start <= 1")


def _params_dict(params) -> dict:
    out = {}
    for key in params.__dataclass_fields__:
        val = getattr(params, key)
        out[key] = list(val) if isinstance(val, tuple) else val
    return out


def _scenario_dict(sc: rfenv.ScenarioConfig) -> dict:
    return {
        "area_km": list(sc.area_km),
        "noise_var": sc.noise_var,
        "samples_per_window": sc.samples_per_window,
        "slot_duration": sc.slot_duration,
        "seed": sc.seed,
        "n_channels": sc.channel_count(),
        "pus": [{
            "position": list(pu.position),
            "coverage_radius": pu.coverage_radius,
            "channel": pu.channel,
            "power_levels": list(pu.power_levels),
            "level_priors": list(pu.level_priors),
            "mean_dwell": pu.mean_dwell,
        } for pu in sc.pus],
        "sus": [{
            "start": list(su.start), "end": list(su.end),
            "n_samples": su.n_samples, "cluster_head": su.cluster_head,
        } for su in sc.sus],
    }


def config_hash(effective: dict) -> str:
    blob = json.dumps(effective, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def make_manifest(cfg: BenchConfig, experiment: str, seeds, version: str,
                  hyper: dict | None = None) -> dict:
    """Run manifest: config hash, toolkit version, seeds, effective params."""
    return {
        "experiment": experiment,
        "config_hash": cfg.hash,
        "version": version,
        "seeds": [int(s) for s in seeds],
        "parameters": cfg.effective,
        "extra": hyper or {},
    }
