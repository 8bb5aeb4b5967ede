"""Benchmark orchestration: seed fan-out, aggregation, CSV/SVG emission.

Each experiment maps a seed list over an embarrassingly parallel worker
(one task per seed; ``jobs`` only distributes seeds), then reduces to one
row per (sweep value, method) with a normal-approximation 95% CI.  A module
error inside a worker aborts that (sweep, method) point: the row is kept,
its value is NaN, and the error text is preserved.  Reruns with the same
seed list are bit-exact.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import time
from dataclasses import dataclass

import numpy as np

from . import access, config as config_mod, mapping, perception, rfenv, svg

__all__ = [
    "BenchRow",
    "BenchResult",
    "FIG3_METHODS",
    "FIG6_METHODS",
    "run_fig3",
    "run_fig5",
    "run_fig6",
    "save_result_csv",
    "render_result_svg",
]

log = logging.getLogger("sir.bench")

FIG3_METHODS = ("dpgmm", "emgmm", "meanshift", "oracle")
FIG5_METRICS = ("state_count", "circle_count", "radius_error_pct", "query_accuracy")
FIG6_METHODS = ("gprl", "nnq", "whittle", "optimal")


@dataclass(frozen=True)
class BenchRow:
    sweep: float
    method: str
    value: float
    ci95: float
    n_seeds: int

    @property
    def missing(self) -> bool:
        return not np.isfinite(self.value)


@dataclass(frozen=True)
class BenchResult:
    experiment: str
    rows: tuple[BenchRow, ...]
    seeds: tuple[int, ...]
    wall_clock: float
    errors: tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            key = (row.sweep, row.method)
            if key in seen:
                raise ValueError(f"duplicate row for {key}")
            seen.add(key)
            if np.isfinite(row.ci95) and row.ci95 < 0:
                raise ValueError("ci95 must be >= 0")

    def row(self, sweep, method: str) -> BenchRow:
        for r in self.rows:
            if r.sweep == sweep and r.method == method:
                return r
        raise KeyError((sweep, method))


def _run_parallel(worker, args_list, jobs: int):
    if jobs <= 1 or len(args_list) <= 1:
        return [worker(a) for a in args_list]
    ctx = mp.get_context("fork")
    with ctx.Pool(processes=min(jobs, len(args_list))) as pool:
        return pool.map(worker, args_list)


def _aggregate(experiment: str, seeds, per_seed, sweeps, methods, wall: float,
               errors) -> BenchResult:
    """per_seed: list (aligned with seeds) of dicts {(sweep, method): value}.

    A point with any errored seed is emitted as missing (NaN) rather than a
    silently smaller average.
    """
    rows = []
    for sw in sweeps:
        for meth in methods:
            vals = [ps.get((sw, meth), float("nan")) for ps in per_seed]
            arr = np.asarray(vals, float)
            if np.all(np.isfinite(arr)):
                n = arr.size
                sd = float(np.std(arr, ddof=1)) if n > 1 else 0.0
                rows.append(BenchRow(sw, meth, float(np.mean(arr)),
                                     1.96 * sd / math.sqrt(n), n))
            else:
                n_ok = int(np.sum(np.isfinite(arr)))
                rows.append(BenchRow(sw, meth, float("nan"), float("nan"), n_ok))
    return BenchResult(experiment=experiment, rows=tuple(rows),
                       seeds=tuple(int(s) for s in seeds), wall_clock=wall,
                       errors=tuple(errors))


# ---------------------------------------------------------------------------
# level-prediction sweep


def _fig3_point_methods(e, true_rank, params: config_mod.Fig3Params, seed: int,
                        gi: int, powers, priors):
    noise_var, n = params.noise_var, params.samples_per_window
    out = {}
    fit = perception.fit_dp_mixture(
        e, np.random.default_rng([0xD1, seed, gi]), sweeps=params.sweeps,
        burnin=params.burnin, prune_weight=params.prune_weight)
    pred, _ = perception.predict_sequence(fit, e, fit.dwell)
    out["dpgmm"] = perception.level_accuracy(pred, true_rank)

    hfit = perception.fit_em_hmm(e, params.level_count,
                                 np.random.default_rng([0xE2, seed, gi]))
    dw = perception.estimate_dwell(hfit.labels, hfit.k)
    pred, _ = perception.predict_sequence(hfit, e, dw)
    out["emgmm"] = perception.level_accuracy(pred, true_rank)

    msfit, _modes = perception.fit_mean_shift(e)
    lab0 = perception.posterior_labels(msfit, e)
    dw = perception.estimate_dwell(lab0, msfit.k)
    pred, _ = perception.predict_sequence(msfit, e, dw)
    out["meanshift"] = perception.level_accuracy(pred, true_rank)

    gmm, odw = perception.oracle_fit(powers, priors, noise_var, n,
                                     mean_dwell=params.mean_dwell)
    pred, _ = perception.predict_sequence(gmm, e, odw)
    out["oracle"] = perception.level_accuracy(pred, true_rank)
    return out


def _fig3_seed(args):
    seed, params = args
    results = {}
    errors = []
    priors = (0.25, 0.25, 0.25, 0.25)
    for gi, gdb in enumerate(params.grid_db):
        p1 = params.noise_var * 10.0 ** (gdb / 10.0) / 2.0
        powers = (0.0, p1, 2.0 * p1, 3.0 * p1)
        pu = rfenv.PuNode(position=(0.0, 0.0), coverage_radius=1.0, channel=0,
                          power_levels=powers, level_priors=priors,
                          mean_dwell=params.mean_dwell)
        rng = np.random.default_rng([0xF3, seed, gi])
        lv = rfenv.sample_power_process(pu, params.windows, rng)
        e = rfenv.sense_window(np.asarray(powers)[lv], params.noise_var,
                               params.samples_per_window, rng)
        true_rank = perception.canonical_ranks(powers)[lv]
        try:
            accs = _fig3_point_methods(e, true_rank, params, seed, gi,
                                       powers, priors)
        except Exception as exc:  # abort the whole grid point for this seed
            errors.append(f"seed {seed} gamma {gdb}: {exc!r}")
            continue
        for meth, acc in accs.items():
            results[(float(gdb), meth)] = acc
    return results, errors


def run_fig3(cfg: config_mod.BenchConfig, seeds, jobs: int = 1) -> BenchResult:
    """Level-prediction accuracy versus the sensing SNR grid."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 5:
        raise ValueError("need at least 5 seeds")
    t0 = time.perf_counter()
    outs = _run_parallel(_fig3_seed, [(s, cfg.fig3) for s in seeds], jobs)
    per_seed = [o[0] for o in outs]
    errors = [msg for o in outs for msg in o[1]]
    for msg in errors:
        log.error("fig3 point aborted: %s", msg)
    return _aggregate("fig3", seeds, per_seed,
                      [float(g) for g in cfg.fig3.grid_db], FIG3_METHODS,
                      time.perf_counter() - t0, errors)


# ---------------------------------------------------------------------------
# mapping scenario


def _fig5_seed(args):
    seed, scenario, params = args
    rng = np.random.default_rng([0xF5, seed])
    data = rfenv.generate_mapping_dataset(scenario, rng)
    by_su: dict[int, list] = {}
    for s in data:
        by_su.setdefault(s.su_id, []).append(s)
    heads = sorted({scenario.sus[su_id].cluster_head for su_id in by_su})
    su_order = []
    fits = []
    for ci, head in enumerate(heads):
        ids = [su_id for su_id in sorted(by_su) if scenario.sus[su_id].cluster_head == head]
        seqs = [by_su[i] for i in ids]
        su_order.extend(ids)
        fits.append(mapping.fit_sticky_hmm(
            seqs, k_max=params.k_max, gamma=params.gamma, alpha=params.alpha,
            kappa=params.kappa, sweeps=params.sweeps, burnin=params.burnin,
            rng=np.random.default_rng([0xF5, seed, ci])))
    fused = mapping.fuse_cluster_heads(fits, merge_tol=params.merge_tol)
    sequences = [by_su[i] for i in su_order]
    smap = mapping.build_spectrum_map(fused, sequences, scenario.area_km,
                                      scenario.noise_var, params.occupancy_margin)
    metrics = {"state_count": float(fused.k_active),
               "circle_count": float(len(smap.circles))}
    if scenario.pus:
        report = mapping.coverage_error(smap.circles, list(scenario.pus))
        if report.unmatched_true or report.unmatched_est:
            metrics["radius_error_pct"] = float("nan")
        else:
            metrics["radius_error_pct"] = 100.0 * report.mean_radius_error
    else:
        metrics["radius_error_pct"] = 0.0
    qrng = np.random.default_rng([0x9E, seed])
    w, h = scenario.area_km
    pts = qrng.random((params.query_points, 2)) * np.array([w, h])
    n_ch = scenario.channel_count()
    hits = 0
    for p in pts:
        truth = [c for c in range(n_ch)
                 if not any(pu.channel == c
                            and (p[0] - pu.position[0]) ** 2
                            + (p[1] - pu.position[1]) ** 2
                            <= pu.coverage_radius ** 2 for pu in scenario.pus)]
        if mapping.query_spectrum(smap, p) == truth:
            hits += 1
    metrics["query_accuracy"] = hits / params.query_points
    locs = np.array([s.location for seq in sequences for s in seq])
    labs = np.concatenate(fused.labels)
    payload = {
        "points": locs, "labels": labs, "circles": smap.circles,
        "true": tuple((pu.position[0], pu.position[1], pu.coverage_radius,
                       pu.channel) for pu in scenario.pus),
        "map": smap,
    }
    return metrics, payload


def run_fig5(cfg: config_mod.BenchConfig, seeds,
             jobs: int = 1) -> tuple[BenchResult, dict]:
    """Mapping scenario: state discovery, coverage radii, query accuracy.

    Returns the result plus the first seed's map payload for rendering.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds")
    scenario = cfg.scenario if cfg.scenario is not None else config_mod.default_fig5_scenario()
    t0 = time.perf_counter()
    outs = _run_parallel(_fig5_seed, [(s, scenario, cfg.fig5) for s in seeds], jobs)
    per_seed = []
    errors = []
    for s, (metrics, _payload) in zip(seeds, outs):
        per_seed.append({(0.0, k): v for k, v in metrics.items()})
        if not np.isfinite(metrics["radius_error_pct"]):
            errors.append(f"seed {s}: unmatched coverage circles")
    res = _aggregate("fig5", seeds, per_seed, [0.0], FIG5_METRICS,
                     time.perf_counter() - t0, errors)
    return res, outs[0][1]


# ---------------------------------------------------------------------------
# access policies


def _fig6_seed(args):
    seed, params = args
    results = {}
    errors = []
    n = params.n_channels
    for u in params.subsets:
        try:
            env = rfenv.make_channel_set(n, u, params.p01, params.p11,
                                         rng=np.random.default_rng([0xF6, seed, u, 0]))
            gp, _ = access.gprl_train(env, np.random.default_rng([0xF6, seed, u, 1]),
                                      spans=params.spans, span_len=params.span_len,
                                      discount=params.discount,
                                      eps_start=params.eps_start,
                                      eps_end=params.eps_end, window=params.window)
            env = rfenv.make_channel_set(n, u, params.p01, params.p11,
                                         rng=np.random.default_rng([0xF6, seed, u, 2]))
            net, _ = access.nnq_train(env, np.random.default_rng([0xF6, seed, u, 3]),
                                      spans=params.spans, span_len=params.span_len,
                                      discount=params.discount,
                                      eps_start=params.eps_start,
                                      eps_end=params.eps_end, window=params.window)
            slots = params.test_spans * params.span_len
            for meth in FIG6_METHODS:
                # identical env seed per method: every policy is scored on the
                # same channel-state realization
                envt = rfenv.make_channel_set(n, u, params.p01, params.p11,
                                              rng=np.random.default_rng([0xF6, seed, u, 4]))
                if meth == "gprl":
                    act = lambda h, b, r: access.gprl_act(gp, h, 0.0, r)
                elif meth == "nnq":
                    act = lambda h, b, r: access.nnq_act(net, h, 0.0, r)
                elif meth == "whittle":
                    act = lambda h, b, r, e=envt: access.whittle_act(
                        b, params.p01, params.p11, params.discount, e)
                else:
                    act = lambda h, b, r, e=envt: access.optimal_act(
                        b, params.p01, params.p11, e)
                trace = access.evaluate_policy(
                    envt, act, slots,
                    np.random.default_rng([0xF6, seed, u, 5]),
                    window=params.window)
                results[(float(u), meth)] = access.eval_accuracy(trace)
        except Exception as exc:
            errors.append(f"seed {seed} u {u}: {exc!r}")
    return results, errors


def run_fig6(cfg: config_mod.BenchConfig, seeds, jobs: int = 1) -> BenchResult:
    """Policy accuracy versus the number of independent channel subsets."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 20:
        raise ValueError("need at least 20 seeds")
    t0 = time.perf_counter()
    outs = _run_parallel(_fig6_seed, [(s, cfg.fig6) for s in seeds], jobs)
    per_seed = [o[0] for o in outs]
    errors = [msg for o in outs for msg in o[1]]
    for msg in errors:
        log.error("fig6 point aborted: %s", msg)
    return _aggregate("fig6", seeds, per_seed,
                      [float(u) for u in cfg.fig6.subsets], FIG6_METHODS,
                      time.perf_counter() - t0, errors)


# ---------------------------------------------------------------------------
# emission


def _csv_num(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def save_result_csv(result: BenchResult, path) -> None:
    if result.experiment == "fig3":
        header = "gamma_st_db,method,pc,ci95"
        sweep_fmt = "{:g}".format
    elif result.experiment == "fig6":
        header = "u,method,accuracy,ci95"
        sweep_fmt = "{:g}".format
    elif result.experiment == "fig5":
        header = "metric,value,ci95,n_seeds"
    else:
        raise ValueError(f"unknown experiment {result.experiment!r}")
    lines = [header]
    for row in result.rows:
        if result.experiment == "fig5":
            lines.append(f"{row.method},{_csv_num(row.value)},"
                         f"{_csv_num(row.ci95)},{row.n_seeds}")
        else:
            lines.append(f"{sweep_fmt(row.sweep)},{row.method},"
                         f"{_csv_num(row.value)},{_csv_num(row.ci95)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def render_result_svg(result: BenchResult, payload: dict | None = None) -> str:
    if result.experiment == "fig3":
        rows = [(r.sweep, r.method, r.value, r.ci95) for r in result.rows]
        return svg.render_curves(rows, "sensing SNR (dB)",
                                 "correct level prediction rate")
    if result.experiment == "fig6":
        rows = [(r.sweep, r.method, r.value, r.ci95) for r in result.rows]
        return svg.render_curves(rows, "channel subsets",
                                 "channel selection accuracy")
    if result.experiment == "fig5":
        if payload is None:
            raise ValueError("fig5 rendering needs the map payload")
        return svg.render_map((12.0, 12.0) if payload.get("map") is None
                              else payload["map"].area_km,
                              payload["true"], payload["circles"],
                              payload["points"], payload["labels"])
    raise ValueError(f"unknown experiment {result.experiment!r}")
