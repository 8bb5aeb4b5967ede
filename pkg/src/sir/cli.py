"""Command-line entry points.

`sir bench fig3|fig5|fig6` runs a benchmark over seeds and writes CSV (plus
manifest and optional SVG) into an output directory; `sir simulate` dumps a
raw sensing dataset for the configured scenario; `sir map query` answers
idle-channel queries against a saved spectrum map.  `SIR_LOG` sets the log
level.  Exit codes: 0 success, 2 validation error, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import toml

from . import __version__, bench, mapping, rfenv
from .config import ConfigError, load_config, make_manifest

log = logging.getLogger("sir.cli")


def _setup_logging() -> None:
    level = os.environ.get("SIR_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=getattr(logging, level),
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if "," in text:
        seeds = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    else:
        n = int(text)
        seeds = list(range(n))
    if not seeds:
        raise ValueError("empty seed list")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    return seeds


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="sir",
                                  description="spectrum intelligence toolkit")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="run a benchmark figure")
    p_bench.add_argument("figure", choices=("fig3", "fig5", "fig6"))
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--seeds", required=True,
                         help="seed count N (0..N-1) or comma list")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--jobs", type=int, default=1)
    p_bench.add_argument("--svg", action="store_true")

    p_sim = sub.add_parser("simulate", help="dump a raw sensing dataset")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)

    p_map = sub.add_parser("map", help="spectrum map utilities")
    map_sub = p_map.add_subparsers(dest="map_command", required=True)
    p_query = map_sub.add_parser("query", help="idle channels at a location")
    p_query.add_argument("--map", required=True, dest="map_path")
    p_query.add_argument("--x", required=True, type=float)
    p_query.add_argument("--y", required=True, type=float)
    return top


def _toml_clean(obj):
    if isinstance(obj, dict):
        return {k: _toml_clean(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_toml_clean(v) for v in obj]
    return obj


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    if args.jobs < 1:
        raise ValueError("--jobs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = None
    if args.figure == "fig3":
        result = bench.run_fig3(cfg, seeds, jobs=args.jobs)
    elif args.figure == "fig5":
        result, payload = bench.run_fig5(cfg, seeds, jobs=args.jobs)
    else:
        result = bench.run_fig6(cfg, seeds, jobs=args.jobs)
    bench.save_result_csv(result, out / f"{args.figure}.csv")
    if payload is not None and payload.get("map") is not None:
        mapping.save_map_toml(payload["map"], out / "map.toml")
    manifest = make_manifest(cfg, args.figure, seeds, __version__)
    manifest["wall_clock_s"] = round(result.wall_clock, 3)
    with open(out / "manifest.toml", "w") as fh:
        fh.write(toml.dumps(_toml_clean(manifest)))
    if result.errors:
        with open(out / "errors.txt", "w") as fh:
            fh.write("\n".join(result.errors) + "\n")
    if args.svg:
        doc = bench.render_result_svg(result, payload)
        (out / f"{args.figure}.svg").write_text(doc)
    missing = [r for r in result.rows if r.missing]
    log.info("%s: %d rows (%d missing), %.1fs", args.figure, len(result.rows),
             len(missing), result.wall_clock)
    print(f"{args.figure}: wrote {out / (args.figure + '.csv')} "
          f"({len(result.rows)} rows, {len(missing)} missing)")
    return 0


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.scenario is None:
        raise ConfigError(args.config, 0, "simulate needs a [scenario] table")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.scenario.seed)
    data = rfenv.generate_mapping_dataset(cfg.scenario, rng)
    rfenv.save_dataset_csv(data, out / "dataset.csv")
    manifest = make_manifest(cfg, "simulate", [cfg.scenario.seed], __version__)
    with open(out / "manifest.toml", "w") as fh:
        fh.write(toml.dumps(_toml_clean(manifest)))
    print(f"simulate: wrote {out / 'dataset.csv'} ({len(data)} samples)")
    return 0


def _cmd_map_query(args) -> int:
    smap = mapping.load_map_toml(args.map_path)
    idle = mapping.query_spectrum(smap, (args.x, args.y))
    print(",".join(str(c) for c in idle))
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse validation failure -> 2
        return int(exc.code) if exc.code else 0
    try:
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "map":
            return _cmd_map_query(args)
        parser.error(f"unknown command {args.command}")
        return 2
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure
        log.exception("unhandled error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
