"""Command-line front end: ``arcade simulate|analyze|train-locator|serve|agent``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error,
4 transport error. Log level comes from ``ARCADE_LOG`` (error, warn, info,
debug); logs go to stderr and stdout carries one ``RESULT ok ...`` line.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import __version__, nn
from .collector import (AgentConfig, ConsolidatedRecord, Reading, RecordStore, TransportError, WireError,
                        agent_run, collector_serve, geolocate_batch, read_events_csv, write_events_csv,
                        events_from_mr)
from .extrapolation import ExtrapolationParams, GpHyper, NumericalError, Provenance, default_hyper
from .grid import (ConfigError, GridSpec, ParseError, RawSample, Source, ingest, read_samples_csv,
                   write_samples_csv)
from .indices import IndexParams, service_map
from .pipeline import AnalysisParams, NoSamplesError, analyze
from .simulator import (env_from_dict, ground_truth_fields, hexagonal_cluster, load_env,
                        sample_mdt, sample_mdt_reports, sample_mr, save_env)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("arcade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_TRANSPORT = 0, 1, 2, 3, 4
PGM_RANGE_DBM = (-140.0, -40.0)
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


# --- file exports -------------------------------------------------------------------

def field_csv(values: np.ndarray) -> str:
    """Dense field as CSV, one line per grid row starting with row 0 (south)."""
    return "".join(",".join(f"{v:.4f}" for v in row) + "\n" for row in np.asarray(values, float))


def read_field_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def pgm_pixels(values: np.ndarray, lo: float = PGM_RANGE_DBM[0], hi: float = PGM_RANGE_DBM[1]) -> np.ndarray:
    """Map dBm linearly from [lo, hi] to [0, 255], clipping outside."""
    v = np.clip(np.asarray(values, float), lo, hi)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(int)


def pgm_text(values: np.ndarray) -> str:
    """ASCII PGM (P2) image; the first image line is the northernmost grid row."""
    px = pgm_pixels(values)[::-1]
    rows, cols = px.shape
    body = "".join(" ".join(map(str, r)) + "\n" for r in px)
    return f"P2\n{cols} {rows}\n255\n{body}"


def best_server_geojson(spec: GridSpec, best_pci: np.ndarray, best_rsrp: np.ndarray) -> dict:
    """One square polygon per grid element with its best server."""
    feats = []
    for r in range(spec.rows):
        for c in range(spec.cols):
            corners = [spec.to_geo(c * spec.cell_size_m, r * spec.cell_size_m),
                       spec.to_geo((c + 1) * spec.cell_size_m, r * spec.cell_size_m),
                       spec.to_geo((c + 1) * spec.cell_size_m, (r + 1) * spec.cell_size_m),
                       spec.to_geo(c * spec.cell_size_m, (r + 1) * spec.cell_size_m)]
            ring = [[round(p.lon, 8), round(p.lat, 8)] for p in corners]
            ring.append(ring[0])
            pci = int(best_pci[r, c])
            feats.append({"type": "Feature",
                          "geometry": {"type": "Polygon", "coordinates": [ring]},
                          "properties": {"row": r, "col": c, "best_pci": pci if pci >= 0 else None,
                                         "best_rsrp": round(float(best_rsrp[r, c]), 4)}})
    return {"type": "FeatureCollection", "features": feats}


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# --- config handling ------------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flat = {}
    for k, v in data.items():
        if isinstance(v, dict):   # [section] tables are flattened
            flat.update({kk.replace("-", "_"): vv for kk, vv in v.items()})
        else:
            flat[k.replace("-", "_")] = v
    return flat


def _pick(args: argparse.Namespace, cfg: Mapping, key: str, default):
    """Flag beats config file beats default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(key, default)


def _load_grid_spec(path: str) -> GridSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    # accepts a bare grid spec, an environment config or a grid JSON file
    for key in ("grid", "spec"):
        if isinstance(d, dict) and key in d:
            d = d[key]
    return GridSpec.from_dict(d)


# --- commands -------------------------------------------------------------------------

def cmd_simulate(out: str, *, env_path: Optional[str] = None, seed: Optional[int] = None,
                 n_per_cell: int = 800, mr_ues: int = 0, mr_reports: int = 5) -> dict:
    """Write samples.csv, mdt_reports.csv, env.json and truth/field_<pci>.csv.

    With ``mr_ues > 0`` also mr_events.csv (agent input), mr_samples.csv
    (unpositioned MR samples) and mr_hidden.csv (true UE positions).

    ``seed`` replaces the environment's seed, so it drives both shadowing and
    sampling. Without ``env_path`` the standard hexagonal scenario is used.
    """
    if env_path is not None:
        env = load_env(env_path)
        if seed is not None:
            env = replace(env, seed=int(seed))
    else:
        env = hexagonal_cluster(seed=0 if seed is None else int(seed))
    s = env.seed
    outdir = Path(out)
    (outdir / "truth").mkdir(parents=True, exist_ok=True)
    save_env(env, outdir / "env.json")
    samples = sample_mdt(env, n_per_cell, s)
    write_samples_csv(samples, outdir / "samples.csv")
    reports = sample_mdt_reports(env, n_per_cell, s)
    write_samples_csv([x for rep in reports for x in rep.samples()], outdir / "mdt_reports.csv")
    for pci, f in ground_truth_fields(env).items():
        _write_text(outdir / "truth" / f"field_{pci}.csv", field_csv(f))
    summary = {"samples": len(samples), "cells": len(env.pcis)}
    if mr_ues > 0:
        mr, hidden = sample_mr(env, mr_ues, mr_reports, s)
        write_events_csv(events_from_mr(mr), outdir / "mr_events.csv")
        write_samples_csv([x for _, smp in mr for x in smp], outdir / "mr_samples.csv")
        _write_text(outdir / "mr_hidden.csv", "ue_id,lat,lon\n" + "".join(
            f"{ue},{p.lat!r},{p.lon!r}\n" for ue, p in sorted(hidden.items())))
        summary["mr_ues"] = mr_ues
    return summary


def _read_samples(path) -> List[RawSample]:
    try:
        return read_samples_csv(path)
    except ParseError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _mr_records(samples: Sequence[RawSample]) -> List[ConsolidatedRecord]:
    """Unpositioned MR samples grouped into one record per (token, timestamp)."""
    groups: Dict[tuple, Dict[int, List[float]]] = {}
    for smp in samples:
        groups.setdefault((smp.ue_token, smp.timestamp_ms), {}).setdefault(smp.pci, []).append(smp.rsrp_dbm)
    return [ConsolidatedRecord(tok, ts, tuple(Reading(p, math.fsum(v) / len(v), len(v)) for p, v in sorted(rd.items())))
            for (tok, ts), rd in sorted(groups.items())]


def analysis_params(args: argparse.Namespace, cfg: Mapping, spec: GridSpec) -> AnalysisParams:
    ex_d, ix_d, tc_d = ExtrapolationParams(), IndexParams(), nn.COVERAGE_TRAIN
    ex = ExtrapolationParams(
        t_class_dbm=float(_pick(args, cfg, "t_class_dbm", ex_d.t_class_dbm)),
        m_abn=int(_pick(args, cfg, "m_abn", ex_d.m_abn)),
        floor_dbm=float(_pick(args, cfg, "floor_dbm", ex_d.floor_dbm)),
        r_bc=float(_pick(args, cfg, "r_bc", ex_d.r_bc)),
        s_bc=int(_pick(args, cfg, "s_bc", ex_d.s_bc)),
        w_emph=float(_pick(args, cfg, "w_emph", ex_d.w_emph)),
        max_points=int(_pick(args, cfg, "max_points", ex_d.max_points)),
        seed=int(_pick(args, cfg, "seed", ex_d.seed)))
    ix = IndexParams(t_serv_dbm=float(_pick(args, cfg, "t_serv_dbm", ix_d.t_serv_dbm)),
                     delta_db=float(_pick(args, cfg, "delta_db", ix_d.delta_db)),
                     k_os=float(_pick(args, cfg, "k_os", ix_d.k_os)), m_abn=ex.m_abn)
    base = default_hyper(spec)
    ls = _pick(args, cfg, "lengthscale_m", None)
    sig = _pick(args, cfg, "signal_std_db", None)
    noi = _pick(args, cfg, "noise_std_db", None)
    hyper = None
    if ls is not None or sig is not None or noi is not None:
        hyper = GpHyper(float(ls if ls is not None else base.lengthscale_m),
                        float(sig if sig is not None else base.signal_std_db),
                        float(noi if noi is not None else base.noise_std_db))
    tc = replace(tc_d, epochs=int(_pick(args, cfg, "nn_epochs", tc_d.epochs)),
                 learning_rate=float(_pick(args, cfg, "nn_learning_rate", tc_d.learning_rate)))
    use_nn = not bool(_pick(args, cfg, "no_nn", False))
    jobs = int(_pick(args, cfg, "jobs", 0)) or (os.cpu_count() or 1)
    return AnalysisParams(extrapolation=ex, indices=ix, hyper=hyper, coverage_train=tc, use_nn=use_nn, jobs=jobs)


def cmd_analyze(samples_path, grid_path: str, out: str, params: AnalysisParams = AnalysisParams(), *,
                locator_path: Optional[str] = None, dump_stages: bool = False) -> dict:
    """Write report.json, fields/field_<pci>.{csv,pgm} and best_server.geojson.

    ``dump_stages`` adds stages/labels_<pci>.csv and stages/augmented_<pci>.csv.
    """
    spec = _load_grid_spec(grid_path)
    paths = [samples_path] if isinstance(samples_path, (str, Path)) else list(samples_path)
    samples = [x for path in paths for x in _read_samples(path)]
    unpositioned = [x for x in samples if x.position is None]
    if unpositioned:
        if locator_path is None:
            log.warning("%d samples have no position and no --locator was given; they are skipped",
                        len(unpositioned))
        else:
            locator = nn.Locator.load(locator_path)
            located, tally = geolocate_batch(_mr_records(unpositioned), locator)
            if tally.readings_dropped:
                log.warning("dropped %d MR readings of PCIs outside the locator: %s",
                            tally.readings_dropped, tally.dropped_pcis)
            samples = [x for x in samples if x.position is not None] + located
    grid = ingest(spec, samples)
    if grid.skipped:
        log.info("%d samples outside the grid or unpositioned", grid.skipped)
    result = analyze(grid, params)
    outdir = Path(out)
    (outdir / "fields").mkdir(parents=True, exist_ok=True)
    _write_text(outdir / "report.json", result.report.to_json())
    for pci, f in sorted(result.fields.items()):
        _write_text(outdir / "fields" / f"field_{pci}.csv", field_csv(f))
        _write_text(outdir / "fields" / f"field_{pci}.pgm", pgm_text(f))
    if dump_stages:
        _dump_stages(outdir / "stages", result)
    smap = service_map(result.fields, params.indices.t_serv_dbm)
    gj = best_server_geojson(spec, smap.best_pci, smap.best_rsrp_dbm)
    _write_text(outdir / "best_server.geojson", json.dumps(gj, separators=(",", ":")) + "\n")
    return {"cells": len(result.report.cells), "anomalies": len(result.report.anomalies),
            "top": result.report.ranking[0]}


def _dump_stages(stage_dir: Path, result) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    for pci, cell in sorted(result.cells.items()):
        ex = cell.extrapolation
        _write_text(stage_dir / f"labels_{pci}.csv", "row,col,label\n" + "".join(
            f"{c.row},{c.col},{lab.value}\n" for c, lab in sorted(ex.labels.items())))
        aug = ex.augmented
        _write_text(stage_dir / f"augmented_{pci}.csv", "row,col,value_dbm,weight,provenance\n" + "".join(
            f"{r},{c},{v!r},{w!r},{Provenance(p).name}\n"
            for r, c, v, w, p in zip(aug.rows, aug.cols, aug.values.tolist(), aug.weights.tolist(), aug.provenance)))


def cmd_train_locator(mdt_path: str, env_path: str, out: str, *, epochs: Optional[int] = None,
                      seed: int = 0) -> dict:
    """Train the MR locator on positioned multi-cell MDT reports."""
    with open(env_path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{env_path}: line {exc.lineno}: {exc.msg}") from None
    env = env_from_dict(d)
    reports = nn.group_reports(x for x in _read_samples(mdt_path) if x.source == Source.MDT)
    if not reports:
        raise ConfigError(f"{mdt_path}: no positioned MDT reports")
    cfg = replace(nn.LOCATOR_TRAIN, seed=seed, epochs=epochs if epochs is not None else nn.LOCATOR_TRAIN.epochs)
    loc = nn.locator_train(reports, env.pcis, env.spec, cfg)
    loc.save(out)
    return {"reports": len(reports), "pcis": len(env.pcis)}


def _parse_addr(addr: str):
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(listen: str, store_dir: str, *, max_sessions: Optional[int] = None) -> dict:
    host, port = _parse_addr(listen)
    store = RecordStore(store_dir)

    def ready(h, p):
        print(f"LISTENING {h}:{p}", flush=True)

    try:
        transcripts = asyncio.run(collector_serve(host, port, store, max_sessions=max_sessions, ready=ready))
    except OSError as exc:
        raise TransportError(str(exc)) from exc
    failed = [t for t in transcripts if t.error]
    for t in failed:
        log.error("session %s: %s", t.agent_id, t.error)
    return {"sessions": len(transcripts), "failed": len(failed), "records": store.count(),
            "events": store.event_count()}


def cmd_agent(connect: str, events_path: str, cfg: AgentConfig, *, ack_timeout_s: float = 2.0) -> dict:
    host, port = _parse_addr(connect)
    events = read_events_csv(events_path)
    tr = asyncio.run(agent_run(events, cfg, host, port, ack_timeout_s=ack_timeout_s))
    return {"events": tr.events, "records": tr.records, "batches": tr.batches, "retries": tr.retries}


# --- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arcade", description="Coverage anomaly detection from sparse RSRP measurements.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic cluster and its samples")
    s.add_argument("--env", dest="env_path", help="environment JSON (default: hexagonal scenario)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-cell", type=int, default=800)
    s.add_argument("--mr-ues", type=int, default=0, help="also emit MR events for this many UEs")
    s.add_argument("--mr-reports", type=int, default=5)

    a = sub.add_parser("analyze", help="extrapolate, model and diagnose a cluster")
    a.add_argument("--samples", required=True, action="append", help="samples CSV (repeatable)")
    a.add_argument("--grid", required=True, help="grid spec, environment or grid JSON")
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="TOML file with parameter overrides")
    a.add_argument("--locator", help="locator model used to position MR samples")
    for flag, typ in [("t-class-dbm", float), ("m-abn", int), ("floor-dbm", float), ("r-bc", float),
                      ("s-bc", int), ("w-emph", float), ("max-points", int), ("seed", int),
                      ("t-serv-dbm", float), ("delta-db", float), ("k-os", float),
                      ("lengthscale-m", float), ("signal-std-db", float), ("noise-std-db", float),
                      ("nn-epochs", int), ("nn-learning-rate", float), ("jobs", int)]:
        a.add_argument(f"--{flag}", type=typ)
    a.add_argument("--dump-stages", action="store_true", help="also write per-cell labels and training sets")
    a.add_argument("--no-nn", action="store_true", default=None,
                   help="compute indices on the GP fields, skipping the coverage networks")

    t = sub.add_parser("train-locator", help="train the MR locator on MDT reports")
    t.add_argument("--mdt", required=True, help="positioned multi-cell MDT samples CSV")
    t.add_argument("--env", required=True, help="environment JSON (grid and PCI set)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("serve", help="run the collector")
    v.add_argument("--listen", required=True, help="host:port (port 0 picks a free port)")
    v.add_argument("--store", required=True, help="directory for per-agent JSON-lines files")
    v.add_argument("--max-sessions", type=int)

    g = sub.add_parser("agent", help="consolidate MR events and ship them to a collector")
    g.add_argument("--connect", required=True, help="collector host:port")
    g.add_argument("--events", required=True, help="events CSV: ue_id,pci,rsrp_dbm,timestamp_ms")
    g.add_argument("--agent-id", default="agent-0")
    g.add_argument("--salt", default="", help="anonymization salt (never transmitted)")
    g.add_argument("--window-ms", type=int, default=1000)
    g.add_argument("--max-batch", type=int, default=100)
    g.add_argument("--ack-timeout", type=float, default=2.0)
    return p


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("ARCADE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _result(fields: Mapping) -> None:
    print("RESULT ok " + " ".join(f"{k}={v}" for k, v in fields.items()), flush=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            out = cmd_simulate(args.out, env_path=args.env_path, seed=args.seed, n_per_cell=args.n_per_cell,
                               mr_ues=args.mr_ues, mr_reports=args.mr_reports)
        elif args.command == "analyze":
            cfg = load_config(args.config)
            spec = _load_grid_spec(args.grid)
            params = analysis_params(args, cfg, spec)
            out = cmd_analyze(args.samples, args.grid, args.out, params, locator_path=args.locator,
                              dump_stages=args.dump_stages)
            out = {"cells": out["cells"], "anomalies": out["anomalies"]}
        elif args.command == "train-locator":
            out = cmd_train_locator(args.mdt, args.env, args.out, epochs=args.epochs, seed=args.seed)
        elif args.command == "serve":
            out = cmd_serve(args.listen, args.store, max_sessions=args.max_sessions)
        else:
            cfg = AgentConfig(args.agent_id, window_ms=args.window_ms, salt=args.salt.encode("utf-8"),
                              max_batch=args.max_batch)
            out = cmd_agent(args.connect, args.events, cfg, ack_timeout_s=args.ack_timeout)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"arcade: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, WireError) as exc:
        print(f"arcade: transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (NumericalError, nn.TrainingError) as exc:
        print(f"arcade: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, ConfigError, NoSamplesError, OSError, ValueError) as exc:
        print(f"arcade: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    _result(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
