"""Synthetic RF environment used as a ground-truth oracle.

The propagation model here is test infrastructure only: log-distance path
loss, a parabolic sector pattern with a 25 dB floor, spatially correlated
shadowing and additive, exactly-known anomalies. Nothing downstream of the
sample files ever sees it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .grid import (ConfigError, GeoPoint, GridSpec, RawSample, RSRP_MAX_DBM, RSRP_MIN_DBM,
                   Source)

REF_DISTANCE_M = 10.0
REF_LOSS_DB = 60.0
PATTERN_FLOOR_DB = 25.0
MDT_NOISE_DB = 2.0
OUTLIER_RANGE_DBM = (-140.0, -60.0)
MR_TOP_K = 8
T0_MS = 1_700_000_000_000


@dataclass(frozen=True)
class Overshoot:
    boost_db: float
    ring_inner_m: float
    ring_outer_m: float

    def __post_init__(self):
        if not self.boost_db > 0:
            raise ConfigError("Overshoot.boost_db must be > 0")
        if not (self.ring_outer_m > self.ring_inner_m > 0):
            raise ConfigError("Overshoot ring needs ring_outer_m > ring_inner_m > 0")


@dataclass(frozen=True)
class AzimuthError:
    delta_deg: float


@dataclass(frozen=True)
class PowerFault:
    delta_db: float


AnomalySpec = Union[Overshoot, AzimuthError, PowerFault]
_ANOMALY_KINDS = {"Overshoot": Overshoot, "AzimuthError": AzimuthError, "PowerFault": PowerFault}


@dataclass(frozen=True)
class CellConfig:
    pci: int
    site: GeoPoint
    azimuth_deg: float = 0.0
    beamwidth_deg: float = 360.0
    eirp_dbm: float = 20.0
    pl_exponent: float = 3.5
    anomalies: Tuple[AnomalySpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "site", GeoPoint(*self.site))
        object.__setattr__(self, "anomalies", tuple(self.anomalies))
        if not (0 < self.beamwidth_deg <= 360):
            raise ConfigError(f"cell {self.pci}: beamwidth_deg must be in (0, 360]")
        if not (2 <= self.pl_exponent <= 5):
            raise ConfigError(f"cell {self.pci}: pl_exponent must be in [2, 5]")
        if not (0 <= self.azimuth_deg < 360):
            raise ConfigError(f"cell {self.pci}: azimuth_deg must be in [0, 360)")
        if self.pci < 0:
            raise ConfigError("pci must be >= 0")


@dataclass(frozen=True)
class EnvironmentConfig:
    spec: GridSpec
    cells: Tuple[CellConfig, ...]
    shadowing_sigma_db: float = 4.0
    noise_floor_dbm: float = -130.0
    outlier_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(sorted(self.cells, key=lambda c: c.pci)))
        pcis = [c.pci for c in self.cells]
        if len(set(pcis)) != len(pcis):
            raise ConfigError("duplicate PCIs in environment")
        if self.shadowing_sigma_db < 0:
            raise ConfigError("shadowing_sigma_db must be >= 0")
        if not (0 <= self.outlier_rate <= 1):
            raise ConfigError("outlier_rate must be in [0, 1]")

    @property
    def pcis(self) -> List[int]:
        return [c.pci for c in self.cells]

    def cell(self, pci: int) -> CellConfig:
        for c in self.cells:
            if c.pci == pci:
                return c
        raise KeyError(f"unknown pci {pci}")


# --- JSON config --------------------------------------------------------------

def _anomaly_to_dict(a: AnomalySpec) -> dict:
    d = {"kind": type(a).__name__}
    d.update(a.__dict__)
    return d


def env_to_dict(env: EnvironmentConfig) -> dict:
    return {
        "grid": env.spec.to_dict(),
        "shadowing_sigma_db": env.shadowing_sigma_db,
        "noise_floor_dbm": env.noise_floor_dbm,
        "outlier_rate": env.outlier_rate,
        "seed": env.seed,
        "cells": [
            {"pci": c.pci, "site": {"lat": c.site.lat, "lon": c.site.lon},
             "azimuth_deg": c.azimuth_deg, "beamwidth_deg": c.beamwidth_deg,
             "eirp_dbm": c.eirp_dbm, "pl_exponent": c.pl_exponent,
             "anomalies": [_anomaly_to_dict(a) for a in c.anomalies]}
            for c in env.cells
        ],
    }


def env_from_dict(d: dict) -> EnvironmentConfig:
    try:
        cells = []
        for cd in d["cells"]:
            anomalies = []
            for ad in cd.get("anomalies", []):
                ad = dict(ad)
                kind = ad.pop("kind")
                if kind not in _ANOMALY_KINDS:
                    raise ConfigError(f"unknown anomaly kind {kind!r}")
                anomalies.append(_ANOMALY_KINDS[kind](**ad))
            cells.append(CellConfig(
                pci=int(cd["pci"]), site=GeoPoint(cd["site"]["lat"], cd["site"]["lon"]),
                azimuth_deg=float(cd.get("azimuth_deg", 0.0)),
                beamwidth_deg=float(cd.get("beamwidth_deg", 360.0)),
                eirp_dbm=float(cd.get("eirp_dbm", 20.0)),
                pl_exponent=float(cd.get("pl_exponent", 3.5)),
                anomalies=tuple(anomalies)))
        return EnvironmentConfig(
            spec=GridSpec.from_dict(d["grid"]), cells=tuple(cells),
            shadowing_sigma_db=float(d.get("shadowing_sigma_db", 4.0)),
            noise_floor_dbm=float(d.get("noise_floor_dbm", -130.0)),
            outlier_rate=float(d.get("outlier_rate", 0.0)),
            seed=int(d.get("seed", 0)))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad environment config: {exc!r}") from exc


def load_env(path) -> EnvironmentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return env_from_dict(d)


def save_env(env: EnvironmentConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(env_to_dict(env), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- propagation ----------------------------------------------------------------

def _bearing_deg(dx, dy):
    return np.degrees(np.arctan2(dx, dy)) % 360.0


def _angle_diff(a, b):
    d = np.abs((a - b) % 360.0)
    return np.minimum(d, 360.0 - d)


def shadowing_field(env: EnvironmentConfig, pci: int) -> np.ndarray:
    """Seeded Gaussian field smoothed by a 3x3 box and rescaled to the configured sigma."""
    rows, cols = env.spec.shape
    if env.shadowing_sigma_db == 0:
        return np.zeros((rows, cols))
    rng = np.random.default_rng([env.seed, pci, 0x5AD0])
    raw = rng.standard_normal((rows + 2, cols + 2))
    box = sum(raw[i:i + rows, j:j + cols] for i in range(3) for j in range(3)) / 9.0
    # mean of 9 iid unit normals has std 1/3
    return box * (3.0 * env.shadowing_sigma_db)


def ground_truth_field(env: EnvironmentConfig, pci: int, *, shadowing: bool = True,
                       anomalies: bool = True) -> np.ndarray:
    """Dense ``(rows, cols)`` RSRP of one cell, clamped to ``[noise_floor, -20]``."""
    try:
        cell = env.cell(pci)
    except KeyError:
        raise KeyError(f"unknown pci {pci}") from None
    spec = env.spec
    east, north = spec.centers_m()
    site_e, site_n = spec.to_meters(cell.site)
    dx, dy = east - site_e, north - site_n
    d = np.hypot(dx, dy)

    azimuth = cell.azimuth_deg
    eirp = cell.eirp_dbm
    active = cell.anomalies if anomalies else ()
    for a in active:
        if isinstance(a, AzimuthError):
            azimuth = (azimuth + a.delta_deg) % 360.0
        elif isinstance(a, PowerFault):
            eirp += a.delta_db

    # the element holding the site has no defined bearing: treat it as boresight
    off_axis = np.where(d > 1e-9, _angle_diff(_bearing_deg(dx, dy), azimuth), 0.0)
    pattern = np.minimum(12.0 * (off_axis / cell.beamwidth_deg) ** 2, PATTERN_FLOOR_DB)
    path_loss = REF_LOSS_DB + 10.0 * cell.pl_exponent * np.log10(np.maximum(d, REF_DISTANCE_M) / REF_DISTANCE_M)
    rsrp = eirp - path_loss - pattern
    if shadowing:
        rsrp = rsrp + shadowing_field(env, pci)
    for a in active:
        if isinstance(a, Overshoot):
            rsrp = rsrp + a.boost_db * overshoot_mask(env, pci, a, azimuth)
    return np.clip(rsrp, env.noise_floor_dbm, RSRP_MAX_DBM)


def overshoot_mask(env: EnvironmentConfig, pci: int, anomaly: Optional[Overshoot] = None,
                   azimuth: Optional[float] = None) -> np.ndarray:
    """Boolean mask of elements inside an Overshoot ring sector of cell ``pci``."""
    cell = env.cell(pci)
    if anomaly is None:
        rings = [a for a in cell.anomalies if isinstance(a, Overshoot)]
        if not rings:
            return np.zeros(env.spec.shape, dtype=bool)
        out = np.zeros(env.spec.shape, dtype=bool)
        for a in rings:
            out |= overshoot_mask(env, pci, a)
        return out
    if azimuth is None:
        azimuth = cell.azimuth_deg
        for a in cell.anomalies:
            if isinstance(a, AzimuthError):
                azimuth = (azimuth + a.delta_deg) % 360.0
    east, north = env.spec.centers_m()
    site_e, site_n = env.spec.to_meters(cell.site)
    dx, dy = east - site_e, north - site_n
    d = np.hypot(dx, dy)
    in_ring = (d >= anomaly.ring_inner_m) & (d <= anomaly.ring_outer_m)
    in_sector = _angle_diff(_bearing_deg(dx, dy), azimuth) <= cell.beamwidth_deg / 2.0
    return in_ring & in_sector


def ground_truth_fields(env: EnvironmentConfig) -> Dict[int, np.ndarray]:
    return {pci: ground_truth_field(env, pci) for pci in env.pcis}


# --- sample generators -------------------------------------------------------------

def _noisy(rng, truth: np.ndarray, noise_db: float) -> np.ndarray:
    return truth + rng.normal(0.0, 1.0, truth.shape) * noise_db


@dataclass(frozen=True)
class MdtReport:
    """One positioned UE report: the anchor cell it was drawn for plus co-measured cells."""

    ue_token: str
    timestamp_ms: int
    position: GeoPoint
    anchor_pci: int
    readings: Dict[int, float]

    def samples(self) -> List[RawSample]:
        return [RawSample(pci, v, self.position, self.timestamp_ms, Source.MDT, self.ue_token)
                for pci, v in sorted(self.readings.items())]


def _mdt_draws(env: EnvironmentConfig, n_per_cell: int, seed: int, noise_db: float,
               top_k: int) -> List[MdtReport]:
    if n_per_cell < 0:
        raise ValueError("n_per_cell must be >= 0")
    spec = env.spec
    fields = ground_truth_fields(env)
    pcis = env.pcis
    stack = np.stack([fields[p] for p in pcis])  # (P, rows, cols)
    flat = stack.reshape(len(pcis), -1)
    rng = np.random.default_rng([seed, 0x3D7])
    reports: List[MdtReport] = []
    for ci, pci in enumerate(pcis):
        # dominance = dB margin above the noise floor
        w = np.maximum(flat[ci] - env.noise_floor_dbm, 0.0)
        if n_per_cell == 0 or w.sum() <= 0:
            continue
        idx = rng.choice(flat.shape[1], size=n_per_cell, p=w / w.sum())
        noise = rng.normal(0.0, 1.0, (n_per_cell, len(pcis))) * noise_db
        is_outlier = rng.random((n_per_cell, len(pcis))) < env.outlier_rate
        outlier_vals = rng.uniform(*OUTLIER_RANGE_DBM, (n_per_cell, len(pcis)))
        for k, e in enumerate(idx):
            truth = flat[:, e]
            heard = [j for j in np.argsort(-truth, kind="stable") if truth[j] > env.noise_floor_dbm]
            chosen = [j for j in heard[:top_k]]
            if ci not in chosen:
                chosen = chosen[:max(top_k - 1, 0)] + [ci]
            readings = {}
            for j in chosen:
                v = outlier_vals[k, j] if is_outlier[k, j] else truth[j] + noise[k, j]
                readings[pcis[j]] = float(np.clip(v, RSRP_MIN_DBM, RSRP_MAX_DBM))
            row, col = divmod(int(e), spec.cols)
            n = len(reports)
            reports.append(MdtReport(ue_token=f"mdt-{seed}-{n:06d}", timestamp_ms=T0_MS + 1000 * n,
                                     position=spec.center_of((row, col)), anchor_pci=pci,
                                     readings=readings))
    return reports


def sample_mdt(env: EnvironmentConfig, n_per_cell: int, seed: int, *,
               noise_db: float = MDT_NOISE_DB) -> List[RawSample]:
    """Positioned single-cell MDT samples, ``n_per_cell`` per cell.

    Elements are drawn with probability proportional to the cell's dB margin
    above the noise floor, so sampling is denser where the cell is strong.
    """
    out = []
    for rep in _mdt_draws(env, n_per_cell, seed, noise_db, MR_TOP_K):
        out.append(RawSample(rep.anchor_pci, rep.readings[rep.anchor_pci], rep.position,
                             rep.timestamp_ms, Source.MDT, rep.ue_token))
    return out


def sample_mdt_reports(env: EnvironmentConfig, n_per_cell: int, seed: int, *,
                       noise_db: float = MDT_NOISE_DB, top_k: int = MR_TOP_K) -> List[MdtReport]:
    """Full multi-cell MDT reports behind :func:`sample_mdt` (same draws, same seed).

    Each report carries the strongest ``top_k`` cells heard at the drawn
    element; its anchor reading equals the corresponding ``sample_mdt`` sample.
    """
    return _mdt_draws(env, n_per_cell, seed, noise_db, top_k)


def sample_mr(env: EnvironmentConfig, n_ue: int, reports_per_ue: int, seed: int, *,
              noise_db: float = MDT_NOISE_DB, top_k: int = MR_TOP_K,
              positions: Optional[Sequence[GeoPoint]] = None,
              report_interval_ms: int = 200,
              ) -> Tuple[List[Tuple[str, List[RawSample]]], Dict[str, GeoPoint]]:
    """Unpositioned measurement reports from UEs at hidden positions.

    Returns ``(reports, hidden)`` where ``reports`` is a list of
    ``(ue_id, samples)`` and ``hidden`` maps ``ue_id`` to its true position,
    which is meant for evaluation only.
    """
    if n_ue < 0 or reports_per_ue < 0:
        raise ValueError("n_ue and reports_per_ue must be >= 0")
    spec = env.spec
    fields = ground_truth_fields(env)
    pcis = env.pcis
    flat = np.stack([fields[p] for p in pcis]).reshape(len(pcis), -1)
    rng = np.random.default_rng([seed, 0x4D52])
    heard_any = np.flatnonzero((flat > env.noise_floor_dbm).any(axis=0))
    if positions is None:
        elems = rng.choice(heard_any, size=n_ue) if len(heard_any) else np.zeros(0, int)
        positions = [spec.center_of(divmod(int(e), spec.cols)) for e in elems]
    else:
        positions = list(positions)[:n_ue]
    out: List[Tuple[str, List[RawSample]]] = []
    hidden: Dict[str, GeoPoint] = {}
    for u, pos in enumerate(positions):
        coord = spec.project(pos)
        if coord is None:
            raise ValueError(f"UE position {pos} outside grid")
        truth = flat[:, coord.row * spec.cols + coord.col]
        order = [j for j in np.argsort(-truth, kind="stable") if truth[j] > env.noise_floor_dbm][:top_k]
        ue_id = f"ue-{seed}-{u:05d}"
        t_base = T0_MS + 10_000 * u
        samples = []
        for r in range(reports_per_ue):
            noise = rng.normal(0.0, 1.0, len(order)) * noise_db
            for j, nz in zip(order, noise):
                v = float(np.clip(truth[j] + nz, RSRP_MIN_DBM, RSRP_MAX_DBM))
                samples.append(RawSample(pcis[j], v, None, t_base + r * report_interval_ms, Source.MR, ue_id))
        out.append((ue_id, samples))
        hidden[ue_id] = GeoPoint(*pos)
    return out, hidden


# --- scenario builder --------------------------------------------------------------

def hexagonal_cluster(*, seed: int = 0, isd_m: float = 1200.0, rows: int = 100, cols: int = 100,
                      cell_size_m: float = 50.0, origin: GeoPoint = GeoPoint(-18.92, -48.28),
                      overshoot_pci: Optional[int] = 101, boost_db: float = 20.0,
                      ring_m: Tuple[float, float] = (3000.0, 4000.0),
                      shadowing_sigma_db: float = 4.0, outlier_rate: float = 0.01,
                      eirp_dbm: float = 24.0, pl_exponent: float = 3.5,
                      beamwidth_deg: float = 120.0) -> EnvironmentConfig:
    """Seven-site hexagonal cluster centred on the grid, one sector cell per site.

    PCIs are 101..107: 101 is the centre site, 102..107 sit on the first ring at
    bearings 0, 60, ..., 300 degrees. Every ring cell points at the cluster
    centre; the centre cell points north. ``overshoot_pci`` gets an Overshoot
    ring. The default is the centre cell: at 3-4 km its ring sector is clipped
    by the grid to the two northern corners, which keeps the overshoot area
    well below the cell's main footprint (an unclipped 120 degree ring sector
    is larger than the main lobe and would become the principal component).
    """
    spec = GridSpec(origin=origin, rows=rows, cols=cols, cell_size_m=cell_size_m)
    cx, cy = spec.width_m / 2.0, spec.height_m / 2.0
    cells = []
    for k in range(7):
        pci = 101 + k
        if k == 0:
            x, y, az = cx, cy, 0.0
        else:
            b = math.radians(60.0 * (k - 1))
            x, y = cx + isd_m * math.sin(b), cy + isd_m * math.cos(b)
            az = (math.degrees(math.atan2(cx - x, cy - y))) % 360.0
        anomalies = ()
        if pci == overshoot_pci:
            anomalies = (Overshoot(boost_db, ring_m[0], ring_m[1]),)
        cells.append(CellConfig(pci=pci, site=spec.to_geo(x, y), azimuth_deg=round(az, 9) % 360.0,
                                beamwidth_deg=beamwidth_deg, eirp_dbm=eirp_dbm,
                                pl_exponent=pl_exponent, anomalies=anomalies))
    return EnvironmentConfig(spec=spec, cells=tuple(cells), shadowing_sigma_db=shadowing_sigma_db,
                             noise_floor_dbm=-130.0, outlier_rate=outlier_rate, seed=seed)
