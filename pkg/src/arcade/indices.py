"""Cluster-level coverage indicators, coverage matrix and anomaly ranking.

All indicators are set ratios over grid elements, computed from dense
per-cell RSRP fields that share one grid:

* ``S(c)``: elements where cell ``c`` is serviceable (``>= t_serv``)
* ``D(c)``: elements where ``c`` is the best server
* a cell is *present* at an element when it is within ``delta_db`` of the
  reference level there
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np
from scipy import ndimage

from .grid import GridSpec

REPORT_VERSION = 1
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class IndexParams:
    t_serv_dbm: float = -110.0
    delta_db: float = 6.0
    k_os: float = 2.0
    m_abn: int = 5

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _stack(fields: Mapping[int, np.ndarray]):
    pcis = sorted(fields)
    if not pcis:
        raise ValueError("no fields given")
    shapes = {np.shape(fields[p]) for p in pcis}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent field dimensions: {sorted(shapes)}")
    return pcis, np.stack([np.asarray(fields[p], dtype=float) for p in pcis])


@dataclass(frozen=True)
class ServiceMap:
    """Best server per element; ``best_pci`` is -1 where nothing is serviceable."""

    pcis: List[int]
    best_pci: np.ndarray
    best_rsrp_dbm: np.ndarray     # strongest level, serviceable or not
    second_rsrp_dbm: np.ndarray   # runner-up among serviceable cells, NaN if none
    t_serv_dbm: float

    def dominance(self, pci: int) -> np.ndarray:
        """Elements labelled with ``pci`` (ties already broken to the lowest PCI)."""
        return self.best_pci == pci


def _dominance(f: np.ndarray, smap: ServiceMap) -> np.ndarray:
    """Per-cell dominance areas: serviceable elements where the cell attains the
    best level. Tied cells share an element, unlike the single-valued label."""
    return (smap.best_pci >= 0) & (f == smap.best_rsrp_dbm)


def service_map(fields: Mapping[int, np.ndarray], t_serv_dbm: float = -110.0) -> ServiceMap:
    """Best server by argmax, restricted to serviceable levels; ties go to the lowest PCI."""
    pcis, f = _stack(fields)
    serv = f >= t_serv_dbm
    masked = np.where(serv, f, -np.inf)
    # argmax returns the first maximum, and PCIs are sorted ascending
    best_idx = np.argmax(masked, axis=0)
    any_serv = serv.any(axis=0)
    best_pci = np.where(any_serv, np.asarray(pcis)[best_idx], -1)
    if len(pcis) > 1:
        top2 = -np.sort(-masked, axis=0)[1]
        second = np.where(np.isfinite(top2), top2, np.nan)
    else:
        second = np.full(f.shape[1:], np.nan)
    return ServiceMap(pcis, best_pci, f.max(axis=0), second, t_serv_dbm)


@dataclass(frozen=True)
class CellIndices:
    ci: float
    isi: float
    iax: float
    oi: float
    cquali: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_indices(fields: Mapping[int, np.ndarray], smap: ServiceMap, delta_db: float = 6.0,
                    t_serv_dbm: Optional[float] = None) -> Dict[int, CellIndices]:
    """Coverage (CI), overlap (OI), interference-affected (IAX),
    interference-source (ISI) and cell-quality (CQualI) indices per cell."""
    t_serv = smap.t_serv_dbm if t_serv_dbm is None else t_serv_dbm
    pcis, f = _stack(fields)
    n_total = f[0].size
    serv = f >= t_serv
    dom = _dominance(f, smap)
    out = {}
    for i, pci in enumerate(pcis):
        others = [j for j in range(len(pcis)) if j != i]
        fi = f[i]
        s_c = serv[i]
        d_c = dom[i]
        if others:
            near = f[others] >= fi - delta_db                     # (P-1, rows, cols)
            overlap = s_c & (near & serv[others]).any(axis=0)
            affected = d_c & near.any(axis=0)
            foreign = dom[others].any(axis=0)
        else:
            overlap = affected = foreign = np.zeros_like(s_c)
        source = foreign & (fi >= smap.best_rsrp_dbm - delta_db)
        ci = _ratio(int(s_c.sum()), n_total)
        oi = _ratio(int(overlap.sum()), int(s_c.sum()))
        iax = _ratio(int(affected.sum()), int(d_c.sum()))
        isi = _ratio(int(source.sum()), int(foreign.sum()))
        out[pci] = CellIndices(ci=ci, isi=isi, iax=iax, oi=oi, cquali=ci * (1.0 - (iax + isi) / 2.0))
    return out


def coverage_matrix(fields: Mapping[int, np.ndarray], smap: ServiceMap, delta_db: float = 6.0) -> np.ndarray:
    """Row ``i``: share of cell i's dominance area where cell j is within ``delta_db``."""
    pcis, f = _stack(fields)
    dom = _dominance(f, smap)
    n = len(pcis)
    m = np.eye(n)
    for i in range(n):
        d_i = dom[i]
        den = int(d_i.sum())
        for j in range(n):
            if j != i:
                m[i, j] = _ratio(int((d_i & (f[j] >= f[i] - delta_db)).sum()), den)
    return m


# --- anomaly detection -----------------------------------------------------------

@dataclass(frozen=True)
class CellAnomaly:
    overshooter: bool
    fragmented: bool
    score: float
    center_m: Optional[tuple] = None
    principal_radius_m: float = 0.0
    n_fragments: int = 0


def _principal(labels: np.ndarray, n: int, values: np.ndarray) -> int:
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    tied = np.flatnonzero(sizes == sizes.max())
    if len(tied) == 1:
        return int(tied[0])
    strongest = [values[labels == k].max() for k in tied]
    return int(tied[int(np.argmax(strongest))])


def detect_anomalies(fields: Mapping[int, np.ndarray], smap: ServiceMap, spec: GridSpec,
                     params: IndexParams = IndexParams()) -> Dict[int, CellAnomaly]:
    """Flag fragmented and overshooting cells from their serviceable footprint.

    The cell centre is estimated from the strongest tenth of its main
    footprint (site positions are deliberately not an input). A fragment of
    at least ``m_abn`` elements whose centroid lies beyond ``k_os`` times the
    main footprint's 75th-percentile radius marks an overshooter.
    """
    pcis, f = _stack(fields)
    dom = _dominance(f, smap)
    east, north = spec.centers_m()
    out = {}
    for i, pci in enumerate(pcis):
        s_c = f[i] >= params.t_serv_dbm
        n_serv = int(s_c.sum())
        if n_serv == 0:
            out[pci] = CellAnomaly(False, False, 0.0)
            continue
        labels, n = ndimage.label(s_c, structure=EIGHT_CONNECTED)
        k0 = _principal(labels, n, f[i])
        main = labels == k0
        vals = f[i][main]
        top = max(1, math.ceil(0.1 * len(vals)))
        order = np.argsort(-vals, kind="stable")[:top]
        ce, cn = east[main][order].mean(), north[main][order].mean()
        dist = np.hypot(east - ce, north - cn)
        radius = float(np.percentile(dist[main], 75))
        reach = params.k_os * radius

        fragmented = overshooter = False
        far_area = 0
        n_frag = 0
        for k in range(1, n + 1):
            if k == k0:
                continue
            comp = labels == k
            size = int(comp.sum())
            if size < params.m_abn:
                continue
            fragmented = True
            n_frag += 1
            if math.hypot(east[comp].mean() - ce, north[comp].mean() - cn) > reach:
                overshooter = True
                far_area += size
        d_c = dom[i]
        far_dominance = _ratio(int((d_c & (dist > reach)).sum()), int(d_c.sum()))
        score = 0.5 * far_area / n_serv + 0.5 * far_dominance
        out[pci] = CellAnomaly(overshooter, fragmented, float(score), (float(ce), float(cn)), radius, n_frag)
    return out


# --- report ------------------------------------------------------------------------

@dataclass(frozen=True)
class CellReport:
    pci: int
    ci: float
    isi: float
    iax: float
    oi: float
    cquali: float
    overshooter: bool
    fragmented: bool
    score: float


@dataclass(frozen=True)
class DiagnosisReport:
    params: dict
    cells: List[CellReport]
    matrix: List[List[float]]
    ranking: List[int]
    version: int = REPORT_VERSION

    def cell(self, pci: int) -> CellReport:
        for c in self.cells:
            if c.pci == pci:
                return c
        raise KeyError(pci)

    @property
    def anomalies(self) -> List[int]:
        return [c.pci for c in self.cells if c.overshooter or c.fragmented]

    def to_dict(self) -> dict:
        return {"version": self.version, "params": self.params,
                "cells": [dict(c.__dict__) for c in self.cells],
                "matrix": [list(r) for r in self.matrix], "ranking": list(self.ranking)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiagnosisReport":
        validate_report(d)
        cells = [CellReport(**c) for c in d["cells"]]
        return cls(dict(d["params"]), cells, [list(map(float, r)) for r in d["matrix"]],
                   [int(p) for p in d["ranking"]], int(d["version"]))

    @classmethod
    def from_json(cls, text: str) -> "DiagnosisReport":
        return cls.from_dict(json.loads(text))


_UNIT = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "params", "cells", "matrix", "ranking"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "params": {"type": "object"},
        "cells": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["pci", "ci", "isi", "iax", "oi", "cquali", "overshooter", "fragmented", "score"],
                "additionalProperties": False,
                "properties": {
                    "pci": {"type": "integer", "minimum": 0},
                    "ci": _UNIT, "isi": _UNIT, "iax": _UNIT, "oi": _UNIT, "cquali": _UNIT,
                    "overshooter": {"type": "boolean"},
                    "fragmented": {"type": "boolean"},
                    "score": _UNIT,
                },
            },
        },
        "matrix": {"type": "array", "items": {"type": "array", "items": _UNIT}},
        "ranking": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}


def validate_report(d: Mapping) -> None:
    """Raise ``jsonschema.ValidationError`` if ``d`` is not a valid report."""
    import jsonschema
    jsonschema.validate(d, REPORT_SCHEMA)


def build_report(indices: Mapping[int, CellIndices], matrix: np.ndarray, anomalies: Mapping[int, CellAnomaly],
                 params: Mapping) -> DiagnosisReport:
    """Assemble the report; ranking is by score desc, then CQualI asc, then PCI asc."""
    pcis = sorted(indices)
    cells = []
    for p in pcis:
        ix, an = indices[p], anomalies[p]
        cells.append(CellReport(pci=int(p), ci=ix.ci, isi=ix.isi, iax=ix.iax, oi=ix.oi, cquali=ix.cquali,
                                overshooter=bool(an.overshooter), fragmented=bool(an.fragmented),
                                score=float(an.score)))
    ranking = [c.pci for c in sorted(cells, key=lambda c: (-c.score, c.cquali, c.pci))]
    return DiagnosisReport(dict(params), cells, [[float(v) for v in row] for row in np.asarray(matrix)], ranking)


def diagnose(fields: Mapping[int, np.ndarray], spec: GridSpec, params: IndexParams = IndexParams(),
             extra_params: Optional[Mapping] = None) -> DiagnosisReport:
    """Service map, indices, coverage matrix, anomaly flags and ranking in one call."""
    smap = service_map(fields, params.t_serv_dbm)
    idx = compute_indices(fields, smap, params.delta_db)
    mat = coverage_matrix(fields, smap, params.delta_db)
    an = detect_anomalies(fields, smap, spec, params)
    echoed = dict(params.to_dict())
    if extra_params:
        echoed.update(extra_params)
    return build_report(idx, mat, an, echoed)
