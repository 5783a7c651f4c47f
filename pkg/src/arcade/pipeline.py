"""End-to-end analysis: sparse grid -> dense per-cell fields -> report."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from . import nn
from .extrapolation import Extrapolation, ExtrapolationParams, GpHyper, extrapolate_cell
from .grid import CoverageGrid, field_of
from .indices import DiagnosisReport, IndexParams, diagnose

log = logging.getLogger("arcade.pipeline")


class NoSamplesError(ValueError):
    """No PCI in the grid has any populated element."""


@dataclass(frozen=True)
class AnalysisParams:
    extrapolation: ExtrapolationParams = ExtrapolationParams()
    indices: IndexParams = IndexParams()
    hyper: Optional[GpHyper] = None          # None -> default_hyper(spec)
    coverage_train: nn.TrainConfig = nn.COVERAGE_TRAIN
    use_nn: bool = True                      # False: indices on the GP fields directly
    jobs: int = 1

    def echo(self) -> dict:
        """Flat, JSON-friendly view of every threshold used."""
        ex, ix, tc = self.extrapolation, self.indices, self.coverage_train
        out = {
            "t_class_dbm": ex.t_class_dbm, "m_abn": ex.m_abn, "floor_dbm": ex.floor_dbm,
            "r_bc": ex.r_bc, "s_bc": ex.s_bc, "w_emph": ex.w_emph, "max_points": ex.max_points,
            "seed": ex.seed,
            "t_serv_dbm": ix.t_serv_dbm, "delta_db": ix.delta_db, "k_os": ix.k_os,
            "use_nn": self.use_nn,
            "nn_epochs": tc.epochs, "nn_learning_rate": tc.learning_rate, "nn_batch_size": tc.batch_size,
        }
        if self.hyper is not None:
            out.update(lengthscale_m=self.hyper.lengthscale_m, signal_std_db=self.hyper.signal_std_db,
                       noise_std_db=self.hyper.noise_std_db)
        return out


@dataclass
class CellResult:
    pci: int
    extrapolation: Extrapolation
    coverage: Optional[nn.CoverageModel]

    @property
    def field(self) -> np.ndarray:
        return self.coverage.field() if self.coverage is not None else self.extrapolation.values


@dataclass
class Analysis:
    grid: CoverageGrid
    params: AnalysisParams
    cells: Dict[int, CellResult]
    report: DiagnosisReport
    fields: Dict[int, np.ndarray] = field(default_factory=dict)


def _analyze_cell(grid: CoverageGrid, pci: int, params: AnalysisParams) -> CellResult:
    spec = grid.spec
    ex = extrapolate_cell(field_of(grid, pci), spec, params.hyper, params.extrapolation)
    cov = None
    if params.use_nn:
        ts = ex.as_training_set()
        cov = nn.coverage_model(spec, ts.rows, ts.cols, ts.values, ts.weights, params.coverage_train,
                                floor_dbm=params.extrapolation.floor_dbm)
    log.debug("pci %d: %d real elements", pci, len(field_of(grid, pci)))
    return CellResult(pci, ex, cov)


def analyze(grid: CoverageGrid, params: AnalysisParams = AnalysisParams()) -> Analysis:
    """Extrapolate and model every PCI, then compute indices and the report."""
    pcis = [p for p in grid.pcis if field_of(grid, p)]
    if not pcis:
        raise NoSamplesError("no samples for any PCI")
    if len(pcis) == 1:
        log.warning("single-PCI cluster: interference indices are zero")
    # the seed of the extrapolation params also seeds the coverage networks
    # m_abn is shared with the extrapolation stage
    p = replace(params, coverage_train=replace(params.coverage_train, seed=params.extrapolation.seed),
                indices=replace(params.indices, m_abn=params.extrapolation.m_abn))
    jobs = max(1, min(p.jobs or os.cpu_count() or 1, len(pcis)))
    if jobs == 1:
        results = [_analyze_cell(grid, pci, p) for pci in pcis]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(lambda pci: _analyze_cell(grid, pci, p), pcis))
    cells = {r.pci: r for r in results}
    fields = {pci: cells[pci].field for pci in pcis}
    report = diagnose(fields, grid.spec, p.indices, p.echo())
    return Analysis(grid, p, cells, report, fields)
