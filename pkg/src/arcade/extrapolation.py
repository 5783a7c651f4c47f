"""Per-cell coverage extrapolation.

Pipeline for one cell's sparse field: classify populated elements into
normal / abnormal / outlier regions, augment the training set with
floor-valued boundary pseudo-samples and emphasis weights, fit an exact
Gaussian process with an RBF kernel, and predict every unpopulated element.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, ndimage
from scipy.spatial import distance

from .grid import GridCoord, GridSpec

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class NumericalError(ArithmeticError):
    """Kernel matrix could not be factorized even after jitter escalation."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Label(enum.Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"
    OUTLIER = "Outlier"


class Provenance(enum.IntEnum):
    REAL = 0
    BOUNDARY = 1      # floor-valued pseudo-sample
    EMPHASIS = 2      # real abnormal sample carrying the emphasis weight
    PREDICTED = 3     # GP posterior mean (dense output only)


@dataclass(frozen=True)
class ExtrapolationParams:
    t_class_dbm: float = -115.0
    m_abn: int = 5
    floor_dbm: float = -140.0
    r_bc: float = 10.0
    s_bc: int = 5
    w_emph: float = 3.0
    max_points: int = 4000
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class GpHyper:
    lengthscale_m: float
    signal_std_db: float = 12.0
    noise_std_db: float = 2.0
    jitter: float = 1e-8

    def __post_init__(self):
        for name in ("lengthscale_m", "signal_std_db", "noise_std_db", "jitter"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0, got {v!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


DEFAULT_LENGTHSCALE_CELLS = 6.0


def default_hyper(spec: GridSpec) -> GpHyper:
    return GpHyper(lengthscale_m=DEFAULT_LENGTHSCALE_CELLS * spec.cell_size_m, signal_std_db=12.0, noise_std_db=2.0, jitter=1e-8)


# --- classification ------------------------------------------------------------

def _principal_label(labels: np.ndarray, n: int, values: np.ndarray) -> int:
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    best = sizes.max()
    tied = np.flatnonzero(sizes == best)
    if len(tied) == 1:
        return int(tied[0])
    # tie: the component holding the strongest element wins
    strongest = [np.nanmax(np.where(labels == k, values, -np.inf)) for k in tied]
    return int(tied[int(np.argmax(strongest))])


def classify_regions(field: Mapping[GridCoord, float], spec: GridSpec,
                     params: ExtrapolationParams = ExtrapolationParams()) -> Dict[GridCoord, Label]:
    """Label every populated element of one cell's sparse field.

    Elements at or above ``t_class_dbm`` are grouped into 8-connected
    components. The largest is the normal coverage body; other components
    with at least ``m_abn`` elements are abnormal; smaller ones are outliers
    when their median sits more than 3 MAD from the cell median, otherwise
    they join the normal set. Sub-threshold elements are normal fringe.
    """
    if not field:
        raise ValueError("cannot classify an empty field")
    values = np.full(spec.shape, np.nan)
    for (r, c), v in field.items():
        values[r, c] = v
    populated = ~np.isnan(values)
    mask = populated & (values >= params.t_class_dbm)
    labels = {coord: Label.NORMAL for coord in field}
    comp, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return labels
    principal = _principal_label(comp, n, values)
    all_vals = np.fromiter(field.values(), float)
    med = float(np.median(all_vals))
    mad = float(np.median(np.abs(all_vals - med)))
    objects = ndimage.find_objects(comp)
    for k in range(1, n + 1):
        if k == principal:
            continue
        sl = objects[k - 1]
        rr, cc = np.nonzero(comp[sl] == k)
        rr, cc = rr + sl[0].start, cc + sl[1].start
        if len(rr) >= params.m_abn:
            lab = Label.ABNORMAL
        elif abs(float(np.median(values[rr, cc])) - med) > 3.0 * mad:
            lab = Label.OUTLIER
        else:
            continue
        for r, c in zip(rr, cc):
            labels[GridCoord(int(r), int(c))] = lab
    return labels


# --- augmentation ------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentedSet:
    """GP training set: element indices, meter positions, values, weights, provenance."""

    rows: np.ndarray
    cols: np.ndarray
    points: np.ndarray      # (n, 2) east/north meters
    values: np.ndarray
    weights: np.ndarray
    provenance: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def subset(self, idx) -> "AugmentedSet":
        return AugmentedSet(self.rows[idx], self.cols[idx], self.points[idx], self.values[idx],
                            self.weights[idx], self.provenance[idx])


def _points(spec: GridSpec, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.column_stack([(cols + 0.5) * spec.cell_size_m, (rows + 0.5) * spec.cell_size_m]).astype(float)


def make_set(spec: GridSpec, rows, cols, values, weights=None, provenance=None) -> AugmentedSet:
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    values = np.asarray(values, dtype=float)
    weights = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=float)
    provenance = (np.full(len(values), Provenance.REAL, dtype=int) if provenance is None
                  else np.asarray(provenance, dtype=int))
    return AugmentedSet(rows, cols, _points(spec, rows, cols), values, weights, provenance)


def boundary_mask(real: np.ndarray, params: ExtrapolationParams,
                  strong: Optional[np.ndarray] = None) -> np.ndarray:
    """Elements that receive floor pseudo-samples.

    ``real`` marks elements holding a real sample, ``strong`` the subset at or
    above ``t_class_dbm``. Border elements are pinned unless observed coverage
    (a strong sample) lies within ``r_bc``; a lattice of stride ``s_bc`` is
    pinned wherever no real sample lies within ``r_bc``.
    """
    border = np.zeros_like(real)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    if strong is None:
        strong = real
    far = _distance(real) > params.r_bc
    far_from_coverage = _distance(strong) > params.r_bc
    lattice = np.zeros_like(real)
    lattice[::params.s_bc, ::params.s_bc] = True
    return ~real & ((border & far_from_coverage) | (lattice & far))


def _distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance, in elements, to the nearest True element of ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def augment(field: Mapping[GridCoord, float], labels: Mapping[GridCoord, Label], spec: GridSpec,
            params: ExtrapolationParams = ExtrapolationParams()) -> AugmentedSet:
    """Drop outliers, weight abnormal samples and add floor boundary conditions."""
    kept = sorted(c for c in field if labels[c] is not Label.OUTLIER)
    rows = [c[0] for c in kept]
    cols = [c[1] for c in kept]
    values = [field[c] for c in kept]
    weights = [params.w_emph if labels[c] is Label.ABNORMAL else 1.0 for c in kept]
    prov = [Provenance.EMPHASIS if labels[c] is Label.ABNORMAL else Provenance.REAL for c in kept]

    real = np.zeros(spec.shape, dtype=bool)
    strong = np.zeros(spec.shape, dtype=bool)
    for c, v in zip(kept, values):
        real[c] = True
        strong[c] = v >= params.t_class_dbm
    br, bc = np.nonzero(boundary_mask(real, params, strong))
    rows += br.tolist()
    cols += bc.tolist()
    values += [params.floor_dbm] * len(br)
    weights += [1.0] * len(br)
    prov += [Provenance.BOUNDARY] * len(br)
    return make_set(spec, rows, cols, values, weights, prov)


# --- Gaussian process ----------------------------------------------------------------

def rbf_kernel(a: np.ndarray, b: np.ndarray, hyper: GpHyper) -> np.ndarray:
    d2 = distance.cdist(a, b, "sqeuclidean")
    return hyper.signal_std_db ** 2 * np.exp(-d2 / (2.0 * hyper.lengthscale_m ** 2))


@dataclass(frozen=True)
class GpModel:
    hyper: GpHyper
    train_points: np.ndarray
    train_values: np.ndarray
    weights: np.ndarray
    mean_offset_db: float
    factor: np.ndarray          # lower Cholesky factor of K + diag(noise/w) + jitter*I
    alpha: np.ndarray
    jitter_used: float


def _thin(aug: AugmentedSet, max_points: int, seed: int) -> AugmentedSet:
    if len(aug) <= max_points:
        return aug
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(aug), size=max_points, replace=False))
    log.info("thinning GP training set from %d to %d points", len(aug), max_points)
    return aug.subset(idx)


def _factorize(aug: AugmentedSet, hyper: GpHyper) -> Tuple[np.ndarray, float, float]:
    """Cholesky-factorize the noisy Gram matrix, escalating jitter up to 3 times."""
    x = aug.points
    gram = rbf_kernel(x, x, hyper)
    noise = hyper.noise_std_db ** 2 / aug.weights
    offset = float(np.sum(aug.weights * aug.values) / np.sum(aug.weights))
    jitter = hyper.jitter
    for attempt in range(4):
        a = gram + np.diag(noise + jitter)
        try:
            return linalg.cholesky(a, lower=True, check_finite=False), jitter, offset
        except linalg.LinAlgError:
            if attempt == 3:
                break
            jitter *= 10.0
    diag = {"n": len(aug), "jitter": jitter, "min_noise": float(noise.min())}
    try:
        diag["cond"] = float(np.linalg.cond(gram + np.diag(noise + jitter)))
    except np.linalg.LinAlgError:
        diag["cond"] = math.inf
    raise NumericalError(f"kernel matrix not positive definite (n={len(aug)}, jitter={jitter:g})", diag)


def fit_gp(aug: AugmentedSet, hyper: GpHyper, *, max_points: int = 4000, seed: int = 0) -> GpModel:
    if len(aug) < 2:
        raise ValueError("GP fit needs at least 2 samples")
    if np.any(aug.weights <= 0):
        raise ValueError("sample weights must be > 0")
    aug = _thin(aug, max_points, seed)
    chol, jitter, offset = _factorize(aug, hyper)
    alpha = linalg.cho_solve((chol, True), aug.values - offset, check_finite=False)
    return GpModel(hyper, aug.points.copy(), aug.values.copy(), aug.weights.copy(), offset, chol, alpha, jitter)


def gp_predict(model: GpModel, points: np.ndarray, *, with_variance: bool = True,
               chunk: int = 2048) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Posterior mean (dBm) and latent variance at ``points`` (meters, shape (m, 2))."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mean = np.empty(len(points))
    var = np.empty(len(points)) if with_variance else None
    prior = model.hyper.signal_std_db ** 2
    for s in range(0, len(points), chunk):
        ks = rbf_kernel(points[s:s + chunk], model.train_points, model.hyper)
        mean[s:s + chunk] = ks @ model.alpha + model.mean_offset_db
        if with_variance:
            v = linalg.solve_triangular(model.factor, ks.T, lower=True, check_finite=False)
            var[s:s + chunk] = np.maximum(prior - np.einsum("ij,ij->j", v, v), 0.0)
    return mean, var


def log_marginal_likelihood(aug: AugmentedSet, hyper: GpHyper, *, max_points: int = 4000,
                            seed: int = 0) -> float:
    model = fit_gp(aug, hyper, max_points=max_points, seed=seed)
    y = model.train_values - model.mean_offset_db
    n = len(y)
    return float(-0.5 * y @ model.alpha - np.log(np.diag(model.factor)).sum() - 0.5 * n * math.log(2 * math.pi))


@dataclass(frozen=True)
class CandidateScore:
    hyper: GpHyper
    lml: Optional[float]
    error: Optional[str] = None


def score_candidates(aug: AugmentedSet, candidates: Sequence[GpHyper]) -> List[CandidateScore]:
    out = []
    for h in candidates:
        try:
            out.append(CandidateScore(h, log_marginal_likelihood(aug, h)))
        except NumericalError as exc:
            log.warning("skipping GP candidate %s: %s", h, exc)
            out.append(CandidateScore(h, None, str(exc)))
    return out


def tune_hyper(aug: AugmentedSet, candidates: Sequence[GpHyper]) -> GpHyper:
    """Candidate with the highest log marginal likelihood; ties go to the smaller lengthscale."""
    if not candidates:
        raise ValueError("candidate grid is empty")
    scores = score_candidates(aug, sorted(candidates, key=lambda h: h.lengthscale_m))
    best = None
    for s in scores:
        if s.lml is not None and (best is None or s.lml > best.lml):
            best = s
    if best is None:
        raise NumericalError("every GP candidate failed", {"errors": [s.error for s in scores]})
    return best.hyper


def candidate_grid(spec: GridSpec, base: Optional[GpHyper] = None,
                   factors: Sequence[float] = (1.0, 2.0, 3.0, 5.0, 8.0)) -> List[GpHyper]:
    base = base or default_hyper(spec)
    return [GpHyper(f * spec.cell_size_m, base.signal_std_db, base.noise_std_db, base.jitter) for f in factors]


# --- whole-cell extrapolation ------------------------------------------------------------

@dataclass(frozen=True)
class Extrapolation:
    """Dense per-cell training set covering every grid element once.

    ``values``, ``weights`` and ``provenance`` are ``(rows, cols)`` arrays.
    """

    spec: GridSpec
    values: np.ndarray
    weights: np.ndarray
    provenance: np.ndarray
    labels: Dict[GridCoord, Label]
    augmented: AugmentedSet
    model: Optional[GpModel]

    def as_training_set(self) -> AugmentedSet:
        rows, cols = np.indices(self.spec.shape)
        return make_set(self.spec, rows.ravel(), cols.ravel(), self.values.ravel(),
                        self.weights.ravel(), self.provenance.ravel())


def extrapolate_cell(field: Mapping[GridCoord, float], spec: GridSpec, hyper: Optional[GpHyper] = None,
                     params: ExtrapolationParams = ExtrapolationParams(), *,
                     tune: Sequence[GpHyper] = ()) -> Extrapolation:
    """Classify, augment, fit and predict one cell's field over the whole grid.

    Populated elements keep their measured value (outliers are replaced by the
    GP mean); boundary pseudo-elements keep the floor value; every other
    element gets the GP posterior mean.
    """
    labels = classify_regions(field, spec, params)
    aug = augment(field, labels, spec, params)
    values = np.empty(spec.shape)
    weights = np.ones(spec.shape)
    prov = np.full(spec.shape, Provenance.PREDICTED, dtype=int)
    values[aug.rows, aug.cols] = aug.values
    weights[aug.rows, aug.cols] = aug.weights
    prov[aug.rows, aug.cols] = aug.provenance
    todo = prov == Provenance.PREDICTED
    model = None
    if todo.any():
        if hyper is None:
            hyper = tune_hyper(aug, tune) if tune else default_hyper(spec)
        model = fit_gp(aug, hyper, max_points=params.max_points, seed=params.seed)
        rr, cc = np.nonzero(todo)
        mean, _ = gp_predict(model, _points(spec, rr, cc), with_variance=False)
        values[rr, cc] = mean
    return Extrapolation(spec, values, weights, prov, labels, aug, model)

