"""Small feedforward networks trained with Adam, written directly on numpy.

Two uses: a per-cell coverage model mapping grid coordinates to RSRP, and a
locator mapping an RSRP fingerprint to a position inside the grid.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .grid import GeoPoint, GridSpec, RSRP_MAX_DBM, RawSample

MODEL_FORMAT = "arcade-mlp"
MODEL_VERSION = 1
FLOOR_DBM = -140.0


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: Tuple[int, ...]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(sizes) < 3:
            raise ValueError("an MLP needs input, at least one hidden layer and output")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be >= 1")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map of ``[lo, hi]`` onto ``[0, 1]``."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        lo, hi = x.min(axis=0).astype(float), x.max(axis=0).astype(float)
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(lo, hi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.lo) / (self.hi - self.lo)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * (self.hi - self.lo) + self.lo


@dataclass(frozen=True)
class Mlp:
    spec: MlpSpec
    weights: Tuple[np.ndarray, ...]   # weights[i] has shape (fan_in, fan_out)
    biases: Tuple[np.ndarray, ...]
    in_norm: Normalizer
    out_norm: Normalizer

    def params(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        n = len(self.weights)
        return replace(self, weights=tuple(params[:n]), biases=tuple(params[n:]))

    def predict(self, x) -> np.ndarray:
        """Forward pass in physical units (normalization applied both ways)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.out_norm.inverse(forward(self, self.in_norm.forward(x)))


def init(spec: MlpSpec, seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return Mlp(spec, tuple(ws), tuple(bs), Normalizer.identity(spec.n_in), Normalizer.identity(spec.n_out))


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind is Activation.TANH else np.maximum(z, 0.0)


def _act_grad(kind: Activation, a: np.ndarray, z: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if kind is Activation.TANH else (z > 0).astype(float)


def _check_input(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != mlp.spec.n_in:
        raise ValueError(f"input has {x.shape[1]} features, network expects {mlp.spec.n_in}")
    return x


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Raw network output for already-normalized inputs."""
    a = _check_input(mlp, x)
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w + b
        a = z if i == last else _act(mlp.spec.activation, z)
    return a


def _backprop(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], act: Activation,
              x: np.ndarray, t: np.ndarray, w: np.ndarray) -> Tuple[List[np.ndarray], float]:
    acts, pre = [x], []
    last = len(weights) - 1
    for i in range(last + 1):
        z = acts[-1] @ weights[i]
        z += biases[i]
        pre.append(z)
        acts.append(z if i == last else _act(act, z))
    diff = acts[-1] - t
    wn = w / w.sum()
    loss = float(wn @ np.einsum("ij,ij->i", diff, diff))

    delta = diff * (2.0 * wn)[:, None]
    gw: List[np.ndarray] = [None] * (last + 1)
    gb: List[np.ndarray] = [None] * (last + 1)
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ weights[i].T
            delta *= _act_grad(act, acts[i], pre[i - 1])
    return gw + gb, loss


def grad(mlp: Mlp, x: np.ndarray, targets: np.ndarray,
         weights: Optional[np.ndarray] = None) -> Tuple[List[np.ndarray], float]:
    """Backpropagate the weighted MSE ``sum w_i |y_i - t_i|^2 / sum w_i``.

    Returns gradients ordered like :meth:`Mlp.params` (all weight matrices,
    then all bias vectors) and the loss.
    """
    x = _check_input(mlp, x)
    t = np.asarray(targets, dtype=float).reshape(len(x), mlp.spec.n_out)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    if len(t) != len(x) or len(w) != len(x):
        raise ValueError("inputs, targets and weights must have the same length")
    return _backprop(mlp.weights, mlp.biases, mlp.spec.activation, x, t, w)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-6
    # cosine-anneal the step size down to this value over the run; None keeps it constant
    final_learning_rate: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def lr_at(self, step: int, total: int) -> float:
        if self.final_learning_rate is None:
            return self.learning_rate
        frac = min(step / max(total, 1), 1.0)
        return self.final_learning_rate + 0.5 * (self.learning_rate - self.final_learning_rate) * (1 + math.cos(math.pi * frac))


def train(mlp: Mlp, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig = TrainConfig(), *,
          weights: Optional[np.ndarray] = None,
          in_norm: Optional[Normalizer] = None,
          out_norm: Optional[Normalizer] = None) -> Tuple[Mlp, List[float]]:
    """Mini-batch Adam on the weighted MSE in normalized space.

    Normalizers default to the per-dimension min/max of the data; they are
    stored in the returned model so :meth:`Mlp.predict` works in physical
    units. Returns the trained model and the per-epoch mean loss.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    t = np.asarray(targets, dtype=float).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty training set")
    _check_input(mlp, x)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    in_norm = in_norm or Normalizer.fit(x)
    out_norm = out_norm or Normalizer.fit(t)
    xn, tn = in_norm.forward(x), out_norm.forward(t)

    n_w = len(mlp.weights)
    params = [p.copy() for p in mlp.params()]
    ws, bs = params[:n_w], params[n_w:]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    b1, b2, eps, wd = cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay
    act = mlp.spec.activation
    steps_per_epoch = -(-len(x) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            g, loss = _backprop(ws, bs, act, xn[idx], tn[idx], w[idx])
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss", epoch)
            total += loss * len(idx)
            lr_t = cfg.lr_at(step, total_steps) * math.sqrt(1 - b2 ** (step + 1)) / (1 - b1 ** (step + 1))
            step += 1
            for k in range(len(params)):
                gk = g[k]
                if k < n_w and wd:
                    gk += wd * params[k]
                mk, vk = m[k], v[k]
                mk *= b1
                mk += (1 - b1) * gk
                vk *= b2
                gk *= gk
                vk += (1 - b2) * gk
                params[k] -= lr_t * mk / (np.sqrt(vk) + eps)
        trace.append(total / len(x))
    return replace(mlp, weights=tuple(ws), biases=tuple(bs), in_norm=in_norm, out_norm=out_norm), trace


# --- persistence ---------------------------------------------------------------
# Floats are written with Python's shortest round-trip repr (json default),
# so save -> load reproduces every weight bit for bit.

def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": {"layer_sizes": list(mlp.spec.layer_sizes), "activation": mlp.spec.activation.value},
        "normalization": {"in_lo": mlp.in_norm.lo.tolist(), "in_hi": mlp.in_norm.hi.tolist(),
                          "out_lo": mlp.out_norm.lo.tolist(), "out_hi": mlp.out_norm.hi.tolist()},
        "weights": [w.ravel().tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
    }


def mlp_from_dict(d: Mapping) -> Mlp:
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model format {d.get('format')!r} v{d.get('version')!r}")
    spec = MlpSpec(tuple(d["spec"]["layer_sizes"]), Activation(d["spec"]["activation"]))
    shapes = list(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]))
    ws = tuple(np.asarray(w, dtype=float).reshape(shape) for w, shape in zip(d["weights"], shapes))
    bs = tuple(np.asarray(b, dtype=float) for b in d["biases"])
    if len(ws) != len(shapes) or any(b.shape != (s[1],) for b, s in zip(bs, shapes)):
        raise ValueError("weight shapes do not match the layer spec")
    nd = d["normalization"]
    return Mlp(spec, ws, bs,
               Normalizer(np.asarray(nd["in_lo"], float), np.asarray(nd["in_hi"], float)),
               Normalizer(np.asarray(nd["out_lo"], float), np.asarray(nd["out_hi"], float)))


def save_mlp(mlp: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(mlp_to_dict(mlp), fh)
        fh.write("\n")


def load_mlp(path) -> Mlp:
    with open(path, encoding="utf-8") as fh:
        return mlp_from_dict(json.load(fh))


# --- coverage model ----------------------------------------------------------------

COVERAGE_LAYERS = (2, 64, 64, 1)
COVERAGE_ACTIVATION = Activation.RELU
# ~4000 Adam steps on a 100x100 grid; sized to keep a 7-cell analysis within seconds
COVERAGE_TRAIN = TrainConfig(learning_rate=1e-2, final_learning_rate=1e-4, epochs=25, batch_size=64)


def grid_inputs(spec: GridSpec, rows=None, cols=None) -> np.ndarray:
    """``(col, row)`` element indices as network inputs, all elements if not given."""
    if rows is None:
        rr, cc = np.indices(spec.shape)
        rows, cols = rr.ravel(), cc.ravel()
    return np.column_stack([np.asarray(cols, float), np.asarray(rows, float)])


def grid_normalizer(spec: GridSpec) -> Normalizer:
    return Normalizer(np.zeros(2), np.array([max(spec.cols - 1, 1), max(spec.rows - 1, 1)], float))


def rsrp_normalizer(floor_dbm: float = FLOOR_DBM, n: int = 1) -> Normalizer:
    return Normalizer(np.full(n, floor_dbm), np.full(n, RSRP_MAX_DBM))


@dataclass(frozen=True)
class CoverageModel:
    spec: GridSpec
    mlp: Mlp
    floor_dbm: float
    loss_trace: Tuple[float, ...] = ()

    def field(self) -> np.ndarray:
        """Predicted RSRP on every grid element, clamped to ``[floor, -20]``."""
        out = self.mlp.predict(grid_inputs(self.spec))[:, 0].reshape(self.spec.shape)
        return np.clip(out, self.floor_dbm, RSRP_MAX_DBM)

    def at(self, row: int, col: int) -> float:
        v = float(self.mlp.predict(grid_inputs(self.spec, [row], [col]))[0, 0])
        return min(max(v, self.floor_dbm), RSRP_MAX_DBM)


def coverage_model(spec: GridSpec, rows, cols, values, weights=None, cfg: TrainConfig = COVERAGE_TRAIN, *,
                   layers: Sequence[int] = COVERAGE_LAYERS, activation: Activation = COVERAGE_ACTIVATION,
                   floor_dbm: float = FLOOR_DBM) -> CoverageModel:
    """Fit one cell's coverage network on a dense training set."""
    mlp = init(MlpSpec(tuple(layers), activation), cfg.seed)
    values = np.clip(np.asarray(values, float), floor_dbm, RSRP_MAX_DBM)
    trained, trace = train(mlp, grid_inputs(spec, rows, cols), values[:, None], cfg, weights=weights,
                           in_norm=grid_normalizer(spec), out_norm=rsrp_normalizer(floor_dbm))
    return CoverageModel(spec, trained, floor_dbm, tuple(trace))


# --- locator -----------------------------------------------------------------------

def fingerprint(readings: Mapping[int, float], pcis: Sequence[int], floor_dbm: float = FLOOR_DBM) -> np.ndarray:
    """RSRP vector in ascending-PCI order; unreported cells sit at the floor."""
    fp = np.full(len(pcis), floor_dbm)
    pos = {p: i for i, p in enumerate(pcis)}
    for pci, v in readings.items():
        if pci in pos:
            fp[pos[pci]] = v
    return np.clip(fp, floor_dbm, RSRP_MAX_DBM)


def group_reports(samples: Iterable[RawSample]) -> List[Tuple[GeoPoint, Dict[int, float]]]:
    """Group positioned samples into UE reports keyed by ``(ue_token, timestamp_ms)``.

    Repeated readings of a PCI inside a report are averaged.
    """
    groups: Dict[Tuple[str, int], Tuple[GeoPoint, Dict[int, List[float]]]] = {}
    for s in samples:
        if s.position is None:
            continue
        key = (s.ue_token, s.timestamp_ms)
        pos, rd = groups.setdefault(key, (s.position, {}))
        rd.setdefault(s.pci, []).append(s.rsrp_dbm)
    return [(pos, {p: math.fsum(v) / len(v) for p, v in sorted(rd.items())})
            for _, (pos, rd) in sorted(groups.items())]


@dataclass(frozen=True)
class Locator:
    spec: GridSpec
    pcis: Tuple[int, ...]
    mlp: Mlp
    floor_dbm: float = FLOOR_DBM

    def locate_m(self, fingerprints: np.ndarray) -> np.ndarray:
        """East/north meters, clamped just inside the grid extent."""
        out = self.mlp.predict(np.atleast_2d(fingerprints))
        eps = 1e-6 * self.spec.cell_size_m
        out[:, 0] = np.clip(out[:, 0], eps, self.spec.width_m - eps)
        out[:, 1] = np.clip(out[:, 1], eps, self.spec.height_m - eps)
        return out

    def fingerprint(self, readings: Mapping[int, float]) -> np.ndarray:
        return fingerprint(readings, self.pcis, self.floor_dbm)

    def to_dict(self) -> dict:
        return {"grid": self.spec.to_dict(), "pcis": list(self.pcis), "floor_dbm": self.floor_dbm,
                "mlp": mlp_to_dict(self.mlp)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Locator":
        return cls(GridSpec.from_dict(d["grid"]), tuple(int(p) for p in d["pcis"]),
                   mlp_from_dict(d["mlp"]), float(d.get("floor_dbm", FLOOR_DBM)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Locator":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


LOCATOR_ACTIVATION = Activation.RELU
LOCATOR_TRAIN = TrainConfig(learning_rate=1e-2, final_learning_rate=1e-4, epochs=100, batch_size=64)


def locator_train(reports: Sequence[Tuple[GeoPoint, Mapping[int, float]]], pcis: Sequence[int], spec: GridSpec,
                  cfg: TrainConfig = LOCATOR_TRAIN, *, floor_dbm: float = FLOOR_DBM,
                  hidden: Sequence[int] = (128, 64), activation: Activation = LOCATOR_ACTIVATION) -> Locator:
    """Train a fingerprint -> position network on positioned (MDT) reports."""
    if not reports:
        raise ValueError("locator needs at least one positioned report")
    pcis = tuple(sorted(int(p) for p in pcis))
    x = np.stack([fingerprint(rd, pcis, floor_dbm) for _, rd in reports])
    y = np.array([spec.to_meters(pos) for pos, _ in reports], dtype=float)
    mlp = init(MlpSpec((len(pcis),) + tuple(hidden) + (2,), Activation(activation)), cfg.seed)
    extent = Normalizer(np.zeros(2), np.array([spec.width_m, spec.height_m]))
    trained, _ = train(mlp, x, y, cfg, in_norm=rsrp_normalizer(floor_dbm, len(pcis)), out_norm=extent)
    return Locator(spec, pcis, trained, floor_dbm)


def geolocate(locator: Locator, fp: np.ndarray) -> GeoPoint:
    east, north = locator.locate_m(np.asarray(fp, float)[None, :])[0]
    return locator.spec.to_geo(east, north)
