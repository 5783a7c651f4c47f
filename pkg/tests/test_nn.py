import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arcade import nn
from arcade.extrapolation import extrapolate_cell
from arcade.grid import GeoPoint, GridCoord, GridSpec, field_of, ingest
from arcade.nn import (Activation, MlpSpec, Normalizer, TrainConfig, TrainingError, forward, grad, init,
                       load_mlp, save_mlp, train)
from arcade.simulator import (CellConfig, EnvironmentConfig, Overshoot, ground_truth_field, hexagonal_cluster,
                              overshoot_mask, sample_mdt, sample_mdt_reports)
from oracles import mlp_loss


def random_batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0, 1, (n, spec.n_in)), rng.uniform(0, 1, (n, spec.n_out)), rng.uniform(0.5, 3.0, n))


def perturbed(spec, seed):
    """Initialised network with non-zero biases so every parameter matters."""
    mlp = init(spec, seed)
    rng = np.random.default_rng(seed + 1)
    return mlp.with_params(list(mlp.weights) + [rng.normal(0, 0.3, b.shape) for b in mlp.biases])


# --- init / forward ------------------------------------------------------------------------

def test_init_deterministic_and_bounded():
    spec = MlpSpec((3, 8, 5, 2))
    a, b = init(spec, 7), init(spec, 7)
    for wa, wb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(wa, wb)
    for w, (fi, fo) in zip(a.weights, zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        assert w.shape == (fi, fo)
        assert np.abs(w).max() <= math.sqrt(6.0 / (fi + fo))
    assert all(np.all(bias == 0) for bias in a.biases)
    assert not np.array_equal(init(spec, 8).weights[0], a.weights[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 4, 2), "sigmoid")


def test_zero_weights_output_bias():
    spec = MlpSpec((3, 8, 2), Activation.TANH)
    mlp = init(spec, 0)
    zeros = [np.zeros_like(w) for w in mlp.weights]
    out_bias = np.array([0.25, -1.5])
    mlp = mlp.with_params(zeros + [np.ones(8), out_bias])
    y = forward(mlp, np.random.default_rng(0).normal(size=(10, 3)))
    np.testing.assert_array_equal(y, np.tile(out_bias, (10, 1)))


def test_dimension_mismatch():
    mlp = init(MlpSpec((3, 4, 1)), 0)
    with pytest.raises(ValueError):
        forward(mlp, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        grad(mlp, np.zeros((2, 3)), np.zeros((3, 1)))


# --- gradients ----------------------------------------------------------------------------------

@pytest.mark.parametrize("activation", [Activation.TANH, Activation.RELU])
def test_loss_matches_independent_oracle(activation):
    spec = MlpSpec((3, 8, 5, 2), activation)
    mlp = perturbed(spec, 3)
    x, t, w = random_batch(spec, 40, 3)
    _, loss = grad(mlp, x, t, w)
    assert loss == pytest.approx(mlp_loss(mlp.weights, mlp.biases, activation.value, x, t, w), rel=1e-12)


def fd_relative_errors(activation, trials=100, h=1e-4):
    """Relative error of one backprop partial per trial, each on a fresh random
    network, batch and coordinate (the spec network has fewer than 100 weights)."""
    spec = MlpSpec((3, 8, 5, 2), activation)
    errs = []
    for trial in range(trials):
        mlp = perturbed(spec, trial)
        x, t, w = random_batch(spec, 16, trial)
        g, _ = grad(mlp, x, t, w)
        rng = np.random.default_rng([trial, 99])
        k = int(rng.integers(len(g)))
        idx = tuple(int(rng.integers(n)) for n in g[k].shape)
        vals = []
        for sign in (1, -1):
            params = [p.copy() for p in mlp.params()]
            params[k][idx] += sign * h
            m = mlp.with_params(params)
            vals.append(mlp_loss(m.weights, m.biases, activation.value, x, t, w))
        fd = (vals[0] - vals[1]) / (2 * h)
        an = g[k][idx]
        errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-7))
    return np.array(errs)


@pytest.mark.parametrize("activation", [Activation.TANH, Activation.RELU])
def test_gradient_finite_differences(activation):
    assert fd_relative_errors(activation).max() < 1e-4


def test_duplicate_equals_double_weight():
    spec = MlpSpec((2, 6, 1))
    mlp = perturbed(spec, 4)
    x, t, _ = random_batch(spec, 10, 4)
    w = np.ones(10)
    w[3] = 2.0
    g1, l1 = grad(mlp, x, t, w)
    xd, td = np.vstack([x, x[3:4]]), np.vstack([t, t[3:4]])
    g2, l2 = grad(mlp, xd, td)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


# --- training ------------------------------------------------------------------------------------

def test_constant_target_fits():
    x = np.random.default_rng(0).uniform(0, 1, (200, 2))
    t = np.full((200, 1), -95.0)
    out = Normalizer(np.array([-140.0]), np.array([-20.0]))
    mlp, _ = train(init(MlpSpec((2, 64, 64, 1)), 0), x, t, TrainConfig(epochs=200), out_norm=out)
    rmse = np.sqrt(np.mean((mlp.predict(x) - t) ** 2))
    assert rmse < 0.5


@pytest.mark.parametrize("seed", range(5))
def test_loss_trace_decreases(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (256, 2))
    t = np.sin(3 * x[:, :1]) + x[:, 1:] ** 2
    _, trace = train(init(MlpSpec((2, 16, 16, 1)), seed), x, t, TrainConfig(epochs=40, seed=seed))
    assert np.mean(trace[-10:]) <= np.mean(trace[:10])


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    x, t = rng.uniform(0, 1, (100, 3)), rng.uniform(0, 1, (100, 2))
    cfg = TrainConfig(epochs=5, seed=9)
    a, ta = train(init(MlpSpec((3, 8, 2)), 1), x, t, cfg)
    b, tb = train(init(MlpSpec((3, 8, 2)), 1), x, t, cfg)
    assert ta == tb
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa, pb)


def test_non_finite_loss_raises_with_epoch():
    x = np.zeros((4, 2))
    t = np.array([[0.0], [1.0], [np.nan], [0.0]])
    with pytest.raises(TrainingError) as exc:
        train(init(MlpSpec((2, 3, 1)), 0), x, t, TrainConfig(epochs=3, batch_size=4),
              out_norm=Normalizer.identity(1))
    assert exc.value.epoch == 0


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(init(MlpSpec((2, 3, 1)), 0), np.zeros((0, 2)), np.zeros((0, 1)))


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(learning_rate=1e-2, final_learning_rate=1e-4)
    assert cfg.lr_at(0, 100) == pytest.approx(1e-2)
    assert cfg.lr_at(100, 100) == pytest.approx(1e-4)
    assert TrainConfig().lr_at(50, 100) == 1e-3


# --- persistence and normalization ----------------------------------------------------------

def test_save_load_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    x, t = rng.uniform(0, 1, (50, 3)), rng.uniform(-120, -60, (50, 2))
    mlp, _ = train(init(MlpSpec((3, 8, 2), Activation.RELU), 2), x, t, TrainConfig(epochs=3))
    save_mlp(mlp, tmp_path / "m.json")
    back = load_mlp(tmp_path / "m.json")
    assert back.spec == mlp.spec
    for a, b in zip(back.params(), mlp.params()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.predict(x), mlp.predict(x))


def test_load_rejects_other_format():
    d = nn.mlp_to_dict(init(MlpSpec((2, 3, 1)), 0))
    with pytest.raises(ValueError):
        nn.mlp_from_dict({**d, "version": 99})
    d["biases"][0] = [0.0]
    with pytest.raises(ValueError):
        nn.mlp_from_dict(d)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3), st.lists(st.floats(0.01, 1e4), min_size=3, max_size=3),
       st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3))
def test_normalizer_round_trip(lo, span, x):
    norm = Normalizer(np.array(lo), np.array(lo) + np.array(span))
    back = norm.inverse(norm.forward(np.array(x)))
    np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-9 * max(1.0, max(map(abs, lo + span))))


# --- coverage model ----------------------------------------------------------------------------

def overshoot_env():
    spec = GridSpec(GeoPoint(0.0, 0.0), rows=60, cols=60, cell_size_m=50.0)
    cell = CellConfig(1, spec.to_geo(1525.0, 25.0), eirp_dbm=46.0, azimuth_deg=0.0, beamwidth_deg=65.0,
                      pl_exponent=4.2, anomalies=(Overshoot(20.0, 2000.0, 2500.0),))
    return EnvironmentConfig(spec, (cell,), shadowing_sigma_db=0.0, noise_floor_dbm=-160.0, seed=1)


def test_coverage_field_total_and_clamped():
    env = overshoot_env()
    truth = ground_truth_field(env, 1)
    rows, cols = np.indices(env.spec.shape)
    model = nn.coverage_model(env.spec, rows.ravel(), cols.ravel(), truth.ravel(),
                              cfg=dataclasses.replace(nn.COVERAGE_TRAIN, epochs=2))
    f = model.field()
    assert f.shape == env.spec.shape and np.isfinite(f).all()
    assert f.min() >= nn.FLOOR_DBM and f.max() <= -20.0
    assert model.at(3, 4) == pytest.approx(f[3, 4])


def test_coverage_reproduces_overshoot_ring():
    env = overshoot_env()
    truth = ground_truth_field(env, 1)
    g = ingest(env.spec, sample_mdt(env, 1200, 1))
    ex = extrapolate_cell(field_of(g, 1), env.spec)
    ts = ex.as_training_set()
    model = nn.coverage_model(env.spec, ts.rows, ts.cols, ts.values, ts.weights)
    ring = overshoot_mask(env, 1) & (truth >= -110.0)
    assert ring.sum() > 50
    assert abs(model.field()[ring].mean() - truth[ring].mean()) <= 6.0


# --- locator ----------------------------------------------------------------------------------------

def test_fingerprint_order_and_floor():
    fp = nn.fingerprint({7: -90.0, 3: -200.0, 99: -80.0}, (3, 5, 7))
    np.testing.assert_array_equal(fp, [nn.FLOOR_DBM, nn.FLOOR_DBM, -90.0])


def test_group_reports_averages_repeats():
    env = hexagonal_cluster(seed=1)
    reps = sample_mdt_reports(env, 3, 1)
    samples = [s for r in reps for s in r.samples()]
    dup = samples[0]
    samples.append(dataclasses.replace(dup, rsrp_dbm=dup.rsrp_dbm - 4.0))
    grouped = nn.group_reports(samples)
    assert len(grouped) == len(reps)
    key = {(r.position, tuple(sorted(r.readings))) for r in reps}
    assert {(p, tuple(sorted(rd))) for p, rd in grouped} == key
    first = next(rd for p, rd in grouped if p == dup.position and dup.pci in rd)
    assert first[dup.pci] == pytest.approx(dup.rsrp_dbm - 2.0)


@pytest.fixture(scope="module")
def trained_locator():
    # three widely separated omni cells, noiseless readings on half the elements plus the sites
    spec = GridSpec(GeoPoint(0.0, 0.0), rows=40, cols=40, cell_size_m=50.0)
    sites = [GridCoord(5, 5), GridCoord(5, 34), GridCoord(34, 20)]
    cells = tuple(CellConfig(10 + i, spec.center_of(rc), azimuth_deg=0.0, beamwidth_deg=360.0)
                  for i, rc in enumerate(sites))
    env = EnvironmentConfig(spec, cells, shadowing_sigma_db=0.0)
    truth = {p: ground_truth_field(env, p) for p in env.pcis}

    def report(rc):
        return spec.center_of(rc), {p: float(truth[p][rc]) for p in env.pcis}

    train_set = [report(GridCoord(r, c)) for r in range(40) for c in range(40)
                 if (r + c) % 2 == 0 or GridCoord(r, c) in sites]
    return env, nn.locator_train(train_set, env.pcis, spec), [report(rc) for rc in sites]


def test_locator_finds_sites(trained_locator):
    env, loc, site_reports = trained_locator
    for pos, readings in site_reports:
        # the site's own cell dominates its fingerprint
        assert max(readings, key=readings.get) == env.pcis[[c.site for c in env.cells].index(pos)]
        est = loc.locate_m(loc.fingerprint(readings)[None, :])[0]
        err = np.hypot(*(est - np.array(env.spec.to_meters(pos))))
        assert err <= 3 * env.spec.cell_size_m


def test_locator_clamps_to_grid(trained_locator):
    env, loc, _ = trained_locator
    extremes = np.array([np.full(3, nn.FLOOR_DBM), np.full(3, -20.0), [-20.0, nn.FLOOR_DBM, nn.FLOOR_DBM]])
    for e, n in loc.locate_m(extremes):
        assert 0.0 < e < env.spec.width_m and 0.0 < n < env.spec.height_m
    assert env.spec.project(nn.geolocate(loc, extremes[0])) is not None


def test_locator_save_load(trained_locator, tmp_path):
    _, loc, site_reports = trained_locator
    loc.save(tmp_path / "loc.json")
    back = nn.Locator.load(tmp_path / "loc.json")
    fps = np.stack([loc.fingerprint(r) for _, r in site_reports])
    np.testing.assert_array_equal(back.locate_m(fps), loc.locate_m(fps))
    assert back.pcis == loc.pcis


def test_locator_needs_data():
    env = hexagonal_cluster()
    with pytest.raises(ValueError):
        nn.locator_train([], env.pcis, env.spec)
