import json
import subprocess
import sys

import numpy as np
import pytest

from arcade import cli, nn
from arcade.collector import read_events_csv, records_from_jsonl
from arcade.grid import read_samples_csv
from arcade.indices import validate_report
from arcade.simulator import hexagonal_cluster, save_env


def small_env(seed=0):
    return hexagonal_cluster(seed=seed, rows=40, cols=40, isd_m=600.0, ring_m=(1200.0, 1600.0))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    save_env(small_env(), root / "env.json")
    assert cli.main(["simulate", "--env", str(root / "env.json"), "--out", str(root / "sim"),
                     "--n-per-cell", "150", "--mr-ues", "30", "--mr-reports", "2"]) == 0
    return root


def analyze_args(root, out, *extra):
    return ["analyze", "--samples", str(root / "sim" / "samples.csv"), "--grid", str(root / "sim" / "env.json"),
            "--out", str(out), "--nn-epochs", "3", "--jobs", "1", *extra]


# --- exports ------------------------------------------------------------------------------

def test_pgm_endpoints():
    assert cli.pgm_pixels(np.array([[-140.0, -40.0, -90.0, -200.0, 0.0]])).tolist() == [[0, 255, 128, 0, 255]]


def test_pgm_text_layout():
    txt = cli.pgm_text(np.array([[-140.0, -140.0, -140.0], [-40.0, -40.0, -40.0]]))
    # northernmost row (row 1) comes first
    assert txt == "P2\n3 2\n255\n255 255 255\n0 0 0\n"


def test_field_csv_round_trip(tmp_path):
    f = np.round(np.random.default_rng(0).uniform(-130, -50, (4, 6)), 4)
    (tmp_path / "f.csv").write_text(cli.field_csv(f))
    np.testing.assert_array_equal(cli.read_field_csv(tmp_path / "f.csv"), f)


# --- simulate ---------------------------------------------------------------------------------

def test_simulate_pci_set_and_files(small_run):
    sim = small_run / "sim"
    env = small_env()
    truth = sorted(int(p.stem.split("_")[1]) for p in (sim / "truth").glob("field_*.csv"))
    assert truth == list(env.pcis)
    assert {s.pci for s in read_samples_csv(sim / "samples.csv")} == set(env.pcis)
    assert cli.read_field_csv(sim / "truth" / "field_101.csv").shape == (40, 40)
    hidden = (sim / "mr_hidden.csv").read_text().splitlines()
    assert hidden[0] == "ue_id,lat,lon" and len(hidden) == 31


def test_simulate_zero_samples_gives_header_only(tmp_path):
    save_env(small_env(), tmp_path / "env.json")
    assert cli.main(["simulate", "--env", str(tmp_path / "env.json"), "--out", str(tmp_path / "o"),
                     "--n-per-cell", "0"]) == 0
    lines = (tmp_path / "o" / "samples.csv").read_text().splitlines()
    assert lines == ["pci,rsrp_dbm,lat,lon,timestamp_ms,source,ue_token"]


def test_simulate_is_deterministic(tmp_path, small_run):
    assert cli.main(["simulate", "--env", str(small_run / "env.json"), "--out", str(tmp_path),
                     "--n-per-cell", "150", "--mr-ues", "30", "--mr-reports", "2"]) == 0
    for name in ("samples.csv", "mdt_reports.csv", "mr_events.csv", "truth/field_104.csv"):
        assert (tmp_path / name).read_bytes() == (small_run / "sim" / name).read_bytes()


def test_simulate_seed_overrides_env(tmp_path, small_run):
    assert cli.main(["simulate", "--env", str(small_run / "env.json"), "--seed", "5", "--out", str(tmp_path),
                     "--n-per-cell", "150"]) == 0
    assert (tmp_path / "samples.csv").read_bytes() != (small_run / "sim" / "samples.csv").read_bytes()
    assert json.loads((tmp_path / "env.json").read_text())["seed"] == 5


def test_bad_env_reports_line(tmp_path, capsys):
    (tmp_path / "env.json").write_text('{\n"cells": [\n  1,,\n]}')
    assert cli.main(["simulate", "--env", str(tmp_path / "env.json"), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


# --- analyze ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def analyzed(small_run):
    out = small_run / "an"
    (small_run / "cfg.toml").write_text("[thresholds]\nt_serv_dbm = -112.0\ndelta_db = 4.0\n\nk_os = 2.5\n")
    code = cli.main(analyze_args(small_run, out, "--config", str(small_run / "cfg.toml"), "--delta-db", "5",
                                 "--dump-stages"))
    assert code == 0
    return out


def test_analyze_outputs(analyzed, small_run):
    report = json.loads((analyzed / "report.json").read_text())
    validate_report(report)
    pcis = small_env().pcis
    assert sorted(c["pci"] for c in report["cells"]) == list(pcis)
    for pci in pcis:
        f = cli.read_field_csv(analyzed / "fields" / f"field_{pci}.csv")
        assert f.shape == (40, 40)
        head = (analyzed / "fields" / f"field_{pci}.pgm").read_text().split("\n", 3)
        assert head[:3] == ["P2", "40 40", "255"]
        assert (analyzed / "stages" / f"labels_{pci}.csv").exists()
    aug = (analyzed / "stages" / "augmented_101.csv").read_text().splitlines()
    assert aug[0] == "row,col,value_dbm,weight,provenance" and len(aug) > 1


def test_params_echo_flags_win_over_config(analyzed):
    params = json.loads((analyzed / "report.json").read_text())["params"]
    assert params["t_serv_dbm"] == -112.0     # config
    assert params["delta_db"] == 5.0          # flag beats config
    assert params["k_os"] == 2.5
    assert params["nn_epochs"] == 3


def test_geojson_matches_fields(analyzed):
    gj = json.loads((analyzed / "best_server.geojson").read_text())
    feats = gj["features"]
    assert len(feats) == 1600
    fields = {p: cli.read_field_csv(analyzed / "fields" / f"field_{p}.csv") for p in small_env().pcis}
    for ft in feats[::97]:
        r, c = ft["properties"]["row"], ft["properties"]["col"]
        ring = ft["geometry"]["coordinates"][0]
        assert len(ring) == 5 and ring[0] == ring[-1]
        best = max(fields, key=lambda p: (fields[p][r, c], -p))
        if fields[best][r, c] >= -112.0 + 1e-3:
            assert ft["properties"]["best_pci"] == best
        assert ft["properties"]["best_rsrp"] == pytest.approx(fields[best][r, c], abs=1e-3)


def test_result_line(small_run, tmp_path, capsys):
    assert cli.main(analyze_args(small_run, tmp_path, "--no-nn")) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("RESULT ok cells=7 anomalies=")


def test_analyze_no_samples_is_data_error(tmp_path, small_run, capsys):
    (tmp_path / "empty.csv").write_text((small_run / "sim" / "samples.csv").read_text().splitlines()[0] + "\n")
    code = cli.main(["analyze", "--samples", str(tmp_path / "empty.csv"), "--grid",
                     str(small_run / "env.json"), "--out", str(tmp_path / "o")])
    assert code == 2 and "no samples" in capsys.readouterr().err


# --- usage ------------------------------------------------------------------------------------------

@pytest.mark.parametrize("argv", [["analyze", "--grid", "g.json", "--out", "o"], ["simulate"], [],
                                  ["serve", "--listen", "x"]])
def test_missing_flag_is_usage_error(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_bad_address_is_usage_error(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("ue_id,pci,rsrp_dbm,timestamp_ms\n")
    assert cli.main(["agent", "--connect", "nowhere", "--events", str(tmp_path / "e.csv")]) == 1
    assert "usage:" in capsys.readouterr().err


def test_refused_connection_is_transport_error(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("ue_id,pci,rsrp_dbm,timestamp_ms\nu,1,-80.0,0\n")
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert cli.main(["agent", "--connect", f"127.0.0.1:{port}", "--events", str(tmp_path / "e.csv")]) == 4


# --- locator and collector -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def locator_path(small_run):
    path = small_run / "loc.json"
    assert cli.main(["train-locator", "--mdt", str(small_run / "sim" / "mdt_reports.csv"),
                     "--env", str(small_run / "sim" / "env.json"), "--out", str(path), "--epochs", "5"]) == 0
    return path


def test_locator_round_trip(locator_path, tmp_path):
    loc = nn.Locator.load(locator_path)
    loc.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == locator_path.read_bytes()
    fp = np.random.default_rng(0).uniform(-130, -60, (5, len(loc.pcis)))
    np.testing.assert_array_equal(nn.Locator.load(tmp_path / "again.json").locate_m(fp), loc.locate_m(fp))


def test_analyze_with_locator_uses_mr_samples(small_run, locator_path, tmp_path, caplog):
    sim = small_run / "sim"
    code = cli.main(["analyze", "--samples", str(sim / "samples.csv"), "--samples", str(sim / "mr_samples.csv"),
                     "--grid", str(sim / "env.json"), "--out", str(tmp_path), "--locator", str(locator_path),
                     "--no-nn", "--jobs", "1"])
    assert code == 0
    validate_report(json.loads((tmp_path / "report.json").read_text()))


def test_serve_and_agent_over_loopback(small_run, tmp_path):
    events = small_run / "sim" / "mr_events.csv"
    server = subprocess.Popen([sys.executable, "-m", "arcade", "serve", "--listen", "127.0.0.1:0",
                               "--store", str(tmp_path / "store"), "--max-sessions", "2"],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        line = server.stdout.readline().strip()
        assert line.startswith("LISTENING ")
        addr = line.split()[1]
        for agent in ("rbs-a", "rbs-b"):
            assert cli.main(["agent", "--connect", addr, "--events", str(events), "--agent-id", agent,
                             "--max-batch", "7"]) == 0
        out, err = server.communicate(timeout=60)
    finally:
        server.kill()
    assert server.returncode == 0, err
    n_events = len(read_events_csv(events))
    result = dict(kv.split("=") for kv in out.strip().split()[2:])
    assert result["sessions"] == "2" and result["failed"] == "0"
    assert int(result["events"]) == 2 * n_events
    for agent in ("rbs-a", "rbs-b"):
        recs = records_from_jsonl((tmp_path / "store" / f"{agent}.jsonl").read_text())
        assert sum(r.count for r in recs) == n_events
