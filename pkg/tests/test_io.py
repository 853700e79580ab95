import json

import numpy as np
import pytest

from mfdb.io import (
    MAGIC,
    PolicyFormatError,
    fingerprint,
    format_number,
    load_config,
    load_policy,
    parse_config,
    save_policy,
    write_csv,
)
from mfdb.model import ConfigError, SystemParams, scenario_preset
from mfdb.solver import solve_mfdb


def test_format_number_round_trips():
    rng = np.random.default_rng(0)
    for x in np.concatenate([rng.standard_normal(200) * 10.0 ** rng.integers(-300, 300, 200), [0.0, -0.0]]):
        assert float(format_number(x)) == x
    assert format_number(float("inf")) == "inf"
    assert format_number(float("nan")) == "nan"


def test_policy_round_trip_is_bit_exact(tmp_path, small_solution):
    path = tmp_path / "p.mfdb"
    save_policy(path, small_solution, initial_energy=0.7)
    sol, header = load_policy(path)
    for name in ("policy", "value", "mean_field"):
        assert np.array_equal(getattr(sol, name), getattr(small_solution, name))
    for name in ("interference", "lam", "dlam", "transmitting_mass"):
        assert np.array_equal(getattr(sol.field, name), getattr(small_solution.field, name))
    assert sol.params == small_solution.params
    assert sol.scenario == small_solution.scenario
    assert header["initial_energy"] == "0.69999999999999996"
    assert header["converged"] == "true"


def test_loaded_grid_invariants(tmp_path, small_solution):
    path = tmp_path / "p.mfdb"
    save_policy(path, small_solution)
    sol, _ = load_policy(path)
    g, ref = sol.grid, small_solution.grid
    for name in ("energy", "gain", "delays", "frame_times", "slot_delays"):
        assert np.allclose(getattr(g, name), getattr(ref, name), rtol=1e-15, atol=0)
        assert np.all(np.diff(getattr(g, name)) > 0)
    assert g.substeps_per_frame == ref.substeps_per_frame


def test_save_is_deterministic(tmp_path, small_solution):
    a, b = tmp_path / "a", tmp_path / "b"
    save_policy(a, small_solution)
    save_policy(b, small_solution)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().startswith(MAGIC + "\n")


def test_fingerprint_tracks_every_param():
    p, sc = SystemParams(), scenario_preset("cc")
    base = fingerprint(p, sc)
    assert fingerprint(SystemParams(), scenario_preset("cc")) == base
    assert fingerprint(p.replace(acb_factor=0.4), sc) != base
    assert fingerprint(p.replace(device_count=999), sc) != base
    assert fingerprint(p, scenario_preset("h1")) != base


def test_non_converged_flag(tmp_path, make_small):
    params, sc, grid = make_small()
    sol, _ = solve_mfdb(params.replace(fp_max_iters=2), sc, grid=grid)
    assert not sol.report.converged
    path = tmp_path / "p.mfdb"
    save_policy(path, sol)
    text = path.read_text()
    assert "# converged: false" in text and "WARNING" in text
    loaded, _ = load_policy(path)
    assert not loaded.report.converged


def test_truncated_file(tmp_path, small_solution):
    path = tmp_path / "p.mfdb"
    save_policy(path, small_solution)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(PolicyFormatError, match="expected"):
        load_policy(path)


def test_wrong_version(tmp_path, small_solution):
    path = tmp_path / "p.mfdb"
    save_policy(path, small_solution)
    path.write_text(path.read_text().replace(MAGIC, "MFDB-POLICY v9", 1))
    with pytest.raises(PolicyFormatError, match="version"):
        load_policy(path)


def test_nan_rejected(tmp_path, small_solution):
    path = tmp_path / "p.mfdb"
    save_policy(path, small_solution)
    lines = path.read_text().splitlines()
    i = next(k for k, l in enumerate(lines) if l.startswith("array policy")) + 1
    vals = lines[i].split()
    vals[0] = "nan"
    lines[i] = " ".join(vals)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PolicyFormatError, match="NaN"):
        load_policy(path)


def test_tampered_params_fail_fingerprint(tmp_path, small_solution):
    path = tmp_path / "p.mfdb"
    save_policy(path, small_solution)
    path.write_text(path.read_text().replace('"acb_factor": 0.5', '"acb_factor": 0.25'))
    with pytest.raises(PolicyFormatError, match="fingerprint"):
        load_policy(path)


def test_empty_config_gives_reference_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    params, sc, run = load_config(path)
    assert params == SystemParams()
    assert sc == scenario_preset("cc")
    assert run.seeds == 10 and run.session_energy == 0.7


def test_slot_duration_follows_slot_count():
    params, _, _ = parse_config({"slots_per_frame": 10})
    assert params.slot_duration == pytest.approx(1e-3)
    with pytest.raises(ConfigError, match="frame_duration"):
        parse_config({"slots_per_frame": 10, "slot_duration": 0.5e-3, "frame_duration": 10e-3})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="slot_durration"):
        parse_config({"slot_durration": 1e-3})


def test_scenario_name_and_overrides():
    _, sc, _ = parse_config({"name": "h2", "sigma": 5e-3})
    assert sc.angular_freq == 0.4 and sc.sigma == 5e-3


@pytest.mark.parametrize(
    "data",
    [{"seeds": 0}, {"initial_energy": 1.5}, {"n_values": []}, {"strategy": "csma"}],
)
def test_bad_run_options(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_write_csv_schema_and_determinism(tmp_path):
    rows = [
        {"n_devices": 500, "strategy": "aloha", "mean_delay_s": 0.1 + 0.2, "stderr_s": float("inf")},
        {"n_devices": 1000, "strategy": "mb", "mean_delay_s": 5e-4, "stderr_s": 0.0},
    ]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(a, rows, comments=["seed: 0"])
    write_csv(b, rows, comments=["seed: 0"])
    raw = a.read_bytes()
    assert raw == b.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "# seed: 0"
    assert lines[1] == "n_devices,strategy,mean_delay_s,stderr_s"
    assert lines[2] == "500,aloha,0.30000000000000004,inf"


def test_config_round_trip_through_json(tmp_path):
    data = {"device_count": 2000, "name": "dc", "seeds": 3, "n_values": [500, 1000]}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(data))
    params, sc, run = load_config(path)
    assert params.device_count == 2000 and sc.name == "dc"
    assert run.seeds == 3 and run.n_values == [500, 1000]
