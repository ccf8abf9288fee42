import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmpq import cli, harness, wire
from fedmpq.config import ExperimentSpec, parse_pairs
from fedmpq.simulator import ConfigError, compress_fedmpq

from conftest import random_set

TINY = ["--n-clients", "12", "--clients-per-round", "3", "--classes", "3", "--dim", "4", "--hidden", "4",
        "--samples-per-client", "8", "--public-size", "6", "--test-size", "60", "--separation", "3",
        "--M", "2", "--K", "4", "--D", "2", "--kmeans-iters", "5"]


def test_run_example_spec():
    cmd, spec = cli.parse_cli(["run", "--strategy", "fedmpq", "--M", "4", "--K", "32", "--D", "2", "--residual", "0.001"])
    assert cmd == "run" and (spec.strategy, spec.M, spec.K, spec.D, spec.residual) == ("fedmpq", 4, 32, 2, 0.001)


def test_non_power_of_two_k_rejected(capsys):
    with pytest.raises(ConfigError):
        cli.parse_cli(["run", "--K", "7"])
    assert cli.main(["run", "--K", "7"]) == 2
    assert "power of two" in capsys.readouterr().err


def test_sweep_grid():
    cmd, specs = cli.parse_cli(["sweep", "--M", "4,8", "--K", "8,16,32"])
    assert cmd == "sweep" and len(specs) == 6
    assert sorted((s.M, s.K) for s in specs) == [(m, k) for m in (4, 8) for k in (8, 16, 32)]
    with pytest.raises(ConfigError):
        cli.parse_cli(["sweep", "--K", "8,12"])


def test_bad_values_exit_2():
    assert cli.main(["run", "--rounds", "many"]) == 2
    assert cli.main(["run", "--no-such-flag", "1"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_flags_override_config_file(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
    path = tmp_path / "exp.cfg"
    path.write_text("# table row\nM = 8\nK = 16\nresidual = 0.05\nseeds = 0,1,2\n")
    _, spec = cli.parse_cli(["run", "--config", str(path), "--K", "4"])
    assert (spec.M, spec.K, spec.residual, spec.seeds) == (8, 4, 0.05, (0, 1, 2))


def test_unknown_config_key(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("codebooks = 3\n")
    assert cli.main(["run", "--config", str(path)]) == 2
    with pytest.raises(ConfigError):
        parse_pairs("M 4")


def test_env_overrides_output_dir_only(tmp_path, monkeypatch):
    path = tmp_path / "exp.cfg"
    path.write_text("output_dir = from_file\nM = 2\n")
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    _, spec = cli.parse_cli(["run", "--config", str(path)])
    assert spec.output_dir == str(tmp_path / "env") and spec.M == 2
    _, spec = cli.parse_cli(["run", "--output-dir", "flag"])
    assert spec.output_dir == "flag"


spec_values = st.fixed_dictionaries({
    "strategy": st.sampled_from(["fedmpq", "spq", "scalar_quant", "topk_prune", "uncompressed"]),
    "M": st.integers(1, 8),
    "K": st.sampled_from([2, 4, 8, 16, 32]),
    "D": st.integers(1, 4),
    "residual": st.floats(0, 1),
    "gamma": st.floats(0.01, 1),
    "use_public": st.booleans(),
    "seeds": st.lists(st.integers(0, 2**31), min_size=1, max_size=4).map(tuple),
    "alpha": st.floats(0.01, 100),
    "output_dir": st.sampled_from(["runs", "out/a b"]),
})


@given(spec_values)
def test_config_text_round_trip(values):
    spec = ExperimentSpec(**values)
    assert ExperimentSpec.from_text(spec.to_text()) == spec


def test_write_outputs(tmp_path):
    _, spec = cli.parse_cli(["run", *TINY, "--rounds", "2", "--seeds", "0,1", "--target-accuracy", "1.01"])
    res, agg = harness.run_spec(spec)
    out = harness.write_outputs(res, agg, spec, tmp_path)
    again = harness.write_outputs(*harness.run_spec(spec), spec, tmp_path / "b")
    assert (out / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == harness.METRICS_COLUMNS and len(lines) == 5
    summary = json.loads((out / "summary.json").read_text())
    assert summary["aggregate"]["rounds_to_target_mean"] is None
    assert all(s["rounds_to_target"] is None for s in summary["seeds"])
    assert ExperimentSpec.from_text((out / "config.txt").read_text()) == spec


def test_zero_rounds_header_only(tmp_path):
    _, spec = cli.parse_cli(["run", *TINY, "--rounds", "0"])
    out = harness.write_outputs(*harness.run_spec(spec), spec, tmp_path)
    assert (out / "metrics.csv").read_text() == ",".join(harness.METRICS_COLUMNS) + "\n"


def test_unwritable_dir_fails_before_compute(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")
    monkeypatch.setattr(cli, "run_spec", lambda spec: pytest.fail("compute started"))
    assert cli.main(["run", "--output-dir", str(blocker / "sub")]) == 2


def test_run_and_sweep_commands(tmp_path, capsys):
    assert cli.main(["run", *TINY, "--rounds", "2", "--output-dir", str(tmp_path)]) == 0
    assert "wrote" in capsys.readouterr().out
    argv = ["sweep", *TINY, "--rounds", "1", "--M", "1,2", "--residual", "0,0.1", "--output-dir", str(tmp_path)]
    assert cli.main(argv) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 5 and ",inf," in rows[1]


def test_verify_command(capsys):
    assert cli.main(["verify", "--trials", "20"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5


def test_inspect_packet(tmp_path, capsys):
    rng = np.random.default_rng(0)
    schema = [wire.LayerSchema(0, 10, 8, 4), wire.LayerSchema(1, 6, 8, 4)]
    sets = [random_set(rng, 2, 8, 4, i) for i in range(2)]
    packet, _, _ = compress_fedmpq([rng.normal(size=10), rng.normal(size=6)], sets, 0.2, 0.99)
    path = tmp_path / "p.bin"
    path.write_bytes(wire.encode_packet(packet, schema))
    assert cli.main(["inspect-packet", str(path), "--layers", "10,6", "--K", "8", "--D", "4"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert [l["L"] for l in info["layers"]] == [10, 6]
    assert info["layers"][0]["codes"] == packet.layers[0].code.codes.tolist()
    assert len(info["layers"][1]["residual"]) == 2
    assert cli.main(["inspect-packet", str(path), "--layers", "10,7"]) == 3
    assert cli.main(["inspect-packet", str(path), "--layers", "ten"]) == 2
    assert cli.main(["inspect-packet", str(path), "--layers", "10,6", "--K", "7"]) == 2
