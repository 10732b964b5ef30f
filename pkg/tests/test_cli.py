import csv

import numpy as np
import pytest
from click.testing import CliRunner

from dhnet import io
from dhnet.cli import main

NET = str(io.fixture_path("two_consumer.net"))


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, [str(a) for a in args])

    return invoke


def _error_line(result):
    lines = [ln for ln in result.stderr.splitlines() if ln.strip()]
    assert len(lines) == 1, result.stderr
    return lines[0]


def test_validate(run):
    r = run("validate", NET, "--matrices")
    assert r.exit_code == 0, r.output
    assert "pipe order: 1 2 3 4 5 6" in r.stdout
    assert "pipes: 6  nodes: 8  consumers: 2" in r.stdout
    assert "incidence:" in r.stdout and "consumer C2:" in r.stdout


def test_validate_errors(run, tmp_path):
    r = run("validate", tmp_path / "missing.net")
    assert r.exit_code == 1
    assert _error_line(r).startswith("error[ParseError]: ")
    bad = tmp_path / "cycle.net"
    bad.write_text(io.fixture_path("two_consumer.net").read_text().replace("to: J5", "to: J4", 1))
    r = run("validate", bad)
    assert r.exit_code == 1 and _error_line(r).startswith("error[CycleError]: ")


def test_init_writes_snapshot(run, tmp_path):
    r = run("init", NET, "--model", "full", "--order", "2", "--out", "snap.csv")
    assert r.exit_code == 0, r.output
    assert "kkt" in r.stdout and "hidden" in r.stdout
    t, states, names = io.read_result(tmp_path / "snap.csv")
    assert t.tolist() == [0.0] and states.shape == (1, len(names))
    # the snapshot holds no rates, so one iteration restores them
    r = run("init", NET, "--model", "full", "--order", "2", "--guess", "snap.csv")
    assert r.exit_code == 0
    assert int(r.stdout.split("iterations")[1]) <= 1


def test_init_guess_with_wrong_layout(run, tmp_path):
    io.write_result(tmp_path / "g.csv", [0.0], [[1.0, 2.0]], ["a", "b"])
    r = run("init", NET, "--guess", "g.csv")
    assert r.exit_code == 1 and _error_line(r).startswith("error[ParseError]: ")


def test_simulate(run, tmp_path):
    r = run("simulate", NET, "--tf", 900, "--order", 2, "--out", "traj.csv", "--probe", "4:out,2:in,1:3")
    assert r.exit_code == 0, r.output
    t, states, names = io.read_result(tmp_path / "traj.csv")
    assert t[0] == 0.0 and t[-1] == 900.0
    assert len(names) == 6 * 10 + 6 + 18
    td, demand, cons = io.read_result(tmp_path / "traj_demand.csv")
    assert cons == ["c1", "c2"] and np.array_equal(td, t)
    # the demand fulfilment residual stays at solver tolerance relative to the demand
    assert np.abs(demand).max() <= 10 * 1e-4 * 40000.0
    tp, probes, pnames = io.read_result(tmp_path / "traj_probes.csv")
    assert pnames == ["T[4,11]", "T[2,1]", "T[1,3]"]
    col = names.index("T[4,11]")
    np.testing.assert_array_equal(probes[:, 0], states[:, col])


def test_simulate_is_deterministic(run, tmp_path):
    for name in ("a.csv", "b.csv"):
        r = run("simulate", NET, "--tf", 300, "--model", "reduced", "--out", name)
        assert r.exit_code == 0, r.output
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize("probe", ["9:in", "4:12", "4:middle"])
def test_bad_probe(run, probe):
    r = run("simulate", NET, "--tf", 10, "--probe", probe)
    assert r.exit_code == 1 and _error_line(r).startswith("error[UsageError]: ")


def test_simulate_beyond_series(run, tmp_path):
    net = tmp_path / "n.net"
    text = io.fixture_path("two_consumer.net").read_text()
    net.write_text(text.replace("demand: 40000.0", "demand: {times: [0, 100], values: [4.0e4, 4.0e4]}"))
    r = run("simulate", net, "--tf", 200)
    assert r.exit_code == 1 and _error_line(r).startswith("error[OutOfRangeError]: ")


def test_mms(run, tmp_path):
    r = run("mms", "--variant", "index1", "--orders", "1", "--segments", "10,20", "--n-times", 5, "--out", "t.csv")
    assert r.exit_code == 0, r.output
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and rows[0]["observed_order"] == ""
    assert abs(float(rows[1]["observed_order"]) - 1.0) < 0.4


def test_mms_bad_list(run):
    r = run("mms", "--orders", "1,x")
    assert r.exit_code == 1 and _error_line(r).startswith("error[UsageError]: ")


def _trajectory(path, seed):
    rng = np.random.default_rng(seed)
    times = np.sort(np.concatenate([[0.0, 1.0], rng.random(6)]))
    io.write_result(path, times, rng.normal(size=(times.size, 3)), ["a", "b", "c"])


def _norms(output):
    return {k: float(v) for k, v in (ln.split() for ln in output.splitlines() if ln.split()[0] in {"L1", "L2", "Linf"})}


def test_compare(run, tmp_path):
    for i, name in enumerate("xyz"):
        _trajectory(tmp_path / f"{name}.csv", i)
    r = run("compare", "x.csv", "x.csv", "--relative")
    assert r.exit_code == 0
    assert _norms(r.stdout) == {"L1": 0.0, "L2": 0.0, "Linf": 0.0}
    assert "relative_L2 a 0.000000e+00" in r.stdout
    xy, yx = _norms(run("compare", "x.csv", "y.csv").stdout), _norms(run("compare", "y.csv", "x.csv").stdout)
    assert xy == yx
    xz, zy = _norms(run("compare", "x.csv", "z.csv").stdout), _norms(run("compare", "z.csv", "y.csv").stdout)
    assert xy["L2"] <= xz["L2"] + zy["L2"]


def test_compare_mismatch(run, tmp_path):
    _trajectory(tmp_path / "x.csv", 0)
    io.write_result(tmp_path / "w.csv", [0.0, 1.0], np.zeros((2, 2)), ["a", "b"])
    r = run("compare", "x.csv", "w.csv")
    assert r.exit_code == 1 and _error_line(r).startswith("error[ParseError]: ")
