import json

import numpy as np
import pytest

from lineest.errors import CyclicGraph
from lineest.estimators import EstimationProblem, estimate
from lineest.grid_model import LineParams, PerUnitBase
from lineest.io import (
    fingerprint,
    load_topology,
    read_snapshots_csv,
    report_to_dict,
    topology_from_dict,
    topology_to_dict,
    write_snapshots_csv,
)
from lineest.scenario import ScenarioError, bundled_path, load_scenario

TOPO = {"nodes": 3, "slack": 1,
        "lines": [{"id": 7, "from": 1, "to": 2, "r_ohm": 0.16, "x_ohm": 0.08},
                  {"id": 9, "from": 2, "to": 3, "r_ohm": 0.32, "x_ohm": 0.16}]}


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


def test_topology_file_roundtrip(tmp_path):
    tf = load_topology(_write(tmp_path / "t.json", TOPO))
    assert tf.topology.lines == ((0, 1), (1, 2)) and tf.line_ids == (7, 9)
    np.testing.assert_array_equal(tf.datasheet_ohm.r, [0.16, 0.32])
    again = topology_from_dict(topology_to_dict(tf.topology, tf.datasheet_ohm, tf.line_ids))
    assert again.topology.lines == tf.topology.lines and again.topology.slack == tf.topology.slack
    np.testing.assert_array_equal(again.topology.incidence, tf.topology.incidence)
    named = topology_from_dict({**TOPO, "nodes": ["a", "b", "c"]})
    assert named.node_names == ("a", "b", "c")


def test_bad_topology_files():
    with pytest.raises(ValueError):
        topology_from_dict({"nodes": 2, "lines": []})
    loop = {**TOPO, "lines": TOPO["lines"] + [{"from": 1, "to": 3, "r_ohm": 1, "x_ohm": 1}]}
    with pytest.raises(CyclicGraph):
        topology_from_dict(loop)


def test_bundled_district_values():
    sc = load_scenario("district")
    tf = sc.topology_file()
    np.testing.assert_array_equal(tf.datasheet_ohm.r, [0.150, 0.150, 0.4848])
    np.testing.assert_array_equal(tf.datasheet_ohm.x, [0.1414, 0.1414, 0.2882])
    assert sc.base == PerUnitBase(10_000.0, 400.0)
    np.testing.assert_allclose(sc.datasheet().r[0], 0.009375, rtol=1e-15)
    assert bundled_path("district").exists()


def test_truth_perturbation_is_seeded_and_bounded():
    a = load_scenario("district").truth()
    b = load_scenario("district").truth()
    c = load_scenario("district", seed=2).truth()
    ds = load_scenario("district").datasheet()
    np.testing.assert_array_equal(a.r, b.r)
    assert not np.array_equal(a.r, c.r)
    for got, ref in ((a.r, ds.r), (a.x, ds.x)):
        assert np.all(np.abs(got / ref - 1) <= 0.25)


def test_campaign_truth_is_explicit():
    sc = load_scenario("district-campaign")
    ohm = sc.truth().r * sc.base.z_base
    np.testing.assert_allclose(ohm, [0.2509, 0.1944, 0.5970], rtol=1e-14)


def test_scenario_validation(tmp_path):
    topo = _write(tmp_path / "t.json", TOPO)
    base = {"topology": topo.name, "truth": {"perturbation": 0.1}}
    with pytest.raises(ScenarioError):
        load_scenario(_write(tmp_path / "a.json", base))
    both = {**base, "schedule": {"kind": "two_instance", "p_w": 1, "q_var": 1}, "measurements": "m.csv"}
    with pytest.raises(ScenarioError):
        load_scenario(_write(tmp_path / "b.json", both))
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "bad.json")
    odd = {**base, "schedule": {"kind": "spiral"}}
    with pytest.raises(ScenarioError):
        load_scenario(_write(tmp_path / "c.json", odd)).schedule()
    nofile = {**base, "topology": "nope.json", "schedule": {"kind": "two_instance", "p_w": 1, "q_var": 1}}
    with pytest.raises(ScenarioError):
        load_scenario(_write(tmp_path / "d.json", nofile))


def test_explicit_schedule_and_measurements(tmp_path):
    topo = _write(tmp_path / "t.json", TOPO)
    sc = load_scenario(_write(tmp_path / "s.json", {
        "topology": topo.name, "truth": {"perturbation": 0.0},
        "schedule": {"kind": "explicit", "entries": [
            {"t": "a", "p_w": [0, 1000, -500], "q_var": [0, 200, 100]},
            {"t": "b", "p_w": [0, -800, 300], "q_var": [0, -100, 400]}]}}))
    snaps = sc.snapshots()
    assert [s.t for s in snaps] == ["a", "b"]
    write_snapshots_csv(tmp_path / "m.csv", snaps, sc.base)
    measured = load_scenario(_write(tmp_path / "m.json", {"topology": topo.name, "measurements": "m.csv"}))
    again = measured.snapshots()
    assert fingerprint(again) == fingerprint(read_snapshots_csv(tmp_path / "m.csv", sc.base, 3))
    np.testing.assert_array_equal(again[1].vmag * sc.base.v_base, snaps[1].vmag * sc.base.v_base)


def test_snapshot_csv_errors(tmp_path):
    base = PerUnitBase(10_000.0, 400.0)
    (tmp_path / "a.csv").write_text("t,node,p_w\n")
    with pytest.raises(ValueError):
        read_snapshots_csv(tmp_path / "a.csv", base, 2)
    (tmp_path / "b.csv").write_text("t,node,p_w,q_var,vmag_v,theta_rad\nt1,1,0,0,400,\n")
    with pytest.raises(ValueError):
        read_snapshots_csv(tmp_path / "b.csv", base, 2)
    (tmp_path / "c.csv").write_text("t,node,p_w,q_var,vmag_v,theta_rad\nt1,1,0,0,400,0\nt1,2,0,0,400,\n")
    with pytest.raises(ValueError):
        read_snapshots_csv(tmp_path / "c.csv", base, 2)


def test_report_dict():
    sc = load_scenario("district")
    snaps = sc.snapshots()
    rep = estimate(EstimationProblem(sc.topology, snaps, sc.datasheet()), "nr-rms")
    d = report_to_dict(rep, sc.base, snaps, (1, 2, 3), "x")
    assert d["status"] == "converged" and len(d["trace"]) == rep.iterations
    np.testing.assert_allclose(d["params"]["ohm"]["r"], rep.params.r * 16.0, rtol=1e-15)
    assert d["input_fingerprint"] == fingerprint(snaps) and len(d["input_fingerprint"]) == 64
    assert d["config"]["regime"] == "rms"
    json.dumps(d)
    other = [type(s)(s.t, s.p, s.q, s.vmag * (1 + 1e-12)) for s in snaps]
    assert fingerprint(other) != fingerprint(snaps)


def test_line_params_helpers():
    p = LineParams([1.0, 2.0], [3.0, 4.0])
    np.testing.assert_array_equal(p.as_vector(), [1, 2, 3, 4])
    back = LineParams.from_vector(p.as_vector())
    np.testing.assert_array_equal(back.r, p.r)
    np.testing.assert_array_equal(back.x, p.x)
    np.testing.assert_array_equal(p.scaled(2.0).r, [2.0, 4.0])
