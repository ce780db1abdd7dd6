import copy
import json
import random

import pytest

import gen
import oracles as O
from conftest import SCENARIOS
from ioda import harness
from ioda.errors import ParseError, ValidationError


def fixture(name):
    return json.loads((SCENARIOS / f"{name}.json").read_text())


def run_obj(obj, transport="inproc"):
    return harness.run(harness.from_json(obj), transport)


# -- loading -------------------------------------------------------------------------


def test_malformed_json_reports_line_and_column(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "name": "x",\n  "domains": [,]\n}\n')
    with pytest.raises(ParseError) as info:
        harness.load(bad)
    assert f"{bad}:3:" in str(info.value)


def test_missing_file_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        harness.load(tmp_path / "absent.json")


def test_schema_errors_name_the_field():
    obj = fixture("smart_building")
    obj["gates"][0]["oports"][0]["schema"][0]["type"] = "decimal"
    with pytest.raises(ValidationError) as info:
        harness.from_json(obj)
    assert str(info.value).startswith("gates/0/oports/0/schema/0/type")


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda o: o["circuits"][0]["edges"][0].update({"to": "building/nowhere"}), "circuits/0/edges/0/to"),
        (lambda o: o["workload"][0].update({"gate": "building/nowhere"}), "workload/0/gate"),
        (lambda o: o["workload"][1].update({"at": -1}), "workload/1/at"),
        (lambda o: o["domains"][0]["peers"].append("mars"), "domains/0/peers"),
        (lambda o: o["gates"].append(copy.deepcopy(o["gates"][0])), "gates/"),
    ],
    ids=["undefined-gate", "undefined-workload-gate", "decreasing-at", "undefined-peer", "duplicate-gate"],
)
def test_cross_validation_errors(mutate, where):
    obj = fixture("smart_building")
    mutate(obj)
    with pytest.raises(ValidationError) as info:
        harness.from_json(obj)
    assert str(info.value).startswith(where), str(info.value)


def test_empty_domains_rejected():
    obj = fixture("smart_building")
    obj["domains"] = []
    with pytest.raises(ValidationError):
        harness.from_json(obj)


def test_shipped_schema_matches_package_copy():
    from conftest import ROOT

    assert json.loads((ROOT / "docs" / "scenario.schema.json").read_text()) == harness.scenario_schema()


# -- running ---------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["smart_building", "city_resident"])
def test_fixture_passes_every_expectation(name):
    report = harness.run(harness.load(SCENARIOS / f"{name}.json"))
    assert report.passed, report.failures()
    assert report.audit == {"compliant": True, "violations": []} or report.audit["violations"] == []


def test_auth_mismatch_fails_only_the_tampered_edge():
    report = harness.run(harness.load(SCENARIOS / "auth_mismatch.json"))
    assert not report.passed
    assert report.circuits["home-energy"]["activated"]
    retail = report.circuits["retail"]
    assert retail["verification"]["passed"] and not retail["activated"]
    assert retail["error"]["edge"] == "home/hub/summary->shop/till#feed"
    assert retail["error"]["code"] == "AuthFailed"
    # the untouched circuit still delivered
    assert len(report.views["home/hub/summary"]) == 2
    assert report.views["shop/till/offers"] == []


def test_cyclic_fixture_never_activates():
    report = harness.run(harness.load(SCENARIOS / "cyclic.json"))
    loop = report.circuits["loop"]
    assert not loop["activated"]
    failed = [c["check"] for c in loop["verification"]["checks"] if not c["passed"]]
    assert failed == ["acyclic"]
    assert report.failures() == ["circuit loop: failed checks ['acyclic']"]


def test_runs_are_deterministic():
    config = harness.load(SCENARIOS / "city_resident.json")
    a, b = harness.run(config), harness.run(config)
    assert a.to_json() == b.to_json()


def test_seed_changes_ids_but_not_payloads():
    obj = fixture("smart_building")
    a = run_obj(obj)
    obj["seed"] = "another"
    b = run_obj(obj)
    assert a.passed and b.passed
    assert a.views != b.views
    assert a.steps[4].detail == b.steps[4].detail


def test_failed_step_is_reported_and_run_continues():
    obj = fixture("smart_building")
    obj["workload"].insert(0, {"at": 0, "action": "expect", "oport": "building/energy/plan", "count": 99})
    report = run_obj(obj)
    assert not report.passed
    assert report.failures() == ["step 0 (expect)"]
    assert all(s.ok for s in report.steps[1:])


def test_keep_hands_back_a_live_deployment():
    keep = []
    config = harness.load(SCENARIOS / "smart_building.json")
    report = harness.run(config, keep=keep)
    dep, runner = keep[0]
    try:
        assert dep.digests() == report.digests
        assert set(runner.running) == {"space-analytics"}
    finally:
        runner.close()
        dep.close()


def test_generated_deployments_match_simulator_on_both_transports():
    rng = random.Random(77)
    for i in range(6):
        sc = gen.deployment(rng, f"h{i}", max_gates=5, steps=5)
        sim = O.SimDeployment(sc)
        sim.run(sc["workload"])
        config = harness.from_json(sc)
        inproc, tcp = harness.run(config, "inproc"), harness.run(config, "tcp")
        assert inproc.digests == tcp.digests
        failed = [s.index for s in inproc.steps if s.action == "ingest" and not s.ok]
        assert failed == sim.failed_steps
        for oport, ids in inproc.views.items():
            assert ids == [r["id"] for r in sim.view(oport)]
