"""Smoke test for the `telecare` Python extension.

Build and install the extension into the active virtualenv first:

    cd crates/py && maturin develop

then run `python python/smoke_test.py`. Exits non-zero on the first failure.
"""

import json
import tempfile
import urllib.request

import telecare


def check_classification():
    assert telecare.default_bounds("HeartRate") == (50, 100, "bpm")
    assert telecare.classify("HeartRate", 50) == "Normal"
    assert telecare.classify("HeartRate", 100) == "Normal"
    assert telecare.classify("HeartRate", 49) == "BelowLow"
    assert telecare.classify("SystolicBP", 161) == "AboveHigh"
    assert telecare.classify("SystolicBP", 161, low=100, high=170) == "Normal"
    for bad in (lambda: telecare.classify("HeartRate", -1), lambda: telecare.classify("Glucose", 5)):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("invalid input accepted")


def check_metrics():
    assert telecare.reliability_score(6, 48.0) == 0.875
    assert telecare.availability(2870, 10) == 99.65
    report = telecare.reliability_report()
    assert report["overall"]["failures"] == 6
    assert report["overall"]["availability_percent"] == 99.65
    assert report["discrepancies"], "bundled reference should disagree on MTBF/MTTR"
    survey = telecare.survey_report()
    assert any("Q8" in d for d in survey["discrepancies"]), survey["discrepancies"]


def check_trace():
    a = telecare.simulate_trace("P-000001", seed=7, ticks=10)
    b = telecare.simulate_trace("P-000001", seed=7, ticks=10)
    assert a == b and len(a) == 30
    episode = [{"kind": "SystolicBP", "start_tick": 2, "end_tick": 4, "low": 165, "high": 170}]
    high = telecare.simulate_trace("P-000001", seed=7, ticks=10, episodes=episode)
    sys_values = [r["value"] for r in high if r["kind"] == "SystolicBP"]
    assert all(165 <= v <= 170 for v in sys_values[2:5]), sys_values


def check_gateway():
    with tempfile.TemporaryDirectory() as data_dir:
        gw = telecare.Gateway(data_dir)
        admin = gw.login("A-000001", "admin-secret")
        expert_id, expert_secret = gw.register(admin, "MedicalExpert", "Dr. Example")
        patient_id, patient_secret = gw.register(
            admin, "Patient", "Pat Example", date_of_birth="1950-01-01", assigned_staff=[expert_id]
        )
        patient = gw.login(patient_id, patient_secret)
        expert = gw.login(expert_id, expert_secret)

        result = gw.ingest(patient, patient_id, "cuff-1", [("SystolicBP", 120), ("SystolicBP", 172)])
        assert result["accepted"] == 2, result
        gw.advance(60)
        again = gw.ingest(patient, patient_id, "cuff-1", [("SystolicBP", 120)])
        assert again["duplicates"] == 1, again
        assert gw.wait_notifications(5.0)

        statuses = [r["status"] for r in gw.vitals(expert, patient_id)]
        assert statuses == ["Normal", "AboveHigh"], statuses
        alerts = gw.alerts(expert)
        assert len(alerts) == 1 and alerts[0]["patient_id"] == patient_id, alerts
        gw.acknowledge(expert, alerts[0]["id"])

        view = gw.update_thresholds(expert, patient_id, {"SystolicBP": (100, 180)})
        assert view["version"] == 1, view
        try:
            gw.update_thresholds(patient, patient_id, {"SystolicBP": (100, 180)})
        except telecare.GatewayError as e:
            assert e.args[0] == "forbidden", e.args
        else:
            raise AssertionError("patient changed thresholds")

        server = gw.serve()
        with urllib.request.urlopen(server.url + "/api/health", timeout=5) as resp:
            assert json.load(resp)["status"] == "ok"
        server.stop()

        gw.set_down(True)
        try:
            gw.login(patient_id, patient_secret)
        except telecare.GatewayError as e:
            assert e.args[0] == "unavailable", e.args
        else:
            raise AssertionError("login succeeded while down")
        gw.shutdown()


def main():
    for check in (check_classification, check_metrics, check_trace, check_gateway):
        check()
        print(f"ok  {check.__name__}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
