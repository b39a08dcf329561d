"""Scenario engine: movement, handover counting, conservation, determinism."""

from __future__ import annotations

import json

import pytest

from mecflow.envelope import LicenseTag
from mecflow.policy import ConsumerTerms
from mecflow.simharness import (
    ConsumerSpec,
    HostedServiceTrial,
    MecSpec,
    ProducerSpec,
    Scenario,
    ScenarioInvalid,
    ServiceBehavior,
    Waypoint,
    count_handovers,
    export_metrics,
    run_scenario,
    vehicle_position,
)
from mecflow.tilegrid import BoundingBox, GeoPosition

from conftest import HOME

FREE = LicenseTag(True, True)
LAT, LON = HOME.lat, HOME.lon
AROUND_HOME = BoundingBox(LAT - 0.02, LON - 0.02, LAT + 0.02, LON + 0.02)


def static_producer(pid="p1", datatype="cam", rate=10.0, lat=LAT, lon=LON,
                    **kwargs) -> ProducerSpec:
    return ProducerSpec(pid, datatype, rate, 64, kwargs.pop("license", FREE),
                        (Waypoint(lat, lon),), **kwargs)


def scenario(duration_ms=20_000, **kwargs) -> Scenario:
    defaults = dict(
        seed=11,
        duration_ms=duration_ms,
        tick_ms=1000,
        mecs=(MecSpec("m1", LAT, LON),),
    )
    defaults.update(kwargs)
    return Scenario(**defaults)


class TestVehiclePosition:
    leg = ProducerSpec("p", "cam", 1.0, 8, FREE,
                       (Waypoint(0.0, 0.0, speed_mps=100.0), Waypoint(0.0, 0.1)))

    def test_start_at_first_waypoint(self):
        assert vehicle_position(self.leg, 0) == GeoPosition(0.0, 0.0)

    def test_midpoint_is_arithmetic_mean(self):
        # 0.1 degrees of longitude at the equator is ~11132 m; at 100 m/s
        # the leg lasts ~111.32 s
        leg_ms = 11132.0 / 100.0 * 1000.0
        pos = vehicle_position(self.leg, int(leg_ms / 2))
        assert pos.lat == pytest.approx(0.0)
        assert pos.lon == pytest.approx(0.05, abs=1e-4)

    def test_held_at_final_waypoint(self):
        assert vehicle_position(self.leg, 10_000_000) == GeoPosition(0.0, 0.1)

    def test_dwell_then_move(self):
        spec = ProducerSpec("p", "cam", 1.0, 8, FREE,
                            (Waypoint(0.0, 0.0, speed_mps=100.0, dwell_ms=5000),
                             Waypoint(0.0, 0.1)))
        assert vehicle_position(spec, 4999) == GeoPosition(0.0, 0.0)
        moved = vehicle_position(spec, 60_000)
        assert moved.lon > 0.0


class TestHandoverCount:
    def test_static_zero(self):
        assert count_handovers(["m1", "m1", "m1"]) == 0

    def test_single_crossing(self):
        assert count_handovers(["m1", "m1", "m2", "m2"]) == 1

    def test_out_and_back(self):
        assert count_handovers(["m1", "m2", "m1"]) == 2

    def test_includes_loss_and_gain_of_coverage(self):
        assert count_handovers(["m1", None, "m1"]) == 2
        assert count_handovers([]) == 0


class TestValidation:
    def test_tick_must_divide_duration(self):
        with pytest.raises(ScenarioInvalid):
            scenario(duration_ms=1500).validate()

    def test_consumer_window_checked(self):
        bad = scenario(consumers=(ConsumerSpec("c", "cam", "small",
                                               ConsumerTerms(), AROUND_HOME,
                                               5000, 5000),))
        with pytest.raises(ScenarioInvalid):
            bad.validate()

    def test_unknown_tier_checked(self):
        bad = scenario(consumers=(ConsumerSpec("c", "cam", "gold",
                                               ConsumerTerms(), AROUND_HOME,
                                               0, 1000),))
        with pytest.raises(ScenarioInvalid):
            bad.validate()

    def test_trace_speed_required_between_waypoints(self):
        bad = scenario(producers=(ProducerSpec(
            "p", "cam", 1.0, 8, FREE, (Waypoint(0, 0), Waypoint(0, 1))),))
        with pytest.raises(ScenarioInvalid):
            bad.validate()

    def test_hosted_trial_target_checked(self):
        bad = scenario(hosted_services=(HostedServiceTrial(
            "s", ("twin/input",), 10, "img:1", "nope",
            ServiceBehavior(("twin/input",), "twin/input", 10)),))
        with pytest.raises(ScenarioInvalid):
            bad.validate()

    def test_from_json_rejects_garbage(self):
        with pytest.raises(ScenarioInvalid):
            Scenario.from_json("[]")
        with pytest.raises(ScenarioInvalid):
            Scenario.from_json("{nope")
        with pytest.raises(ScenarioInvalid):
            Scenario.from_json(json.dumps({"seed": 1}))


class TestRunBasics:
    def test_no_consumers_everything_discarded(self):
        result = run_scenario(scenario(
            producers=(static_producer(), static_producer("p2", rate=5.0))))
        m = result.metrics
        assert m.ingested > 0
        assert m.accepted == 0
        assert m.rejected == 0
        assert m.discarded_no_demand == m.ingested
        assert m.pipelines_deployed == 0
        assert m.total_compute_mcpu_ms == 0
        assert m.billing == {}

    def test_consumer_window_drives_lifecycle(self):
        result = run_scenario(scenario(
            duration_ms=80_000,
            producers=(static_producer(),),
            consumers=(ConsumerSpec("c1", "cam", "large", ConsumerTerms(),
                                    AROUND_HOME, 10_000, 40_000),)))
        m = result.metrics
        assert m.pipelines_deployed == 1
        assert m.pipelines_reaped == 1
        deploys = [e for e in m.lifecycle_events if e[1] == "deploy"]
        reaps = [e for e in m.lifecycle_events if e[1] == "reap"]
        assert deploys[0][0] == 10_000
        assert reaps[0][0] == 70_000  # stop + 30 s idle grace
        assert m.accepted > 0
        assert m.forwarded_count["c1"] == 300  # 10 Hz x 30 s at rate 1.0

    def test_reuse_single_instance_for_two_consumers(self):
        result = run_scenario(scenario(
            duration_ms=30_000,
            producers=(static_producer(),),
            consumers=(
                ConsumerSpec("c1", "cam", "large", ConsumerTerms(), AROUND_HOME,
                             0, 30_000),
                ConsumerSpec("c2", "cam", "small", ConsumerTerms(), AROUND_HOME,
                             5_000, 30_000),
            )))
        m = result.metrics
        assert m.pipelines_deployed == 1
        assert m.peak_instances == 1
        instances = result.nodes["m1"].lifecycle.instances()
        assert max(i.peak_consumer_refs for i in instances) == 2

    def test_tick_prefix_conservation(self):
        result = run_scenario(scenario(
            duration_ms=30_000,
            producers=(static_producer(),),
            consumers=(ConsumerSpec("c1", "cam", "medium", ConsumerTerms(),
                                    AROUND_HOME, 7_000, 21_000),)))
        m = result.metrics
        assert m.ingested == m.accepted + m.discarded_no_demand + m.rejected
        running = 0
        for row in m.ticks:
            running += row.accepted + row.discarded
            assert row.accepted >= 0 and row.discarded >= 0
        assert running == m.ingested  # no rejects in this scenario

    def test_rejected_counted_per_run(self):
        bad_clock = static_producer("p-skew", unreported_skew_ms=120_000)
        result = run_scenario(scenario(producers=(bad_clock,)))
        m = result.metrics
        assert m.rejected == m.ingested
        assert m.discarded_no_demand == 0

    def test_billing_matches_tap_bytes_exactly(self):
        result = run_scenario(scenario(
            duration_ms=20_000,
            producers=(static_producer(),),
            consumers=(
                ConsumerSpec("c1", "cam", "large", ConsumerTerms(), AROUND_HOME,
                             0, 20_000),
                ConsumerSpec("c2", "cam", "medium", ConsumerTerms(), AROUND_HOME,
                             0, 20_000),
            )))
        m = result.metrics
        for cid in ("c1", "c2"):
            assert m.billing[cid]["bytes"] == m.forwarded_bytes[cid]
        total_meter = m.total_compute_mcpu_ms
        billed = sum(b["compute_mcpu_ms"] for b in m.billing.values())
        assert billed + m.unattributed_compute_mcpu_ms == total_meter

    def test_demand_efficiency_invariant(self):
        # no consumer window at all -> zero compute, demand-driven
        result = run_scenario(scenario(producers=(static_producer(),)))
        assert result.metrics.total_compute_mcpu_ms == 0

    def test_baseline_always_on_burns_compute(self):
        plain = scenario(producers=(static_producer(),))
        demand = run_scenario(plain)
        always_on = run_scenario(plain, baseline=True)
        assert demand.metrics.total_compute_mcpu_ms == 0
        assert always_on.metrics.total_compute_mcpu_ms > 0
        assert always_on.metrics.discarded_no_demand == 0
        assert always_on.metrics.accepted == always_on.metrics.ingested

    def test_local_consumer_billed_from_produced_volume(self):
        result = run_scenario(scenario(
            duration_ms=20_000,
            producers=(static_producer(),),
            consumers=(ConsumerSpec("c-local", "cam", "large", ConsumerTerms(),
                                    AROUND_HOME, 0, 20_000,
                                    destination="local"),)))
        m = result.metrics
        produced = sum(n.produced_bytes.get("cam", 0)
                       for n in result.nodes.values())
        assert m.billing["c-local"]["bytes"] == produced
        assert produced > 0


class TestDeterminism:
    def make(self):
        return scenario(
            duration_ms=30_000,
            producers=(static_producer(), static_producer("p2", rate=3.0)),
            consumers=(ConsumerSpec("c1", "cam", "medium", ConsumerTerms(),
                                    AROUND_HOME, 3_000, 25_000),),
            hosted_services=(HostedServiceTrial(
                "svc", ("twin/input",), 1000, "img:svc", "m1",
                ServiceBehavior(("twin/input",), "twin/input", 1000)),))

    def test_same_seed_same_files(self, tmp_path):
        a = run_scenario(self.make())
        b = run_scenario(self.make())
        export_metrics(a.metrics, tmp_path / "a")
        export_metrics(b.metrics, tmp_path / "b")
        for name in ("summary.json", "ticks.csv"):
            assert (tmp_path / "a" / name).read_bytes() \
                == (tmp_path / "b" / name).read_bytes()

    def test_tick_rows_one_per_tick(self, tmp_path):
        result = run_scenario(scenario(duration_ms=5000))
        files = export_metrics(result.metrics, tmp_path / "out")
        csv_lines = (tmp_path / "out" / "ticks.csv").read_text().splitlines()
        assert csv_lines[0] == "tick,instances,accepted,discarded,forwarded_bytes"
        assert len(csv_lines) == 1 + 5
        assert len(files) == 2

    def test_empty_run_header_only(self, tmp_path):
        from mecflow.simharness import RunMetrics
        export_metrics(RunMetrics(), tmp_path / "empty")
        lines = (tmp_path / "empty" / "ticks.csv").read_text().splitlines()
        assert lines == ["tick,instances,accepted,discarded,forwarded_bytes"]


class TestScenarioJson:
    def test_loads_full_document(self):
        doc = {
            "seed": 3,
            "duration_ms": 10_000,
            "tick_ms": 1000,
            "roi_level": 15,
            "tiers": {"bulk": {"sampling_rate": "0.25", "cpu_millicores": 100,
                               "memory_mb": 64}},
            "mecs": [{"mec_id": "m1", "lat": LAT, "lon": LON,
                      "capacity": {"cpu_millicores": 2000, "memory_mb": 2048,
                                   "gpu_units": 0}}],
            "producers": [{
                "producer_id": "p1", "datatype": "cam", "rate_hz": 2,
                "payload_bytes": 32,
                "license": {"commercial_use": True, "redistribution": True},
                "trace": [{"lat": LAT, "lon": LON}],
            }],
            "consumers": [{
                "consumer_id": "c1", "datatype": "cam", "tier": "bulk",
                "terms": {}, "roi_bbox": [LAT - 0.01, LON - 0.01,
                                          LAT + 0.01, LON + 0.01],
                "start_ms": 0, "stop_ms": 10_000,
            }],
        }
        scn = Scenario.from_obj(doc)
        assert scn.tiers["bulk"].sampling_rate.denominator == 4
        result = run_scenario(scn)
        assert result.metrics.forwarded_count["c1"] == 5  # 20 samples at 1/4
