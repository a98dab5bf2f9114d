import pytest

from metalforge.virtual_time import DelayProfile, Flow, delay, makespan, run_schedule, use


class TestScheduler:
    def test_serial_flow_sums(self):
        flows = [Flow("a", (delay(10.0), use("r", 5.0), delay(1.0)))]
        assert run_schedule(flows, {"r": 1}) == {"a": 16.0}

    def test_capacity_one_serializes(self):
        flows = [Flow(f"f{i}", (use("r", 10.0),)) for i in range(3)]
        done = run_schedule(flows, {"r": 1})
        assert sorted(done.values()) == [10.0, 20.0, 30.0]

    def test_capacity_matches_parallelism(self):
        flows = [Flow(f"f{i}", (use("r", 10.0),)) for i in range(3)]
        assert set(run_schedule(flows, {"r": 3}).values()) == {10.0}

    def test_fifo_by_ready_time(self):
        early = Flow("early", (delay(1.0), use("r", 10.0)))
        late = Flow("late", (delay(2.0), use("r", 10.0)))
        done = run_schedule([late, early], {"r": 1})
        assert done["early"] == 11.0
        assert done["late"] == 21.0

    def test_delays_overlap_resource_use(self):
        # one flow sleeps while the other owns the resource
        flows = [
            Flow("sleeper", (delay(10.0), use("r", 1.0))),
            Flow("worker", (use("r", 10.0),)),
        ]
        done = run_schedule(flows, {"r": 1})
        assert done["worker"] == 10.0
        assert done["sleeper"] == 11.0

    def test_deterministic_across_runs(self):
        flows = [Flow(f"f{i}", (use("a", 3.0), delay(float(i % 5)), use("b", 2.0)))
                 for i in range(40)]
        first = run_schedule(flows, {"a": 4, "b": 2})
        second = run_schedule(flows, {"a": 4, "b": 2})
        assert first == second

    def test_unknown_resource_defaults_to_capacity_one(self):
        flows = [Flow("x", (use("mystery", 2.0),)), Flow("y", (use("mystery", 2.0),))]
        assert makespan(flows, {}) == 4.0

    def test_makespan_empty(self):
        assert makespan([], {}) == 0.0

    def test_bad_step_kind(self):
        with pytest.raises(ValueError):
            run_schedule([Flow("x", (("nap", 1.0),))], {})


class TestDelayProfile:
    def test_transfer_math(self):
        profile = DelayProfile(bandwidth_bytes_per_ms=1000.0, request_ms=0.5)
        assert profile.transfer_ms(5000) == 5.0
        assert profile.io_ms(4, 5000) == 7.0

    def test_boot_ms_composition(self):
        profile = DelayProfile(firmware_ms=100.0, config_fetch_ms=2.0, connect_ms=1.0,
                               request_ms=0.0, bandwidth_bytes_per_ms=1.0)
        assert profile.boot_ms(0, 7) == 110.0

    def test_step_cost_default(self):
        profile = DelayProfile()
        assert profile.step_cost("clone") == 25.0
        assert profile.step_cost("unheard-of-step") == 5.0
