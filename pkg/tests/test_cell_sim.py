import csv
import math
import time

import pytest

from behavior_tree import Blackboard, NodeStatus, TickRecord
from cell_sim import (
    CellState,
    ScenarioError,
    ThreadedPublisher,
    Waypoint,
    check_invariance,
    human_position,
    human_velocity,
    load_safety_config,
    load_scenario,
    run_scenario,
    step_plant,
    summarize,
    write_summary,
    write_trace,
)
from safety_nodes import instantiate_condition, load_spec
from tools.cbf import RelativeDegreeError

LABELS = ["battery_ok", "human_far", "human_safe", "speed_ok"]


@pytest.fixture
def crossing(scenarios_dir):
    return load_scenario(scenarios_dir / "human_crossing.json")


@pytest.fixture
def task_tree(scenarios_dir):
    return (scenarios_dir / "task_tree.json").read_bytes()


@pytest.fixture
def hostile_tree(scenarios_dir):
    return (scenarios_dir / "hostile_tree.json").read_bytes()


@pytest.fixture
def crossing_trace(crossing, task_tree):
    return run_scenario(crossing, task_tree)


# --- plant and human ---


def test_euler_step():
    state = step_plant(CellState(robot=(0.0, 0.0)), (1.0, 0.0), 0.1)
    assert state.robot == pytest.approx((0.1, 0.0))
    assert state.time == pytest.approx(0.1)


def test_battery_drains_and_clamps():
    assert step_plant(CellState(robot=(0.0, 0.0), battery=1.0), (0.0, 0.0), 0.1, drain=0.01).battery == pytest.approx(0.999)
    assert step_plant(CellState(robot=(0.0, 0.0), battery=0.0005), (0.0, 0.0), 0.1, drain=0.01).battery == 0.0


def test_step_needs_positive_dt():
    with pytest.raises(ScenarioError):
        step_plant(CellState(robot=(0.0, 0.0)), (0.0, 0.0), 0.0)


def test_human_walks_piecewise_linearly():
    path = [Waypoint(position=(0.0, 0.0)), Waypoint(position=(10.0, 0.0), speed=1.0)]
    assert human_position(path, 3.0) == pytest.approx((3.0, 0.0))
    assert human_position(path, 25.0) == (10.0, 0.0)
    assert human_velocity(path, 3.0) == pytest.approx((1.0, 0.0))
    assert human_velocity(path, 25.0) == (0.0, 0.0)


def test_single_waypoint_holds():
    assert human_position([Waypoint(position=(2.0, -1.0))], 42.0) == (2.0, -1.0)


def test_zero_speed_segment_never_starts():
    path = [Waypoint(position=(0.0, 0.0)), Waypoint(position=(5.0, 0.0), speed=0.0)]
    assert human_position(path, 100.0) == (0.0, 0.0)


def test_multi_segment_path():
    path = [
        Waypoint(position=(0.0, 0.0)),
        Waypoint(position=(2.0, 0.0), speed=1.0),
        Waypoint(position=(2.0, 4.0), speed=2.0),
    ]
    assert human_position(path, 3.0) == pytest.approx((2.0, 2.0))


# --- scenario documents ---


@pytest.mark.parametrize(
    "patch, fragment",
    [
        ({"rate": 0}, "rate"),
        ({"duration": -1}, "duration"),
        ({"human_waypoints": []}, "human_waypoints"),
        ({"human_waypoints": [{"position": [0, 0], "speed": -1}]}, "speed"),
        ({"initial": {"robot": [0, 0], "battery": 1.5}}, "battery"),
    ],
)
def test_invalid_scenarios(crossing, patch, fragment):
    document = {**crossing.model_dump(mode="json"), **patch}
    with pytest.raises(ScenarioError, match="Invalid Scenario") as err:
        load_scenario(document)
    assert fragment in str(err.value)


def test_channel_map_is_completed_with_defaults(crossing):
    scenario = load_scenario({**crossing.model_dump(mode="json"), "channels": {"battery": "bms/soc"}})
    assert scenario.channels["battery"] == "bms/soc"
    assert scenario.channels["robot_position"] == "robot/pos"


def test_standalone_safety_config_matches_embedded(crossing, scenarios_dir):
    assert load_safety_config(scenarios_dir / "safety.json") == crossing.safety


# --- runs ---


def test_human_crossing_flips_condition_and_retreats_on_the_same_tick(crossing_trace):
    lines = crossing_trace.lines
    statuses = [line["statuses"].get("human_far") for line in lines]
    flip = next(k for k in range(1, len(lines)) if statuses[k - 1] == "Success" and statuses[k] == "Failure")
    assert "retreat" in lines[flip]["statuses"]
    assert not any("retreat" in line["statuses"] for line in lines[:flip])
    assert 3.3 < lines[flip]["time"] < 3.9

    def h(line):
        (rx, ry), (hx, hy) = line["robot"], line["human"]
        return (rx - hx) ** 2 + (ry - hy) ** 2 - 1.5**2

    assert h(lines[flip]) < 0 <= h(lines[flip - 1])
    for line in lines[flip - 1 : flip + 1]:
        assert line["barriers"]["human_far"] == pytest.approx(h(line), abs=1e-9)


def test_trace_is_complete(crossing_trace, crossing):
    assert len(crossing_trace.lines) == crossing.tick_count == 2000
    assert crossing_trace.barrier_labels == LABELS
    for k, line in enumerate(crossing_trace.lines):
        assert line["tick"] == k
        assert sorted(line["barriers"]) == LABELS


def test_channels_are_never_stale_during_a_run(crossing_trace):
    for line in crossing_trace.lines:
        assert not any("stale" in message for message in line["errors"].values())


def test_robot_keeps_its_distance(crossing_trace):
    assert min(v for v in crossing_trace.barrier_values("human_safe") if v is not None) >= -1e-3


def test_runs_are_deterministic(crossing, task_tree):
    short = crossing.model_copy(update={"duration": 5.0, "human_noise_std": 0.05})
    first = run_scenario(short, task_tree).to_jsonl()
    assert run_scenario(short, task_tree).to_jsonl() == first
    assert run_scenario(short.model_copy(update={"seed": 8}), task_tree).to_jsonl() != first


def test_unfiltered_hostile_controller_violates_the_barrier(crossing, hostile_tree):
    trace = run_scenario(crossing, hostile_tree, filter_enabled=False)
    assert min(v for v in trace.barrier_values("human_safe") if v is not None) < 0


def test_filter_keeps_the_hostile_controller_safe(crossing, hostile_tree):
    scenario = crossing.model_copy(update={"duration": 30.0})
    trace = run_scenario(scenario, hostile_tree)
    assert len(trace.lines) == 3000
    values = trace.barrier_values("human_safe")
    assert None not in values
    assert min(values) >= -1e-3


def test_malformed_tree_names_the_node(crossing):
    tree = b'{"kind": "Sequence", "name": "root", "params": {}, "children": [{"kind": "Fallback", "name": "empty", "params": {}, "children": []}]}'
    with pytest.raises(ScenarioError, match="root/empty"):
        run_scenario(crossing, tree)


def test_unconfigured_barrier_is_a_build_error(crossing):
    tree = {"kind": "Condition", "name": "mystery", "params": {"type": "barrier"}, "children": []}
    with pytest.raises(ScenarioError, match="mystery"):
        run_scenario(crossing, tree)


def test_unknown_filtered_action_type(crossing, task_tree):
    safety = crossing.safety.model_copy(update={"filtered_actions": ["teleport"]})
    with pytest.raises(ScenarioError, match="teleport"):
        run_scenario(crossing, task_tree, safety=safety)


def test_tick_budget_is_enforced(crossing, task_tree):
    with pytest.raises(ScenarioError, match="ticks"):
        run_scenario(crossing.model_copy(update={"rate": 1e6, "duration": 1e2}), task_tree)


# --- outputs ---


def test_trace_file_is_one_record_per_line(crossing, task_tree, tmp_path):
    trace = run_scenario(crossing.model_copy(update={"duration": 1.0}), task_tree)
    path = tmp_path / "trace.jsonl"
    write_trace(trace, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 100
    assert lines[0].startswith('{"tick":0,')


def test_summary_table(crossing_trace, tmp_path):
    rows = summarize(crossing_trace)
    assert [row.label for row in rows] == LABELS + ["u_safe-u_nom"]
    far = rows[1]
    values = [v for v in crossing_trace.barrier_values("human_far") if v is not None]
    assert far.minimum == min(values)
    assert far.missing == 0
    path = tmp_path / "summary.csv"
    write_summary(rows, path)
    with open(path, newline="") as f:
        table = list(csv.reader(f))
    assert table[0] == ["kind", "label", "min", "mean", "max", "missing"]
    assert len(table) == len(rows) + 1


# --- threaded publishing ---


def test_paused_publisher_makes_the_condition_stale():
    spec = load_spec(
        {
            "name": "range_ok",
            "version": "1.0.0",
            "state_dim": 1,
            "expression": "x[0] - 1",
            "channel_bindings": [{"index": 0, "channel": "range", "component": 0}],
        }
    )
    condition = instantiate_condition(spec, channels={"range": "lidar/range"})
    bb = Blackboard(clock=time.monotonic)

    def tick():
        return condition.tick(bb, TickRecord(tick=0, time=bb.now))

    with ThreadedPublisher(bb, "lidar/range", lambda: [2.0], period=0.01) as publisher:
        time.sleep(0.1)
        assert tick() == NodeStatus.SUCCESS
        publisher.pause()
        time.sleep(0.5)
        assert tick() == NodeStatus.FAILURE
        publisher.resume()
        time.sleep(0.1)
        assert tick() == NodeStatus.SUCCESS


def test_publisher_period_must_be_positive():
    with pytest.raises(ScenarioError):
        ThreadedPublisher(Blackboard(), "x", lambda: [0.0], period=0.0)


# --- forward invariance ---


def test_filter_renders_human_distance_invariant(specs):
    report = check_invariance(specs["human_distance"], "planar_cell", trials=5, duration=20.0, seed=1)
    assert report.ok
    assert report.min_h >= -1e-3


def test_hostile_controller_breaks_invariance_without_filter(specs):
    report = check_invariance(
        specs["human_distance"], "planar_cell", trials=5, duration=20.0, seed=1, filter_enabled=False
    )
    assert report.violations == 5
    assert not report.ok


def test_invariance_on_a_single_integrator(specs):
    report = check_invariance(specs["battery_min"], "single_integrator", trials=3, duration=5.0)
    assert report.ok
    assert report.plant == "single_integrator"
    assert report.to_dict()["trials"][0]["trial"] == 0


def test_constant_barrier_cannot_be_made_invariant():
    spec = load_spec(
        {
            "name": "constant",
            "version": "1.0.0",
            "state_dim": 1,
            "expression": "p.c",
            "param_schema": [{"name": "c", "default": 1.0, "min": 0.0, "max": 2.0}],
        }
    )
    with pytest.raises(RelativeDegreeError):
        check_invariance(spec, "single_integrator", trials=1, duration=1.0)


def test_plant_dimension_must_match(specs):
    with pytest.raises(ScenarioError, match="state dimension"):
        check_invariance(specs["battery_min"], "planar_cell", trials=1, duration=1.0)


@pytest.mark.slow
def test_forward_invariance_acceptance(specs):
    report = check_invariance(specs["human_distance"], "planar_cell", trials=100, duration=30.0, rate=100.0)
    assert report.violations == 0
    assert report.min_h >= -1e-3
    assert math.isfinite(report.min_h)

    unfiltered = check_invariance(
        specs["human_distance"], "planar_cell", trials=100, duration=30.0, rate=100.0, filter_enabled=False
    )
    assert unfiltered.violations >= 95
