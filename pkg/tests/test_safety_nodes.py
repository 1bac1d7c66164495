import json
import logging

import numpy as np
import pytest

from behavior_tree import (
    Blackboard,
    Leaf,
    NodeKind,
    NodeStatus,
    TickRecord,
    TreeBuildError,
    TreeNode,
    build_tree,
    dump_tree,
    tick_tree,
)
from safety_nodes import (
    COMMAND_CHANNEL,
    ControlAction,
    SafetyNodeError,
    SpecCatalog,
    SpecValidationError,
    attach_safety_branch,
    condition_node,
    detach_safety_branch,
    filtered_action,
    instantiate_condition,
    load_spec,
    make_safety_branch,
    semver_key,
    validate_spec,
)
from tools.cbf import RelativeDegreeError, cbf_constraint, planar_cell

S, F, R = NodeStatus.SUCCESS, NodeStatus.FAILURE, NodeStatus.RUNNING
CELL_CHANNELS = {"robot_position": "robot/pos", "human_position": "human/pos"}


def spec_document(name, expression, state_dim, bindings, params=(), tags=(), **extra):
    return {
        "name": name,
        "version": "1.0.0",
        "state_dim": state_dim,
        "expression": expression,
        "param_schema": [{"name": p, "default": d, "min": lo, "max": hi} for p, d, lo, hi in params],
        "channel_bindings": [{"index": i, "channel": slot, "component": c} for i, slot, c in bindings],
        "tags": list(tags),
        **extra,
    }


def robot_x_spec(name, expression):
    return load_spec(spec_document(name, expression, 4, [(0, "robot_position", 0)]))


def cell(bb, robot, human, t=None):
    if t is not None:
        bb.set_time(t)
    bb.publish("robot/pos", robot)
    bb.publish("human/pos", human)


def human_far(specs, dmin=1.0, label="human_far"):
    return instantiate_condition(specs["human_distance"], {"dmin": dmin}, CELL_CHANNELS, label=label)


def record():
    return TickRecord(tick=0, time=0.0)


class Recorder(Leaf):
    def __init__(self, status=R):
        self.status = status
        self.ticks = 0

    def tick(self, blackboard, record):
        self.ticks += 1
        return self.status


class Constant(ControlAction):
    def __init__(self, u, status=R):
        self.u = np.asarray(u, dtype=float)
        self.status = status
        self.halts = 0

    def propose(self, blackboard):
        return self.status, self.u

    def halt(self):
        self.halts += 1


def action_node(name, leaf):
    return TreeNode(kind=NodeKind.ACTION, name=name, leaf=leaf)


# --- spec validation ---


def test_shipped_specs_validate(specs):
    assert sorted(specs) == ["battery_min", "human_distance", "speed_limit"]
    for spec in specs.values():
        assert validate_spec(spec) == []


def test_expression_beyond_state_dimension(specs):
    document = json.loads(specs["human_distance"].to_document())
    document["state_dim"] = 2
    errors = validate_spec(document)
    assert "expression: x[3] is out of range for state dimension 2" in errors


def test_default_outside_range(specs):
    document = json.loads(specs["human_distance"].to_document())
    document["param_schema"][0]["default"] = -1.0
    assert validate_spec(document) == ["param_schema: default dmin=-1.0 outside [0.0, 10.0]"]


def test_schema_errors_name_the_field():
    document = spec_document("bad", "x[0]", 1, [(0, "slot", 0)])
    document["bogus"] = 1
    errors = validate_spec(document)
    assert any(error.startswith("bogus:") for error in errors)


@pytest.mark.parametrize(
    "patch, fragment",
    [
        ({"version": "1.0"}, "semantic version"),
        ({"name": "has space"}, "identifier"),
        ({"alpha_gain": 0.0}, "alpha_gain"),
        ({"staleness_timeout": 0.0}, "staleness_timeout"),
        ({"expression": "x[0] +"}, "expression:"),
        ({"expression": "x[0] - p.undeclared"}, "not declared"),
        ({"expression": "x[0] + x[1]", "state_dim": 2}, "x[1] is used by the expression but has no binding"),
        ({"tags": ["monitor-only", "input-constraint"]}, "exclusive"),
    ],
)
def test_spec_invariants(patch, fragment):
    document = {**spec_document("sample", "x[0]", 1, [(0, "slot", 0)]), **patch}
    assert any(fragment in error for error in validate_spec(document))


def test_load_spec_raises_with_all_errors():
    document = spec_document("sample", "x[5]", 1, [(3, "slot", -1)])
    with pytest.raises(SpecValidationError) as err:
        load_spec(document)
    assert len(err.value.errors) >= 3
    assert "sample@1.0.0" in str(err.value)


def test_document_has_canonical_field_order(specs):
    spec = specs["human_distance"]
    text = spec.to_document()
    assert list(json.loads(text)) == [
        "name",
        "version",
        "description",
        "state_dim",
        "expression",
        "param_schema",
        "channel_bindings",
        "alpha_gain",
        "margin",
        "staleness_timeout",
        "tags",
    ]
    assert load_spec(text) == spec


def test_load_spec_from_path(spec_path, specs):
    assert load_spec(spec_path("battery_min")) == specs["battery_min"]


# --- catalog ---


def test_catalog_resolves_latest_release(specs):
    catalog = SpecCatalog.with_builtins()
    document = json.loads(specs["human_distance"].to_document())
    for version in ["1.1.0", "1.1.0-rc.1"]:
        catalog.add(load_spec({**document, "version": version}))
    assert catalog.resolve("human_distance").version == "1.1.0"
    assert catalog.resolve("human_distance@1.1.0-rc.1").version == "1.1.0-rc.1"
    assert catalog.names() == ["battery_min", "human_distance", "speed_limit"]


@pytest.mark.parametrize("ref", ["nope", "human_distance@9.9.9"])
def test_catalog_unknown_reference(ref):
    with pytest.raises(SafetyNodeError, match="Unknown barrier spec"):
        SpecCatalog.with_builtins().resolve(ref)


def test_semver_precedence():
    versions = ["1.10.0", "1.0.0", "1.0.0-rc.1", "0.9.10", "1.2.0", "1.0.0-alpha", "1.0.0-rc.2"]
    assert sorted(versions, key=semver_key) == [
        "0.9.10",
        "1.0.0-alpha",
        "1.0.0-rc.1",
        "1.0.0-rc.2",
        "1.0.0",
        "1.2.0",
        "1.10.0",
    ]


# --- condition instances ---


def test_condition_holds_when_human_is_far(specs, blackboard):
    condition = human_far(specs)
    cell(blackboard, [0.0, 0.0], [3.0, 4.0])
    rec = record()
    assert condition.tick(blackboard, rec) == S
    assert rec.barriers["human_far"] == 24.0


def test_condition_fails_when_human_is_close(specs, blackboard):
    condition = human_far(specs)
    cell(blackboard, [0.0, 0.0], [0.5, 0.0])
    rec = record()
    assert condition.tick(blackboard, rec) == F
    assert rec.barriers["human_far"] == pytest.approx(-0.75)


def test_stale_channel_fails(specs, blackboard):
    condition = human_far(specs)
    blackboard.publish("human/pos", [3.0, 4.0])
    blackboard.set_time(0.5)
    blackboard.publish("robot/pos", [0.0, 0.0])
    rec = record()
    assert condition.tick(blackboard, rec) == F
    assert rec.barriers["human_far"] is None
    assert "stale" in rec.errors["human_far"]


def test_absent_channel_fails(specs, blackboard):
    blackboard.publish("robot/pos", [0.0, 0.0])
    rec = record()
    assert human_far(specs).tick(blackboard, rec) == F
    assert "absent" in rec.errors["human_far"]


def test_missing_component_fails(specs, blackboard):
    cell(blackboard, [0.0, 0.0], [3.0])
    assert human_far(specs).tick(blackboard, record()) == F


def test_domain_error_fails(blackboard):
    spec = load_spec(spec_document("root_gap", "sqrt(x[0]) - p.c", 1, [(0, "gap", 0)], params=[("c", 0.0, 0.0, 1.0)]))
    condition = instantiate_condition(spec, channels={"gap": "gap"})
    blackboard.publish("gap", [-1.0])
    rec = record()
    assert condition.tick(blackboard, rec) == F
    assert "domain error" in rec.errors["root_gap"]


@pytest.mark.parametrize("fresh", [True, False])
@pytest.mark.parametrize("present", [True, False])
@pytest.mark.parametrize("distance", [0.5, 1.0, 3.0])
@pytest.mark.parametrize("margin", [0.0, 1.0])
def test_condition_soundness(fresh, present, distance, margin):
    spec = load_spec(
        spec_document(
            "gap",
            "x[0] - p.d",
            1,
            [(0, "distance", 0)],
            params=[("d", 1.0, 0.0, 5.0)],
            margin=margin,
        )
    )
    condition = instantiate_condition(spec, channels={"distance": "range"})
    bb = Blackboard()
    if present:
        bb.publish("range", [distance])
    bb.set_time(0.1 if fresh else 1.0)
    status = condition.tick(bb, record())
    expected = S if fresh and present and distance - 1.0 >= margin else F
    assert status == expected


def test_flips_are_logged(specs, blackboard, caplog):
    caplog.set_level(logging.INFO, logger="safety_nodes")
    condition = human_far(specs)
    cell(blackboard, [0.0, 0.0], [3.0, 4.0], t=0.0)
    condition.tick(blackboard, record())
    condition.tick(blackboard, record())
    cell(blackboard, [0.0, 0.0], [0.5, 0.0], t=0.01)
    condition.tick(blackboard, record())
    flips = [r.getMessage() for r in caplog.records if "human_far" in r.getMessage()]
    assert len(flips) == 2
    assert flips[-1].startswith("Condition human_far (human_distance@1.0.0) -> Failure")


def test_instantiation_uses_schema_defaults(specs):
    condition = instantiate_condition(specs["human_distance"], channels=CELL_CHANNELS)
    assert condition.params == {"dmin": 1.0}
    assert condition.label == "human_distance"
    assert [b[1] for b in condition.bindings] == ["robot/pos", "robot/pos", "human/pos", "human/pos"]


@pytest.mark.parametrize(
    "params, channels, fragment",
    [
        ({"speed": 1.0}, CELL_CHANNELS, "unknown parameter 'speed'"),
        ({"dmin": 20.0}, CELL_CHANNELS, "outside [0.0, 10.0]"),
        ({}, {"robot_position": "robot/pos"}, "'human_position' is not bound"),
    ],
)
def test_instantiation_errors(specs, params, channels, fragment):
    with pytest.raises(SafetyNodeError, match="Cannot instantiate") as err:
        instantiate_condition(specs["human_distance"], params, channels)
    assert fragment in str(err.value)


# --- safety branches ---


def test_branch_runs_evasive_action_when_a_condition_fails(specs, blackboard):
    retreat = Recorder(R)
    branch = make_safety_branch([human_far(specs)], action_node("retreat", retreat))
    cell(blackboard, [0.0, 0.0], [0.5, 0.0])
    status, rec = tick_tree(branch, blackboard)
    assert status == R
    order = list(rec.statuses)
    assert rec.statuses["human_far"] == F
    assert order.index("human_far") < order.index("retreat")
    assert retreat.ticks == 1


def test_branch_skips_evasive_action_while_conditions_hold(specs, blackboard):
    battery_ok = instantiate_condition(specs["battery_min"], {"bmin": 0.2}, {"battery": "robot/battery"}, "battery_ok")
    retreat = Recorder(R)
    branch = make_safety_branch([human_far(specs), battery_ok], action_node("retreat", retreat))
    cell(blackboard, [0.0, 0.0], [3.0, 4.0])
    blackboard.publish("robot/battery", [0.9])
    status, rec = tick_tree(branch, blackboard)
    assert status == S
    assert "retreat" not in rec.statuses
    assert retreat.ticks == 0


def test_branch_needs_a_condition():
    with pytest.raises(SafetyNodeError):
        make_safety_branch([], action_node("retreat", Recorder()))


def test_branch_rejects_duplicate_condition_labels(specs):
    with pytest.raises(SafetyNodeError, match="duplicate node names: human_far"):
        make_safety_branch([human_far(specs), human_far(specs)], action_node("retreat", Recorder()))


def test_branch_rejects_an_evasive_action_named_like_a_condition(specs):
    with pytest.raises(SafetyNodeError, match="human_far"):
        make_safety_branch([human_far(specs)], action_node("human_far", Recorder()))


def test_control_action_must_propose():
    class Silent(ControlAction):
        pass

    with pytest.raises(TypeError):
        Silent()


def test_attach_then_detach_leaves_task_untouched(specs, scenarios_dir):
    task = build_tree((scenarios_dir / "task_tree.json").read_bytes())
    before = dump_tree(task)
    guard = condition_node(human_far(specs, label="shadow_human"))
    branch = make_safety_branch([guard], action_node("shadow_stop", Recorder()), name="shadow_guard")
    root = attach_safety_branch(task, branch)
    assert root.params == {"safety_branch": "shadow_guard"}
    assert build_tree(dump_tree(root)).children[1] == build_tree(before)
    assert dump_tree(detach_safety_branch(root)) == before


def test_attach_rejects_name_clashes(specs, scenarios_dir):
    task = build_tree((scenarios_dir / "task_tree.json").read_bytes())
    branch = make_safety_branch([human_far(specs)], action_node("shadow_stop", Recorder()))
    with pytest.raises(TreeBuildError, match="human_far"):
        attach_safety_branch(task, branch)


def test_detach_requires_an_attached_root(scenarios_dir):
    task = build_tree((scenarios_dir / "task_tree.json").read_bytes())
    with pytest.raises(SafetyNodeError):
        detach_safety_branch(task)


# --- filtered actions ---


def test_filter_deflects_a_command_aimed_at_the_human(specs, blackboard):
    guard = human_far(specs)
    action = filtered_action(Constant([1.0, 0.0]), [guard], planar_cell(), blackboard=None)
    cell(blackboard, [0.0, 0.0], [1.5, 0.0])
    rec = record()
    assert action.tick(blackboard, rec) == R
    published = np.array(blackboard.read(COMMAND_CHANNEL).value)
    np.testing.assert_allclose(published, [2.5 / 3.0, 0.0])
    assert rec.u_nom == [1.0, 0.0]
    assert rec.u_safe == pytest.approx(list(published))
    x = [0.0, 0.0, 1.5, 0.0]
    row = cbf_constraint(guard.barrier, x, guard.params, planar_cell(), guard.spec.alpha_gain)
    assert row.slack(published) >= -1e-8


def test_filter_passes_safe_commands_exactly(specs, blackboard):
    action = filtered_action(Constant([-1.0, 0.25], status=S), [human_far(specs)], planar_cell())
    cell(blackboard, [0.0, 0.0], [1.5, 0.0])
    rec = record()
    assert action.tick(blackboard, rec) == S
    assert blackboard.read(COMMAND_CHANNEL).value == (-1.0, 0.25)
    assert rec.u_safe == rec.u_nom


def test_contradictory_barriers_fail_with_a_report(blackboard):
    right = instantiate_condition(robot_x_spec("right_of", "x[0] - 1"), channels=CELL_CHANNELS)
    left = instantiate_condition(robot_x_spec("left_of", "-x[0] - 1"), channels=CELL_CHANNELS)
    action = filtered_action(Constant([0.0, 0.0]), [right, left], planar_cell(), label="go")
    cell(blackboard, [0.0, 0.0], [5.0, 5.0])
    rec = record()
    assert action.tick(blackboard, rec) == F
    assert "InfeasibleError" in rec.errors["go"]
    assert blackboard.read(COMMAND_CHANNEL) is None
    grid = np.arange(-5.0, 5.0, 1e-3)
    assert not np.any((grid - 1.0 >= 0) & (-grid - 1.0 >= 0))


def test_missing_state_fails(specs, blackboard):
    action = filtered_action(Constant([1.0, 0.0]), [human_far(specs)], planar_cell(), label="go")
    blackboard.publish("robot/pos", [0.0, 0.0])
    assert action.tick(blackboard, record()) == F


def test_speed_limit_clamps_the_command(specs, blackboard):
    speed = instantiate_condition(specs["speed_limit"], {"vmax": 1.0}, {"command": COMMAND_CHANNEL})
    action = filtered_action(Constant([3.0, 4.0]), [speed], planar_cell())
    action.tick(blackboard, record())
    np.testing.assert_allclose(blackboard.read(COMMAND_CHANNEL).value, [0.6, 0.8], atol=1e-6)


def test_monitor_only_spec_cannot_filter(specs):
    battery = instantiate_condition(specs["battery_min"], channels={"battery": "robot/battery"})
    with pytest.raises(SafetyNodeError, match="monitor-only"):
        filtered_action(Constant([0.0, 0.0]), [battery], planar_cell())


def test_state_dimension_must_match_the_plant():
    spec = load_spec(spec_document("flat", "x[0]", 2, [(0, "robot_position", 0)]))
    condition = instantiate_condition(spec, channels=CELL_CHANNELS)
    with pytest.raises(SafetyNodeError, match="state dimension 2"):
        filtered_action(Constant([0.0, 0.0]), [condition], planar_cell())


def test_relative_degree_is_checked_at_instantiation(blackboard):
    spec = load_spec(spec_document("human_only", "x[2]", 4, [(2, "human_position", 0)]))
    condition = instantiate_condition(spec, channels=CELL_CHANNELS)
    cell(blackboard, [0.0, 0.0], [1.0, 1.0])
    with pytest.raises(RelativeDegreeError):
        filtered_action(Constant([0.0, 0.0]), [condition], planar_cell(), blackboard=blackboard)


def test_halt_reaches_the_inner_action(specs):
    inner = Constant([0.0, 0.0])
    filtered_action(inner, [human_far(specs)], planar_cell()).halt()
    assert inner.halts == 1
