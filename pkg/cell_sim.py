"""
Desk-scale robot cell.

A velocity-commanded robot, a scripted human walking a waypoint path and a
battery that drains over time. Each cycle the runner publishes the cell's
channels, ticks the tree, then applies whatever command the tree published
on that tick. The run is deterministic for a given scenario and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from behavior_tree import (
    Blackboard,
    Leaf,
    NodeStatus,
    TickRecord,
    TreeError,
    TreeNode,
    build_tree,
    tick_tree,
)
from safety_nodes import (
    BarrierSpec,
    ConditionInstance,
    ControlAction,
    SafetyNodeError,
    SpecCatalog,
    filtered_action,
    instantiate_condition,
)
from tools.cbf import BarrierError, constraint_from_gradient, make_plant, single_integrator
from tools.expression import DomainError, ExpressionError
from tools.qp import box_constraints, qp_filter

logger = logging.getLogger(__name__)

MAX_TICKS = 10_000_000
Vec2 = tuple[float, float]

DEFAULT_CHANNELS = {
    "robot_position": "robot/pos",
    "battery": "robot/battery",
    "human_position": "human/pos",
    "human_velocity": "human/vel",
    "command": "robot/cmd_vel",
}


class ScenarioError(ValueError):
    pass


# --- Documents ---


class CellState(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    robot: Vec2
    battery: float = Field(1.0, ge=0.0, le=1.0)
    human: Vec2 = (0.0, 0.0)
    time: float = Field(0.0, ge=0.0)


class Waypoint(BaseModel):
    """Walk to `position` at `speed` m/s (the first waypoint is the start)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    position: Vec2
    speed: float = Field(1.0, ge=0.0)


class BarrierRole(str, Enum):
    CONDITION = "condition"
    FILTER = "filter"
    MONITOR = "monitor"


class BarrierInstanceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    label: str
    spec: str  # name or name@version
    params: dict[str, float] = {}
    channels: dict[str, str] = {}  # slot -> channel; unset slots use the scenario's channel map
    roles: list[BarrierRole] = [BarrierRole.CONDITION]


class SafetyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    plant: str = "planar_cell"
    barriers: list[BarrierInstanceConfig] = []
    filtered_actions: list[str] = []
    u_box: Optional[list[tuple[Optional[float], Optional[float]]]] = None
    exogenous_drift: bool = True  # feed human/vel into the plant drift


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    initial: CellState
    human_waypoints: list[Waypoint]
    battery_drain: float = Field(0.0, ge=0.0)
    goal: Vec2
    dock: Vec2 = (0.0, 0.0)
    rate: float = Field(gt=0.0)
    duration: float = Field(gt=0.0)
    channels: dict[str, str] = Field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    seed: int = 0
    human_noise_std: float = Field(0.0, ge=0.0)
    safety: SafetyConfig = SafetyConfig()

    @field_validator("human_waypoints")
    @classmethod
    def _at_least_one(cls, waypoints: list[Waypoint]) -> list[Waypoint]:
        if not waypoints:
            raise ValueError("at least one waypoint is required")
        return waypoints

    @field_validator("channels")
    @classmethod
    def _fill_channels(cls, channels: dict[str, str]) -> dict[str, str]:
        return {**DEFAULT_CHANNELS, **channels}

    @property
    def tick_count(self) -> int:
        return int(round(self.rate * self.duration))


def _load_model(model: type[BaseModel], source: Union[Path, str, bytes, Mapping[str, Any]]) -> Any:
    try:
        if isinstance(source, Path):
            source = source.read_bytes()
        if isinstance(source, (str, bytes)):
            return model.model_validate_json(source)
        return model.model_validate(source)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ScenarioError(f"Invalid {model.__name__}: {problems}") from e


def load_scenario(source: Union[Path, str, bytes, Mapping[str, Any]]) -> Scenario:
    return _load_model(Scenario, source)


def load_safety_config(source: Union[Path, str, bytes, Mapping[str, Any]]) -> SafetyConfig:
    return _load_model(SafetyConfig, source)


# --- Plant and human ---


def step_plant(state: CellState, u: Sequence[float], dt: float, drain: float = 0.0) -> CellState:
    """Forward-Euler step of the robot; the battery drains and clamps at zero."""
    if dt <= 0:
        raise ScenarioError(f"dt must be positive, got {dt}")
    return replace_state(
        state,
        robot=(state.robot[0] + u[0] * dt, state.robot[1] + u[1] * dt),
        battery=max(0.0, state.battery - drain * dt),
        time=state.time + dt,
    )


def replace_state(state: CellState, **changes: Any) -> CellState:
    return state.model_copy(update=changes)


def _segments(waypoints: Sequence[Waypoint]):
    """(start, end, t_start, duration) per segment; a zero-speed segment never finishes."""
    t = 0.0
    for previous, target in zip(waypoints, waypoints[1:]):
        length = math.dist(previous.position, target.position)
        if length == 0.0:
            continue
        duration = math.inf if target.speed == 0 else length / target.speed
        yield previous.position, target.position, t, duration
        t += duration


def human_position(waypoints: Sequence[Waypoint], t: float) -> Vec2:
    """Piecewise-linear walk; holds the final waypoint once the path is done."""
    if not waypoints:
        raise ScenarioError("human path needs at least one waypoint")
    for start, end, t0, duration in _segments(waypoints):
        if t < t0 + duration:
            if math.isinf(duration):
                return start
            s = max(0.0, t - t0) / duration
            return (start[0] + s * (end[0] - start[0]), start[1] + s * (end[1] - start[1]))
    return waypoints[-1].position


def human_velocity(waypoints: Sequence[Waypoint], t: float) -> Vec2:
    for start, end, t0, duration in _segments(waypoints):
        if t < t0 + duration:
            if math.isinf(duration):
                return (0.0, 0.0)
            return ((end[0] - start[0]) / duration, (end[1] - start[1]) / duration)
    return (0.0, 0.0)


# --- Actions ---


class CellAction(ControlAction):
    """Base for the cell's velocity-commanding actions; node params override defaults."""

    def __init__(self, node: TreeNode, scenario: Scenario):
        self.name = node.name
        self.params = node.params
        self.channels = scenario.channels
        self.command_channel = scenario.channels["command"]
        self.vmax = float(node.params.get("vmax", 1.0))

    def _read(self, blackboard: Blackboard, slot: str) -> Optional[np.ndarray]:
        sample = blackboard.read(self.channels[slot])
        return None if sample is None else np.asarray(sample.value[:2], dtype=float)

    def _toward(self, vector: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(vector))
        return np.zeros(2) if norm == 0.0 else self.vmax * vector / norm


class GoTo(CellAction):
    """Proportional approach to a target, saturated at vmax; Success on arrival."""

    def __init__(self, node: TreeNode, scenario: Scenario, target: Vec2):
        super().__init__(node, scenario)
        self.target = np.asarray(node.params.get("target", target), dtype=float)
        self.gain = float(node.params.get("gain", 1.0))
        self.tolerance = float(node.params.get("tolerance", 0.05))

    def propose(self, blackboard: Blackboard) -> tuple[NodeStatus, np.ndarray]:
        position = self._read(blackboard, "robot_position")
        if position is None:
            return NodeStatus.FAILURE, np.zeros(2)
        error = self.target - position
        if float(np.linalg.norm(error)) <= self.tolerance:
            return NodeStatus.SUCCESS, np.zeros(2)
        u = self.gain * error
        speed = float(np.linalg.norm(u))
        if speed > self.vmax:
            u = u * (self.vmax / speed)
        return NodeStatus.RUNNING, u


class Retreat(CellAction):
    def propose(self, blackboard: Blackboard) -> tuple[NodeStatus, np.ndarray]:
        robot = self._read(blackboard, "robot_position")
        human = self._read(blackboard, "human_position")
        if robot is None or human is None:
            return NodeStatus.FAILURE, np.zeros(2)
        return NodeStatus.RUNNING, self._toward(robot - human)


class ApproachHuman(CellAction):
    """Hostile nominal controller: heads straight for the human."""

    def propose(self, blackboard: Blackboard) -> tuple[NodeStatus, np.ndarray]:
        robot = self._read(blackboard, "robot_position")
        human = self._read(blackboard, "human_position")
        if robot is None or human is None:
            return NodeStatus.FAILURE, np.zeros(2)
        return NodeStatus.RUNNING, self._toward(human - robot)


class Hold(CellAction):
    def propose(self, blackboard: Blackboard) -> tuple[NodeStatus, np.ndarray]:
        return NodeStatus.RUNNING, np.zeros(2)


ACTION_TYPES: dict[str, Callable[[TreeNode, Scenario], ControlAction]] = {
    "go_to_goal": lambda node, scenario: GoTo(node, scenario, scenario.goal),
    "dock": lambda node, scenario: GoTo(node, scenario, scenario.dock),
    "retreat": Retreat,
    "approach_human": ApproachHuman,
    "hold": Hold,
}


# --- Runner ---


@dataclass
class ScenarioTrace:
    scenario: str
    barrier_labels: list[str]
    lines: list[dict[str, Any]] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(line, separators=(",", ":")) + "\n" for line in self.lines)

    def barrier_values(self, label: str) -> list[Optional[float]]:
        return [line["barriers"].get(label) for line in self.lines]


def _instantiate_barriers(
    safety: SafetyConfig, scenario: Scenario, catalog: SpecCatalog
) -> dict[str, tuple[BarrierInstanceConfig, ConditionInstance]]:
    instances = {}
    for entry in safety.barriers:
        if entry.label in instances:
            raise ScenarioError(f"Barrier label {entry.label!r} is used twice")
        try:
            spec = catalog.resolve(entry.spec)
            slots = {b.channel for b in spec.channel_bindings}
            channels = {slot: scenario.channels[slot] for slot in slots if slot in scenario.channels}
            channels.update(entry.channels)
            instances[entry.label] = (entry, instantiate_condition(spec, entry.params, channels, entry.label))
        except (SafetyNodeError, ExpressionError) as e:
            raise ScenarioError(f"Barrier {entry.label}: {e}") from e
    return instances


def publish_cell(
    blackboard: Blackboard, scenario: Scenario, state: CellState, observed_human: Optional[Vec2] = None
) -> None:
    """Publish every cell channel at the blackboard's current time."""
    channels = scenario.channels
    blackboard.publish(channels["robot_position"], state.robot)
    blackboard.publish(channels["battery"], (state.battery,))
    blackboard.publish(channels["human_position"], state.human if observed_human is None else observed_human)
    blackboard.publish(channels["human_velocity"], human_velocity(scenario.human_waypoints, state.time))


def initial_state(scenario: Scenario) -> CellState:
    return replace_state(scenario.initial, time=0.0, human=human_position(scenario.human_waypoints, 0.0))


def build_cell_tree(
    tree_document: Union[str, bytes, Mapping[str, Any]],
    scenario: Scenario,
    blackboard: Blackboard,
    safety: Optional[SafetyConfig] = None,
    filter_enabled: bool = True,
    catalog: Optional[SpecCatalog] = None,
) -> tuple[TreeNode, dict[str, ConditionInstance]]:
    """Validate the tree and bind its leaves to the cell's actions and configured barriers."""
    safety = safety or scenario.safety
    catalog = catalog or SpecCatalog.with_builtins()
    configured = _instantiate_barriers(safety, scenario, catalog)
    barriers = {label: instance for label, (_, instance) in configured.items()}
    filters = [
        instance for entry, instance in configured.values() if BarrierRole.FILTER in entry.roles
    ]
    conditions = {
        label: instance
        for label, (entry, instance) in configured.items()
        if BarrierRole.CONDITION in entry.roles
    }
    unknown = sorted(set(safety.filtered_actions) - set(ACTION_TYPES))
    if unknown:
        raise ScenarioError(f"filtered_actions names unknown action types: {', '.join(unknown)}")
    try:
        plant = make_plant(safety.plant)
    except BarrierError as e:
        raise ScenarioError(str(e)) from e

    def drift(bb: Blackboard) -> Optional[Sequence[float]]:
        if not safety.exogenous_drift or safety.plant != "planar_cell":
            return None
        sample = bb.read(scenario.channels["human_velocity"])
        return None if sample is None else (0.0, 0.0, *sample.value[:2])

    def condition_factory(node: TreeNode) -> Leaf:
        label = str(node.params.get("barrier", node.name))
        if label not in conditions:
            raise ScenarioError(f"no barrier configured as condition {label!r}")
        return conditions[label]

    def action_factory(kind: str) -> Callable[[TreeNode], Leaf]:
        def make(node: TreeNode) -> Leaf:
            inner = ACTION_TYPES[kind](node, scenario)
            if not (filter_enabled and kind in safety.filtered_actions and filters):
                return inner
            return filtered_action(
                inner,
                filters,
                plant,
                u_box=safety.u_box,
                drift=drift,
                blackboard=blackboard,
                label=node.name,
            )

        return make

    leaves: dict[str, Callable[[TreeNode], Leaf]] = {kind: action_factory(kind) for kind in ACTION_TYPES}
    leaves["barrier"] = condition_factory
    for label in conditions:
        leaves.setdefault(label, condition_factory)
    try:
        tree = build_tree(tree_document, leaves)
    except TreeError as e:
        raise ScenarioError(str(e)) from e
    return tree, barriers


def run_scenario(
    scenario: Scenario,
    tree_document: Union[str, bytes, Mapping[str, Any]],
    safety: Optional[SafetyConfig] = None,
    filter_enabled: bool = True,
    catalog: Optional[SpecCatalog] = None,
) -> ScenarioTrace:
    """
    Fixed-rate loop: move the human, publish channels, tick, apply the
    command published on this tick (zero otherwise), record.
    """
    ticks = scenario.tick_count
    if ticks < 1 or ticks > MAX_TICKS:
        raise ScenarioError(f"rate*duration gives {ticks} ticks; allowed 1..{MAX_TICKS}")
    dt = 1.0 / scenario.rate
    rng = np.random.default_rng(scenario.seed)
    blackboard = Blackboard()
    state = initial_state(scenario)

    def observe(s: CellState) -> Vec2:
        if scenario.human_noise_std == 0:
            return s.human
        noise = rng.normal(0.0, scenario.human_noise_std, size=2)
        return (s.human[0] + float(noise[0]), s.human[1] + float(noise[1]))

    publish_cell(blackboard, scenario, state, observe(state))
    tree, barriers = build_cell_tree(
        tree_document, scenario, blackboard, safety, filter_enabled, catalog
    )
    command_channel = scenario.channels["command"]
    trace = ScenarioTrace(scenario=scenario.name, barrier_labels=sorted(barriers))
    logger.info(
        "Running %s: %d ticks at %g Hz, filter %s", scenario.name, ticks, scenario.rate,
        "on" if filter_enabled else "off",
    )

    for k in range(ticks):
        t = k / scenario.rate
        state = replace_state(state, time=t, human=human_position(scenario.human_waypoints, t))
        blackboard.set_time(t)
        if k > 0:
            publish_cell(blackboard, scenario, state, observe(state))

        status, record = tick_tree(tree, blackboard, TickRecord(tick=k, time=t))
        for label in trace.barrier_labels:
            if label not in record.barriers:
                record.barriers[label] = barriers[label].evaluate(blackboard).h

        command = blackboard.read(command_channel)
        u = command.value[:2] if command is not None and command.timestamp == t else (0.0, 0.0)
        trace.lines.append(
            {
                **record.to_dict(),
                "root": status.value,
                "robot": list(state.robot),
                "human": list(state.human),
                "battery": state.battery,
                "u": list(u),
            }
        )
        logger.debug("tick %d t=%.3f root=%s u=%s", k, t, status.value, u)
        state = step_plant(state, u, dt, scenario.battery_drain)

    return trace


def write_trace(trace: ScenarioTrace, path: Union[str, Path]) -> None:
    Path(path).write_text(trace.to_jsonl(), encoding="utf-8")


# --- Summary ---


@dataclass
class SummaryRow:
    kind: str
    label: str
    minimum: Optional[float]
    mean: Optional[float]
    maximum: Optional[float]
    missing: int


def summarize(trace: ScenarioTrace) -> list[SummaryRow]:
    """Min/mean/max h per barrier, plus statistics of the filter correction |u_safe - u_nom|."""
    rows = []
    for label in trace.barrier_labels:
        values = [v for v in trace.barrier_values(label) if v is not None]
        missing = len(trace.lines) - len(values)
        if values:
            rows.append(SummaryRow("barrier", label, min(values), float(np.mean(values)), max(values), missing))
        else:
            rows.append(SummaryRow("barrier", label, None, None, None, missing))
    corrections = [
        float(np.linalg.norm(np.subtract(line["u_safe"], line["u_nom"])))
        for line in trace.lines
        if line["u_nom"] is not None and line["u_safe"] is not None
    ]
    if corrections:
        rows.append(
            SummaryRow(
                "correction",
                "u_safe-u_nom",
                min(corrections),
                float(np.mean(corrections)),
                max(corrections),
                len(trace.lines) - len(corrections),
            )
        )
    return rows


def write_summary(rows: Sequence[SummaryRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "label", "min", "mean", "max", "missing"])
        for row in rows:
            writer.writerow(
                [row.kind, row.label, *("" if v is None else repr(v) for v in (row.minimum, row.mean, row.maximum)), row.missing]
            )


# --- Threaded mode ---


class ThreadedPublisher:
    """
    Publishes one channel from a background thread, latest value wins.
    Pair with a Blackboard on a wall clock (e.g. time.monotonic).
    """

    def __init__(
        self,
        blackboard: Blackboard,
        channel: str,
        source: Callable[[], Sequence[float]],
        period: float,
    ):
        if period <= 0:
            raise ScenarioError(f"period must be positive, got {period}")
        self.blackboard = blackboard
        self.channel = channel
        self.source = source
        self.period = period
        self._stop = threading.Event()
        self._paused = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _run(self) -> None:
        while not self._stop.is_set():
            if not self._paused.is_set():
                try:
                    self.blackboard.publish(self.channel, self.source())
                except Exception as e:
                    logger.warning("Publisher for %s failed: %s", self.channel, e)
            self._stop.wait(self.period)

    def start(self) -> "ThreadedPublisher":
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, name=f"publish:{self.channel}", daemon=True)
            self._thread.start()
        return self

    def pause(self) -> None:
        self._paused.set()

    def resume(self) -> None:
        self._paused.clear()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5 * self.period + 1.0)
            self._thread = None

    def __enter__(self) -> "ThreadedPublisher":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


# --- Forward-invariance check ---

INVARIANCE_TOLERANCE = 1e-3


@dataclass
class TrialResult:
    trial: int
    x0: list[float]
    initial_h: float
    min_h: float


@dataclass
class InvarianceReport:
    spec_id: str
    plant: str
    filtered: bool
    trials: list[TrialResult]

    @property
    def min_h(self) -> float:
        return min(t.min_h for t in self.trials)

    @property
    def violations(self) -> int:
        return sum(t.min_h < -INVARIANCE_TOLERANCE for t in self.trials)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec_id,
            "plant": self.plant,
            "filtered": self.filtered,
            "min_h": self.min_h,
            "violations": self.violations,
            "trials": [
                {"trial": t.trial, "x0": t.x0, "initial_h": t.initial_h, "min_h": t.min_h} for t in self.trials
            ],
        }


def _invariance_plant(name: str, state_dim: int):
    if name == "single_integrator":
        return single_integrator(state_dim)
    plant = make_plant(name)
    if plant.n != state_dim:
        raise ScenarioError(f"Plant {name} has state dimension {plant.n}, barrier has {state_dim}")
    return plant


def check_invariance(
    spec: BarrierSpec,
    plant_name: str = "planar_cell",
    trials: int = 100,
    duration: float = 30.0,
    rate: float = 100.0,
    seed: int = 0,
    vmax: float = 1.0,
    params: Optional[Mapping[str, float]] = None,
    filter_enabled: bool = True,
    initial_margin: float = 0.1,
    sample_box: float = 5.0,
    max_attempts: int = 10_000,
) -> InvarianceReport:
    """
    Closed-loop runs from random states with h >= initial_margin under a hostile
    nominal controller u_nom = -vmax * a/|a| (a = g^T grad h), box-limited to vmax.
    """
    if trials < 1 or duration <= 0 or rate <= 0:
        raise ScenarioError("trials, duration and rate must be positive")
    plant = _invariance_plant(plant_name, spec.state_dim)
    values = spec.defaults()
    for name, value in (params or {}).items():
        schema = spec.schema_for(name)
        if schema is None:
            raise ScenarioError(f"{spec.spec_id} has no parameter {name!r}")
        if not schema.min <= value <= schema.max:
            raise ScenarioError(f"parameter {name}={value} outside [{schema.min}, {schema.max}]")
        values[name] = float(value)
    barrier = spec.compiled
    rng = np.random.default_rng(seed)
    box_rows = box_constraints(plant.m, [(-vmax, vmax)] * plant.m)
    steps = int(round(duration * rate))
    dt = 1.0 / rate
    results = []

    for trial in range(trials):
        for _ in range(max_attempts):
            x = rng.uniform(-sample_box, sample_box, size=plant.n)
            try:
                h = barrier.value(x, values)
            except DomainError:
                continue
            if h >= initial_margin:
                break
        else:
            raise ScenarioError(f"No state with h >= {initial_margin} found in {max_attempts} samples")
        x0, h0 = [float(v) for v in x], h
        min_h = h
        h, grad = barrier.value_and_grad(x, values)
        # rejects barriers the control cannot influence
        constraint_from_gradient(h, grad, x, plant, spec.alpha_gain, spec.name)
        for _ in range(steps):
            a = plant.g(x).T @ grad
            norm = float(np.linalg.norm(a))
            u_nom = np.zeros(plant.m) if norm == 0.0 else -vmax * a / norm
            if filter_enabled:
                row = constraint_from_gradient(h, grad, x, plant, spec.alpha_gain, spec.name)
                u = qp_filter(u_nom, [row, *box_rows]).u_safe
            else:
                u = u_nom
            x = plant.step(x, u, dt)
            h, grad = barrier.value_and_grad(x, values)
            min_h = min(min_h, h)
        results.append(TrialResult(trial, x0, h0, min_h))
        logger.debug("trial %d: min h %.6f", trial, min_h)

    report = InvarianceReport(spec.spec_id, plant.name, filter_enabled, results)
    logger.info(
        "Invariance check %s on %s: %d/%d trials violated, min h %.6f",
        spec.spec_id, plant.name, report.violations, trials, report.min_h,
    )
    return report
