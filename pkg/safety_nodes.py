"""
Shareable safety artifacts.

A BarrierSpec is a declarative safety function: an expression in the barrier
language, its parameter schema, and how each state component x[i] is read
from a named channel. Specs are data, so they can be published to the shadow
registry and instantiated by anyone as Behavior Tree condition nodes, or
used to wrap an action in a QP safety filter.
"""

from __future__ import annotations

import json
import logging
import re
from abc import abstractmethod
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from behavior_tree import (
    Blackboard,
    Leaf,
    NodeKind,
    NodeStatus,
    TickRecord,
    TreeBuildError,
    TreeNode,
    iter_nodes,
)
from tools.cbf import InputBarrier, PlantModel, RelativeDegreeError, cbf_constraint, filter_control
from tools.expression import (
    CompiledBarrier,
    DomainError,
    ExpressionError,
    check_symbols,
    compile_barrier,
    free_symbols,
    parse_barrier,
)
from tools.qp import InfeasibleError, LinearConstraint

logger = logging.getLogger(__name__)

BUILTIN_SPEC_DIR = Path(__file__).parent / "tools" / "builtin_specs"
SEMVER_RE = re.compile(
    r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)"
    r"(?:-((?:0|[1-9]\d*|\d*[A-Za-z-][0-9A-Za-z-]*)(?:\.(?:0|[1-9]\d*|\d*[A-Za-z-][0-9A-Za-z-]*))*))?"
    r"(?:\+([0-9A-Za-z-]+(?:\.[0-9A-Za-z-]+)*))?$"
)
IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")

MONITOR_ONLY_TAG = "monitor-only"
INPUT_CONSTRAINT_TAG = "input-constraint"
COMMAND_CHANNEL = "robot/cmd_vel"
DEFAULT_STALENESS = 0.2


class SafetyNodeError(ValueError):
    pass


class SpecValidationError(SafetyNodeError):
    def __init__(self, errors: Sequence[str], subject: str = "BarrierSpec"):
        super().__init__(f"{subject} is invalid: " + "; ".join(errors))
        self.errors = list(errors)


# --- Spec documents ---


class ParamSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    default: float
    min: float
    max: float


class ChannelBinding(BaseModel):
    """x[index] is component `component` of whatever channel the slot `channel` is bound to."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    index: int
    channel: str
    component: int


class BarrierSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    version: str
    description: str = ""
    state_dim: int
    expression: str
    param_schema: list[ParamSpec] = []
    channel_bindings: list[ChannelBinding] = []
    alpha_gain: float = 1.0
    margin: float = 0.0
    staleness_timeout: float = DEFAULT_STALENESS
    tags: list[str] = []

    @property
    def spec_id(self) -> str:
        return f"{self.name}@{self.version}"

    @property
    def compiled(self) -> CompiledBarrier:
        return _compile_expression(self.expression)

    def defaults(self) -> dict[str, float]:
        return {p.name: p.default for p in self.param_schema}

    def schema_for(self, name: str) -> Optional[ParamSpec]:
        return next((p for p in self.param_schema if p.name == name), None)

    def to_document(self) -> bytes:
        return (json.dumps(self.model_dump(mode="json"), indent=2) + "\n").encode("utf-8")


@lru_cache(maxsize=256)
def _compile_expression(expression: str) -> CompiledBarrier:
    return compile_barrier(parse_barrier(expression))


def _pydantic_errors(e: ValidationError) -> list[str]:
    return [
        f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}"
        for err in e.errors()
    ]


def _coerce_spec(spec: Union[BarrierSpec, Mapping[str, Any], str, bytes]) -> BarrierSpec:
    if isinstance(spec, BarrierSpec):
        return spec
    try:
        if isinstance(spec, (str, bytes)):
            return BarrierSpec.model_validate_json(spec)
        return BarrierSpec.model_validate(spec)
    except ValidationError as e:
        raise SpecValidationError(_pydantic_errors(e)) from e


def validate_spec(spec: Union[BarrierSpec, Mapping[str, Any], str, bytes]) -> list[str]:
    """Every violated BarrierSpec invariant; an empty list means the spec is valid."""
    try:
        spec = _coerce_spec(spec)
    except SpecValidationError as e:
        return e.errors

    errors: list[str] = []
    if not IDENT_RE.match(spec.name):
        errors.append(f"name: {spec.name!r} is not an identifier")
    if not SEMVER_RE.match(spec.version):
        errors.append(f"version: {spec.version!r} is not a semantic version")
    if spec.state_dim < 1:
        errors.append(f"state_dim: must be >= 1, got {spec.state_dim}")
    if not spec.alpha_gain > 0:
        errors.append(f"alpha_gain: must be > 0, got {spec.alpha_gain}")
    if not spec.margin >= 0:
        errors.append(f"margin: must be >= 0, got {spec.margin}")
    if not spec.staleness_timeout > 0:
        errors.append(f"staleness_timeout: must be > 0, got {spec.staleness_timeout}")
    if MONITOR_ONLY_TAG in spec.tags and INPUT_CONSTRAINT_TAG in spec.tags:
        errors.append(f"tags: {MONITOR_ONLY_TAG!r} and {INPUT_CONSTRAINT_TAG!r} are exclusive")

    seen_params: set[str] = set()
    for p in spec.param_schema:
        if p.name in seen_params:
            errors.append(f"param_schema: duplicate parameter {p.name!r}")
        seen_params.add(p.name)
        if not IDENT_RE.match(p.name):
            errors.append(f"param_schema: {p.name!r} is not an identifier")
        if p.min > p.max:
            errors.append(f"param_schema: {p.name} has min {p.min} > max {p.max}")
        elif not p.min <= p.default <= p.max:
            errors.append(
                f"param_schema: default {p.name}={p.default} outside [{p.min}, {p.max}]"
            )

    bound: dict[int, ChannelBinding] = {}
    for b in spec.channel_bindings:
        if not 0 <= b.index < spec.state_dim:
            errors.append(f"channel_bindings: x[{b.index}] is outside state dimension {spec.state_dim}")
        if b.index in bound:
            errors.append(f"channel_bindings: x[{b.index}] is bound more than once")
        if b.component < 0:
            errors.append(f"channel_bindings: x[{b.index}] has negative component {b.component}")
        if not b.channel:
            errors.append(f"channel_bindings: x[{b.index}] has an empty channel name")
        bound[b.index] = b

    try:
        ast = parse_barrier(spec.expression)
    except ExpressionError as e:
        errors.append(f"expression: {e}")
    else:
        errors += [f"expression: {msg}" for msg in check_symbols(ast, spec.state_dim, sorted(seen_params))]
        indices, _ = free_symbols(ast)
        errors += [
            f"channel_bindings: x[{i}] is used by the expression but has no binding"
            for i in sorted(indices)
            if i not in bound and i < spec.state_dim
        ]
    return errors


def load_spec(source: Union[Path, str, bytes, Mapping[str, Any]]) -> BarrierSpec:
    """Parse and validate a spec document (a path, raw JSON, or a mapping)."""
    if isinstance(source, Path):
        source = source.read_bytes()
    spec = _coerce_spec(source)
    errors = validate_spec(spec)
    if errors:
        raise SpecValidationError(errors, subject=spec.spec_id)
    return spec


def builtin_specs() -> dict[str, BarrierSpec]:
    return {
        path.stem: load_spec(path) for path in sorted(BUILTIN_SPEC_DIR.glob("*.json"))
    }


class SpecCatalog:
    """Specs available to this process, resolvable as `name` (latest) or `name@version`."""

    def __init__(self, specs: Sequence[BarrierSpec] = ()):
        self._specs: dict[tuple[str, str], BarrierSpec] = {}
        for spec in specs:
            self.add(spec)

    @classmethod
    def with_builtins(cls) -> "SpecCatalog":
        return cls(list(builtin_specs().values()))

    def add(self, spec: BarrierSpec) -> None:
        self._specs[(spec.name, spec.version)] = spec

    def names(self) -> list[str]:
        return sorted({name for name, _ in self._specs})

    def resolve(self, ref: str) -> BarrierSpec:
        name, _, version = ref.partition("@")
        if version:
            try:
                return self._specs[(name, version)]
            except KeyError:
                raise SafetyNodeError(f"Unknown barrier spec {ref!r}") from None
        versions = [v for (n, v) in self._specs if n == name]
        if not versions:
            raise SafetyNodeError(f"Unknown barrier spec {name!r}")
        return self._specs[(name, max(versions, key=semver_key))]


def semver_key(version: str) -> tuple:
    """
    Sort key implementing semantic-version precedence (release above
    pre-release). Build metadata has no precedence; the raw string breaks
    the remaining ties so orderings are total.
    """
    match = SEMVER_RE.match(version)
    if not match:
        return ((-1, -1, -1), 0, (), version)
    major, minor, patch, pre, _ = match.groups()
    core = (int(major), int(minor), int(patch))
    if pre is None:
        return (core, 1, (), version)
    ids = tuple((0, int(part), "") if part.isdigit() else (1, 0, part) for part in pre.split("."))
    return (core, 0, ids, version)


# --- Condition instances ---


@dataclass(frozen=True)
class BarrierReading:
    h: Optional[float]
    x: Optional[tuple[float, ...]]
    reason: Optional[str] = None  # why h is unavailable


class ConditionInstance(Leaf):
    """
    A BarrierSpec bound to concrete parameter values and channels.

    Ticks Success iff every bound channel is present and fresh, the
    expression evaluates, and h(x) >= margin. Never Running.
    """

    def __init__(
        self,
        spec: BarrierSpec,
        params: Mapping[str, float],
        channels: Mapping[str, str],
        label: str,
    ):
        self.spec = spec
        self.params = dict(params)
        self.channels = dict(channels)
        self.label = label
        self.barrier = spec.compiled
        self.bindings = sorted(
            ((b.index, channels[b.channel], b.component) for b in spec.channel_bindings),
            key=lambda item: item[0],
        )
        self._last: Optional[NodeStatus] = None

    def assemble(self, blackboard: Blackboard) -> tuple[Optional[np.ndarray], Optional[str]]:
        x = np.zeros(self.spec.state_dim)
        now = blackboard.now
        for index, channel, component in self.bindings:
            sample = blackboard.read(channel)
            if sample is None:
                return None, f"channel {channel!r} absent"
            age = now - sample.timestamp
            if age > self.spec.staleness_timeout:
                return None, f"channel {channel!r} stale ({age:.3f}s > {self.spec.staleness_timeout}s)"
            if component >= len(sample.value):
                return None, f"channel {channel!r} has no component {component}"
            x[index] = sample.value[component]
        return x, None

    def evaluate(self, blackboard: Blackboard) -> BarrierReading:
        x, reason = self.assemble(blackboard)
        if x is None:
            return BarrierReading(None, None, reason)
        try:
            h = self.barrier.value(x, self.params)
        except DomainError as e:
            return BarrierReading(None, tuple(x), f"domain error: {e}")
        return BarrierReading(h, tuple(x))

    def tick(self, blackboard: Blackboard, record: TickRecord) -> NodeStatus:
        reading = self.evaluate(blackboard)
        record.barriers[self.label] = reading.h
        if reading.h is None:
            record.errors.setdefault(self.label, reading.reason or "unavailable")
            status = NodeStatus.FAILURE
        else:
            status = NodeStatus.SUCCESS if reading.h >= self.spec.margin else NodeStatus.FAILURE
        if status != self._last:
            logger.info(
                "Condition %s (%s) -> %s (h=%s%s)",
                self.label,
                self.spec.spec_id,
                status.value,
                "n/a" if reading.h is None else f"{reading.h:.4f}",
                f", {reading.reason}" if reading.reason else "",
            )
            self._last = status
        return status


def instantiate_condition(
    spec: BarrierSpec,
    params: Optional[Mapping[str, float]] = None,
    channels: Optional[Mapping[str, str]] = None,
    label: Optional[str] = None,
) -> ConditionInstance:
    errors = validate_spec(spec)
    if errors:
        raise SpecValidationError(errors, subject=spec.spec_id)
    params = dict(params or {})
    channels = dict(channels or {})
    problems: list[str] = []
    bound = spec.defaults()
    for name, value in params.items():
        schema = spec.schema_for(name)
        if schema is None:
            problems.append(f"unknown parameter {name!r}")
        elif not schema.min <= float(value) <= schema.max:
            problems.append(f"parameter {name}={value} outside [{schema.min}, {schema.max}]")
        else:
            bound[name] = float(value)
    slots = sorted({b.channel for b in spec.channel_bindings})
    problems += [f"channel slot {slot!r} is not bound to a channel" for slot in slots if not channels.get(slot)]
    if problems:
        raise SafetyNodeError(f"Cannot instantiate {spec.spec_id}: " + "; ".join(problems))
    return ConditionInstance(spec, bound, {slot: channels[slot] for slot in slots}, label or spec.name)


# --- Tree assembly ---


def condition_node(instance: ConditionInstance, name: Optional[str] = None) -> TreeNode:
    return TreeNode(
        kind=NodeKind.CONDITION,
        name=name or instance.label,
        params={"type": "barrier", "barrier": instance.label},
        leaf=instance,
    )


def make_safety_branch(
    conditions: Sequence[Union[ConditionInstance, TreeNode]],
    evasive: TreeNode,
    name: str = "safety_branch",
) -> TreeNode:
    """Fallback[Sequence[c1..ck], evasive]: evasive runs only when some condition fails."""
    if not conditions:
        raise SafetyNodeError("A safety branch needs at least one condition")
    nodes = [c if isinstance(c, TreeNode) else condition_node(c) for c in conditions]
    checks = TreeNode(kind=NodeKind.SEQUENCE, name=f"{name}_checks", children=nodes)
    branch = TreeNode(kind=NodeKind.FALLBACK, name=name, children=[checks, evasive])
    names = [node.name for node in iter_nodes(branch)]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise SafetyNodeError(f"Safety branch {name!r} has duplicate node names: {', '.join(duplicates)}")
    return branch


def attach_safety_branch(task: TreeNode, branch: TreeNode, root_name: str = "safe_root") -> TreeNode:
    """New root Sequence[branch, task]; the task subtree is not modified."""
    taken = {node.name for node in iter_nodes(task)}
    clashes = sorted({node.name for node in iter_nodes(branch)} & (taken | {root_name}))
    if clashes or root_name in taken:
        raise TreeBuildError(root_name, f"node names already used by the task: {', '.join(clashes) or root_name}")
    return TreeNode(
        kind=NodeKind.SEQUENCE,
        name=root_name,
        params={"safety_branch": branch.name},
        children=[branch, task],
    )


def detach_safety_branch(tree: TreeNode) -> TreeNode:
    if tree.kind != NodeKind.SEQUENCE or "safety_branch" not in tree.params or len(tree.children) != 2:
        raise SafetyNodeError(f"{tree.name} is not a root created by attach_safety_branch")
    return tree.children[1]


# --- Filtered actions ---


class ControlAction(Leaf):
    """An action that proposes a velocity command each tick."""

    command_channel = COMMAND_CHANNEL

    @abstractmethod
    def propose(self, blackboard: Blackboard) -> tuple[NodeStatus, np.ndarray]:
        ...

    def tick(self, blackboard: Blackboard, record: TickRecord) -> NodeStatus:
        status, u = self.propose(blackboard)
        record.u_nom = [float(v) for v in u]
        record.u_safe = list(record.u_nom)
        blackboard.publish(self.command_channel, u)
        return status


DriftProvider = Callable[[Blackboard], Optional[Sequence[float]]]


class FilteredAction(Leaf):
    """Wraps a ControlAction so every command it proposes passes the CBF-QP filter."""

    def __init__(
        self,
        inner: ControlAction,
        barriers: Sequence[ConditionInstance],
        plant: PlantModel,
        u_box: Optional[Sequence[tuple[Optional[float], Optional[float]]]] = None,
        drift: Optional[DriftProvider] = None,
        label: str = "filtered",
    ):
        self.inner = inner
        self.plant = plant
        self.u_box = u_box
        self.drift = drift
        self.label = label
        self.state_barriers: list[ConditionInstance] = []
        self.input_barriers: list[ConditionInstance] = []
        for barrier in barriers:
            if MONITOR_ONLY_TAG in barrier.spec.tags:
                raise SafetyNodeError(f"{barrier.spec.spec_id} is monitor-only and cannot filter controls")
            if INPUT_CONSTRAINT_TAG in barrier.spec.tags:
                self.input_barriers.append(barrier)
            elif barrier.spec.state_dim != plant.n:
                raise SafetyNodeError(
                    f"{barrier.spec.spec_id} has state dimension {barrier.spec.state_dim}, "
                    f"plant {plant.name} has {plant.n}"
                )
            else:
                self.state_barriers.append(barrier)
        self.last_report: Optional[str] = None

    def check_relative_degree(self, blackboard: Blackboard) -> None:
        """Raise RelativeDegreeError if some barrier cannot be filtered at the current state."""
        plant = self._plant(blackboard)
        for barrier in self.state_barriers:
            x, reason = barrier.assemble(blackboard)
            if x is None:
                raise SafetyNodeError(f"{barrier.label}: cannot check relative degree, {reason}")
            cbf_constraint(barrier.barrier, x, barrier.params, plant, barrier.spec.alpha_gain, barrier.label)

    def _plant(self, blackboard: Blackboard) -> PlantModel:
        if self.drift is None:
            return self.plant
        extra = self.drift(blackboard)
        return self.plant if extra is None else self.plant.with_drift(extra)

    def _input_barrier(self, barrier: ConditionInstance) -> InputBarrier:
        components = [component for _, _, component in barrier.bindings]
        return InputBarrier(barrier.barrier, barrier.params, components, label=barrier.label)

    def _constraints(self, blackboard: Blackboard) -> list[LinearConstraint]:
        plant = self._plant(blackboard)
        rows = []
        for barrier in self.state_barriers:
            x, reason = barrier.assemble(blackboard)
            if x is None:
                raise InfeasibleError([], [])  # state unknown: cannot certify any control
            rows.append(
                cbf_constraint(barrier.barrier, x, barrier.params, plant, barrier.spec.alpha_gain, barrier.label)
            )
        return rows

    def tick(self, blackboard: Blackboard, record: TickRecord) -> NodeStatus:
        status, u_nom = self.inner.propose(blackboard)
        u_nom = np.asarray(u_nom, dtype=float)
        record.u_nom = [float(v) for v in u_nom]
        input_barriers = [self._input_barrier(b) for b in self.input_barriers]
        rows: list[LinearConstraint] = []
        try:
            rows = self._constraints(blackboard)
            result = filter_control(u_nom, rows, input_barriers, self.u_box)
        except (InfeasibleError, RelativeDegreeError, DomainError) as e:
            self.last_report = f"{type(e).__name__}: {e}"
            record.errors[self.label] = self.last_report
            logger.warning("%s: filter failed (%s)", self.label, self.last_report)
            zero = np.zeros_like(u_nom)
            zero_ok = bool(rows) or not self.state_barriers
            zero_ok = zero_ok and all(row.slack(zero) >= -1e-8 for row in rows)
            zero_ok = zero_ok and all(ib.value(zero) >= 0 for ib in input_barriers)
            if not zero_ok:
                return NodeStatus.FAILURE
            record.u_safe = [0.0] * len(u_nom)
            blackboard.publish(self.inner.command_channel, zero)
            return NodeStatus.RUNNING
        self.last_report = None
        record.u_safe = [float(v) for v in result.u_safe]
        blackboard.publish(self.inner.command_channel, result.u_safe)
        return status

    def halt(self) -> None:
        self.inner.halt()


def filtered_action(
    inner: ControlAction,
    barriers: Sequence[ConditionInstance],
    plant: PlantModel,
    u_box: Optional[Sequence[tuple[Optional[float], Optional[float]]]] = None,
    drift: Optional[DriftProvider] = None,
    blackboard: Optional[Blackboard] = None,
    label: str = "filtered",
) -> FilteredAction:
    """Build a FilteredAction; with a blackboard the relative degree is checked up front."""
    action = FilteredAction(inner, barriers, plant, u_box=u_box, drift=drift, label=label)
    if blackboard is not None:
        action.check_relative_degree(blackboard)
    return action
