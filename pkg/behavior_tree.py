"""
Reactive Behavior Tree engine.

Trees are built from JSON documents (one object per node with the fields
kind, name, params, children), ticked from the root once per control cycle,
and serialized back to the same canonical document form so they can be
exchanged through the shadow registry.

Control flow is memoryless: every tick re-evaluates the tree from the root,
so safety conditions are re-checked each cycle. The engine owns no clock;
an external loop decides when to tick.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rich.tree import Tree as RichTree

logger = logging.getLogger(__name__)


class NodeStatus(str, Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    RUNNING = "Running"


class NodeKind(str, Enum):
    SEQUENCE = "Sequence"
    FALLBACK = "Fallback"
    PARALLEL = "Parallel"
    INVERTER = "Inverter"
    CONDITION = "Condition"
    ACTION = "Action"


CONTROL_KINDS = {NodeKind.SEQUENCE, NodeKind.FALLBACK, NodeKind.PARALLEL}
LEAF_KINDS = {NodeKind.CONDITION, NodeKind.ACTION}
NAME_PATTERN = r"^[A-Za-z_][A-Za-z0-9_.\-]*$"


# --- Errors ---


class TreeError(ValueError):
    pass


class TreeBuildError(TreeError):
    """Document rejected; `path` locates the offending node (names joined by '/')."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<document>'}: {message}")
        self.path = path
        self.message = message


# --- Blackboard ---


@dataclass(frozen=True)
class Sample:
    timestamp: float
    value: tuple[float, ...]


class Blackboard:
    """
    Latest-value channel store shared by one writer (the plant side) and one
    reader (the tick loop). Reads never block on data: a missing channel
    reads as None.

    The clock is scripted (set_time) unless a clock callable is supplied.
    """

    def __init__(self, clock: Optional[Callable[[], float]] = None):
        self._clock = clock
        self._time = 0.0
        self._channels: dict[str, Sample] = {}
        self._entries: dict[str, Any] = {}
        self._lock = threading.Lock()

    @property
    def now(self) -> float:
        return self._clock() if self._clock is not None else self._time

    def set_time(self, t: float) -> None:
        if self._clock is not None:
            raise TreeError("Blackboard uses an external clock; set_time is not available")
        if t < self._time:
            raise TreeError(f"Blackboard time may not go backwards ({t} < {self._time})")
        self._time = float(t)

    def publish(
        self, channel: str, value: Sequence[float], timestamp: Optional[float] = None
    ) -> None:
        stamp = self.now if timestamp is None else float(timestamp)
        sample = Sample(stamp, tuple(float(v) for v in value))
        with self._lock:
            previous = self._channels.get(channel)
            if previous is not None and stamp < previous.timestamp:
                raise TreeError(
                    f"Channel {channel!r}: timestamp {stamp} precedes {previous.timestamp}"
                )
            self._channels[channel] = sample

    def read(self, channel: str) -> Optional[Sample]:
        with self._lock:
            return self._channels.get(channel)

    def channels(self) -> list[str]:
        with self._lock:
            return sorted(self._channels)

    # plain key/value slots for things that are not timestamped signals
    def set(self, key: str, value: Any) -> None:
        with self._lock:
            self._entries[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        with self._lock:
            return self._entries.get(key, default)

    def pop(self, key: str, default: Any = None) -> Any:
        with self._lock:
            return self._entries.pop(key, default)


# --- Tick records ---


@dataclass
class TickRecord:
    tick: int
    time: float
    statuses: dict[str, NodeStatus] = field(default_factory=dict)
    barriers: dict[str, Optional[float]] = field(default_factory=dict)
    u_nom: Optional[list[float]] = None
    u_safe: Optional[list[float]] = None
    errors: dict[str, str] = field(default_factory=dict)
    halted: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "time": self.time,
            "statuses": {name: status.value for name, status in self.statuses.items()},
            "barriers": dict(self.barriers),
            "u_nom": self.u_nom,
            "u_safe": self.u_safe,
            "errors": dict(self.errors),
            "halted": list(self.halted),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


# --- Leaves ---


class Leaf(ABC):
    """Implementation behind a Condition or Action node."""

    @abstractmethod
    def tick(self, blackboard: Blackboard, record: TickRecord) -> NodeStatus: ...

    def halt(self) -> None:
        """Called once when a Running action stops being ticked."""


LeafFactory = Callable[["TreeNode"], Leaf]


# --- Tree structure ---


@dataclass
class TreeNode:
    kind: NodeKind
    name: str
    params: dict[str, Any] = field(default_factory=dict)
    children: list["TreeNode"] = field(default_factory=list)
    leaf: Optional[Leaf] = field(default=None, compare=False, repr=False)
    last_status: Optional[NodeStatus] = field(default=None, compare=False, repr=False)
    running: bool = field(default=False, compare=False, repr=False)
    tick_count: int = field(default=0, compare=False, repr=False)

    @property
    def leaf_type(self) -> str:
        return str(self.params.get("type", self.name))


def iter_nodes(tree: TreeNode) -> Iterator[TreeNode]:
    stack = [tree]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def find_node(tree: TreeNode, name: str) -> Optional[TreeNode]:
    return next((node for node in iter_nodes(tree) if node.name == name), None)


class _NodeDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: NodeKind
    name: str = Field(min_length=1, pattern=NAME_PATTERN)
    params: dict[str, Any] = Field(default_factory=dict)
    children: list[Any] = Field(default_factory=list)


def _decode(document: Union[str, bytes, Mapping[str, Any]]) -> Any:
    if isinstance(document, (str, bytes)):
        try:
            return json.loads(document)
        except UnicodeDecodeError as e:
            raise TreeBuildError("", f"not valid UTF-8 JSON: {e}") from e
        except json.JSONDecodeError as e:
            raise TreeBuildError("", f"not valid JSON: {e}") from e
    return document


def _check_arity(node: TreeNode, path: str) -> None:
    count = len(node.children)
    if node.kind in CONTROL_KINDS and count < 1:
        raise TreeBuildError(path, f"{node.kind.value} needs at least one child")
    if node.kind == NodeKind.INVERTER and count != 1:
        raise TreeBuildError(path, f"Inverter needs exactly one child, has {count}")
    if node.kind in LEAF_KINDS and count:
        raise TreeBuildError(path, f"{node.kind.value} is a leaf and cannot have children")
    if node.kind == NodeKind.PARALLEL:
        m = node.params.get("M")
        if isinstance(m, bool) or not isinstance(m, int):
            raise TreeBuildError(path, f"Parallel needs an integer param M, got {m!r}")
        if not 1 <= m <= count:
            raise TreeBuildError(path, f"Parallel M={m} must satisfy 1 <= M <= {count}")


def _build(raw: Any, path: str, seen: dict[str, str]) -> TreeNode:
    if not isinstance(raw, Mapping):
        raise TreeBuildError(path, f"node must be an object, got {type(raw).__name__}")
    kind = raw.get("kind")
    label = raw.get("name") if isinstance(raw.get("name"), str) and raw.get("name") else None
    here = f"{path}/{label}" if path and label else (label or path)
    if kind not in {k.value for k in NodeKind}:
        raise TreeBuildError(here, f"unknown node kind {kind!r}")
    try:
        doc = _NodeDocument.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field_name = ".".join(str(part) for part in first["loc"])
        raise TreeBuildError(here, f"field {field_name!r}: {first['msg']}") from e
    if doc.name in seen:
        raise TreeBuildError(here, f"duplicate node name {doc.name!r} (first at {seen[doc.name]})")
    seen[doc.name] = here
    children = [_build(child, here, seen) for child in doc.children]
    node = TreeNode(kind=doc.kind, name=doc.name, params=dict(doc.params), children=children)
    _check_arity(node, here)
    return node


def build_tree(
    document: Union[str, bytes, Mapping[str, Any]],
    leaves: Optional[Mapping[str, LeafFactory]] = None,
) -> TreeNode:
    """
    Validate a tree document and return the tree.

    When `leaves` is given every Condition/Action is bound to the factory
    registered under its `type` param (or, without one, its name). Without
    it the tree is only validated, which is what the registry needs.
    """
    root = _build(_decode(document), "", {})
    if leaves is not None:
        bind_leaves(root, leaves)
    return root


def _node_path(tree: TreeNode, target: TreeNode) -> str:
    def walk(node: TreeNode, prefix: str) -> Optional[str]:
        here = f"{prefix}/{node.name}" if prefix else node.name
        if node is target:
            return here
        for child in node.children:
            found = walk(child, here)
            if found:
                return found
        return None

    return walk(tree, "") or target.name


def bind_leaves(tree: TreeNode, leaves: Mapping[str, LeafFactory]) -> TreeNode:
    for node in iter_nodes(tree):
        if node.kind not in LEAF_KINDS:
            continue
        factory = leaves.get(node.leaf_type)
        if factory is None:
            raise TreeBuildError(
                _node_path(tree, node), f"no {node.kind.value.lower()} registered as {node.leaf_type!r}"
            )
        try:
            node.leaf = factory(node)
        except TreeBuildError:
            raise
        except Exception as e:
            raise TreeBuildError(_node_path(tree, node), f"cannot instantiate: {e}") from e
    return tree


def serialize_tree(tree: TreeNode) -> dict[str, Any]:
    """Canonical document: fields in order kind, name, params, children; params sorted."""
    return {
        "kind": tree.kind.value,
        "name": tree.name,
        "params": {key: tree.params[key] for key in sorted(tree.params)},
        "children": [serialize_tree(child) for child in tree.children],
    }


def dump_tree(tree: TreeNode) -> str:
    return json.dumps(serialize_tree(tree), indent=2) + "\n"


# --- Ticking ---


def _tick_leaf(node: TreeNode, blackboard: Blackboard, record: TickRecord) -> NodeStatus:
    if node.leaf is None:
        record.errors[node.name] = "leaf is not bound to an implementation"
        return NodeStatus.FAILURE
    try:
        status = node.leaf.tick(blackboard, record)
    except Exception as e:
        logger.warning("Leaf %s raised %s: %s; reporting Failure", node.name, type(e).__name__, e)
        record.errors[node.name] = f"{type(e).__name__}: {e}"
        return NodeStatus.FAILURE
    if not isinstance(status, NodeStatus):
        record.errors[node.name] = f"returned {status!r} instead of a NodeStatus"
        return NodeStatus.FAILURE
    if node.kind == NodeKind.CONDITION and status == NodeStatus.RUNNING:
        record.errors[node.name] = "condition returned Running"
        return NodeStatus.FAILURE
    return status


def _tick(node: TreeNode, blackboard: Blackboard, record: TickRecord) -> NodeStatus:
    kind = node.kind
    if kind in LEAF_KINDS:
        status = _tick_leaf(node, blackboard, record)
        node.running = status == NodeStatus.RUNNING
    elif kind == NodeKind.SEQUENCE:
        status = NodeStatus.SUCCESS
        for child in node.children:
            status = _tick(child, blackboard, record)
            if status != NodeStatus.SUCCESS:
                break
    elif kind == NodeKind.FALLBACK:
        status = NodeStatus.FAILURE
        for child in node.children:
            status = _tick(child, blackboard, record)
            if status != NodeStatus.FAILURE:
                break
    elif kind == NodeKind.PARALLEL:
        results = [_tick(child, blackboard, record) for child in node.children]
        successes = results.count(NodeStatus.SUCCESS)
        failures = results.count(NodeStatus.FAILURE)
        threshold = node.params["M"]
        if successes >= threshold:
            status = NodeStatus.SUCCESS
        elif failures > len(results) - threshold:
            status = NodeStatus.FAILURE
        else:
            status = NodeStatus.RUNNING
    elif kind == NodeKind.INVERTER:
        child_status = _tick(node.children[0], blackboard, record)
        status = {
            NodeStatus.SUCCESS: NodeStatus.FAILURE,
            NodeStatus.FAILURE: NodeStatus.SUCCESS,
        }.get(child_status, NodeStatus.RUNNING)
    else:
        raise TreeError(f"Unknown node kind {kind!r}")
    node.last_status = status
    record.statuses[node.name] = status
    return status


def tick_tree(
    tree: TreeNode, blackboard: Blackboard, record: Optional[TickRecord] = None
) -> tuple[NodeStatus, TickRecord]:
    """Tick the root once; halt actions that were Running but were not reached."""
    if record is None:
        record = TickRecord(tick=tree.tick_count, time=blackboard.now)
    tree.tick_count += 1
    status = _tick(tree, blackboard, record)

    for node in iter_nodes(tree):
        if node.running and node.name not in record.statuses:
            node.running = False
            record.halted.append(node.name)
            logger.info("Halting %s (not ticked at tick %d)", node.name, record.tick)
            try:
                if node.leaf is not None:
                    node.leaf.halt()
            except Exception as e:
                logger.warning("Halt of %s raised %s: %s", node.name, type(e).__name__, e)
                record.errors[node.name] = f"halt: {type(e).__name__}: {e}"
    return status, record


# --- Introspection ---

_STATUS_STYLE = {
    NodeStatus.SUCCESS: "green",
    NodeStatus.FAILURE: "red",
    NodeStatus.RUNNING: "yellow",
}


def render_tree(tree: TreeNode) -> RichTree:
    """Rich rendering of the tree with the status of the last tick."""

    def label(node: TreeNode) -> str:
        text = f"[bold]{node.kind.value}[/bold] {node.name}"
        if node.kind in LEAF_KINDS and node.leaf_type != node.name:
            text += f" [dim]({node.leaf_type})[/dim]"
        if node.last_status is not None:
            style = _STATUS_STYLE[node.last_status]
            text += f" [{style}]{node.last_status.value}[/{style}]"
        return text

    def add(branch: RichTree, node: TreeNode) -> None:
        sub = branch.add(label(node))
        for child in node.children:
            add(sub, child)

    root = RichTree(label(tree))
    for child in tree.children:
        add(root, child)
    return root
