# !
#  * Operations, steps and profiles recorded with one worker, and the
#  * canonical profile document they are loaded from.
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import networkx as nx
import logging

logger = logging.getLogger(__name__)

DOWNLINK = "downlink"
UPLINK = "uplink"
WORKER = "worker"
PS = "ps"
LINKS = (DOWNLINK, UPLINK)
RESOURCES = (DOWNLINK, WORKER, UPLINK, PS)
COMM = "comm"
COMP = "comp"
META_FIELDS = {
    "profile_bandwidth_bps": int,
    "alpha_us_per_byte": float,
    "beta_us": float,
    "win_bytes": int,
    "num_ps": int,
}


class ProfileError(ValueError):
    """Base class of the errors raised while loading a profile."""


class ParseError(ProfileError):
    pass


class SchemaError(ProfileError):
    pass


class DanglingRef(ProfileError):
    pass


class StructureMismatch(ProfileError):
    pass


class CycleError(ProfileError):
    def __init__(self, cycle: List[str], step_index: int = 0):
        self.cycle = cycle
        self.step_index = step_index
        super().__init__(
            f"dependency cycle in step {step_index}: {' -> '.join(cycle + cycle[:1])}"
        )


@dataclass(frozen=True, order=True)
class ResourceKind:
    """A resource used by an operation: a link to or from a parameter
    server, the worker's compute device, or a parameter server's cores."""

    kind: str
    ps_index: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "ResourceKind":
        """Parse ``downlink:0``, ``uplink:1``, ``ps:0`` or ``worker``."""
        name, sep, index = str(text).partition(":")
        if name not in RESOURCES:
            raise SchemaError(f"unknown resource {text!r}")
        if name == WORKER:
            if sep:
                raise SchemaError(f"worker resource takes no ps index: {text!r}")
            return cls(WORKER)
        if not sep:
            # single-server shorthand
            return cls(name, 0)
        try:
            ps_index = int(index)
        except ValueError:
            raise SchemaError(f"bad ps index in resource {text!r}")
        if ps_index < 0:
            raise SchemaError(f"bad ps index in resource {text!r}")
        return cls(name, ps_index)

    @property
    def is_link(self) -> bool:
        return self.kind in LINKS

    def __str__(self):
        if self.kind == WORKER:
            return WORKER
        return f"{self.kind}:{self.ps_index}"


def downlink(ps_index: int = 0) -> ResourceKind:
    return ResourceKind(DOWNLINK, ps_index)


def uplink(ps_index: int = 0) -> ResourceKind:
    return ResourceKind(UPLINK, ps_index)


def ps(ps_index: int = 0) -> ResourceKind:
    return ResourceKind(PS, ps_index)


worker = ResourceKind(WORKER)


@dataclass(frozen=True)
class Operation:
    """One node of a profiled SGD step.

    Communication operations carry ``size_bytes``, computation operations
    ``duration_us``. After preprocessing, communication operations are
    transmissions (``is_transmission``) whose ``nominal_duration_us`` is
    derived from the target bandwidth.
    """

    id: str
    res: ResourceKind
    kind: str
    duration_us: Optional[float] = None
    size_bytes: Optional[int] = None
    waiting_for: FrozenSet[str] = frozenset()
    dependent_ops: FrozenSet[str] = frozenset()
    is_transmission: bool = False
    nominal_duration_us: Optional[int] = None

    @property
    def is_comm(self) -> bool:
        return self.kind == COMM

    @property
    def work_us(self) -> Optional[float]:
        """Service time at full resource share, if known."""
        if self.kind == COMP:
            return self.duration_us
        return self.nominal_duration_us


@dataclass(frozen=True)
class Violation:
    op_id: Optional[str]
    rule: str
    detail: str = ""


@dataclass(frozen=True)
class Step:
    """A DAG of operations making up one profiled SGD iteration."""

    ops: Tuple[Operation, ...]
    step_index: int = 0

    @cached_property
    def index(self) -> Dict[str, Operation]:
        return {op.id: op for op in self.ops}

    def op(self, op_id: str) -> Operation:
        return self.index[op_id]

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(op.id for op in self.ops)
        for op in self.ops:
            for dep in op.waiting_for:
                g.add_edge(dep, op.id)
        return g

    def sources(self) -> List[Operation]:
        return [op for op in self.ops if not op.waiting_for]

    def topological_order(self) -> List[str]:
        return list(nx.topological_sort(self.graph()))

    def structure(self) -> Tuple:
        """Signature of the dependency structure, ignoring durations."""
        return tuple(
            (op.id, str(op.res), op.kind, tuple(sorted(op.waiting_for)))
            for op in self.ops
        )


@dataclass(frozen=True)
class ProfileBundle:
    steps: Tuple[Step, ...]
    profile_bandwidth_bps: int
    alpha_us_per_byte: float
    beta_us: float
    win_bytes: int
    num_ps: int = 1


def validate_step(step: Step, num_ps: Optional[int] = None) -> List[Violation]:
    """Check the structural invariants of a step.

    Args:
        step: The step to check.
        num_ps: If given, ps indices must be below it.

    Returns:
        One Violation per breach; empty iff the step is well formed.
    """
    violations = []
    seen = set()
    for op in step.ops:
        if op.id in seen:
            violations.append(Violation(op.id, "duplicate-id"))
        seen.add(op.id)
        if op.kind not in (COMM, COMP):
            violations.append(Violation(op.id, "unknown-kind", op.kind))
            continue
        if op.kind == COMM and (op.size_bytes is None or op.duration_us is not None):
            violations.append(
                Violation(op.id, "field-mismatch", "communication needs size_bytes only")
            )
        if op.kind == COMP and (op.duration_us is None or op.size_bytes is not None):
            violations.append(
                Violation(op.id, "field-mismatch", "computation needs duration_us only")
            )
        if (op.kind == COMM) != op.res.is_link:
            violations.append(
                Violation(op.id, "kind-resource-mismatch", f"{op.kind} on {op.res}")
            )
        for value in (op.duration_us, op.size_bytes):
            if value is not None and value < 0:
                violations.append(Violation(op.id, "negative-value", str(value)))
        if op.res.kind == WORKER and op.res.ps_index is not None:
            violations.append(Violation(op.id, "ps-index", "worker has no ps index"))
        if op.res.kind != WORKER and (
            op.res.ps_index is None
            or op.res.ps_index < 0
            or num_ps is not None
            and op.res.ps_index >= num_ps
        ):
            violations.append(Violation(op.id, "ps-index", str(op.res)))
    index = {op.id: op for op in step.ops}
    dangling = False
    for op in step.ops:
        for dep in sorted(op.waiting_for):
            if dep not in index:
                violations.append(Violation(op.id, "dangling-ref", dep))
                dangling = True
            elif op.id not in index[dep].dependent_ops:
                violations.append(Violation(op.id, "asymmetric-edge", dep))
        for dep in sorted(op.dependent_ops):
            if dep not in index:
                violations.append(Violation(op.id, "dangling-ref", dep))
                dangling = True
            elif op.id not in index[dep].waiting_for:
                violations.append(Violation(op.id, "asymmetric-edge", dep))
    if step.ops and not step.sources():
        violations.append(Violation(None, "no-source"))
    if not dangling:
        try:
            cycle = nx.find_cycle(step.graph())
            violations.append(
                Violation(cycle[0][0], "cycle", " -> ".join(u for u, _ in cycle))
            )
        except nx.NetworkXNoCycle:
            pass
    return violations


def critical_path_us(step: Step) -> float:
    """Length of the longest dependency path, weighting each operation by
    its full-share service time.

    Resource contention is not counted: a lone worker takes exactly this
    long per step only when no two ops that can run at the same time share
    a resource. Otherwise those ops queue and the step takes longer.
    """
    finish = {}
    for op_id in step.topological_order():
        op = step.op(op_id)
        if op.work_us is None:
            raise ValueError(
                f"operation {op_id} has no service time; preprocess the step first"
            )
        start = max((finish[d] for d in op.waiting_for), default=0.0)
        finish[op_id] = start + op.work_us
    return max(finish.values(), default=0.0)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"missing field {key!r} in {where}")
    return d[key]


def _as_float(value, key: str, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"field {key!r} in {where} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise SchemaError(f"field {key!r} in {where} must be finite, got {value!r}")
    return float(value)


def _as_int(value, key: str, where: str) -> int:
    _as_float(value, key, where)
    if value != int(value):
        raise SchemaError(f"field {key!r} in {where} must be an integer, got {value!r}")
    return int(value)


def _as_ids(raw: dict, key: str, where: str) -> set:
    ids = raw.get(key, [])
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise SchemaError(f"field {key!r} in {where} must be a list of op ids, got {ids!r}")
    return set(ids)


def _parse_step(step_dict: dict, step_index: int) -> Step:
    where = f"step {step_index}"
    if not isinstance(step_dict, dict):
        raise SchemaError(f"{where} must be an object")
    raw_ops = _require(step_dict, "ops", where)
    if not isinstance(raw_ops, list) or not raw_ops:
        raise SchemaError(f"{where} needs a non-empty 'ops' list")
    fields = {}
    waiting = {}
    dependents = {}
    for raw in raw_ops:
        if not isinstance(raw, dict):
            raise SchemaError(f"operations in {where} must be objects")
        op_id = str(_require(raw, "id", where))
        op_where = f"op {op_id!r} of {where}"
        if op_id in fields:
            raise SchemaError(f"duplicate op id {op_id!r} in {where}")
        kind = _require(raw, "kind", op_where)
        if kind not in (COMM, COMP):
            raise SchemaError(f"unknown kind {kind!r} in {op_where}")
        res = ResourceKind.parse(_require(raw, "res", op_where))
        duration = raw.get("duration_us")
        size = raw.get("size_bytes")
        if kind == COMP:
            if size is not None:
                raise SchemaError(f"computation {op_where} must not set size_bytes")
            duration = _as_int(_require(raw, "duration_us", op_where), "duration_us", op_where)
        else:
            if duration is not None:
                raise SchemaError(f"communication {op_where} must not set duration_us")
            size = _as_int(_require(raw, "size_bytes", op_where), "size_bytes", op_where)
        if (duration or 0) < 0 or (size or 0) < 0:
            raise SchemaError(f"negative duration or size in {op_where}")
        fields[op_id] = dict(id=op_id, res=res, kind=kind, duration_us=duration, size_bytes=size)
        waiting[op_id] = _as_ids(raw, "deps", op_where)
        dependents[op_id] = _as_ids(raw, "dependents", op_where)
    for op_id in fields:
        for dep in waiting[op_id] | dependents[op_id]:
            if dep not in fields:
                raise DanglingRef(f"op {op_id!r} of {where} refers to unknown op {dep!r}")
    # edges may be given from either end
    added = 0
    for op_id in fields:
        for dep in waiting[op_id]:
            if op_id not in dependents[dep]:
                dependents[dep].add(op_id)
                added += 1
        for dep in list(dependents[op_id]):
            if op_id not in waiting[dep]:
                waiting[dep].add(op_id)
                added += 1
    if added and step_index == 0:
        logger.debug(f"symmetrized {added} dependency edges in {where}")
    ops = tuple(
        Operation(
            waiting_for=frozenset(waiting[op_id]),
            dependent_ops=frozenset(dependents[op_id]),
            **f,
        )
        for op_id, f in fields.items()
    )
    step = Step(ops, step_index)
    try:
        cycle = nx.find_cycle(step.graph())
    except nx.NetworkXNoCycle:
        return step
    raise CycleError([u for u, _ in cycle], step_index)


def profile_from_dict(doc: dict) -> ProfileBundle:
    """Build a validated ProfileBundle from the canonical document."""
    if not isinstance(doc, dict):
        raise SchemaError("profile document must be an object")
    meta = _require(doc, "meta", "profile")
    if not isinstance(meta, dict):
        raise SchemaError("'meta' must be an object")
    values = {}
    for key, cast in META_FIELDS.items():
        value = _require(meta, key, "meta")
        parse = _as_int if cast is int else _as_float
        values[key] = parse(value, key, "meta")
    if values["profile_bandwidth_bps"] <= 0:
        raise SchemaError("profile_bandwidth_bps must be positive")
    if values["win_bytes"] <= 0:
        raise SchemaError("win_bytes must be positive")
    if values["alpha_us_per_byte"] < 0 or values["beta_us"] < 0:
        raise SchemaError("alpha_us_per_byte and beta_us must be non-negative")
    if values["num_ps"] < 1:
        raise SchemaError("num_ps must be at least 1")
    raw_steps = _require(doc, "steps", "profile")
    if not isinstance(raw_steps, list) or not raw_steps:
        raise SchemaError("profile needs a non-empty 'steps' list")
    steps = tuple(_parse_step(s, i) for i, s in enumerate(raw_steps))
    for step in steps:
        violations = validate_step(step, values["num_ps"])
        if violations:
            v = violations[0]
            raise SchemaError(
                f"step {step.step_index}: op {v.op_id!r} breaks {v.rule} {v.detail}".rstrip()
            )
    reference = steps[0].structure()
    for step in steps[1:]:
        if step.structure() != reference:
            raise StructureMismatch(
                f"step {step.step_index} has a different dependency structure than step 0"
            )
    return ProfileBundle(steps=steps, **values)


def profile_to_dict(bundle: ProfileBundle) -> dict:
    """The canonical document of a profile; dependencies are written in
    the waiting-for direction only."""
    steps = []
    for step in bundle.steps:
        ops = []
        for op in step.ops:
            if op.is_transmission:
                raise ValueError("preprocessed steps cannot be saved as a profile")
            d = {"id": op.id, "res": str(op.res), "kind": op.kind}
            if op.kind == COMP:
                d["duration_us"] = op.duration_us
            else:
                d["size_bytes"] = op.size_bytes
            d["deps"] = sorted(op.waiting_for)
            ops.append(d)
        steps.append({"ops": ops})
    return {
        "meta": {key: getattr(bundle, key) for key in META_FIELDS},
        "steps": steps,
    }


def load_profile(path: str) -> ProfileBundle:
    """Load and validate a profile document.

    Args:
        path: A string of the profile file name.

    Returns:
        The validated ProfileBundle, with dependency edges symmetrized.
    """
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ParseError(f"{path}: {e}") from e
    bundle = profile_from_dict(doc)
    logger.info(
        f"loaded profile {path}: {len(bundle.steps)} steps, "
        f"{len(bundle.steps[0].ops)} ops per step, {bundle.num_ps} ps"
    )
    return bundle


def save_profile(bundle: ProfileBundle, path: str):
    with open(path, "w") as f:
        json.dump(profile_to_dict(bundle), f, indent=1)
        f.write("\n")


def make_step(ops: Iterable[dict], step_index: int = 0) -> Step:
    """Build a step from op dicts in the canonical document form."""
    return _parse_step({"ops": list(ops)}, step_index)
