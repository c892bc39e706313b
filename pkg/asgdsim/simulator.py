# !
#  * Discrete-event generation of synthetic training traces for W workers
#  * and one or two parameter servers.
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from .config import DEFAULT_WIN_BYTES, EPS_US, RANDOM_SEED, SIM_STEPS
from .preprocess import OverheadModel, SimStep, preprocess_profile
from .scheduler import (
    Chunk,
    Http2Multiplex,
    SchedulerPolicy,
    StreamScheduler,
    WholeStreamFifo,
)
from .trace_model import (
    COMM,
    DOWNLINK,
    ProfileBundle,
    ResourceKind,
    Step,
    WORKER,
    critical_path_us,
)
import logging

logger = logging.getLogger(__name__)


class DeadlockError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    """A target cluster: W workers, M parameter servers and the bandwidth
    of every link direction of every server."""

    num_workers: int
    num_ps: int = 1
    bandwidth_bps: float = 1e9
    policy: SchedulerPolicy = field(
        default_factory=lambda: Http2Multiplex(DEFAULT_WIN_BYTES)
    )
    steps_per_worker: int = SIM_STEPS
    seed: int = RANDOM_SEED

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError(f"num_workers must be at least 1, got {self.num_workers}")
        if self.num_ps not in (1, 2):
            raise ValueError(f"num_ps must be 1 or 2, got {self.num_ps}")
        if not self.bandwidth_bps > 0:
            raise ValueError(f"bandwidth_bps must be positive, got {self.bandwidth_bps}")
        if self.steps_per_worker < 1:
            raise ValueError(
                f"steps_per_worker must be at least 1, got {self.steps_per_worker}"
            )
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


class ActiveSet:
    """Workers with a chunk in flight, per link (direction, ps index)."""

    def __init__(self):
        self._links: Dict[Tuple[str, int], Set[int]] = defaultdict(set)

    def add(self, res: ResourceKind, worker: int):
        self._links[(res.kind, res.ps_index)].add(worker)

    def discard(self, res: ResourceKind, worker: int):
        self._links[(res.kind, res.ps_index)].discard(worker)

    def workers(self, direction: str, ps_index: int = 0) -> FrozenSet[int]:
        return frozenset(self._links.get((direction, ps_index), ()))

    def count(self, direction: str, ps_index: int = 0) -> int:
        return len(self._links.get((direction, ps_index), ()))


def share_two_ps(worker: int, ps_index: int, direction: str, active: ActiveSet) -> float:
    """Bandwidth share of ``worker`` on its link with server ``ps_index``
    when there are two servers.

    Connections to the same server share it equally. A worker using both
    servers in one direction cannot exceed its own interface: if the two
    equal shares add up to more than 1, the larger one is capped at
    ``1 - smaller`` (equal shares get 1/2 each).
    """
    n = active.count(direction, ps_index)
    s = 1.0 / n if n else 1.0
    other = 1 - ps_index
    if worker in active.workers(direction, other):
        s_other = 1.0 / active.count(direction, other)
        if s + s_other > 1:
            if s > s_other:
                s = 1.0 - s_other
            elif s == s_other:
                s = 0.5
    return s


def share(res: ResourceKind, active: ActiveSet, worker: int = 0, num_ps: int = 1) -> float:
    """Fraction of ``res`` available to ``worker``.

    Links are shared equally among their active workers; computation on
    the worker and on the parameter server is independent per worker.
    """
    if not res.is_link:
        return 1.0
    if num_ps == 2:
        return share_two_ps(worker, res.ps_index, res.kind, active)
    n = active.count(res.kind, res.ps_index)
    return 1.0 / n if n else 1.0


@dataclass(frozen=True)
class Segment:
    worker: int
    resource: str
    op_id: str
    start_us: float
    duration_us: float


@dataclass(frozen=True)
class StepCompletion:
    worker: int
    step: int
    time_us: float


@dataclass
class SyntheticTrace:
    """Execution segments and step completions of a simulated cluster."""

    events: List[Segment] = field(default_factory=list)
    step_completions: List[StepCompletion] = field(default_factory=list)
    num_workers: int = 1
    origin_us: float = 0.0

    def completions(self, worker: int) -> List[float]:
        return [c.time_us for c in self.step_completions if c.worker == worker]

    def shifted(self, delta_us: float) -> "SyntheticTrace":
        return SyntheticTrace(
            [
                Segment(e.worker, e.resource, e.op_id, e.start_us + delta_us, e.duration_us)
                for e in self.events
            ],
            [
                StepCompletion(c.worker, c.step, c.time_us + delta_us)
                for c in self.step_completions
            ],
            self.num_workers,
            self.origin_us + delta_us,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class NullObserver:
    """Observer without observation"""

    def on_event(self, t_us: float, dt_us: float, shares: List[Tuple[Chunk, float]]):
        pass


class _StepTemplate:
    """Dependency counts and ordered edges of one step, shared by every
    worker that samples it."""

    def __init__(self, step: Step):
        self.step = step
        position = {op.id: i for i, op in enumerate(step.ops)}
        self.waiting = {op.id: len(op.waiting_for) for op in step.ops}
        self.dependents = {
            op.id: sorted(op.dependent_ops, key=position.__getitem__) for op in step.ops
        }
        sources = step.sources()
        # each step starts with downlinks
        self.sources = [op for op in sources if op.res.kind == DOWNLINK] + [
            op for op in sources if op.res.kind != DOWNLINK
        ]


class _WorkerState:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.template: Optional[_StepTemplate] = None
        self.waiting: Dict[str, int] = {}
        self.remaining = 0
        self.completed = 0
        self.schedulers: Dict[ResourceKind, StreamScheduler] = {}


class TraceGenerator:
    """Processor-sharing event loop over the chunks of all workers.

    Each worker runs one sampled step at a time. Every (worker, resource)
    pair has its own scheduler and at most one chunk in the queue ``Q``;
    at each event the chunk with the smallest remaining / share finishes
    and every queued chunk progresses at its current share.
    """

    def __init__(
        self,
        steps: Sequence[Step],
        config: ClusterConfig,
        observer: Optional[NullObserver] = None,
    ):
        if not steps:
            raise ValueError("at least one step is needed")
        for step in steps:
            for op in step.ops:
                if op.kind == COMM and not op.is_transmission:
                    raise ValueError(
                        f"op {op.id} of step {step.step_index} is not preprocessed"
                    )
                if op.res.kind != WORKER and op.res.ps_index >= config.num_ps:
                    raise ValueError(
                        f"op {op.id} uses {op.res} but the cluster has {config.num_ps} ps"
                    )
            if critical_path_us(step) <= 0:
                raise ValueError(f"step {step.step_index} takes no time")
        self.config = config
        self.observer = observer or NullObserver()
        self.templates = [_StepTemplate(s) for s in steps]
        seeds = np.random.SeedSequence(config.seed).spawn(config.num_workers)
        self.workers = [
            _WorkerState(np.random.Generator(np.random.PCG64(s))) for s in seeds
        ]
        self.active = ActiveSet()
        self.queue: List[Chunk] = []
        self.trace = SyntheticTrace(num_workers=config.num_workers)
        self.t = 0.0
        self.n_events = 0

    def _scheduler(self, w: int, res: ResourceKind) -> StreamScheduler:
        schedulers = self.workers[w].schedulers
        if res not in schedulers:
            policy = self.config.policy if res.is_link else WholeStreamFifo()
            schedulers[res] = StreamScheduler(policy, w, res)
        return schedulers[res]

    def _emit(self, sched: StreamScheduler):
        chunk = sched.remove_chunk()
        chunk.start_us = self.t
        self.queue.append(chunk)
        if chunk.res.is_link:
            self.active.add(chunk.res, chunk.worker)
        logger.debug(
            f"t={self.t:.3f} worker {chunk.worker} {chunk.res} chunk of "
            f"{chunk.main_op} ({chunk.work_us:.3f} us, last={chunk.is_last})"
        )

    def _enqueue(self, w: int, op_id: str):
        op = self.workers[w].template.step.op(op_id)
        sched = self._scheduler(w, op.res)
        if op.kind == COMM:
            sched.add(op.id, op.size_bytes, op.nominal_duration_us)
        else:
            sched.add(op.id, op.duration_us, op.duration_us)
        if sched.in_flight is None:
            self._emit(sched)

    def start_random_step(self, w: int):
        """Sample a step with replacement for worker ``w`` and start its
        source operations."""
        state = self.workers[w]
        template = self.templates[int(state.rng.integers(len(self.templates)))]
        state.template = template
        state.waiting = dict(template.waiting)
        state.remaining = len(template.step.ops)
        logger.debug(f"worker {w} starts step {template.step.step_index} at {self.t:.3f}")
        for op in template.sources:
            self._enqueue(w, op.id)

    def _share(self, chunk: Chunk) -> float:
        return share(chunk.res, self.active, chunk.worker, self.config.num_ps)

    def _finish(self, chunk: Chunk):
        w = chunk.worker
        state = self.workers[w]
        sched = state.schedulers[chunk.res]
        sched.complete(chunk)
        self.trace.events.append(
            Segment(w, str(chunk.res), chunk.main_op, chunk.start_us, self.t - chunk.start_us)
        )
        if chunk.is_last:
            state.remaining -= 1
            for d in state.template.dependents[chunk.main_op]:
                state.waiting[d] -= 1
                if state.waiting[d] == 0:
                    self._enqueue(w, d)
        if sched.in_flight is None:
            if len(sched):
                self._emit(sched)
            elif chunk.res.is_link:
                self.active.discard(chunk.res, w)
        if state.remaining == 0:
            state.completed += 1
            self.trace.step_completions.append(StepCompletion(w, state.completed, self.t))
            if state.completed < self.config.steps_per_worker:
                self.start_random_step(w)

    def run(self) -> SyntheticTrace:
        cfg = self.config
        logger.info(
            f"simulating W={cfg.num_workers} M={cfg.num_ps} B={cfg.bandwidth_bps:.6g} bps "
            f"policy={cfg.policy} steps={cfg.steps_per_worker} seed={cfg.seed}"
        )
        for w in range(cfg.num_workers):
            self.start_random_step(w)
        queue = self.queue
        while queue:
            shares = [self._share(c) for c in queue]
            best = min(
                range(len(queue)),
                key=lambda i: (
                    queue[i].remaining_us / shares[i],
                    queue[i].worker,
                    queue[i].main_op,
                    str(queue[i].res),
                ),
            )
            dt = queue[best].remaining_us / shares[best]
            self.observer.on_event(self.t, dt, list(zip(queue, shares)))
            self.t += dt
            for c, s in zip(queue, shares):
                c.remaining_us -= dt * s
                if c.remaining_us < EPS_US:
                    c.remaining_us = 0.0
            chunk = queue.pop(best)
            self.n_events += 1
            self._finish(chunk)
        stuck = [
            w for w, s in enumerate(self.workers) if s.completed < cfg.steps_per_worker
        ]
        if stuck:
            w = stuck[0]
            pending = sorted(op for op, n in self.workers[w].waiting.items() if n > 0)
            raise DeadlockError(
                f"no runnable chunk at t={self.t:.3f} us but worker {w} waits on {pending}"
            )
        logger.info(
            f"simulated {self.t / 1e6:.6g} s in {self.n_events} events, "
            f"{len(self.trace.step_completions)} steps"
        )
        return self.trace


def generate_trace(
    steps: Sequence[Step],
    config: ClusterConfig,
    observer: Optional[NullObserver] = None,
) -> SyntheticTrace:
    """Generate a synthetic trace from preprocessed steps.

    Args:
        steps: Steps produced by ``preprocess_profile`` at
            ``config.bandwidth_bps``.
        config: The target cluster.
        observer: Optional object whose ``on_event(t_us, dt_us, shares)``
            is called at every event with the (chunk, share) pairs in Q.

    Returns:
        A SyntheticTrace with ``num_workers * steps_per_worker`` steps.
    """
    return TraceGenerator(steps, config, observer).run()


def simulate(
    profile: ProfileBundle,
    config: ClusterConfig,
    model: Optional[OverheadModel] = None,
    observer: Optional[NullObserver] = None,
) -> SyntheticTrace:
    if config.num_ps != profile.num_ps:
        raise ValueError(
            f"profile was recorded with {profile.num_ps} ps; predicting for "
            f"{config.num_ps} ps needs a profile recorded with {config.num_ps}"
        )
    steps: List[SimStep] = preprocess_profile(profile, config.bandwidth_bps, model)
    return generate_trace(steps, config, observer)


def partition_parameters(layer_sizes: Sequence[int], num_ps: int) -> List[int]:
    """Assign layers, in order, to the server currently holding the fewest
    bytes; ties go to the lower index."""
    if num_ps < 1:
        raise ValueError(f"num_ps must be at least 1, got {num_ps}")
    totals = [0] * num_ps
    assignment = []
    for size in layer_sizes:
        if size < 0:
            raise ValueError(f"layer size must be non-negative, got {size}")
        i = min(range(num_ps), key=totals.__getitem__)
        totals[i] += size
        assignment.append(i)
    return assignment


def partition_layers(layers: pd.DataFrame, num_ps: int) -> Tuple[pd.DataFrame, List[int]]:
    """Greedy partition of a named layer table.

    Args:
        layers: A table with ``layer`` and ``size_bytes`` columns, in model
            order.
        num_ps: The number of parameter servers.

    Returns:
        A copy of ``layers`` with a ``ps`` column, and the bytes held by
        each server.
    """
    missing = [c for c in ("layer", "size_bytes") if c not in layers.columns]
    if missing:
        raise ValueError(f"layer table is missing columns {missing}")
    sizes = [int(s) for s in layers["size_bytes"]]
    assigned = layers.copy()
    assigned["ps"] = partition_parameters(sizes, num_ps)
    totals = assigned.groupby("ps")["size_bytes"].sum().reindex(range(num_ps), fill_value=0)
    return assigned, [int(t) for t in totals]


def load_layer_sizes(path: str) -> pd.DataFrame:
    """Read a ``layer,size_bytes`` CSV; ``#`` starts a comment."""
    return pd.read_csv(path, comment="#", skipinitialspace=True)
