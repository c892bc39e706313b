# !
#  * Per-(worker, resource) stream schedulers: HTTP/2 multiplexing with a
#  * flow-control window, whole-stream FIFO and enforced ordering.
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..trace_model import ResourceKind
import logging

logger = logging.getLogger(__name__)


class DuplicateStream(ValueError):
    pass


class EmptyScheduler(IndexError):
    pass


class SchedulerBusy(RuntimeError):
    pass


@dataclass(frozen=True)
class Http2Multiplex:
    """First service of a stream is capped at ``win_bytes``; a preempted
    stream goes to the tail and its second service runs to completion."""

    win_bytes: float

    def __post_init__(self):
        if not self.win_bytes > 0:
            raise ValueError(f"flow-control window must be positive, got {self.win_bytes}")

    def __str__(self):
        win = "inf" if math.isinf(self.win_bytes) else int(self.win_bytes)
        return f"http2:{win}"


@dataclass(frozen=True)
class WholeStreamFifo:
    """Flow control disabled: streams are sent whole, in arrival order."""

    def __str__(self):
        return "fifo"


@dataclass(frozen=True)
class EnforcedOrder:
    """Flow control disabled and streams sent whole in a given order; ops
    missing from the order are sent last, by arrival."""

    order: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if len(set(self.order)) != len(self.order):
            dup = sorted({o for o in self.order if self.order.count(o) > 1})
            raise ValueError(f"enforced order lists ops more than once: {dup}")

    def __str__(self):
        return f"order:{len(self.order)} ops"


SchedulerPolicy = Union[Http2Multiplex, WholeStreamFifo, EnforcedOrder]


@dataclass
class StreamState:
    op_id: str
    remaining_bytes: float
    remaining_work_us: float
    size_bytes: float
    served_once: bool = False
    arrival: int = 0


@dataclass
class Chunk:
    """A contiguous slice of an operation, served by one resource.

    ``remaining_us`` is the work left at full resource share; ``work_us``
    is the chunk's total work when it was emitted.
    """

    main_op: str
    size_bytes: float
    remaining_us: float
    is_last: bool
    worker: int = 0
    res: Optional[ResourceKind] = None
    work_us: float = 0.0
    start_us: float = 0.0


def chunk_duration_us(size_bytes: float, bandwidth_bps: float) -> float:
    """Time to send ``size_bytes`` at full bandwidth, in fractional us."""
    if bandwidth_bps <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_bps}")
    return size_bytes * 8e6 / bandwidth_bps


class StreamScheduler:
    """Queue of pending streams on one resource of one worker.

    Links use the configured policy; computation resources use
    WholeStreamFifo with work measured in microseconds.
    """

    def __init__(
        self,
        policy: Optional[SchedulerPolicy] = None,
        worker: int = 0,
        res: Optional[ResourceKind] = None,
    ):
        self.policy = policy or WholeStreamFifo()
        self.worker = worker
        self.res = res
        self.in_flight = None
        self._queue: List[StreamState] = []
        self._ids = set()
        self._arrivals = 0
        if isinstance(self.policy, EnforcedOrder):
            self._rank = {op: i for i, op in enumerate(self.policy.order)}
        else:
            self._rank = None

    def __len__(self):
        return len(self._queue)

    @property
    def queued(self) -> List[str]:
        """Op ids in service order."""
        return [s.op_id for s in self._queue]

    def _key(self, state: StreamState):
        return (self._rank.get(state.op_id, len(self._rank)), state.arrival)

    def add(self, op_id: str, size_bytes: float, work_us: Optional[float] = None):
        """Enqueue a stream.

        Args:
            op_id: The operation the stream carries.
            size_bytes: Stream size; chunks split it.
            work_us: Service time of the whole stream at full share.
                Defaults to ``size_bytes`` (one unit per us).
        """
        if op_id in self._ids:
            raise DuplicateStream(
                f"op {op_id} is already queued on worker {self.worker} {self.res}"
            )
        state = StreamState(
            op_id,
            size_bytes,
            size_bytes if work_us is None else work_us,
            size_bytes,
            arrival=self._arrivals,
        )
        self._arrivals += 1
        self._ids.add(op_id)
        if self._rank is None:
            self._queue.append(state)
            return
        key = self._key(state)
        pos = len(self._queue)
        while pos > 0 and self._key(self._queue[pos - 1]) > key:
            pos -= 1
        self._queue.insert(pos, state)

    def remove_chunk(self) -> Chunk:
        """Select the next chunk to serve and mark it in flight."""
        if self.in_flight is not None:
            raise SchedulerBusy(
                f"worker {self.worker} {self.res} already serves {self.in_flight.main_op}"
            )
        if not self._queue:
            raise EmptyScheduler(f"no stream queued on worker {self.worker} {self.res}")
        state = self._queue.pop(0)
        win = getattr(self.policy, "win_bytes", math.inf)
        if not state.served_once and state.remaining_bytes > win:
            size = win
            work = state.remaining_work_us * win / state.remaining_bytes
            state.remaining_bytes -= win
            state.remaining_work_us -= work
            state.served_once = True
            self._queue.append(state)
            is_last = False
        else:
            size, work = state.remaining_bytes, state.remaining_work_us
            self._ids.discard(state.op_id)
            is_last = True
        chunk = Chunk(state.op_id, size, work, is_last, self.worker, self.res, work)
        self.in_flight = chunk
        return chunk

    def complete(self, chunk: Chunk):
        """Release the resource after ``chunk`` was served."""
        if self.in_flight is not chunk:
            raise RuntimeError(f"chunk of {chunk.main_op} is not in flight here")
        self.in_flight = None


def predict_stream_endtimes(
    streams: Iterable[Tuple[str, float, float]],
    win_bytes: float,
    bandwidth_bps: Optional[float] = None,
) -> List[Tuple[str, float]]:
    """Replay HTTP/2 multiplexing on one idle link.

    Args:
        streams: (op id, start_us, size_bytes) triples.
        win_bytes: The flow-control window.
        bandwidth_bps: Link bandwidth; if None, one byte is sent per us.

    Returns:
        (op id, end_us) pairs in the order of ``streams``.
    """
    streams = list(streams)
    pending = sorted(range(len(streams)), key=lambda i: (streams[i][1], i))
    sched = StreamScheduler(Http2Multiplex(win_bytes))
    ends = {}
    t = 0.0
    i = 0
    while i < len(pending) or len(sched):
        if not len(sched):
            t = max(t, streams[pending[i]][1])
        while i < len(pending) and streams[pending[i]][1] <= t:
            op_id, _, size = streams[pending[i]]
            work = size if bandwidth_bps is None else chunk_duration_us(size, bandwidth_bps)
            sched.add(op_id, size, work)
            i += 1
        chunk = sched.remove_chunk()
        t += chunk.remaining_us
        sched.complete(chunk)
        if chunk.is_last:
            ends[chunk.main_op] = t
    return [(op_id, ends[op_id]) for op_id, _, _ in streams]


def load_order(path: str) -> List[str]:
    """Read op ids, one per line; blank lines and ``#`` comments are skipped."""
    order = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                order.append(line)
    return order


def order_variant(order: Sequence[str], variant: str = "as-is", seed: int = 0) -> List[str]:
    """The given order, its reverse, or a seeded random permutation."""
    if variant == "as-is":
        return list(order)
    if variant == "reverse":
        return list(reversed(order))
    if variant == "shuffle":
        rng = np.random.Generator(np.random.PCG64(seed))
        return [order[i] for i in rng.permutation(len(order))]
    raise ValueError(f"unknown order variant {variant!r}; use as-is, reverse or shuffle")


def parse_policy(
    text: str,
    default_win: Optional[float] = None,
    order_variant_name: str = "as-is",
    seed: int = 0,
) -> SchedulerPolicy:
    """Build a policy from ``http2[:<win_bytes>|:inf]``, ``fifo`` or
    ``order:<file>``."""
    name, _, arg = text.partition(":")
    if name == "http2":
        if not arg:
            if default_win is None:
                raise ValueError("http2 policy needs a window: http2:<win_bytes>")
            return Http2Multiplex(default_win)
        if arg == "inf":
            return Http2Multiplex(math.inf)
        try:
            return Http2Multiplex(int(arg))
        except ValueError:
            raise ValueError(f"bad flow-control window in policy {text!r}")
    if name == "fifo" and not arg:
        return WholeStreamFifo()
    if name == "order" and arg:
        return EnforcedOrder(tuple(order_variant(load_order(arg), order_variant_name, seed)))
    raise ValueError(f"unknown link policy {text!r}; use http2:<win_bytes>, fifo or order:<file>")
