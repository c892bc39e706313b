# !
#  * Throughput of synthetic traces, analytical baselines, accuracy of the
#  * multiplexing model and trace export.
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Hashable, Iterable, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import BATCH_SIZE, SATURATION_TOLERANCE, WARMUP_STEPS
from .preprocess import comm_bytes
from .scheduler import predict_stream_endtimes
from .simulator import ClusterConfig, SyntheticTrace
from .trace_model import DOWNLINK, UPLINK, Step, critical_path_us
import logging

logger = logging.getLogger(__name__)


class InsufficientSteps(ValueError):
    pass


class MismatchedOps(ValueError):
    pass


@dataclass(frozen=True)
class ThroughputReport:
    examples_per_sec: float
    workers: int
    steps_counted: int
    warmup_excluded: int
    per_worker_rates: Tuple[float, ...]
    simulated_us: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self):
        lines = [
            f"throughput: {self.examples_per_sec:.4f} examples/s",
            f"workers: {self.workers}",
            f"steps counted: {self.steps_counted} (warmup excluded: {self.warmup_excluded} per worker)",
            f"simulated time: {self.simulated_us / 1e6:.6f} s",
        ]
        lines += [
            f"  worker {w}: {r:.4f} examples/s" for w, r in enumerate(self.per_worker_rates)
        ]
        return "\n".join(lines)


@dataclass(frozen=True)
class ErrorStats:
    """Relative errors as fractions."""

    average: float
    median: float
    p95: float
    max: float

    def to_dict(self) -> dict:
        return asdict(self)


def throughput(
    trace: SyntheticTrace, batch_size: int = BATCH_SIZE, warmup_steps: int = WARMUP_STEPS
) -> ThroughputReport:
    """Examples/s processed by all workers, after a warmup.

    For each worker, the completions after its first ``warmup_steps`` steps
    are averaged over the time from the last warmup completion (the trace
    origin if there is no warmup) to the last completion.
    """
    if warmup_steps < 0:
        raise ValueError(f"warmup_steps must be non-negative, got {warmup_steps}")
    rates = []
    counted = 0
    end = trace.origin_us
    for w in range(trace.num_workers):
        times = sorted(trace.completions(w))
        if len(times) <= warmup_steps:
            raise InsufficientSteps(
                f"worker {w} completed {len(times)} steps; more than the "
                f"{warmup_steps} warmup steps are needed"
            )
        boundary = times[warmup_steps - 1] if warmup_steps else trace.origin_us
        span_us = times[-1] - boundary
        if span_us <= 0:
            raise InsufficientSteps(f"worker {w} completed its steps in no time")
        n = len(times) - warmup_steps
        rates.append(n * batch_size * 1e6 / span_us)
        counted += n
        end = max(end, times[-1])
    return ThroughputReport(
        float(math.fsum(rates)),
        trace.num_workers,
        counted,
        warmup_steps,
        tuple(rates),
        end - trace.origin_us,
    )


class BaselineModel:
    """Interface of analytical throughput models compared with the
    simulation, e.g. queueing models built from the same single-worker
    measurements."""

    name = "baseline"

    def predict(self, num_workers: int) -> float:
        """Examples/s with ``num_workers`` workers."""
        raise NotImplementedError


def cynthia_throughput(
    num_workers: int,
    batch_size: float,
    t_p_sec: float,
    t_c_sec: float,
    u_1: float,
    comm_scale: float = 1.0,
) -> float:
    """``W K / (T_P max(1, W U_1) + 2 T_C)``.

    Args:
        num_workers: W.
        batch_size: K.
        t_p_sec: Time to process a batch.
        t_c_sec: Model or update transmission time.
        u_1: Network utilization measured with one worker.
        comm_scale: Multiplies T_C; 0.5 accounts for separate uplink and
            downlink resources.
    """
    if num_workers <= 0 or batch_size <= 0 or t_p_sec <= 0 or t_c_sec <= 0:
        raise ValueError("W, K, T_P and T_C must be positive")
    if not 0 <= u_1 <= 1:
        raise ValueError(f"U_1 must be in [0, 1], got {u_1}")
    if comm_scale <= 0:
        raise ValueError(f"comm_scale must be positive, got {comm_scale}")
    return (
        num_workers
        * batch_size
        / (t_p_sec * max(1, num_workers * u_1) + 2 * t_c_sec * comm_scale)
    )


class CynthiaBaseline(BaselineModel):
    name = "cynthia"

    def __init__(self, batch_size, t_p_sec, t_c_sec, u_1, comm_scale=1.0):
        self.batch_size = batch_size
        self.t_p_sec = t_p_sec
        self.t_c_sec = t_c_sec
        self.u_1 = u_1
        self.comm_scale = comm_scale
        if comm_scale != 1.0:
            self.name = f"cynthia_x{comm_scale:g}"

    def predict(self, num_workers: int) -> float:
        return cynthia_throughput(
            num_workers, self.batch_size, self.t_p_sec, self.t_c_sec, self.u_1, self.comm_scale
        )


def error_stats(errors: Sequence[float]) -> ErrorStats:
    """Average, lower median, nearest-rank 95th percentile and maximum."""
    e = np.sort(np.asarray(errors, dtype=float))
    if not len(e):
        raise ValueError("no errors to summarize")
    n = len(e)
    return ErrorStats(
        float(e.mean()),
        float(e[(n - 1) // 2]),
        float(e[math.ceil(0.95 * n) - 1]),
        float(e[-1]),
    )


def multiplex_error_stats(
    predicted: Iterable[Tuple[Hashable, float]],
    measured: Iterable[Tuple[Hashable, float]],
) -> ErrorStats:
    """Relative end-time errors ``|pred - meas| / meas`` over the same ops."""
    pred: Dict[Hashable, float] = dict(predicted)
    meas: Dict[Hashable, float] = dict(measured)
    if pred.keys() != meas.keys():
        missing = sorted(map(str, pred.keys() ^ meas.keys()))
        raise MismatchedOps(f"predicted and measured ops differ: {missing}")
    errors = []
    for op in sorted(meas, key=str):
        if meas[op] <= 0:
            raise ValueError(f"measured end time of {op} must be positive")
        errors.append(abs(pred[op] - meas[op]) / meas[op])
    return error_stats(errors)


STREAM_COLUMNS = ["step", "op", "start_us", "end_us", "size_bytes"]


def load_streams(path: str) -> pd.DataFrame:
    """Measured downlink streams: a CSV with step, op, start_us, end_us,
    size_bytes columns."""
    df = pd.read_csv(path, comment="#", skipinitialspace=True)
    missing = [c for c in STREAM_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    return df[STREAM_COLUMNS]


def validate_multiplex(
    streams: pd.DataFrame, win_bytes: float, bandwidth_bps: float = None
) -> Tuple[pd.DataFrame, ErrorStats]:
    """Predict every measured stream's end time, step by step, and
    summarize the relative errors.

    Returns:
        The input rows with ``predicted_end_us`` and ``error`` columns, and
        the ErrorStats over all rows.
    """
    rows = []
    for step, group in streams.groupby("step", sort=True):
        ends = predict_stream_endtimes(
            zip(group["op"].astype(str), group["start_us"], group["size_bytes"]),
            win_bytes,
            bandwidth_bps,
        )
        for (op, end), (_, row) in zip(ends, group.iterrows()):
            rows.append({**row.to_dict(), "op": op, "predicted_end_us": end})
    table = pd.DataFrame(rows, columns=STREAM_COLUMNS + ["predicted_end_us"])
    stats = multiplex_error_stats(
        (((s, o), p) for s, o, p in zip(table["step"], table["op"], table["predicted_end_us"])),
        (((s, o), m) for s, o, m in zip(table["step"], table["op"], table["end_us"])),
    )
    table["error"] = (table["predicted_end_us"] - table["end_us"]).abs() / table["end_us"]
    logger.info(
        f"multiplex model over {len(table)} streams: average error {stats.average:.2%}, "
        f"max {stats.max:.2%}"
    )
    return table, stats


def throughput_bound(
    steps: Sequence[Step], config: ClusterConfig, batch_size: int = BATCH_SIZE
) -> float:
    """Upper bound on examples/s: every worker needs at least a critical
    path per step, and every link moves at most B bits/s."""
    mean_path_us = float(np.mean([critical_path_us(s) for s in steps]))
    bound = config.num_workers * batch_size * 1e6 / mean_path_us
    for direction in (DOWNLINK, UPLINK):
        for i in range(config.num_ps):
            step_bytes = float(np.mean([comm_bytes(s, direction, i) for s in steps]))
            if step_bytes > 0:
                bound = min(bound, batch_size * config.bandwidth_bps / (8 * step_bytes))
    return bound


def saturation_point(
    workers: Sequence[int], rates: Sequence[float], tolerance: float = SATURATION_TOLERANCE
) -> int:
    """Smallest worker count whose throughput is within ``tolerance`` of the
    best one."""
    best = max(rates)
    for w, r in sorted(zip(workers, rates)):
        if r >= (1 - tolerance) * best:
            return w
    return max(workers)


def chrome_trace(trace: SyntheticTrace) -> dict:
    """Browser trace document: one complete event per segment."""
    return {
        "traceEvents": [
            {
                "name": e.op_id,
                "ph": "X",
                "ts": e.start_us,
                "dur": e.duration_us,
                "pid": e.worker,
                "tid": e.resource,
            }
            for e in trace.events
        ]
    }


def export_chrome_trace(trace: SyntheticTrace, path: str):
    with open(path, "w") as out:
        json.dump(chrome_trace(trace), out, separators=(",", ":"))
