# !
#  * Parsing-overhead calibration and conversion of profiled steps into
#  * steps ready for simulation at a target bandwidth.
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from .trace_model import (
    COMM,
    COMP,
    DOWNLINK,
    Operation,
    ProfileBundle,
    ResourceKind,
    Step,
    ps,
    worker,
)
import logging

logger = logging.getLogger(__name__)

OVERHEAD_SUFFIX = ":overhead"


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class OverheadModel:
    """Receiver-side parsing overhead: ``alpha_us_per_byte * size + beta_us``."""

    alpha_us_per_byte: float = 0.0
    beta_us: float = 0.0
    clamped: bool = field(default=False, compare=False)

    def overhead_us(self, size_bytes: int) -> float:
        return self.alpha_us_per_byte * size_bytes + self.beta_us


@dataclass(frozen=True)
class SimStep(Step):
    """A step whose communication operations were split into a transmission
    at the target bandwidth and an overhead computation at the receiver."""

    bandwidth_bps: float = 0.0


def fit_overhead(samples: Iterable[Tuple[float, float]]) -> OverheadModel:
    """Least-squares fit of the overhead model.

    Args:
        samples: (size_bytes, latency_us) pairs.

    Returns:
        An OverheadModel. A negative slope or intercept is clamped to zero,
        refitting the other coefficient, and ``clamped`` is set.

    Raises:
        InsufficientData: fewer than two distinct sizes.
    """
    data = np.asarray(list(samples), dtype=float).reshape(-1, 2)
    if len(data) < 2 or len(np.unique(data[:, 0])) < 2:
        raise InsufficientData(
            f"fitting the overhead model needs at least 2 samples with 2 distinct "
            f"sizes, got {len(data)} samples"
        )
    sizes, latencies = data[:, 0], data[:, 1]
    reg = LinearRegression().fit(sizes.reshape(-1, 1), latencies)
    alpha, beta = float(reg.coef_[0]), float(reg.intercept_)
    clamped = False
    if alpha < 0:
        alpha, beta, clamped = 0.0, float(latencies.mean()), True
    if beta < 0:
        # line through the origin
        alpha = max(float(sizes @ latencies / (sizes @ sizes)), 0.0)
        beta, clamped = 0.0, True
    beta = max(beta, 0.0)
    if clamped:
        logger.warning(
            f"overhead fit clamped to alpha={alpha:.6g} us/B, beta={beta:.6g} us"
        )
    return OverheadModel(alpha, beta, clamped)


def load_overhead_samples(path: str) -> List[Tuple[float, float]]:
    """Read (size_bytes, latency_us) pairs from a two-column text file.
    Columns may be separated by commas or whitespace; ``#`` starts a comment
    and non-numeric rows (e.g. a header) are skipped."""
    try:
        df = pd.read_csv(
            path, sep=r"[,\s]+", comment="#", header=None, engine="python"
        )
    except pd.errors.EmptyDataError:
        return []
    if df.shape[1] < 2:
        raise InsufficientData(f"{path}: expected two columns (size_bytes, latency_us)")
    df = df.iloc[:, :2].apply(pd.to_numeric, errors="coerce").dropna()
    return [(float(s), float(t)) for s, t in df.itertuples(index=False)]


def transmission_duration_us(size_bytes: int, bandwidth_bps: float) -> int:
    """Nominal transmission time in whole microseconds, rounded up, at least 1."""
    if bandwidth_bps <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_bps}")
    bits = size_bytes * 8 * 1000000
    if isinstance(bandwidth_bps, int):
        us = -(-bits // bandwidth_bps)
    else:
        us = math.ceil(bits / bandwidth_bps)
    return max(1, int(us))


def receiver(res: ResourceKind) -> ResourceKind:
    """Compute resource that parses data received over a link."""
    if res.kind == DOWNLINK:
        return worker
    return ps(res.ps_index)


def split_comm_ops(
    step: Step, model: OverheadModel, target_bandwidth_bps: float
) -> SimStep:
    """Replace each communication op by a transmission at the target
    bandwidth followed by its parsing overhead on the receiver.

    Transmissions keep the communication op's id; overhead ops are named
    ``<id>:overhead`` and elided when their duration is zero.
    """
    if target_bandwidth_bps <= 0:
        raise ValueError(f"target bandwidth must be positive, got {target_bandwidth_bps}")
    if isinstance(step, SimStep) or any(op.is_transmission for op in step.ops):
        raise ValueError(f"step {step.step_index} is already split")
    # last op of each communication op's image
    tail = {}
    overhead = {}
    for op in step.ops:
        if op.kind == COMM:
            duration = model.overhead_us(op.size_bytes)
            if duration > 0:
                overhead[op.id] = duration
                tail[op.id] = op.id + OVERHEAD_SUFFIX
    ops = []
    for op in step.ops:
        waiting_for = frozenset(tail.get(d, d) for d in op.waiting_for)
        if op.kind == COMP:
            ops.append(
                Operation(
                    op.id,
                    op.res,
                    COMP,
                    duration_us=op.duration_us,
                    waiting_for=waiting_for,
                    dependent_ops=op.dependent_ops,
                )
            )
            continue
        ovh_id = tail.get(op.id)
        ops.append(
            Operation(
                op.id,
                op.res,
                COMM,
                size_bytes=op.size_bytes,
                waiting_for=waiting_for,
                dependent_ops=frozenset([ovh_id]) if ovh_id else op.dependent_ops,
                is_transmission=True,
                nominal_duration_us=transmission_duration_us(
                    op.size_bytes, target_bandwidth_bps
                ),
            )
        )
        if ovh_id:
            ops.append(
                Operation(
                    ovh_id,
                    receiver(op.res),
                    COMP,
                    duration_us=overhead[op.id],
                    waiting_for=frozenset([op.id]),
                    dependent_ops=op.dependent_ops,
                )
            )
    return SimStep(tuple(ops), step.step_index, target_bandwidth_bps)


def preprocess_profile(
    bundle: ProfileBundle,
    target_bandwidth_bps: float,
    model: Optional[OverheadModel] = None,
) -> List[SimStep]:
    """Split every step of a profile; the profile's own alpha and beta are
    used unless a model is given."""
    if model is None:
        model = OverheadModel(bundle.alpha_us_per_byte, bundle.beta_us)
    steps = [split_comm_ops(s, model, target_bandwidth_bps) for s in bundle.steps]
    logger.info(
        f"preprocessed {len(steps)} steps at {target_bandwidth_bps:.6g} bps: "
        f"{len(steps[0].ops)} ops per step (alpha={model.alpha_us_per_byte:.6g}, "
        f"beta={model.beta_us:.6g})"
    )
    return steps


def comm_bytes(step: Step, direction: str, ps_index: int = 0) -> int:
    """Bytes a step moves over one link."""
    return sum(
        op.size_bytes
        for op in step.ops
        if op.kind == COMM and op.res == ResourceKind(direction, ps_index)
    )

