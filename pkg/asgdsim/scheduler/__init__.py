from .stream_scheduler import (
    Chunk,
    DuplicateStream,
    EmptyScheduler,
    EnforcedOrder,
    Http2Multiplex,
    SchedulerBusy,
    SchedulerPolicy,
    StreamScheduler,
    StreamState,
    WholeStreamFifo,
    chunk_duration_us,
    load_order,
    order_variant,
    parse_policy,
    predict_stream_endtimes,
)
