"""!
 * JSON-lines log of a synthetic trace: one record per execution segment
 * or step completion, and a header with the trace's worker count.
"""

import json
from typing import Iterator, Union
from contextlib import contextmanager
import logging

from .simulator import Segment, StepCompletion, SyntheticTrace

logger = logging.getLogger(__name__)

TraceLogRecord = Union[Segment, StepCompletion]


def _record_type(record) -> str:
    if isinstance(record, Segment):
        return "segment"
    if isinstance(record, StepCompletion):
        return "completion"
    raise TypeError(f"cannot log {type(record).__name__}")


class TraceLogWriter(object):
    def __init__(self, output_filename: str):
        self.output_filename = output_filename
        self.file = None
        self.num_records = 0

    def open(self):
        self.file = open(self.output_filename, "w")

    def append_open(self):
        self.file = open(self.output_filename, "a")

    def _dump(self, d: dict):
        json.dump(d, self.file)
        self.file.write("\n")

    def header(self, num_workers: int, origin_us: float = 0.0):
        if self.file is None:
            raise IOError("Call open() to open the output file first.")
        self._dump({"type": "header", "num_workers": num_workers, "origin_us": origin_us})

    def append(self, record: TraceLogRecord):
        if self.file is None:
            raise IOError("Call open() to open the output file first.")
        self._dump({"type": _record_type(record), **vars(record)})
        self.num_records += 1

    def write_trace(self, trace: SyntheticTrace):
        self.header(trace.num_workers, trace.origin_us)
        for e in trace.events:
            self.append(e)
        for c in trace.step_completions:
            self.append(c)
        self.file.flush()
        logger.info(f"wrote {self.num_records} trace records to {self.output_filename}")

    def close(self):
        if self.file is not None:
            self.file.close()
        self.file = None  # for pickle


class TraceLogReader(object):
    def __init__(self, filename: str):
        self.filename = filename
        self.file = None
        self.num_workers = None
        self.origin_us = 0.0

    def open(self):
        self.file = open(self.filename)

    def records(self) -> Iterator[TraceLogRecord]:
        if self.file is None:
            raise IOError("Call open() before reading log file.")
        for lineno, line in enumerate(self.file, 1):
            if not line.strip():
                continue
            data = json.loads(line)
            kind = data.pop("type", None)
            if kind == "header":
                self.num_workers = data["num_workers"]
                self.origin_us = data.get("origin_us", 0.0)
            elif kind == "segment":
                yield Segment(**data)
            elif kind == "completion":
                yield StepCompletion(**data)
            else:
                raise ValueError(f"{self.filename}:{lineno}: unknown record type {kind!r}")

    def read_trace(self) -> SyntheticTrace:
        trace = SyntheticTrace()
        for rec in self.records():
            if isinstance(rec, Segment):
                trace.events.append(rec)
            else:
                trace.step_completions.append(rec)
        if self.num_workers is None:
            workers = {r.worker for r in trace.events} | {
                c.worker for c in trace.step_completions
            }
            self.num_workers = max(workers) + 1 if workers else 1
        trace.num_workers = self.num_workers
        trace.origin_us = self.origin_us
        return trace

    def close(self):
        if self.file is not None:
            self.file.close()
        self.file = None  # for pickle


@contextmanager
def trace_log_writer(filename: str, append: bool = False):
    try:
        w = TraceLogWriter(filename)
        if not append:
            w.open()
        else:
            w.append_open()
        yield w
    finally:
        w.close()


@contextmanager
def trace_log_reader(filename: str):
    try:
        r = TraceLogReader(filename)
        r.open()
        yield r
    finally:
        r.close()


def save_trace(trace: SyntheticTrace, filename: str):
    with trace_log_writer(filename) as w:
        w.write_trace(trace)


def load_trace(filename: str) -> SyntheticTrace:
    with trace_log_reader(filename) as r:
        return r.read_trace()
