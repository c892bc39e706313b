import os
import unittest
from tempfile import TemporaryDirectory

from asgdsim.simulator import ClusterConfig, simulate
from asgdsim.trace_log import load_trace, save_trace, trace_log_reader, trace_log_writer
from test.profiles import chain_profile


class TestTraceLog(unittest.TestCase):
    def test_trace_log(self, path="trace.jsonl"):
        config = ClusterConfig(2, bandwidth_bps=8000000, steps_per_worker=3)
        trace = simulate(chain_profile(), config)
        with TemporaryDirectory() as d:
            filename = os.path.join(d, path)
            save_trace(trace, filename)
            self.assertTrue(os.path.exists(filename))
            with trace_log_reader(filename) as reader:
                count = 0
                for record in reader.records():
                    count += 1
                self.assertEqual(count, len(trace.events) + len(trace.step_completions))
                self.assertEqual(reader.num_workers, 2)
            loaded = load_trace(filename)
        self.assertEqual(loaded.to_json(), trace.to_json())

    def test_append(self):
        trace = simulate(
            chain_profile(), ClusterConfig(1, bandwidth_bps=8000000, steps_per_worker=1)
        )
        self.assertEqual(len(trace.step_completions), 1)
        with TemporaryDirectory() as d:
            filename = os.path.join(d, "trace.jsonl")
            with trace_log_writer(filename) as w:
                w.header(1)
                w.append(trace.events[0])
            with trace_log_writer(filename, append=True) as w:
                for e in trace.events[1:]:
                    w.append(e)
                w.append(trace.step_completions[0])
            self.assertEqual(load_trace(filename).to_json(), trace.to_json())

    def test_unknown_record(self):
        with TemporaryDirectory() as d:
            filename = os.path.join(d, "trace.jsonl")
            with open(filename, "w") as f:
                f.write('{"type": "checkpoint"}\n')
            with self.assertRaises(ValueError):
                load_trace(filename)

    def test_directory_as_filename(self):
        config = ClusterConfig(1, bandwidth_bps=8000000, steps_per_worker=1)
        trace = simulate(chain_profile(), config)
        with TemporaryDirectory() as d:
            with self.assertRaises((IsADirectoryError, PermissionError)):
                save_trace(trace, d)
