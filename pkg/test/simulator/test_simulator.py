import math
import unittest
from collections import defaultdict

import numpy as np
import pandas as pd
import pytest

from asgdsim.metrics import throughput, throughput_bound
from asgdsim.preprocess import preprocess_profile
from asgdsim.scheduler import EnforcedOrder, Http2Multiplex, WholeStreamFifo
from asgdsim.simulator import (
    ActiveSet,
    ClusterConfig,
    NullObserver,
    TraceGenerator,
    generate_trace,
    partition_layers,
    partition_parameters,
    share,
    share_two_ps,
    simulate,
)
from asgdsim.trace_model import critical_path_us, downlink, ps, uplink, worker
from test.profiles import (
    MB,
    bundle,
    chain_profile,
    comm,
    comp,
    compute_bound_ops,
    diamond_ops,
    layered_profile,
    random_diamond_ops,
    random_profile,
    two_ps_ops,
)

VGG11_LAYER_BYTES = [
    7168,
    295424,
    1180672,
    2360320,
    4720640,
    9439232,
    9439232,
    9439232,
    411058176,
    67125248,
    16388000,
]


class RecordingObserver(NullObserver):
    """Integrates every chunk's progress and keeps per-link share sums."""

    def __init__(self):
        self.work = defaultdict(float)
        self.chunks = {}
        self.link_sums = []
        self.worker_sums = []

    def on_event(self, t_us, dt_us, shares):
        links = defaultdict(float)
        per_worker = defaultdict(float)
        for chunk, s in shares:
            self.chunks[id(chunk)] = chunk
            self.work[id(chunk)] += dt_us * s
            if chunk.res.is_link:
                links[(chunk.res.kind, chunk.res.ps_index)] += s
                per_worker[(chunk.worker, chunk.res.kind)] += s
        self.link_sums.append(dict(links))
        self.worker_sums.append(dict(per_worker))


def list_schedule_us(step):
    """Makespan of one step on a lone worker when every resource serves one
    whole op at a time, in the order the ops become ready."""
    order = {op.id: i for i, op in enumerate(step.ops)}
    finish = {}
    free = defaultdict(float)
    pending = list(step.ops)
    while pending:
        ready = {
            op.id: max((finish[d] for d in op.waiting_for), default=0.0)
            for op in pending
            if all(d in finish for d in op.waiting_for)
        }
        op = min(
            (op for op in pending if op.id in ready), key=lambda o: (ready[o.id], order[o.id])
        )
        start = max(ready[op.id], free[op.res])
        finish[op.id] = free[op.res] = start + op.work_us
        pending.remove(op)
    return max(finish.values())


def run(profile, num_workers, steps_per_worker=1, observer=None, **kw):
    config = ClusterConfig(
        num_workers,
        num_ps=profile.num_ps,
        bandwidth_bps=kw.pop("bandwidth_bps", profile.profile_bandwidth_bps),
        steps_per_worker=steps_per_worker,
        **kw,
    )
    return simulate(profile, config, observer=observer)


class TestClosedForms(unittest.TestCase):
    def test_single_worker_chain(self):
        trace = run(chain_profile(), 1)
        self.assertEqual(trace.completions(0), [2810000])
        self.assertEqual(
            [(e.op_id, e.resource, e.start_us, e.duration_us) for e in trace.events],
            [
                ("dl", "downlink:0", 0, 1000000),
                ("fwd", "worker", 1000000, 800000),
                ("ul", "uplink:0", 1800000, 1000000),
                ("upd", "ps:0", 2800000, 10000),
            ],
        )

    def test_two_workers_network_only(self):
        trace = run(chain_profile(comp_us=0, ps_us=0), 2)
        self.assertEqual(trace.completions(0), [4000000])
        self.assertEqual(trace.completions(1), [4000000])
        downlinks = [e for e in trace.events if e.op_id == "dl"]
        self.assertEqual(len(downlinks), 2)
        for e in downlinks:
            self.assertEqual((e.start_us, e.duration_us), (0, 2000000))

    def test_two_workers_mixed(self):
        trace = run(chain_profile(), 2)
        ends = defaultdict(list)
        for e in trace.events:
            ends[e.op_id].append(e.start_us + e.duration_us)
        for op, t in (("dl", 2e6), ("fwd", 2.8e6), ("ul", 4.8e6), ("upd", 4.81e6)):
            for end in ends[op]:
                self.assertAlmostEqual(end, t, delta=1)
        self.assertEqual(trace.completions(0), trace.completions(1))
        self.assertAlmostEqual(trace.completions(0)[0], 4.81e6, delta=1)

    def test_zero_duration_ops(self):
        profile = bundle(
            [[comm("dl", "downlink:0", MB), comp("fwd", "worker", 0, ["dl"])]]
        )
        trace = run(profile, 1)
        self.assertEqual(trace.completions(0), [1000000])
        self.assertEqual(trace.events[-1].duration_us, 0)

    def test_overhead_on_receivers(self):
        profile = chain_profile(alpha=0.0, beta=500.0)
        trace = run(profile, 1)
        # two overheads of 500 us each
        self.assertEqual(trace.completions(0), [2811000])
        resources = {e.op_id: e.resource for e in trace.events}
        self.assertEqual(resources["dl:overhead"], "worker")
        self.assertEqual(resources["ul:overhead"], "ps:0")


class TestShares(unittest.TestCase):
    def test_single_ps(self):
        active = ActiveSet()
        for w in range(4):
            active.add(downlink(0), w)
        self.assertEqual(share(downlink(0), active, 0), 0.25)
        self.assertEqual(share(uplink(0), active, 0), 1.0)
        self.assertEqual(share(worker, active, 0), 1.0)
        self.assertEqual(share(ps(0), active, 0), 1.0)
        for w in range(1, 4):
            active.discard(downlink(0), w)
        self.assertEqual(share(downlink(0), active, 0), 1.0)

    def test_two_ps_cap(self):
        active = ActiveSet()
        for w in range(4):
            active.add(downlink(1), w)
        active.add(downlink(0), 0)
        self.assertEqual(share_two_ps(0, 1, "downlink", active), 0.25)
        self.assertEqual(share_two_ps(0, 0, "downlink", active), 0.75)
        self.assertEqual(share(downlink(0), active, 0, num_ps=2), 0.75)
        # another worker only on ps 1 is not capped
        self.assertEqual(share_two_ps(1, 1, "downlink", active), 0.25)

    def test_two_ps_no_cap(self):
        active = ActiveSet()
        for w in (0, 1):
            active.add(uplink(0), w)
            active.add(uplink(1), w)
        self.assertEqual(share_two_ps(0, 0, "uplink", active), 0.5)
        self.assertEqual(share_two_ps(0, 1, "uplink", active), 0.5)

    def test_two_ps_alone(self):
        active = ActiveSet()
        active.add(downlink(0), 0)
        self.assertEqual(share_two_ps(0, 0, "downlink", active), 1.0)
        active.add(downlink(1), 0)
        self.assertEqual(share_two_ps(0, 0, "downlink", active), 0.5)
        self.assertEqual(share_two_ps(0, 1, "downlink", active), 0.5)
        # directions are independent
        active.add(uplink(1), 0)
        self.assertEqual(share_two_ps(0, 1, "uplink", active), 1.0)

    def test_workers_is_a_snapshot(self):
        active = ActiveSet()
        active.add(downlink(0), 0)
        workers = active.workers("downlink", 0)
        self.assertEqual(workers, {0})
        with self.assertRaises(AttributeError):
            workers.add(1)
        active.add(downlink(0), 1)
        self.assertEqual(workers, {0})
        self.assertEqual(active.count("downlink", 0), 2)
        self.assertEqual(active.workers("uplink", 1), frozenset())


class TestGenerator(unittest.TestCase):
    def test_config_validation(self):
        for kw in (
            dict(num_workers=0),
            dict(num_workers=1, num_ps=3),
            dict(num_workers=1, bandwidth_bps=0),
            dict(num_workers=1, steps_per_worker=0),
            dict(num_workers=1, seed=-1),
        ):
            with self.assertRaises(ValueError, msg=str(kw)):
                ClusterConfig(**kw)

    def test_needs_preprocessing(self):
        profile = chain_profile()
        with self.assertRaises(ValueError):
            generate_trace(profile.steps, ClusterConfig(1))
        with self.assertRaises(ValueError):
            simulate(profile, ClusterConfig(1, num_ps=2))

    def test_two_ps_sources_enter_queue(self):
        profile = bundle([two_ps_ops()], num_ps=2)
        config = ClusterConfig(1, num_ps=2, bandwidth_bps=8 * MB, steps_per_worker=1)
        gen = TraceGenerator(preprocess_profile(profile, config.bandwidth_bps), config)
        gen.start_random_step(0)
        self.assertEqual(sorted(str(c.res) for c in gen.queue), ["downlink:0", "downlink:1"])

    def test_two_ps_worker_interface(self):
        # alone on both downlinks: 1/2 each, so 2 s for 1 MB on each
        profile = bundle([two_ps_ops(comp_us=0, ps_us=0)], num_ps=2)
        trace = run(profile, 1)
        dl = {e.op_id: e.start_us + e.duration_us for e in trace.events if "dl" in e.op_id}
        self.assertEqual(dl, {"dl0": 2000000, "dl1": 2000000})

    def test_determinism(self):
        profile = random_profile(4, num_ps=2, n_steps=5)
        a = run(profile, 3, steps_per_worker=20, seed=9).to_json()
        b = run(profile, 3, steps_per_worker=20, seed=9).to_json()
        self.assertEqual(a, b)

    def test_step_count(self):
        profile = random_profile(8, n_steps=4)
        trace = run(profile, 3, steps_per_worker=7)
        self.assertEqual(len(trace.step_completions), 21)
        for w in range(3):
            times = trace.completions(w)
            self.assertEqual(len(times), 7)
            self.assertEqual(times, sorted(times))

    def test_single_worker_fidelity(self):
        for seed, n_layers in zip(range(5), (4, 10, 17, 29, 40)):
            profile = layered_profile(seed, n_layers, win_bytes=500000)
            self.assertGreaterEqual(len(profile.steps[0].ops), 20)
            self.assertLessEqual(len(profile.steps[0].ops), 200)
            expected = critical_path_us(
                preprocess_profile(profile, profile.profile_bandwidth_bps)[0]
            )
            times = run(
                profile, 1, steps_per_worker=3, policy=Http2Multiplex(profile.win_bytes)
            ).completions(0)
            durations = np.diff([0.0] + times)
            for d in durations:
                self.assertLess(abs(d - expected) / expected, 0.01)

    def step_durations(self, profile):
        times = run(
            profile, 1, steps_per_worker=3, policy=Http2Multiplex(profile.win_bytes)
        ).completions(0)
        return np.diff([0.0] + times)

    def test_diamond_on_distinct_resources(self):
        # the branches overlap, so the step takes its critical path
        profile = bundle([diamond_ops(b_us=200000, b_res="ps:0")])
        step = preprocess_profile(profile, profile.profile_bandwidth_bps)[0]
        self.assertEqual(critical_path_us(step), 2300000)
        self.assertEqual(list_schedule_us(step), 2300000)
        for d in self.step_durations(profile):
            self.assertAlmostEqual(d, 2300000, delta=1)

    def test_diamond_on_shared_worker(self):
        # both branches need the worker and run one after the other
        profile = bundle([diamond_ops()])
        step = preprocess_profile(profile, profile.profile_bandwidth_bps)[0]
        self.assertEqual(critical_path_us(step), 2300000)
        self.assertEqual(list_schedule_us(step), 2600000)
        for d in self.step_durations(profile):
            self.assertAlmostEqual(d, 2600000, delta=1)

    def test_random_diamonds(self):
        rng = np.random.Generator(np.random.PCG64(23))
        for _ in range(20):
            profile = bundle([random_diamond_ops(rng, int(rng.integers(2, 5)))])
            step = preprocess_profile(profile, profile.profile_bandwidth_bps)[0]
            expected = list_schedule_us(step)
            self.assertGreaterEqual(expected, critical_path_us(step))
            for d in self.step_durations(profile):
                self.assertLess(abs(d - expected) / expected, 0.01)


def test_conservation_and_causality():
    rng = np.random.Generator(np.random.PCG64(17))
    for i in range(100):
        num_ps = int(rng.integers(1, 3))
        num_workers = int(rng.integers(1, 9))
        win = int(rng.integers(100000, 4 * MB))
        profile = random_profile(100 + i, num_ps=num_ps, n_steps=3, win_bytes=win)
        observer = RecordingObserver()
        trace = run(
            profile,
            num_workers,
            steps_per_worker=1,
            observer=observer,
            policy=Http2Multiplex(win),
            seed=i,
        )
        for sums in observer.link_sums:
            for total in sums.values():
                assert total <= 1 + 1e-9
                if num_ps == 1:
                    assert total == pytest.approx(1.0)
        for sums in observer.worker_sums:
            for total in sums.values():
                assert total <= 1 + 1e-9
        for key, chunk in observer.chunks.items():
            assert observer.work[key] == pytest.approx(chunk.work_us, rel=1e-6, abs=1e-5)
        # one step per worker: every op's segments follow its dependencies
        for w in range(num_workers):
            segments = [e for e in trace.events if e.worker == w]
            start, end = {}, {}
            for e in segments:
                start[e.op_id] = min(start.get(e.op_id, math.inf), e.start_us)
                end[e.op_id] = max(end.get(e.op_id, -math.inf), e.start_us + e.duration_us)
            assert set(start) == {op.id for op in profile.steps[0].ops}
            for op in profile.steps[0].ops:
                for dep in op.waiting_for:
                    assert start[op.id] >= end[dep] - 1e-6


def test_policy_degeneracies():
    rng = np.random.Generator(np.random.PCG64(23))
    for i in range(50):
        num_ps = int(rng.integers(1, 3))
        profile = random_profile(500 + i, num_ps=num_ps, n_steps=3)
        order = [op.id for op in profile.steps[0].ops]
        num_workers = int(rng.integers(1, 5))
        traces = [
            run(profile, num_workers, steps_per_worker=3, policy=policy, seed=i).to_json()
            for policy in (WholeStreamFifo(), Http2Multiplex(math.inf), EnforcedOrder(order))
        ]
        assert traces[0] == traces[1]
        assert traces[0] == traces[2]


def network_bound_profile():
    """Downlinks bound the throughput; computation times vary so workers
    drift apart."""
    rng = np.random.Generator(np.random.PCG64(1))
    steps = [
        [
            comm("dl", "downlink:0", MB),
            comp("fwd", "worker", int(rng.integers(1000, 500000)), ["dl"]),
            comm("ul", "uplink:0", MB // 10, ["fwd"]),
        ]
        for _ in range(5)
    ]
    return bundle(steps)


def test_saturation_shape():
    profile = network_bound_profile()
    # K B / (8 max(S_dl, S_ul))
    bound = 32 * 8 * MB / (8 * MB)
    rates = []
    for w in range(1, 11):
        trace = run(profile, w, steps_per_worker=300)
        rates.append(throughput(trace, 32, 20).examples_per_sec)
    for a, b in zip(rates, rates[1:]):
        assert b >= a * (1 - 0.02)
    assert max(rates) <= bound * 1.01
    assert rates[-1] >= 0.95 * bound
    assert rates[-1] >= 1.2 * rates[0]
    steps = preprocess_profile(profile, profile.profile_bandwidth_bps)
    config = ClusterConfig(10, bandwidth_bps=profile.profile_bandwidth_bps)
    assert throughput_bound(steps, config, 32) == pytest.approx(bound)


def test_compute_bound_scales():
    profile = bundle([compute_bound_ops()])
    rates = []
    for w in range(1, 5):
        trace = run(profile, w, steps_per_worker=30)
        rates.append(throughput(trace, 32, 5).examples_per_sec)
    for w, r in enumerate(rates, 1):
        assert r >= 0.95 * w * rates[0]


class TestPartition(unittest.TestCase):
    def test_greedy(self):
        self.assertEqual(partition_parameters([10, 9, 2, 1], 2), [0, 1, 1, 0])
        self.assertEqual(partition_parameters([5, 3, 8], 1), [0, 0, 0])
        self.assertEqual(partition_parameters([], 2), [])
        with self.assertRaises(ValueError):
            partition_parameters([1], 0)
        with self.assertRaises(ValueError):
            partition_parameters([-1], 2)

    def test_vgg11(self):
        assignment = partition_parameters(VGG11_LAYER_BYTES, 2)
        totals = [0, 0]
        for size, i in zip(VGG11_LAYER_BYTES, assignment):
            totals[i] += size
        self.assertEqual(totals, [426405888, 105047456])
        self.assertLess(abs(totals[0] / totals[1] - 407 / 100) / (407 / 100), 0.05)

    def test_named_layers(self):
        layers = pd.DataFrame(
            {"layer": ["a", "b", "c", "d"], "size_bytes": [10, 9, 2, 1]}
        )
        assigned, totals = partition_layers(layers, 2)
        self.assertEqual(list(assigned["ps"]), [0, 1, 1, 0])
        self.assertEqual(totals, [11, 11])
        _, totals = partition_layers(layers.iloc[:1], 3)
        self.assertEqual(totals, [10, 0, 0])
