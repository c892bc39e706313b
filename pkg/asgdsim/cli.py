# !
#  * The asgdsim command line: calibrate the overhead model, simulate a
#  * cluster, sweep worker counts, check the multiplexing model, partition
#  * layers and export traces.
import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import pandas as pd

from .config import (
    BATCH_SIZE,
    DEFAULT_WIN_BYTES,
    OUTPUT_DIR_ENV,
    RANDOM_SEED,
    SATURATION_TOLERANCE,
    SIM_STEPS,
    WARMUP_STEPS,
)
from .metrics import (
    CynthiaBaseline,
    export_chrome_trace,
    load_streams,
    saturation_point,
    throughput,
    throughput_bound,
    validate_multiplex,
)
from .preprocess import OverheadModel, fit_overhead, load_overhead_samples, preprocess_profile
from .scheduler import parse_policy
from .simulator import (
    ClusterConfig,
    generate_trace,
    load_layer_sizes,
    partition_layers,
)
from .trace_log import load_trace, save_trace
from .trace_model import ProfileBundle, load_profile
from .version import __version__

logger = logging.getLogger(__name__)


@dataclass
class SimulationArgs:
    """The simulation setting

    Args:
        workers (:obj:`int`, `optional`, defaults to :obj:`1`):
            Number of workers W.
        bandwidth (:obj:`float`, `optional`):
            Link bandwidth in bits/s; defaults to the profiling bandwidth.
        ps (:obj:`int`, `optional`):
            Number of parameter servers; defaults to the profile's.
        policy (:obj:`str`, `optional`, defaults to :obj:`http2`):
            Link policy: ``http2[:<win_bytes>|:inf]``, ``fifo`` or ``order:<file>``.
            A bare ``http2`` uses the profile's WIN.
        alpha, beta (:obj:`float`, `optional`):
            Overhead model; default to the profile's.
    """

    workers: int = field(default=1, metadata={"help": "number of workers W"})
    bandwidth: float = field(
        default=None, metadata={"help": "link bandwidth in bits/s (default: profiling bandwidth)"}
    )
    ps: int = field(
        default=None,
        metadata={"help": "number of parameter servers (default: profile's)", "choices": [1, 2]},
    )
    policy: str = field(
        default="http2",
        metadata={"help": "link policy: http2[:<win_bytes>|:inf], fifo or order:<file>"},
    )
    order_variant: str = field(
        default="as-is",
        metadata={
            "help": "variant of an order:<file> policy",
            "choices": ["as-is", "reverse", "shuffle"],
        },
    )
    steps: int = field(default=SIM_STEPS, metadata={"help": "steps simulated per worker"})
    warmup: int = field(
        default=WARMUP_STEPS, metadata={"help": "steps per worker excluded from throughput"}
    )
    seed: int = field(default=RANDOM_SEED, metadata={"help": "random seed"})
    batch_size: int = field(default=BATCH_SIZE, metadata={"help": "examples per step K"})
    alpha: float = field(
        default=None, metadata={"help": "overhead slope in us/byte (default: profile's)"}
    )
    beta: float = field(
        default=None, metadata={"help": "overhead intercept in us (default: profile's)"}
    )
    overhead_samples: str = field(
        default=None, metadata={"help": "refit alpha and beta from a (size_bytes, latency_us) file"}
    )

    @staticmethod
    def add_args(arg_parser: argparse.ArgumentParser):
        for each_field in fields(SimulationArgs):
            arg_parser.add_argument(
                "--" + each_field.name.replace("_", "-"),
                dest=each_field.name,
                type=each_field.type,
                help=each_field.metadata["help"],
                choices=each_field.metadata.get("choices"),
                # absent flags stay absent so lower-precedence sources apply
                default=argparse.SUPPRESS,
            )

    @staticmethod
    def resolve(console_args: argparse.Namespace, profile: ProfileBundle) -> "SimulationArgs":
        """Flags, then the ``--config`` file, then profile metadata, then defaults."""
        file_config = {}
        if getattr(console_args, "config", None):
            with open(console_args.config) as f:
                file_config = json.load(f)
            if not isinstance(file_config, dict):
                raise ValueError(f"{console_args.config}: the config file must hold an object")
        names = {f.name for f in fields(SimulationArgs)}
        unknown = sorted(set(file_config) - names)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; known keys are {sorted(names)}")
        profile_config = {
            "bandwidth": profile.profile_bandwidth_bps,
            "ps": profile.num_ps,
            "alpha": profile.alpha_us_per_byte,
            "beta": profile.beta_us,
        }
        values = {}
        for name in names:
            if hasattr(console_args, name):
                values[name] = getattr(console_args, name)
                if name in file_config and file_config[name] != values[name]:
                    logger.warning(
                        f"--{name.replace('_', '-')} overrides {name}={file_config[name]!r} "
                        f"from the config file"
                    )
            elif name in file_config:
                values[name] = file_config[name]
            elif name in profile_config:
                values[name] = profile_config[name]
        return SimulationArgs(**values)

    def cluster(
        self, profile: ProfileBundle, num_workers: Optional[int] = None, seed_offset: int = 0
    ) -> ClusterConfig:
        if self.ps != profile.num_ps:
            raise ValueError(
                f"profile was recorded with {profile.num_ps} ps; predicting for "
                f"{self.ps} ps needs a profile recorded with {self.ps}"
            )
        policy = parse_policy(self.policy, profile.win_bytes, self.order_variant, self.seed)
        return ClusterConfig(
            num_workers=num_workers or self.workers,
            num_ps=self.ps,
            bandwidth_bps=self.bandwidth,
            policy=policy,
            steps_per_worker=self.steps,
            seed=self.seed + seed_offset,
        )

    def overhead_model(self) -> OverheadModel:
        if self.overhead_samples:
            return fit_overhead(load_overhead_samples(self.overhead_samples))
        return OverheadModel(self.alpha, self.beta)


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to reproduce a run: the command, the resolved
    parameters, the seed, the tool version and the digests of the inputs."""

    command: str
    config: dict
    seed: Optional[int] = None
    version: str = __version__
    inputs: Dict[str, str] = field(default_factory=dict)

    def add_input(self, path: Optional[str]):
        if path:
            self.inputs[path] = file_digest(path)

    def write(self, out_dir: str):
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


def output_dir(console_args: argparse.Namespace) -> Optional[str]:
    """``--out``, else the directory named by the environment, else None."""
    out = getattr(console_args, "out", None) or os.environ.get(OUTPUT_DIR_ENV)
    if out:
        os.makedirs(out, exist_ok=True)
    return out


def _policy_input(policy: str) -> Optional[str]:
    name, _, arg = policy.partition(":")
    return arg if name == "order" else None


def _manifest(command, args: SimulationArgs, console_args, **extra) -> RunManifest:
    manifest = RunManifest(command, {**asdict(args), **extra}, args.seed)
    manifest.add_input(console_args.profile)
    manifest.add_input(getattr(console_args, "config", None))
    manifest.add_input(args.overhead_samples)
    manifest.add_input(_policy_input(args.policy))
    return manifest


def cmd_fit_overhead(console_args) -> int:
    model = fit_overhead(load_overhead_samples(console_args.samples))
    print(f"alpha_us_per_byte: {model.alpha_us_per_byte:.12g}")
    print(f"beta_us: {model.beta_us:.12g}")
    if model.clamped:
        print("clamped: true")
    out = output_dir(console_args)
    if out:
        with open(os.path.join(out, "overhead.json"), "w") as f:
            json.dump(asdict(model), f, indent=2, sort_keys=True)
            f.write("\n")
        manifest = RunManifest("fit-overhead", {})
        manifest.add_input(console_args.samples)
        manifest.write(out)
    return 0


def cmd_simulate(console_args) -> int:
    profile = load_profile(console_args.profile)
    args = SimulationArgs.resolve(console_args, profile)
    config = args.cluster(profile)
    steps = preprocess_profile(profile, config.bandwidth_bps, args.overhead_model())
    trace = generate_trace(steps, config)
    report = throughput(trace, args.batch_size, args.warmup)
    bound = throughput_bound(steps, config, args.batch_size)
    print(report)
    print(f"upper bound: {bound:.4f} examples/s")
    out = output_dir(console_args)
    if console_args.trace_log:
        save_trace(trace, console_args.trace_log)
    if console_args.chrome_trace:
        export_chrome_trace(trace, console_args.chrome_trace)
    if out:
        with open(os.path.join(out, "report.json"), "w") as f:
            json.dump(
                {**report.to_dict(), "upper_bound": bound}, f, indent=2, sort_keys=True
            )
            f.write("\n")
        _manifest("simulate", args, console_args, policy_resolved=str(config.policy)).write(out)
    return 0


def _sweep_point(steps, config: ClusterConfig, batch_size: int, warmup: int) -> float:
    return throughput(generate_trace(steps, config), batch_size, warmup).examples_per_sec


def sweep_table(
    steps,
    args: SimulationArgs,
    profile: ProfileBundle,
    max_workers: int,
    jobs: int = 1,
    baselines: Sequence = (),
) -> pd.DataFrame:
    """Throughput for W = 1..max_workers; point W runs with seed + W."""
    configs = [args.cluster(profile, w, seed_offset=w) for w in range(1, max_workers + 1)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_sweep_point, steps, c, args.batch_size, args.warmup) for c in configs
            ]
            rates = [f.result() for f in futures]
    else:
        rates = [_sweep_point(steps, c, args.batch_size, args.warmup) for c in configs]
    for c, r in zip(configs, rates):
        logger.info(f"W={c.num_workers}: {r:.4f} examples/s")
    table = pd.DataFrame(
        {
            "workers": [c.num_workers for c in configs],
            "examples_per_sec": rates,
            "upper_bound": [throughput_bound(steps, c, args.batch_size) for c in configs],
        }
    )
    for baseline in baselines:
        table[baseline.name] = [baseline.predict(w) for w in table["workers"]]
    return table


def cmd_sweep(console_args) -> int:
    if console_args.max_workers < 1:
        raise ValueError(f"--max-workers must be at least 1, got {console_args.max_workers}")
    profile = load_profile(console_args.profile)
    args = SimulationArgs.resolve(console_args, profile)
    steps = preprocess_profile(profile, args.bandwidth, args.overhead_model())
    baselines = []
    if console_args.cynthia:
        t_p, t_c, u_1 = console_args.cynthia
        baselines.append(
            CynthiaBaseline(args.batch_size, t_p, t_c, u_1, console_args.comm_scale)
        )
    table = sweep_table(
        steps, args, profile, console_args.max_workers, console_args.jobs, baselines
    )
    saturated = saturation_point(
        list(table["workers"]), list(table["examples_per_sec"]), SATURATION_TOLERANCE
    )
    table["saturated"] = table["workers"] >= saturated
    logger.info(f"throughput saturates at W={saturated}")
    print(table.to_string(index=False))
    print(f"saturation point: W={saturated}")
    out = output_dir(console_args)
    if out:
        table.to_csv(os.path.join(out, "sweep.csv"), index=False)
        _manifest(
            "sweep",
            args,
            console_args,
            max_workers=console_args.max_workers,
            cynthia=console_args.cynthia,
            comm_scale=console_args.comm_scale,
        ).write(out)
    return 0


def cmd_validate_multiplex(console_args) -> int:
    streams = load_streams(console_args.streams)
    table, stats = validate_multiplex(streams, console_args.win, console_args.bandwidth)
    print(f"streams: {len(table)}")
    for name, value in stats.to_dict().items():
        print(f"{name} error: {value:.4%}")
    out = output_dir(console_args)
    if out:
        table.to_csv(os.path.join(out, "multiplex.csv"), index=False)
        manifest = RunManifest(
            "validate-multiplex",
            {"win_bytes": console_args.win, "bandwidth_bps": console_args.bandwidth},
        )
        manifest.add_input(console_args.streams)
        manifest.write(out)
    return 0


def cmd_partition(console_args) -> int:
    assigned, totals = partition_layers(load_layer_sizes(console_args.layers), console_args.ps)
    print(assigned.to_string(index=False))
    for i, total in enumerate(totals):
        print(f"ps {i}: {total} bytes ({total / 1024 ** 2:.2f} MiB)")
    out = output_dir(console_args)
    if out:
        assigned.to_csv(os.path.join(out, "partition.csv"), index=False)
        manifest = RunManifest("partition", {"num_ps": console_args.ps})
        manifest.add_input(console_args.layers)
        manifest.write(out)
    return 0


def cmd_export_trace(console_args) -> int:
    trace = load_trace(console_args.trace_log)
    export_chrome_trace(trace, console_args.output)
    logger.info(f"wrote {len(trace.events)} events to {console_args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--verbose",
        type=int,
        default=2,
        choices=range(5),
        help="0 critical, 1 errors, 2 warnings, 3 info, 4 debug",
    )
    common.add_argument(
        "--out", default=None, help=f"output directory (default: ${OUTPUT_DIR_ENV})"
    )
    arg_parser = argparse.ArgumentParser(
        prog="asgdsim",
        description="Predict the training throughput of asynchronous SGD with parameter servers.",
    )
    arg_parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = arg_parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-overhead", parents=[common], help="fit the overhead model")
    p.add_argument("samples", help="file of (size_bytes, latency_us) pairs")
    p.set_defaults(func=cmd_fit_overhead)

    for name, func, help_text in (
        ("simulate", cmd_simulate, "simulate a cluster and report its throughput"),
        ("sweep", cmd_sweep, "simulate W = 1..max-workers"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("profile", help="profile JSON file")
        p.add_argument("--config", default=None, help="JSON file of simulation settings")
        SimulationArgs.add_args(p)
        p.set_defaults(func=func)
        if name == "simulate":
            p.add_argument("--trace-log", default=None, help="write the JSON-lines trace here")
            p.add_argument("--chrome-trace", default=None, help="write a browser trace here")
        else:
            p.add_argument("--max-workers", type=int, required=True)
            p.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel")
            p.add_argument(
                "--cynthia",
                type=float,
                nargs=3,
                metavar=("T_P", "T_C", "U_1"),
                default=None,
                help="add a Cynthia baseline column (seconds, seconds, utilization)",
            )
            p.add_argument(
                "--comm-scale",
                type=float,
                default=1.0,
                help="scale of T_C in the Cynthia baseline; 0.5 for separate up/down links",
            )

    p = sub.add_parser(
        "validate-multiplex", parents=[common], help="check predicted stream end times"
    )
    p.add_argument("streams", help="CSV with step, op, start_us, end_us, size_bytes")
    p.add_argument("--win", type=float, default=DEFAULT_WIN_BYTES, help="flow-control window")
    p.add_argument(
        "--bandwidth", type=float, default=None, help="bits/s (default: one byte per us)"
    )
    p.set_defaults(func=cmd_validate_multiplex)

    p = sub.add_parser("partition", parents=[common], help="assign layers to servers")
    p.add_argument("layers", help="CSV with layer, size_bytes")
    p.add_argument("--ps", type=int, default=2)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("export-trace", parents=[common], help="convert a trace log")
    p.add_argument("trace_log")
    p.add_argument("output", help="browser trace JSON file")
    p.set_defaults(func=cmd_export_trace)
    return arg_parser


def _configure_logging(verbose: int):
    from . import logger_formatter

    root = logging.getLogger("asgdsim")
    root.setLevel(50 - verbose * 10)
    if not root.handlers:
        # Add the console handler.
        _ch = logging.StreamHandler(sys.stderr)
        _ch.setFormatter(logger_formatter)
        root.addHandler(_ch)


def main(argv: Optional[List[str]] = None) -> int:
    console_args = build_parser().parse_args(argv)
    _configure_logging(console_args.verbose)
    try:
        return console_args.func(console_args)
    except (ValueError, RuntimeError, IndexError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
