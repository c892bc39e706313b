from asgdsim.trace_model import ProfileBundle, load_profile, save_profile
from asgdsim.preprocess import OverheadModel, fit_overhead, preprocess_profile
from asgdsim.scheduler import (
    EnforcedOrder,
    Http2Multiplex,
    StreamScheduler,
    WholeStreamFifo,
    predict_stream_endtimes,
)
from asgdsim.simulator import (
    ClusterConfig,
    SyntheticTrace,
    generate_trace,
    partition_parameters,
    simulate,
)
from asgdsim.metrics import cynthia_throughput, throughput
from asgdsim.version import __version__
import logging

logger_formatter = logging.Formatter(
    "[%(name)s: %(asctime)s] {%(lineno)d} %(levelname)s - %(message)s", "%m-%d %H:%M:%S"
)

# Set the root logger.
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
