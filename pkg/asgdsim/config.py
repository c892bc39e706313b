'''!
 * Defaults of the simulation and measurement protocol.
'''

WARMUP_STEPS = 50
SIM_STEPS = 1000
RANDOM_SEED = 1
DEFAULT_WIN_BYTES = 28 * (1024 ** 2)
SATURATION_TOLERANCE = 0.02
BATCH_SIZE = 32
# remaining work below this is treated as done (us)
EPS_US = 1e-6
OUTPUT_DIR_ENV = "ASGDSIM_OUTPUT_DIR"
