MB = 1_000_000

DEFAULT_LAUNCH_LATENCY = 50e-6

DEFAULT_PARTITION_BYTES = 30 * MB
DEFAULT_BUCKET_BYTES = 25 * MB

DEFAULT_SCHED_PHASE_COST = 6.2e-3
DEFAULT_RESUME_SIGNAL_COST = 1.45e-3
DEFAULT_EXPERT_SWAP_COST = 0.2e-3
DEFAULT_BACKWARD_FACTOR = 2.0

DEFAULT_PATH_LENGTH = 3
DEFAULT_MAX_PACKED = 4

PACKING_WARMUP_STEPS = 10
PACKING_CADENCE = 4

DEFAULT_BATCH_CONCENTRATION = 50.0

# Relative slack for fluid arithmetic; remainders below this fraction of an
# op's demand count as drained.
FLOW_EPSILON = 1e-9

SUMMARY_SCHEMA_VERSION = 1

TIMELINE_HEADER = ("op_id", "kind", "device", "start_s", "end_s", "isolated_s")

TRACE_FILE = "trace.jsonl"
TRUTH_FILE = "trace.truth.json"
PROFILE_FILE = "profile.json"
TRAIN_SUMMARY_FILE = "train_summary.json"
INFER_SUMMARY_FILE = "infer_summary.json"
REPORT_FILE = "report.csv"
