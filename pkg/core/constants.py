"""
Application constants shared by the numeric core, persistence and CLI
"""

# On-disk format versions
CHECKPOINT_FORMAT_VERSION = 1
TRAJECTORY_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

# Head names inside a checkpoint
HEAD_POTENTIAL = "potential"
HEAD_CONTROL = "control"
HEAD_DAMPING = "damping"
HEAD_ENCODER = "encoder"
HEAD_DECODER = "decoder"
HEAD_RESIDUAL_STATE = "residual_state"
HEAD_RESIDUAL_CONTROL = "residual_control"

# Model variants
VARIANT_VV = "vv-fvin"
VARIANT_SV = "sv-fvin"
VARIANT_RESNN = "resnn"
VARIANTS = (VARIANT_VV, VARIANT_SV, VARIANT_RESNN)

# Systems
SYSTEM_PENDULUM = "pendulum"
SYSTEM_CARTPOLE = "cartpole"
SYSTEM_QQS2 = "qqs2-offline"
SYSTEMS = (SYSTEM_PENDULUM, SYSTEM_CARTPOLE, SYSTEM_QQS2)

# Control laws for data collection
CONTROL_RANDOM = "random"
CONTROL_ZERO = "zero"
CONTROL_RANDOM_THEN_ZERO = "random_then_zero"
CONTROL_POLICY = "policy"

# Prediction modes
MODE_FORCED = "forced"
MODE_ZERO_CONTROL = "zero-control"

# Numerics
DEFAULT_HIDDEN = (100, 100)
DIVERGENCE_LOSS = 1e6
CEM_VARIANCE_FLOOR = 1e-4

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2
