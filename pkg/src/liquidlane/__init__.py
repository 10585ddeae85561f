"""Liquid recurrent cells for vision-based lane keeping.

A single forward/backward implementation covers six continuous-time
cell variants (conductance or saturating synapses, neural or synaptic
activation, fixed or liquid time constants) plus LSTM/GRU/MGU
baselines, together with the convolutional perception head, a
closed-loop road simulator, imitation training with hand-derived
gradients, and interpretability metrics (trajectory correlation,
saliency maps, SSIM noise robustness).
"""

__version__ = "0.1.0"

from .cells import (
    CellKind,
    CellParameters,
    DimensionMismatchError,
    GatedParameters,
    HiddenState,
    NumericOverflowError,
    UnsupportedKindError,
    cell_from_json,
    cell_to_json,
    elastance,
    family,
    forget_update,
    forward_step_batch,
    gated_forward_batch,
    init_parameters,
    is_gated,
    load_cell,
    ode_rhs,
    parameter_shapes,
    save_cell,
    sigmoid,
    step,
    step_gated,
    unroll,
    zero_state,
)
from .config import (
    ConfigError,
    apply_overrides,
    config_hash,
    load_config,
    load_preset,
    training_config,
    validate_config,
)
from .metrics import (
    REAL_ROAD_REFERENCE,
    CorrelationTable,
    MetricsReport,
    abs_correlation,
    correlation_table,
    ssim,
    ssim_robustness,
)
from .perception import (
    FRAME_HEIGHT,
    FRAME_WIDTH,
    ConvHead,
    add_gaussian_noise,
    conv_forward,
    conv_forward_batch,
    init_conv_head,
    visual_backprop,
)
from .policy import (
    PolicyModel,
    checkpoint_from_json,
    checkpoint_to_json,
    init_policy,
    load_checkpoint,
    save_checkpoint,
)
from .simulator import (
    EpisodeTrace,
    ExpertController,
    LaneDataset,
    RoadProfile,
    VehicleState,
    build_dataset,
    expert_steer,
    generate_road,
    load_road,
    load_trace,
    render_camera,
    rollout_closed_loop,
    rollout_expert,
    save_road,
    save_trace,
    vehicle_step,
)
from .training import (
    GradCheckReport,
    TrainingConfig,
    TrainingDivergedError,
    TrainResult,
    bptt_gradients,
    finite_difference_gradients,
    gradient_check,
    mse_loss,
    read_history_csv,
    train,
    weighted_loss,
    write_history_csv,
)

__all__ = [
    "__version__",
    # cells
    "CellKind",
    "CellParameters",
    "GatedParameters",
    "HiddenState",
    "DimensionMismatchError",
    "UnsupportedKindError",
    "NumericOverflowError",
    "sigmoid",
    "family",
    "is_gated",
    "parameter_shapes",
    "init_parameters",
    "zero_state",
    "elastance",
    "forget_update",
    "forward_step_batch",
    "gated_forward_batch",
    "step",
    "step_gated",
    "ode_rhs",
    "unroll",
    "cell_to_json",
    "cell_from_json",
    "save_cell",
    "load_cell",
    # perception
    "FRAME_HEIGHT",
    "FRAME_WIDTH",
    "ConvHead",
    "init_conv_head",
    "conv_forward",
    "conv_forward_batch",
    "visual_backprop",
    "add_gaussian_noise",
    # policy
    "PolicyModel",
    "init_policy",
    "checkpoint_to_json",
    "checkpoint_from_json",
    "save_checkpoint",
    "load_checkpoint",
    # simulator
    "RoadProfile",
    "VehicleState",
    "EpisodeTrace",
    "ExpertController",
    "LaneDataset",
    "generate_road",
    "vehicle_step",
    "expert_steer",
    "render_camera",
    "rollout_closed_loop",
    "rollout_expert",
    "build_dataset",
    "save_road",
    "load_road",
    "save_trace",
    "load_trace",
    # training
    "TrainingConfig",
    "TrainResult",
    "TrainingDivergedError",
    "GradCheckReport",
    "mse_loss",
    "weighted_loss",
    "bptt_gradients",
    "finite_difference_gradients",
    "gradient_check",
    "train",
    "write_history_csv",
    "read_history_csv",
    # metrics
    "REAL_ROAD_REFERENCE",
    "CorrelationTable",
    "MetricsReport",
    "abs_correlation",
    "correlation_table",
    "ssim",
    "ssim_robustness",
    # config
    "ConfigError",
    "validate_config",
    "load_config",
    "load_preset",
    "apply_overrides",
    "config_hash",
    "training_config",
]
