"""Channel-equalization toolkit for 8-bit CNN quantization.

Represents small CNNs in a graph IR, rewrites them with inversely
proportional channel scalings that leave the float function unchanged,
simulates low-bit inference, and measures/predicts per-layer
signal-to-quantization-noise ratios.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    ConfigError,
    EligibilityError,
    EquantError,
    GraphError,
    ModelFormatError,
    NumericError,
    SampleStreamError,
    ShapeMismatchError,
)
from .graph import BatchNormNode, Graph, JunctionNode, LayerNode, fold_batchnorm
from .quantsim import (
    CalibrationRecord,
    LayerQuant,
    QuantSpec,
    TensorStats,
    calibrate,
    quantize_dequantize,
    quantize_graph,
)
from .equalize import (
    EligibilityReport,
    EqualizeResult,
    ScaleVector,
    bias_correct,
    factorize_pair,
    one_step_equalize,
    relu6_guard,
    two_step_equalize,
)
from .noise import (
    OeBound,
    PredictedNoise,
    SqnrReport,
    compare_runs,
    measure_sqnr,
    optimal_equalization_bound,
    predict_sqnr,
)
from .modelio import Fixture, FixtureSpec, fixture_samples, load_model, make_fixture, save_model
from .tensors import (
    LINEAR,
    RELU,
    RELU6,
    Activation,
    apply_activation,
    channel_stats,
    conv2d,
    depthwise_conv2d,
    prelu,
)

__all__ = [
    "Activation",
    "BatchNormNode",
    "CalibrationRecord",
    "CalibrationError",
    "ConfigError",
    "EligibilityError",
    "EligibilityReport",
    "EqualizeResult",
    "EquantError",
    "Fixture",
    "FixtureSpec",
    "Graph",
    "GraphError",
    "JunctionNode",
    "LayerNode",
    "LayerQuant",
    "LINEAR",
    "ModelFormatError",
    "NumericError",
    "OeBound",
    "PredictedNoise",
    "QuantSpec",
    "RELU",
    "RELU6",
    "SampleStreamError",
    "ScaleVector",
    "ShapeMismatchError",
    "SqnrReport",
    "TensorStats",
    "apply_activation",
    "bias_correct",
    "calibrate",
    "channel_stats",
    "compare_runs",
    "conv2d",
    "depthwise_conv2d",
    "factorize_pair",
    "fixture_samples",
    "fold_batchnorm",
    "load_model",
    "make_fixture",
    "measure_sqnr",
    "one_step_equalize",
    "optimal_equalization_bound",
    "predict_sqnr",
    "prelu",
    "quantize_dequantize",
    "quantize_graph",
    "relu6_guard",
    "save_model",
    "two_step_equalize",
]
