"""Activation-space watermarking for U-shaped split federated learning.

The package simulates the full pipeline at desk scale: a server that
injects a keyed watermark gradient while training the segment it hosts, a
data-free verifier, the threshold calibration that backs it, the standard
removal/evasion attacks, and a client-side gradient anomaly detector,
all driven by a deterministic seeded harness.
"""

from .linalg import NumericalError, RngStream, StreamLabel
from .nn import LayerSpec, OptimizerConfig, SplitModel, SplitSpec
from .data import Dataset, PartitionSpec, make_blobs, partition
from .watermark import (
    EmbedConfig,
    NullCalibration,
    VerificationReport,
    WatermarkKey,
    calibrate_threshold,
    keygen,
    verify,
)
from .protocol import (
    MessageKind,
    ProtocolConfig,
    ProtocolError,
    RoundMetrics,
    RunResult,
    run_experiment,
)
from .attacks import (
    AdaptiveAttackConfig,
    NoiseSpec,
    SubspaceEstimate,
    adaptive_remove,
    estimate_subspace,
    finetune,
    inject_noise,
    prune,
    quantize,
)
from .detect import DetectorState, build_reference, score_round

__version__ = "0.1.0"
