"""Adaptive two-stage vision-transformer inference engine.

A cheap pass over a coarse patch grid answers easy images immediately; hard
ones get their most informative patches re-split and a second, finer pass,
warm-started from the first. Exact multiply-accumulate accounting comes
along for free on every run.
"""

from .config import ModelConfig
from .controller import (
    InferenceResult,
    StageOutcome,
    fine_token_count,
    run_inference,
    split_count,
)
from .cost import CostReport, cost_report, encoder_flops, expected_flops, stage_flops
from .errors import CftError
from .imageio import load_image
from .model import ModelWeights, embed_patches, forward
from .tensor import DenseTensor, OpCounter
from .weights_io import generate_synthetic, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "CftError",
    "CostReport",
    "DenseTensor",
    "InferenceResult",
    "ModelConfig",
    "ModelWeights",
    "OpCounter",
    "StageOutcome",
    "__version__",
    "cost_report",
    "embed_patches",
    "encoder_flops",
    "expected_flops",
    "fine_token_count",
    "forward",
    "generate_synthetic",
    "load_image",
    "load_weights",
    "run_inference",
    "save_weights",
    "split_count",
    "stage_flops",
]
