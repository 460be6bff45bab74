"""AC-CovidNet building blocks."""

from .config import (
    COMBINE_MODES,
    ENCODER_FEATURE_DIM,
    AttentionGateConfig,
    ClassifierConfig,
    EncoderConfig,
    ModelConfig,
    PEPXConfig,
    ProjectionHeadConfig,
    StageConfig,
)
from .functional import (
    attention_gate_forward,
    classifier_forward,
    encoder_forward,
    pepx_forward,
    projection_forward,
)
from .layers import PEPX, AttentionGate, resample
from .networks import (
    ACCovidNet,
    Classifier,
    Encoder,
    EncoderStage,
    ProjectionHead,
    build_classifier,
    build_encoder,
    build_model,
    build_projection,
    count_parameters,
    init_parameters,
    l2_normalize,
    parameter_digest,
)
