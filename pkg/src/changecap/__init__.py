"""Desk-scale bi-temporal change captioning.

Change-extraction fusion over feature pairs, a 4x-downsampling multimodal
projector, a tiny causal decoder, two-stage AdamW training, prompt
augmentation, and caption metrics — all on a small float64 autodiff core.
"""

from .ce import CEParams, ConcatFusionParams, FeaturePair, ce_forward, cosine_similarity_map
from .decoder import DecoderConfig, DecoderParams, Vocab, forward_loss, generate_greedy
from .model import CaptionModel, ModelConfig
from .projector import ProjectedEmbedding, ProjectorParams, project, space_to_depth_2x2
from .prompt import GUIDE_PROMPT, HttpBaseModelClient, MockBaseModelClient, assemble_prompt
from .tensor import Tensor, backward, finite_diff_check
from .train import AdamW, StagePlan, lr_at_step, run_stage, train_two_stage

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CEParams",
    "CaptionModel",
    "ConcatFusionParams",
    "DecoderConfig",
    "DecoderParams",
    "FeaturePair",
    "GUIDE_PROMPT",
    "HttpBaseModelClient",
    "MockBaseModelClient",
    "ModelConfig",
    "ProjectedEmbedding",
    "ProjectorParams",
    "StagePlan",
    "Tensor",
    "Vocab",
    "assemble_prompt",
    "backward",
    "ce_forward",
    "cosine_similarity_map",
    "finite_diff_check",
    "forward_loss",
    "generate_greedy",
    "lr_at_step",
    "project",
    "run_stage",
    "space_to_depth_2x2",
    "train_two_stage",
    "__version__",
]
