"""Streaming audio-visual active speaker detection with bounded context."""

from .config import UNBOUNDED, ContextConfig, EncoderConfig, FrontendConfig, FusionConfig, ModelConfig
from .encoders import EmbeddingSequence, audio_forward, measure_receptive_field, visual_aux_score, visual_forward
from .frontend import FaceFrameSequence, MfccSequence, align_streams, compute_mfcc, preprocess_faces
from .fusion import ContextMask, build_context_mask, constrained_attention, fusion_forward, gru_fusion_forward, transformer_layer_forward
from .model_io import init_random, load_weights, save_weights
from .streaming import Emission, StreamSession, open_session

__version__ = "0.1.0"

__all__ = [
    "UNBOUNDED", "ContextConfig", "EncoderConfig", "FrontendConfig", "FusionConfig", "ModelConfig",
    "EmbeddingSequence", "audio_forward", "visual_forward", "visual_aux_score", "measure_receptive_field",
    "FaceFrameSequence", "MfccSequence", "align_streams", "compute_mfcc", "preprocess_faces",
    "ContextMask", "build_context_mask", "constrained_attention", "fusion_forward",
    "gru_fusion_forward", "transformer_layer_forward",
    "init_random", "load_weights", "save_weights",
    "Emission", "StreamSession", "open_session",
]
