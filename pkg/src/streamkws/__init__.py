"""Streaming Transformer encoder for voice-trigger detection and false-trigger mitigation."""

from .attention import BlockSpec, attend_full, attend_streaming, build_mask, equivalence_report
from .data import Corpus, CorpusSpec, Utterance, generate_corpus, read_features, write_features
from .estimator import StreamingTriggerDetector
from .exceptions import FormatError, NumericError, SessionError, ShapeError
from .losses import ctc_loss, frame_ce_loss
from .model import ModelConfig, forward_full, init_params, load_checkpoint, mtl_loss, save_checkpoint
from .runtime import CancelPolicy, StreamingSession, Verdict, apply_policy, tail_score
from .training import TrainConfig, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "BlockSpec", "attend_full", "attend_streaming", "build_mask", "equivalence_report",
    "Corpus", "CorpusSpec", "Utterance", "generate_corpus", "read_features", "write_features",
    "StreamingTriggerDetector",
    "FormatError", "NumericError", "SessionError", "ShapeError",
    "ctc_loss", "frame_ce_loss",
    "ModelConfig", "forward_full", "init_params", "load_checkpoint", "mtl_loss", "save_checkpoint",
    "CancelPolicy", "StreamingSession", "Verdict", "apply_policy", "tail_score",
    "TrainConfig", "gradcheck", "train",
]
