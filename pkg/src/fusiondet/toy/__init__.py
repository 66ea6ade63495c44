"""Miniature end-to-end detector for experiments on synthetic scenes."""

from .model import (
    MODEL_MODES,
    FrameCache,
    StepState,
    ToyModel,
    ToyModelConfig,
    build_frame_cache,
)

__all__ = [
    "MODEL_MODES",
    "FrameCache",
    "StepState",
    "ToyModel",
    "ToyModelConfig",
    "build_frame_cache",
]
