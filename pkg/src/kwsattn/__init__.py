"""Attention-RNN keyword spotting: WAV in, class label and attention trace out."""

__version__ = "0.1.0"

from .audio_io import (
    TASKS, AudioClip, TaskSpec, build_manifest, decode_wav, fit_length, get_task, read_wav, resolve_label,
)
from .dsp import SpectrogramConfig, log_mel
from .model import AttRnnConfig, AttRnnParams, count_params, forward, init_params
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint, train

__all__ = [
    "AttRnnConfig", "AttRnnParams", "AudioClip", "Checkpoint", "SpectrogramConfig", "TASKS",
    "TaskSpec", "TrainConfig", "count_params", "decode_wav", "fit", "fit_length", "forward",
    "build_manifest", "get_task", "init_params", "load_checkpoint", "log_mel", "read_wav", "resolve_label",
    "save_checkpoint", "train",
]
