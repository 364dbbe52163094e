"""Stochastic regeneration for speech restoration.

A predictive network estimates clean speech, and a score-based diffusion model
anchored at that estimate regenerates the final output.
"""

from .estimator import SpectrogramTransformer, StormEnhancer
from .sampler import CallCounter, SamplerConfig, pc_sample
from .sde import SdeConfig
from .spectral import ComplexSpectrogram, StftConfig, Waveform, read_wav, write_wav
from .storm import Mode, StormConfig, Strategy, TrainSchedule, enhance_waveform, storm_infer, train_loop

__version__ = "0.1.0"

__all__ = [
    "CallCounter", "ComplexSpectrogram", "Mode", "SamplerConfig", "SdeConfig", "SpectrogramTransformer",
    "StftConfig", "StormConfig", "StormEnhancer", "Strategy", "TrainSchedule", "Waveform", "enhance_waveform",
    "pc_sample", "read_wav", "storm_infer", "train_loop", "write_wav",
]
