"""Toolkit for target-language extraction: mixture simulation, a time-domain
dual-path transformer extractor with embedding-matching auxiliary supervision,
two-stage training, and SI-SNR/STOI/PESQ evaluation."""

from .dsp import (
    EPS,
    TARGET_RATE,
    SilentSignalError,
    SiSnrConfig,
    Waveform,
    integrated_loudness,
    loudness_normalize,
    mix_sources,
    read_wav,
    resample,
    si_snr,
    si_snr_loss,
    write_wav,
)

__all__ = [
    "EPS",
    "TARGET_RATE",
    "SilentSignalError",
    "SiSnrConfig",
    "Waveform",
    "integrated_loudness",
    "loudness_normalize",
    "mix_sources",
    "read_wav",
    "resample",
    "si_snr",
    "si_snr_loss",
    "write_wav",
]

__version__ = "0.1.0"
