"""Waveform primitives: mixing, SI-SNR, integrated loudness, resampling, WAV I/O.

Everything downstream of ingestion runs mono at 16 kHz. All functions are
pure: they never mutate their inputs and are safe to call concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import lfilter, resample_poly

TARGET_RATE = 16000
EPS = 1e-8

# int16 full scale used for both writing and reading, so a write/read round
# trip only costs the rounding step (|error| <= 0.5/32767).
_PCM_SCALE = 32767.0


class SilentSignalError(ValueError):
    """Raised when an operation needs signal energy and the input has none."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float samples with nominal range [-1, 1] plus a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {samples.shape}")
        if samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SiSnrConfig:
    """Numerical guard for SI-SNR divisions and logarithms."""

    eps: float = EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


_DEFAULT_SI_SNR = SiSnrConfig()

ArrayLike = Union[Waveform, np.ndarray, torch.Tensor, Sequence[float]]


def _coerce(x: ArrayLike) -> tuple[torch.Tensor, bool]:
    """Return (tensor, was_tensor). Non-tensor input is upcast to float64."""
    if isinstance(x, torch.Tensor):
        return x, True
    if isinstance(x, Waveform):
        x = x.samples
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def mix_sources(sources: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum of equal-length, equal-rate sources."""
    if len(sources) == 0:
        raise ValueError("mix_sources needs at least one source")
    ref = sources[0]
    for i, s in enumerate(sources):
        if s.sample_rate != ref.sample_rate:
            raise ValueError(
                f"source {i}: sample_rate {s.sample_rate} != {ref.sample_rate} of source 0"
            )
        if len(s) != len(ref):
            raise ValueError(f"source {i}: length {len(s)} != {len(ref)} of source 0")
    total = np.zeros(len(ref), dtype=np.float64)
    for s in sources:
        total += s.samples
    return Waveform(total.astype(np.float32), ref.sample_rate)


def _si_snr_tensor(target: torch.Tensor, estimate: torch.Tensor, eps: float) -> torch.Tensor:
    dot = (estimate * target).sum(dim=-1, keepdim=True)
    target_energy = target.square().sum(dim=-1, keepdim=True).clamp_min(eps)
    proj = (dot / target_energy) * target
    proj_energy = proj.square().sum(dim=-1).clamp_min(eps)
    err_energy = (proj - estimate).square().sum(dim=-1).clamp_min(eps)
    return 10.0 * torch.log10(proj_energy / err_energy)


def si_snr(target: ArrayLike, estimate: ArrayLike, cfg: SiSnrConfig = _DEFAULT_SI_SNR):
    """Scale-invariant SNR in dB, per trailing-axis signal.

    The optimal projection scalar absorbs any positive rescaling of the
    estimate. Signals are not mean-centered. Accepts 1-D signals or batches
    with time on the last axis; returns a float for plain 1-D inputs and a
    tensor (preserving autograd) when either input is a torch tensor.
    """
    t, t_was_tensor = _coerce(target)
    e, e_was_tensor = _coerce(estimate)
    if t.shape[-1] != e.shape[-1]:
        raise ValueError(f"length mismatch: target {t.shape[-1]} vs estimate {e.shape[-1]}")
    with torch.no_grad():
        zero_rows = t.square().sum(dim=-1) == 0
        if bool(zero_rows.any()):
            raise SilentSignalError("si_snr is undefined for an all-zero target")
    value = _si_snr_tensor(t, e, cfg.eps)
    if t_was_tensor or e_was_tensor:
        return value
    if value.ndim == 0:
        return float(value)
    return value.numpy()


def si_snr_loss(target: ArrayLike, estimate: ArrayLike, cfg: SiSnrConfig = _DEFAULT_SI_SNR):
    """Negated si_snr, differentiable w.r.t. every estimate sample."""
    value = si_snr(target, estimate, cfg)
    if isinstance(value, torch.Tensor) or isinstance(value, np.ndarray):
        return -value
    return -value


# ---------------------------------------------------------------------------
# Integrated loudness (ITU-R BS.1770-4, mono): K-weighting followed by
# 400 ms gated blocks at 75% overlap, absolute gate -70 LUFS, relative -10 LU.
# ---------------------------------------------------------------------------

_BLOCK_S = 0.400
_STEP_S = 0.100
_ABS_GATE = -70.0


def _k_weighting(rate: int) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Shelf + high-pass biquads of the K-weighting curve for this rate."""
    # Stage 1: spherical-head high shelf.
    db, f0, q = 3.999843853973347, 1681.974450955533, 0.7071752369554196
    k = math.tan(math.pi * f0 / rate)
    vh = 10.0 ** (db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    b1 = np.array([(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0,
                   (vh - vb * k / q + k * k) / a0])
    a1 = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    # Stage 2: RLB high-pass.
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / rate)
    a0 = 1.0 + k / q + k * k
    b2 = np.array([1.0, -2.0, 1.0])
    a2 = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return (b1, a1), (b2, a2)


def integrated_loudness(w: Waveform) -> float:
    """Gated integrated loudness in LUFS."""
    x = w.samples.astype(np.float64)
    block = int(round(_BLOCK_S * w.sample_rate))
    step = int(round(_STEP_S * w.sample_rate))
    if x.size < block:
        raise ValueError(
            f"signal too short for loudness measurement: {x.size} samples < {block}"
        )
    (b1, a1), (b2, a2) = _k_weighting(w.sample_rate)
    y = lfilter(b2, a2, lfilter(b1, a1, x))
    # Mean square per 400 ms block, advancing 100 ms.
    sq = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = np.arange(0, x.size - block + 1, step)
    z = (sq[starts + block] - sq[starts]) / block
    with np.errstate(divide="ignore"):
        levels = -0.691 + 10.0 * np.log10(z)
    above_abs = levels > _ABS_GATE
    if not above_abs.any():
        raise SilentSignalError("signal is below the absolute loudness gate (silent input)")
    rel_gate = -0.691 + 10.0 * np.log10(np.mean(z[above_abs])) - 10.0
    gated = above_abs & (levels > rel_gate)
    if not gated.any():
        raise SilentSignalError("no blocks survive loudness gating")
    return float(-0.691 + 10.0 * np.log10(np.mean(z[gated])))


def loudness_normalize(w: Waveform, target_lufs: float) -> Waveform:
    """Scale by one positive scalar so integrated loudness hits the target."""
    measured = integrated_loudness(w)
    gain = 10.0 ** ((target_lufs - measured) / 20.0)
    return Waveform(w.samples * np.float32(gain), w.sample_rate)


def resample(w: Waveform, rate: int) -> Waveform:
    """Band-limited polyphase resampling; same-rate input is returned as is."""
    if rate <= 0:
        raise ValueError(f"target rate must be positive, got {rate}")
    if rate == w.sample_rate:
        return w
    g = math.gcd(rate, w.sample_rate)
    y = resample_poly(w.samples.astype(np.float64), rate // g, w.sample_rate // g,
                      padtype="line")
    return Waveform(y.astype(np.float32), rate)


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    """Write mono 16-bit PCM."""
    x = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(x.astype(np.float64) * _PCM_SCALE).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read a mono WAV (16-bit PCM or float) into a Waveform."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / np.float32(_PCM_SCALE)
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    elif data.dtype == np.int32:
        samples = (data / 2147483647.0).astype(np.float32)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)
