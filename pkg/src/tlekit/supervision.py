"""Frozen speech-model embeddings and the losses built on them.

A registry maps model names to frozen encoders that turn 16 kHz waveforms
into (frames, feature_dim) hidden-state sequences at roughly 50 frames/s.
Gradients flow from the embeddings back into the input waveform; the model
parameters themselves never receive updates. The auxiliary loss is the
log-scaled mean absolute difference between the embeddings of the target and
the estimate; the training loss adds it to the SI-SNR loss with weight beta.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .dsp import TARGET_RATE, Waveform, si_snr_loss

MAE_LOG_FLOOR = 1e-8
CACHE_ENV_VAR = "TLEKIT_MODEL_CACHE"


class ModelLoadError(RuntimeError):
    """A registry model could not be constructed or fetched."""


@dataclass(frozen=True)
class EmbeddingModelSpec:
    """How to obtain and read one frozen speech model."""

    model_id: str
    layer_index: int = 12
    expected_rate: int = TARGET_RATE
    feature_dim: int = 768

    def __post_init__(self):
        if self.layer_index < 0:
            raise ValueError(f"layer_index must be >= 0, got {self.layer_index}")
        if self.expected_rate != TARGET_RATE:
            raise ValueError(f"embedding models consume {TARGET_RATE} Hz audio only")


@dataclass(frozen=True)
class RegistryEntry:
    spec: EmbeddingModelSpec
    backend: str          # "transformers" or "builtin"
    source: str           # hub path / local dir for transformers, seed tag for builtin
    num_layers: int
    normalize_input: bool  # zero-mean/unit-var the waveform first (WavLM-style)


# The three hub models are read at their final hidden layer (index == layer
# count, with index 0 being the conv front-end output). "tiny-frozen" is a
# small deterministic stand-in so tests and desk-scale runs work offline.
MODEL_REGISTRY: dict[str, RegistryEntry] = {
    "mhubert-147": RegistryEntry(
        EmbeddingModelSpec("utter-project/mHuBERT-147", layer_index=12, feature_dim=768),
        backend="transformers", source="utter-project/mHuBERT-147",
        num_layers=12, normalize_input=False),
    "hubert-base": RegistryEntry(
        EmbeddingModelSpec("facebook/hubert-base-ls960", layer_index=12, feature_dim=768),
        backend="transformers", source="facebook/hubert-base-ls960",
        num_layers=12, normalize_input=False),
    "wavlm-base": RegistryEntry(
        EmbeddingModelSpec("microsoft/wavlm-base", layer_index=12, feature_dim=768),
        backend="transformers", source="microsoft/wavlm-base",
        num_layers=12, normalize_input=True),
    "tiny-frozen": RegistryEntry(
        EmbeddingModelSpec("tiny-frozen", layer_index=2, feature_dim=64),
        backend="builtin", source="seed:20240", num_layers=2, normalize_input=False),
}

DEFAULT_MODEL = "mhubert-147"


@dataclass(frozen=True)
class LossWeights:
    """Weight of the embedding term in the training loss."""

    beta: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


class _TinyFrozenEncoder(nn.Module):
    """Deterministic conv encoder with HuBERT-like framing (400-sample
    receptive field, 320-sample stride -> ~50 frames/s)."""

    def __init__(self, feature_dim: int, seed: int):
        super().__init__()
        self.conv_in = nn.Conv1d(1, feature_dim, kernel_size=400, stride=320)
        self.mix = nn.Conv1d(feature_dim, feature_dim, kernel_size=3, padding=1)
        self.norm = nn.LayerNorm(feature_dim)
        # Seeded filters; the layer norm keeps its standard affine so the
        # embeddings come out at unit scale like the hub models'.
        gen = torch.Generator().manual_seed(seed)
        for conv in (self.conv_in, self.mix):
            for p in conv.parameters():
                with torch.no_grad():
                    p.copy_(torch.empty_like(p).uniform_(-0.05, 0.05, generator=gen))

    def forward(self, x: torch.Tensor, layer_index: int) -> torch.Tensor:
        # x: (B, T) -> (B, frames, dim); layer_index selects depth 1 or 2
        h = torch.nn.functional.gelu(self.conv_in(x.unsqueeze(1)))
        if layer_index >= 2:
            h = torch.nn.functional.gelu(self.mix(h))
        return self.norm(h.transpose(1, 2))


class FrozenSpeechModel:
    """Adapter around one frozen pretrained model `h(.)`.

    `embed` is differentiable with respect to its input but the wrapped
    parameters are detached from optimization (requires_grad False, eval
    mode). `call_count` records how many times embeddings were computed.
    """

    def __init__(self, name: str, entry: RegistryEntry, module: nn.Module):
        self.name = name
        self.spec = entry.spec
        self.entry = entry
        self._module = module
        self._module.eval()
        for p in self._module.parameters():
            p.requires_grad_(False)
        self.call_count = 0

    def parameter_checksum(self) -> float:
        """Cheap frozen-ness witness: sum of absolute parameter values."""
        with torch.no_grad():
            return float(sum(p.abs().sum() for p in self._module.parameters()))

    def state_dict_clone(self) -> dict:
        return {k: v.detach().clone() for k, v in self._module.state_dict().items()}

    def embed(self, waveform: Union[Waveform, torch.Tensor, np.ndarray]) -> torch.Tensor:
        """16 kHz audio -> (frames, dim) or (batch, frames, dim) hidden states."""
        if isinstance(waveform, Waveform):
            if waveform.sample_rate != self.spec.expected_rate:
                raise ValueError(
                    f"{self.name} expects {self.spec.expected_rate} Hz input, "
                    f"got {waveform.sample_rate} Hz"
                )
            x = torch.from_numpy(waveform.samples.copy())
        elif isinstance(waveform, np.ndarray):
            x = torch.as_tensor(waveform, dtype=torch.float32)
        else:
            x = waveform
        squeeze = x.ndim == 1
        if squeeze:
            x = x.unsqueeze(0)
        if self.entry.normalize_input:
            x = (x - x.mean(dim=-1, keepdim=True)) / (x.std(dim=-1, keepdim=True) + 1e-7)
        self.call_count += 1
        if self.entry.backend == "builtin":
            out = self._module(x, self.spec.layer_index)
        else:
            states = self._module(x, output_hidden_states=True).hidden_states
            out = states[self.spec.layer_index]
        return out.squeeze(0) if squeeze else out


def load_embedding_model(name_or_spec: Union[str, EmbeddingModelSpec] = DEFAULT_MODEL,
                         cache_dir: Optional[str] = None) -> FrozenSpeechModel:
    """Instantiate a frozen registry model.

    Hub-backed entries need their weights available locally (or fetchable by
    `transformers`); the cache directory can be set with the
    TLEKIT_MODEL_CACHE environment variable.
    """
    if isinstance(name_or_spec, EmbeddingModelSpec):
        matches = [n for n, e in MODEL_REGISTRY.items() if e.spec.model_id == name_or_spec.model_id]
        if not matches:
            raise ModelLoadError(f"no registry entry for model_id {name_or_spec.model_id!r}")
        name = matches[0]
    else:
        name = name_or_spec
    if name not in MODEL_REGISTRY:
        raise ModelLoadError(
            f"unknown embedding model {name!r}; known: {sorted(MODEL_REGISTRY)}"
        )
    entry = MODEL_REGISTRY[name]
    if entry.spec.layer_index > entry.num_layers:
        raise ModelLoadError(
            f"{name}: layer_index {entry.spec.layer_index} exceeds {entry.num_layers} layers"
        )
    if entry.backend == "builtin":
        seed = int(entry.source.split(":", 1)[1])
        return FrozenSpeechModel(name, entry, _TinyFrozenEncoder(entry.spec.feature_dim, seed))
    try:
        from transformers import AutoModel
    except ImportError as exc:
        raise ModelLoadError(
            f"loading {entry.spec.model_id!r} needs the 'transformers' extra"
        ) from exc
    cache = cache_dir or os.environ.get(CACHE_ENV_VAR)
    try:
        module = AutoModel.from_pretrained(entry.source, cache_dir=cache)
    except Exception as exc:
        raise ModelLoadError(f"could not load {entry.spec.model_id!r}: {exc}") from exc
    return FrozenSpeechModel(name, entry, module)


def mae_loss(e_target: torch.Tensor, e_estimate: torch.Tensor,
             floor: float = MAE_LOG_FLOOR) -> torch.Tensor:
    """Log-scaled mean absolute embedding difference, in dB-like units.

    The mean runs over every frame and feature (sequences are truncated to
    the shorter frame count first, which only absorbs the +-1 frame rounding
    between equal-length waveforms). Clamped at `floor` so identical
    embeddings give 10*log10(floor) instead of -inf.
    """
    if e_target.shape[-1] != e_estimate.shape[-1]:
        raise ValueError(
            f"feature_dim mismatch: {e_target.shape[-1]} vs {e_estimate.shape[-1]}"
        )
    frames = min(e_target.shape[-2], e_estimate.shape[-2])
    a = e_target[..., :frames, :]
    b = e_estimate[..., :frames, :]
    mean_abs = (a - b).abs().mean()
    return 10.0 * torch.log10(mean_abs.clamp_min(floor))


def combined_loss(target: Union[Waveform, torch.Tensor],
                  estimate: Union[Waveform, torch.Tensor],
                  weights: LossWeights,
                  model: Optional[FrozenSpeechModel] = None) -> torch.Tensor:
    """SI-SNR loss plus beta times the embedding loss.

    With beta == 0 the embedding model is never invoked (and may be None).
    """
    base = si_snr_loss(target, estimate)
    if isinstance(base, torch.Tensor):
        base = base.mean()
    else:
        base = torch.as_tensor(base, dtype=torch.float64)
    if weights.beta == 0.0:
        return base
    if model is None:
        raise ValueError("combined_loss needs an embedding model when beta > 0")
    e_t = model.embed(target)
    e_e = model.embed(estimate)
    return base + weights.beta * mae_loss(e_t, e_e)
