"""Time-domain extraction network: 1-D conv encoder, chunk segmentation,
dual-path transformer blocks (attention within each chunk, then across
corresponding positions of different chunks), single-mask estimation, and
transposed-conv decoding back to a waveform of the input length.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import TARGET_RATE, Waveform

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the common dual-path transformer configuration for
    separation at 16 kHz (2 ms hop encoder, 250-frame chunks at 50% overlap)
    with a single dual-path block of 8+8 transformer layers.
    """

    enc_kernel: int = 16
    enc_stride: int = 8
    feat_dim: int = 256
    chunk_len: int = 250
    chunk_hop: int = 125
    n_heads: int = 8
    n_intra_layers: int = 8
    n_inter_layers: Optional[int] = None  # None -> same as n_intra_layers
    n_dual_blocks: int = 1
    ff_dim: int = 1024

    def __post_init__(self):
        counts = {
            "enc_kernel": self.enc_kernel,
            "enc_stride": self.enc_stride,
            "feat_dim": self.feat_dim,
            "chunk_len": self.chunk_len,
            "chunk_hop": self.chunk_hop,
            "n_heads": self.n_heads,
            "n_intra_layers": self.n_intra_layers,
            "n_dual_blocks": self.n_dual_blocks,
            "ff_dim": self.ff_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.chunk_hop > self.chunk_len:
            raise ValueError(
                f"chunk_hop ({self.chunk_hop}) must not exceed chunk_len ({self.chunk_len})"
            )
        if self.feat_dim % self.n_heads != 0:
            raise ValueError(
                f"feat_dim ({self.feat_dim}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_inter_layers is not None and self.n_inter_layers < 1:
            raise ValueError(f"n_inter_layers must be >= 1, got {self.n_inter_layers}")

    @property
    def inter_layers(self) -> int:
        return self.n_intra_layers if self.n_inter_layers is None else self.n_inter_layers

    def n_frames(self, n_samples: int) -> int:
        """Encoder output frames for an input of n_samples."""
        if n_samples < self.enc_kernel:
            raise ValueError(
                f"input length {n_samples} is shorter than the encoder kernel; "
                f"need at least {self.enc_kernel} samples"
            )
        return (n_samples - self.enc_kernel) // self.enc_stride + 1

    def n_chunks(self, n_frames: int) -> int:
        if n_frames < 1:
            raise ValueError("need at least one frame")
        return max(1, math.ceil((n_frames - self.chunk_len) / self.chunk_hop) + 1)


@dataclass
class ChunkTensor:
    """Segmented feature map (batch, n_chunks, chunk_len, feat_dim) plus the
    original frame count needed to invert the segmentation exactly."""

    data: torch.Tensor
    n_frames: int

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"chunk tensor must be 4-D, got shape {tuple(self.data.shape)}")
        if self.n_frames < 1:
            raise ValueError(f"stored frame count must be >= 1, got {self.n_frames}")


def segment(feats: torch.Tensor, cfg: ModelConfig) -> ChunkTensor:
    """Split (batch, frames, feat) into overlapping chunks, right-padded with
    zeros onto the chunk grid."""
    if feats.ndim != 3:
        raise ValueError(f"expected (batch, frames, feat), got shape {tuple(feats.shape)}")
    b, n_frames, dim = feats.shape
    k, hop = cfg.chunk_len, cfg.chunk_hop
    n_chunks = cfg.n_chunks(n_frames)
    padded = (n_chunks - 1) * hop + k
    x = feats.transpose(1, 2)  # (B, dim, frames)
    if padded > n_frames:
        x = F.pad(x, (0, padded - n_frames))
    u = F.unfold(x.unsqueeze(-1), kernel_size=(k, 1), stride=(hop, 1))  # (B, dim*k, C)
    chunks = u.view(b, dim, k, n_chunks).permute(0, 3, 2, 1).contiguous()
    return ChunkTensor(chunks, n_frames)


def merge_chunks(chunks: ChunkTensor, cfg: ModelConfig) -> torch.Tensor:
    """Overlap-add inverse of segment, normalized by per-position overlap
    counts so that merge_chunks(segment(f)) == f."""
    b, n_chunks, k, dim = chunks.data.shape
    hop = cfg.chunk_hop
    if k != cfg.chunk_len:
        raise ValueError(f"chunk length {k} does not match config chunk_len {cfg.chunk_len}")
    if cfg.n_chunks(chunks.n_frames) != n_chunks:
        raise ValueError(
            f"stored frame count {chunks.n_frames} is inconsistent with {n_chunks} chunks"
        )
    padded = (n_chunks - 1) * hop + k
    u = chunks.data.permute(0, 3, 2, 1).reshape(b, dim * k, n_chunks)
    summed = F.fold(u, output_size=(padded, 1), kernel_size=(k, 1), stride=(hop, 1))
    ones = torch.ones(1, dim * k, n_chunks, dtype=chunks.data.dtype, device=chunks.data.device)
    counts = F.fold(ones, output_size=(padded, 1), kernel_size=(k, 1), stride=(hop, 1))
    merged = (summed / counts).squeeze(-1)  # (B, dim, padded)
    return merged[:, :, : chunks.n_frames].transpose(1, 2).contiguous()


def sinusoidal_encoding(length: int, dim: int, dtype: torch.dtype,
                        device: torch.device) -> torch.Tensor:
    """Standard fixed sin/cos positional table of shape (length, dim)."""
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=dtype, device=device)
    div = torch.exp(half * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe


def _transformer_stack(cfg: ModelConfig, n_layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=cfg.feat_dim,
        nhead=cfg.n_heads,
        dim_feedforward=cfg.ff_dim,
        dropout=0.0,
        activation="relu",
        batch_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=n_layers, enable_nested_tensor=False)


class DualPathBlock(nn.Module):
    """One block of chunk-local attention followed by cross-chunk attention,
    each wrapped in positional encoding, layer norm, and a residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.intra = _transformer_stack(cfg, cfg.n_intra_layers)
        self.inter = _transformer_stack(cfg, cfg.inter_layers)
        self.intra_norm = nn.LayerNorm(cfg.feat_dim)
        self.inter_norm = nn.LayerNorm(cfg.feat_dim)

    def intra_pass(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, K, d): attend over K within each chunk
        b, c, k, d = x.shape
        flat = x.reshape(b * c, k, d)
        flat = flat + sinusoidal_encoding(k, d, x.dtype, x.device)
        y = self.intra_norm(self.intra(flat)).reshape(b, c, k, d)
        return x + y

    def inter_pass(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, K, d): attend over C at each within-chunk position
        b, c, k, d = x.shape
        flat = x.permute(0, 2, 1, 3).reshape(b * k, c, d)
        flat = flat + sinusoidal_encoding(c, d, x.dtype, x.device)
        y = self.inter_norm(self.inter(flat)).reshape(b, k, c, d).permute(0, 2, 1, 3)
        return x + y

    def forward(self, chunks: ChunkTensor) -> ChunkTensor:
        return ChunkTensor(self.inter_pass(self.intra_pass(chunks.data)), chunks.n_frames)


class Extractor(nn.Module):
    """Encoder -> segment -> dual-path blocks -> merge -> mask -> decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Conv1d(1, cfg.feat_dim, cfg.enc_kernel, stride=cfg.enc_stride,
                                 bias=False)
        self.blocks = nn.ModuleList(DualPathBlock(cfg) for _ in range(cfg.n_dual_blocks))
        self.mask_net = nn.Sequential(
            nn.PReLU(), nn.Linear(cfg.feat_dim, cfg.feat_dim), nn.Sigmoid()
        )
        self.decoder = nn.ConvTranspose1d(cfg.feat_dim, 1, cfg.enc_kernel,
                                          stride=cfg.enc_stride, bias=False)

    def encode(self, mixture: torch.Tensor) -> torch.Tensor:
        """(B, T) -> non-negative (B, frames, feat)."""
        self.cfg.n_frames(mixture.shape[-1])  # validates minimum length
        feats = F.relu(self.encoder(mixture.unsqueeze(1)))
        return feats.transpose(1, 2)

    def estimate_mask(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, frames, feat) -> gate of the same shape with entries in [0, 1]."""
        return self.mask_net(feats)

    def decode(self, masked_feats: torch.Tensor, length: int) -> torch.Tensor:
        """(B, frames, feat) -> (B, length) waveform."""
        y = self.decoder(masked_feats.transpose(1, 2)).squeeze(1)
        if y.shape[-1] >= length:
            return y[..., :length]
        return F.pad(y, (0, length - y.shape[-1]))

    def forward(self, mixture: torch.Tensor) -> torch.Tensor:
        feats = self.encode(mixture)
        chunks = segment(feats, self.cfg)
        for block in self.blocks:
            chunks = block(chunks)
        merged = merge_chunks(chunks, self.cfg)
        mask = self.estimate_mask(merged)
        return self.decode(feats * mask, mixture.shape[-1])


def build_extractor(cfg: ModelConfig, seed: Optional[int] = None) -> Extractor:
    """Construct an Extractor; a seed makes the initialization reproducible
    without disturbing the global RNG."""
    if seed is None:
        return Extractor(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Extractor(cfg)


def extract(model: Extractor, mixture: Union[Waveform, torch.Tensor]) -> Union[Waveform, torch.Tensor]:
    """Run the extractor on one mixture in evaluation mode.

    Waveform input must be at 16 kHz and comes back as a Waveform of the same
    length; tensor input (batched or not) comes back as a tensor.
    """
    if isinstance(mixture, Waveform):
        if mixture.sample_rate != TARGET_RATE:
            raise ValueError(
                f"extract expects {TARGET_RATE} Hz input, got {mixture.sample_rate} Hz; "
                "resample first"
            )
        x = torch.from_numpy(mixture.samples.copy()).unsqueeze(0)
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                y = model(x)
        finally:
            model.train(was_training)
        return Waveform(y.squeeze(0).numpy(), TARGET_RATE)
    x = mixture if mixture.ndim == 2 else mixture.unsqueeze(0)
    y = model(x)
    return y if mixture.ndim == 2 else y.squeeze(0)


def save_checkpoint(path: Union[str, Path], model: Extractor, extra: Optional[dict] = None) -> None:
    """Versioned container: declarative config text plus named parameters."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_json": json.dumps(asdict(model.cfg), sort_keys=True),
        "state_dict": model.state_dict(),
    }
    if extra is not None:
        payload["extra"] = extra
    torch.save(payload, str(path))


def load_checkpoint(path: Union[str, Path]) -> tuple[Extractor, dict]:
    """Rebuild the exact architecture from the stored config and load weights."""
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    cfg = ModelConfig(**json.loads(payload["config_json"]))
    model = Extractor(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
