"""Two-stage training: stage 1 optimizes SI-SNR alone; stage 2 starts from
the stage-1 best checkpoint with a fresh optimizer and adds the weighted
embedding loss. The learning rate halves after `plateau_patience` consecutive
non-improving dev epochs and training stops after `stop_patience` of them.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .datasim import ManifestEntry, read_manifest
from .dsp import Waveform, read_wav, si_snr
from .model import Extractor, ModelConfig, build_extractor, load_checkpoint, save_checkpoint
from .supervision import DEFAULT_MODEL, FrozenSpeechModel, LossWeights, combined_loss, mae_loss


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good checkpoints remain on disk."""

    def __init__(self, message: str, best_path: Optional[Path], last_path: Optional[Path]):
        super().__init__(message)
        self.best_path = best_path
        self.last_path = last_path


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule for one training stage."""

    stage: int = 1
    lr0: float = 3e-4
    batch_size: int = 2
    plateau_patience: int = 3
    halving_factor: float = 0.5
    stop_patience: int = 20
    max_epochs: int = 200
    grad_clip: float = 5.0
    beta: Optional[float] = None        # None -> 0.0 for stage 1, 1.0 for stage 2
    embedding_model: str = DEFAULT_MODEL
    stage2_restart_lr: bool = True      # False: continue from stage-1 final lr
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        for name in ("plateau_patience", "stop_patience", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.halving_factor < 1:
            raise ValueError(f"halving_factor must be in (0, 1), got {self.halving_factor}")
        if self.stage == 1 and self.beta not in (None, 0.0):
            raise ValueError(f"stage 1 trains with beta = 0, got {self.beta}")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    @property
    def resolved_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return 0.0 if self.stage == 1 else 1.0


@dataclass
class TrainState:
    """Mutable schedule bookkeeping carried across epochs."""

    current_lr: float
    epoch: int = 0
    best_dev_loss: float = math.inf
    epochs_since_improve_lr: int = 0
    epochs_since_improve_stop: int = 0
    history: list = field(default_factory=list)


def lr_schedule_step(state: TrainState, dev_loss: float, cfg: TrainConfig) -> TrainState:
    """Plateau halving: strict improvement resets the counter; after
    plateau_patience consecutive non-improving epochs the lr halves."""
    if dev_loss < state.best_dev_loss:
        state.best_dev_loss = dev_loss
        state.epochs_since_improve_lr = 0
        state.epochs_since_improve_stop = 0
    else:
        state.epochs_since_improve_lr += 1
        state.epochs_since_improve_stop += 1
        if state.epochs_since_improve_lr >= cfg.plateau_patience:
            state.current_lr *= cfg.halving_factor
            state.epochs_since_improve_lr = 0
    return state


def early_stop_check(state: TrainState, cfg: TrainConfig) -> bool:
    return state.epochs_since_improve_stop >= cfg.stop_patience


class MixturePairDataset:
    """(mixture, target-source) pairs from one manifest and its audio tree."""

    def __init__(self, manifest: Union[str, Path, Sequence[ManifestEntry]],
                 audio_root: Union[str, Path], target_language: str):
        if isinstance(manifest, (str, Path)):
            manifest = read_manifest(manifest)
        self.rows = list(manifest)
        if not self.rows:
            raise ValueError("empty manifest")
        self.audio_root = Path(audio_root)
        self.target_language = target_language
        langs = {self.rows[0].lang_a, self.rows[0].lang_b}
        if target_language not in langs:
            raise ValueError(f"target language {target_language!r} not in manifest ({langs})")

    def __len__(self) -> int:
        return len(self.rows)

    def mixture_dir(self, row: ManifestEntry) -> Path:
        return self.audio_root / "audio" / row.split / row.mixture_id

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.rows[i]
        d = self.mixture_dir(row)
        mix = read_wav(d / "mix.wav")
        target = read_wav(d / f"src_{self.target_language}.wav")
        return mix.samples, target.samples


class InMemoryPairs:
    """Dataset over already-loaded (mixture, target) waveform pairs."""

    def __init__(self, pairs: Sequence[tuple[Waveform, Waveform]]):
        if not pairs:
            raise ValueError("no pairs")
        self.pairs = list(pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        mix, target = self.pairs[i]
        return mix.samples, target.samples


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _stack_batch(data, idx) -> tuple[torch.Tensor, torch.Tensor]:
    mixes, targets = [], []
    lengths = set()
    for i in idx:
        m, t = data[int(i)]
        lengths.add(len(m))
        mixes.append(torch.from_numpy(m.copy()))
        targets.append(torch.from_numpy(t.copy()))
    if len(lengths) > 1:
        raise ValueError(
            f"training batch mixes lengths {sorted(lengths)}; crop the data first"
        )
    return torch.stack(mixes), torch.stack(targets)


def evaluate_dev(model: Extractor, data, weights: LossWeights,
                 embedder: Optional[FrozenSpeechModel] = None) -> dict:
    """Per-sample dev pass: mean combined loss plus its components."""
    was_training = model.training
    model.eval()
    losses, si_snrs, maes = [], [], []
    try:
        with torch.no_grad():
            for i in range(len(data)):
                mix, target = data[i]
                est = model(torch.from_numpy(mix.copy()).unsqueeze(0)).squeeze(0)
                t = torch.from_numpy(target.copy())
                snr = float(si_snr(t, est))
                si_snrs.append(snr)
                loss = -snr
                if weights.beta > 0:
                    mae = float(mae_loss(embedder.embed(t), embedder.embed(est)))
                    maes.append(mae)
                    loss += weights.beta * mae
                losses.append(loss)
    finally:
        model.train(was_training)
    out = {
        "dev_loss": float(np.mean(losses)),
        "dev_si_snr": float(np.mean(si_snrs)),
        "dev_mae": float(np.mean(maes)) if maes else None,
    }
    return out


def init_stage(model_cfg: ModelConfig, cfg: TrainConfig,
               init_checkpoint: Optional[Union[str, Path]] = None
               ) -> tuple[Extractor, torch.optim.Adam, float]:
    """Build (or restore) the model and a fresh optimizer for one stage.

    Stage 2 requires the stage-1 checkpoint; its optimizer always starts with
    zeroed moments, and the learning rate restarts at lr0 unless
    stage2_restart_lr is False, in which case it continues from the stored
    final value.
    """
    lr = cfg.lr0
    if cfg.stage == 2:
        if init_checkpoint is None:
            raise ValueError("stage 2 requires the stage-1 checkpoint")
        model, extra = load_checkpoint(init_checkpoint)
        if not cfg.stage2_restart_lr and "lr" in extra:
            lr = float(extra["lr"])
    else:
        if init_checkpoint is not None:
            model, _ = load_checkpoint(init_checkpoint)
        else:
            model = build_extractor(model_cfg, seed=cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
    return model, optimizer, lr


@dataclass
class TrainStageResult:
    best_path: Path
    last_path: Path
    history_path: Path
    history: list
    state: TrainState
    best_dev_loss: float


def train_stage(model: Extractor, train_data, dev_data, cfg: TrainConfig,
                out_dir: Union[str, Path],
                embedder: Optional[FrozenSpeechModel] = None,
                optimizer: Optional[torch.optim.Optimizer] = None,
                epoch_callback: Optional[Callable[[TrainState], bool]] = None
                ) -> TrainStageResult:
    """Run one stage to early stop (or max_epochs / callback stop).

    Writes best.pt on every dev improvement, last.pt each epoch, and one
    JSON line per epoch to history.jsonl. A non-finite loss aborts with
    TrainingDiverged, leaving the checkpoints already on disk untouched.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = LossWeights(beta=cfg.resolved_beta)
    if weights.beta > 0 and embedder is None:
        raise ValueError("beta > 0 training requires an embedding model")
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999))

    torch.manual_seed(cfg.seed)
    state = TrainState(current_lr=float(optimizer.param_groups[0]["lr"]))
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    history_path = out_dir / "history.jsonl"
    history_fh = open(history_path, "w")
    t0 = time.time()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            state.epoch = epoch
            for group in optimizer.param_groups:
                group["lr"] = state.current_lr

            model.train()
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
            batch_losses = []
            for idx in _batches(len(train_data), cfg.batch_size, rng):
                mix, target = _stack_batch(train_data, idx)
                optimizer.zero_grad(set_to_none=True)
                loss = combined_loss(target, model(mix), weights, embedder)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite training loss at epoch {epoch}",
                        best_path if best_path.exists() else None,
                        last_path if last_path.exists() else None,
                    )
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                batch_losses.append(loss.item())
            train_loss = float(np.mean(batch_losses))

            dev = evaluate_dev(model, dev_data, weights, embedder)
            if not math.isfinite(dev["dev_loss"]):
                raise TrainingDiverged(
                    f"non-finite dev loss at epoch {epoch}",
                    best_path if best_path.exists() else None,
                    last_path if last_path.exists() else None,
                )

            improved = dev["dev_loss"] < state.best_dev_loss
            extra = {"epoch": epoch, "dev_loss": dev["dev_loss"], "lr": state.current_lr,
                     "beta": weights.beta, "stage": cfg.stage}
            if improved:
                save_checkpoint(best_path, model, extra=extra)
            save_checkpoint(last_path, model, extra=extra)

            record = {
                "epoch": epoch,
                "train_loss": train_loss,
                "dev_loss": dev["dev_loss"],
                "dev_si_snr": dev["dev_si_snr"],
                "dev_mae": dev["dev_mae"],
                "lr": state.current_lr,
                "beta": weights.beta,
                "embed_calls": embedder.call_count if embedder is not None else 0,
                "wall_time": round(time.time() - t0, 3),
            }
            state.history.append(record)
            history_fh.write(json.dumps(record, sort_keys=True) + "\n")
            history_fh.flush()

            lr_schedule_step(state, dev["dev_loss"], cfg)
            if epoch_callback is not None and epoch_callback(state):
                break
            if early_stop_check(state, cfg):
                break
    finally:
        history_fh.close()

    if not best_path.exists():  # no finite epoch improved; keep the last model
        save_checkpoint(best_path, model, extra={"epoch": state.epoch,
                                                 "dev_loss": state.best_dev_loss,
                                                 "lr": state.current_lr,
                                                 "beta": weights.beta,
                                                 "stage": cfg.stage})
    return TrainStageResult(
        best_path=best_path, last_path=last_path, history_path=history_path,
        history=state.history, state=state, best_dev_loss=state.best_dev_loss,
    )
