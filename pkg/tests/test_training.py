import json
import math

import numpy as np
import pytest
import torch

from tlekit.dsp import Waveform, loudness_normalize, mix_sources
from tlekit.model import ModelConfig, build_extractor, load_checkpoint
from tlekit.supervision import load_embedding_model
from tlekit.toydata import synth_speechlike
from tlekit.training import (
    InMemoryPairs,
    TrainConfig,
    TrainState,
    TrainingDiverged,
    early_stop_check,
    evaluate_dev,
    init_stage,
    lr_schedule_step,
    train_stage,
)

TINY = ModelConfig(enc_kernel=16, enc_stride=8, feat_dim=16, chunk_len=10, chunk_hop=5,
                   n_heads=4, n_intra_layers=1, n_inter_layers=1, ff_dim=32)


def toy_pairs(n=4, seconds=0.5, seed=0):
    pairs = []
    for i in range(n):
        a = loudness_normalize(synth_speechlike(seconds, seed=seed * 100 + i, f0=120.0), -28.0)
        b = loudness_normalize(synth_speechlike(seconds, seed=seed * 100 + 50 + i, f0=200.0), -28.0)
        pairs.append((mix_sources([a, b]), a))
    return InMemoryPairs(pairs)


def run_trace(losses, cfg=None):
    cfg = cfg or TrainConfig()
    state = TrainState(current_lr=cfg.lr0)
    lrs = []
    for loss in losses:
        lr_schedule_step(state, loss, cfg)
        lrs.append(state.current_lr)
    return state, lrs


class TestLrSchedule:
    def test_monotone_improvement_keeps_lr(self):
        _, lrs = run_trace([5.0, 4.0, 3.0])
        assert lrs == [3e-4] * 3

    def test_halving_after_three_flat_epochs(self):
        _, lrs = run_trace([3.0, 3.1, 3.2, 3.3])
        assert lrs == [3e-4, 3e-4, 3e-4, 1.5e-4]

    def test_counter_reset_on_improvement(self):
        _, lrs = run_trace([3.0, 3.1, 2.9, 3.0, 3.1, 3.2])
        assert lrs == [3e-4, 3e-4, 3e-4, 3e-4, 3e-4, 1.5e-4]

    def test_equal_loss_counts_as_non_improving(self):
        _, lrs = run_trace([3.0, 3.0, 3.0, 3.0])
        assert lrs[-1] == 1.5e-4

    def test_lr_always_power_of_half_times_lr0(self):
        rng = np.random.default_rng(0)
        state, lrs = run_trace(list(rng.uniform(1.0, 2.0, 60)))
        for lr in lrs:
            k = math.log(3e-4 / lr, 2.0)
            assert abs(k - round(k)) < 1e-9


class TestEarlyStop:
    def test_improvement_in_window_prevents_stop(self):
        cfg = TrainConfig()
        state, _ = run_trace([3.0] + [3.1] * 19, cfg)
        assert early_stop_check(state, cfg) is False

    def test_twenty_flat_epochs_fire(self):
        cfg = TrainConfig()
        state, _ = run_trace([3.0] + [3.1] * 20, cfg)
        assert state.epochs_since_improve_stop == 20
        assert early_stop_check(state, cfg) is True

    def test_nineteen_flat_then_improvement_resets(self):
        cfg = TrainConfig()
        state, _ = run_trace([3.0] + [3.1] * 19 + [2.9], cfg)
        assert state.epochs_since_improve_stop == 0
        assert early_stop_check(state, cfg) is False


class TestTrainConfig:
    def test_stage1_beta_forced_zero(self):
        with pytest.raises(ValueError, match="beta"):
            TrainConfig(stage=1, beta=1.0)
        assert TrainConfig(stage=1).resolved_beta == 0.0

    def test_stage2_default_beta_one(self):
        assert TrainConfig(stage=2).resolved_beta == 1.0
        assert TrainConfig(stage=2, beta=0.2).resolved_beta == 0.2

    def test_invalid_stage(self):
        with pytest.raises(ValueError):
            TrainConfig(stage=3)


class TestOptimizerProperties:
    def test_zero_lr_step_leaves_params_bit_identical(self):
        net = build_extractor(TINY, seed=0)
        before = {k: v.detach().clone() for k, v in net.state_dict().items()}
        opt = torch.optim.Adam(net.parameters(), lr=0.0)
        x = torch.randn(1, 800)
        loss = net(x).square().mean()
        loss.backward()
        opt.step()
        after = net.state_dict()
        for key in before:
            assert torch.equal(before[key], after[key]), key

    def test_stage2_starts_from_checkpoint_with_zeroed_moments(self, tmp_path):
        data = toy_pairs(2)
        model, opt, _ = init_stage(TINY, TrainConfig(stage=1, max_epochs=2, seed=1))
        result = train_stage(model, data, data, TrainConfig(stage=1, max_epochs=2, seed=1),
                             tmp_path / "s1", optimizer=opt)
        cfg2 = TrainConfig(stage=2, max_epochs=1, seed=1)
        model2, opt2, lr2 = init_stage(TINY, cfg2, init_checkpoint=result.best_path)
        ckpt_model, _ = load_checkpoint(result.best_path)
        for (ka, pa), (kb, pb) in zip(model2.state_dict().items(),
                                      ckpt_model.state_dict().items()):
            assert ka == kb
            assert torch.equal(pa, pb)
        assert len(opt2.state) == 0  # fresh Adam: no moments yet
        assert lr2 == cfg2.lr0

    def test_stage2_requires_checkpoint(self):
        with pytest.raises(ValueError, match="checkpoint"):
            init_stage(TINY, TrainConfig(stage=2))

    def test_stage2_lr_continuation_option(self, tmp_path):
        data = toy_pairs(2)
        model, opt, _ = init_stage(TINY, TrainConfig(stage=1, max_epochs=1, seed=1))
        result = train_stage(model, data, data, TrainConfig(stage=1, max_epochs=1, seed=1),
                             tmp_path / "s1", optimizer=opt)
        cfg = TrainConfig(stage=2, stage2_restart_lr=False)
        _, _, lr = init_stage(TINY, cfg, init_checkpoint=result.best_path)
        assert lr == result.history[-1]["lr"]


class TestTrainStage:
    def test_history_and_checkpoints(self, tmp_path):
        data = toy_pairs(4)
        model = build_extractor(TINY, seed=2)
        cfg = TrainConfig(stage=1, max_epochs=3, seed=2)
        result = train_stage(model, data, data, cfg, tmp_path / "run")
        assert result.best_path.exists()
        assert result.last_path.exists()
        assert len(result.history) == 3
        lines = [json.loads(l) for l in result.history_path.read_text().splitlines()]
        assert [l["epoch"] for l in lines] == [1, 2, 3]
        for line in lines:
            assert set(line) == {"epoch", "train_loss", "dev_loss", "dev_si_snr",
                                 "dev_mae", "lr", "beta", "embed_calls", "wall_time"}
            assert line["beta"] == 0.0

    def test_best_checkpoint_dev_loss_bound(self, tmp_path):
        data = toy_pairs(4)
        model = build_extractor(TINY, seed=3)
        cfg = TrainConfig(stage=1, max_epochs=4, seed=3)
        result = train_stage(model, data, data, cfg, tmp_path / "run")
        _, extra = load_checkpoint(result.best_path)
        assert all(extra["dev_loss"] <= h["dev_loss"] for h in result.history)

    def test_beta_zero_never_touches_embedder(self, tmp_path):
        embedder = load_embedding_model("tiny-frozen")
        start = embedder.call_count
        data = toy_pairs(2)
        model = build_extractor(TINY, seed=4)
        cfg = TrainConfig(stage=1, max_epochs=2, seed=4)
        result = train_stage(model, data, data, cfg, tmp_path / "run", embedder=embedder)
        assert embedder.call_count == start
        assert all(h["embed_calls"] == start for h in result.history)

    def test_seed_determinism(self, tmp_path):
        histories = []
        for run in ("a", "b"):
            data = toy_pairs(3, seed=9)
            model = build_extractor(TINY, seed=5)
            cfg = TrainConfig(stage=1, max_epochs=3, seed=5)
            result = train_stage(model, data, data, cfg, tmp_path / run)
            histories.append([
                {k: v for k, v in h.items() if k != "wall_time"} for h in result.history
            ])
        assert histories[0] == histories[1]

    def test_divergence_aborts_and_keeps_checkpoints(self, tmp_path):
        data = toy_pairs(2)
        model = build_extractor(TINY, seed=6)
        good = train_stage(model, data, data, TrainConfig(stage=1, max_epochs=1, seed=6),
                           tmp_path / "run")
        bad_cfg = TrainConfig(stage=1, lr0=1e8, max_epochs=5, seed=6)
        opt = torch.optim.Adam(model.parameters(), lr=bad_cfg.lr0)
        with pytest.raises(TrainingDiverged):
            train_stage(model, data, data, bad_cfg, tmp_path / "run", optimizer=opt)
        # checkpoints from before the divergence are still loadable
        load_checkpoint(good.best_path)
        load_checkpoint(good.last_path)

    def test_stage2_requires_embedder(self, tmp_path):
        data = toy_pairs(2)
        model = build_extractor(TINY, seed=7)
        with pytest.raises(ValueError, match="embedding model"):
            train_stage(model, data, data, TrainConfig(stage=2, max_epochs=1), tmp_path / "x")

    def test_stage2_records_mae(self, tmp_path):
        embedder = load_embedding_model("tiny-frozen")
        data = toy_pairs(2)
        model = build_extractor(TINY, seed=8)
        cfg = TrainConfig(stage=2, max_epochs=2, seed=8)
        result = train_stage(model, data, data, cfg, tmp_path / "run", embedder=embedder)
        for h in result.history:
            assert h["beta"] == 1.0
            assert h["dev_mae"] is not None
        assert embedder.call_count > 0

    def test_epoch_callback_stops_early(self, tmp_path):
        data = toy_pairs(2)
        model = build_extractor(TINY, seed=9)
        cfg = TrainConfig(stage=1, max_epochs=50, seed=9)
        result = train_stage(model, data, data, cfg, tmp_path / "run",
                             epoch_callback=lambda s: s.epoch >= 2)
        assert len(result.history) == 2

    def test_short_training_reduces_loss(self, tmp_path):
        data = toy_pairs(4, seconds=0.5, seed=2)
        model = build_extractor(TINY, seed=10)
        cfg = TrainConfig(stage=1, lr0=1e-3, max_epochs=15, seed=10)
        result = train_stage(model, data, data, cfg, tmp_path / "run")
        assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]


class TestEvaluateDev:
    def test_components_consistent(self):
        from tlekit.supervision import LossWeights

        data = toy_pairs(3)
        model = build_extractor(TINY, seed=11)
        embedder = load_embedding_model("tiny-frozen")
        out = evaluate_dev(model, data, LossWeights(beta=1.0), embedder)
        assert out["dev_loss"] == pytest.approx(-out["dev_si_snr"] + out["dev_mae"], abs=1e-5)

    def test_beta_zero_loss_is_negated_si_snr(self):
        from tlekit.supervision import LossWeights

        data = toy_pairs(3)
        model = build_extractor(TINY, seed=12)
        out = evaluate_dev(model, data, LossWeights(beta=0.0))
        assert out["dev_loss"] == pytest.approx(-out["dev_si_snr"], abs=1e-6)
        assert out["dev_mae"] is None
