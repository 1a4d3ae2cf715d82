import json
import math

import numpy as np
import pytest
import torch

from tlekit.datasim import DatasetSpec, build_dataset, read_manifest
from tlekit.dsp import Waveform, read_wav, si_snr
from tlekit.evaluation import (
    MetricsReport,
    MetricUnavailableError,
    SampleScore,
    evaluate,
    pesq_available,
    pesq_score,
    render_report,
)
from tlekit.model import ModelConfig, build_extractor, save_checkpoint
from tlekit.toydata import make_toy_corpus

TINY = ModelConfig(enc_kernel=16, enc_stride=8, feat_dim=16, chunk_len=10, chunk_hop=5,
                   n_heads=4, n_intra_layers=1, n_inter_layers=1, ff_dim=32)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_ds")
    manifest = make_toy_corpus(root / "corpus", utterances_per_language=12,
                               speakers_per_language=5, seed=3)
    spec = DatasetSpec(train_count=3, dev_count=2, test_count=2, seed=3)
    return build_dataset(spec, manifest, root / "ds")


def oracle_model(dataset, target_language):
    """Returns the target source for each row, in manifest order."""
    rows = read_manifest(dataset.manifests["dev"])
    targets = [
        read_wav(dataset.out_dir / "audio" / "dev" / r.mixture_id /
                 f"src_{target_language}.wav")
        for r in rows
    ]
    it = iter(targets)

    def run(mix):
        return next(it)

    return run


class TestEvaluate:
    def test_oracle_pass_through_ceiling(self, dataset):
        report = evaluate(oracle_model(dataset, "en"), dataset.manifests["dev"],
                          dataset.out_dir, "en")
        assert report.aggregates["si_snr"] >= 60.0
        assert report.aggregates["stoi"] == pytest.approx(1.0, abs=1e-3)

    def test_identity_model_matches_direct_si_snr(self, dataset):
        report = evaluate(lambda mix: mix, dataset.manifests["dev"], dataset.out_dir, "en")
        for row, entry in zip(report.rows, read_manifest(dataset.manifests["dev"])):
            d = dataset.out_dir / "audio" / "dev" / entry.mixture_id
            expect = float(si_snr(read_wav(d / "src_en.wav"), read_wav(d / "mix.wav")))
            assert row.si_snr == expect

    def test_deterministic(self, dataset):
        net = build_extractor(TINY, seed=0)
        a = evaluate(net, dataset.manifests["dev"], dataset.out_dir, "en", metrics=("si_snr",))
        b = evaluate(net, dataset.manifests["dev"], dataset.out_dir, "en", metrics=("si_snr",))
        assert [r.si_snr for r in a.rows] == [r.si_snr for r in b.rows]

    def test_checkpoint_path_accepted(self, dataset, tmp_path):
        net = build_extractor(TINY, seed=1)
        path = tmp_path / "m.pt"
        save_checkpoint(path, net)
        report = evaluate(path, dataset.manifests["dev"], dataset.out_dir, "en",
                          metrics=("si_snr",))
        assert len(report.rows) == 2

    def test_sample_count_matches_manifest(self, dataset):
        report = evaluate(lambda m: m, dataset.manifests["dev"], dataset.out_dir, "de")
        assert report.metadata["n_samples"] == len(read_manifest(dataset.manifests["dev"]))

    def test_missing_audio_listed(self, dataset, tmp_path):
        report_rows = read_manifest(dataset.manifests["dev"])
        with pytest.raises(FileNotFoundError, match=report_rows[0].mixture_id):
            evaluate(lambda m: m, dataset.manifests["dev"], tmp_path / "nowhere", "en")

    def test_memory_guard(self, dataset):
        with pytest.raises(ValueError, match="memory guard"):
            evaluate(lambda m: m, dataset.manifests["dev"], dataset.out_dir, "en",
                     max_duration_s=1.0)

    def test_pesq_column_absent_without_provider(self, dataset):
        if pesq_available():
            pytest.skip("pesq provider installed")
        report = evaluate(lambda m: m, dataset.manifests["dev"], dataset.out_dir, "en")
        assert report.aggregates["pesq"] is None
        assert all(r.pesq is None for r in report.rows)
        assert report.metadata["pesq_mode"] is None

    def test_per_sample_metric_failure_excluded(self, dataset, monkeypatch):
        calls = {"n": 0}
        import tlekit.evaluation as ev

        real_stoi = ev.stoi

        def flaky(target, estimate, sample_rate=None):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("synthetic failure")
            return real_stoi(target, estimate, sample_rate)

        monkeypatch.setattr(ev, "stoi", flaky)
        report = evaluate(lambda m: m, dataset.manifests["dev"], dataset.out_dir, "en")
        assert report.exclusions["stoi"] == 1
        assert math.isnan(report.rows[0].stoi)
        finite = [r.stoi for r in report.rows if r.stoi is not None and math.isfinite(r.stoi)]
        assert report.aggregates["stoi"] == pytest.approx(float(np.mean(finite)))

    def test_unknown_metric_rejected(self, dataset):
        with pytest.raises(ValueError, match="unknown metrics"):
            evaluate(lambda m: m, dataset.manifests["dev"], dataset.out_dir, "en",
                     metrics=("sdr",))


class TestPesqWrapper:
    def test_unavailable_raises_typed_error(self):
        if pesq_available():
            pytest.skip("pesq provider installed")
        x = Waveform(np.zeros(16000, np.float32) + 0.1, 16000)
        with pytest.raises(MetricUnavailableError, match="pesq"):
            pesq_score(x, x)


class TestReportValidation:
    def make_report(self):
        rows = [SampleScore("a", 10.0, 0.9, 2.0), SampleScore("b", 12.0, 0.8, 1.8)]
        return MetricsReport(
            rows=rows,
            aggregates={"si_snr": 11.0, "stoi": 0.85, "pesq": 1.9},
            exclusions={"stoi": 0, "pesq": 0},
            metadata={"split": "test", "target_language": "en", "method": "ours"},
        )

    def test_valid_report_passes(self):
        self.make_report().validate()

    def test_tampered_aggregate_caught(self):
        report = self.make_report()
        report.aggregates["si_snr"] = 99.0
        with pytest.raises(ValueError, match="aggregate mismatch"):
            report.validate()

    def test_save_round_trip(self, tmp_path):
        report = self.make_report()
        report.rows[0].stoi = math.nan
        report.aggregates["stoi"] = 0.8
        report.exclusions["stoi"] = 1
        path = tmp_path / "report.json"
        report.save(path)
        data = json.loads(path.read_text())
        assert data["rows"][0]["stoi"] is None  # NaN serialized as null
        assert data["aggregates"]["si_snr"] == 11.0


class TestRenderReport:
    def report(self, split, lang, method, si, st, pq, beta=None):
        rows = [SampleScore("x", si, st, pq)]
        meta = {"split": split, "target_language": lang, "method": method}
        if beta is not None:
            meta["beta"] = beta
        return MetricsReport(rows=rows, aggregates={"si_snr": si, "stoi": st, "pesq": pq},
                             exclusions={"stoi": 0, "pesq": 0}, metadata=meta)

    def test_single_report_single_row(self):
        text = render_report([self.report("test", "en", "baseline", 9.96, 0.82, 1.85)])
        lines = text.splitlines()
        assert len(lines) == 3  # header, rule, one data row
        assert "SI-SNR (dB)" in lines[0]
        assert "9.96" in lines[2]

    def test_two_method_block_column_order(self):
        reports = [
            self.report("test", "English", "baseline", 9.96, 0.82, 1.85),
            self.report("test", "English", "ours", 11.18, 0.84, 2.05),
        ]
        text = render_report(reports)
        header = text.splitlines()[0]
        si = header.index("SI-SNR")
        st = header.index("STOI")
        pq = header.index("PESQ")
        assert si < st < pq
        baseline_line = next(l for l in text.splitlines() if "baseline" in l)
        assert "9.96" in baseline_line and "0.82" in baseline_line and "1.85" in baseline_line

    def test_beta_sweep_grid(self):
        reports = []
        for beta, si in ((0.1, 11.04), (1.0, 11.18), (5.0, 10.83)):
            reports.append(self.report("test", "en", "ours", si, 0.84, 2.0, beta=beta))
        text = render_report(reports)
        lines = text.splitlines()
        assert lines[0].startswith("beta")
        assert [l.split()[0] for l in lines[2:]] == ["0.1", "1.0", "5.0"]

    def test_absent_pesq_rendered_as_dash(self):
        report = self.report("dev", "en", "model", 5.0, 0.7, None)
        text = render_report([report])
        assert text.splitlines()[2].rstrip().endswith("-")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            render_report([])
