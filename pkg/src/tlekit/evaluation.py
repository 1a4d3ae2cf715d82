"""Checkpoint scoring and report rendering.

`evaluate` runs an extractor over every row of a manifest split and scores
the estimate against the target source with SI-SNR (the same implementation
training uses), the native STOI, and an external PESQ provider when one is
installed. Reports carry per-sample rows, their aggregates, and enough
metadata to render the grouped comparison tables or a beta-sweep grid.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .datasim import ManifestEntry, read_manifest
from .dsp import TARGET_RATE, Waveform, read_wav, si_snr
from .model import Extractor, load_checkpoint
from .stoi import stoi

METRICS = ("si_snr", "stoi", "pesq")
METRIC_LABELS = {"si_snr": "SI-SNR (dB) ↑", "stoi": "STOI ↑", "pesq": "PESQ ↑"}


class MetricUnavailableError(RuntimeError):
    """The external metric provider is not installed or not usable."""


def pesq_score(target: Union[Waveform, np.ndarray], estimate: Union[Waveform, np.ndarray],
               sample_rate: int = TARGET_RATE, mode: str = "wb") -> float:
    """Wide-band P.862 score from the external provider."""
    try:
        from pesq import pesq as _pesq
    except ImportError as exc:
        raise MetricUnavailableError(
            "PESQ provider not installed; install the 'pesq' extra to enable it"
        ) from exc
    if isinstance(target, Waveform):
        sample_rate = target.sample_rate
        target = target.samples
    if isinstance(estimate, Waveform):
        estimate = estimate.samples
    return float(_pesq(sample_rate, np.asarray(target, dtype=np.float64),
                       np.asarray(estimate, dtype=np.float64), mode))


def pesq_available() -> bool:
    try:
        import pesq  # noqa: F401
    except ImportError:
        return False
    return True


@dataclass
class SampleScore:
    mixture_id: str
    si_snr: float
    stoi: Optional[float] = None
    pesq: Optional[float] = None

    def get(self, metric: str):
        return getattr(self, metric)


@dataclass
class MetricsReport:
    rows: list[SampleScore]
    aggregates: dict[str, Optional[float]]
    exclusions: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        """Re-derive every aggregate from the rows; raise on any mismatch."""
        if not self.rows:
            raise ValueError("report has no rows")
        for metric, stated in self.aggregates.items():
            values = [r.get(metric) for r in self.rows]
            finite = [v for v in values if v is not None and math.isfinite(v)]
            if stated is None:
                if finite:
                    raise ValueError(f"aggregate for {metric} missing despite finite rows")
                continue
            expect = float(np.mean(finite))
            if not math.isclose(stated, expect, rel_tol=0, abs_tol=1e-9):
                raise ValueError(f"aggregate mismatch for {metric}: {stated} != {expect}")
            excluded = sum(1 for v in values if v is not None and not math.isfinite(v))
            if self.exclusions.get(metric, 0) != excluded:
                raise ValueError(f"exclusion count mismatch for {metric}")

    def to_json_dict(self) -> dict:
        def clean(v):
            if v is None or (isinstance(v, float) and not math.isfinite(v)):
                return None
            return v

        return {
            "metadata": self.metadata,
            "aggregates": {k: clean(v) for k, v in self.aggregates.items()},
            "exclusions": self.exclusions,
            "rows": [
                {"mixture_id": r.mixture_id,
                 **{m: clean(r.get(m)) for m in METRICS}}
                for r in self.rows
            ],
        }

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _resolve_model(model) -> Callable[[Waveform], Waveform]:
    """Accept a checkpoint path, an Extractor, or a Waveform->Waveform callable."""
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    if isinstance(model, torch.nn.Module):
        net = model.eval()

        def run(mix: Waveform) -> Waveform:
            with torch.no_grad():
                est = net(torch.from_numpy(mix.samples.copy()).unsqueeze(0)).squeeze(0)
            return Waveform(est.numpy(), mix.sample_rate)

        return run
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate model of type {type(model).__name__}")


def evaluate(model, manifest: Union[str, Path, Sequence[ManifestEntry]],
             audio_root: Union[str, Path], target_language: str,
             metrics: Sequence[str] = METRICS,
             max_duration_s: float = 60.0,
             metadata: Optional[dict] = None) -> MetricsReport:
    """Score one checkpoint over one manifest split.

    Missing audio is reported up front with the offending mixture ids. A
    per-sample metric failure becomes a NaN sentinel excluded from the
    aggregates; an entirely unavailable provider leaves its column absent.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    rows_in = list(manifest)
    if not rows_in:
        raise ValueError("empty manifest")
    audio_root = Path(audio_root)

    missing = []
    for row in rows_in:
        d = audio_root / "audio" / row.split / row.mixture_id
        for name in ("mix.wav", f"src_{target_language}.wav"):
            if not (d / name).exists():
                missing.append(f"{row.mixture_id}/{name}")
    if missing:
        raise FileNotFoundError(
            f"{len(missing)} audio file(s) missing under {audio_root}: "
            + ", ".join(missing[:10])
        )

    run = _resolve_model(model)
    want_pesq = "pesq" in metrics
    pesq_absent = want_pesq and not pesq_available()

    scores: list[SampleScore] = []
    exclusions = {m: 0 for m in metrics if m != "si_snr"}
    for row in rows_in:
        d = audio_root / "audio" / row.split / row.mixture_id
        mix = read_wav(d / "mix.wav")
        target = read_wav(d / f"src_{target_language}.wav")
        if mix.duration > max_duration_s:
            raise ValueError(
                f"{row.mixture_id}: utterance of {mix.duration:.1f} s exceeds the "
                f"evaluation memory guard of {max_duration_s:.1f} s"
            )
        estimate = run(mix)
        score = SampleScore(row.mixture_id, si_snr=float(si_snr(target, estimate)))
        if "stoi" in metrics:
            try:
                score.stoi = float(stoi(target, estimate))
            except Exception:
                score.stoi = math.nan
                exclusions["stoi"] += 1
        if want_pesq and not pesq_absent:
            try:
                score.pesq = pesq_score(target, estimate)
            except MetricUnavailableError:
                pesq_absent = True
            except Exception:
                score.pesq = math.nan
                exclusions["pesq"] += 1
        scores.append(score)

    aggregates: dict[str, Optional[float]] = {}
    for metric in metrics:
        values = [s.get(metric) for s in scores]
        finite = [v for v in values if v is not None and math.isfinite(v)]
        aggregates[metric] = float(np.mean(finite)) if finite else None
    if pesq_absent:
        for s in scores:
            s.pesq = None
        aggregates["pesq"] = None
        exclusions["pesq"] = 0

    meta = {
        "split": rows_in[0].split,
        "target_language": target_language,
        "n_samples": len(scores),
        "pesq_mode": None if ("pesq" not in metrics or pesq_absent) else "wb",
    }
    if metadata:
        meta.update(metadata)
    report = MetricsReport(rows=scores, aggregates=aggregates,
                           exclusions=exclusions, metadata=meta)
    report.validate()
    return report


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "-"
    return f"{value:.2f}"


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(headers), sep] + [line(r) for r in rows])


def render_report(reports: Sequence[MetricsReport], layout: str = "auto") -> str:
    """Aligned text table over one or more reports.

    "main" groups rows by split and target language with one line per method
    (the side-by-side comparison shape); "beta" renders a sweep grid keyed by
    beta with per-language metric columns. "auto" picks "beta" when the
    reports carry two or more distinct beta values.
    """
    if not reports:
        raise ValueError("nothing to render")
    if layout == "auto":
        betas = {r.metadata.get("beta") for r in reports}
        betas.discard(None)
        layout = "beta" if len(betas) >= 2 else "main"

    if layout == "main":
        headers = ["Set", "Target Lang", "Method"] + [METRIC_LABELS[m] for m in METRICS]
        rows = []
        ordered = sorted(
            range(len(reports)),
            key=lambda i: (reports[i].metadata.get("split", ""),
                           reports[i].metadata.get("target_language", ""), i),
        )
        for i in ordered:
            r = reports[i]
            rows.append([
                str(r.metadata.get("split", "?")),
                str(r.metadata.get("target_language", "?")),
                str(r.metadata.get("method", "model")),
                _fmt(r.aggregates.get("si_snr")),
                _fmt(r.aggregates.get("stoi")),
                _fmt(r.aggregates.get("pesq")),
            ])
        return _table(headers, rows)

    if layout == "beta":
        langs = sorted({r.metadata.get("target_language", "?") for r in reports})
        headers = ["beta"]
        for lang in langs:
            headers += [f"{lang} {METRIC_LABELS[m]}" for m in METRICS]
        by_beta: dict[float, dict[str, MetricsReport]] = {}
        for r in reports:
            beta = r.metadata.get("beta")
            by_beta.setdefault(beta, {})[r.metadata.get("target_language", "?")] = r
        rows = []
        for beta in sorted(by_beta, key=lambda b: (b is None, b)):
            row = [str(beta)]
            for lang in langs:
                r = by_beta[beta].get(lang)
                for m in METRICS:
                    row.append(_fmt(r.aggregates.get(m)) if r else "-")
            rows.append(row)
        return _table(headers, rows)

    raise ValueError(f"unknown layout {layout!r}")
