"""Bilingual mixture dataset construction.

Pipeline: filter a two-language corpus by minimum duration, partition each
language's speakers disjointly over train/dev/test, pair utterances across
languages, loudness-normalize and sum them, crop 6 s active windows for
train, and emit per-split CSV manifests plus a WAV tree and a statistics
report. All randomness derives from one global seed; each mixture's derived
seed is recorded in its manifest row so any row can be rebuilt in isolation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .dsp import (
    TARGET_RATE,
    Waveform,
    loudness_normalize,
    integrated_loudness,
    mix_sources,
    read_wav,
    resample,
    write_wav,
)

SPLITS = ("train", "dev", "test")

MANIFEST_COLUMNS = [
    "mixture_id", "split",
    "lang_a", "source_a", "speaker_a", "gain_a",
    "lang_b", "source_b", "speaker_b", "gain_b",
    "offset_s", "length_s", "seed",
]


class CorpusError(ValueError):
    """The input corpus cannot support the requested dataset."""


class DatasetBuildError(RuntimeError):
    """Pairing or synthesis failed while building the dataset."""


@dataclass(frozen=True)
class CorpusEntry:
    path: str
    language: str
    speaker_id: str
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"{self.path}: duration must be positive")


@dataclass(frozen=True)
class DatasetSpec:
    """Requested dataset shape and mixing policy."""

    languages: tuple[str, str] = ("en", "de")
    train_count: int = 30000
    dev_count: int = 4600
    test_count: int = 4500
    min_duration: float = 7.0
    loudness_range: tuple[float, float] = (-33.0, -25.0)
    seed: int = 0
    train_crop_s: float = 6.0
    clip_peak: float = 0.9
    activity_threshold: float = 0.01  # crop RMS relative to full-utterance RMS

    def __post_init__(self):
        if len(self.languages) != 2 or self.languages[0] == self.languages[1]:
            raise ValueError(f"need two distinct languages, got {self.languages}")
        for name in ("train_count", "dev_count", "test_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.loudness_range
        if not lo <= hi:
            raise ValueError(f"bad loudness range {self.loudness_range}")

    def count_for(self, split: str) -> int:
        return {"train": self.train_count, "dev": self.dev_count,
                "test": self.test_count}[split]


@dataclass(frozen=True)
class ManifestEntry:
    """One mixture: where its sources came from and how it was assembled."""

    mixture_id: str
    split: str
    lang_a: str
    source_a: str
    speaker_a: str
    gain_a: float
    lang_b: str
    source_b: str
    speaker_b: str
    gain_b: float
    offset_s: float
    length_s: float
    seed: int

    def to_row(self) -> dict:
        row = asdict(self)
        for key in ("gain_a", "gain_b", "offset_s", "length_s"):
            row[key] = repr(row[key])
        return row

    @classmethod
    def from_row(cls, row: dict) -> "ManifestEntry":
        return cls(
            mixture_id=row["mixture_id"], split=row["split"],
            lang_a=row["lang_a"], source_a=row["source_a"],
            speaker_a=row["speaker_a"], gain_a=float(row["gain_a"]),
            lang_b=row["lang_b"], source_b=row["source_b"],
            speaker_b=row["speaker_b"], gain_b=float(row["gain_b"]),
            offset_s=float(row["offset_s"]), length_s=float(row["length_s"]),
            seed=int(row["seed"]),
        )


@dataclass
class MixtureSample:
    mixture: Waveform
    sources: dict[str, Waveform]          # keyed by language, gain-applied
    entries: dict[str, CorpusEntry]
    gains: dict[str, float]
    seed: int
    offset_s: float = 0.0


def read_corpus_tsv(path: Union[str, Path]) -> list[CorpusEntry]:
    """Load a corpus manifest with columns path, speaker_id, duration, language."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = {"path", "speaker_id", "duration", "language"} - set(reader.fieldnames or ())
        if missing:
            raise CorpusError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            entries.append(CorpusEntry(
                path=row["path"], language=row["language"],
                speaker_id=row["speaker_id"], duration=float(row["duration"]),
            ))
    if not entries:
        raise CorpusError(f"{path}: empty corpus manifest")
    return entries


def filter_corpus(entries: Sequence[CorpusEntry], min_duration: float) -> list[CorpusEntry]:
    """Keep entries with duration >= min_duration, preserving order."""
    kept = [e for e in entries if e.duration >= min_duration]
    if not kept:
        langs = sorted({e.language for e in entries})
        raise CorpusError(
            f"no utterances of at least {min_duration} s remain for language(s) "
            f"{', '.join(langs) if langs else '<none>'}"
        )
    return kept


def _language_rng(seed: int, lang_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, lang_index]))


def assign_splits(entries: Sequence[CorpusEntry], spec: DatasetSpec) -> dict[str, list[CorpusEntry]]:
    """Speaker-disjoint split assignment, deterministic under spec.seed.

    Dev and test are filled first with whole speakers until they can supply
    the requested mixture counts without reuse; every remaining speaker goes
    to train (where source reuse is permitted at synthesis time).
    """
    out: dict[str, list[CorpusEntry]] = {s: [] for s in SPLITS}
    for lang_index, lang in enumerate(spec.languages):
        lang_entries = [e for e in entries if e.language == lang]
        if not lang_entries:
            raise CorpusError(f"no corpus entries for language '{lang}'")
        by_speaker: dict[str, list[CorpusEntry]] = {}
        for e in lang_entries:
            by_speaker.setdefault(e.speaker_id, []).append(e)
        speakers = sorted(by_speaker)
        if len(speakers) < len(SPLITS):
            raise CorpusError(
                f"language '{lang}': {len(speakers)} speakers cannot populate "
                f"{len(SPLITS)} speaker-disjoint splits"
            )
        rng = _language_rng(spec.seed, lang_index)
        rng.shuffle(speakers)

        targets = {"dev": spec.dev_count, "test": spec.test_count}
        reserve = {"dev": 2, "test": 1}  # keep speakers back for later splits
        taken: dict[str, list[CorpusEntry]] = {s: [] for s in SPLITS}
        queue = list(speakers)
        for split in ("dev", "test"):
            while len(taken[split]) < targets[split] and len(queue) > reserve[split]:
                spk = queue.pop(0)
                taken[split].extend(by_speaker[spk])
            if not taken[split]:
                raise CorpusError(f"language '{lang}': no speakers left for {split}")
            if len(taken[split]) < targets[split]:
                raise CorpusError(
                    f"language '{lang}': only {len(taken[split])} {split} utterances "
                    f"available for {targets[split]} requested mixtures"
                )
        if not queue:
            raise CorpusError(f"language '{lang}': no speakers left for train")
        for spk in queue:
            taken["train"].extend(by_speaker[spk])
        for split in SPLITS:
            out[split].extend(taken[split])
    return out


def _gain_for_loudness(w: Waveform, target_lufs: float) -> float:
    return float(10.0 ** ((target_lufs - integrated_loudness(w)) / 20.0))


def _load_source(entry: CorpusEntry) -> Waveform:
    w = read_wav(entry.path)
    if w.sample_rate != TARGET_RATE:
        w = resample(w, TARGET_RATE)
    return w


def pair_and_mix(a: CorpusEntry, b: CorpusEntry, spec: DatasetSpec, seed: int) -> MixtureSample:
    """Mix one cross-language pair at independently drawn loudness levels.

    Each source is resampled to 16 kHz, normalized to a loudness drawn
    uniformly from spec.loudness_range, zero-padded to the longer duration,
    and summed; if the mixture peak exceeds spec.clip_peak everything is
    rescaled below clipping. Final linear gains are recorded per source.
    """
    if a.language == b.language:
        raise DatasetBuildError(
            f"cannot mix same-language pair ({a.language}): {a.path} + {b.path}"
        )
    if a.speaker_id == b.speaker_id:
        raise DatasetBuildError(f"sources share speaker {a.speaker_id}")
    rng = np.random.default_rng(seed)
    lufs = rng.uniform(spec.loudness_range[0], spec.loudness_range[1], size=2)
    waves, gains = {}, {}
    for entry, target in zip((a, b), lufs):
        w = _load_source(entry)
        gain = _gain_for_loudness(w, float(target))
        waves[entry.language] = w
        gains[entry.language] = gain
    n = max(len(w) for w in waves.values())
    scaled = {}
    for lang, w in waves.items():
        x = np.zeros(n, dtype=np.float32)
        x[: len(w)] = w.samples * np.float32(gains[lang])
        scaled[lang] = Waveform(x, TARGET_RATE)
    mixture = mix_sources([scaled[a.language], scaled[b.language]])
    peak = float(np.abs(mixture.samples).max())
    if peak > spec.clip_peak:
        c = spec.clip_peak / peak
        gains = {lang: g * c for lang, g in gains.items()}
        scaled = {lang: Waveform(w.samples * np.float32(c), TARGET_RATE)
                  for lang, w in scaled.items()}
        mixture = mix_sources([scaled[a.language], scaled[b.language]])
    return MixtureSample(
        mixture=mixture, sources=scaled,
        entries={a.language: a, b.language: b},
        gains=gains, seed=seed,
    )


def _window_rms(x: np.ndarray, start: int, length: int) -> float:
    seg = x[start:start + length].astype(np.float64)
    return float(np.sqrt(np.mean(seg * seg)))


def crop_train_segment(m: MixtureSample, length_s: float, seed: int,
                       target_language: Optional[str] = None,
                       threshold: float = 0.01, max_tries: int = 10) -> MixtureSample:
    """Uniformly drawn window of length_s whose target speech is not empty.

    A window is accepted when each checked source keeps at least `threshold`
    of its full-utterance RMS inside the window; after max_tries rejected
    draws the window maximizing the weakest source activity is used instead.
    Checking defaults to both languages so the dataset serves either
    extraction direction.
    """
    rate = m.mixture.sample_rate
    n = int(round(length_s * rate))
    if len(m.mixture) < n:
        raise DatasetBuildError(
            f"mixture is {m.mixture.duration:.2f} s, shorter than the {length_s} s crop"
        )
    langs = [target_language] if target_language else sorted(m.sources)
    full_rms = {
        lang: _window_rms(m.sources[lang].samples, 0, len(m.sources[lang])) for lang in langs
    }
    rng = np.random.default_rng(seed)
    max_offset = len(m.mixture) - n

    def activity(off: int) -> float:
        return min(
            _window_rms(m.sources[lang].samples, off, n) / max(full_rms[lang], 1e-12)
            for lang in langs
        )

    offset = None
    for _ in range(max_tries):
        cand = int(rng.integers(0, max_offset + 1))
        if activity(cand) >= threshold:
            offset = cand
            break
    if offset is None:
        # fall back to the most-active window on a 100 ms grid
        grid = list(range(0, max_offset + 1, max(1, rate // 10)))
        if grid[-1] != max_offset:
            grid.append(max_offset)
        offset = max(grid, key=activity)

    def cut(w: Waveform) -> Waveform:
        return Waveform(w.samples[offset:offset + n], rate)

    return MixtureSample(
        mixture=cut(m.mixture),
        sources={lang: cut(w) for lang, w in m.sources.items()},
        entries=m.entries, gains=m.gains, seed=m.seed,
        offset_s=offset / rate,
    )


def _derived_seed(global_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([global_seed, SPLITS.index(split), index])
    return int(ss.generate_state(1)[0])


def _pair_indices(n_a: int, n_b: int, count: int, split: str,
                  rng: np.random.Generator) -> list[tuple[int, int]]:
    order_a = rng.permutation(n_a)
    order_b = rng.permutation(n_b)
    available = min(n_a, n_b)
    if count <= available:
        return [(int(order_a[i]), int(order_b[i])) for i in range(count)]
    if split != "train":
        raise DatasetBuildError(
            f"split '{split}': requested {count} mixtures but only {available} "
            "are achievable without source reuse"
        )
    pairs = [(int(order_a[i % n_a]), int(order_b[i % n_b])) for i in range(available)]
    extra_a = rng.integers(0, n_a, size=count - available)
    extra_b = rng.integers(0, n_b, size=count - available)
    pairs += [(int(ia), int(ib)) for ia, ib in zip(extra_a, extra_b)]
    return pairs


@dataclass
class BuildResult:
    out_dir: Path
    manifests: dict[str, Path]
    stats: dict
    entries: dict[str, list[ManifestEntry]] = field(default_factory=dict)


def build_dataset(spec: DatasetSpec, corpus: Union[str, Path, Sequence[CorpusEntry]],
                  out_dir: Union[str, Path]) -> BuildResult:
    """Build manifests, the audio tree, and the statistics report."""
    if isinstance(corpus, (str, Path)):
        corpus = read_corpus_tsv(corpus)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lang_a, lang_b = spec.languages
    filtered: list[CorpusEntry] = []
    for lang in spec.languages:
        filtered.extend(filter_corpus([e for e in corpus if e.language == lang],
                                      spec.min_duration))
    splits = assign_splits(filtered, spec)

    manifests: dict[str, Path] = {}
    all_entries: dict[str, list[ManifestEntry]] = {}
    stats: dict[str, dict] = {}
    for split in SPLITS:
        pool_a = [e for e in splits[split] if e.language == lang_a]
        pool_b = [e for e in splits[split] if e.language == lang_b]
        count = spec.count_for(split)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 104729,
                                                            SPLITS.index(split)]))
        pairs = _pair_indices(len(pool_a), len(pool_b), count, split, rng)

        rows: list[ManifestEntry] = []
        total_seconds = 0.0
        for i, (ia, ib) in enumerate(pairs):
            a, b = pool_a[ia], pool_b[ib]
            # A speaker recorded in both languages must not be paired with
            # itself; rotate to the next partner deterministically.
            tries = 0
            while a.speaker_id == b.speaker_id and tries < len(pool_b):
                ib = (ib + 1) % len(pool_b)
                b = pool_b[ib]
                tries += 1
            if a.speaker_id == b.speaker_id:
                raise DatasetBuildError(
                    f"split '{split}': cannot find a cross-language partner for "
                    f"speaker {a.speaker_id}"
                )
            seed = _derived_seed(spec.seed, split, i)
            sample = pair_and_mix(a, b, spec, seed)
            if split == "train":
                sample = crop_train_segment(sample, spec.train_crop_s, seed,
                                            threshold=spec.activity_threshold)
            mixture_id = f"{split}_{i:06d}"
            mix_dir = out_dir / "audio" / split / mixture_id
            mix_dir.mkdir(parents=True, exist_ok=True)
            write_wav(mix_dir / "mix.wav", sample.mixture)
            for lang, w in sample.sources.items():
                write_wav(mix_dir / f"src_{lang}.wav", w)
            rows.append(ManifestEntry(
                mixture_id=mixture_id, split=split,
                lang_a=lang_a, source_a=a.path, speaker_a=a.speaker_id,
                gain_a=sample.gains[lang_a],
                lang_b=lang_b, source_b=b.path, speaker_b=b.speaker_id,
                gain_b=sample.gains[lang_b],
                offset_s=sample.offset_s,
                length_s=sample.mixture.duration,
                seed=seed,
            ))
            total_seconds += sample.mixture.duration

        manifest_path = out_dir / f"{split}.csv"
        write_manifest(manifest_path, rows)
        manifests[split] = manifest_path
        all_entries[split] = rows
        stats[split] = {
            "n_samples": len(rows),
            "hours": round(total_seconds / 3600.0, 4),
            "unique_speakers": {
                lang_a: len({r.speaker_a for r in rows}),
                lang_b: len({r.speaker_b for r in rows}),
            },
        }

    check_speaker_disjointness(all_entries)
    stats_path = out_dir / "stats.json"
    with open(stats_path, "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return BuildResult(out_dir=out_dir, manifests=manifests, stats=stats,
                       entries=all_entries)


def write_manifest(path: Union[str, Path], rows: Iterable[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_row())


def read_manifest(path: Union[str, Path]) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        return [ManifestEntry.from_row(row) for row in csv.DictReader(fh)]


def check_speaker_disjointness(entries: dict[str, list[ManifestEntry]]) -> None:
    """Raise if any speaker appears in more than one split for its language."""
    seen: dict[str, dict[str, set[str]]] = {}
    for split, rows in entries.items():
        for row in rows:
            for lang, spk in ((row.lang_a, row.speaker_a), (row.lang_b, row.speaker_b)):
                seen.setdefault(lang, {}).setdefault(split, set()).add(spk)
    for lang, per_split in seen.items():
        split_names = sorted(per_split)
        for i, s1 in enumerate(split_names):
            for s2 in split_names[i + 1:]:
                overlap = per_split[s1] & per_split[s2]
                if overlap:
                    raise DatasetBuildError(
                        f"speaker overlap between {s1} and {s2} for language "
                        f"'{lang}': {sorted(overlap)[:5]}"
                    )


def reconstruct_mixture(entry: ManifestEntry, rate: int = TARGET_RATE) -> Waveform:
    """Re-mix one manifest row from its original sources and recorded gains."""
    parts = []
    for path, gain in ((entry.source_a, entry.gain_a), (entry.source_b, entry.gain_b)):
        w = read_wav(path)
        if w.sample_rate != rate:
            w = resample(w, rate)
        parts.append(w.samples.astype(np.float64) * gain)
    n = max(len(p) for p in parts)
    total = np.zeros(n, dtype=np.float64)
    for p in parts:
        total[: len(p)] += p
    offset = int(round(entry.offset_s * rate))
    length = int(round(entry.length_s * rate))
    return Waveform(total[offset:offset + length].astype(np.float32), rate)
