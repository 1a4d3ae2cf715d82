"""Synthetic speech-like signals and a small bundled corpus built from them.

The signals are harmonic pulse trains with per-speaker fundamentals, slowly
wandering pitch, formant-shaped spectra, syllable-rate amplitude envelopes,
pauses, and occasional fricative noise bursts. They are not speech, but they
exercise every code path that real speech would: activity detection, loudness
gating, third-octave envelopes, and non-stationary masking.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dsp import TARGET_RATE, Waveform, write_wav


def synth_speechlike(duration_s: float, seed: int, rate: int = TARGET_RATE,
                     f0: float | None = None) -> Waveform:
    """One utterance-like signal of the requested duration."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    if f0 is None:
        f0 = float(rng.uniform(90.0, 230.0))
    t = np.arange(n) / rate
    out = np.zeros(n)

    # Formant envelope fixed per utterance.
    f1 = rng.uniform(300.0, 800.0)
    f2 = rng.uniform(900.0, 2200.0)
    b1 = rng.uniform(80.0, 150.0)
    b2 = rng.uniform(150.0, 300.0)

    def formant_gain(freq):
        return (np.exp(-((freq - f1) / (2 * b1)) ** 2)
                + 0.6 * np.exp(-((freq - f2) / (2 * b2)) ** 2) + 0.05)

    pos = int(rng.uniform(0.0, 0.1) * rate)
    while pos < n:
        voiced_len = int(rng.uniform(0.12, 0.35) * rate)
        seg = slice(pos, min(pos + voiced_len, n))
        m = seg.stop - seg.start
        if m > 0:
            tt = t[seg]
            # Slow pitch wander within the syllable.
            drift = 1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * (tt - tt[0])
                                        + rng.uniform(0, 2 * np.pi))
            phase = 2 * np.pi * np.cumsum(f0 * drift) / rate
            burst = np.zeros(m)
            n_harm = max(2, int((0.45 * rate) // f0))
            for h in range(1, n_harm + 1):
                gain = formant_gain(h * f0) / h
                burst += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
            # Raised-cosine syllable envelope.
            env = 0.5 * (1 - np.cos(2 * np.pi * np.arange(m) / m)) if m > 1 else np.ones(1)
            out[seg] += burst * env
        pos = seg.stop
        if rng.random() < 0.12:
            # fricative-like burst in the pause
            noise_len = int(rng.uniform(0.04, 0.12) * rate)
            nseg = slice(pos, min(pos + noise_len, n))
            nm = nseg.stop - nseg.start
            if nm > 0:
                noise = rng.standard_normal(nm)
                noise = np.diff(noise, prepend=noise[0])  # crude high-pass
                out[nseg] += 0.15 * noise
            pos = nseg.stop
        pause = rng.uniform(0.3, 0.8) if rng.random() < 0.15 else rng.uniform(0.03, 0.2)
        pos += int(pause * rate)

    out += 1e-4 * rng.standard_normal(n)  # breath-noise floor
    peak = np.abs(out).max()
    if peak > 0:
        out *= rng.uniform(0.25, 0.6) / peak
    return Waveform(out.astype(np.float32), rate)


def make_toy_corpus(out_dir: str | Path, languages: tuple[str, str] = ("en", "de"),
                    utterances_per_language: int = 40, speakers_per_language: int = 8,
                    seed: int = 0, rate: int = TARGET_RATE) -> Path:
    """Write a small two-language corpus and its manifest TSV.

    Roughly one utterance in seven is shorter than 7 s so the minimum-duration
    filter has something to discard. Returns the manifest path; columns are
    path, speaker_id, duration, language.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    rows = []
    for lang in languages:
        lang_dir = out_dir / lang
        lang_dir.mkdir(parents=True, exist_ok=True)
        speaker_f0 = {k: rng.uniform(90.0, 230.0) for k in range(speakers_per_language)}
        for i in range(utterances_per_language):
            spk = i % speakers_per_language
            if rng.random() < 0.15:
                duration = float(rng.uniform(5.0, 6.9))
            else:
                duration = float(rng.uniform(7.2, 10.5))
            utt_seed = int(rng.integers(0, 2**31 - 1))
            w = synth_speechlike(duration, seed=utt_seed, rate=rate, f0=speaker_f0[spk])
            path = lang_dir / f"{lang}_spk{spk:02d}_utt{i:03d}.wav"
            write_wav(path, w)
            rows.append({
                "path": str(path),
                "speaker_id": f"{lang}_spk{spk:02d}",
                "duration": f"{len(w) / rate:.3f}",
                "language": lang,
            })
    manifest = out_dir / "corpus.tsv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["path", "speaker_id", "duration", "language"],
                                delimiter="\t")
        writer.writeheader()
        writer.writerows(rows)
    return manifest
