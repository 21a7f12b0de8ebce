"""Synthetic tone/chirp corpus generator with frame labels and per-sequence filter profiles.

Utterances are sequences of tonal segments drawn from five families that share
one carrier range, so a single spectral frame is ambiguous between families;
the temporal trajectory (chirp slope, tremolo, vibrato) disambiguates. Each
"speaker" is a fixed pair of resonance filters applied to the whole sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .features import write_wav

N_TONE_FAMILIES = 5   # steady, chirp-up, chirp-down, tremolo, vibrato

CHIRP_OCTAVES_PER_S = 0.7
TREMOLO_HZ = 4.0
VIBRATO_HZ = 4.5
VIBRATO_DEPTH_OCT = 0.08
N_HARMONICS = 12
HARMONIC_ROLLOFF = 0.8


@dataclass(frozen=True)
class ToyCorpusConfig:
    n_utterances: int = 200
    sample_rate: int = 8000
    n_speakers: int = 8
    seed: int = 0
    min_seconds: float = 0.7
    max_seconds: float = 1.1
    snr_db: float = 30.0
    window_ms: float = 25.0
    hop_ms: float = 10.0


def _peaking_biquad(f0: float, gain_db: float, q: float, fs: float):
    """RBJ peaking-EQ coefficients."""
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2.0 * q)
    b = np.array([1 + alpha * a, -2 * np.cos(w0), 1 - alpha * a])
    den = np.array([1 + alpha / a, -2 * np.cos(w0), 1 - alpha / a])
    return b / den[0], den / den[0]


def speaker_profiles(rng: np.random.Generator, n: int, fs: float) -> list[list[tuple]]:
    """Three peaking filters per speaker; fixed for all their utterances.

    Wide, strong resonances interact with the moving harmonics, which is what
    survives per-channel normalization as a speaker signature.
    """
    profiles = []
    for _ in range(n):
        filters = []
        for _ in range(3):
            f0 = float(np.exp(rng.uniform(np.log(300.0), np.log(3000.0))))
            gain = float(rng.uniform(6.0, 14.0) * rng.choice([-1.0, 1.0]))
            q = float(rng.uniform(0.7, 2.0))
            filters.append(_peaking_biquad(f0, gain, q, fs))
        profiles.append(filters)
    return profiles


def synth_utterance(rng: np.random.Generator, profile, cfg: ToyCorpusConfig):
    """One utterance: (samples, per-frame tone-family labels)."""
    fs = cfg.sample_rate
    n = int(rng.uniform(cfg.min_seconds, cfg.max_seconds) * fs)
    samples = np.zeros(n)
    seg_label = np.zeros(n, dtype=np.int64)
    pos = 0
    while pos < n:
        seg_len = min(int(rng.uniform(0.25, 0.50) * fs), n - pos)
        family = int(rng.integers(N_TONE_FAMILIES))
        f0 = float(np.exp(rng.uniform(np.log(250.0), np.log(600.0))))
        t = np.arange(seg_len) / fs
        if family == 1:
            freq = f0 * 2.0 ** (CHIRP_OCTAVES_PER_S * t)
        elif family == 2:
            freq = f0 * 2.0 ** (-CHIRP_OCTAVES_PER_S * t)
        elif family == 4:
            freq = f0 * 2.0 ** (VIBRATO_DEPTH_OCT * np.sin(2 * np.pi * VIBRATO_HZ * t))
        else:
            freq = np.full(seg_len, f0)
        base_phase = 2.0 * np.pi * np.cumsum(freq) / fs
        # harmonic stack spreads predictable structure across many mel bins
        tone = np.zeros(seg_len)
        nyquist = 0.45 * fs
        for harm in range(1, N_HARMONICS + 1):
            if harm * freq.max() >= nyquist:
                break
            tone += np.sin(harm * base_phase + rng.uniform(0, 2 * np.pi)) \
                / harm ** HARMONIC_ROLLOFF
        if family == 3:
            tone *= 1.0 - 0.45 * (1.0 + np.sin(2 * np.pi * TREMOLO_HZ * t))
        ramp = min(int(0.010 * fs), seg_len // 2)
        if ramp > 0:
            env = np.ones(seg_len)
            env[:ramp] = 0.5 * (1 - np.cos(np.pi * np.arange(ramp) / ramp))
            env[-ramp:] = env[:ramp][::-1]
            tone *= env
        samples[pos:pos + seg_len] = tone
        seg_label[pos:pos + seg_len] = family
        pos += seg_len

    noise = rng.standard_normal(n)
    power_sig = np.mean(samples ** 2)
    power_noise = power_sig / (10.0 ** (cfg.snr_db / 10.0))
    samples = samples + noise * np.sqrt(power_noise / np.mean(noise ** 2))
    for b, a in profile:
        samples = lfilter(b, a, samples)
    peak = np.abs(samples).max()
    if peak > 0:
        samples = 0.8 * samples / peak

    win = int(round(fs * cfg.window_ms / 1000.0))
    hop = int(round(fs * cfg.hop_ms / 1000.0))
    n_frames = (n - win) // hop + 1
    centers = hop * np.arange(n_frames) + win // 2
    labels = seg_label[centers]
    return samples, labels


def make_toy_corpus(out_dir: str, cfg: ToyCorpusConfig = ToyCorpusConfig()) -> str:
    """Write WAVs, frame-label files, and a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    master = np.random.SeedSequence(cfg.seed)
    profile_rng = np.random.default_rng(master.spawn(1)[0])
    profiles = speaker_profiles(profile_rng, cfg.n_speakers, cfg.sample_rate)
    utt_seeds = master.spawn(cfg.n_utterances)
    lines = []
    for i in range(cfg.n_utterances):
        rng = np.random.default_rng(utt_seeds[i])
        speaker = i % cfg.n_speakers
        samples, labels = synth_utterance(rng, profiles[speaker], cfg)
        utt_id = f"utt{i:04d}"
        wav_name = f"{utt_id}.wav"
        label_name = f"{utt_id}.labels"
        write_wav(os.path.join(out_dir, wav_name), samples, cfg.sample_rate)
        with open(os.path.join(out_dir, label_name), "w", encoding="utf-8") as f:
            f.write("\n".join(str(int(v)) for v in labels) + "\n")
        lines.append(f"{utt_id}\t{wav_name}\tspk{speaker:02d}\t{label_name}")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return manifest
