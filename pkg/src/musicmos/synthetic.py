"""Synthetic tone-mixture corpus with planted MOS, for pipeline checks without real data."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import TARGET_RATE, AudioClip, add_noise, write_wav
from .dataset import ClipAnnotation, write_manifest

SNR_RANGE = (0.0, 40.0)
N_RATINGS = 5


@dataclass(frozen=True)
class SyntheticClip:
    annotation: ClipAnnotation
    clip: AudioClip
    snr_db: float
    planted_mi: float
    planted_ta: float


def ratings_for_mean(m: float, n: int = N_RATINGS) -> tuple[int, ...]:
    """``n`` integer ratings in [1, 5] whose mean is ``m`` rounded to a multiple of 1/n."""
    total = int(round(min(max(m, 1.0), 5.0) * n))
    base, extra = divmod(total, n)
    return tuple([base + 1] * extra + [base] * (n - extra))


def tone_mixture(rng: np.random.Generator, n: int, rate: int, n_tones: int) -> np.ndarray:
    t = np.arange(n) / rate
    f0 = rng.uniform(110.0, 440.0)
    ratios = rng.choice([1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0], size=n_tones, replace=False)
    x = np.zeros(n)
    for k, r in enumerate(ratios):
        amp = 1.0 / (k + 1)
        x += amp * np.sin(2 * np.pi * f0 * r * t + rng.uniform(0, 2 * np.pi))
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t) ** 2
    x *= envelope
    return 0.5 * x / np.max(np.abs(x))


def generate(
    n_systems: int = 10,
    clips_per_system: int = 20,
    seconds: float = 10.0,
    rate: int = TARGET_RATE,
    seed: int = 0,
    mi_noise: float = 0.2,
    ta_noise: float = 0.4,
) -> list[SyntheticClip]:
    """Clips whose MI MOS is an affine function of their SNR plus Gaussian noise.

    Each system has its own typical SNR so system means differ; within a
    system clip SNRs spread around it. TA follows the tone count and SNR
    with more noise.
    """
    lo, hi = SNR_RANGE
    n = int(round(seconds * rate))
    centres = np.linspace(lo + 5, hi - 5, n_systems)
    out = []
    for s in range(n_systems):
        system_id = f"sys{s:02d}"
        for j in range(clips_per_system):
            clip_id = f"{system_id}_{j:03d}"
            rng = np.random.default_rng([seed, zlib.crc32(clip_id.encode())])
            snr = float(np.clip(centres[s] + rng.uniform(-10, 10), lo, hi))
            n_tones = int(rng.integers(1, 6))
            clean = tone_mixture(rng, n, rate, n_tones)
            noisy = np.clip(add_noise(clean, snr, rng), -1.0, 1.0)
            quality = (snr - lo) / (hi - lo)
            mi = 1.0 + 4.0 * quality + rng.normal(0.0, mi_noise)
            ta = 1.0 + 4.0 * (0.5 * quality + 0.5 * (n_tones - 1) / 4) + rng.normal(0.0, ta_noise)
            ann = ClipAnnotation(
                clip_id=clip_id,
                audio_path=f"audio/{clip_id}.wav",
                system_id=system_id,
                ratings_mi=ratings_for_mean(mi),
                ratings_ta=ratings_for_mean(ta),
                prompt_text=f"{n_tones} tones",
            )
            out.append(SyntheticClip(ann, AudioClip(noisy, rate, clip_id), snr, mi, ta))
    return out


def write_corpus(root: str | Path, clips: list[SyntheticClip]) -> Path:
    """Write WAVs under ``root/audio`` and ``root/manifest.csv``; returns the manifest path."""
    root = Path(root)
    for c in clips:
        write_wav(root / c.annotation.audio_path, c.clip)
    manifest = root / "manifest.csv"
    write_manifest(manifest, [c.annotation for c in clips], n_ratings=N_RATINGS)
    return manifest
