"""Audio decoding, length normalisation and controlled degradations."""

from __future__ import annotations

import functools
import io
import math
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy import signal

from .errors import AudioDecodeError, ContractError, DegradationError, EmptyInputError

TARGET_RATE = 24_000
TARGET_SECONDS = 10.0
RESAMPLER = "scipy.signal.resample_poly/kaiser5.0"

KINDS = ("mp3", "noise", "pitch", "tempo")
SEVERITIES = ("mild", "moderate", "severe")

# mp3 kbps, noise SNR dB, pitch |semitones|, tempo stretch ratio
SEVERITY_TABLE: dict[str, dict[str, float]] = {
    "mp3": {"mild": 128, "moderate": 64, "severe": 32},
    "noise": {"mild": 30.0, "moderate": 20.0, "severe": 10.0},
    "pitch": {"mild": 1.0, "moderate": 2.0, "severe": 4.0},
    "tempo": {"mild": 1.05, "moderate": 1.12, "severe": 1.25},
}

# MPEG layer III bitrate limits (kbps) by sample-rate family
_MP3_LIMITS = {
    "mpeg1": (32, 320, (32000, 44100, 48000)),
    "mpeg2": (8, 160, (16000, 22050, 24000)),
    "mpeg25": (8, 64, (8000, 11025, 12000)),
}


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    clip_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim != 1:
            raise ContractError(f"expected mono samples, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError(f"clip {self.clip_id!r} contains NaN/Inf samples")
        self.samples = np.clip(x, -1.0, 1.0)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def replace(self, samples: np.ndarray) -> "AudioClip":
        return AudioClip(samples, self.sample_rate, self.clip_id)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: str
    parameter: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DegradationError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if self.severity not in SEVERITIES:
            raise DegradationError(f"unknown severity {self.severity!r}; expected one of {SEVERITIES}")
        p = self.parameter
        if self.kind == "noise" and not (math.isfinite(p) or p == math.inf):
            raise DegradationError(f"noise SNR must be finite or +inf, got {p}")
        if self.kind == "pitch" and not 0 <= p <= 12:
            raise DegradationError(f"pitch magnitude must be in [0, 12] semitones, got {p}")
        if self.kind == "tempo" and not 1.0 <= p <= 2.0:
            raise DegradationError(f"tempo ratio must be in [1, 2], got {p}")
        if self.kind == "mp3" and not p > 0:
            raise DegradationError(f"mp3 bitrate must be positive, got {p}")

    @classmethod
    def standard(cls, kind: str, severity: str) -> "DegradationSpec":
        return cls(kind, severity, float(SEVERITY_TABLE[kind][severity]))

    @property
    def is_identity(self) -> bool:
        return (
            (self.kind == "noise" and self.parameter == math.inf)
            or (self.kind == "pitch" and self.parameter == 0)
            or (self.kind == "tempo" and self.parameter == 1.0)
        )

    @property
    def label(self) -> str:
        return f"{self.kind}/{self.severity}"


def all_standard_specs() -> list[DegradationSpec]:
    return [DegradationSpec.standard(k, s) for k in KINDS for s in SEVERITIES]


def resample(x: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate == target_rate:
        return x
    ratio = Fraction(target_rate, orig_rate)
    return signal.resample_poly(x, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))


def fix_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - len(x), dtype=x.dtype)])


def load_and_normalize(
    path: str | Path,
    target_rate: int = TARGET_RATE,
    target_seconds: float = TARGET_SECONDS,
    clip_id: str | None = None,
) -> AudioClip:
    """Decode, downmix to mono (channel mean), resample and truncate/zero-pad."""
    path = Path(path)
    try:
        data, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except Exception as exc:  # soundfile raises several unrelated types
        raise AudioDecodeError(f"cannot decode {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise EmptyInputError(f"{path} decodes to zero samples")
    mono = data.mean(axis=1)
    mono = resample(mono, rate, target_rate)
    n = int(round(target_rate * target_seconds))
    mono = fix_length(mono.astype(np.float32), n)
    return AudioClip(mono, target_rate, clip_id if clip_id is not None else path.stem)


def write_wav(path: str | Path, clip: AudioClip) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), clip.samples, clip.sample_rate, subtype="PCM_16")
    return path


# --------------------------------------------------------------------------
# degradations


def _power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_of(signal_clip: AudioClip | np.ndarray, noisy: AudioClip | np.ndarray) -> float:
    """SNR in dB of ``noisy`` relative to ``signal_clip``; +inf when identical."""
    s = signal_clip.samples if isinstance(signal_clip, AudioClip) else np.asarray(signal_clip)
    y = noisy.samples if isinstance(noisy, AudioClip) else np.asarray(noisy)
    if len(s) != len(y):
        raise ContractError(f"length mismatch: {len(s)} vs {len(y)}")
    p_noise = _power(np.asarray(y, np.float64) - np.asarray(s, np.float64))
    if p_noise == 0.0:
        return math.inf
    p_signal = _power(s)
    if p_signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_signal / p_noise)


def add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise scaled to exactly ``snr_db`` (unclipped result)."""
    x = np.asarray(x, dtype=np.float64)
    if snr_db == math.inf:
        return x.copy()
    noise = rng.standard_normal(len(x))
    target = _power(x) / 10.0 ** (snr_db / 10.0)
    actual = _power(noise)
    if actual > 0:
        noise *= math.sqrt(target / actual)
    return x + noise


def _mp3_limits(rate: int) -> tuple[int, int]:
    for lo, hi, rates in _MP3_LIMITS.values():
        if rate in rates:
            return lo, hi
    raise DegradationError(f"sample rate {rate} Hz is not encodable as MPEG layer III")


def _encode_decode(x: np.ndarray, rate: int, level: float) -> np.ndarray:
    buf = io.BytesIO()
    sf.write(buf, np.asarray(x, np.float32), rate, format="MP3", subtype="MPEG_LAYER_III",
             compression_level=level, bitrate_mode="CONSTANT")
    buf.seek(0)
    y, _ = sf.read(buf, dtype="float32")
    return y.mean(axis=1) if y.ndim == 2 else y


@functools.lru_cache(maxsize=64)
def _codec_response(rate: int, level: float, n: int, max_lag: int = 4096) -> tuple[int, float]:
    """Start delay and broadband gain of the codec, measured on a noise probe.

    Measured once per setting because tonal material has periodic
    cross-correlation peaks that make per-clip alignment ambiguous.
    """
    probe = 0.25 * np.random.default_rng(0).standard_normal(n).astype(np.float32)
    y = _encode_decode(probe, rate, level)
    w = min(n, 16384)
    if len(y) < w:
        return 0, 1.0
    corr = signal.correlate(y[: w + max_lag], probe[:w], mode="valid", method="fft")
    lag = int(np.argmax(corr[: max_lag + 1]))
    # low-passed codecs drop part of the probe's power; take gain from the peak
    m = min(len(y) - lag, n)
    sub = signal.resample_poly(probe[:m].astype(np.float64), 1, 4)
    dec = signal.resample_poly(y[lag : lag + m].astype(np.float64), 1, 4)
    gain = float(np.dot(dec, sub) / np.dot(sub, sub))
    return lag, gain if gain > 0.5 else 1.0


def mp3_roundtrip(x: np.ndarray, rate: int, kbps: float) -> np.ndarray:
    lo, hi = _mp3_limits(rate)
    if not lo <= kbps <= hi:
        raise DegradationError(f"{kbps} kbps outside [{lo}, {hi}] for {rate} Hz MPEG layer III")
    level = (hi - kbps) / (hi - lo)
    try:
        y = _encode_decode(x, rate, level)
        lag, gain = _codec_response(rate, level, len(x))
    except Exception as exc:
        raise DegradationError(f"mp3 round trip failed at {kbps} kbps: {exc}") from exc
    return fix_length(y[lag:] / gain, len(x))


_N_FFT = 2048
_HOP = 512


def time_stretch(x: np.ndarray, rate: float) -> np.ndarray:
    """Phase-vocoder time stretch; output is about ``len(x) / rate`` long."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < _N_FFT:
        x = fix_length(x, _N_FFT)
    _, _, z = signal.stft(x, nperseg=_N_FFT, noverlap=_N_FFT - _HOP, window="hann")
    n_bins, n_frames = z.shape
    steps = np.arange(0, n_frames, rate)
    steps = steps[steps < n_frames]  # arange may overshoot by rounding
    lo = steps.astype(int)
    frac = (steps - lo)[None, :]
    zp = np.concatenate([z, np.zeros((n_bins, 1), dtype=z.dtype)], axis=1)
    left, right = zp[:, lo], zp[:, lo + 1]
    mag = (1.0 - frac) * np.abs(left) + frac * np.abs(right)

    advance = np.linspace(0, np.pi * _HOP, n_bins)[:, None]
    dphase = np.angle(right) - np.angle(left) - advance
    dphase -= 2.0 * np.pi * np.round(dphase / (2.0 * np.pi))
    increments = advance + dphase
    phase = np.angle(z[:, :1]) + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(increments[:, :-1], axis=1)], axis=1
    )
    _, y = signal.istft(mag * np.exp(1j * phase), nperseg=_N_FFT, noverlap=_N_FFT - _HOP, window="hann")
    return fix_length(y, int(round(len(x) / rate)))


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch by stretching time then resampling back to the input length."""
    n = len(x)
    factor = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(x, 1.0 / factor)
    return signal.resample(stretched, n)


def _clip_rng(seed: int, clip_id: str, kind: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(clip_id.encode("utf-8")), KINDS.index(kind)])


def apply_degradation(clip: AudioClip, spec: DegradationSpec, seed: int = 0) -> AudioClip:
    """Return a degraded copy with the same length and sample rate.

    Pitch and tempo direction and the noise realisation are drawn from a
    generator keyed on ``(seed, clip_id, kind)``.
    """
    x = clip.samples
    n = len(x)
    rng = _clip_rng(seed, clip.clip_id, spec.kind)
    if spec.kind == "noise":
        if spec.parameter == math.inf:
            return clip.replace(x.copy())
        y = add_noise(x, spec.parameter, rng)
    elif spec.kind == "mp3":
        y = mp3_roundtrip(x, clip.sample_rate, spec.parameter)
    elif spec.kind == "pitch":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        y = pitch_shift(x, sign * spec.parameter)
    else:
        ratio = spec.parameter if rng.random() < 0.5 else 1.0 / spec.parameter
        y = fix_length(time_stretch(x, ratio), n)
    y = np.clip(np.asarray(y, dtype=np.float64), -1.0, 1.0)
    if not np.all(np.isfinite(y)):
        raise DegradationError(f"{spec.label} produced non-finite samples for {clip.clip_id!r}")
    return clip.replace(fix_length(y.astype(np.float32), n))


def degraded_path(root: str | Path, spec: DegradationSpec, clip_id: str) -> Path:
    return Path(root) / "degraded" / spec.kind / spec.severity / f"{clip_id}.wav"


def write_degraded(root: str | Path, clip: AudioClip, spec: DegradationSpec, seed: int = 0) -> Path:
    out = apply_degradation(clip, spec, seed)
    if out.sample_rate != TARGET_RATE:
        out = AudioClip(resample(out.samples, out.sample_rate, TARGET_RATE), TARGET_RATE, out.clip_id)
    return write_wav(degraded_path(root, spec, clip.clip_id), out)
