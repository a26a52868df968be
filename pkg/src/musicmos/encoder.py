"""Frame-level feature extraction behind one interface.

Every encoder is an ``nn.Module`` with two stages:

* ``prepare(clip)`` -- fixed, non-trainable preprocessing (raw waveform for
  the pretrained models, log-mel frontend for the toy model);
* ``forward(inputs)`` -- the transformer stack whose attention projections
  LoRA can target, returning ``[batch, frames, dim]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import RESAMPLER, TARGET_RATE, TARGET_SECONDS, AudioClip
from .errors import ContractError, RetrievalError


@dataclass(frozen=True)
class EncoderSpec:
    encoder_id: str
    hidden_dim: int
    frame_rate: float
    sample_rate: int = TARGET_RATE
    layer: int = -1
    n_layers: int = 1
    adaptable: bool = True
    hub_id: str = ""
    lora_targets: tuple[str, ...] = ()

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ContractError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if not -self.n_layers <= self.layer < self.n_layers:
            raise ContractError(
                f"layer {self.layer} invalid for {self.encoder_id} with {self.n_layers} layers"
            )

    def with_layer(self, layer: int) -> "EncoderSpec":
        return dataclasses.replace(self, layer=layer)


TOY = EncoderSpec(
    "toy-64", hidden_dim=64, frame_rate=50.0, n_layers=1,
    lora_targets=("q_proj", "k_proj", "v_proj", "o_proj"),
)
MUQ_310M = EncoderSpec(
    "muq-310m", hidden_dim=1024, frame_rate=50.0, n_layers=24,
    hub_id="OpenMuQ/MuQ-large-msd-iter",
    lora_targets=("linear_q", "linear_k", "linear_v", "linear_out"),
)
MERT_95M = EncoderSpec(
    "mert-95m", hidden_dim=768, frame_rate=75.0, n_layers=12,
    hub_id="m-a-p/MERT-v1-95M",
    lora_targets=("q_proj", "k_proj", "v_proj", "out_proj"),
)
REGISTRY = {s.encoder_id: s for s in (TOY, MUQ_310M, MERT_95M)}


def get_spec(encoder_id: str, layer: int = -1) -> EncoderSpec:
    try:
        spec = REGISTRY[encoder_id]
    except KeyError:
        raise ContractError(f"unknown encoder {encoder_id!r}; known: {sorted(REGISTRY)}") from None
    return spec.with_layer(layer) if layer != spec.layer else spec


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [L, d] float32
    frame_rate: float
    encoder_id: str
    clip_id: str

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError(f"non-finite features for clip {self.clip_id!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape


def preprocessing_fingerprint(sample_rate: int = TARGET_RATE, seconds: float = TARGET_SECONDS) -> str:
    tag = f"{sample_rate}|{seconds}|mono-mean|{RESAMPLER}"
    return hashlib.sha1(tag.encode()).hexdigest()[:10]


# --------------------------------------------------------------------------
# toy encoder


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style mel filters, shape [n_mels, n_fft // 2 + 1]."""
    hz_to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)  # noqa: E731
    mel_to_hz = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)  # noqa: E731
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, init_std: float = 0.02, generator: torch.Generator | None = None):
        super().__init__()
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)
        with torch.no_grad():
            for lin in (self.q_proj, self.k_proj, self.v_proj, self.o_proj):
                if lin.weight.device.type == "meta":
                    continue
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=generator) * init_std)
                lin.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.q_proj(x), self.k_proj(x), self.v_proj(x)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return x + self.o_proj(att @ v)


class ToyEncoder(nn.Module):
    """Deterministic stand-in for a pretrained encoder.

    Frontend: 50 Hz frames of 40 log-mel band energies, mapped to ``dim``
    by a fixed seeded random projection. Stack: ``n_layers`` residual
    self-attention blocks with Q/K/V/O projections.
    """

    HOP = 480
    WIN = 960
    N_FFT = 1024
    N_MELS = 40
    FLOOR = 1e-8

    def __init__(self, dim: int = 64, n_layers: int = 1, seed: int = 0, spec: EncoderSpec = TOY):
        super().__init__()
        if dim != spec.hidden_dim or n_layers != spec.n_layers:
            spec = EncoderSpec(
                f"toy-{dim}x{n_layers}", hidden_dim=dim, frame_rate=50.0,
                n_layers=n_layers, lora_targets=TOY.lora_targets,
            )
        self.spec = spec
        g = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        self._window = np.hanning(self.WIN + 2)[1:-1]
        self._fb = mel_filterbank(self.N_MELS, self.N_FFT, TARGET_RATE)
        self._proj = rng.standard_normal((self.N_MELS, dim)) / math.sqrt(self.N_MELS)
        self.layers = nn.ModuleList(SelfAttentionBlock(dim, generator=g) for _ in range(n_layers))
        for p in self.parameters():
            p.requires_grad_(False)

    def frontend(self, samples: np.ndarray) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        n_frames = len(x) // self.HOP
        padded = np.concatenate([x, np.zeros(self.WIN)])
        idx = np.arange(self.WIN)[None, :] + self.HOP * np.arange(n_frames)[:, None]
        frames = padded[idx] * self._window
        power = np.abs(np.fft.rfft(frames, n=self.N_FFT, axis=1)) ** 2 / self.WIN
        logmel = np.log10(power @ self._fb.T + self.FLOOR)
        return (logmel @ self._proj).astype(np.float32)

    def prepare(self, clip: AudioClip) -> torch.Tensor:
        if clip.sample_rate != self.spec.sample_rate:
            raise ContractError(
                f"{self.spec.encoder_id} expects {self.spec.sample_rate} Hz, clip is {clip.sample_rate} Hz"
            )
        return torch.from_numpy(self.frontend(clip.samples))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = [x]
        for block in self.layers:
            hidden.append(block(hidden[-1]))
        return hidden[self.spec.layer]


# --------------------------------------------------------------------------
# pretrained encoders


def weights_dir(override: str | Path | None = None) -> Path:
    root = override or os.environ.get("MUSICMOS_WEIGHTS") or Path.home() / ".cache" / "musicmos" / "weights"
    return Path(root)


def _remediation(spec: EncoderSpec, root: Path) -> str:
    return (
        f"weights for {spec.encoder_id} ({spec.hub_id}) not found under {root}. "
        f"Fetch them once with network access, e.g. "
        f"`huggingface-cli download {spec.hub_id} --local-dir {root / spec.encoder_id}`, "
        f"or point MUSICMOS_WEIGHTS at an existing copy."
    )


class HubEncoder(nn.Module):
    """Wrapper around a hub checkpoint exposing hidden states.

    MuQ is loaded through the ``muq`` package, MERT through ``transformers``
    (remote code). Both are read from a local directory only.
    """

    def __init__(self, spec: EncoderSpec, root: str | Path | None = None):
        super().__init__()
        self.spec = spec
        local = weights_dir(root) / spec.encoder_id
        if not local.is_dir():
            raise RetrievalError(_remediation(spec, weights_dir(root)))
        try:
            if spec.encoder_id == "muq-310m":
                from muq import MuQ  # type: ignore

                self.model = MuQ.from_pretrained(str(local))
            else:
                from transformers import AutoModel  # type: ignore

                self.model = AutoModel.from_pretrained(str(local), trust_remote_code=True, local_files_only=True)
        except ImportError as exc:
            raise RetrievalError(f"{spec.encoder_id} needs an extra package: {exc}") from exc
        except OSError as exc:
            raise RetrievalError(_remediation(spec, weights_dir(root)) + f" ({exc})") from exc
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def prepare(self, clip: AudioClip) -> torch.Tensor:
        if clip.sample_rate != self.spec.sample_rate:
            raise ContractError(
                f"{self.spec.encoder_id} expects {self.spec.sample_rate} Hz, clip is {clip.sample_rate} Hz"
            )
        return torch.from_numpy(clip.samples.copy())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.model(x, output_hidden_states=True)
        return out.hidden_states[self.spec.layer]


def build_encoder(spec: EncoderSpec | str, weights_root: str | Path | None = None, seed: int = 0) -> nn.Module:
    if isinstance(spec, str):
        spec = get_spec(spec)
    if spec.encoder_id.startswith("toy"):
        return ToyEncoder(spec.hidden_dim, spec.n_layers, seed=seed, spec=spec)
    return HubEncoder(spec, weights_root)


@torch.no_grad()
def extract(clip: AudioClip, encoder: nn.Module) -> FeatureMatrix:
    """Run ``encoder`` in eval mode on one clip and return its frame features."""
    was_training = encoder.training
    encoder.eval()
    try:
        h = encoder(encoder.prepare(clip).unsqueeze(0))[0]
    finally:
        encoder.train(was_training)
    return FeatureMatrix(h.float().cpu().numpy(), encoder.spec.frame_rate, encoder.spec.encoder_id, clip.clip_id)


_TOY_SINGLETON: ToyEncoder | None = None


def toy_extract(clip: AudioClip) -> FeatureMatrix:
    global _TOY_SINGLETON
    if _TOY_SINGLETON is None:
        _TOY_SINGLETON = ToyEncoder()
    return extract(clip, _TOY_SINGLETON)
