"""Attention pooling, per-dimension MLP heads, LoRA adapters and checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import __version__
from .encoder import EncoderSpec, get_spec
from .errors import (
    AdaptationError,
    CheckpointError,
    CheckpointVersionError,
    ContractError,
    EmptyInputError,
    EncoderMismatchError,
)

HIDDEN = 256
DEFAULT_CENTERS = (1.0, 2.0, 3.0, 4.0, 5.0)
HEADS = ("mi", "ta")


class AttentionPool(nn.Module):
    """Softmax-weighted frame average with a single learned scoring vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(dim))

    def weights(self, h: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if h.shape[-2] == 0:
            raise EmptyInputError("cannot pool zero frames")
        scores = h @ self.w
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, h: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        # h: [..., L, d] -> [..., d]
        alpha = self.weights(h, mask)
        return (alpha.unsqueeze(-1) * h).sum(dim=-2)


def pool(features: np.ndarray | torch.Tensor, w: np.ndarray | torch.Tensor) -> torch.Tensor:
    h = torch.as_tensor(features)
    p = AttentionPool(h.shape[-1]).to(h.dtype)
    with torch.no_grad():
        p.w.copy_(torch.as_tensor(w, dtype=h.dtype))
        return p(h)


class PredictionHead(nn.Module):
    def __init__(self, dim: int, n_out: int = 1, hidden: int = HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, n_out)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(torch.rand(lin.weight.shape, generator=generator) * 2 * bound - bound)
                lin.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.fc1.in_features:
            raise ContractError(f"head expects dim {self.fc1.in_features}, got {z.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(z)))


def decode_ordinal(logits: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1) @ centers.to(logits.dtype)


# --------------------------------------------------------------------------
# LoRA


class LoraLinear(nn.Module):
    """``base(x) + (alpha / rank) * B @ A @ x`` with the base layer frozen."""

    def __init__(self, base: nn.Linear, rank: int = 16, alpha: float = 32.0,
                 init_std: float = 0.02, generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        device = base.weight.device
        a = torch.randn(rank, base.in_features, generator=generator) * init_std
        self.lora_A = nn.Parameter(a.to(device))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, device=device))
        self.enabled = True

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * self.lora_B @ self.lora_A

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.enabled:
            y = y + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scaling
        return y


@dataclass
class LoraReport:
    targets: list[str]
    trainable: int
    base_total: int

    @property
    def fraction(self) -> float:
        return self.trainable / self.base_total if self.base_total else 0.0


def apply_lora(
    encoder: nn.Module,
    targets: Sequence[str] | None = None,
    rank: int = 16,
    alpha: float = 32.0,
    seed: int = 0,
) -> LoraReport:
    """Wrap every ``nn.Linear`` whose attribute name is in ``targets``.

    The base weights are left untouched; all encoder parameters other than
    the new A/B factors are frozen.
    """
    if targets is None:
        targets = encoder.spec.lora_targets
    base_total = sum(p.numel() for p in encoder.parameters())
    for p in encoder.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    wrapped = []
    for name, module in list(encoder.named_modules()):
        for child_name, child in list(module.named_children()):
            if child_name in targets and isinstance(child, nn.Linear):
                setattr(module, child_name, LoraLinear(child, rank, alpha, generator=g))
                wrapped.append(f"{name}.{child_name}" if name else child_name)
    if not wrapped:
        linears = sorted(n for n, m in encoder.named_modules() if isinstance(m, nn.Linear))
        raise AdaptationError(
            f"no projection named {list(targets)} found; available linear modules: {linears[:50]}"
        )
    trainable = sum(p.numel() for m in lora_modules(encoder) for p in (m.lora_A, m.lora_B))
    return LoraReport(wrapped, trainable, base_total)


def lora_modules(encoder: nn.Module) -> list[LoraLinear]:
    return [m for m in encoder.modules() if isinstance(m, LoraLinear)]


def set_lora_enabled(encoder: nn.Module, enabled: bool) -> None:
    for m in lora_modules(encoder):
        m.enabled = enabled


def lora_state(encoder: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in encoder.named_parameters() if n.endswith(("lora_A", "lora_B"))}


# --------------------------------------------------------------------------
# predictor


class QualityModel(nn.Module):
    """Shared attention pool feeding one MLP head per quality dimension.

    ``encoder`` is attached only when it is trained (LoRA or full
    fine-tuning); frozen-encoder models consume cached features directly.
    """

    def __init__(
        self,
        encoder_spec: EncoderSpec,
        head_mode: str = "regression",
        dims: Sequence[str] = HEADS,
        centers: Sequence[float] = DEFAULT_CENTERS,
        hidden: int = HIDDEN,
        seed: int = 0,
    ):
        super().__init__()
        if head_mode not in ("regression", "ordinal"):
            raise ContractError(f"head_mode must be 'regression' or 'ordinal', got {head_mode!r}")
        c = torch.tensor(centers, dtype=torch.float32)
        if head_mode == "ordinal" and not bool(torch.all(c[1:] > c[:-1])):
            raise ContractError("ordinal centers must be strictly increasing")
        self.encoder_spec = encoder_spec
        self.head_mode = head_mode
        self.dims = tuple(dims)
        self.hidden = hidden
        self.register_buffer("centers", c)
        n_out = 1 if head_mode == "regression" else len(centers)
        self.pool = AttentionPool(encoder_spec.hidden_dim)
        self.heads = nn.ModuleDict({d: PredictionHead(encoder_spec.hidden_dim, n_out, hidden) for d in self.dims})
        g = torch.Generator().manual_seed(seed)
        for d in self.dims:
            self.heads[d].reset_parameters(g)
            if head_mode == "regression":
                # start regression outputs at the middle of the rating scale
                with torch.no_grad():
                    self.heads[d].fc2.bias.fill_(float(c.mean()))
        self.encoder: nn.Module | None = None
        self.lora_config: dict | None = None

    def attach_encoder(self, encoder: nn.Module) -> None:
        if encoder.spec.encoder_id != self.encoder_spec.encoder_id:
            raise EncoderMismatchError(
                f"model built for {self.encoder_spec.encoder_id}, got encoder {encoder.spec.encoder_id}"
            )
        self.encoder = encoder

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """Raw head outputs: ``[B]`` scores (regression) or ``[B, K]`` logits."""
        h = self.encoder(x) if self.encoder is not None else x
        z = self.pool(h, mask)
        out = {}
        for d in self.dims:
            y = self.heads[d](z)
            out[d] = y.squeeze(-1) if self.head_mode == "regression" else y
        return out

    def decode(self, raw: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        if self.head_mode == "regression":
            return raw
        return {d: decode_ordinal(v, self.centers) for d, v in raw.items()}

    def predict(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        return self.decode(self(x, mask))

    def head_parameters(self) -> list[nn.Parameter]:
        return list(self.pool.parameters()) + list(self.heads.parameters())

    def count_head_parameters(self) -> int:
        return sum(p.numel() for p in self.head_parameters())


def clamp_scores(scores, lo: float = 1.0, hi: float = 5.0):
    if isinstance(scores, torch.Tensor):
        return scores.clamp(lo, hi)
    return np.clip(scores, lo, hi)


def expected_head_parameters(dim: int, n_out: int = 1, n_heads: int = 2, hidden: int = HIDDEN) -> int:
    return dim + n_heads * (dim * hidden + hidden + hidden * n_out + n_out)


# --------------------------------------------------------------------------
# checkpoint container
#
#   b"MQCK"  u16 format version  u32 metadata length  metadata JSON (utf-8)
#   tensor blobs, little-endian f32, in metadata["tensors"] order
#   u32 CRC32 over everything before it
#
# metadata["tensors"] lists {name, shape, offset, nbytes}; offsets are
# relative to the first blob byte.

CKPT_MAGIC = b"MQCK"
CKPT_VERSION = 1


def _tensor_table(tensors: dict[str, torch.Tensor]) -> tuple[list[dict], list[bytes]]:
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return table, blobs


def checkpoint_tensors(model: QualityModel, extra: dict[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    tensors = {f"pool.{n}": p for n, p in model.pool.named_parameters()}
    tensors.update({f"heads.{n}": p for n, p in model.heads.named_parameters()})
    if model.encoder is not None:
        if model.lora_config is not None:
            tensors.update({f"lora.{n}": p for n, p in lora_state(model.encoder).items()})
        else:
            tensors.update({f"encoder.{n}": p for n, p in model.encoder.state_dict().items()})
    if extra:
        tensors.update(extra)
    return tensors


def save_checkpoint(
    model: QualityModel,
    path: str | Path,
    train_fingerprint: str = "",
    extra_tensors: dict[str, torch.Tensor] | None = None,
    extra_meta: dict | None = None,
) -> Path:
    path = Path(path)
    table, blobs = _tensor_table(checkpoint_tensors(model, extra_tensors))
    meta = {
        "format_version": CKPT_VERSION,
        "code_version": __version__,
        "encoder_id": model.encoder_spec.encoder_id,
        "encoder_layer": model.encoder_spec.layer,
        "head_mode": model.head_mode,
        "dims": list(model.dims),
        "centers": [float(c) for c in model.centers],
        "hidden": model.hidden,
        "lora": model.lora_config,
        "full_encoder": model.encoder is not None and model.lora_config is None,
        "train_fingerprint": train_fingerprint,
        "extra": extra_meta or {},
        "tensors": table,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = b"".join([CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_raw)), meta_raw, *blobs])
    data = body + struct.pack("<I", zlib.crc32(body))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse and verify a checkpoint file; returns (metadata, tensors)."""
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format v{version}, this code reads v{CKPT_VERSION}; "
            f"re-export it with the matching release or write a migration"
        )
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt or truncated")
    start = 10 + meta_len
    try:
        meta = json.loads(data[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from exc
    blob = data[start:-4]
    tensors = {}
    for entry in meta["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return meta, tensors


def load_checkpoint(
    path: str | Path,
    expected_encoder_id: str | None = None,
    encoder: nn.Module | None = None,
) -> QualityModel:
    """Rebuild a :class:`QualityModel`.

    Adapted checkpoints (LoRA or full fine-tune) need the base ``encoder``;
    its LoRA wrappers are created and the stored factors loaded into them.
    """
    meta, tensors = read_checkpoint(path)
    enc_id = meta["encoder_id"]
    if expected_encoder_id is not None and expected_encoder_id != enc_id:
        raise EncoderMismatchError(
            f"{path} was trained on encoder {enc_id!r}, refusing to load for {expected_encoder_id!r}"
        )
    spec = encoder.spec if encoder is not None else get_spec(enc_id, meta.get("encoder_layer", -1))
    if spec.encoder_id != enc_id:
        raise EncoderMismatchError(f"{path} needs encoder {enc_id!r}, got {spec.encoder_id!r}")
    model = QualityModel(spec, meta["head_mode"], meta["dims"], meta["centers"], meta["hidden"])
    with torch.no_grad():
        for n, p in model.pool.named_parameters():
            p.copy_(tensors[f"pool.{n}"])
        for n, p in model.heads.named_parameters():
            p.copy_(tensors[f"heads.{n}"])
    adapted = meta.get("lora") is not None or meta.get("full_encoder")
    if adapted:
        if encoder is None:
            raise CheckpointError(f"{path} holds encoder adaptation; pass the base encoder to load it")
        if meta.get("lora") is not None:
            cfg = meta["lora"]
            if not any(True for _ in lora_modules(encoder)):
                apply_lora(encoder, cfg["targets"], cfg["rank"], cfg["alpha"])
            model.lora_config = cfg
            state = {n[len("lora."):]: t for n, t in tensors.items() if n.startswith("lora.")}
            params = dict(encoder.named_parameters())
            with torch.no_grad():
                for n, t in state.items():
                    params[n].copy_(t)
        else:
            state = {n[len("encoder."):]: t for n, t in tensors.items() if n.startswith("encoder.")}
            encoder.load_state_dict(state)
        model.attach_encoder(encoder)
    model.checkpoint_meta = meta
    model.extra_tensors = {n: t for n, t in tensors.items() if n.startswith("extra.")}
    return model
