"""Training losses and how they are combined per ablation mode."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .errors import ConfigError, ContractError, EmptyInputError


class Mode(str, Enum):
    A1 = "A1"    # frozen encoder, MSE
    A2 = "A2"    # frozen encoder, ordinal CE
    A3a = "A3a"  # + LoRA on attention projections
    A3b = "A3b"  # + pairwise contrastive term
    A3c = "A3c"  # + uncertainty weighting across heads
    A4 = "A4"    # alternative encoder, full fine-tuning, ordinal CE

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def head_mode(self) -> str:
        return "regression" if self is Mode.A1 else "ordinal"

    @property
    def uses_lora(self) -> bool:
        return self in (Mode.A3a, Mode.A3b, Mode.A3c)

    @property
    def full_finetune(self) -> bool:
        return self is Mode.A4

    @property
    def adapts_encoder(self) -> bool:
        return self.uses_lora or self.full_finetune

    @property
    def uses_contrastive(self) -> bool:
        return self in (Mode.A3b, Mode.A3c)

    @property
    def uses_uncertainty(self) -> bool:
        return self is Mode.A3c


@dataclass(frozen=True)
class OrdinalTargetConfig:
    centers: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    sigma: float = 0.5

    def __post_init__(self):
        c = self.centers
        if len(c) < 2 or any(b <= a for a, b in zip(c, c[1:])):
            raise ConfigError(f"ordinal centers must be strictly increasing, got {c}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    @property
    def K(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 0.5
    weight: float = 0.5
    warm_start_epoch: int = 6

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"contrastive margin must be positive, got {self.margin}")
        if self.weight < 0:
            raise ConfigError(f"contrastive weight must be non-negative, got {self.weight}")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise EmptyInputError("empty batch")
    return ((pred - target) ** 2).mean()


def soft_targets(y, cfg: OrdinalTargetConfig = OrdinalTargetConfig(), dtype=torch.float64) -> torch.Tensor:
    """Gaussian-softened class distribution around each MOS value.

    Accepts a scalar (returns ``[K]``) or a vector of N values (``[N, K]``).
    """
    y = torch.as_tensor(y, dtype=dtype)
    c = torch.tensor(cfg.centers, dtype=dtype)
    logits = -((y.unsqueeze(-1) - c) ** 2) / (2 * cfg.sigma**2)
    return torch.softmax(logits, dim=-1)


def ordinal_loss(logits: torch.Tensor, targets: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """Batch mean of cross-entropy between soft targets and softmax(logits)."""
    if logits.shape != targets.shape:
        raise ContractError(f"shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    if logits.shape[0] == 0:
        raise EmptyInputError("empty batch")
    sums = targets.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol) or bool((targets < 0).any()):
        raise ContractError("soft-target rows must be non-negative and sum to 1")
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def contrastive_loss(
    preds: torch.Tensor, targets: torch.Tensor, cfg: ContrastiveConfig = ContrastiveConfig()
) -> tuple[torch.Tensor, int]:
    """Margin hinge over ordered pairs with ``y_i > y_j + m``.

    Returns ``(loss, n_pairs)``; with no qualifying pair the loss is an
    exact zero that still participates in the autograd graph.
    """
    if preds.shape != targets.shape or preds.dim() != 1:
        raise ContractError("contrastive_loss expects two equal-length vectors")
    qualifying = targets.unsqueeze(1) > targets.unsqueeze(0) + cfg.margin
    n_pairs = int(qualifying.sum())
    if n_pairs == 0:
        return preds.sum() * 0.0, 0
    diff = preds.unsqueeze(1) - preds.unsqueeze(0)  # [i, j] = pred_i - pred_j
    hinge = torch.relu(cfg.margin - diff)
    return hinge[qualifying].mean(), n_pairs


class UncertaintyState(nn.Module):
    """Learned log-variance ``s_h`` per head, initialised to zero."""

    def __init__(self, heads=("mi", "ta")):
        super().__init__()
        self.log_vars = nn.ParameterDict({h: nn.Parameter(torch.zeros(())) for h in heads})

    def weight(self, head: str, loss: torch.Tensor) -> torch.Tensor:
        s = self.log_vars[head]
        return torch.exp(-s) / 2 * loss + s / 2


def epoch_schedule(epoch: int, mode: Mode | str, cfg: ContrastiveConfig = ContrastiveConfig()) -> set[str]:
    """Active loss components for a 1-based ``epoch``."""
    mode = Mode.parse(mode)
    if epoch < 1:
        raise ConfigError(f"epochs are 1-based, got {epoch}")
    if mode is Mode.A1:
        return {"mse"}
    active = {"ordinal"}
    if mode.uses_contrastive and epoch >= cfg.warm_start_epoch:
        active.add("contrastive")
    return active


def combine(
    losses: dict[str, torch.Tensor],
    epoch: int,
    mode: Mode | str,
    unc: UncertaintyState | None = None,
    cfg: ContrastiveConfig = ContrastiveConfig(),
    contrastive: dict[str, torch.Tensor] | None = None,
    head_mode: str | None = None,
) -> torch.Tensor:
    """Total objective from per-head losses.

    Per-head losses are summed with weight 1, or pass through uncertainty
    weighting in A3c. The contrastive terms, when scheduled, are added
    outside that weighting at fixed ``cfg.weight``.
    """
    mode = Mode.parse(mode)
    if head_mode is not None and head_mode != mode.head_mode:
        raise ConfigError(f"mode {mode.value} needs {mode.head_mode} heads, got {head_mode}")
    for h, v in losses.items():
        if not torch.isfinite(v).all():
            raise ContractError(f"non-finite loss for head {h}")
    if mode.uses_uncertainty:
        if unc is None:
            raise ConfigError("mode A3c requires an UncertaintyState")
        total = sum(unc.weight(h, v) for h, v in losses.items())
    else:
        total = sum(losses.values())
    if "contrastive" in epoch_schedule(epoch, mode, cfg) and contrastive:
        total = total + cfg.weight * sum(contrastive.values())
    return total
