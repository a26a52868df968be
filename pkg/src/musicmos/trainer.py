"""Training loop: AdamW with per-group learning rates, clipping, early stopping."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import FoldSplit, MosTarget
from .errors import ConfigError, TrainingDivergedError, UndefinedCorrelationError
from .model import QualityModel, apply_lora, lora_modules
from .objectives import (
    ContrastiveConfig,
    Mode,
    OrdinalTargetConfig,
    UncertaintyState,
    combine,
    contrastive_loss,
    epoch_schedule,
    mse_loss,
    ordinal_loss,
    soft_targets,
)
from .stats import spearman

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "A1"
    lr_heads: float = 3e-4
    lr_lora: float = 1e-5
    lr_encoder: float = 1e-5
    weight_decay_heads: float = 0.01
    weight_decay_lora: float = 0.0
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 10
    grad_clip_norm: float = 1.0
    precision: str = "f32"
    seed: int = 0
    lora_rank: int = 16
    lora_alpha: float = 32.0
    ordinal: OrdinalTargetConfig = field(default_factory=OrdinalTargetConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        Mode.parse(self.mode)
        for name in ("lr_heads", "lr_lora", "lr_encoder", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and patience >= 1 required")
        if self.patience > max(self.max_epochs, 1) and self.max_epochs > 0:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.precision not in ("f32", "mixed-bf16"):
            raise ConfigError(f"precision must be 'f32' or 'mixed-bf16', got {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_srcc_mi: float | None
    val_srcc_ta: float | None
    lr: dict[str, float]
    max_grad_norm: float
    wall_time: float
    contrastive_active: bool = False


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_srcc: float | None = None
    stop_reason: str = ""
    trainable_parameters: int = 0
    log_vars: dict[str, float] = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.epochs)

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_srcc": self.best_val_srcc,
            "stop_reason": self.stop_reason,
            "n_epochs": len(self.epochs),
            "trainable_parameters": self.trainable_parameters,
        }


# --------------------------------------------------------------------------
# data


def collate(items: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Stack ``[L_i, ...]`` tensors, zero-padding ragged lengths with a mask."""
    lengths = [t.shape[0] for t in items]
    if len(set(lengths)) == 1:
        return torch.stack(list(items)), None
    L = max(lengths)
    out = items[0].new_zeros((len(items), L, *items[0].shape[1:]))
    mask = torch.zeros(len(items), L, dtype=torch.bool)
    for i, t in enumerate(items):
        out[i, : t.shape[0]] = t
        mask[i, : t.shape[0]] = True
    return out, mask


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    frames = getattr(x, "frames", x)
    return torch.as_tensor(np.asarray(frames), dtype=torch.float32)


@torch.no_grad()
def predict(
    model: QualityModel,
    clip_ids: Sequence[str],
    inputs: Mapping[str, object],
    batch_size: int = 64,
) -> dict[str, dict[str, float]]:
    """Decoded (unclamped) scores per clip: ``{clip_id: {dim: score}}``."""
    was = model.training
    model.eval()
    out: dict[str, dict[str, float]] = {}
    try:
        for start in range(0, len(clip_ids), batch_size):
            ids = clip_ids[start : start + batch_size]
            x, mask = collate([_as_tensor(inputs[c]) for c in ids])
            scores = model.predict(x, mask)
            for i, cid in enumerate(ids):
                out[cid] = {d: float(scores[d][i]) for d in model.dims}
    finally:
        model.train(was)
    return out


def _srcc_or_none(pred: Sequence[float], human: Sequence[float]) -> float | None:
    try:
        return spearman(pred, human)
    except UndefinedCorrelationError:
        return None


# --------------------------------------------------------------------------
# model construction


def build_model(
    cfg: TrainConfig,
    encoder_spec,
    encoder: torch.nn.Module | None = None,
    seed: int | None = None,
) -> QualityModel:
    """Fresh model for ``cfg.mode``; attaches and adapts ``encoder`` when the mode trains it."""
    mode = Mode.parse(cfg.mode)
    model = QualityModel(
        encoder_spec, mode.head_mode, centers=cfg.ordinal.centers, seed=cfg.seed if seed is None else seed
    )
    if mode.adapts_encoder:
        if encoder is None:
            raise ConfigError(f"mode {mode.value} trains the encoder; pass one")
        if mode.uses_lora:
            if not lora_modules(encoder):
                apply_lora(encoder, encoder.spec.lora_targets, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed)
            model.lora_config = {
                "rank": cfg.lora_rank,
                "alpha": cfg.lora_alpha,
                "targets": list(encoder.spec.lora_targets),
            }
        else:
            for p in encoder.parameters():
                p.requires_grad_(True)
        model.attach_encoder(encoder)
    return model


def param_groups(model: QualityModel, cfg: TrainConfig, unc: UncertaintyState | None) -> list[dict]:
    groups = [{"name": "heads", "params": model.head_parameters(), "lr": cfg.lr_heads,
               "weight_decay": cfg.weight_decay_heads}]
    if unc is not None:
        groups.append({"name": "uncertainty", "params": list(unc.parameters()), "lr": cfg.lr_heads,
                       "weight_decay": 0.0})
    if model.encoder is not None:
        mode = Mode.parse(cfg.mode)
        if mode.uses_lora:
            params = [p for m in lora_modules(model.encoder) for p in (m.lora_A, m.lora_B)]
            groups.append({"name": "lora", "params": params, "lr": cfg.lr_lora,
                           "weight_decay": cfg.weight_decay_lora})
        else:
            groups.append({"name": "encoder", "params": [p for p in model.encoder.parameters() if p.requires_grad],
                           "lr": cfg.lr_encoder, "weight_decay": cfg.weight_decay_lora})
    return groups


def trainable_parameters(model: QualityModel, unc: UncertaintyState | None = None) -> int:
    n = sum(p.numel() for p in model.parameters() if p.requires_grad)
    if unc is not None:
        n += sum(p.numel() for p in unc.parameters())
    return n


# --------------------------------------------------------------------------
# loop


def _head_losses(
    model: QualityModel,
    raw: dict[str, torch.Tensor],
    y: dict[str, torch.Tensor],
    cfg: TrainConfig,
    contrastive_on: bool,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    losses, con = {}, {}
    for d in model.dims:
        if model.head_mode == "regression":
            losses[d] = mse_loss(raw[d], y[d])
        else:
            target = soft_targets(y[d], cfg.ordinal, dtype=raw[d].dtype)
            losses[d] = ordinal_loss(raw[d], target)
        if contrastive_on:
            decoded = model.decode({d: raw[d]})[d]
            con[d], _ = contrastive_loss(decoded, y[d], cfg.contrastive)
    return losses, con


def _snapshot(model: QualityModel, unc: UncertaintyState | None) -> dict:
    return {
        "model": copy.deepcopy(model.state_dict()),
        "unc": copy.deepcopy(unc.state_dict()) if unc is not None else None,
    }


def _restore(model: QualityModel, unc: UncertaintyState | None, snap: dict) -> None:
    model.load_state_dict(snap["model"])
    if unc is not None and snap["unc"] is not None:
        unc.load_state_dict(snap["unc"])


def train(
    model: QualityModel,
    fold: FoldSplit,
    inputs: Mapping[str, object],
    targets: Mapping[str, MosTarget],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    resume_path: str | Path | None = None,
    unc: UncertaintyState | None = None,
) -> tuple[QualityModel, TrainLog]:
    """Fit ``model`` on ``fold.train_ids``, early-stopping on validation SRCC(MI).

    ``inputs`` maps clip id to the model input: cached frame features for
    frozen-encoder modes, encoder-prepared tensors for adapted modes. When
    ``resume_path`` is given the full loop state is written there after every
    epoch and, if it already exists, training continues from it.
    """
    mode = Mode.parse(cfg.mode)
    if mode.head_mode != model.head_mode:
        raise ConfigError(f"mode {mode.value} needs {mode.head_mode} heads, model has {model.head_mode}")
    if not fold.val_ids:
        raise ConfigError(f"fold {fold.fold_index} has an empty validation set")
    if mode.uses_uncertainty and unc is None:
        unc = UncertaintyState(model.dims)
    torch.manual_seed(cfg.seed)

    optimizer = torch.optim.AdamW(param_groups(model, cfg, unc), betas=(0.9, 0.999), eps=1e-8)
    tlog = TrainLog(trainable_parameters=trainable_parameters(model, unc))
    best = _snapshot(model, unc)
    best_score = -math.inf
    start_epoch = 1
    stale = 0

    resume_path = Path(resume_path) if resume_path is not None else None
    if resume_path is not None and resume_path.exists():
        state = torch.load(resume_path, weights_only=False)
        _restore(model, unc, state["current"])
        optimizer.load_state_dict(state["optimizer"])
        best, best_score, stale = state["best"], state["best_score"], state["stale"]
        tlog = state["log"]
        start_epoch = state["epoch"] + 1
        log.info("resuming fold %d at epoch %d", fold.fold_index, start_epoch)

    train_ids = list(fold.train_ids)
    val_ids = list(fold.val_ids)
    y_all = {d: torch.tensor([targets[c][d] for c in train_ids], dtype=torch.float32) for d in model.dims}
    val_human = {d: [targets[c][d] for c in val_ids] for d in model.dims}
    clip_params = [p for g in optimizer.param_groups for p in g["params"]]

    if cfg.max_epochs == 0:
        tlog.stop_reason = "max_epochs"
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        active = epoch_schedule(epoch, mode, cfg.contrastive)
        gen = torch.Generator().manual_seed(cfg.seed * 100_003 + epoch)
        order = torch.randperm(len(train_ids), generator=gen).tolist()
        total, n_seen, max_norm = 0.0, 0, 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, mask = collate([_as_tensor(inputs[train_ids[i]]) for i in idx])
            y = {d: y_all[d][idx] for d in model.dims}
            raw = model(x, mask)
            losses, con = _head_losses(model, raw, y, cfg, "contrastive" in active)
            finite = all(bool(torch.isfinite(v)) for v in [*losses.values(), *con.values()])
            if finite:
                loss = combine(losses, epoch, mode, unc, cfg.contrastive, con, model.head_mode)
            if not finite or not torch.isfinite(loss):
                lrs = {g["name"]: g["lr"] for g in optimizer.param_groups}
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b} (lr {lrs}); check inputs and learning rates"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(clip_params, cfg.grad_clip_norm)
            grads = [p.grad.detach().norm() for p in clip_params if p.grad is not None]
            post = float(torch.stack(grads).norm()) if grads else 0.0
            max_norm = max(max_norm, post)
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            n_seen += len(idx)

        val_pred = predict(model, val_ids, inputs)
        srcc = {d: _srcc_or_none([val_pred[c][d] for c in val_ids], val_human[d]) for d in model.dims}
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / max(n_seen, 1),
            val_srcc_mi=srcc.get("mi"),
            val_srcc_ta=srcc.get("ta"),
            lr={g["name"]: g["lr"] for g in optimizer.param_groups},
            max_grad_norm=max_norm,
            wall_time=time.perf_counter() - t0,
            contrastive_active="contrastive" in active,
        )
        tlog.epochs.append(record)
        monitor = srcc.get("mi", srcc[model.dims[0]])
        if monitor is not None and monitor > best_score:
            best_score, best, stale = monitor, _snapshot(model, unc), 0
            tlog.best_epoch, tlog.best_val_srcc = epoch, monitor
        else:
            stale += 1
        log.debug("epoch %d loss %.4f val srcc %s", epoch, record.train_loss, srcc)

        if resume_path is not None:
            resume_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = resume_path.with_suffix(".tmp")
            torch.save({"current": _snapshot(model, unc), "optimizer": optimizer.state_dict(),
                        "best": best, "best_score": best_score, "stale": stale,
                        "log": tlog, "epoch": epoch}, tmp)
            tmp.replace(resume_path)
        if log_path is not None:
            Path(log_path).write_text(tlog.to_jsonl(), encoding="utf-8")

        if stale >= cfg.patience:
            tlog.stop_reason = "early_stopping"
            break
    else:
        tlog.stop_reason = "max_epochs"

    _restore(model, unc, best)
    if unc is not None:
        tlog.log_vars = {h: float(v.detach()) for h, v in unc.log_vars.items()}
    model.eval()
    if log_path is not None:
        Path(log_path).write_text(tlog.to_jsonl(), encoding="utf-8")
    return model, tlog
