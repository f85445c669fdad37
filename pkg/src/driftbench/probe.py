"""Latent condition probe: recover condition maps directly from latent codes.

A small VGG-style decoder upsamples a ``(C, H, W)`` latent to a
``(1, 16H, 16W)`` map.  How well it can be trained measures how much
condition information survives encoding.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

logger = logging.getLogger(__name__)

CHANNEL_PLAN = (128, 64, 32, 16)
DICE_EPS = 1.0


class ProbeDecoder(nn.Module):
    """BatchNorm on the latent, four x2 upsampling stages, 1x1 head."""

    def __init__(self, in_channels: int, output_activation: str = "none",
                 widths: Sequence[int] = CHANNEL_PLAN):
        super().__init__()
        if output_activation not in ("none", "sigmoid"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.in_channels = in_channels
        self.output_activation = output_activation
        self.input_norm = nn.BatchNorm2d(in_channels)
        stages, cin = [], in_channels
        for cout in widths:
            stages.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            ))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(cin, 1, 1)
        self.scale = 2 ** len(widths)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.head(self.stages(self.input_norm(z)))
        return torch.sigmoid(out) if self.output_activation == "sigmoid" else out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- losses --------------------------------------------------------------------

def probe_loss_edges(pred_logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """0.5 * BCE + 0.5 * soft Dice loss, Dice computed per sample then averaged."""
    if pred_logits.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred_logits.shape)} vs {tuple(target.shape)}")
    if not torch.isfinite(pred_logits).all():
        raise ValueError("non-finite logits")
    bce = F.binary_cross_entropy_with_logits(pred_logits, target)
    p = torch.sigmoid(pred_logits)
    if p.dim() <= 2:
        p, t = p.reshape(1, -1), target.reshape(1, -1)
    else:
        p, t = p.reshape(p.shape[0], -1), target.reshape(target.shape[0], -1)
    dice = (2 * (p * t).sum(1) + eps) / (p.sum(1) + t.sum(1) + eps)
    return 0.5 * bce + 0.5 * (1 - dice).mean()


def _grad_term(pred, target):
    dxp, dxt = pred[..., :, 1:] - pred[..., :, :-1], target[..., :, 1:] - target[..., :, :-1]
    dyp, dyt = pred[..., 1:, :] - pred[..., :-1, :], target[..., 1:, :] - target[..., :-1, :]
    return (dxp - dxt).abs().mean() + (dyp - dyt).abs().mean()


def probe_loss_depth(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.1) -> torch.Tensor:
    """L1 plus ``alpha`` times the L1 of forward-difference gradients."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.min() < 0 or pred.max() > 1:
        raise ValueError("depth prediction outside [0, 1]")
    return (pred - target).abs().mean() + alpha * _grad_term(pred, target)


# -- training ------------------------------------------------------------------

@dataclass
class ProbeTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    depth_alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("need 0 < patience < max_epochs")


class EarlyStopping:
    """Stop once validation loss has not decreased for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def split_by_hash(ids: Sequence[str]) -> tuple[list[int], list[int], list[int]]:
    """Deterministic 80/10/10 split on sha256(source_id)."""
    train, val, test = [], [], []
    for i, sid in enumerate(ids):
        bucket = int(hashlib.sha256(sid.encode()).hexdigest(), 16) % 10
        (train if bucket < 8 else val if bucket == 8 else test).append(i)
    return train, val, test


@dataclass
class ProbeDataset:
    latents: np.ndarray
    targets: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        n, _, h, w = self.latents.shape
        if self.targets.shape != (n, 1, 16 * h, 16 * w):
            raise ValueError(f"targets must be (N, 1, 16H, 16W), got {self.targets.shape}")
        if len(self.ids) != n:
            raise ValueError("one id per sample required")


@dataclass
class ProbeResult:
    best_val_loss: float
    test_metric: float
    epochs_run: int
    best_epoch: int
    test_dice: float | None = None
    history: list[tuple[int, float, float]] = field(default_factory=list)


def hard_dice(pred: np.ndarray, target: np.ndarray) -> float:
    inter = float(np.sum(pred * target))
    denom = float(np.sum(pred) + np.sum(target))
    return 1.0 if denom == 0 else 2 * inter / denom


def best_constant_dice(target: np.ndarray) -> float:
    """Best hard Dice achievable by predicting all zeros or all ones."""
    return max(hard_dice(np.zeros_like(target), target), hard_dice(np.ones_like(target), target))


def _loss_fn(task, cfg):
    if task == "edges":
        return probe_loss_edges
    if task == "depth":
        return lambda p, t: probe_loss_depth(p, t, cfg.depth_alpha)
    raise ValueError(f"unknown probe task {task!r}")


def _evaluate(model, loader_x, loader_y, loss_fn, batch):
    model.eval()
    total, count, preds = 0.0, 0, []
    with torch.no_grad():
        for s in range(0, len(loader_x), batch):
            x, y = loader_x[s:s + batch], loader_y[s:s + batch]
            out = model(x)
            total += float(loss_fn(out, y)) * len(x)
            count += len(x)
            preds.append(out)
    return total / count, torch.cat(preds)


def train_probe(data: ProbeDataset, decoder: ProbeDecoder, cfg: ProbeTrainConfig,
                task: str = "edges", split=None, log_path=None) -> ProbeResult:
    """Train with AdamW and early stopping; score the test split.

    The test metric is mean absolute error of the output binarized at 0.5
    (edges) or plain L1 (depth).  With ``lr == 0`` the decoder is treated as
    frozen, including its BatchNorm statistics.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    train_idx, val_idx, test_idx = split or split_by_hash(data.ids)
    if not train_idx or not val_idx or not test_idx:
        raise ValueError("train/val/test splits must all be nonempty")
    xs = torch.from_numpy(data.latents)
    ys = torch.from_numpy(data.targets)
    dtype = next(decoder.parameters()).dtype
    xs, ys = xs.to(dtype), ys.to(dtype)
    xtr, ytr = xs[train_idx], ys[train_idx]
    xva, yva = xs[val_idx], ys[val_idx]
    xte, yte = xs[test_idx], ys[test_idx]

    loss_fn = _loss_fn(task, cfg)
    frozen = cfg.lr == 0
    opt = torch.optim.AdamW(decoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    best_state, history = None, []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        decoder.train(not frozen)
        order = torch.randperm(len(xtr), generator=gen)
        running, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2 and not frozen:
                continue  # BatchNorm needs more than one sample
            out = decoder(xtr[idx])
            loss = loss_fn(out, ytr[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            if not frozen:
                opt.zero_grad()
                loss.backward()
                opt.step()
            running += float(loss.detach()) * len(idx)
            seen += len(idx)
        val_loss, _ = _evaluate(decoder, xva, yva, loss_fn, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, running / max(seen, 1), val_loss))
        improved = val_loss < stopper.best
        stop = stopper.step(epoch, val_loss)
        if improved:
            best_state = {k: v.detach().clone() for k, v in decoder.state_dict().items()}
        if stop:
            break
    if best_state is not None:
        decoder.load_state_dict(best_state)
    _, pred = _evaluate(decoder, xte, yte, loss_fn, cfg.batch_size)
    target = yte.numpy()
    dice = None
    if task == "edges":
        binary = (torch.sigmoid(pred) >= 0.5).to(pred.dtype).numpy()
        test_metric = float(np.mean(np.abs(binary - target)))
        dice = hard_dice(binary, target)
    else:
        test_metric = float(np.mean(np.abs(pred.numpy() - target)))
    if log_path is not None:
        write_training_log(log_path, history)
    return ProbeResult(stopper.best, test_metric, epoch, stopper.best_epoch, dice, history)


def write_training_log(path, history) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    return path


def save_checkpoint(path, decoder: ProbeDecoder, cfg: ProbeTrainConfig, task: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": decoder.state_dict(), "in_channels": decoder.in_channels,
                "output_activation": decoder.output_activation, "task": task,
                "config": asdict(cfg)}, path)
    return path


def load_checkpoint(path) -> tuple[ProbeDecoder, ProbeTrainConfig, str]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    dec = ProbeDecoder(ckpt["in_channels"], ckpt["output_activation"])
    dec.load_state_dict(ckpt["state_dict"])
    return dec, ProbeTrainConfig(**ckpt["config"]), ckpt["task"]


def pooled_latents(images, factor: int = 16) -> np.ndarray:
    """Grayscale average-pooled latents, shape (N, 1, side/factor, side/factor)."""
    from .projectors import to_gray

    out = []
    for im in images:
        g = to_gray(im)
        h, w = g.shape
        out.append(g.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))[None])
    return np.stack(out)


def toy_edge_dataset(n: int = 400, side: int = 64, seed: int = 0, blob_prob: float = 0.5) -> ProbeDataset:
    """Step/blob images, 16x pooled grayscale latents, native Canny targets."""
    from .projectors import canny
    from .synthetic import make_step_images

    images = make_step_images(n, side, seed, blob_prob)
    targets = np.stack([canny(im).data for im in images])
    return ProbeDataset(pooled_latents(images), targets, [im.source_id for im in images])
