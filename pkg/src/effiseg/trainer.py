"""Training loop: Adam, early stopping on validation loss, best-checkpoint keeping."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .data import Sample, preprocess_batch
from .exceptions import ConfigError
from .metrics import DEFAULT_THRESHOLD, dice, segmentation_loss
from .model import EffiSegNet, save_checkpoint

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_dice")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    early_stop_metric: str = "val_loss"
    patience: int = 7
    seed: int = 0
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.optimizer != "adam":
            raise ConfigError(f"only the 'adam' optimizer is supported, got {self.optimizer!r}")
        if self.early_stop_metric != "val_loss":
            raise ConfigError(
                f"only early stopping on 'val_loss' is supported, got {self.early_stop_metric!r}"
            )


@dataclass
class AdamState:
    step: int
    m: List[torch.Tensor]
    v: List[torch.Tensor]


def init_adam_state(params: Sequence[torch.Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m=[torch.zeros_like(p) for p in params],
        v=[torch.zeros_like(p) for p in params],
    )


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Sequence[torch.Tensor], AdamState]:
    """One bias-corrected Adam update, in place on params and state."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: params/grads/state lengths disagree")
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g.shape != p.shape:
                raise ValueError(f"adam_step: grad shape {tuple(g.shape)} != param {tuple(p.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bias1, (v / bias2).sqrt_().add_(eps), value=-lr)
    return params, state


class Adam(object):
    """Adam driver over a module's trainable parameters."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = init_adam_state(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


class EarlyStopper:
    """Stop after `patience` consecutive epochs without val-loss improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = None
        self.bad_streak = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_streak = 0
        else:
            self.bad_streak += 1
        return self.bad_streak >= self.patience


def _validate(model, samples, batch_size, size) -> Tuple[float, float]:
    """Mean validation loss (over batches) and mean per-image Dice at 0.5."""
    model.eval()
    ordered = sorted(samples, key=lambda s: (s.source, s.id))
    batch_losses = []
    dices = []
    with torch.no_grad():
        for start in range(0, len(ordered), batch_size):
            images, masks = preprocess_batch(ordered[start:start + batch_size], size)
            probs = model(images)
            batch_losses.append(float(segmentation_loss(probs, masks)))
            preds = (probs > DEFAULT_THRESHOLD).float()
            for pred, gt in zip(preds, masks):
                dices.append(dice(pred, gt))
    return sum(batch_losses) / len(batch_losses), sum(dices) / len(dices)


def train(
    model: EffiSegNet,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: TrainConfig,
) -> Tuple[Path, List[Dict]]:
    """Run the training recipe; returns (best checkpoint path, history).

    After every epoch the validation loss is computed; the weights with the
    minimum validation loss are kept, training stops once there has been no
    improvement for `patience` consecutive epochs, and the best weights are
    restored into the model and written to <checkpoint_dir>/best.pt.
    """
    if not train_samples:
        raise ValueError("train: empty training set")
    if not val_samples:
        raise ValueError("train: empty validation set")
    size = model.config.input_size
    ordered = sorted(train_samples, key=lambda s: (s.source, s.id))
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    stopper = EarlyStopper(cfg.patience)
    history: List[Dict] = []
    best_state = None
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(ordered))
        batch_losses = []
        for batch_index, start in enumerate(range(0, len(ordered), cfg.batch_size)):
            batch = [ordered[i] for i in perm[start:start + cfg.batch_size]]
            images, masks = preprocess_batch(batch, size)
            optimizer.zero_grad()
            loss = segmentation_loss(model(images), masks)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss {float(loss)} at epoch {epoch}, "
                    f"batch {batch_index}"
                )
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss))
        train_loss = sum(batch_losses) / len(batch_losses)
        val_loss, val_dice = _validate(model, val_samples, cfg.batch_size, size)
        if not math.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss {val_loss} at epoch {epoch}")
        history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_dice": val_dice,
        })
        if val_loss < stopper.best_loss:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if stopper.update(epoch, val_loss):
            break

    model.load_state_dict(best_state)
    best_path = ckpt_dir / "best.pt"
    save_checkpoint(model, best_path, epoch=stopper.best_epoch)
    return best_path, history


def write_history_csv(path, history: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})
