"""Shared training-loop machinery: seeding, batching, plateau scheduling
and best-epoch checkpoint selection. The per-model step logic lives with
each model; this module owns everything they have in common.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch


class TrainingError(RuntimeError):
    """Raised when optimization cannot proceed (e.g. divergence to NaN)."""


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)


def epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, stage, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, stage, epoch]))


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering [0, n), shuffled when an rng is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float
    learning_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    state: dict  # best model parameters, as numpy arrays
    history: list[EpochRecord]
    best_epoch: int  # 0 = initialization (e.g. epochs=0)
    best_val_loss: float
    best_val_f1: float


def _snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_state(model: torch.nn.Module, state: dict) -> None:
    tensors = {k: torch.as_tensor(np.asarray(v)) for k, v in state.items()}
    model.load_state_dict(tensors)


def fit(
    model: torch.nn.Module,
    epochs: int,
    learning_rate: float,
    lr_factor: float,
    lr_patience: int,
    train_epoch,
    evaluate,
) -> TrainResult:
    """Adam + reduce-on-plateau training loop.

    ``train_epoch(optimizer, epoch)`` runs one pass and returns the mean
    training loss; ``evaluate()`` returns (val_loss, val_f1). The epoch
    with the best validation F1 (earliest on ties) is kept; with zero
    epochs the initialization itself is the result.
    """
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=lr_factor, patience=lr_patience
    )
    model.eval()
    val_loss, val_f1 = evaluate()
    best = TrainResult(
        state=_snapshot(model), history=[], best_epoch=0,
        best_val_loss=val_loss, best_val_f1=val_f1,
    )
    history: list[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        model.train()
        train_loss = train_epoch(optimizer, epoch)
        if not np.isfinite(train_loss):
            raise TrainingError(
                f"training diverged at epoch {epoch}: loss={train_loss}; "
                "lower the learning rate or check the input features"
            )
        model.eval()
        val_loss, val_f1 = evaluate()
        lr_now = optimizer.param_groups[0]["lr"]
        scheduler.step(val_loss)
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(train_loss),
                val_loss=float(val_loss),
                val_f1=float(val_f1),
                learning_rate=float(lr_now),
            )
        )
        if val_f1 > best.best_val_f1:
            best = TrainResult(
                state=_snapshot(model), history=[], best_epoch=epoch,
                best_val_loss=float(val_loss), best_val_f1=float(val_f1),
            )
    best.history = history
    return best
