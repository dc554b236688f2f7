"""Validation-loss driven learning-rate plateau schedule and early stopping.

Both are pure state machines: feed one validation loss per epoch, get the
action and the next state back. Replaying a loss trace replays the actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class PlateauState:
    patience: int = 4
    factor: float = 0.1
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    min_lr: float = 0.0


@dataclass(frozen=True)
class EarlyStopState:
    patience: int = 10
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0


def plateau_step(state: PlateauState, val_loss: float, current_lr: float) -> tuple[float, PlateauState]:
    if current_lr <= 0:
        raise ValueError("current_lr must be > 0")
    if val_loss < state.best_val_loss:
        return current_lr, replace(state, best_val_loss=val_loss, epochs_since_improvement=0)
    waited = state.epochs_since_improvement + 1
    if waited >= state.patience:
        return max(current_lr * state.factor, state.min_lr), replace(state, epochs_since_improvement=0)
    return current_lr, replace(state, epochs_since_improvement=waited)


def early_stop_step(state: EarlyStopState, val_loss: float) -> tuple[bool, EarlyStopState]:
    if val_loss < state.best_val_loss:
        return False, replace(state, best_val_loss=val_loss, epochs_since_improvement=0)
    waited = state.epochs_since_improvement + 1
    return waited >= state.patience, replace(state, epochs_since_improvement=waited)


def replay_plateau(val_losses, lr: float, patience: int = 4, factor: float = 0.1) -> list[float]:
    """Learning rate in effect after each epoch of ``val_losses``."""
    state = PlateauState(patience=patience, factor=factor)
    trace = []
    for loss in val_losses:
        lr, state = plateau_step(state, loss, lr)
        trace.append(lr)
    return trace


def replay_early_stop(val_losses, patience: int = 10) -> int | None:
    """1-based epoch at which training stops, or None if it never does."""
    state = EarlyStopState(patience=patience)
    for epoch, loss in enumerate(val_losses, start=1):
        stop, state = early_stop_step(state, loss)
        if stop:
            return epoch
    return None
