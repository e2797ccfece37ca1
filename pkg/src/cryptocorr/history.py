from __future__ import annotations

import os
from dataclasses import dataclass, field

import pandas as pd


@dataclass
class TrainHistory:
    """Per-iteration (GBT) or per-epoch (RNN) losses with the early-stopping checkpoint.

    ``checkpoint_iteration`` is an iteration label, not a list position.
    """

    iterations: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    checkpoint_iteration: int = 0

    def record(self, iteration: int, train_loss: float, val_loss: float) -> None:
        self.iterations.append(int(iteration))
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.iterations.index(self.checkpoint_iteration)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iteration": self.iterations, "train_loss": self.train_loss,
                             "val_loss": self.val_loss})

    def write_csv(self, path: str | os.PathLike) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "checkpoint_iteration": self.checkpoint_iteration}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(list(d["iterations"]), list(d["train_loss"]), list(d["val_loss"]),
                   int(d["checkpoint_iteration"]))


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True when training should stop.

    Only strict improvements reset the counter, so ties keep the earlier
    checkpoint. Training stops once ``patience`` consecutive rounds have not
    improved (``patience=0`` stops after the first recorded round).
    """

    def __init__(self, patience: int):
        if patience < 0:
            raise ValueError("patience must be >= 0")
        self.patience = patience
        self.best = float("inf")
        self.best_iteration = None
        self.since_best = 0

    def step(self, iteration: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_iteration = iteration
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience
