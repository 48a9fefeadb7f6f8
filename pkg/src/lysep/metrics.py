"""Per-iteration log rows, accuracy, and the numerical-abort error."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CSV_HEADER = ("iter", "ce_loss", "surrogate_loss", "train_acc", "test_acc", "elapsed_ms", "min_tau_used")


@dataclass
class IterRecord:
    iter: int
    ce_loss: float
    surrogate_loss: Optional[float] = None
    train_acc: float = math.nan
    test_acc: Optional[float] = None
    elapsed_ms: float = 0.0
    min_tau_used: Optional[float] = None
    # Index of the training subset the row was computed on (mini-batch runs).
    batch_index: int = field(default=0, compare=False)

    def csv_fields(self):
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.iter),
            fmt(self.ce_loss),
            fmt(self.surrogate_loss),
            fmt(self.train_acc),
            fmt(self.test_acc),
            f"{self.elapsed_ms:.3f}",
            fmt(self.min_tau_used),
        ]


class NumericalAbort(RuntimeError):
    """A training run produced a non-finite value.

    ``diagnostics`` names the failing update; ``logs`` holds the rows
    recorded before the failure.
    """

    def __init__(self, message, diagnostics=None, logs=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
        self.logs = list(logs or [])


def accuracy(z, a):
    """Fraction of columns whose argmax matches the one-hot label.

    Ties resolve to the lowest class index (numpy argmax semantics).
    """
    z = np.asarray(z)
    a = np.asarray(a)
    if z.shape != a.shape:
        raise ValueError(f"logits {z.shape} and labels {a.shape} differ in shape")
    return float(np.mean(np.argmax(z, axis=0) == np.argmax(a, axis=0)))


def should_log(k, iters, log_every):
    return k == iters or (log_every > 0 and k % log_every == 0)


def check_finite(name, value, logs, **extra):
    if not np.all(np.isfinite(value)):
        raise NumericalAbort(f"non-finite value in {name}", {"where": name, **extra}, logs)
