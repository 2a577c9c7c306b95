"""Per-worker error-feedback memory with a low-pass filter on the update.

The memory accumulates the residual between what a worker computed and
what it transmitted; the filter factor beta discounts the incoming
residual, with beta=1 recovering classical error feedback.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_vector, check_same_length


@dataclass(frozen=True)
class ErrorFeedbackMemory:
    values: np.ndarray
    beta: float

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        object.__setattr__(self, "values", as_vector(self.values))

    @classmethod
    def zeros(cls, p: int, beta: float) -> "ErrorFeedbackMemory":
        return cls(values=np.zeros(p, dtype=np.float64), beta=beta)

    @property
    def p(self) -> int:
        return int(self.values.size)


def residual_input(mem: ErrorFeedbackMemory, grad: np.ndarray) -> np.ndarray:
    """Memory plus fresh gradient: the vector actually fed to the compressor."""
    check_same_length(mem.values, grad)
    return mem.values + grad


def update_memory(
    mem: ErrorFeedbackMemory, grad: np.ndarray, transmitted: np.ndarray
) -> ErrorFeedbackMemory:
    """Low-pass filtered residual accumulation:

        m' = (1 - beta) * m + beta * (m + grad - transmitted)

    which is algebraically m + beta * (grad - transmitted). The literal
    two-term form is kept so the stored values match the documented update
    rule; both forms agree to a few ulp.
    """
    check_same_length(mem.values, grad, transmitted)
    b = mem.beta
    new = (1.0 - b) * mem.values + b * (mem.values + grad - transmitted)
    return ErrorFeedbackMemory(values=new, beta=b)
