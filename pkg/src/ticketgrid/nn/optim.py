"""Beta-stabilized AdaGrad.

Per parameter i at step t:

    accum_i(t) = sum_{u<=t} g_i(u)^2
    theta_i(t) = theta_i(t-1) - alpha / sqrt(beta + accum_i(t)) * g_i(t)

The additive constant beta (> 0) bounds every step by alpha/sqrt(beta) and
removes the divide-by-zero of the first update; with beta -> 0 and nonzero
history this reduces to the original AdaGrad rule. The accumulator is kept in
float64 so repeated squaring does not lose small gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdaGradState:
    alpha: float = 0.01
    beta: float = 1.0
    accum: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.accum is not None:
            self.accum = np.asarray(self.accum, dtype=np.float64)


def adagrad_update(theta: np.ndarray, g: np.ndarray, state: AdaGradState) -> np.ndarray:
    """One update step; mutates state.accum, returns the new parameters in
    theta's dtype."""
    if theta.shape != g.shape:
        raise ValueError(f"theta shape {theta.shape} != gradient shape {g.shape}")
    if state.accum is None:
        state.accum = np.zeros(theta.shape, dtype=np.float64)
    elif state.accum.shape != theta.shape:
        raise ValueError(f"accumulator shape {state.accum.shape} != theta shape {theta.shape}")
    g64 = g.astype(np.float64, copy=False)
    state.accum += g64 * g64
    theta64 = theta.astype(np.float64, copy=False)
    new = theta64 - state.alpha * g64 / np.sqrt(state.beta + state.accum)
    return new.astype(theta.dtype, copy=False)
