"""Adam and the piecewise-constant learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spheremetric.errors import ContractError, NumericalError

PAPER_EPOCHS = 275


@dataclass(frozen=True)
class LrSchedule:
    breakpoints: tuple[int, ...] = (125, 175)
    rates: tuple[float, ...] = (1e-4, 1e-5, 1e-6)

    def __post_init__(self):
        if len(self.rates) != len(self.breakpoints) + 1:
            raise ContractError("schedule needs exactly one more rate than breakpoints")
        if any(b >= a for a, b in zip(self.rates, self.rates[1:])):
            raise ContractError("schedule rates must be strictly decreasing")
        if any(b <= a for a, b in zip(self.breakpoints, self.breakpoints[1:])):
            raise ContractError("schedule breakpoints must be strictly increasing")

    def rescaled(self, epochs: int, reference: int = PAPER_EPOCHS) -> "LrSchedule":
        """Same schedule with breakpoints stretched to a run of ``epochs`` epochs."""
        if epochs == reference:
            return self
        points = tuple(max(1, round(b * epochs / reference)) for b in self.breakpoints)
        # keep breakpoints strictly increasing on very short runs
        fixed = []
        for p in points:
            fixed.append(max(p, fixed[-1] + 1) if fixed else p)
        return LrSchedule(tuple(fixed), self.rates)


def learning_rate_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    for point, rate in zip(schedule.breakpoints, schedule.rates):
        if epoch < point:
            return rate
    return schedule.rates[-1]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update; ``params`` arrays are modified in place."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    if state.clip_norm is not None:
        total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        scale = min(1.0, state.clip_norm / (total + 1e-12))
        grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
