"""LayerToken accounting, theoretical savings, and the LayerToken LR schedule.

One LayerToken is one token processed by one transformer layer.  With
the first and last layers exempt and every middle layer keeping b_t
tokens, an iteration costs 2s + (l-2)*b_t LayerTokens; a full run costs
2sT + sum_t (l-2)*b_t.  The LayerToken learning-rate schedule measures
warmup and decay progress in this consumed-LayerToken axis instead of
iterations, which reduces to the standard schedule when nothing is
dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .schedule import DropSchedule, kept_length_array


class BudgetError(ValueError):
    """Invalid accounting or learning-rate configuration."""


class DecayShape(Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class LRAxis(Enum):
    ITERATION = "iteration"
    LAYERTOKEN = "layertoken"


@dataclass(frozen=True)
class LRConfig:
    lr_max: float
    lr_min: float = 0.0
    T: int = 1
    T_warmup: int = 0
    decay: DecayShape = DecayShape.COSINE
    axis: LRAxis = LRAxis.ITERATION

    def __post_init__(self):
        if not (0.0 <= self.lr_min <= self.lr_max):
            raise BudgetError(f"need 0 <= lr_min <= lr_max, got "
                              f"{self.lr_min}, {self.lr_max}")
        if not (0 <= self.T_warmup <= self.T):
            raise BudgetError(f"need 0 <= T_warmup <= T, got "
                              f"{self.T_warmup}, {self.T}")


@dataclass(frozen=True)
class LayerTokenLedger:
    """Per-iteration and cumulative LayerToken costs for a whole run.

    cumulative[t] is the consumption of iterations 0..t-1, so it has
    T + 1 entries and cumulative[T] is the run total.
    """

    l: int
    s: int
    per_iter: np.ndarray    # int64, length T
    cumulative: np.ndarray  # int64, length T + 1

    @property
    def T(self) -> int:
        return int(self.per_iter.size)

    @property
    def total(self) -> int:
        return int(self.cumulative[-1])

    @property
    def baseline_total(self) -> int:
        return self.l * self.s * self.T


def layertokens_per_iter(l: int, s: int, b_t: int) -> int:
    """LayerTokens consumed by one iteration: 2s + (l-2)*b_t."""
    if l < 2:
        raise BudgetError(f"need at least 2 layers, got {l}")
    if not (1 <= b_t <= s):
        raise BudgetError(f"need 1 <= b_t <= s, got b_t={b_t}, s={s}")
    return 2 * s + (l - 2) * b_t


def _exempt_count(sched: DropSchedule, l: int) -> int:
    return len([i for i in sched.exempt_layers if 0 <= i < l])


def build_ledger(sched: DropSchedule, l: int, T: int) -> LayerTokenLedger:
    """Ledger for T iterations of `sched` on an l-layer model.

    Generalizes the 2s + (l-2)b_t cost to e full-length layers when the
    exempt set has e entries (the default first/last policy gives e=2).
    """
    if l < 2:
        raise BudgetError(f"need at least 2 layers, got {l}")
    if T < 1:
        raise BudgetError(f"need T >= 1, got {T}")
    e = _exempt_count(sched, l)
    b = kept_length_array(sched, T)
    per_iter = e * sched.s + (l - e) * b
    cumulative = np.zeros(T + 1, dtype=np.int64)
    np.cumsum(per_iter, out=cumulative[1:])
    return LayerTokenLedger(l=l, s=sched.s, per_iter=per_iter,
                            cumulative=cumulative)


def cumulative_layertokens(sched: DropSchedule, l: int, T: int) -> int:
    """Total LayerTokens consumed by iterations 0..T-1."""
    return build_ledger(sched, l, T).total


class SavingFraction(NamedTuple):
    middle_layer: float
    whole_model: float


def saving_fraction(sched: DropSchedule, l: int, T: int) -> SavingFraction:
    """Fractional LayerToken savings versus full-length training.

    middle_layer counts only the layers where dropping applies
    (1 - sum(b_t)/(s*T)); whole_model counts the entire stack
    (1 - total/(l*s*T)).  Both are reported because headline numbers
    in the literature mix the two conventions.
    """
    ledger = build_ledger(sched, l, T)
    b = kept_length_array(sched, T)
    middle = 1.0 - int(b.sum()) / (sched.s * T)
    whole = 1.0 - ledger.total / ledger.baseline_total
    return SavingFraction(middle_layer=middle, whole_model=whole)


def lt_warmup_iterations(sched: DropSchedule, l: int, cfg: LRConfig) -> int:
    """Smallest T_LTwarmup whose cumulative consumption reaches the
    baseline warmup budget s*l*T_warmup.

    The continuous warmup equation rarely has an integer solution, so
    the crossing is resolved at the first iteration meeting the target.
    """
    target = sched.s * l * cfg.T_warmup
    if target == 0:
        return 0
    ledger = build_ledger(sched, l, cfg.T)
    if ledger.total < target:
        raise BudgetError(
            f"warmup budget {target} LayerTokens unreachable within "
            f"T={cfg.T} (run total {ledger.total})")
    return int(np.searchsorted(ledger.cumulative, target, side="left"))


def _decay_factor(p: float, shape: DecayShape) -> float:
    if shape is DecayShape.LINEAR:
        return 1.0 - p
    return 0.5 * (1.0 + math.cos(math.pi * p))


def lr_at(cfg: LRConfig, ledger: LayerTokenLedger, t: int) -> float:
    """Learning rate at iteration t.

    Progress is measured as consumed LayerTokens c(t) before iteration
    t: the true cumulative on the LAYERTOKEN axis, t*l*s on the
    ITERATION axis.  Warmup scales lr_max by c(t)/C_warmup with
    C_warmup = s*l*T_warmup; afterwards the decay shape is applied to
    p = (c(t) - C_warmup) / (C_total - C_warmup).
    """
    if not (0 <= t <= cfg.T):
        raise BudgetError(f"iteration {t} outside [0, {cfg.T}]")
    if cfg.axis is LRAxis.LAYERTOKEN:
        if ledger.T < cfg.T:
            raise BudgetError(f"ledger covers {ledger.T} < T={cfg.T} iterations")
        c = int(ledger.cumulative[t])
        c_total = int(ledger.cumulative[cfg.T])
    else:
        c = t * ledger.l * ledger.s
        c_total = cfg.T * ledger.l * ledger.s
    c_warmup = ledger.s * ledger.l * cfg.T_warmup

    if c < c_warmup:
        return cfg.lr_max * min(1.0, c / c_warmup)
    if c_total <= c_warmup:
        return cfg.lr_max
    p = min(1.0, (c - c_warmup) / (c_total - c_warmup))
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * _decay_factor(p, cfg.decay)


def lr_curve(cfg: LRConfig, ledger: LayerTokenLedger) -> np.ndarray:
    """lr_at evaluated for t = 0..T-1."""
    return np.array([lr_at(cfg, ledger, t) for t in range(cfg.T)])
