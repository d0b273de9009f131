"""Kept-length schedules and per-layer random drop plans.

A schedule answers two questions for every training iteration t:
how many tokens the middle layers keep (``kept_length``), and which
token positions each layer keeps (``sample_drop_plan``).  Sampling is
counter-based: the random stream for a (seed, layer, t) triple is
derived by hashing the triple, so plans are reproducible regardless of
the order in which they are requested.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class ScheduleMode(Enum):
    MSLG = "mslg"          # monotonic sequence length growth
    CONSTANT = "constant"  # fixed kept length b0 for the whole run


class ScheduleError(ValueError):
    """Invalid schedule parameters or an invalid sampling request."""


# domain tags keep the hash streams for different purposes disjoint
_DOMAIN_PLAN = 0x706C616E  # "plan"


def _counter_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by hashing the integer tuple.

    Philox is itself counter-based; hashing the key tuple into its
    128-bit key gives an independent, order-free stream per tuple.
    """
    digest = hashlib.blake2b(
        struct.pack(f"<{len(key)}q", *key), digest_size=16
    ).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


@dataclass(frozen=True)
class DropSchedule:
    """Token-dropping policy for one training run.

    s:         full sequence length
    b0:        initial kept length
    s_dec:     growth step in tokens per schedule increment
    t_full:    iteration by which the kept length must reach s
    mode:      MSLG (grow linearly) or CONSTANT (stay at b0)
    exempt_layers: layer indices that always run full length
    keep_special:  never drop caller-designated special positions
    seed:      64-bit seed for plan sampling
    """

    s: int
    b0: int
    s_dec: int = 1
    t_full: int = 1
    mode: ScheduleMode = ScheduleMode.MSLG
    exempt_layers: frozenset[int] = field(default_factory=frozenset)
    keep_special: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.b0 <= self.s):
            raise ScheduleError(f"need 1 <= b0 <= s, got b0={self.b0}, s={self.s}")
        if self.s_dec < 1:
            raise ScheduleError(f"s_dec must be >= 1, got {self.s_dec}")
        if self.t_full < 1:
            raise ScheduleError(f"t_full must be >= 1, got {self.t_full}")
        if self.mode is ScheduleMode.MSLG and self.num_growth_steps > self.t_full:
            # T_dec = t_full / num_growth_steps would be below one iteration
            raise ScheduleError(
                f"growth horizon too short: {self.num_growth_steps} steps of "
                f"{self.s_dec} tokens do not fit in t_full={self.t_full}"
            )
        object.__setattr__(self, "exempt_layers", frozenset(self.exempt_layers))

    @classmethod
    def default_policy(cls, s, b0, s_dec, t_full, num_layers, *,
                       mode=ScheduleMode.MSLG, keep_special=False, seed=0):
        """Schedule with the first and last layers exempt from dropping."""
        if num_layers < 2:
            raise ScheduleError("default exemption policy needs at least 2 layers")
        return cls(s=s, b0=b0, s_dec=s_dec, t_full=t_full, mode=mode,
                   exempt_layers=frozenset({0, num_layers - 1}),
                   keep_special=keep_special, seed=seed)

    @classmethod
    def no_drop(cls, s, num_layers=2, seed=0):
        """Degenerate schedule that keeps every token at every layer."""
        return cls(s=s, b0=s, mode=ScheduleMode.CONSTANT,
                   exempt_layers=frozenset({0, num_layers - 1}), seed=seed)

    @property
    def num_growth_steps(self) -> int:
        """Number of s_dec increments needed to grow from b0 to s."""
        return math.ceil((self.s - self.b0) / self.s_dec)


@dataclass(frozen=True)
class DropPlan:
    """Kept/dropped partition of token positions for one (layer, iteration)."""

    layer: int
    iteration: int
    kept: np.ndarray     # sorted ascending, int64
    dropped: np.ndarray  # sorted ascending, int64

    @property
    def is_full(self) -> bool:
        return self.dropped.size == 0

    @property
    def num_kept(self) -> int:
        return int(self.kept.size)


def kept_length(sched: DropSchedule, t: int) -> int:
    """Kept sequence length b_t at iteration t.

    MSLG grows b by s_dec every T_dec = t_full / ceil((s-b0)/s_dec)
    iterations until b reaches s at t_full; CONSTANT stays at b0.
    The last step is truncated when s_dec does not divide s - b0.
    """
    if t < 0:
        raise ScheduleError(f"iteration must be >= 0, got {t}")
    if sched.mode is ScheduleMode.CONSTANT:
        return sched.b0
    n = sched.num_growth_steps
    # floor(t / T_dec) with T_dec = t_full / n, in exact integer arithmetic
    increments = (t * n) // sched.t_full
    return min(sched.s, sched.b0 + sched.s_dec * increments)


def kept_length_array(sched: DropSchedule, T: int) -> np.ndarray:
    """Vectorized kept_length for t = 0..T-1."""
    if T < 0:
        raise ScheduleError(f"horizon must be >= 0, got {T}")
    t = np.arange(T, dtype=np.int64)
    if sched.mode is ScheduleMode.CONSTANT:
        return np.full(T, sched.b0, dtype=np.int64)
    n = sched.num_growth_steps
    return np.minimum(sched.s, sched.b0 + sched.s_dec * ((t * n) // sched.t_full))


def full_plan(sched: DropSchedule, layer: int, t: int) -> DropPlan:
    """Plan that keeps every position (used for exempt layers)."""
    return DropPlan(layer=layer, iteration=t,
                    kept=np.arange(sched.s, dtype=np.int64),
                    dropped=np.empty(0, dtype=np.int64))


def sample_drop_plan(sched: DropSchedule, layer: int, t: int,
                     special: Iterable[int] = ()) -> DropPlan:
    """Uniformly random kept set of size b_t for one layer at iteration t.

    A pure function of (sched.seed, layer, t): a partial Fisher-Yates
    shuffle driven by the counter-based stream selects b of s positions.
    With keep_special on, `special` positions are always kept and the
    remainder is drawn from the other positions.
    """
    if layer in sched.exempt_layers:
        raise ScheduleError(f"layer {layer} is exempt from dropping")
    b = kept_length(sched, t)
    s = sched.s
    special_arr = np.asarray(sorted(set(special)), dtype=np.int64)
    if special_arr.size and (special_arr[0] < 0 or special_arr[-1] >= s):
        raise ScheduleError("special positions out of range")
    if not sched.keep_special:
        special_arr = np.empty(0, dtype=np.int64)
    if special_arr.size > b:
        raise ScheduleError(
            f"{special_arr.size} special positions exceed kept length {b}")

    if b == s:
        return full_plan(sched, layer, t)

    pool = np.arange(s, dtype=np.int64)
    if special_arr.size:
        pool = np.setdiff1d(pool, special_arr, assume_unique=True)
    take = b - special_arr.size

    rng = _counter_rng(_DOMAIN_PLAN, sched.seed, layer, t)
    n = pool.size
    offsets = rng.integers(0, n - np.arange(take))  # offsets[i] in [0, n-i)
    for i in range(take):
        j = i + offsets[i]
        pool[i], pool[j] = pool[j], pool[i]
    kept = np.sort(np.concatenate([special_arr, pool[:take]]))
    dropped = np.setdiff1d(np.arange(s, dtype=np.int64), kept, assume_unique=True)
    return DropPlan(layer=layer, iteration=t, kept=kept, dropped=dropped)


def plan_iteration(sched: DropSchedule, t: int, num_layers: int,
                   special: Iterable[int] = ()) -> list[DropPlan]:
    """One plan per layer for iteration t.

    Exempt layers receive full-length plans; every other layer draws an
    independent random plan of identical size b_t.
    """
    b = kept_length(sched, t)
    dropping = b < sched.s and any(
        i not in sched.exempt_layers for i in range(num_layers))
    if dropping and num_layers < 3:
        raise ScheduleError(
            f"dropping needs at least 3 layers, got {num_layers}")
    plans = []
    for layer in range(num_layers):
        if layer in sched.exempt_layers or b == sched.s:
            plans.append(full_plan(sched, layer, t))
        else:
            plans.append(sample_drop_plan(sched, layer, t, special))
    return plans


def iterations_for_tokens(tokens: float, batch_size: int, s: int) -> int:
    """Convert a token budget into an iteration count (rounded)."""
    return round(tokens / (batch_size * s))
