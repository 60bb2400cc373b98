"""Learning-rate schedules sharing a linear warmup and differing in the decay tail."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import ConfigError

KINDS = ("constant", "warmup_cosine", "warmup_exponential", "warmup_inverse")


@dataclass(frozen=True)
class Schedule:
    """eta_t for t in [0, T).

    ``constant`` ignores ``T_wu``. The other kinds ramp linearly from 0 over
    ``T_wu`` steps and then decay with k = t - T_wu over N = T - T_wu steps.
    """

    kind: str = "constant"
    eta_max: float = 3e-4
    T: int = 2000
    T_wu: int = 0
    gamma: float = 0.999
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.eta_max) and self.eta_max >= 0):
            raise ConfigError(f"eta_max must be finite and nonnegative, got {self.eta_max}")
        if self.T < 0 or not 0 <= self.T_wu <= self.T:
            raise ConfigError(f"need 0 <= T_wu <= T, got T={self.T}, T_wu={self.T_wu}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.p < 0.5:
            raise ConfigError(f"inverse-decay power must be >= 0.5, got {self.p}")

    @property
    def N(self) -> int:
        return self.T - self.T_wu

    def replace(self, **kw) -> "Schedule":
        fields = dict(vars(self))
        fields.update(kw)
        return Schedule(**fields)


def lr_at(s: Schedule, t: int) -> float:
    if not 0 <= t < s.T:
        raise ConfigError(f"step {t} outside [0, {s.T})")
    if s.kind == "constant":
        return s.eta_max
    if t < s.T_wu:
        return s.eta_max * t / s.T_wu
    k = t - s.T_wu
    if s.kind == "warmup_cosine":
        return s.eta_max * 0.5 * (1.0 + math.cos(math.pi * k / s.N))
    if s.kind == "warmup_exponential":
        return s.eta_max * s.gamma**k
    return s.eta_max * (1.0 + k) ** (-s.p)


def schedule_sums(s: Schedule) -> tuple[float, float]:
    """(sum eta_t, sum eta_t^2) over t = 0..T-1, accumulated with fsum."""
    etas = [lr_at(s, t) for t in range(s.T)]
    return math.fsum(etas), math.fsum(e * e for e in etas)


def cosine_sums_closed_form(eta_max: float, N: int) -> tuple[float, float]:
    """Decay-phase sums of the cosine tail: eta(N+1)/2 and eta^2(3N/8 + 1/2)."""
    if N < 2:
        raise ConfigError("closed form needs N >= 2")
    return eta_max * (N + 1) / 2.0, eta_max**2 * (3.0 * N / 8.0 + 0.5)
