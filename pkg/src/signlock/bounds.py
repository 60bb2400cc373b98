"""Closed-form lock-in bounds: the schedule-aware SGD re-entry bound, the
outer-drift re-entry bound, the gap-initialization initial-hit bound, the
expected flip-count bound and the schedule-ordering check."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .numerics import gaussian_cdf
from .trainer.schedules import KINDS, Schedule, schedule_sums


@dataclass(frozen=True)
class SgdBoundParams:
    delta: float
    delta_conf: float
    delta_upd: float
    l_smooth: float
    xi: float
    loss_range: float
    rho: float
    epsilon: float
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"update bound delta must be positive, got {self.delta}")
        if not 0 < self.delta_conf < 1:
            raise ConfigError(f"delta_conf must lie in (0, 1), got {self.delta_conf}")
        if not 0 <= self.delta_upd < 1:
            raise ConfigError(f"delta_upd must lie in [0, 1), got {self.delta_upd}")
        if not self.l_smooth > 0 or self.xi < 0 or self.loss_range < 0:
            raise ConfigError("need l_smooth > 0, xi >= 0 and loss_range >= 0")
        if not self.rho > self.epsilon > 0:
            raise ConfigError(f"need rho > epsilon > 0, got rho={self.rho}, epsilon={self.epsilon}")


@dataclass(frozen=True)
class SgdBound:
    g: float
    B_bar: float
    B: float
    V: float
    a: float
    Lambda: float
    Lambda2: float

    @property
    def valid(self) -> bool:
        """True when the bound is informative (g < 1)."""
        return self.g < 1.0

    @property
    def vacuous_gap(self) -> bool:
        return self.a == 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(valid=self.valid, vacuous_gap=self.vacuous_gap)
        return d


def g_sgd_from_sums(p: SgdBoundParams, Lambda: float, Lambda2: float) -> SgdBound:
    if Lambda < 0 or Lambda2 < 0:
        raise ConfigError("schedule sums must be nonnegative")
    xi2 = p.xi * p.xi
    B_bar = math.sqrt(Lambda * (2.0 * p.loss_range + xi2 * Lambda + p.l_smooth * xi2 * Lambda2))
    B = B_bar / p.delta_conf
    V = xi2 * Lambda2
    a = max((p.rho - p.epsilon) - B, 0.0)
    denom = 2.0 * (V + (2.0 * p.delta / 3.0) * a)
    tail = 1.0 if a == 0.0 else math.exp(-a * a / denom)
    return SgdBound(p.delta_upd + p.delta_conf + tail, B_bar, B, V, a, Lambda, Lambda2)


def g_sgd_bound(p: SgdBoundParams) -> SgdBound:
    Lambda, Lambda2 = schedule_sums(p.schedule)
    return g_sgd_from_sums(p, Lambda, Lambda2)


def g_od_bound(mu: float, rho: float, epsilon: float, delta: float, delta_upd: float = 0.0) -> float:
    """delta_upd + exp(-2 mu (rho - epsilon) / Delta^2)."""
    if mu < 0 or not rho > epsilon or not delta > 0 or not 0 <= delta_upd < 1:
        raise ConfigError("need mu >= 0, rho > epsilon, Delta > 0 and delta_upd in [0, 1)")
    if math.isinf(mu):
        return delta_upd
    return delta_upd + math.exp(-2.0 * mu * (rho - epsilon) / (delta * delta))


def h_gap_bound(sigma: float, a_init: float, b_T: float, delta_upd: float = 0.0) -> float:
    """P[a <= |Z| <= b_T] / P[|Z| >= a] + delta_upd for Z ~ N(0, sigma^2)."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if a_init < 0 or b_T < 0 or not 0 <= delta_upd < 1:
        raise ConfigError("need a_init >= 0, b_T >= 0 and delta_upd in [0, 1)")
    if b_T < a_init:
        return delta_upd
    # both tails computed with erfc to keep precision when a and b are large
    upper_a = gaussian_cdf(-a_init, sigma)
    upper_b = gaussian_cdf(-b_T, sigma) if math.isfinite(b_T) else 0.0
    if upper_a == 0.0:
        return delta_upd
    return (upper_a - upper_b) / upper_a + delta_upd


def b_horizon(epsilon: float, T: int, delta: float) -> float:
    return epsilon + T * delta


def expected_keff_bound(h: float, g: float, T: int, delta_upd: float = 0.0) -> float:
    if not 0 <= h or not 0 <= g < 1:
        raise ConfigError(f"need h >= 0 and 0 <= g < 1, got h={h}, g={g}")
    if T < 0 or delta_upd < 0:
        raise ConfigError("need T >= 0 and delta_upd >= 0")
    return h / (1.0 - g) + T * delta_upd


# ---------------------------------------------------------------------------
# Schedule ordering
# ---------------------------------------------------------------------------

def exp_vs_cos_conditions(gamma: float, N: int) -> tuple[bool, bool]:
    """Sufficient conditions under which exponential decay accumulates at least
    as much step mass (and squared mass) as cosine decay."""
    lin = (N + 1) / 2.0 <= (1.0 - gamma**N) / (1.0 - gamma)
    sq = 3.0 * N / 8.0 + 0.5 <= (1.0 - gamma ** (2 * N)) / (1.0 - gamma**2)
    return lin, sq


@dataclass
class OrderingReport:
    g: dict[str, float]
    bounds: dict[str, SgdBound]
    order: list[str]
    holds: bool
    violations: list[str]
    cos_exp_conditional: bool

    def as_dict(self) -> dict:
        return {
            "g": self.g,
            "order": self.order,
            "holds": self.holds,
            "violations": self.violations,
            "cos_exp_conditional": self.cos_exp_conditional,
            "bounds": {k: b.as_dict() for k, b in self.bounds.items()},
        }


EXPECTED_ORDER = ("warmup_inverse", "warmup_cosine", "warmup_exponential", "constant")


def schedule_order_check(p: SgdBoundParams, schedules: dict[str, Schedule] | None = None) -> OrderingReport:
    """Evaluate the SGD bound per schedule and test inv < cos <= exp < const.

    When the exponential-vs-cosine lemma's conditions fail, a cos > exp
    outcome is reported as conditional rather than as a violation.
    """
    if schedules is None:
        schedules = {k: p.schedule.replace(kind=k) for k in KINDS}
    missing = [k for k in EXPECTED_ORDER if k not in schedules]
    if missing:
        raise ConfigError(f"ordering check needs schedules {missing}")
    shared = {(s.T, s.eta_max, s.T_wu) for s in schedules.values()}
    if len(shared) != 1:
        raise ConfigError("schedules must share T, eta_max and T_wu")
    bounds = {k: g_sgd_bound(SgdBoundParams(**{**vars(p), "schedule": s})) for k, s in schedules.items()}
    g = {k: b.g for k, b in bounds.items()}
    exp_s = schedules["warmup_exponential"]
    conds = exp_vs_cos_conditions(exp_s.gamma, exp_s.N)
    conditional = not all(conds)
    violations = []
    if not g["warmup_inverse"] < g["warmup_cosine"]:
        violations.append("inverse < cosine")
    if not g["warmup_cosine"] <= g["warmup_exponential"] and not conditional:
        violations.append("cosine <= exponential")
    if not g["warmup_exponential"] < g["constant"]:
        violations.append("exponential < constant")
    if bounds["constant"].a == 0.0:
        violations.append("constant schedule has a_T = 0")
    order = sorted(g, key=g.get)
    return OrderingReport(g, bounds, order, not violations, violations, conditional)
