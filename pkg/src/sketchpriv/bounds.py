"""Closed-form privacy bounds for deterministic cardinality estimators.

Three families of formulas live here:

* variance lower bounds for any unbiased estimator that is private above a
  minimum cardinality ``N`` (pure, ``delta``-relaxed and average variants);
* the HyperLogLog privacy loss, both per target and averaged over targets;
* Bayesian bookkeeping that turns a privacy loss into a posterior belief.

All logarithms are natural.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from sketchpriv.errors import DomainError
from sketchpriv.sketches import HASH_BITS, P_MAX, P_MIN

# exp() overflows float64 just above this
_MAX_EXP = 709.0


class Regime(enum.Enum):
    PURE = "pure"
    DELTA = "delta"
    AVERAGE = "average"


@dataclass(frozen=True)
class BoundQuery:
    epsilon: float
    min_cardinality: int
    cardinality: int
    delta: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon}")
        if self.min_cardinality < 1:
            raise DomainError("min_cardinality must be >= 1")
        if self.cardinality < self.min_cardinality:
            raise DomainError(
                f"cardinality {self.cardinality} < min_cardinality {self.min_cardinality}"
            )
        if self.delta is not None and not 0 <= self.delta < 0.5:
            raise DomainError(f"delta must lie in [0, 1/2), got {self.delta}")


@dataclass(frozen=True)
class BoundResult:
    variance_bound: float
    std_error_bound: float
    best_k: int
    c: float


def _change_gap(epsilon: float, regime: Regime, delta: float | None) -> float:
    """``1 - c``, kept separate so ``log c`` stays accurate when ``c`` is near 1."""
    if regime is Regime.PURE:
        return math.exp(-epsilon)
    if regime is Regime.DELTA:
        if delta is None:
            raise DomainError("DELTA regime requires delta")
        if not 0 <= delta < 0.5:
            raise DomainError(f"delta must lie in [0, 1/2), got {delta}")
        return (0.5 - delta) * math.exp(-epsilon)
    return math.exp(-4.0 * epsilon) / 4.0


def ignore_constant(epsilon: float, regime: Regime | str = Regime.PURE,
                    delta: float | None = None) -> float:
    """Per-regime constant ``c``: the chance a private sketch changes on add.

    ``c**k`` lower-bounds the probability that ``k * N`` fresh elements are all
    ignored, which is what drives the variance bound.
    """
    return 1.0 - _change_gap(epsilon, Regime(regime), delta)


def _bound_term(log_c: float, k: int, n: int, N: int) -> float:
    slack = n - k * N
    if slack == 0:
        return 0.0
    x = -k * log_c
    if x > _MAX_EXP:
        return math.inf
    # (1 - c^k) / c^k == c^-k - 1
    return math.expm1(x) * slack


def variance_lower_bound(q: BoundQuery, regime: Regime | str = Regime.PURE) -> BoundResult:
    """Largest variance lower bound over integer ``k`` in ``[1, n // N]``.

    Ties resolve to the smallest ``k``.
    """
    regime = Regime(regime)
    gap = _change_gap(q.epsilon, regime, q.delta)
    log_c = math.log1p(-gap)
    n, N = q.cardinality, q.min_cardinality
    best, best_k = -1.0, 1
    for k in range(1, n // N + 1):
        v = _bound_term(log_c, k, n, N)
        if v > best:
            best, best_k = v, k
    best = max(best, 0.0)
    return BoundResult(best, math.sqrt(best) / n, best_k, 1.0 - gap)


def min_std_error_curve(epsilon: float, N: int, n_values: Iterable[int],
                        regime: Regime | str = Regime.PURE,
                        delta: float | None = None) -> list[tuple[int, float, int]]:
    """Rows ``(n, std_error_bound, best_k)`` for the minimum-standard-error curve."""
    rows = []
    for n in n_values:
        r = variance_lower_bound(BoundQuery(epsilon, N, int(n), delta), regime)
        rows.append((int(n), r.std_error_bound, r.best_k))
    return rows


def _check_p(p: int) -> None:
    if not P_MIN <= p <= P_MAX:
        raise DomainError(f"p must be in [{P_MIN}, {P_MAX}], got {p}")


def _log_miss(p: int, n: int, rho: int) -> float:
    """``-log(1 - (1 - 2^(-p-rho))^n)`` evaluated without cancellation."""
    stay = n * math.log1p(-math.ldexp(1.0, -p - rho))  # log of (1-2^(-p-rho))^n
    return -math.log(-math.expm1(stay))


def hll_epsilon_target(p: int, n: int, rho: int) -> float:
    """Worst-case HLL privacy loss for a target whose hash has the given rho."""
    _check_p(p)
    if n < 1:
        raise DomainError("n must be >= 1")
    if not 1 <= rho <= HASH_BITS - p:
        raise DomainError(f"rho must be in [1, {HASH_BITS - p}], got {rho}")
    return _log_miss(p, n, rho)


def hll_epsilon_avg(p: int, n: int, k_max: int | None = None) -> float:
    """Average HLL privacy loss, weighting each rho by its probability 2^-rho.

    The series runs to ``k = 64 - p``, the largest rho a 64-bit hash can
    produce; ``k_max`` overrides that limit (used to measure truncation).
    Treats the universe as infinitely large, so the result is an approximation.
    """
    _check_p(p)
    if n < 1:
        raise DomainError("n must be >= 1")
    limit = HASH_BITS - p if k_max is None else k_max
    return math.fsum(math.ldexp(_log_miss(p, n, k), -k) for k in range(1, limit + 1))


def prob_high_rho_user(n: int, rho: int) -> float:
    """Chance that at least one of ``n`` uniform hashes starts with ``rho`` zeroes.

    Each hash does so with probability ``2**-rho``.
    """
    if n < 1 or rho < 1:
        raise DomainError("n and rho must be >= 1")
    return -math.expm1(n * math.log1p(-math.ldexp(1.0, -rho)))


@dataclass(frozen=True)
class PosteriorQuery:
    prior: float
    epsilon: float

    def __post_init__(self):
        if not 0 < self.prior < 1:
            raise DomainError(f"prior must lie strictly in (0, 1), got {self.prior}")
        if self.epsilon < 0 or math.isnan(self.epsilon):
            raise DomainError("epsilon must be >= 0")


def posterior_from_prior(q: PosteriorQuery | float, epsilon: float | None = None) -> float:
    """Largest posterior reachable when the odds grow by a factor ``e**eps``.

    Accepts a :class:`PosteriorQuery` or ``(prior, epsilon)``.
    """
    if not isinstance(q, PosteriorQuery):
        q = PosteriorQuery(q, epsilon)
    if math.isinf(q.epsilon):
        return 1.0
    log_odds = math.log(q.prior) - math.log1p(-q.prior) + q.epsilon
    if log_odds >= 0:
        return 1.0 / (1.0 + math.exp(-log_odds))
    odds = math.exp(log_odds)
    return odds / (1.0 + odds)


def ignore_prob_to_epsilon(ignore_prob: float) -> float:
    """Privacy loss implied by an ignore probability ``q``: ``-log q``.

    ``q == 0`` means the add always changes the sketch, i.e. unbounded loss.
    """
    if ignore_prob < 0 or ignore_prob > 1 or math.isnan(ignore_prob):
        raise DomainError(f"ignore probability must lie in [0, 1], got {ignore_prob}")
    if ignore_prob == 0:
        return math.inf
    return -math.log(ignore_prob)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def std_error_csv(rows: Sequence[tuple[int, float, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "std_error_bound", "best_k"])
    for n, se, k in rows:
        w.writerow([n, _fmt(se), k])
    return buf.getvalue()


# Two candidate reference levels for plotting the HLL loss: epsilon = 2 and
# epsilon = ln 2. Both columns are emitted; pick whichever the reader needs.
REFERENCE_EPSILONS = {"two": 2.0, "ln2": math.log(2.0)}


def hll_privacy_rows(p_values: Iterable[int], n_values: Sequence[int]) -> list[tuple[int, int, float]]:
    return [(p, n, hll_epsilon_avg(p, n)) for p in p_values for n in n_values]


def hll_privacy_csv(rows: Sequence[tuple[int, int, float]],
                    with_reference: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["p", "n", "epsilon_n"]
    if with_reference:
        header += ["ref_two", "ref_ln2"]
    w.writerow(header)
    for p, n, eps in rows:
        row = [p, n, _fmt(eps)]
        if with_reference:
            row += [_fmt(REFERENCE_EPSILONS["two"]), _fmt(REFERENCE_EPSILONS["ln2"])]
        w.writerow(row)
    return buf.getvalue()
