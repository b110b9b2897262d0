"""Membership-inference attacks against distinct-count sketches.

The basic oracle is *add-and-check*: add the target to a sketch and see
whether the sketch changes.  A change proves the target was absent; no change
raises the odds that it was present by ``1 / q``, where ``q`` is the chance a
sketch that does not contain the target ignores it anyway.

Simulations derive every element from its (cardinality, sketch, index)
coordinates and push it through the keyed hash, so the hash acts as a
counter-based generator: any worker can rebuild any sketch on its own, and
results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from sketchpriv import sketches as sk
from sketchpriv.bounds import ignore_prob_to_epsilon, posterior_from_prior
from sketchpriv.errors import DomainError, UnknownKey, UnknownSketch
from sketchpriv.sketches import Algo, HashValue, Salt, Sketch

PERCENTILES = (("0.1", 0.1), ("1", 1.0), ("10", 10.0), ("50", 50.0), ("100", 100.0))

DESK_TARGETS, DESK_SKETCHES = 500, 200
DESK_CARDINALITIES = (1_000, 10_000)
FULL_TARGETS, FULL_SKETCHES = 10_000, 1_000
FULL_CARDINALITIES = (1_000, 10_000, 100_000, 1_000_000)

MIN_TARGETS = MIN_SKETCHES = 100


# --- add-and-check -----------------------------------------------------------


def analytic_ignore_prob(sketch: Sketch, target_hash: HashValue, n: float | None = None) -> float:
    """Chance that a random sketch of ``n`` other elements ignores the target.

    ``n`` defaults to the sketch's own estimate.  For register sketches the
    target is ignored when its bucket already holds a value >= its rho, which
    a single element achieves with probability ``2**-(p + rho - 1)``.
    """
    if n is None:
        n = sk.estimate(sketch)
    if n <= 0:
        return 0.0
    bits = target_hash.bits
    if sketch.algo == Algo.KMV:
        if len(sketch.state) < sketch.param:
            return 0.0
        return 1.0 - (sketch.state[-1] + 1) / sk.HASH_SPACE
    if sketch.algo == Algo.PCSA:
        b = sketch.param.bit_length() - 1
        rho = min(target_hash.rho(b), sk.PCSA_BITMAP_BITS)
        if rho == sk.PCSA_BITMAP_BITS:
            single = math.ldexp(1.0, -b - rho + 1)
        else:
            single = math.ldexp(1.0, -b - rho)
        return -math.expm1(n * math.log1p(-single))
    p = sketch.param
    rho = HashValue(bits).rho(p)
    single = math.ldexp(1.0, -p - rho + 1)
    return -math.expm1(n * math.log1p(-single))


@dataclass(frozen=True)
class MembershipVerdict:
    changed: bool
    posterior: float
    ignore_prob: float

    @property
    def likely_member(self) -> bool:
        return not self.changed


def membership_attack(sketch: Sketch, target: bytes, salt: Salt, prior: float,
                      ignore_prob: float | None = None,
                      verify_salt: bool = True) -> MembershipVerdict:
    """Add-and-check attack on one sketch.

    ``verify_salt=False`` models an attacker who hashes with her own guess of
    the salt and pokes the sketch regardless of its fingerprint.
    """
    if not 0 < prior < 1:
        raise DomainError(f"prior must lie strictly in (0, 1), got {prior}")
    if verify_salt:
        sk._check_salt(sketch, salt)
    h = sk.hash_element(target, salt)
    changed = sk._add_hash(sketch, h.bits) != sketch
    q = analytic_ignore_prob(sketch, h) if ignore_prob is None else ignore_prob
    if changed:
        return MembershipVerdict(True, 0.0, q)
    return MembershipVerdict(False, posterior_from_prior(prior, ignore_prob_to_epsilon(q)), q)


def salt_mitigation_experiment(trials: int = 500, prior: float = 0.5, n: int = 1000,
                               p: int = 9, seed: int = 0,
                               attacker_salt: Salt | None = None) -> dict:
    """Empirical posterior ``P[t in E | unchanged]`` for a salt-guessing attacker.

    Each trial builds one HLL sketch and probes it with a member and a
    non-member target.  With the right salt members are never changed, so the
    posterior climbs well above the prior; with a wrong salt the probe is
    independent of membership and the posterior stays at the prior.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if not 0 < prior < 1:
        raise DomainError("prior must lie strictly in (0, 1)")
    victim = Salt.from_seed(seed)
    if attacker_salt is None:
        attacker_salt = Salt.from_seed(seed ^ 0x5A5A5A5A5A5A5A5A)
    if attacker_salt.fingerprint == victim.fingerprint:
        raise DomainError("attacker salt must differ from the victim salt")
    unchanged_in = unchanged_out = 0
    for i in range(trials):
        elems = [b"v|%d|%d" % (i, j) for j in range(n)]
        m = sk.build(Algo.HLL, p, elems, victim)
        member, outsider = elems[0], b"o|%d" % i
        for target, is_member in ((member, True), (outsider, False)):
            h = sk.hash_element(target, attacker_salt).bits
            if sk._add_hash(m, h) == m:
                if is_member:
                    unchanged_in += 1
                else:
                    unchanged_out += 1
    a, b = unchanged_in / trials, unchanged_out / trials
    if a == 0 and b == 0:
        posterior = prior
    else:
        posterior = prior * a / (prior * a + (1 - prior) * b)
    return {
        "trials": trials,
        "prior": prior,
        "unchanged_member_rate": a,
        "unchanged_outsider_rate": b,
        "posterior": posterior,
    }


# --- Monte-Carlo ignore probabilities ---------------------------------------


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


@dataclass
class IgnoreReport:
    p: int
    cardinalities: list[int]
    num_targets: int
    num_sketches: int
    seed: int
    table: dict[int, dict[str, float]]
    target_rho: np.ndarray = field(repr=False)
    target_bucket: np.ndarray = field(repr=False)
    # per cardinality: how many sketches ignored each target
    ignore_counts: dict[int, np.ndarray] = field(repr=False)

    def fractions(self, n: int) -> np.ndarray:
        return self.ignore_counts[n] / self.num_sketches

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cardinality", "percentile_label", "ignore_fraction"])
        for n in self.cardinalities:
            for label, _ in PERCENTILES:
                w.writerow([n, label, f"{self.table[n][label]:.9g}"])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": {
                "p": self.p,
                "cardinalities": self.cardinalities,
                "num_targets": self.num_targets,
                "num_sketches": self.num_sketches,
                "seed": self.seed,
                "percentile": "nearest-rank",
            },
            "table": {str(n): self.table[n] for n in self.cardinalities},
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _sketch_registers(p: int, n: int, index: int, salt: Salt) -> np.ndarray:
    elems = (b"s|%d|%d|%d" % (n, index, i) for i in range(n))
    m = sk.add_hashes(sk.empty(Algo.HLL, p, salt), sk.hash_many(elems, salt))
    return np.frombuffer(m.state, dtype=np.uint8)


def simulate_ignore_probabilities(p: int = 15,
                                  cardinalities: Sequence[int] = DESK_CARDINALITIES,
                                  num_targets: int = DESK_TARGETS,
                                  num_sketches: int = DESK_SKETCHES,
                                  seed: int = 0, threads: int = 1) -> IgnoreReport:
    """Estimate, per target, how often random HLL sketches ignore it.

    Targets and sketch elements come from disjoint namespaces, so no target
    is ever a member.  Output is identical for any ``threads`` value.
    """
    if not sk.P_MIN <= p <= sk.P_MAX:
        raise DomainError(f"p must be in [{sk.P_MIN}, {sk.P_MAX}]")
    if num_targets < MIN_TARGETS or num_sketches < MIN_SKETCHES:
        raise DomainError(f"need >= {MIN_TARGETS} targets and >= {MIN_SKETCHES} sketches")
    cards = [int(n) for n in cardinalities]
    if not cards or min(cards) < 1:
        raise DomainError("cardinalities must be positive")
    seed &= sk.MASK64
    salt = Salt.from_seed(seed)
    t_hashes = sk.hash_many((b"t|%d" % j for j in range(num_targets)), salt)
    t_bucket, t_rho = sk.bucket_rho(t_hashes, p)

    table, counts = {}, {}
    for n in cards:
        def work(index: int, n=n) -> np.ndarray:
            regs = _sketch_registers(p, n, index, salt)
            return regs[t_bucket] >= t_rho

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(work, range(num_sketches)))
        else:
            rows = [work(i) for i in range(num_sketches)]
        c = np.sum(rows, axis=0, dtype=np.int64)
        counts[n] = c
        frac = np.sort(c / num_sketches)
        table[n] = {label: nearest_rank(frac, pct) for label, pct in PERCENTILES}
    return IgnoreReport(p, cards, num_targets, num_sketches, seed, table,
                        t_rho, t_bucket, counts)


# --- intersection attacks -----------------------------------------------------


@dataclass(frozen=True)
class IntersectionFinding:
    """What several sketches that share one element reveal about it.

    ``candidate_constraints`` holds candidate hashes for KMV, ``(bucket,
    max_rho)`` pairs for LogLog/HLL (the element sits in one of these buckets
    with rho at most ``max_rho``), and ``(bucket, rho)`` pairs for PCSA.
    """

    algo: Algo
    num_sketches_used: int
    candidate_constraints: frozenset
    contains_target: bool | None = None

    @property
    def candidate_count(self) -> int:
        """Number of hash values (KMV) or (bucket, rho) cells still possible."""
        if self.algo in (Algo.LOGLOG, Algo.HLL):
            return sum(r for _, r in self.candidate_constraints)
        return len(self.candidate_constraints)


def intersection_attack(sketches: Sequence[Sketch],
                        true_target_hash: HashValue | int | None = None) -> IntersectionFinding:
    if len(sketches) < 2:
        raise DomainError("intersection needs at least two sketches")
    first = sketches[0]
    for other in sketches[1:]:
        sk.check_mergeable(first, other)
    if isinstance(true_target_hash, int):
        true_target_hash = HashValue(true_target_hash)

    algo = first.algo
    if algo == Algo.KMV:
        common = set(first.state)
        for s in sketches[1:]:
            common &= set(s.state)
        constraints = frozenset(common)
        hit = None if true_target_hash is None else true_target_hash.bits in common
    elif algo == Algo.PCSA:
        maps = list(first.state)
        for s in sketches[1:]:
            maps = [a & b for a, b in zip(maps, s.state)]
        constraints = frozenset(
            (b, r + 1) for b, bm in enumerate(maps) for r in range(sk.PCSA_BITMAP_BITS) if bm >> r & 1
        )
        hit = None
        if true_target_hash is not None:
            hit = _pcsa_cell(true_target_hash, first.param) in constraints
    else:
        regs = np.min(np.stack([np.frombuffer(s.state, dtype=np.uint8) for s in sketches]), axis=0)
        constraints = frozenset((int(b), int(regs[b])) for b in np.flatnonzero(regs))
        hit = None
        if true_target_hash is not None:
            b, r = true_target_hash.bucket(first.param), true_target_hash.rho(first.param)
            hit = bool(regs[b] >= r and regs[b] > 0)
    return IntersectionFinding(algo, len(sketches), constraints, hit)


def _pcsa_cell(h: HashValue, k: int) -> tuple[int, int]:
    b = k.bit_length() - 1
    return h.bucket(b), min(h.rho(b), sk.PCSA_BITMAP_BITS)


def intersection_sweep(sketches: Sequence[Sketch], counts: Sequence[int] = (2, 4, 8, 16),
                       true_target_hash: HashValue | int | None = None) -> list[IntersectionFinding]:
    """Intersect growing prefixes of ``sketches``."""
    return [intersection_attack(sketches[:c], true_target_hash) for c in counts if c <= len(sketches)]


# --- attacks through a merge/estimate-only API ---------------------------------


class SketchServiceHandle(Protocol):
    def ingest(self, dimension: str, period: str, elements: Sequence[bytes],
               algo: str | None = None, param: int | None = None,
               overwrite: bool = False) -> object: ...

    def estimate(self, keys: Sequence[tuple[str, str]], rounding: int | None = None) -> dict: ...


@dataclass(frozen=True)
class ExternalAttackResult:
    guess: bool
    estimates: tuple[float, float]


def probe_key(target: bytes, period: str) -> tuple[str, str]:
    tag = hashlib.blake2b(target, digest_size=6).hexdigest()
    return f"probe-{tag}", period


def external_api_attack(service: SketchServiceHandle, sketch_id: tuple[str, str],
                        target: bytes, rounding: int = 1) -> ExternalAttackResult:
    """Impersonate ``target`` and compare ``estimate(M)`` with ``estimate(merge(M, {t}))``.

    Guesses membership when the two (rounded) estimates agree.
    """
    if isinstance(target, str):
        target = target.encode("utf-8")
    dimension, period = sketch_id
    probe = probe_key(target, period)
    try:
        base = service.estimate([sketch_id], rounding=rounding)
    except UnknownKey as exc:
        raise UnknownSketch(f"no sketch stored under {sketch_id!r}") from exc
    service.ingest(probe[0], probe[1], [target], overwrite=True)
    merged = service.estimate([sketch_id, probe], rounding=rounding)
    a, b = float(base["estimate"]), float(merged["estimate"])
    return ExternalAttackResult(a == b, (a, b))


def rounding_sweep(service: SketchServiceHandle, roundings: Sequence[int] = (1, 10, 100),
                   n: int = 1000, trials: int = 100, seed: int = 0,
                   dimension: str = "victim") -> dict[int, float]:
    """Attack accuracy per rounding granularity on a balanced member/non-member set.

    Victim sketches are ingested once and reused for every granularity.
    """
    cases = []
    for i in range(trials):
        period = f"{2000 + i // 365:04d}-01-01"
        elems = [b"u|%d|%d|%d" % (seed, i, j) for j in range(n)]
        dim = f"{dimension}{i}"
        service.ingest(dim, period, elems, overwrite=True)
        cases.append(((dim, period), elems[0], True))
        cases.append(((dim, period), b"x|%d|%d" % (seed, i), False))
    accuracy = {}
    for r in roundings:
        correct = sum(external_api_attack(service, key, t, r).guess == member
                      for key, t, member in cases)
        accuracy[r] = correct / len(cases)
    return accuracy
