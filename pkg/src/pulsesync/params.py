"""Protocol parameters, the refractory threshold schedule, and derived constants.

All durations are 64-bit integer nanoseconds.  Derivations run in exact
rational arithmetic and are quantized at the very end, so the structural
identities (step sum equals the cycle, partition coverage bounds) hold
exactly on the quantized values the runtime actually uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

MODE_BROADCAST = "strong-broadcast"
MODE_RELAY = "relay"
MODES = (MODE_BROADCAST, MODE_RELAY)

# Extra slack, in nanoseconds, added to each quantized age window when the
# drift bound is nonzero.  Clock quantization costs at most a couple of
# ticks per local/real conversion; the pad keeps the window recurrence
# valid on integers under worst-case drift.  At rho == 0 every conversion
# is exact and the windows stay exact too.
_WINDOW_PAD_NS = 16


class ParamsError(ValueError):
    """Base class for parameter rejection."""


class FaultRatioError(ParamsError):
    """Fewer than 3f+1 nodes for f faults."""


class CycleTooShortError(ParamsError):
    """Cycle violates the minimum-length restriction.

    ``min_cycle_ns`` is the smallest admissible integer cycle.
    """

    def __init__(self, message: str, min_cycle_ns: int):
        super().__init__(message)
        self.min_cycle_ns = min_cycle_ns


class RangeError(ParamsError):
    """Argument outside its admissible range."""


@dataclass(frozen=True)
class ProtocolParams:
    """Validated protocol constants.

    ``d`` is the raw end-to-end bound (network delay plus processing) given
    by the deployment.  ``delay`` is the bound the protocol math uses: equal
    to ``d`` under the strong-broadcast network, and ``3*d`` when the
    broadcast property is emulated by a relay primitive, whose delivery
    contract stretches end-to-end latency to 3d.  ``sigma``, the achievable
    pulse tightness, always equals ``delay``.
    """

    n: int
    f: int
    cycle: int          # ideal pulse period, ns
    d: int              # raw end-to-end delay bound, ns
    rho: Fraction       # clock drift bound, dimensionless
    mode: str
    delay: int          # effective delay bound used in all window math, ns
    sigma: int          # pulse tightness target, ns


@dataclass(frozen=True)
class DerivedConstants:
    """Quantities derived from validated parameters.

    ``tau_exact`` is the exact rational age-window table; ``tau_ns`` is the
    integer table the node runtime uses.  The integer table is built
    recursively with ceilings (plus a small pad when rho > 0) so that
    ``tau_ns[k+1] >= tau_ns[k]*(1+rho)/(1-rho) + 2*delay*(1+rho)`` holds on
    the integers, which is what the message-age accounting between a sender
    and a receiver needs.
    """

    tau_exact: tuple[Fraction, ...]   # indices 0..n+3
    tau_ns: tuple[int, ...]           # indices 0..n+3
    cycle_min: Fraction               # shortest legitimate inter-pulse gap
    cycle_max: Fraction               # longest legitimate inter-pulse gap
    cycle_min_ns: int                 # floor(cycle_min)
    cycle_max_ns: int                 # ceil(cycle_max)
    message_decay_ns: int             # tau_ns[n+2]: age at which entries are dropped
    warmup_ns: int                    # cycle_max + sigma + message_decay


@dataclass(frozen=True)
class RefractoryFunction:
    """The per-cycle firing-threshold step schedule.

    ``steps[i-1]`` is the local-clock length of threshold level-step i, for
    i = 1..n+1.  Step n+1 is the absolute refractory period right after a
    pulse, during which the node can never fire.  ``level_starts[k]`` is the
    elapsed-local-time at which level n+1-k begins (so level_starts[0] == 0
    and level_starts[n+1] == cycle, the endogenous firing point).
    """

    n: int
    cycle: int
    steps: tuple[int, ...]
    level_starts: tuple[int, ...]

    def threshold_at(self, elapsed_local: int) -> int:
        return threshold_at(self, elapsed_local)

    def level_start(self, level: int) -> int:
        """Elapsed local time at which ``level`` begins (level n+1 starts at 0)."""
        if not 0 <= level <= self.n + 1:
            raise RangeError(f"level {level} outside 0..{self.n + 1}")
        return self.level_starts[self.n + 1 - level]


@dataclass(frozen=True)
class PropertyReport:
    """Pass/fail record for the structural properties of a step schedule."""

    monotone: bool                 # steps non-increasing over 1..n
    top_step_bound: bool           # top steps exceed the relay slack bound
    step_tightness_bound: bool     # every step exceeds the catch-up bound
    refractory_floor: bool         # absolute refractory period large enough
    sum_is_cycle: bool             # steps sum exactly to the cycle
    partition_coverage: bool       # cluster partition sums cover a full cycle
    details: dict

    @property
    def all_pass(self) -> bool:
        return (self.monotone and self.top_step_bound
                and self.step_tightness_bound and self.refractory_floor
                and self.sum_is_cycle and self.partition_coverage)


def _as_rho(rho) -> Fraction:
    """Canonicalize a drift bound to an exact Fraction.

    Floats go through their shortest decimal repr, so 1e-6 means exactly
    one part per million rather than the nearest binary float.
    """
    if isinstance(rho, Fraction):
        return rho
    if isinstance(rho, int):
        return Fraction(rho)
    if isinstance(rho, float):
        return Fraction(repr(rho))
    if isinstance(rho, str):
        return Fraction(rho)
    raise RangeError(f"unsupported rho type {type(rho).__name__}")


def _drift_ratio_powersum(rho: Fraction, terms: int) -> Fraction:
    """Sum of ((1+rho)/(1-rho))**i for i in 0..terms-1.

    Explicit term count rather than the closed geometric form: the ratio is
    exactly 1 at rho == 0 and the closed form would be 0/0 there.
    """
    r = (1 + rho) / (1 - rho)
    acc = Fraction(0)
    term = Fraction(1)
    for _ in range(terms):
        acc += term
        term *= r
    return acc


def min_cycle_bound(n: int, f: int, delay: int, rho: Fraction) -> Fraction:
    """Exact lower bound that the cycle must strictly exceed.

    Solving the step-tightness requirement for the cycle gives

        cycle > delay * (1-rho^2) * ((1-rho)(f+1) + 2(1+rho) * S)
                / ((1-rho)/(n-f) - 3 rho + rho^2)

    with S the n+3-term drift power sum.  At rho = 0 this reduces to
    delay * (n-f) * (f + 1 + 2(n+3)).
    """
    denom = (1 - rho) / (n - f) - 3 * rho + rho * rho
    if denom <= 0:
        raise RangeError(
            f"drift bound rho={rho} too large for n-f={n - f}: no admissible cycle")
    s = _drift_ratio_powersum(rho, n + 3)
    num = delay * (1 - rho * rho) * ((1 - rho) * (f + 1) + 2 * (1 + rho) * s)
    return num / denom


def validate_params(n: int, f: int, cycle: int, d: int, rho,
                    mode: str = MODE_BROADCAST) -> ProtocolParams:
    """Validate raw parameters and fix the effective delay for the mode.

    Raises FaultRatioError if n < 3f+1, CycleTooShortError if the cycle is
    not strictly above the minimum-length bound (the exception carries the
    smallest admissible integer cycle), and RangeError for out-of-range
    scalars or an unknown mode.
    """
    if mode not in MODES:
        raise RangeError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not isinstance(n, int) or not isinstance(f, int):
        raise RangeError("n and f must be integers")
    if f < 0:
        raise RangeError(f"fault bound must be non-negative, got f={f}")
    if n < 3 * f + 1:
        raise FaultRatioError(f"n={n} < 3f+1={3 * f + 1}: too many faults to tolerate")
    if n < 4:
        raise RangeError(f"need at least 4 nodes, got n={n}")
    if not isinstance(cycle, int) or cycle <= 0:
        raise RangeError(f"cycle must be a positive integer (ns), got {cycle!r}")
    if not isinstance(d, int) or d <= 0:
        raise RangeError(f"d must be a positive integer (ns), got {d!r}")
    rho_f = _as_rho(rho)
    if not 0 <= rho_f < 1:
        raise RangeError(f"rho must lie in [0, 1), got {rho_f}")

    delay = 3 * d if mode == MODE_RELAY else d
    bound = min_cycle_bound(n, f, delay, rho_f)
    if cycle <= bound:
        min_admissible = math.floor(bound) + 1
        raise CycleTooShortError(
            f"cycle={cycle} ns does not exceed the minimum bound; "
            f"smallest admissible cycle is {min_admissible} ns",
            min_cycle_ns=min_admissible)

    return ProtocolParams(n=n, f=f, cycle=cycle, d=d, rho=rho_f, mode=mode,
                          delay=delay, sigma=delay)


def tau(params: ProtocolParams, k: int) -> Fraction:
    """Exact age window for a message whose counter claims k prior inputs.

    tau(k) = 2*delay*(1+rho) * sum_{i=0..k} ((1+rho)/(1-rho))^i, i.e. the
    k+1-term drift power sum; at rho = 0 it degenerates to 2*delay*(k+1).
    Satisfies tau(k+1) = tau(k)*(1+rho)/(1-rho) + 2*delay*(1+rho) exactly.
    """
    if not 0 <= k <= params.n + 3:
        raise RangeError(f"k={k} outside the tabulated range 0..{params.n + 3}")
    return 2 * params.delay * (1 + params.rho) * _drift_ratio_powersum(params.rho, k + 1)


def derive_constants(params: ProtocolParams) -> DerivedConstants:
    n, rho = params.n, params.rho
    tau_exact = tuple(tau(params, k) for k in range(n + 4))

    pad = 0 if rho == 0 else _WINDOW_PAD_NS
    ratio = (1 + rho) / (1 - rho)
    increment = 2 * params.delay * (1 + rho)
    tau_ns = [math.ceil(increment) + pad]
    for _ in range(n + 3):
        tau_ns.append(math.ceil(tau_ns[-1] * ratio + increment) + pad)

    cycle_min = Fraction(n - 2 * params.f, n - params.f) * params.cycle * (1 - rho)
    cycle_max = params.cycle * (1 + rho)
    message_decay = tau_ns[n + 2]
    warmup = math.ceil(cycle_max) + params.sigma + message_decay
    return DerivedConstants(
        tau_exact=tau_exact,
        tau_ns=tuple(tau_ns),
        cycle_min=cycle_min,
        cycle_max=cycle_max,
        cycle_min_ns=math.floor(cycle_min),
        cycle_max_ns=math.ceil(cycle_max),
        message_decay_ns=message_decay,
        warmup_ns=warmup,
    )


def build_ref(params: ProtocolParams) -> RefractoryFunction:
    """Construct the quantized threshold step schedule.

    Exact step lengths:

        top steps   (i = 1..n-f-1):  cycle / ((1-rho)(n-f))
        middle steps (i = n-f..n):   (R_1 - R_{n+1} - rho/(1-rho)*cycle) / (f+1)
        last step   (i = n+1):       2*delay*(1+rho) * n+3-term drift power sum

    Quantization: the top steps and the absolute refractory period are
    rounded up (the partition-coverage and refractory-floor properties are
    tight at these exact values, so rounding down by even 1 ns would break
    them), and the whole rounding residual is folded into the middle steps,
    which carry slack of order ``delay``.  The middle steps are distributed
    as evenly as possible, largest first, so the schedule stays monotone.
    The step sum equals the cycle exactly.
    """
    n, f, cycle, rho = params.n, params.f, params.cycle, params.rho

    top_exact = Fraction(cycle) / ((1 - rho) * (n - f))
    last_exact = 2 * params.delay * (1 + rho) * _drift_ratio_powersum(rho, n + 3)

    top_q = math.ceil(top_exact)
    last_q = math.ceil(last_exact)
    mid_total = cycle - (n - f - 1) * top_q - last_q
    if mid_total < f + 1:
        # Validation guarantees positive middle steps; reaching this means
        # the caller bypassed validate_params.
        raise RangeError("cycle too short for positive middle steps")
    base, extra = divmod(mid_total, f + 1)
    mids = [base + 1] * extra + [base] * (f + 1 - extra)

    steps = tuple([top_q] * (n - f - 1) + mids + [last_q])
    level_starts = [0]
    for i in range(n + 1, 0, -1):
        level_starts.append(level_starts[-1] + steps[i - 1])
    assert level_starts[-1] == cycle
    return RefractoryFunction(n=n, cycle=cycle, steps=steps,
                              level_starts=tuple(level_starts))


def threshold_at(ref: RefractoryFunction, elapsed_local: int) -> int:
    """Current firing threshold level for a given elapsed local time.

    Level n+1 on [0, R_{n+1}), then each level j on a half-open interval
    down to level 0 at exactly the full cycle; the boundary instant belongs
    to the lower level, so a node at a boundary may fire at the new level.
    Past the full cycle the level stays 0 (the node fires endogenously).
    """
    if elapsed_local < 0:
        raise RangeError(f"elapsed_local must be >= 0, got {elapsed_local}")
    if elapsed_local >= ref.cycle:
        return 0
    # level_starts is ascending; find the last start <= elapsed.
    lo, hi = 0, len(ref.level_starts) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ref.level_starts[mid] <= elapsed_local:
            lo = mid
        else:
            hi = mid - 1
    return ref.n + 1 - lo


def absorbance_distance(ref: RefractoryFunction, f: int, cluster_size: int) -> int:
    """Pull-in range of a synchronized cluster of the given size.

    The sum of the ``cluster_size`` step lengths starting at index f+1: if
    a trailing cluster lags a leading cluster of this size by no more than
    this distance, the leading cluster's volley pulls it in.
    """
    if not 1 <= cluster_size <= ref.n - f:
        raise RangeError(
            f"cluster_size={cluster_size} outside 1..{ref.n - f}")
    return sum(ref.steps[g - 1] for g in range(f + 1, f + cluster_size + 1))


def _partitions(total: int, max_part: int | None = None):
    """Yield integer partitions of ``total`` in non-increasing part order."""
    if max_part is None:
        max_part = total
    if total == 0:
        yield ()
        return
    for first in range(min(total, max_part), 0, -1):
        for rest in _partitions(total - first, first):
            yield (first,) + rest


def check_ref_properties(ref: RefractoryFunction, params: ProtocolParams,
                         exhaustive_limit: int = 12) -> PropertyReport:
    """Check the structural properties the correctness argument rests on.

    Partition coverage is checked exhaustively over all integer partitions
    of n-f when n-f <= exhaustive_limit, and through its single-inequality
    reduction ((n-f) * R_i >= cycle/(1-rho) for every top step) always.
    Failures are report entries, never exceptions.
    """
    n, f, rho = params.n, params.f, params.rho
    steps = ref.steps
    cycle = params.cycle
    details: dict = {}

    monotone = all(steps[i - 1] >= steps[i] for i in range(1, n))
    details["monotone_violations"] = [
        i + 1 for i in range(1, n) if steps[i - 1] < steps[i]]

    top_bound = 3 * params.delay + Fraction(2 * rho, 1 - rho * rho) * cycle
    top_ok = all(steps[i] > top_bound for i in range(n - f - 1))
    details["top_step_bound"] = float(top_bound)

    tight_bound = params.sigma * (1 - rho) + Fraction(2 * rho, 1 + rho) * cycle
    tight_ok = all(steps[i] > tight_bound for i in range(n))
    details["step_tightness_bound"] = float(tight_bound)

    floor_exact = 2 * params.delay * (1 + rho) * _drift_ratio_powersum(rho, n + 3)
    floor_ok = steps[n] >= floor_exact
    details["refractory_floor"] = float(floor_exact)

    sum_ok = sum(steps) == cycle
    details["step_sum"] = sum(steps)

    rhs = Fraction(cycle) / (1 - rho)
    reduction_ok = all((n - f) * steps[i] >= rhs for i in range(n - f - 1))
    coverage_ok = reduction_ok
    checked = 0
    if n - f <= exhaustive_limit:
        for parts in _partitions(n - f):
            if len(parts) < 2:
                continue
            checked += 1
            largest = parts[0]
            lhs = sum(steps[g - 1] for g in range(1, largest + 1))
            for size in parts[1:]:
                lhs += sum(steps[g - 1] for g in range(f + 1, f + size + 1))
            if lhs < rhs:
                coverage_ok = False
                details.setdefault("partition_failures", []).append(list(parts))
    details["partitions_checked"] = checked
    details["coverage_reduction_ok"] = reduction_ok

    return PropertyReport(
        monotone=monotone,
        top_step_bound=top_ok,
        step_tightness_bound=tight_ok,
        refractory_floor=floor_ok,
        sum_is_cycle=sum_ok,
        partition_coverage=coverage_ok,
        details=details,
    )
