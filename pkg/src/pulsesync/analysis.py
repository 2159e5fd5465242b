"""Trace checkers: the synchrony definitions executed over recorded runs.

All checks are exact scans of recorded events against the protocol's
rational-arithmetic envelope constants; nothing is estimated.  Phase
values are real-time nanoseconds since a node's last pulse, with the
injected initial phases anchoring the time before a node's first recorded
fire.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional

from .params import (DerivedConstants, ProtocolParams, RangeError, build_ref,
                     derive_constants, validate_params)
from .trace import Trace


class AnalysisError(Exception):
    pass


class NotConverged(AnalysisError):
    pass


class InsufficientDetail(AnalysisError):
    pass


@dataclass(frozen=True)
class PulseState:
    """Per-node elapsed real time since the last pulse, at one instant."""

    at_real: int
    phis: dict  # node -> int phase, or None when nothing anchors the node


@dataclass(frozen=True)
class Cluster:
    members: tuple
    first: int
    last: int


@dataclass(frozen=True)
class ClusterPartition:
    at_real: int
    clusters: tuple  # ordered C1, C2, ... per the partition procedure


@dataclass
class TraceContext:
    """Parsed trace plus the constants needed by every checker."""

    params: ProtocolParams
    derived: DerivedConstants
    byzantine: frozenset
    correct: tuple
    chaos_until: int
    measurement_start: int
    t_end: int
    anchors: dict            # node -> virtual last-fire real time
    fires: dict              # node -> sorted fire times (anchor prepended)
    real_fires: dict         # node -> sorted recorded fire times only
    fire_events: list        # [(t, node, counter)] correct fires, ordered
    trace: Trace = field(repr=False, default=None)


def context(trace: Trace) -> TraceContext:
    scn = trace.scenario
    pp = scn["params"]
    params = validate_params(pp["n"], pp["f"], pp["cycle_ns"], pp["d_ns"],
                             pp["rho"], pp["mode"])
    derived = derive_constants(params)
    byz = frozenset(b["id"] for b in scn.get("byzantine", []))
    correct = tuple(i for i in range(params.n) if i not in byz)

    chaos_until = 0
    measurement_start = None
    t_end = None
    anchors = {}
    for rec in trace.records:
        if rec.kind == "epoch":
            chaos_until = rec.payload["chaos_until"]
            measurement_start = rec.payload["measurement_start"]
            t_end = rec.payload["t_end"]
            anchors = {int(k): v
                       for k, v in rec.payload["phase_anchors"].items()}
            break
    if measurement_start is None:
        measurement_start = chaos_until + derived.warmup_ns
    if t_end is None:
        t_end = max((r.t for r in trace.records), default=chaos_until)

    fires = {i: [] for i in correct}
    fire_events = []
    for rec in trace.records:
        if rec.kind == "fire" and rec.node in fires:
            fires[rec.node].append(rec.t)
            fire_events.append((rec.t, rec.node, rec.payload["counter"]))
    anchored = {}
    for i in correct:
        lst = fires[i]
        if i in anchors:
            lst = [anchors[i]] + lst
        anchored[i] = lst
    return TraceContext(params=params, derived=derived, byzantine=byz,
                        correct=correct, chaos_until=chaos_until,
                        measurement_start=measurement_start, t_end=t_end,
                        anchors=anchors, fires=anchored, real_fires=fires,
                        fire_events=fire_events, trace=trace)


# -- pulse states and synchrony ---------------------------------------------


def phase_at(ctx: TraceContext, node: int, t_real: int) -> Optional[int]:
    lst = ctx.fires[node]
    idx = bisect.bisect_right(lst, t_real)
    if idx == 0:
        return None
    return t_real - lst[idx - 1]


def pulse_state_at(ctx: TraceContext, t_real: int) -> PulseState:
    if not ctx.chaos_until <= t_real <= ctx.t_end:
        raise RangeError(f"query time {t_real} outside the trace span")
    return PulseState(at_real=t_real,
                      phis={i: phase_at(ctx, i, t_real) for i in ctx.correct})


def _pair_synchronized(phi_i, phi_j, ago_i, ago_j, sigma, cycle_min,
                       cycle_max) -> bool:
    diff = abs(phi_i - phi_j)
    if diff <= sigma:
        return True
    # wraparound clause: one node just fired while the other is about to;
    # they count as synchronized if they were within sigma one sigma ago
    if cycle_min - sigma <= diff <= cycle_max:
        return (ago_i is not None and ago_j is not None
                and abs(ago_i - ago_j) <= sigma)
    return False


def is_synchronized_set(phis_now: dict, phis_ago: dict,
                        params: ProtocolParams,
                        derived: DerivedConstants) -> bool:
    """Whether the given nodes satisfy the synchronized-set predicate.

    Every phase must be defined and at most the maximum cycle length, and
    every pair must be within sigma, or almost a full cycle apart having
    been within sigma one sigma earlier.
    """
    sigma = params.sigma
    cmin, cmax = derived.cycle_min, derived.cycle_max
    ids = sorted(phis_now)
    for i in ids:
        if phis_now[i] is None or phis_now[i] > cmax:
            return False
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            if not _pair_synchronized(phis_now[i], phis_now[j],
                                      phis_ago.get(i), phis_ago.get(j),
                                      sigma, cmin, cmax):
                return False
    return True


def synchronized_at(ctx: TraceContext, t_real: int) -> bool:
    sigma = ctx.params.sigma
    if t_real - sigma < ctx.chaos_until:
        raise RangeError(
            f"need {sigma} ns of history before {t_real}; trace starts at "
            f"{ctx.chaos_until}")
    now = pulse_state_at(ctx, t_real).phis
    ago = pulse_state_at(ctx, t_real - sigma).phis
    return is_synchronized_set(now, ago, ctx.params, ctx.derived)


# -- cluster partition --------------------------------------------------------


def _first_node(ids, phis, sigma) -> int:
    recent = [i for i in ids if phis[i] <= sigma]
    pool = recent if recent else list(ids)
    top = max(phis[i] for i in pool)
    return min(i for i in pool if phis[i] == top)


def _last_node(ids, phis, sigma) -> int:
    older = [i for i in ids if phis[i] > sigma]
    pool = older if older else list(ids)
    bottom = min(phis[i] for i in pool)
    return max(i for i in pool if phis[i] == bottom)


def partition_clusters(phis_now: dict, phis_ago: dict,
                       params: ProtocolParams, derived: DerivedConstants,
                       at_real: int = 0) -> ClusterPartition:
    """Greedy maximal-synchronized-set partition of the correct nodes.

    Repeatedly extracts a maximum-cardinality synchronized set; ties go to
    the set harboring the first node of the union of all tied sets, then
    to the lexicographically smallest member list.  Cluster 1 is the one
    holding the node with the largest phase; the rest are ordered by
    decreasing first-node phase.
    """
    ids = sorted(phis_now)
    if any(phis_now[i] is None for i in ids):
        raise RangeError("cluster partition needs a defined phase for every node")
    sigma = params.sigma
    cmin, cmax = derived.cycle_min, derived.cycle_max

    index = {node: k for k, node in enumerate(ids)}
    adj = [0] * len(ids)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            if (phis_now[i] <= cmax and phis_now[j] <= cmax
                    and _pair_synchronized(phis_now[i], phis_now[j],
                                           phis_ago.get(i), phis_ago.get(j),
                                           sigma, cmin, cmax)):
                adj[a] |= 1 << b
                adj[b] |= 1 << a

    remaining = list(range(len(ids)))
    groups = []
    while remaining:
        rem_mask = 0
        for k in remaining:
            rem_mask |= 1 << k
        best_size = 0
        best_masks = []
        sub = rem_mask
        # enumerate submasks of the remaining set, keeping maximal cliques
        while sub:
            size = bin(sub).count("1")
            if size >= best_size and _is_clique(sub, adj):
                if size > best_size:
                    best_size = size
                    best_masks = [sub]
                else:
                    best_masks.append(sub)
            sub = (sub - 1) & rem_mask
        union = 0
        for m in best_masks:
            union |= m
        union_ids = [ids[k] for k in range(len(ids)) if union >> k & 1]
        lead = _first_node(union_ids, phis_now, sigma)
        lead_bit = 1 << index[lead]
        candidates = [m for m in best_masks if m & lead_bit] or best_masks
        chosen = min(candidates,
                     key=lambda m: tuple(ids[k] for k in range(len(ids))
                                         if m >> k & 1))
        members = tuple(ids[k] for k in range(len(ids)) if chosen >> k & 1)
        groups.append(members)
        remaining = [k for k in remaining if not chosen >> k & 1]

    clusters = [Cluster(members=g,
                        first=_first_node(list(g), phis_now, sigma),
                        last=_last_node(list(g), phis_now, sigma))
                for g in groups]
    top_phi = max(phis_now[i] for i in ids)
    top_node = min(i for i in ids if phis_now[i] == top_phi)
    head = [c for c in clusters if top_node in c.members]
    rest = [c for c in clusters if top_node not in c.members]
    rest.sort(key=lambda c: (-phis_now[c.first], min(c.members)))
    return ClusterPartition(at_real=at_real, clusters=tuple(head + rest))


def _is_clique(mask: int, adj: list) -> bool:
    m = mask
    while m:
        k = (m & -m).bit_length() - 1
        if mask & ~adj[k] & ~(1 << k):
            return False
        m &= m - 1
    return True


def clusters_at(ctx: TraceContext, t_real: int) -> ClusterPartition:
    now = pulse_state_at(ctx, t_real).phis
    ago = pulse_state_at(ctx, t_real - ctx.params.sigma).phis
    return partition_clusters(now, ago, ctx.params, ctx.derived, t_real)


# -- convergence ---------------------------------------------------------------


def _status_breakpoints(ctx: TraceContext, start: int) -> list:
    """Instants at which the synchronized-state predicate can change value:
    fires (phases reset), fires + sigma (the history clause), and fires +
    cycle_max (a phase outgrowing the allowed maximum)."""
    sigma = ctx.params.sigma
    over = ctx.derived.cycle_max_ns
    pts = {start}
    for t, _node, _c in ctx.fire_events:
        for cand in (t, t + sigma, t + over, t + over + 1):
            if start <= cand <= ctx.t_end:
                pts.add(cand)
    # anchors age out too if a node never fires
    for anchor in ctx.anchors.values():
        for cand in (anchor + over, anchor + over + 1):
            if start <= cand <= ctx.t_end:
                pts.add(cand)
    return sorted(pts)


def detect_convergence(ctx: TraceContext) -> Optional[int]:
    """Earliest measured instant from which the correct nodes form one
    synchronized set continuously to the end of the trace."""
    start = ctx.measurement_start
    if start > ctx.t_end:
        return None
    points = _status_breakpoints(ctx, start)
    converged_at = None
    for t in reversed(points):
        if synchronized_at(ctx, t):
            converged_at = t
        else:
            break
    return converged_at


# -- tightness and rounds --------------------------------------------------------


def group_rounds(ctx: TraceContext, from_t: int) -> list:
    """Group correct fires at/after from_t into pulse rounds.

    Gap-based clustering with threshold cycle_min/2: legitimate inter-fire
    gaps per node are at least cycle_min while a converged round spans at
    most sigma, so rounds are unambiguous after convergence.
    """
    fires = sorted((t, node) for node in ctx.correct
                   for t in ctx.real_fires[node] if t >= from_t)
    threshold = ctx.derived.cycle_min_ns // 2
    rounds = []
    current: list = []
    for t, node in fires:
        if current and t - current[-1][0] > threshold:
            rounds.append(current)
            current = []
        current.append((t, node))
    if current:
        rounds.append(current)
    return rounds


def measure_tightness(ctx: TraceContext, converged_at: Optional[int]) -> dict:
    """Per-round fire spread after convergence.

    Boundary rounds may be truncated by the measurement window; their
    spread is still valid (a subset can only be tighter) but per-node fire
    counts are only asserted on interior rounds.
    """
    if converged_at is None:
        raise NotConverged("trace never reached a synchronized state")
    rounds = group_rounds(ctx, converged_at)
    spreads = [r[-1][0] - r[0][0] for r in rounds]
    complexity_ok = True
    bad_rounds = []
    for r in rounds[1:-1]:
        counts = {}
        for _t, node in r:
            counts[node] = counts.get(node, 0) + 1
        if sorted(counts) != list(ctx.correct) or any(
                v != 1 for v in counts.values()):
            complexity_ok = False
            bad_rounds.append(r[0][0])
    return {
        "rounds": len(rounds),
        "spreads": spreads,
        "max_spread": max(spreads) if spreads else 0,
        "sigma": ctx.params.sigma,
        "tightness_ok": all(s <= ctx.params.sigma for s in spreads),
        "one_fire_per_node_ok": complexity_ok,
        "bad_rounds": bad_rounds,
    }


# -- cycle bounds -----------------------------------------------------------------


def check_cycle_bounds(ctx: TraceContext, from_t: int) -> dict:
    """Every correct node's inter-fire gap starting at/after from_t must
    lie within [cycle_min, cycle_max]; a node silent for longer than
    cycle_max before the trace end is a missed fire."""
    cmin, cmax = ctx.derived.cycle_min, ctx.derived.cycle_max
    violations = []
    for node in ctx.correct:
        real_fires = ctx.real_fires[node]
        for a, b in zip(real_fires, real_fires[1:]):
            if a < from_t:
                continue
            gap = b - a
            if gap < cmin:
                violations.append({"node": node, "kind": "short_cycle",
                                   "from": a, "to": b, "gap": gap})
            elif gap > cmax:
                violations.append({"node": node, "kind": "long_cycle",
                                   "from": a, "to": b, "gap": gap})
        tail_from = [t for t in real_fires if t >= from_t]
        if tail_from and ctx.t_end - tail_from[-1] > cmax:
            violations.append({"node": node, "kind": "missed_fire",
                               "from": tail_from[-1], "to": ctx.t_end,
                               "gap": ctx.t_end - tail_from[-1]})
    return {"violations": violations, "ok": not violations,
            "cycle_min_ns": ctx.derived.cycle_min_ns,
            "cycle_max_ns": ctx.derived.cycle_max_ns}


# -- message assessment properties -------------------------------------------------


def check_summation_properties(ctx: TraceContext) -> dict:
    """Verify the assessment guarantees on correct-to-correct traffic.

    P1: every such message sent in the measured window is assessed timely
    within the delay bound of its send instant.  P2: right after the
    assessment the receiver's counter exceeds the message's counter.
    Plus the counter envelope: measured correct fires carry counters of at
    most n-1, and no recorded counter ever exceeds n.
    """
    trace = ctx.trace
    detail = trace.scenario.get("trace_detail", 2)
    if detail < 1:
        raise InsufficientDetail(
            "assessment records require trace_detail >= fires+deliveries")
    delay = ctx.params.delay
    start = ctx.measurement_start
    correct = set(ctx.correct)

    deliveries = {}
    assessed = {}
    for rec in trace.records:
        if rec.kind == "deliver":
            if rec.payload["sender"] in correct and rec.node in correct:
                deliveries[(rec.payload["msg_id"], rec.node)] = rec
        elif rec.kind == "assess":
            key = (rec.payload["msg_id"], rec.node)
            if key not in assessed:
                assessed[key] = rec

    p1_violations = []
    p2_violations = []
    for key, dl in sorted(deliveries.items()):
        send_t = dl.payload["send_t"]
        if send_t < start or send_t + delay > ctx.t_end:
            continue
        asr = assessed.get(key)
        if asr is None:
            p1_violations.append({"msg_id": key[0], "receiver": key[1],
                                  "send_t": send_t, "reason": "never_assessed"})
            continue
        if asr.payload["verdict"] != "timely":
            p1_violations.append({"msg_id": key[0], "receiver": key[1],
                                  "send_t": send_t,
                                  "reason": asr.payload["reason"]})
            continue
        if asr.t - send_t > delay:
            p1_violations.append({"msg_id": key[0], "receiver": key[1],
                                  "send_t": send_t, "assess_t": asr.t,
                                  "reason": "late"})
        if asr.payload["counter_after"] <= dl.payload["counter"]:
            p2_violations.append({"msg_id": key[0], "receiver": key[1],
                                  "counter": dl.payload["counter"],
                                  "counter_after": asr.payload["counter_after"]})

    fire_counter_violations = [
        {"node": node, "t": t, "counter": c}
        for t, node, c in ctx.fire_events
        if t >= start and c > ctx.params.n - 1]
    counter_cap_violations = [
        {"node": rec.node, "t": rec.t, "counter": rec.payload["counter_after"]}
        for rec in trace.records if rec.kind == "assess"
        and rec.payload["counter_after"] > ctx.params.n]

    ok = not (p1_violations or p2_violations or fire_counter_violations
              or counter_cap_violations)
    return {"ok": ok,
            "messages_checked": len(deliveries),
            "p1_violations": p1_violations,
            "p2_violations": p2_violations,
            "fire_counter_violations": fire_counter_violations,
            "counter_cap_violations": counter_cap_violations}


# -- whole-trace report --------------------------------------------------------------


def analyze(trace: Trace) -> dict:
    """Full analysis report for one trace."""
    ctx = context(trace)
    converged_at = detect_convergence(ctx)
    cmax = ctx.derived.cycle_max_ns
    report = {
        "scenario": trace.scenario,
        "measurement_start": ctx.measurement_start,
        "t_end": ctx.t_end,
        "converged": converged_at is not None,
        "converged_at": converged_at,
    }
    if converged_at is not None:
        report["convergence_cycles"] = (converged_at - ctx.measurement_start) / cmax
        report["tightness"] = measure_tightness(ctx, converged_at)
        report["cycle_bounds"] = check_cycle_bounds(ctx, converged_at)
        try:
            report["summation"] = check_summation_properties(ctx)
        except InsufficientDetail:
            report["summation"] = None
        ok = (report["tightness"]["tightness_ok"]
              and report["tightness"]["one_fire_per_node_ok"]
              and report["cycle_bounds"]["ok"]
              and (report["summation"] is None or report["summation"]["ok"]))
        report["ok"] = ok
    else:
        report["ok"] = False
    return report
