"""Deterministic adversarial discrete-event simulator.

One simulation is a pure function of (scenario, seed): every random draw
comes from a named substream of the master seed, all arithmetic is exact
integer/rational, and simultaneous events are ordered by a fixed priority
(node timers, then deliveries, then adversary steps) plus a global push
sequence number.  Two runs of the same scenario produce byte-identical
traces.

Self-stabilization is quantified over states at coherence start, so the
incoherent epoch is realized as state injection: at ``chaos_until`` every
correct node receives an arbitrary phase (and optionally arbitrary message
pools), and the coherent phase is simulated from there with at most f
Byzantine senders and the delivery-window invariants enforced by
construction.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from . import network
from .params import (DerivedConstants, ProtocolParams, RefractoryFunction,
                     RangeError, build_ref, derive_constants)
from .protocol import FireMessage, Node
from .rng import Stream, substream
from .trace import KIND_MIN_DETAIL, Trace, TraceRecord

PPB_DEN = 10 ** 9          # clock rates are exact rationals over 1e9
_QUANT_GUARD_NS = 4        # covers floor/ceil slop in clock conversions

DEFAULT_MAX_EVENTS = 20_000_000

_PRIO_TIMER = 0
_PRIO_DELIVERY = 1
_PRIO_ADVERSARY = 2


class ScenarioInvalid(ValueError):
    pass


class EventOverflow(RuntimeError):
    """The event queue blew past its cap: runaway adversary configuration."""


class Clock:
    """Drifting local clock: local(t) = floor(rate * (t - offset)).

    ``rate`` is the exact rational ppb/1e9, fixed for the node's lifetime.
    """

    __slots__ = ("ppb", "offset")

    def __init__(self, ppb: int, offset: int = 0):
        self.ppb = ppb
        self.offset = offset

    def rate(self) -> Fraction:
        return Fraction(self.ppb, PPB_DEN)

    def local(self, t_real: int) -> int:
        if t_real < self.offset:
            raise RangeError(f"real time {t_real} precedes clock origin")
        return self.ppb * (t_real - self.offset) // PPB_DEN

    def to_real(self, local: int) -> int:
        """Earliest integer real time whose local reading is >= local."""
        if local < 0:
            raise RangeError(f"local time {local} negative")
        return self.offset + -(-local * PPB_DEN // self.ppb)


def local_to_real(clock: Clock, local: int) -> int:
    return clock.to_real(local)


def real_to_local(clock: Clock, t_real: int) -> int:
    return clock.local(t_real)


@dataclass
class Scenario:
    """A normalized, engine-facing scenario description."""

    params: ProtocolParams
    seed: int
    duration_cycles: int
    byzantine: tuple = ()            # ((node_id, strategy_kind, config), ...)
    initial_state: object = "synchronized"   # or "random_phases",
    #   "adversarial_pools", or {"phases": {node_id: elapsed_local_ns}}
    chaos_until: int = 0
    clock_ppb: object = None         # None (sample), "extremes", or list[int]
    trace_detail: int = 2
    delays: str = "uniform"          # or "constant" (worst case)

    def correct_ids(self) -> tuple[int, ...]:
        byz = {b[0] for b in self.byzantine}
        return tuple(i for i in range(self.params.n) if i not in byz)


@dataclass
class _Run:
    scenario: Scenario
    params: ProtocolParams
    ref: RefractoryFunction
    derived: DerivedConstants
    clocks: dict
    nodes: dict
    records: list = field(default_factory=list)
    fires: list = field(default_factory=list)
    seq: int = 0
    msg_seq: int = 0


def _ppb_range(params: ProtocolParams, ref: RefractoryFunction,
               derived: DerivedConstants) -> tuple[int, int]:
    """Admissible clock-rate range, in ppb.

    Rates live inside the drift bound [1-rho, 1+rho], further clipped so
    that, after integer-tick quantization, the realizable inter-pulse gaps
    respect the nominal envelope exactly:

      * slow end: a full endogenous cycle on the slowest clock must not
        exceed cycle * (1+rho) real time;
      * fast end: the shortest fault-induced cycle (threshold level f
        reached with f forged inputs) on the fastest clock must not fall
        below the nominal minimum cycle length.

    Both clips are second-order in rho (the envelope constants themselves
    are first-order approximations of the exact drift algebra) plus a few
    nanoseconds of quantization guard.
    """
    p = params
    if p.rho == 0:
        return PPB_DEN, PPB_DEN
    slow_floor = -(-p.cycle * PPB_DEN // (math.floor(derived.cycle_max)
                                          - _QUANT_GUARD_NS))
    lo = max(slow_floor, math.floor((1 - p.rho) * PPB_DEN) + 1)
    shortest_local = ref.level_start(max(p.f, 1))
    fast_cap = math.floor(Fraction(shortest_local * PPB_DEN)
                          / (derived.cycle_min + _QUANT_GUARD_NS))
    hi = min(fast_cap, math.floor((1 + p.rho) * PPB_DEN))
    if hi < lo:
        hi = lo
    return lo, hi


def _resolve_clocks(scn: Scenario, ref, derived) -> dict:
    lo, hi = _ppb_range(scn.params, ref, derived)
    n = scn.params.n
    spec = scn.clock_ppb
    if spec is None:
        stream = substream(scn.seed, "clock")
        ppbs = [lo + stream.randint(0, hi - lo) for _ in range(n)]
    elif spec == "extremes":
        ppbs = [hi if i % 2 == 0 else lo for i in range(n)]
    else:
        ppbs = list(spec)
        if len(ppbs) != n:
            raise ScenarioInvalid(f"clock_ppb must list {n} rates")
        for ppb in ppbs:
            if not isinstance(ppb, int) or not (1 - scn.params.rho) * PPB_DEN \
                    <= ppb <= (1 + scn.params.rho) * PPB_DEN:
                raise ScenarioInvalid(
                    f"clock rate {ppb} ppb outside the drift bound")
    return {i: Clock(ppbs[i]) for i in range(n)}


def inject_arbitrary_state(scn: Scenario, ref: RefractoryFunction,
                           derived: DerivedConstants) -> dict:
    """Initial (elapsed_local, pools) per correct node.

    random_phases draws the elapsed time since the (virtual) last pulse
    uniformly over [0, cycle]; adversarial_pools additionally fills the
    message pools with arbitrary stored messages no older than the decay
    horizon and sets the counter accordingly.  Explicit phases come from
    {"phases": {node: elapsed_ns}}.
    """
    p = scn.params
    out = {}
    spec = scn.initial_state
    for i in scn.correct_ids():
        stream = substream(scn.seed, f"init:{i}")
        if spec == "synchronized":
            elapsed = 0
            pools = ({}, {}, {})
        elif spec == "random_phases":
            elapsed = stream.randint(0, p.cycle)
            pools = ({}, {}, {})
        elif spec == "adversarial_pools":
            elapsed = stream.randint(0, p.cycle)
            pools = _random_pools(p, derived, stream)
        elif isinstance(spec, dict) and "phases" in spec:
            phases = spec["phases"]
            elapsed = int(phases.get(i, phases.get(str(i), 0)))
            if not 0 <= elapsed <= p.cycle:
                raise ScenarioInvalid(
                    f"initial phase {elapsed} for node {i} outside [0, cycle]")
            pools = ({}, {}, {})
        else:
            raise ScenarioInvalid(f"unknown initial_state {spec!r}")
        out[i] = (elapsed, pools)
    return out


def _random_pools(p: ProtocolParams, derived: DerivedConstants,
                  stream: Stream):
    decay = derived.tau_ns[p.n + 2]
    senders = list(range(p.n))
    # counted and uncounted sets are disjoint by sender
    n_cs = stream.randint(0, p.n)
    n_ucs = stream.randint(0, p.n - n_cs)
    picked = []
    remaining = senders[:]
    for _ in range(n_cs + n_ucs):
        picked.append(remaining.pop(stream.randint(0, len(remaining) - 1)))
    cs = {s: -stream.randint(0, decay) for s in picked[:n_cs]}
    ucs = {s: -stream.randint(0, decay) for s in picked[n_cs:]}
    n_rucs = stream.randint(0, p.n)
    remaining = senders[:]
    rucs = {}
    for _ in range(n_rucs):
        s = remaining.pop(stream.randint(0, len(remaining) - 1))
        rucs[s] = -stream.randint(0, decay)
    return cs, ucs, rucs


def run(scn: Scenario, max_events: int = DEFAULT_MAX_EVENTS) -> Trace:
    """Execute one scenario; returns the complete trace.

    Bitwise deterministic in (scenario, seed).  Raises ScenarioInvalid for
    bad configurations and EventOverflow when the queue exceeds the cap.
    """
    p = scn.params
    if len(scn.byzantine) > p.f:
        raise ScenarioInvalid(
            f"{len(scn.byzantine)} Byzantine nodes exceed the fault bound f={p.f}")
    byz_ids = [b[0] for b in scn.byzantine]
    if len(set(byz_ids)) != len(byz_ids):
        raise ScenarioInvalid("duplicate Byzantine node ids")
    for b in byz_ids:
        if not 0 <= b < p.n:
            raise ScenarioInvalid(f"Byzantine id {b} outside 0..{p.n - 1}")
    if scn.duration_cycles < 0 or scn.chaos_until < 0:
        raise ScenarioInvalid("durations must be non-negative")
    if scn.delays not in ("uniform", "constant"):
        raise ScenarioInvalid(f"unknown delay model {scn.delays!r}")

    ref = build_ref(p)
    derived = derive_constants(p)
    clocks = _resolve_clocks(scn, ref, derived)
    correct = scn.correct_ids()
    constant = scn.delays == "constant"

    t0 = scn.chaos_until
    measurement_start = t0 + derived.warmup_ns
    t_end = measurement_start + scn.duration_cycles * derived.cycle_max_ns

    detail = scn.trace_detail
    emit_maint = detail >= KIND_MIN_DETAIL["prune"]

    init = inject_arbitrary_state(scn, ref, derived)
    nodes: dict[int, Node] = {}
    anchors = {}
    init_summary = {}
    for i in correct:
        elapsed, (cs, ucs, rucs) = init[i]
        clk = clocks[i]
        local0 = clk.local(t0)
        node = Node(i, p, ref, derived, last_pulse_local=local0 - elapsed,
                    emit_maintenance=emit_maint)
        node.load_pools({s: local0 + a for s, a in cs.items()},
                        {s: local0 + a for s, a in ucs.items()},
                        {s: local0 + a for s, a in rucs.items()})
        nodes[i] = node
        # real-time instant the injected phase is anchored to, for analysis
        anchors[str(i)] = t0 - elapsed * PPB_DEN // clk.ppb
        init_summary[str(i)] = {"elapsed_local": elapsed,
                                "cs": len(cs), "ucs": len(ucs),
                                "rucs": len(rucs)}

    rn = _Run(scn, p, ref, derived, clocks, nodes)
    rn.records.append(TraceRecord(t0, rn.seq, "epoch", -1, {
        "chaos_until": t0,
        "measurement_start": measurement_start,
        "t_end": t_end,
        "phase_anchors": anchors,
        "initial_state": init_summary,
        "clock_ppb": {str(i): clocks[i].ppb for i in range(p.n)},
    }))
    rn.seq += 1

    view = network.SimView(p, ref, derived,
                           [clocks[i].ppb for i in range(p.n)],
                           set(correct), rn.fires, constant)
    strategies = {}
    for node_id, kind, config in scn.byzantine:
        strategies[node_id] = network.make_strategy(
            kind, node_id, view, substream(scn.seed, f"adv:{node_id}"), config)

    delay_streams = {i: substream(scn.seed, f"delay:{i}") for i in range(p.n)}

    heap: list = []
    push_seq = 0
    timer_epoch = {i: 0 for i in correct}

    def push(t, prio, payload):
        nonlocal push_seq
        heapq.heappush(heap, (t, prio, push_seq, payload))
        push_seq += 1

    def record(t, kind, node, payload):
        if detail >= KIND_MIN_DETAIL[kind]:
            rn.records.append(TraceRecord(t, rn.seq, kind, node, payload))
            rn.seq += 1

    def broadcast(sender: int, msg: FireMessage, t: int, sender_correct: bool):
        rn.msg_seq += 1
        plan = network.plan_broadcast(
            p.mode, p.d, constant, sender_correct, msg, rn.msg_seq, t,
            correct, delay_streams[sender])
        for recipient, when in plan.deliveries:
            if when <= t_end:
                push(when, _PRIO_DELIVERY, ("D", recipient, msg, plan.msg_id, t))
        return plan.msg_id

    def handle_output(node_id: int, t: int, out):
        for kind, payload in out.records:
            record(t, kind, node_id, payload)
        if out.fired is not None:
            rn.fires.append((t, node_id, out.fired.counter))
            record(t, "fire", node_id, {"counter": out.fired.counter})
            broadcast(node_id, out.fired, t, True)
        timer_epoch[node_id] += 1
        epoch = timer_epoch[node_id]
        wake_real = clocks[node_id].to_real(out.wakeup_local)
        if wake_real <= t:
            wake_real = t + 1
        if wake_real <= t_end:
            push(wake_real, _PRIO_TIMER, ("T", node_id, epoch))

    for i in correct:
        push(t0, _PRIO_TIMER, ("T", i, 0))
    for node_id, strat in strategies.items():
        first = strat.first_wakeup(t0)
        if first is not None and first <= t_end:
            push(max(first, t0), _PRIO_ADVERSARY, ("A", node_id))

    processed = 0
    while heap:
        t, _prio, _s, payload = heapq.heappop(heap)
        if t > t_end:
            break
        processed += 1
        if processed > max_events:
            raise EventOverflow(
                f"more than {max_events} events; runaway configuration?")
        kind = payload[0]
        if kind == "T":
            _, node_id, epoch = payload
            if epoch != timer_epoch[node_id]:
                continue
            node = nodes[node_id]
            out = node.on_timer(clocks[node_id].local(t))
            handle_output(node_id, t, out)
        elif kind == "D":
            _, recipient, msg, msg_id, send_t = payload
            record(t, "deliver", recipient, {
                "sender": msg.sender, "counter": msg.counter,
                "msg_id": msg_id, "send_t": send_t})
            node = nodes[recipient]
            out = node.on_receive(msg, clocks[recipient].local(t), msg_id)
            handle_output(recipient, t, out)
        else:  # adversary step
            _, node_id = payload
            strat = strategies[node_id]
            msgs, nxt = strat.step(t)
            for msg in msgs:
                mid = broadcast(node_id, msg, t, False)
                record(t, "inject", node_id, {"counter": msg.counter,
                                              "msg_id": mid})
            if nxt is not None:
                if nxt <= t:
                    nxt = t + 1
                if nxt <= t_end:
                    push(nxt, _PRIO_ADVERSARY, ("A", node_id))

    return Trace(scenario=_scenario_echo(scn, derived, clocks), records=rn.records)


def _scenario_echo(scn: Scenario, derived: DerivedConstants, clocks) -> dict:
    p = scn.params
    initial = scn.initial_state
    if isinstance(initial, dict):
        initial = {"phases": {str(k): int(v)
                              for k, v in initial["phases"].items()}}
    return {
        "params": {"n": p.n, "f": p.f, "cycle_ns": p.cycle, "d_ns": p.d,
                   "rho": str(p.rho), "mode": p.mode},
        "seed": scn.seed,
        "duration_cycles": scn.duration_cycles,
        "byzantine": [{"id": b[0], "strategy": b[1], "params": b[2]}
                      for b in scn.byzantine],
        "initial_state": initial,
        "chaos_until_ns": scn.chaos_until,
        "clock_ppb": [clocks[i].ppb for i in range(p.n)],
        "trace_detail": scn.trace_detail,
        "delays": scn.delays,
    }
