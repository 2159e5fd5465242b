"""Per-node pulse-synchronization state machine.

A node is a pure event-driven core: it consumes message arrivals and timer
wakeups stamped with its own local clock time, and emits at most one fire
plus the local time at which it next needs to be woken.  It performs no
I/O and keeps no clock of its own; the surrounding simulator (or a real
deployment shell) owns time and transport.

Message bookkeeping uses three pools keyed by sender id:

  cs    counted set: distinct stored messages backing the current Counter
  ucs   uncounted (tabled) messages, not reflected in Counter
  rucs  retired messages awaiting decay, kept only to recognize repeats

The Counter always equals len(cs).  A received message is assessed by the
timeliness procedure (counter range check, duplicate-sender check,
credibility check against recent pool contents); timely messages are
credited via make_accountable, pools are trimmed via prune, and the fire
condition Counter >= current threshold level is evaluated after every
credit and every threshold change.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

from .params import (DerivedConstants, ProtocolParams, RefractoryFunction,
                     threshold_at)

TIMELY = "timely"
NOT_TIMELY = "not_timely"
PENDING = "pending"

# Extra local ticks granted to the credibility-check window when rho > 0,
# covering floor/ceil slop in local/real clock conversion.  Exact at rho=0.
_DEADLINE_PAD = 2


class FireMessage(NamedTuple):
    sender: int
    counter: int


class NodeOutput(NamedTuple):
    fired: Optional[FireMessage]
    wakeup_local: int
    records: list


class _Pending(NamedTuple):
    arrival: int
    counter: int
    deadline: int
    msg_id: int


class Node:
    """One correct node's state machine.

    Instances are single-threaded: never step one concurrently.  All times
    are integer nanoseconds on this node's local clock and must be fed in
    monotone non-decreasing order.
    """

    __slots__ = ("id", "n", "f", "ref", "tau_ns", "assess_window",
                 "retire_age", "decay_age", "cs", "ucs", "rucs", "pending",
                 "counter", "last_pulse_local", "last_threshold",
                 "emit_maintenance")

    def __init__(self, node_id: int, params: ProtocolParams,
                 ref: RefractoryFunction, derived: DerivedConstants,
                 last_pulse_local: int, emit_maintenance: bool = False):
        self.id = node_id
        self.n = params.n
        self.f = params.f
        self.ref = ref
        self.tau_ns = derived.tau_ns
        window = params.delay * (1 + params.rho)
        pad = 0 if params.rho == 0 else _DEADLINE_PAD
        self.assess_window = -(-window.numerator // window.denominator) + pad
        self.retire_age = derived.tau_ns[params.n + 1]
        self.decay_age = derived.tau_ns[params.n + 2]
        self.cs: dict[int, int] = {}
        self.ucs: dict[int, int] = {}
        self.rucs: dict[int, int] = {}
        self.pending: dict[int, _Pending] = {}
        self.counter = 0
        self.last_pulse_local = last_pulse_local
        self.last_threshold = params.n + 1
        self.emit_maintenance = emit_maintenance

    # -- pool loading (arbitrary-state injection) -------------------------

    def load_pools(self, cs: dict[int, int], ucs: dict[int, int],
                   rucs: dict[int, int]) -> None:
        self.cs = dict(cs)
        self.ucs = dict(ucs)
        self.rucs = dict(rucs)
        self.counter = len(self.cs)

    # -- event entry points ------------------------------------------------

    def on_receive(self, msg: FireMessage, now_local: int,
                   msg_id: int = -1) -> NodeOutput:
        records: list = []
        self._finalize_expired(now_local, records)
        fired = None

        verdict = self.assess_timeliness(msg, now_local, msg_id, records)
        inserted = verdict is not None  # counter range check passed
        if verdict == TIMELY:
            self._make_accountable(msg.sender, msg.counter)
            self._prune(now_local, records)
            records.append(("assess", {
                "sender": msg.sender, "counter": msg.counter,
                "msg_id": msg_id, "verdict": TIMELY, "reason": None,
                "counter_after": self.counter}))
            fired = self._fire_check(now_local, records)

        if inserted:
            fired = self._reevaluate_pending(msg.sender, now_local,
                                             records, fired)
        return NodeOutput(fired, self._next_wakeup(now_local), records)

    def on_timer(self, now_local: int) -> NodeOutput:
        records: list = []
        self._finalize_expired(now_local, records)
        fired = None
        level = threshold_at(self.ref, now_local - self.last_pulse_local)
        if level < self.last_threshold:
            self.last_threshold = level
            if self.emit_maintenance:
                records.append(("threshold", {"level": level}))
            self._prune(now_local, records)
            fired = self._fire_check(now_local, records)
        else:
            # age-maintenance wakeup; trimming can only lower the counter,
            # so no fire check is needed
            self._prune(now_local, records)
        return NodeOutput(fired, self._next_wakeup(now_local), records)

    # -- timeliness assessment ---------------------------------------------

    def assess_timeliness(self, msg: FireMessage, now_local: int,
                          msg_id: int, records: list) -> Optional[str]:
        """Run the assessment procedure for a newly arrived message.

        Returns TIMELY, NOT_TIMELY, or PENDING once the message's stored
        entry was created; returns None when the counter range check fails
        and nothing was stored.  Side effects: stores the entry, deletes
        superseded entries from the pools, registers a pending assessment.
        """
        sender, k = msg.sender, msg.counter

        # Counter range check: a correct sender never claims more than n-1
        # inputs; anything outside [0, n-1] is discarded unstored.
        if not 0 <= k <= self.n - 1:
            records.append(("assess", {
                "sender": sender, "counter": k, "msg_id": msg_id,
                "verdict": NOT_TIMELY, "reason": "counter_range",
                "counter_after": self.counter}))
            return None

        # A newer message supersedes any in-flight assessment of an older
        # one from the same sender (a same-tick repeat also lands here).
        old = self.pending.pop(sender, None)
        if old is not None:
            records.append(("assess", {
                "sender": sender, "counter": old.counter,
                "msg_id": old.msg_id, "verdict": NOT_TIMELY,
                "reason": "superseded", "counter_after": self.counter}))

        old_pool_arrival = None
        if sender in self.cs:
            old_pool_arrival = self.cs.pop(sender)
        elif sender in self.ucs:
            old_pool_arrival = self.ucs.pop(sender)
        dup = ((old_pool_arrival is not None and old_pool_arrival != now_local)
               or (sender in self.rucs and self.rucs[sender] != now_local))
        self.counter = len(self.cs)

        # The new stored message is tabled regardless of the verdict.
        self.ucs[sender] = now_local

        if dup:
            # Repeat within the decay horizon: only the latest entry is
            # kept and the message itself is not credited.
            records.append(("assess", {
                "sender": sender, "counter": k, "msg_id": msg_id,
                "verdict": NOT_TIMELY, "reason": "duplicate_sender",
                "counter_after": self.counter}))
            return NOT_TIMELY

        # Credibility check: the claimed counter k is plausible only if
        # k+1 distinct recent senders (this one included) are in the pool
        # now, or become so before the assessment window closes.
        if self._credible_count(k, now_local) >= k + 1:
            return TIMELY
        self.pending[sender] = _Pending(now_local, k,
                                        now_local + self.assess_window, msg_id)
        return PENDING

    def _credible_count(self, k: int, now_local: int) -> int:
        window = self.tau_ns[k + 1]
        count = 0
        for arr in self.cs.values():
            if now_local - arr <= window:
                count += 1
        for arr in self.ucs.values():
            if now_local - arr <= window:
                count += 1
        return count

    def _reevaluate_pending(self, new_sender: int, now_local: int,
                            records: list, fired):
        """A new pool entry can only flip pending credibility checks from
        false to true, so arrivals are the only instants worth re-checking.
        Assessments are revisited in registration order."""
        for sender in list(self.pending):
            if sender == new_sender:
                continue
            pa = self.pending[sender]
            if now_local > pa.deadline:
                continue  # expires at its own wakeup
            if self._credible_count(pa.counter, now_local) >= pa.counter + 1:
                del self.pending[sender]
                self._make_accountable(sender, pa.counter)
                self._prune(now_local, records)
                records.append(("assess", {
                    "sender": sender, "counter": pa.counter,
                    "msg_id": pa.msg_id, "verdict": TIMELY, "reason": None,
                    "counter_after": self.counter}))
                shot = self._fire_check(now_local, records)
                if shot is not None:
                    assert fired is None, "double fire within one event"
                    fired = shot
        return fired

    # -- crediting and pool maintenance -------------------------------------

    def _make_accountable(self, trigger_sender: int, msg_counter: int) -> None:
        """Credit tabled messages so Counter exceeds the message's counter.

        Moves the max(1, msg_counter - Counter + 1) most recent distinct
        tabled entries into the counted set, the triggering entry first.
        If an earlier credit at the same instant already counted the
        triggering entry, only the shortfall (possibly nothing) is moved.
        """
        in_ucs = trigger_sender in self.ucs
        need = msg_counter - self.counter + 1
        need = max(1, need) if in_ucs else max(0, need)
        if need:
            moved = []
            if in_ucs:
                moved.append(trigger_sender)
            if len(moved) < need:
                rest = sorted((s for s in self.ucs if s != trigger_sender),
                              key=lambda s: (-self.ucs[s], s))
                moved.extend(rest[:need - len(moved)])
            assert len(moved) == need, "uncounted pool too small to credit"
            for s in moved:
                self.cs[s] = self.ucs.pop(s)
        self.counter = len(self.cs)
        assert self.counter <= self.n

    def _prune(self, now_local: int, records: list) -> None:
        """Move and delete obsolete stored messages.

        Keeps the counted set fresh enough that a message sent with the
        resulting Counter passes the credibility check at every correct
        receiver: after pruning, the oldest counted entry is no older than
        tau(len(cs) - 1).  The trim re-reads the set size after every
        eviction, so the bound holds for the post-trim size.
        """
        changed = False

        dead = [s for s, arr in self.rucs.items()
                if now_local - arr > self.decay_age]
        for s in dead:
            del self.rucs[s]
            changed = True

        for pool in (self.cs, self.ucs):
            over = [s for s, arr in pool.items()
                    if now_local - arr > self.retire_age]
            for s in over:
                arr = pool.pop(s)
                prev = self.rucs.get(s)
                self.rucs[s] = arr if prev is None else max(prev, arr)
                changed = True

        while self.cs:
            bound = self.tau_ns[len(self.cs) - 1]
            s, arr = min(self.cs.items(), key=lambda kv: (kv[1], kv[0]))
            if now_local - arr > bound:
                self.ucs[s] = self.cs.pop(s)
                changed = True
            else:
                break

        self.counter = len(self.cs)
        if changed and self.emit_maintenance:
            records.append(("prune", {"counter": self.counter}))

    def _fire_check(self, now_local: int, records: list):
        """Fire when the counter reaches the current threshold level; the
        level-0 instant (a full cycle elapsed) always passes since the
        counter is never negative."""
        level = threshold_at(self.ref, now_local - self.last_pulse_local)
        if self.counter >= level:
            self._cycle_reset(now_local, records)
            return FireMessage(self.id, self.counter)
        return None

    def _cycle_reset(self, now_local: int, records: list) -> None:
        """Restart the threshold schedule at the top; pools and counter
        are untouched."""
        self.last_pulse_local = now_local
        self.last_threshold = self.n + 1
        if self.emit_maintenance:
            records.append(("threshold", {"level": self.n + 1}))

    def _finalize_expired(self, now_local: int, records: list) -> None:
        # The credibility window is closed: re-checks at arrivals can only
        # see the count shrink afterwards, so expiry is conclusive.
        expired = [s for s, pa in self.pending.items()
                   if pa.deadline < now_local]
        for s in expired:
            pa = self.pending.pop(s)
            records.append(("assess", {
                "sender": s, "counter": pa.counter, "msg_id": pa.msg_id,
                "verdict": NOT_TIMELY, "reason": "window_expired",
                "counter_after": self.counter}))

    # -- scheduling ----------------------------------------------------------

    def elapsed(self, now_local: int) -> int:
        return now_local - self.last_pulse_local

    def _next_wakeup(self, now_local: int) -> int:
        ref = self.ref
        level = threshold_at(ref, now_local - self.last_pulse_local)
        assert level > 0, "unfired node at threshold level 0"
        # next threshold boundary
        wake = self.last_pulse_local + ref.level_start(level - 1)
        # assessment window expiries (one tick past the closed window)
        for pa in self.pending.values():
            t = pa.deadline + 1
            if t < wake:
                wake = t
        # age boundaries: retirement of the oldest pool entry, decay of the
        # oldest retired entry, staleness of the oldest counted entry
        oldest_pool = None
        if self.cs:
            oldest_pool = min(self.cs.values())
        if self.ucs:
            m = min(self.ucs.values())
            oldest_pool = m if oldest_pool is None else min(oldest_pool, m)
        if oldest_pool is not None:
            t = oldest_pool + self.retire_age + 1
            if t < wake:
                wake = t
        if self.rucs:
            t = min(self.rucs.values()) + self.decay_age + 1
            if t < wake:
                wake = t
        if self.cs:
            t = min(self.cs.values()) + self.tau_ns[len(self.cs) - 1] + 1
            if t < wake:
                wake = t
        return wake
