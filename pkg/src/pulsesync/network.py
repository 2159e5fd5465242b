"""Simulated message fabric and Byzantine traffic generators.

Two delivery models:

  strong-broadcast   every message, whoever sent it, reaches every correct
                     node within (0, d] of the send instant
  relay              emulates the delivery contract of a reliable-broadcast
                     relay primitive: a correct sender's message reaches
                     everyone within 3d of the send, and any message that
                     reaches one correct node reaches all of them within a
                     2d-wide window

The relay primitive itself (how relaying is implemented) is out of scope;
only its delivery window contract is enforced, by construction of the
per-recipient delays.

Adversary strategies generate arbitrary wire traffic attributed to the
faulty node ids.  They are omniscient: each step sees the full fire log,
the clock rates, and the protocol constants.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

from .params import MODE_RELAY, ProtocolParams, RefractoryFunction
from .protocol import FireMessage
from .rng import Stream


class DeliveryPlan(NamedTuple):
    message: FireMessage
    msg_id: int
    send_real: int
    deliveries: tuple  # ((recipient, deliver_real), ...)


def plan_broadcast(mode: str, d: int, constant: bool, sender_correct: bool,
                   msg: FireMessage, msg_id: int, send_real: int,
                   recipients, stream: Stream) -> DeliveryPlan:
    """Assign per-recipient delivery times for one broadcast.

    Delays are drawn from the sender's dedicated substream, in recipient
    order, so plans are a pure function of (mode, inputs, stream state).
    With ``constant`` set, every delay is pinned to the worst case the
    model allows.
    """
    if mode == MODE_RELAY:
        if sender_correct:
            base = d if constant else stream.randint(1, d)
            offs = [(2 * d if constant else stream.randint(0, 2 * d))
                    for _ in recipients]
            delays = [base + off for off in offs]
        else:
            anchor = 3 * d if constant else stream.randint(1, 3 * d)
            delays = [anchor + (0 if constant else stream.randint(0, 2 * d))
                      for _ in recipients]
    else:
        delays = [(d if constant else stream.randint(1, d)) for _ in recipients]
    deliveries = tuple((r, send_real + delay)
                       for r, delay in zip(recipients, delays))
    return DeliveryPlan(msg, msg_id, send_real, deliveries)


class SimView:
    """What an omniscient adversary gets to see."""

    __slots__ = ("params", "ref", "derived", "clock_ppb", "correct_ids",
                 "fires", "constant_delays")

    def __init__(self, params: ProtocolParams, ref: RefractoryFunction,
                 derived, clock_ppb, correct_ids, fires, constant_delays):
        self.params = params
        self.ref = ref
        self.derived = derived
        self.clock_ppb = clock_ppb
        self.correct_ids = correct_ids
        self.fires = fires  # shared, engine-appended list of (t, node, counter)
        self.constant_delays = constant_delays

    def latest_fires(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for t, node, _counter in self.fires:
            if node in out:
                if t > out[node]:
                    out[node] = t
            elif node in self.correct_ids:
                out[node] = t
        return out


class Strategy:
    """One Byzantine node's traffic generator.

    ``step`` returns the messages to put on the wire now plus the next
    real time at which the strategy wants to run (None to go silent).
    """

    kind = "silent"

    def __init__(self, node_id: int, view: SimView, stream: Stream,
                 config: Optional[dict] = None):
        self.id = node_id
        self.view = view
        self.stream = stream
        self.config = dict(config or {})

    def first_wakeup(self, start_real: int) -> Optional[int]:
        return None

    def step(self, now: int) -> tuple[list[FireMessage], Optional[int]]:
        return [], None


class Silent(Strategy):
    kind = "silent"


class RandomNoise(Strategy):
    """Messages with arbitrary counters at arbitrary times.

    Counters are drawn from 0..n: the top value is outside the valid range
    and exercises the receivers' range check.
    """

    kind = "random_noise"

    def __init__(self, node_id, view, stream, config=None):
        super().__init__(node_id, view, stream, config)
        self.interval = int(self.config.get(
            "interval_ns", max(view.params.cycle // 8, 1)))

    def first_wakeup(self, start_real):
        return start_real + self.stream.randint(0, self.interval)

    def step(self, now):
        msgs = [FireMessage(self.id, self.stream.randint(0, self.view.params.n))]
        return msgs, now + 1 + self.stream.randint(self.interval // 2,
                                                   self.interval)


class DuplicateSpammer(Strategy):
    """Bursts of messages from the same sender, testing repeat handling."""

    kind = "duplicate_spammer"

    def __init__(self, node_id, view, stream, config=None):
        super().__init__(node_id, view, stream, config)
        self.interval = int(self.config.get(
            "interval_ns", max(view.params.cycle // 6, 1)))
        self.burst = int(self.config.get("burst", 3))

    def first_wakeup(self, start_real):
        return start_real + self.stream.randint(0, self.interval)

    def step(self, now):
        n = self.view.params.n
        msgs = [FireMessage(self.id, self.stream.randint(0, n - 1))
                for _ in range(self.burst)]
        return msgs, now + 1 + self.stream.randint(self.interval // 2,
                                                   self.interval)


class _BoundaryTimer(Strategy):
    """Shared machinery for strategies that aim at threshold boundaries.

    The arrival margin keeps the provoked early fires strictly inside the
    legitimate cycle-length envelope: quantization and second-order drift
    make an exactly-at-the-boundary hit land a few ppm short of the
    nominal minimum cycle length, so the volley is aimed a hair past the
    boundary instead.  The shortening achieved is maximal up to that
    margin, which is tiny against the step lengths.
    """

    def __init__(self, node_id, view, stream, config=None):
        super().__init__(node_id, view, stream, config)
        p = view.params
        rho = p.rho
        margin = 2 * rho * p.cycle
        self.margin = int(margin.numerator // margin.denominator) + 1000
        self.poll = max(view.derived.cycle_max_ns // 8, 1)
        self.skip = max(view.derived.cycle_min_ns // 2, 1)
        self.level: int = max(p.f, 1)  # threshold level the volley aims at

    def _boundary(self, node: int, fire_t: int) -> int:
        ticks = self.view.ref.level_start(self.level)
        ppb = self.view.clock_ppb[node]
        return fire_t + -(-ticks * 10 ** 9 // ppb)

    def _target(self, now: int) -> Optional[int]:
        raise NotImplementedError

    def _payload_counter(self) -> int:
        raise NotImplementedError

    def first_wakeup(self, start_real):
        return start_real

    def step(self, now):
        target = self._target(now)
        if target is None:
            return [], now + self.poll
        send_at = target - self.view.params.d
        if send_at > now:
            return [], send_at
        if now <= target:
            return [FireMessage(self.id, self._payload_counter())], now + self.skip
        return [], now + self.poll  # round already over; re-aim


class Accelerator(_BoundaryTimer):
    """Shortens cycles as much as the fault bound allows.

    Each faulty node fires one message with counter f-1 timed to arrive
    just after every correct node has entered threshold level f; with all
    f faulty nodes running this strategy the victims' counters reach f and
    they fire at the earliest level the protocol permits.
    """

    kind = "accelerator"

    def __init__(self, node_id, view, stream, config=None):
        super().__init__(node_id, view, stream, config)
        self.level = max(view.params.f, 1)

    def _payload_counter(self):
        return max(self.view.params.f - 1, 0)

    def _target(self, now):
        latest = self.view.latest_fires()
        if set(latest) != set(self.view.correct_ids):
            return None  # some node has not fired yet; cannot aim
        return max(self._boundary(node, t) for node, t in latest.items()) \
            + self.margin


class TargetedDesync(_BoundaryTimer):
    """Tries to split a synchronized set by yanking one victim forward.

    Sends a single always-credible message timed at a randomly chosen
    victim's last threshold step, the most asymmetric pull a lone faulty
    sender can exert under a broadcast network.
    """

    kind = "targeted_desync"

    def __init__(self, node_id, view, stream, config=None):
        super().__init__(node_id, view, stream, config)
        self.level = 1
        self._victim: Optional[int] = None

    def _payload_counter(self):
        return 0

    def _target(self, now):
        latest = self.view.latest_fires()
        if self._victim is None or self._victim not in latest:
            if not latest:
                return None
            self._victim = self.stream.choice(sorted(latest))
        t = self._boundary(self._victim, latest[self._victim]) + self.margin
        if t + self.view.params.d < now:  # victim's round passed; retarget
            self._victim = self.stream.choice(sorted(latest))
            t = self._boundary(self._victim, latest[self._victim]) + self.margin
        return t

    def step(self, now):
        msgs, nxt = super().step(now)
        if msgs:
            self._victim = None  # pick a fresh victim next round
        return msgs, nxt


STRATEGIES = {
    "silent": Silent,
    "random_noise": RandomNoise,
    "duplicate_spammer": DuplicateSpammer,
    "accelerator": Accelerator,
    "targeted_desync": TargetedDesync,
}


def make_strategy(kind: str, node_id: int, view: SimView, stream: Stream,
                  config: Optional[dict] = None) -> Strategy:
    try:
        cls = STRATEGIES[kind]
    except KeyError:
        raise ValueError(f"unknown adversary strategy {kind!r}; "
                         f"known: {sorted(STRATEGIES)}") from None
    return cls(node_id, view, stream, config)
