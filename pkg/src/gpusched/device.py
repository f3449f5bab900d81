"""GPU device model: priority streams, non-preemptive kernels sharing a
utilization budget, contention slowdown, a copy engine, device barriers, and
kernel-collision detection.

The device is advanced lazily by the engine: `next_time` is the earliest
instant at which its state changes on its own (a kernel finishing, or a
launched kernel becoming visible at a stream head).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from .workload import DeviceParams

NEVER = 1 << 62


class InvariantViolation(RuntimeError):
    """Raised when the simulator detects an internal inconsistency."""


class KernelInstance:
    """One launched kernel (or memcpy) of one chain instance."""

    __slots__ = (
        "seq", "work", "util", "ready", "inst", "stream", "index",
        "memcpy", "rate", "started", "nominal", "mark", "done",
    )

    def __init__(self, work: float, util: float, inst, index: int, memcpy: bool = False):
        self.work = work
        self.nominal = work
        self.util = util
        self.inst = inst
        self.index = index
        self.memcpy = memcpy
        self.ready = NEVER
        self.seq = -1
        self.stream = None
        self.rate = 1.0
        self.started = -1
        self.mark = 0
        self.done = NEVER


class Stream:
    """FIFO of kernels; only the head may run."""

    __slots__ = ("stream_id", "priority", "queue", "running", "next_seq", "completed_seq", "waiters", "label")

    def __init__(self, stream_id: int, priority: int, label=None):
        self.stream_id = stream_id
        self.priority = priority
        self.queue: deque[KernelInstance] = deque()
        self.running: KernelInstance | None = None
        self.next_seq = 0
        self.completed_seq = -1
        self.waiters: list = []  # (seq, callback) sorted by seq
        self.label = label

    @property
    def last_seq(self) -> int:
        return self.next_seq - 1

    def __repr__(self):
        return f"Stream({self.stream_id}, pri={self.priority}, label={self.label})"


class Gpu:
    def __init__(self, params: DeviceParams, trace=None):
        self.params = params
        self.alpha = params.contention_alpha
        self.capacity = params.capacity
        self.running: list[KernelInstance] = []
        self.copy_running: list[KernelInstance] = []
        self.u_total = 0.0
        self.copy_u = 0.0
        self.pending: set[Stream] = set()
        self.now = 0
        self.next_time = NEVER
        self.next_done = NEVER
        self.rerate = False
        self.barriers = 0
        self.drain_waiters: list = []
        self.trace = trace
        self.gate = None  # optional policy predicate on a stream head
        self.streams: list[Stream] = []
        # accounting
        self.busy_ns = 0
        self.util_ns = 0.0
        self.completed = 0
        self.dispatched = 0
        self.max_u_seen = 0.0
        self.meter = None  # UtilizationMeter receiving GPU timeline buckets
        self._bucket = 0
        self._bucket_end = -1  # busy time up to here accumulates in the open bucket
        self._bucket_busy = 0
        self._bucket_util = 0.0

    # ------------------------------------------------------------------
    def new_stream(self, priority: int, label=None) -> Stream:
        s = Stream(len(self.streams), priority, label)
        self.streams.append(s)
        return s

    def enqueue(self, stream: Stream, k: KernelInstance, now: int | None = None):
        """Append a kernel to its stream. `k.ready` may lie in the future."""
        k.seq = stream.next_seq
        stream.next_seq += 1
        k.stream = stream
        stream.queue.append(k)
        if stream.running is None and len(stream.queue) == 1:
            self.pending.add(stream)
            if k.ready < self.next_time:
                self.next_time = max(k.ready, self.now if now is None else now)

    def head_ready_changed(self, stream: Stream, now: int):
        """Re-arm the wake-up after launch times of queued kernels moved."""
        if stream.running is None and stream.queue:
            r = stream.queue[0].ready
            if r < self.next_time:
                self.next_time = max(r, now)

    # ------------------------------------------------------------------
    def _meter_span(self, t0: int, t1: int):
        """Account busy time crossing a timeline bucket boundary."""
        self.flush_meter()
        self.meter.gpu(t0, t1, True, self.u_total)
        # later spans starting at t1 stay within t1's bucket until its end
        w = self.meter.width
        self._bucket = t1 // w
        self._bucket_end = (self._bucket + 1) * w

    def flush_meter(self):
        if self.meter is not None and (self._bucket_busy or self._bucket_util):
            self.meter.gpu_busy[self._bucket] += self._bucket_busy
            self.meter.gpu_util[self._bucket] += self._bucket_util
        self._bucket_busy = 0
        self._bucket_util = 0.0

    def step(self, t: int):
        """Advance to t, retire finished kernels, dispatch, re-arm."""
        now = self.now
        if t != now:
            if t < now:
                raise InvariantViolation(f"GPU clock moved backwards: {now} -> {t}")
            if self.running:
                dt = t - now
                self.busy_ns += dt
                self.util_ns += dt * self.u_total
                if t <= self._bucket_end:
                    self._bucket_busy += dt
                    self._bucket_util += dt * self.u_total
                elif self.meter is not None:
                    self._meter_span(now, t)
            self.now = t
        if t >= self.next_done:
            running = self.running
            if len(running) == 1 and not self.copy_running:
                if running[0].done <= t:
                    self._retire(running[0])
            else:
                finished = [k for k in running if k.done <= t]
                if self.copy_running:
                    finished += [k for k in self.copy_running if k.done <= t]
                if len(finished) > 1:
                    finished.sort(key=_retire_key)
                for k in finished:
                    self._retire(k)
        self.dispatch()

    def _retire(self, k: KernelInstance):
        if k.memcpy:
            self.copy_running.remove(k)
            self.copy_u -= k.util
        else:
            self.running.remove(k)
            self.u_total -= k.util
            if not self.running:
                self.u_total = 0.0
            self.rerate = True
        s = k.stream
        if s.running is not k:
            raise InvariantViolation("retired kernel is not its stream's running head")
        if k.seq != s.completed_seq + 1:
            raise InvariantViolation(f"stream {s.stream_id} completed seq {k.seq} out of order")
        s.running = None
        s.completed_seq = k.seq
        self.completed += 1
        if s.queue:
            self.pending.add(s)
        if self.trace is not None:
            self.trace("MemcpyCompleted" if k.memcpy else "KernelCompleted", k)
        k.inst.completed_kernels += 1
        if s.waiters:
            w = s.waiters
            while w and w[0][0] <= s.completed_seq:
                w.pop(0)[1]()
        if self.barriers and self.drain_waiters and not self.running and not self.copy_running:
            waiters, self.drain_waiters = self.drain_waiters, []
            for cb in waiters:
                cb()

    def dispatch(self):
        now = self.now
        wake = NEVER
        running = self.running
        if self.pending and not self.barriers:
            cands = []
            gate = self.gate
            for s in self.pending:
                h = s.queue[0]
                r = h.ready
                if r > now:
                    if r < wake:
                        wake = r
                elif gate is None or gate(h):
                    cands.append(s)
            if cands:
                if len(cands) > 1:
                    cands.sort(key=_dispatch_key)
                cap = self.capacity + 1e-9
                copies = None
                for s in cands:
                    h = s.queue[0]
                    if h.memcpy:
                        # copy engine ignores stream priority: order is by launch time only
                        if copies is None:
                            copies = []
                        copies.append(s)
                        continue
                    if self.u_total + h.util <= cap or not running:
                        self._start(s, h)
                        running.append(h)
                        self.u_total += h.util
                        self.rerate = True
                if copies:
                    self._start_copies(copies, now)
                if self.rerate:
                    if self.u_total > self.max_u_seen:
                        self.max_u_seen = self.u_total
                    if self.u_total > cap and len(running) > 1:
                        raise InvariantViolation(f"capacity exceeded: {self.u_total:.3f} > {self.capacity}")
        nd = self.next_done
        if self.rerate:
            # contention: rate = 1 / (1 + alpha * utilization of co-runners);
            # remaining work is settled only when the rates change
            self.rerate = False
            alpha = self.alpha
            ut = self.u_total
            nd = NEVER
            ceil = math.ceil
            for k in running:
                if k.mark != now:
                    k.work -= (now - k.mark) * k.rate
                    k.mark = now
                rate = 1.0 / (1.0 + alpha * (ut - k.util))
                k.rate = rate
                w = k.work
                d = now + ceil(w / rate - 1e-9) if w > 0 else now
                k.done = d
                if d < nd:
                    nd = d
            for k in self.copy_running:
                if k.done < nd:
                    nd = k.done
            self.next_done = nd
        elif nd <= now:
            nd = NEVER
            for k in running:
                if k.done < nd:
                    nd = k.done
            for k in self.copy_running:
                if k.done < nd:
                    nd = k.done
            self.next_done = nd
        nxt = nd if nd < wake else wake
        self.next_time = nxt if nxt > now else now

    def _start_copies(self, copies, now):
        copies.sort(key=_copy_key)
        for s in copies:
            h = s.queue[0]
            if self.copy_u + h.util <= 1.0 + 1e-9 or not self.copy_running:
                self._start(s, h)
                self.copy_running.append(h)
                self.copy_u += h.util
                h.done = now + (math.ceil(h.work) if h.work > 0 else 0)
                if h.done < self.next_done:
                    self.next_done = h.done

    def _start(self, s: Stream, h: KernelInstance):
        s.queue.popleft()
        s.running = h
        h.started = self.now
        h.mark = self.now
        self.pending.discard(s)
        self.dispatched += 1
        if self.trace is not None:
            self.trace("KernelDispatched", h)

    # ------------------------------------------------------------------
    def wait_stream(self, stream: Stream, seq: int, callback) -> bool:
        """Register callback for completion of `seq`; False if already done."""
        if stream.completed_seq >= seq:
            return False
        w = stream.waiters
        i = len(w)
        while i and w[i - 1][0] > seq:
            i -= 1
        w.insert(i, (seq, callback))
        return True

    def begin_barrier(self, callback) -> bool:
        """Block dispatch; callback when the running set has drained.

        Returns False if the device is already idle (no wait needed).
        """
        self.barriers += 1
        if not self.running and not self.copy_running:
            return False
        self.drain_waiters.append(callback)
        return True

    def end_barrier(self, now: int):
        if self.barriers <= 0:
            raise InvariantViolation("barrier released twice")
        self.barriers -= 1
        if not self.barriers:
            self.step(now)

    @property
    def idle(self) -> bool:
        return not self.running and not self.copy_running and not any(s.queue for s in self.pending)


def _dispatch_key(s: Stream):
    h = s.queue[0]
    return (s.priority, h.ready, s.stream_id, h.seq)


def _retire_key(k: KernelInstance):
    return (k.done, k.stream.stream_id)


def _copy_key(s: Stream):
    h = s.queue[0]
    return (h.ready, s.stream_id, h.seq)


# --------------------------------------------------------------------------
# Kernel collisions

PRIORITY_COLLISION = "PriorityCollision"
INVERTED_BINDING = "InvertedBinding"


@dataclass(frozen=True, slots=True)
class CollisionEvent:
    time: int
    kind: str
    chains: tuple[int, int]
    priorities: tuple[int, int]
    urgencies: tuple[float, float]
    active_tasks: int = 2


def classify_collision(prio_a: int, ul_a: float, prio_b: int, ul_b: float) -> str | None:
    """Collision kind between two active kernels, or None.

    Lower priority values are more urgent streams (-5 beats 0).
    """
    if prio_a == prio_b:
        return PRIORITY_COLLISION if ul_a != ul_b else None
    if ul_a > ul_b and prio_a > prio_b:
        return INVERTED_BINDING
    if ul_b > ul_a and prio_b > prio_a:
        return INVERTED_BINDING
    return None


def detect_collisions(active, chain_id: int, priority: int, ul: float, now: int = 0) -> list[CollisionEvent]:
    """Collisions between a launching kernel and active kernels of other chains.

    `active` is an iterable of (chain_id, stream_priority, urgency) records,
    one per active task instance (all of its kernels share stream and
    urgency). The cardinality recorded is the number of active tasks,
    including the launching one.
    """
    active = list(active)
    n_tasks = len(active) + 1
    out = []
    for c, p, u in active:
        if c == chain_id:
            continue
        kind = classify_collision(priority, ul, p, u)
        if kind is not None:
            out.append(CollisionEvent(now, kind, (chain_id, c), (priority, p), (ul, u), n_tasks))
    return out
