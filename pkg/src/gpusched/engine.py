"""Deterministic discrete-event engine.

One simulated clock (integer ns), a (time, seq) event heap, a lazily
stepped GPU model, and a fixed-priority preemptive CPU model. Every chain
instance is one CPU activity whose behaviour is written as a generator that
yields requests:

    ("cpu", ns)                      consume CPU time
    ("launch", stream, kernels, ns)  launch a burst of kernels (ns = extra CPU cost first)
    ("wait", stream, seq)            block off-CPU until stream completes seq
    ("sleep", ns)                    leave the CPU for ns
    ("barrier",) / ("barrier_end",)  device-wide synchronization

Launch bursts are accounted as a single CPU demand; each kernel becomes
visible to the GPU when its share of the launch overhead has been served, so
preempting the launching thread also stalls its remaining launches.
"""

from __future__ import annotations

import heapq
import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field

from .device import NEVER, Gpu, InvariantViolation, KernelInstance, detect_collisions
from .metrics import InstanceRecord, MetricsReport, UtilizationMeter
from .scheduler import AKB_OP_NS, ASYNC, BATCHED, OVERLAP, PER_KERNEL, ActiveKernelBuffer, Policy
from .urgency import ChainPredictor, ThresholdCalibrator, UL_MAX
from .workload import NS_PER_MS, NS_PER_S, WorkloadConfig, apply_factors, generate_arrivals

log = logging.getLogger(__name__)

ACTIVE, COMPLETED, MISSED = "Active", "Completed", "Missed"

EVENT_KINDS = (
    "FrameArrival", "CpuSegmentDone", "LaunchIssued", "KernelDispatched", "KernelCompleted",
    "SyncSatisfied", "SleepWake", "DeviceBarrierDone", "MemcpyCompleted",
)


@dataclass
class RunOptions:
    noise_pct: float = 0.0
    cudafree_tasks: int = 0
    shed_backlog: bool = False
    trace: bool = False
    drain_cap_s: float = 60.0
    warmup_s: float = 30.0
    recalibrate_s: float = 10.0
    sample_period_ms: float = 5.0
    exec_noise: bool = True
    record_collisions: bool = True
    fixed_threshold: float | None = None


class ChainInstance:
    """State and CPU-activity bookkeeping of one chain instance."""

    __slots__ = (
        "chain", "chain_id", "instance_id", "t_arr", "deadline", "gpu_index", "cpu_index",
        "task_index", "status", "completion", "gpu_suffix", "cpu_suffix", "noise", "ul", "t_eval",
        "priority", "remaining", "run_start", "token", "burst", "on_cpu", "queued", "gen",
        "akb", "launched", "completed_kernels", "early_exited", "shed", "cpu_factor", "gpu_factor",
        "batch_no", "delays", "wake",
    )

    def __init__(self, chain, instance_id: int, t_arr: int):
        self.chain = chain
        self.chain_id = chain.chain_id
        self.instance_id = instance_id
        self.t_arr = t_arr
        self.deadline = chain.deadline_ns
        self.gpu_index = 0
        self.cpu_index = 0
        self.task_index = 0
        self.status = ACTIVE
        self.completion = None
        self.gpu_suffix = None
        self.cpu_suffix = None
        self.noise = 1.0
        self.ul = 0.0
        self.t_eval = t_arr
        self.priority = 50
        self.remaining = 0
        self.run_start = 0
        self.token = 0
        self.burst = None
        self.on_cpu = False
        self.queued = False
        self.gen = None
        self.akb = None
        self.launched = 0
        self.completed_kernels = 0
        self.early_exited = False
        self.shed = False
        self.cpu_factor = 1.0
        self.gpu_factor = 1.0
        self.batch_no = 0
        self.delays = 0
        self.wake = None

    def __repr__(self):
        return f"C{self.chain_id}#{self.instance_id}"


class CpuModel:
    """Fixed-priority preemptive scheduling on `num_cores` identical cores.

    Lower priority numbers are more urgent. Within a level, FIFO; a
    preempted activity returns to the head of its level.
    """

    def __init__(self, engine: "Engine", num_cores: int):
        self.eng = engine
        self.num_cores = num_cores
        self.running: list[ChainInstance] = []
        self.ready: dict[int, deque] = {}
        self.n_ready = 0
        self.busy_ns = 0
        self.preemptions = 0

    # activity enters with a fresh demand
    def submit(self, a: ChainInstance, demand: int):
        a.remaining = demand
        if len(self.running) < self.num_cores:
            self._start(a)
            return
        victim = self._lowest()
        if a.priority < victim.priority:
            self._preempt(victim)
            self._start(a)
        else:
            self._enqueue(a, front=False)

    # activity already holds a core and continues with a new demand
    def continue_on_core(self, a: ChainInstance, demand: int):
        a.remaining = demand
        a.run_start = self.eng.now
        a.token += 1
        if a.burst is not None:
            self.eng._arm_burst(a)
        self.eng.push(self.eng.now + demand, self.eng._cpu_done, (a, a.token))

    def release(self, a: ChainInstance):
        self.running.remove(a)
        a.on_cpu = False
        self._fill()

    def _fill(self):
        while self.n_ready and len(self.running) < self.num_cores:
            self._start(self._pop_ready())

    def _lowest(self) -> ChainInstance:
        worst = None
        for r in self.running:
            if worst is None or r.priority > worst.priority or (
                r.priority == worst.priority and r.run_start > worst.run_start
            ):
                worst = r
        return worst

    def _start(self, a: ChainInstance):
        eng = self.eng
        self.running.append(a)
        a.on_cpu = True
        a.run_start = eng.now
        a.token += 1
        if a.burst is not None:
            eng._arm_burst(a)
        eng.push(eng.now + a.remaining, eng._cpu_done, (a, a.token))

    def _preempt(self, a: ChainInstance):
        eng = self.eng
        served = eng.now - a.run_start
        a.remaining -= served
        a.token += 1
        self.busy_ns += served
        eng.meter.cpu(a.run_start, eng.now)
        if a.burst is not None:
            eng._disarm_burst(a, served)
        self.running.remove(a)
        a.on_cpu = False
        self.preemptions += 1
        self._enqueue(a, front=True)

    def _enqueue(self, a: ChainInstance, front: bool):
        q = self.ready.get(a.priority)
        if q is None:
            q = self.ready[a.priority] = deque()
        if front:
            q.appendleft(a)
        else:
            q.append(a)
        a.queued = True
        self.n_ready += 1

    def _best_ready_priority(self):
        best = None
        for p, q in self.ready.items():
            if q and (best is None or p < best):
                best = p
        return best

    def _pop_ready(self) -> ChainInstance:
        p = self._best_ready_priority()
        q = self.ready[p]
        a = q.popleft()
        if not q:
            del self.ready[p]
        a.queued = False
        self.n_ready -= 1
        return a

    def set_priority(self, a: ChainInstance, prio: int):
        if a.priority == prio:
            return
        if a.queued:
            q = self.ready[a.priority]
            q.remove(a)
            if not q:
                del self.ready[a.priority]
            self.n_ready -= 1
            a.queued = False
            a.priority = prio
            if len(self.running) < self.num_cores:
                self._start(a)
                return
            victim = self._lowest()
            if prio < victim.priority:
                self._preempt(victim)
                self._start(a)
            else:
                self._enqueue(a, front=False)
            return
        a.priority = prio
        if a.on_cpu and self.n_ready:
            best = self._best_ready_priority()
            if best < prio:
                # a running activity lost its priority: yield to a more urgent one
                self._preempt(a)
                self._start(self._pop_ready())

    def remove(self, a: ChainInstance):
        """Drop an activity wherever it is (used when forcing run end)."""
        if a.on_cpu:
            self.running.remove(a)
            a.on_cpu = False
        elif a.queued:
            q = self.ready[a.priority]
            q.remove(a)
            if not q:
                del self.ready[a.priority]
            self.n_ready -= 1
            a.queued = False
        a.token += 1


class Engine:
    def __init__(self, config: WorkloadConfig, policy: Policy, options: RunOptions | None = None):
        if not config.scaled:
            config = apply_factors(config)
        self.config = config
        self.policy = policy
        self.opts = options or RunOptions()
        self.device = config.device
        self.now = 0
        self.heap: list = []
        self.seq = 0
        self.horizon = int(round(config.duration_s * NS_PER_S))
        self.cap = self.horizon + int(round(self.opts.drain_cap_s * NS_PER_S))
        self.trace_rows: list | None = [] if self.opts.trace else None
        self.L = self.device.launch_overhead_ns
        self.meter = UtilizationMeter(NS_PER_S)
        self.meter.cores = self.device.cpu_cores
        self.gpu = Gpu(self.device, trace=self._trace_kernel if self.opts.trace else None)
        self.gpu.meter = self.meter
        self.cpu = CpuModel(self, self.device.cpu_cores)
        self.akb = ActiveKernelBuffer()
        if self.opts.fixed_threshold is not None:
            self.calibrator = ThresholdCalibrator(policy.config.th_percentile, initial=self.opts.fixed_threshold,
                                                  warmup_ns=NEVER)
        else:
            self.calibrator = ThresholdCalibrator(
                policy.config.th_percentile,
                warmup_ns=int(self.opts.warmup_s * NS_PER_S),
                recalibrate_ns=int(self.opts.recalibrate_s * NS_PER_S),
                sample_period_ns=int(self.opts.sample_period_ms * NS_PER_MS),
            )
        self.threshold = self.calibrator.value
        self.active: list[ChainInstance] = []
        self.predictors = {c.chain_id: ChainPredictor(c) for c in config.chains}
        self._gpu_suffix = {}
        self._seg_estimates = {}
        self.report = MetricsReport([c.chain_id for c in config.chains])
        self.rng_exec = random.Random(f"exec:{config.seed}")
        self.rng_sync = random.Random(f"sync:{config.seed}")
        self.rng_noise = random.Random(f"noise:{config.seed}")
        self.instance_counter = {c.chain_id: 0 for c in config.chains}
        self.last_instance: dict[int, ChainInstance] = {}
        self.barrier_tasks = self._pick_barrier_tasks(self.opts.cudafree_tasks)
        self.events = 0
        self.overhead_ns = 0
        self.sync_cost_ns = 0
        self.launches = 0
        self.bursts = 0
        self.invariant_checks = 0
        self._recent = deque(maxlen=64)
        policy.attach(self)

    # ------------------------------------------------------------------ setup
    def _pick_barrier_tasks(self, k: int) -> set:
        marked = {(c.chain_id, ti) for c in self.config.chains for ti, t in enumerate(c.tasks) if t.issues_barrier}
        if k <= 0:
            return marked
        order = sorted(((ti, c.chain_id) for c in self.config.chains for ti in range(len(c.tasks))))
        for ti, cid in order[:k]:
            marked.add((cid, ti))
        return marked

    def kernel_estimates(self, chain_id: int, task_index: int, seg_index: int) -> list:
        key = (chain_id, task_index, seg_index)
        est = self._seg_estimates.get(key)
        if est is None:
            pred = self.predictors[chain_id]
            chain = pred.chain
            all_est = pred.kernel_estimates()
            lo = pred.kernel_offsets[task_index]
            for s in chain.tasks[task_index].gpu_segments[:seg_index]:
                lo += len(s)
            n = len(chain.tasks[task_index].gpu_segments[seg_index])
            est = [float(x) for x in all_est[lo:lo + n]]
            self._seg_estimates[key] = est
        return est

    # ------------------------------------------------------------------ queue
    def push(self, t: int, fn, arg):
        if t < self.now:
            raise InvariantViolation(f"event scheduled in the past: {t} < {self.now}")
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, fn, arg))

    def _trace(self, kind: str, inst, detail=""):
        if self.trace_rows is not None:
            self.seq += 1
            self.trace_rows.append((self.now, self.seq, kind, inst.chain_id if inst else "", inst.instance_id if inst else "", detail))

    def _trace_kernel(self, kind: str, k: KernelInstance):
        self._trace(kind, k.inst, f"k={k.index};s={k.stream.stream_id};seq={k.seq}")

    # ------------------------------------------------------------------ run
    def run(self) -> MetricsReport:
        for c in self.config.chains:
            arr = generate_arrivals(c, self.config.duration_s, self.config.jitter_ns, self.config.seed)
            if arr:
                self.push(arr[0], self._arrival, (c, arr, 0))
        if self.horizon > 0:
            self.push(self.calibrator.sample_period_ns, self._sample_threshold, None)
        heap = self.heap
        gpu = self.gpu
        pop = heapq.heappop
        cap = self.cap
        try:
            while True:
                tg = gpu.next_time
                if heap and heap[0][0] < tg:
                    t = heap[0][0]
                    if t > cap:
                        break
                    if t < self.now:
                        raise InvariantViolation(f"clock moved backwards: {self.now} -> {t}")
                    _, _, fn, arg = pop(heap)
                    self.now = t
                    self.events += 1
                    fn(arg)
                elif tg < NEVER:
                    if tg > cap:
                        break
                    if tg < self.now:
                        raise InvariantViolation(f"clock moved backwards: {self.now} -> {tg}")
                    self.now = tg
                    self.events += 1
                    gpu.step(tg)
                else:
                    break
                if not self.active and self.now >= self.horizon and not self._arrivals_pending():
                    break
        except InvariantViolation as e:
            raise InvariantViolation(f"{e}\nrecent events:\n" + "\n".join(map(str, self._recent))) from None
        self._finish_run()
        return self.report

    def _arrivals_pending(self) -> bool:
        return any(fn == self._arrival for _, _, fn, _ in self.heap)

    def _finish_run(self):
        end = max(self.now, self.horizon)
        for a in list(self.active):
            # never finished within the drain window: counted as missed, no latency
            self.cpu.remove(a)
            a.status = MISSED
            a.shed = True
            self._record(a, latency=False)
        self.active.clear()
        r = self.report
        r.duration_s = self.config.duration_s
        r.end_time_ns = end
        self.gpu.flush_meter()
        r.utilization = self.meter.samples(self.horizon)
        r.overhead_us = self.overhead_ns / 1000.0
        r.stats = {
            "events": self.events,
            "kernels_launched": self.launches,
            "kernels_completed": self.gpu.completed,
            "launch_bursts": self.bursts,
            "cpu_preemptions": self.cpu.preemptions,
            "akb_ops": self.akb.ops,
            "akb_peak": self.akb.peak,
            "threshold": self.threshold if math.isfinite(self.threshold) else None,
            "threshold_samples": len(self.calibrator.samples),
            "sync_cost_us": self.sync_cost_ns / 1000.0,
            "gpu_busy_s": self.gpu.busy_ns / NS_PER_S,
            "gpu_max_util": self.gpu.max_u_seen,
            "invariant_checks": self.invariant_checks,
        }
        r.trace = self.trace_rows

    # ------------------------------------------------------------------ arrivals
    def _arrival(self, arg):
        chain, arr, i = arg
        if i + 1 < len(arr):
            self.push(arr[i + 1], self._arrival, (chain, arr, i + 1))
        cid = chain.chain_id
        n = self.instance_counter[cid]
        self.instance_counter[cid] = n + 1
        inst = ChainInstance(chain, n, self.now)
        if self.opts.shed_backlog:
            prev = self.last_instance.get(cid)
            if prev is not None and prev.status == ACTIVE:
                prev.shed = True
        self.last_instance[cid] = inst
        gpu_suf, cpu_suf = self._suffixes(cid)
        inst.gpu_suffix = gpu_suf
        inst.cpu_suffix = cpu_suf
        if self.opts.exec_noise:
            inst.cpu_factor = _trunc_factor(self.rng_exec, chain.cpu_sd_ns, chain.cpu_ns)
            inst.gpu_factor = _trunc_factor(self.rng_exec, chain.gpu_sd_ns, chain.gpu_ns)
        self.report.totals[cid] += 1
        self.active.append(inst)
        self._trace("FrameArrival", inst)
        inst.wake = lambda a=inst: self.push(self.now, self._resume, a)
        inst.gen = self._program(inst)
        self._advance(inst, on_core=False)

    def _suffixes(self, cid: int):
        pred = self.predictors[cid]
        gpu = self._gpu_suffix.get(cid)
        if gpu is None:
            gpu = pred.suffix_sums()[0]
            self._gpu_suffix[cid] = gpu
        cpu_est = pred.cpu_estimates()
        cpu = [0.0] * (len(cpu_est) + 1)
        acc = 0.0
        for j in range(len(cpu_est) - 1, -1, -1):
            acc += cpu_est[j]
            cpu[j] = acc
        return gpu, cpu

    # ------------------------------------------------------------------ urgency
    def evaluate(self, inst: ChainInstance) -> float:
        now = self.now
        rem = (inst.gpu_suffix[inst.gpu_index] + inst.cpu_suffix[inst.cpu_index]) * inst.noise
        denom = inst.t_arr + inst.deadline - rem - now
        if denom == 0:
            ul = UL_MAX
        else:
            ul = NS_PER_MS / denom
            if ul > UL_MAX:
                ul = UL_MAX
            elif ul < -UL_MAX:
                ul = -UL_MAX
        inst.ul = ul
        inst.t_eval = now
        if inst.akb is not None:
            self.akb.refresh(inst, now, ul)
        return ul

    def akb_cost(self, ops: int) -> int:
        if self.policy.uses_akb:
            c = ops * AKB_OP_NS
            self.overhead_ns += c
            return c
        return 0

    def _sample_threshold(self, _):
        m = self.akb.max_urgency()
        if m is not None:
            self.calibrator.sample(m)
        if self.calibrator.maybe_recalibrate(self.now):
            self.threshold = self.calibrator.value
        if self.now < self.horizon:
            self.push(self.now + self.calibrator.sample_period_ns, self._sample_threshold, None)

    # ------------------------------------------------------------------ activities
    def _resume(self, a: ChainInstance):
        self._advance(a, on_core=False)

    def _cpu_done(self, arg):
        a, token = arg
        if token != a.token:
            return
        self.cpu.busy_ns += self.now - a.run_start
        self.meter.cpu(a.run_start, self.now)
        a.remaining = 0
        if a.burst is not None:
            a.burst = None
        self._advance(a, on_core=True)

    def _advance(self, a: ChainInstance, on_core: bool):
        gen = a.gen
        cpu = self.cpu
        while True:
            try:
                req = next(gen)
            except StopIteration:
                if on_core:
                    cpu.release(a)
                return
            op = req[0]
            if op == "cpu":
                d = req[1]
                if d <= 0:
                    continue
                if on_core:
                    cpu.continue_on_core(a, d)
                else:
                    cpu.submit(a, d)
                return
            if op == "launch":
                stream, ks, extra = req[1], req[2], req[3]
                d = extra + len(ks) * self.L
                self._begin_burst(a, stream, ks, extra)
                if on_core:
                    cpu.continue_on_core(a, d)
                else:
                    cpu.submit(a, d)
                return
            if op == "wait":
                stream, seq = req[1], req[2]
                if stream.completed_seq >= seq:
                    continue
                if on_core:
                    cpu.release(a)
                    on_core = False
                self.gpu.wait_stream(stream, seq, a.wake)
                return
            if op == "sleep":
                if on_core:
                    cpu.release(a)
                    on_core = False
                self.push(self.now + req[1], self._sleep_wake, a)
                return
            if op == "barrier":
                if self.gpu.begin_barrier(a.wake):
                    if on_core:
                        cpu.release(a)
                        on_core = False
                    return
                continue
            if op == "barrier_end":
                self.gpu.end_barrier(self.now)
                self._trace("DeviceBarrierDone", a)
                continue
            raise ValueError(f"unknown request {op!r}")

    def _sleep_wake(self, a):
        self._trace("SleepWake", a)
        self._advance(a, on_core=False)

    # ------------------------------------------------------------------ launches
    def _begin_burst(self, a: ChainInstance, stream, ks, extra: int):
        enq = self.gpu.enqueue
        for k in ks:
            enq(stream, k)
        a.burst = [ks, extra, 0, stream]
        a.launched += len(ks)
        self.launches += len(ks)
        self.bursts += 1
        if self.trace_rows is not None:
            self._trace("LaunchIssued", a, f"n={len(ks)};s={stream.stream_id};first={ks[0].index}")

    def _arm_burst(self, a: ChainInstance):
        ks, extra, served, stream = a.burst
        L = self.L
        base = self.now - served + extra
        j0 = 0 if served < extra else (served - extra) // L
        for j in range(j0, len(ks)):
            ks[j].ready = base + (j + 1) * L
        self.gpu.head_ready_changed(stream, self.now)

    def _disarm_burst(self, a: ChainInstance, served_now: int):
        b = a.burst
        b[2] += served_now
        ks, extra, served = b[0], b[1], b[2]
        j0 = 0 if served < extra else (served - extra) // self.L
        for j in range(j0, len(ks)):
            ks[j].ready = NEVER

    # ------------------------------------------------------------------ the instance program
    def _program(self, inst: ChainInstance):
        pol = self.policy
        chain = inst.chain
        dev = self.device
        self.evaluate(inst)  # FrameArrival
        pol.on_arrival(inst)
        cpu_idx = 0
        k_idx = 0
        scale_gpu = dev.kernel_time_scale * inst.gpu_factor
        for ti, task in enumerate(chain.tasks):
            inst.task_index = ti
            if self.opts.noise_pct:
                p = self.opts.noise_pct / 100.0
                inst.noise = 1.0 + self.rng_noise.uniform(-p, p)
            self.evaluate(inst)
            if inst.shed or pol.early_exit(inst):
                self._exit(inst, early=not inst.shed)
                return
            segs = task.gpu_segments
            stream = None
            for si, cpu_ns in enumerate(task.cpu_segment_ns):
                inst.cpu_index = cpu_idx
                self.evaluate(inst)  # CpuSegmentStart
                pol.on_cpu_segment_start(inst)
                t0 = self.now
                yield ("cpu", max(1, int(cpu_ns * inst.cpu_factor)) if cpu_ns else 0)
                if cpu_ns:
                    self.predictors[inst.chain_id].cpu[cpu_idx].update(self.now - t0)
                self._trace("CpuSegmentDone", inst, f"seg={cpu_idx}")
                cpu_idx += 1
                if si < len(segs):
                    kernels = segs[si]
                    if stream is None:
                        self.evaluate(inst)  # first launch of the task instance
                        stream = pol.bind_stream(inst, ti)
                    yield from self._gpu_segment(inst, stream, ti, si, kernels, k_idx, cpu_idx, scale_gpu)
                    k_idx += len(kernels)
            if (inst.chain_id, ti) in self.barrier_tasks:
                yield ("barrier",)
                yield ("cpu", dev.barrier_cost_ns)
                yield ("barrier_end",)
            self.predictors[inst.chain_id].record_task_lookups(ti)
            pol.on_task_end(inst, ti)
        self._complete(inst)

    def _gpu_segment(self, inst, stream, ti, si, kernels, k0, next_cpu, scale):
        pol = self.policy
        mode = pol.sync_mode
        ends = pol.batch_ends(inst, ti, si, kernels)
        exempt = pol.config.util_exemption
        sleep_ns = pol.config.sleep_interval_ns
        wake_ns = self.device.context_switch_ns
        nk = len(kernels)
        marks: list[tuple[int, int]] = []  # (batch_no, last seq)
        lo = 0
        for b, hi in enumerate(ends):
            if mode == OVERLAP and b >= 2:
                bno, seq = marks[b - 2]
                yield from self._sync(inst, stream, seq, bno)
            pos = lo
            while pos < hi:
                self.evaluate(inst)  # launch decision
                if pol.delay_enabled and pol.should_delay(inst):
                    q = pos
                    while q < hi and kernels[q].utilization < exempt:
                        q += 1
                    if q == pos:
                        # Delay: sleep, wake, re-evaluate own urgency, re-check
                        inst.delays += 1
                        yield ("sleep", sleep_ns)
                        yield ("cpu", wake_ns + self.akb_cost(1))
                        continue
                    end = q
                else:
                    end = hi
                seq = self._launch(inst, stream, kernels, pos, end, k0, scale)
                marks.append((inst.batch_no, seq))
                yield ("launch", stream, self._pending_ks, self._pending_cost)
                inst.gpu_index = k0 + end
                if end == nk:
                    inst.cpu_index = next_cpu
                pos = end
            # batches split by exempt launches share the closing mark of the batch
            if len(marks) > b + 1:
                bno, seq = marks[-1]
                del marks[b:]
                marks.append((bno, seq))
            if mode == PER_KERNEL or mode == BATCHED:
                bno, seq = marks[b]
                yield from self._sync(inst, stream, seq, bno)
            lo = hi
        if mode != PER_KERNEL and mode != BATCHED:
            bno, seq = marks[-1]
            yield from self._sync(inst, stream, seq, bno)

    def _launch(self, inst, stream, kernels, lo, hi, k0, scale) -> int:
        """Prepare one launch burst; returns the stream seq of its last kernel."""
        if self.opts.record_collisions and self.akb.groups:
            self._collisions(inst, stream)
        ks = []
        for j in range(lo, hi):
            spec = kernels[j]
            w = spec.exec_ns * scale
            ks.append(KernelInstance(w if w >= 1.0 else 1.0, spec.utilization, inst, k0 + j, spec.is_memcpy))
        inst.batch_no += 1
        self.akb.insert(inst, stream, inst.batch_no, ks)
        self._pending_ks = ks
        self._pending_cost = self.akb_cost(hi - lo + 1)
        return stream.next_seq + len(ks) - 1

    def _sync(self, inst, stream, seq, batch_no):
        yield ("wait", stream, seq)
        lo_c, hi_c = self.device.sync_cost_ns
        cost = self.rng_sync.randint(lo_c, hi_c) if hi_c > lo_c else lo_c
        self.sync_cost_ns += cost
        removed = self.akb.remove_through(inst, batch_no)
        yield ("cpu", cost + self.akb_cost(removed))
        self._trace("SyncSatisfied", inst, f"seq={seq}")
        if self.policy.sync_mode != ASYNC:
            self.evaluate(inst)  # BatchSync

    def _collisions(self, inst, stream):
        th = self.threshold
        ul = inst.ul
        prio = stream.priority
        groups = self.akb.groups
        own = inst.akb
        n_tasks = len(groups) + (0 if own is not None else 1)
        rep = self.report
        cid = inst.chain_id
        for g in groups:
            if g.chain_id == cid:
                continue
            gu = g.ul
            gp = g.stream.priority
            if prio == gp:
                if ul == gu:
                    continue
                kind = "PriorityCollision"
            elif (ul > gu and prio > gp) or (gu > ul and gp > prio):
                kind = "InvertedBinding"
            else:
                continue
            urgent = ul >= th or gu >= th
            rep.add_collision(self.now, kind, (cid, g.chain_id), (prio, gp), (ul, gu), n_tasks, urgent)

    # ------------------------------------------------------------------ endings
    def _exit(self, inst: ChainInstance, early: bool):
        inst.early_exited = early
        inst.status = MISSED
        self.akb.purge(inst)
        self._trace("EarlyExit" if early else "Shed", inst)
        self._record(inst, latency=False)
        self.active.remove(inst)

    def _complete(self, inst: ChainInstance):
        inst.completion = self.now
        inst.status = COMPLETED if self.now <= inst.t_arr + inst.deadline else MISSED
        if inst.akb is not None:
            raise InvariantViolation(f"{inst} finished with active AKB entries")
        n = inst.chain.num_kernels
        self.invariant_checks += 1
        if inst.launched != n or inst.completed_kernels != n:
            raise InvariantViolation(
                f"{inst}: kernel conservation broken (spec {n}, launched {inst.launched}, "
                f"completed {inst.completed_kernels})"
            )
        self._trace("ChainCompleted", inst, "met" if inst.status == COMPLETED else "late")
        self._record(inst, latency=True)
        self.active.remove(inst)

    def _record(self, inst: ChainInstance, latency: bool):
        lat = (inst.completion - inst.t_arr) if latency and inst.completion is not None else None
        self.report.add_instance(InstanceRecord(
            inst.chain_id, inst.instance_id, inst.t_arr, inst.t_arr + inst.deadline,
            inst.completion, inst.status, inst.early_exited, inst.shed, lat,
        ))
        self._recent.append((self.now, repr(inst), inst.status))


def _trunc_factor(rng: random.Random, sd_ns: int, mean_ns: int) -> float:
    """Multiplicative variation with relative sd, truncated to +-3 sd and > 0."""
    if not sd_ns or not mean_ns:
        return 1.0
    rel = sd_ns / mean_ns
    z = max(-3.0, min(3.0, rng.gauss(0.0, 1.0)))
    return max(0.05, 1.0 + rel * z)


def run(config: WorkloadConfig, policy: Policy, options: RunOptions | None = None) -> MetricsReport:
    """Simulate `config` under `policy` and return the metrics report."""
    eng = Engine(config, policy, options)
    rep = eng.run()
    rep.manifest = {
        "seed": config.seed,
        "policy": policy.describe(),
        "duration_s": config.duration_s,
        "f_a": config.f_a,
        "f_d": config.f_d,
        "f_tight": config.f_tight,
        "tight_chains": list(eng.config.tight_chains),
        "device": eng.device.profile,
        "contention_alpha": eng.device.contention_alpha,
        "options": {
            "noise_pct": eng.opts.noise_pct,
            "cudafree_tasks": eng.opts.cudafree_tasks,
            "shed_backlog": eng.opts.shed_backlog,
        },
    }
    return rep
