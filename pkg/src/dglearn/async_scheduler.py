"""Buffered asynchronous training.

The default driver is a single-threaded event loop. Every tick draws one
module ``j`` from the delay distribution; that module reads a batch (from the
data stream for the first module, otherwise from the replay buffer filled by
its predecessor), takes one local step, and writes its output to its own
buffer. A slow module is modelled by drawing it less often. Once a module
has spent its update budget it keeps forwarding, in evaluation mode, but no
longer learns. The run ends when every module has spent its budget.

With a quantizer attached, writes go through a per-edge encoder codebook and
reads through the matching decoder copy, which is refreshed by a
:class:`~dglearn.vq_codec.SyncPolicy`.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import BatchStream
from .metrics import TrainTrace
from .replay_buffer import ReplayBuffer
from .sync_dgl import PipelineError, TrainState, _Recorder, module_update
from .vq_codec import DEFAULT_DEAD_AFTER, FLOAT_BITS, Codebook, SyncPolicy

log = logging.getLogger(__name__)

_DRAW_CHUNK = 4096


@dataclass(frozen=True)
class DelayModel:
    """Selection probabilities of the modules, optionally with a named slow one."""

    pmf: tuple[float, ...]
    slow_module: int | None = None

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim != 1 or len(p) < 1:
            raise ValueError("pmf must be a non-empty vector")
        if np.any(p <= 0):
            raise ValueError("every module needs a positive selection probability")
        if not np.isclose(p.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError(f"pmf sums to {p.sum()!r}, not 1")
        if self.slow_module is not None and not 0 <= self.slow_module < len(p):
            raise ValueError(f"slow module {self.slow_module} outside [0, {len(p)})")

    @property
    def J(self) -> int:
        return len(self.pmf)

    @property
    def slowdown(self) -> float:
        if self.slow_module is None:
            return 1.0
        return slowdown_from_pmf(self.pmf, self.slow_module)

    def draws(self, rng: np.random.Generator):
        """Endless stream of module indices."""
        p = np.asarray(self.pmf)
        while True:
            yield from rng.choice(self.J, size=_DRAW_CHUNK, p=p).tolist()


def uniform_delay(J: int) -> DelayModel:
    return DelayModel(tuple([1.0 / J] * J))


def pmf_from_slowdown(J: int, slow_module: int, S: float) -> DelayModel:
    """Pmf in which ``slow_module`` is drawn ``S`` times less often than each
    of the others: ``p* = 1 / (S (J - 1) + 1)``."""
    if J < 2:
        raise ValueError("a single module cannot be delayed relative to others")
    if S <= 0:
        raise ValueError("slowdown must be positive")
    p_slow = 1.0 / (S * (J - 1) + 1.0)
    # deriving the others from p_slow (rather than renormalizing) keeps p_slow
    # correctly rounded and the ratio S exact up to a couple of ulps
    pmf = [S * p_slow] * J
    pmf[slow_module] = p_slow
    return DelayModel(tuple(pmf), slow_module)


def slowdown_from_pmf(pmf: Sequence[float], slow_module: int) -> float:
    """Mean selection probability of the other modules over that of ``slow_module``.

    For a normalized pmf this equals ``(1 / (J - 1)) (1 / p* - 1)``; the ratio
    form avoids the cancellation in ``1 / p* - 1`` when ``S (J - 1)`` is small.
    """
    J = len(pmf)
    if J < 2:
        raise ValueError("a single module cannot be delayed relative to others")
    others = math.fsum(p for i, p in enumerate(pmf) if i != slow_module) / (J - 1)
    return others / pmf[slow_module]


@dataclass
class QuantizerConfig:
    atoms: int = 256
    groups: int = 32
    decay: float = 0.99
    policy: SyncPolicy = field(default_factory=lambda: SyncPolicy.at_rate(1))
    frozen_ema: bool = False
    seed: int = 0
    dead_after: int = DEFAULT_DEAD_AFTER  # 0 disables dead-atom replacement

    def codebooks(self, channels: Sequence[int]) -> list[Codebook]:
        return [Codebook(c, min(self.groups, c), self.atoms, self.decay,
                         dead_after=self.dead_after, seed=self.seed + i)
                for i, c in enumerate(channels)]


class _Edge:
    """Buffer between module ``j`` and ``j + 1`` plus its codec state."""

    def __init__(self, capacity: int, encoder: Codebook | None, in_channels: int,
                 policy: SyncPolicy | None, frozen_ema: bool = False):
        self.buffer = ReplayBuffer(capacity)
        self.frozen_ema = frozen_ema
        self.encoder = encoder
        self.decoder = encoder.copy() if encoder is not None else None
        self.in_channels = in_channels
        self.policy = policy
        self.bits_sent = 0
        self.syncs = 0

    def write(self, out: np.ndarray, y: np.ndarray, learn: bool) -> None:
        if self.encoder is None:
            self.buffer.push(out, y)
            self.bits_sent += FLOAT_BITS * out.size
            return
        enc = self.encoder
        if not enc.initialized:
            enc.initialize(out)
        # encode, ship the dictionaries if due, then let the encoder learn from
        # the same assignment; the decoder thus always holds the exact atoms
        # some past payload was encoded with
        assignment = enc.assign(out)
        q = enc.encode(out, y, assignment)
        step = self.buffer.writes + 1
        if self.policy.fires(step) or not self.decoder.initialized:
            self.decoder.load_atoms(enc)
            self.syncs += 1
            # a module node exchanges both its input and output dictionaries
            self.bits_sent += FLOAT_BITS * (enc.channels + self.in_channels) * enc.C
        self.bits_sent += q.index_bits
        self.buffer.push(q, y)
        if learn or self.frozen_ema:
            # dead atoms jump to new values, so they are only replaced right
            # before a write that ships the dictionaries; otherwise payloads
            # would reference atoms the decoder has never seen
            enc.ema_update(out, assignments=assignment, replace_dead=self.policy.fires(step + 1))

    def read(self):
        entry = self.buffer.try_sample()
        if entry is None:
            return None
        staleness = self.buffer.writes - 1 - entry.seq
        x = entry.payload if self.decoder is None else self.decoder.decode(entry.payload)
        return x, entry.labels, staleness

    def buffer_bytes(self) -> int:
        return self.buffer.stats(self.encoder.bits if self.encoder is not None else 0).total_bytes


def _edges(state: TrainState, capacity: int, quantizer: QuantizerConfig | None) -> list[_Edge]:
    part = state.partition
    chans = [m.out_shape[0] for m in part.modules[:-1]]
    ins = [m.in_shape[0] for m in part.modules[:-1]]
    books = quantizer.codebooks(chans) if quantizer is not None else [None] * len(chans)
    policy = quantizer.policy if quantizer is not None else None
    frozen_ema = quantizer.frozen_ema if quantizer is not None else False
    return [_Edge(capacity, cb, c_in, policy, frozen_ema) for cb, c_in in zip(books, ins)]


def run_async(stream: BatchStream, state: TrainState, delay: DelayModel, capacity: int = 2,
              seed: int = 0, test=None, probe=None, eval_every: int | None = None,
              record_trajectory: bool = False, quantizer: QuantizerConfig | None = None,
              starvation_warning: int = 10_000, max_ticks: int | None = None) -> TrainTrace:
    """Event-loop simulation of buffered asynchronous training.

    ``capacity`` is the buffer size in batches. ``state.budget`` updates are
    performed by every module. ``eval_every`` (ticks) defaults to one
    epoch-equivalent of ticks, ``J * batches_per_epoch``. The schedule,
    starvation counts, buffer staleness and bit counts are stored on the
    returned trace. The whole run is a deterministic function of its inputs.
    """
    part = state.partition
    J = len(part)
    if delay.J != J:
        raise ValueError(f"delay model covers {delay.J} modules, partition has {J}")
    budget = state.budget
    edges = _edges(state, capacity, quantizer)
    rec = _Recorder(state, test, probe, record_trajectory, None)
    trace = rec.trace
    staleness: list[list[int]] = [[] for _ in range(J)]
    every = eval_every or J * stream.batches_per_epoch
    max_ticks = max_ticks or 1000 * J * budget
    source = stream.cycle()
    draws = delay.draws(np.random.default_rng(seed))
    streak = [0] * J
    warned = [False] * J
    tick = 0

    def snapshot_extra():
        return {
            "bits_sent": [e.bits_sent for e in edges] + [0],
            "buffer_bytes": [e.buffer_bytes() for e in edges] + [0],
            "starvation_count": list(trace.starvation),
        }

    while min(state.steps) < budget:
        if tick >= max_ticks:
            raise RuntimeError(f"async run exceeded {max_ticks} ticks")
        tick += 1
        j = next(draws)
        trace.schedule.append(j)
        learning = state.steps[j] < budget
        if j == J - 1 and not learning:
            pass
        elif j == 0:
            x, y = next(source)
            _tick(state, j, x, y, learning, edges, rec)
        else:
            got = edges[j - 1].read()
            if got is None:
                trace.starvation[j] += 1
                streak[j] += 1
                if streak[j] >= starvation_warning and not warned[j]:
                    log.warning("module %d starved for %d consecutive draws", j, streak[j])
                    warned[j] = True
            else:
                streak[j] = 0
                x, y, stale = got
                staleness[j].append(stale)
                _tick(state, j, x, y, learning, edges, rec)
        if tick % every == 0:
            rec.evaluate(range(J), snapshot_extra())
    rec.evaluate(range(J), snapshot_extra())
    trace.bits_sent = [e.bits_sent for e in edges] + [0]
    trace.buffer_bytes = [e.buffer_bytes() for e in edges] + [0]
    trace.extra.update(staleness=staleness, ticks=tick,
                       syncs=[e.syncs for e in edges], writes=[e.buffer.writes for e in edges],
                       pmf=list(delay.pmf))
    return rec.finish()


def _tick(state, j, x, y, learning, edges, rec):
    if learning:
        res = module_update(state, j, x, y)
        rec.step(j, res, len(y))
        out = res.output
    else:
        out = state.partition[j].forward(x, train=False)
    if j < len(edges):
        edges[j].write(out, y, learning)


def run_async_quantized(stream: BatchStream, state: TrainState, delay: DelayModel,
                        quantizer: QuantizerConfig, capacity: int = 2, **kwargs) -> TrainTrace:
    """:func:`run_async` with every inter-module buffer quantized."""
    return run_async(stream, state, delay, capacity, quantizer=quantizer, **kwargs)


def draw_schedule(delay: DelayModel, n: int, seed: int = 0) -> list[int]:
    """The first ``n`` module selections a run seeded with ``seed`` makes."""
    draws = delay.draws(np.random.default_rng(seed))
    return [next(draws) for _ in range(n)]


@dataclass
class ScheduleReport:
    counts: list[int]
    starvation: list[int]
    staleness: list[dict[int, int]]
    chi_square: float = float("nan")
    p_value: float = float("nan")

    @property
    def total(self) -> int:
        return sum(self.counts)


def schedule_report(schedule: Sequence[int] | TrainTrace, pmf: Sequence[float] | None = None,
                    J: int | None = None) -> ScheduleReport:
    """Selection counts per module, with a chi-square test against ``pmf``."""
    starvation: list[int] = []
    staleness: list[dict[int, int]] = []
    if isinstance(schedule, TrainTrace):
        trace = schedule
        schedule = trace.schedule
        starvation = list(trace.starvation)
        staleness = [dict(sorted(Counter(s).items())) for s in trace.extra.get("staleness", [])]
        pmf = pmf if pmf is not None else trace.extra.get("pmf")
    if J is None:
        J = len(pmf) if pmf is not None else (max(schedule) + 1 if len(schedule) else 0)
    counts = np.bincount(np.asarray(schedule, dtype=np.int64), minlength=J).tolist() if J else []
    report = ScheduleReport(counts, starvation or [0] * J, staleness or [{} for _ in range(J)])
    n = sum(counts)
    if pmf is not None and n > 0 and J > 1:
        expected = np.asarray(pmf) * n
        res = stats.chisquare(counts, expected)
        report.chi_square, report.p_value = float(res.statistic), float(res.pvalue)
    return report


@dataclass
class SweepPoint:
    slowdown: float
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def spread(self) -> float:
        return float(np.std(self.values))


def slowdown_sweep(run_one: Callable[[DelayModel, int], float], J: int,
                   slowdowns: Sequence[float], seeds: Sequence[int],
                   positions: Sequence[int] | None = None) -> list[SweepPoint]:
    """Run ``run_one(delay, seed)`` for every slow position and seed.

    ``S = 1`` is position independent and is run once per seed.
    """
    positions = list(range(J)) if positions is None else list(positions)
    points = []
    for S in slowdowns:
        values = []
        for seed in seeds:
            if S == 1:
                values.append(run_one(uniform_delay(J), seed))
                continue
            for j in positions:
                values.append(run_one(pmf_from_slowdown(J, j, S), seed))
        points.append(SweepPoint(S, values))
    return points


def run_async_threaded(stream: BatchStream, state: TrainState, capacity: int = 2,
                       step_delay: Sequence[float] | None = None,
                       quantizer: QuantizerConfig | None = None,
                       idle_sleep: float = 1e-3, timeout: float | None = None) -> TrainTrace:
    """One thread per module with replay buffers as the only shared state.

    Module speed is set by ``step_delay`` (seconds slept after each step).
    Interleavings depend on the operating system scheduler, so results are
    not reproducible; use :func:`run_async` for controlled experiments.
    """
    part = state.partition
    J = len(part)
    budget = state.budget
    edges = _edges(state, capacity, quantizer)
    step_delay = list(step_delay) if step_delay is not None else [0.0] * J
    trace = TrainTrace.for_modules(n=J)
    done = threading.Event()
    failures: list[tuple[int, BaseException]] = []
    lock = threading.Lock()
    finished = [False] * J
    source = stream.cycle()

    def worker(j: int):
        try:
            while not done.is_set():
                if j == 0:
                    x, y = next(source)
                else:
                    got = edges[j - 1].read()
                    if got is None:
                        trace.starvation[j] += 1
                        time.sleep(idle_sleep)
                        continue
                    x, y, _ = got
                learning = state.steps[j] < budget
                if learning:
                    res = module_update(state, j, x, y)
                    trace.losses[j].append(res.loss)
                    trace.grad_norms[j].append(res.grad_norm_sq)
                    trace.lrs[j].append(res.lr)
                    out = res.output
                else:
                    out = part[j].forward(x, train=False)
                if j < J - 1:
                    edges[j].write(out, y, learning)
                if state.steps[j] >= budget and not finished[j]:
                    with lock:
                        finished[j] = True
                        if all(finished):
                            done.set()
                if j == J - 1 and finished[j]:
                    # nothing downstream to feed
                    done.wait(idle_sleep)
                if step_delay[j]:
                    time.sleep(step_delay[j])
        except BaseException as exc:  # noqa: BLE001 - reported below
            failures.append((j, exc))
            done.set()

    threads = [threading.Thread(target=worker, args=(j,), name=f"dgl-async-{j}", daemon=True)
               for j in range(J)]
    for th in threads:
        th.start()
    for th in threads:
        th.join(timeout)
    if failures:
        j, exc = min(failures, key=lambda f: f[0])
        raise PipelineError(j, exc)
    trace.bits_sent = [e.bits_sent for e in edges] + [0]
    trace.buffer_bytes = [e.buffer_bytes() for e in edges] + [0]
    return trace
