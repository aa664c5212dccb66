"""Synchronous decoupled greedy training.

Three drivers share one per-module update routine:

* :func:`train_sync`: every batch visits modules in index order, each
  module stepping on its own local loss;
* :func:`train_sequential`: the classic greedy baseline, one module at a time
  with its predecessors frozen;
* :func:`train_pipelined`: one thread per module connected by bounded FIFO
  channels. Same arithmetic as :func:`train_sync`, overlapped in time.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .data import BatchStream
from .diagnostics import DriftMonitor
from .greedy_net import Partition
from .metrics import MetricRecord, TrainTrace
from .tensor import LrSchedule, grad_norm_sq, sgd_step, zero_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.2
    decay_period: int = 15

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay_factor, self.decay_period)


@dataclass
class TrainState:
    partition: Partition
    optim: OptimConfig
    batches_per_epoch: int
    epochs: int
    steps: list[int] = field(default_factory=list)
    frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.partition)
        self.steps = self.steps or [0] * n
        self.frozen = self.frozen or [False] * n
        self.schedule = self.optim.schedule()

    @property
    def budget(self) -> int:
        """Updates each module performs before it stops."""
        return self.epochs * self.batches_per_epoch

    def epoch_of(self, j: int) -> int:
        return self.steps[j] // self.batches_per_epoch

    def lr(self, j: int) -> float:
        return self.schedule.rate(self.epoch_of(j))


@dataclass
class StepResult:
    loss: float
    output: np.ndarray
    correct: int
    grad_norm_sq: float
    lr: float


def module_update(state: TrainState, j: int, x: np.ndarray, y: np.ndarray) -> StepResult:
    """One local step of module ``j``: loss, backward, SGD update."""
    module = state.partition[j]
    params = module.params()
    zero_grad(params)
    loss, out, logits = module.local_loss(x, y, train=True)
    gn = grad_norm_sq(params)
    lr = state.lr(j)
    o = state.optim
    sgd_step(params, lr, o.momentum, o.weight_decay)
    state.steps[j] += 1
    correct = int((logits.argmax(axis=1) == y).sum())
    return StepResult(loss, out, correct, gn, lr)


def param_digest(params) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in params:
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def evaluate(partition: Partition, x: np.ndarray, y: np.ndarray,
             batch_size: int = 512) -> list[float]:
    """Test accuracy of every module's head (evaluation mode)."""
    n_mod = len(partition)
    correct = np.zeros(n_mod)
    for i in range(0, len(x), batch_size):
        h = x[i:i + batch_size]
        yb = y[i:i + batch_size]
        for j, m in enumerate(partition.modules):
            h = m.forward(h, train=False)
            correct[j] += (m.head.forward(h, train=False).argmax(axis=1) == yb).sum()
    return list(correct / len(x))


def module_inputs(partition: Partition, x: np.ndarray) -> list[np.ndarray]:
    """Inputs of every module for a probe batch, evaluation mode."""
    feats = [x]
    for m in partition.modules[:-1]:
        feats.append(m.forward(feats[-1], train=False))
    return feats


class _Recorder:
    """Shared bookkeeping of the single-threaded drivers."""

    def __init__(self, state: TrainState, test, probe, record_trajectory: bool,
                 eval_every: int | None, drift_seed: int = 0):
        n = len(state.partition)
        self.state = state
        self.test = test
        self.probe = probe
        self.trace = TrainTrace.for_modules(n)
        self.record_trajectory = record_trajectory
        self.eval_every = eval_every
        self.drift = DriftMonitor(n, seed=drift_seed)
        self.window_loss = [[] for _ in range(n)]
        self.window_correct = [0] * n
        self.window_seen = [0] * n
        self.global_step = 0

    def step(self, j, res: StepResult, batch_size: int):
        t = self.trace
        t.losses[j].append(res.loss)
        t.grad_norms[j].append(res.grad_norm_sq)
        t.lrs[j].append(res.lr)
        if self.record_trajectory:
            t.digests[j].append(param_digest(self.state.partition[j].params()))
        self.window_loss[j].append(res.loss)
        self.window_correct[j] += res.correct
        self.window_seen[j] += batch_size
        self.global_step += 1

    def evaluate(self, modules, extra=None):
        """Append one record per module in ``modules`` and reset their windows."""
        state = self.state
        accs = evaluate(state.partition, *self.test) if self.test is not None else None
        feats = module_inputs(state.partition, self.probe) if self.probe is not None else None
        extra = extra or {}
        for j in modules:
            drift = self.drift.observe(j, feats[j]) if feats is not None else float("nan")
            gn = self.trace.grad_norms[j]
            rec = MetricRecord(
                step=self.global_step,
                module_id=j,
                epoch_equivalent=state.steps[j] / state.batches_per_epoch,
                train_loss=float(np.mean(self.window_loss[j])) if self.window_loss[j] else float("nan"),
                train_acc=(self.window_correct[j] / self.window_seen[j]) if self.window_seen[j] else float("nan"),
                test_acc=accs[j] if accs is not None else float("nan"),
                grad_norm=float(np.sqrt(gn[-1])) if gn else float("nan"),
                drift=drift,
                **{k: v[j] for k, v in extra.items()},
            )
            self.trace.records.append(rec)
            self.window_loss[j] = []
            self.window_correct[j] = 0
            self.window_seen[j] = 0
        self.trace.drift = self.drift.trace

    def finish(self):
        if self.test is not None:
            self.trace.final_test_acc = evaluate(self.state.partition, *self.test)
        return self.trace


def train_sync(stream: BatchStream, state: TrainState, test=None, probe=None,
               record_trajectory: bool = False, eval_every: int | None = None) -> TrainTrace:
    """Decoupled synchronous training over ``state.epochs`` passes of ``stream``.

    For each batch the modules are updated in index order; module ``j`` consumes
    the detached output module ``j-1`` produced on this batch before its own
    update. ``eval_every`` (batches) defaults to half an epoch.
    """
    rec = _Recorder(state, test, probe, record_trajectory, eval_every)
    n = len(state.partition)
    every = eval_every or max(1, stream.batches_per_epoch // 2)
    done = 0
    for e in range(state.epochs):
        for x, y in stream.epoch(e):
            h = x
            for j in range(n):
                res = module_update(state, j, h, y)
                rec.step(j, res, len(y))
                h = res.output
            done += 1
            if done % every == 0:
                rec.evaluate(range(n))
    return rec.finish()


def train_sequential(stream: BatchStream, state: TrainState, test=None, probe=None,
                     record_trajectory: bool = False,
                     eval_every: int | None = None) -> TrainTrace:
    """Greedy baseline: module ``j`` trains its full budget on frozen predecessors."""
    rec = _Recorder(state, test, probe, record_trajectory, eval_every)
    every = eval_every or max(1, stream.batches_per_epoch // 2)
    part = state.partition
    for j in range(len(part)):
        done = 0
        for e in range(state.epochs):
            for x, y in stream.epoch(e):
                h = part.forward(x, upto=j, train=False) if j else x
                res = module_update(state, j, h, y)
                rec.step(j, res, len(y))
                done += 1
                if done % every == 0:
                    rec.evaluate([j])
        state.frozen[j] = True
    return rec.finish()


class PipelineError(RuntimeError):
    def __init__(self, module: int, cause: BaseException):
        super().__init__(f"module {module} worker failed: {cause!r}")
        self.module = module
        self.cause = cause


_END = object()


def _put(q: queue.Queue, item, abort: threading.Event) -> bool:
    while not abort.is_set():
        try:
            q.put(item, timeout=0.05)
            return True
        except queue.Full:
            continue
    return False


def _get(q: queue.Queue, abort: threading.Event):
    while not abort.is_set():
        try:
            return q.get(timeout=0.05)
        except queue.Empty:
            continue
    return _END


def train_pipelined(stream: BatchStream, state: TrainState, test=None, capacity: int = 2,
                    record_trajectory: bool = False, delay: float = 0.0,
                    fail_at: tuple[int, int] | None = None) -> TrainTrace:
    """Run :func:`train_sync` with one worker thread per module.

    Adjacent workers are linked by FIFO channels holding at most ``capacity``
    ``(x_j, y)`` pairs. ``delay`` adds a synthetic per-step sleep (seconds) to
    every worker; ``fail_at=(module, step)`` injects a failure for testing.
    """
    if capacity < 1:
        raise ValueError("channel capacity must be >= 1")
    part = state.partition
    n = len(part)
    channels = [queue.Queue(maxsize=capacity) for _ in range(n - 1)]
    collector: queue.Queue = queue.Queue()
    abort = threading.Event()
    failures: list[tuple[int, BaseException]] = []
    trace = TrainTrace.for_modules(n)
    timings = [[] for _ in range(n)]

    def source():
        yield from stream.epochs(state.epochs)

    def worker(j: int):
        try:
            inputs = source() if j == 0 else None
            t = 0
            while True:
                if j == 0:
                    item = next(inputs, _END)
                else:
                    item = _get(channels[j - 1], abort)
                if item is _END:
                    break
                x, y = item
                if fail_at is not None and fail_at == (j, t):
                    raise RuntimeError(f"injected failure at step {t}")
                module = part[j]
                params = module.params()
                zero_grad(params)
                loss, out, logits = module.local_loss(x, y, train=True)
                if j < n - 1 and not _put(channels[j], (out, y), abort):
                    break
                gn = grad_norm_sq(params)
                lr = state.lr(j)
                sgd_step(params, lr, state.optim.momentum, state.optim.weight_decay)
                state.steps[j] += 1
                if delay:
                    time.sleep(delay)
                timings[j].append(time.perf_counter())
                digest = param_digest(params) if record_trajectory else None
                collector.put((j, loss, gn, lr, int((logits.argmax(1) == y).sum()), len(y), digest))
                t += 1
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            failures.append((j, exc))
            abort.set()
        finally:
            if j < n - 1 and not abort.is_set():
                _put(channels[j], _END, abort)

    threads = [threading.Thread(target=worker, args=(j,), name=f"dgl-module-{j}", daemon=True)
               for j in range(n)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if failures:
        j, exc = min(failures, key=lambda f: f[0])
        raise PipelineError(j, exc)

    window = [[[], 0, 0] for _ in range(n)]
    bpe = state.batches_per_epoch
    while not collector.empty():
        j, loss, gn, lr, correct, seen, digest = collector.get()
        trace.losses[j].append(loss)
        trace.grad_norms[j].append(gn)
        trace.lrs[j].append(lr)
        if digest is not None:
            trace.digests[j].append(digest)
        w = window[j]
        w[0].append(loss)
        w[1] += correct
        w[2] += seen
        if len(trace.losses[j]) % bpe == 0:
            trace.records.append(MetricRecord(
                step=len(trace.losses[j]), module_id=j,
                epoch_equivalent=len(trace.losses[j]) / bpe,
                train_loss=float(np.mean(w[0])), train_acc=w[1] / w[2],
                grad_norm=float(np.sqrt(gn))))
            window[j] = [[], 0, 0]
    trace.records.sort(key=lambda r: (r.epoch_equivalent, r.module_id))
    trace.extra["step_times"] = timings
    if test is not None:
        trace.final_test_acc = evaluate(part, *test)
        for r in trace.records:
            if r.epoch_equivalent == state.epochs:
                r.test_acc = trace.final_test_acc[r.module_id]
    return trace
