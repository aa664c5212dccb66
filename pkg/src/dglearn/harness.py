"""Experiment runner behind the ``dglearn`` command line.

:func:`run` turns an :class:`~dglearn.config.ExperimentConfig` into a
training run and writes three files to the output directory:

* ``metrics.csv``: one row per (module, evaluation point);
* ``summary.json``: final per-module accuracy, bit totals and, for quantized
  runs, the compression ratios predicted by the bit-accounting formulas;
* ``config.ini``: the fully resolved configuration.

In the single-threaded modes (everything except ``pipelined``) rerunning a
saved ``config.ini`` reproduces ``metrics.csv`` byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as datasets
from .async_scheduler import (DelayModel, QuantizerConfig, pmf_from_slowdown, run_async,
                              uniform_delay)
from .config import ConfigError, ExperimentConfig
from .greedy_net import Partition, build_partition, reference_channels
from .metrics import TrainTrace, write_csv
from .replay_buffer import capacity_from_samples
from .sync_dgl import (OptimConfig, PipelineError, TrainState, train_pipelined,
                       train_sequential, train_sync)
from .vq_codec import SyncPolicy, bandwidth_compression, buffer_compression, compression_table

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

POOL_BEFORE = (1, 3)


def load_dataset(cfg: ExperimentConfig) -> datasets.Dataset:
    """Materialize the dataset described by ``cfg.data``."""
    d = cfg.data
    dtype = np.dtype(cfg.run.dtype)
    if d.dataset == "synthetic-gaussians":
        return datasets.synthetic_gaussians(d.classes, d.size, d.n, d.data_seed, noise=d.noise,
                                            n_test=d.n_test, dtype=dtype)
    if d.dataset == "synthetic-spirals":
        return datasets.synthetic_spirals(d.classes, d.size, d.n, d.data_seed, noise=d.noise,
                                          n_test=d.n_test, dtype=dtype)
    if not d.path:
        raise ConfigError(f"data.path is required for {d.dataset}")
    root = Path(d.path)
    subset = d.subset_n or None
    if d.dataset == "cifar10-binary":
        train = sorted(root.glob("data_batch_*.bin"))
        if not train:
            raise FileNotFoundError(f"no data_batch_*.bin files under {root}")
        return datasets.cifar10_binary(train, root / "test_batch.bin", subset, dtype)
    return datasets.idx_images(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte",
                               root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte",
                               subset, dtype)


def build_network(cfg: ExperimentConfig, ds: datasets.Dataset) -> Partition:
    m = cfg.model
    channels = reference_channels(m.width, m.modules, POOL_BEFORE)
    return build_partition(channels, ds.n_classes, ds.input_shape, POOL_BEFORE, m.modules,
                           m.aux, cfg.run.seed, np.dtype(cfg.run.dtype))


def build_state(cfg: ExperimentConfig, part: Partition, batches_per_epoch: int) -> TrainState:
    o = cfg.optim
    optim = OptimConfig(o.lr, o.momentum, o.weight_decay, o.decay_factor, o.decay_period)
    return TrainState(part, optim, batches_per_epoch, o.epochs)


def delay_model(cfg: ExperimentConfig) -> DelayModel:
    J = cfg.model.modules
    pmf = cfg.pmf()
    if pmf is not None:
        return DelayModel(tuple(pmf))
    j = cfg.delay.slow_module
    if j < 0 or cfg.delay.slowdown == 1.0:
        return uniform_delay(J)
    if j >= J:
        raise ConfigError(f"delay.slow_module {j} outside [0, {J})")
    return pmf_from_slowdown(J, j, cfg.delay.slowdown)


def buffer_capacity(cfg: ExperimentConfig) -> int:
    if cfg.buffer.capacity_samples > 0:
        return capacity_from_samples(cfg.buffer.capacity_samples, cfg.data.batch_size)
    return cfg.buffer.capacity


def quantizer_config(cfg: ExperimentConfig) -> QuantizerConfig:
    q = cfg.quantizer
    policy = SyncPolicy.every(q.period) if q.period > 0 else SyncPolicy.at_rate(q.alpha)
    return QuantizerConfig(q.atoms, q.groups, q.decay, policy, q.frozen_ema, cfg.run.seed,
                           q.dead_after)


@dataclass
class RunResult:
    exit_code: int
    trace: TrainTrace | None = None
    summary: dict = field(default_factory=dict)
    metrics_path: Path | None = None
    message: str = ""


def train(cfg: ExperimentConfig, ds: datasets.Dataset | None = None) -> tuple[TrainTrace, Partition]:
    """Train according to ``cfg`` and return the trace and the trained network."""
    cfg.validate()
    ds = ds if ds is not None else load_dataset(cfg)
    if cfg.run.dtype == "float64":
        ds = ds.astype(np.float64)
    part = build_network(cfg, ds)
    stream = datasets.BatchStream(ds.x_train, ds.y_train, cfg.data.batch_size, cfg.run.seed)
    state = build_state(cfg, part, stream.batches_per_epoch)
    test = (ds.x_test, ds.y_test)
    probe = ds.x_train[:min(256, len(ds.x_train))]
    every = cfg.run.eval_every or None
    mode = cfg.run.mode
    if mode == "sync":
        trace = train_sync(stream, state, test, probe, eval_every=every)
    elif mode == "sequential":
        trace = train_sequential(stream, state, test, probe, eval_every=every)
    elif mode == "pipelined":
        trace = train_pipelined(stream, state, test)
    else:
        if cfg.model.modules < 2 and cfg.delay.slow_module >= 0:
            raise ConfigError("asynchronous modes need at least two modules to delay one")
        quant = quantizer_config(cfg) if mode == "async-quantized" else None
        trace = run_async(stream, state, delay_model(cfg), buffer_capacity(cfg), cfg.run.seed,
                          test, probe, eval_every=every, quantizer=quant)
    return trace, part


def predicted_compression(cfg: ExperimentConfig, part: Partition) -> list[dict]:
    """Bandwidth and buffer factors of every quantized edge under ``cfg``."""
    q = quantizer_config(cfg)
    B = cfg.data.batch_size
    M = buffer_capacity(cfg) * B
    rows = []
    for m in part.modules[:-1]:
        K, N, _ = m.out_shape
        K_prev = m.in_shape[0]
        k = min(q.groups, K)
        cb = bandwidth_compression(B, N, K_prev, K, q.atoms, k, q.policy.alpha)
        cn = buffer_compression(M, N, K, q.atoms, k)
        rows.append({"module": m.index, "N": N, "K": K, "K_prev": K_prev, "groups": k,
                     "bandwidth_compression": str(cb), "bandwidth_compression_value": float(cb),
                     "buffer_compression": str(cn), "buffer_compression_value": float(cn)})
    return rows


def summarize(cfg: ExperimentConfig, trace: TrainTrace, part: Partition) -> dict:
    summary = {
        "mode": cfg.run.mode,
        "seed": cfg.run.seed,
        "final_test_acc": [float(a) for a in trace.final_test_acc],
        "updates": [len(l) for l in trace.losses],
        "bits_sent": [int(b) for b in trace.bits_sent],
        "total_bits": int(sum(trace.bits_sent)),
        "starvation": [int(s) for s in trace.starvation],
    }
    if cfg.run.mode.startswith("async"):
        summary["pmf"] = list(delay_model(cfg).pmf)
        summary["ticks"] = trace.extra.get("ticks", 0)
    if cfg.run.mode == "async-quantized":
        summary["compression"] = predicted_compression(cfg, part)
        summary["syncs"] = trace.extra.get("syncs", [])
    return summary


def run(cfg: ExperimentConfig, out_dir: "str | Path") -> RunResult:
    """Train, then write metrics, summary and resolved config to ``out_dir``."""
    out = Path(out_dir)
    try:
        cfg.validate()
    except ConfigError as exc:
        return RunResult(EXIT_CONFIG, message=str(exc))
    try:
        trace, part = train(cfg)
    except ConfigError as exc:
        return RunResult(EXIT_CONFIG, message=str(exc))
    except PipelineError as exc:
        return RunResult(EXIT_RUNTIME, message=f"module {exc.module} failed: {exc.cause!r}")
    except (FileNotFoundError, datasets.DatasetError) as exc:
        return RunResult(EXIT_CONFIG, message=str(exc))
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.exception("training failed")
        return RunResult(EXIT_RUNTIME, message=f"runtime failure: {exc!r}")
    out.mkdir(parents=True, exist_ok=True)
    metrics = write_csv(trace.records, out / "metrics.csv")
    summary = summarize(cfg, trace, part)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.save(out / "config.ini")
    return RunResult(EXIT_OK, trace, summary, metrics)


def compress_report(atoms=(256,), memory=(256,), alpha=1, batch: int = 128,
                    groups: int = 32, geometry=None) -> tuple[str, str]:
    """Plain-text and CSV tables of the compression factors."""
    kwargs = {} if geometry is None else {"geometry": geometry}
    rows = compression_table(atoms=atoms, memory=memory, alpha=alpha, batch=batch,
                             groups=groups, **kwargs)
    header = ["layer", "N", "K", "K_prev", "atoms", "memory", "bandwidth", "buffer"]
    csv_lines = [",".join(header)]
    text = [f"{'layer':>5} {'N':>4} {'K':>5} {'K_prev':>6} {'C':>7} {'M':>7} "
            f"{'bandwidth':>10} {'buffer':>8}"]
    for r in rows:
        csv_lines.append(",".join(str(v) for v in (r.layer, r.N, r.K, r.K_prev, r.atoms, r.memory,
                                                   repr(float(r.bandwidth)), repr(float(r.buffer)))))
        text.append(f"{r.layer:>5} {r.N:>4} {r.K:>5} {r.K_prev:>6} {r.atoms:>7} {r.memory:>7} "
                    f"{float(r.bandwidth):>10.3f} {float(r.buffer):>8.3f}")
    return "\n".join(text) + "\n", "\n".join(csv_lines) + "\n"


def check_partition_gradients(width: int = 4, n_modules: int = 4, size: int = 8,
                              batch: int = 4, classes: int = 4, aux: str = "mlp-aux",
                              seed: int = 0, max_entries: int | None = 12) -> list[float]:
    """Finite-difference check of every module's local-loss gradient in 64-bit.

    Returns the worst relative error per module.
    """
    from .tensor import gradient_check, zero_grad

    channels = reference_channels(width, n_modules, POOL_BEFORE)
    part = build_partition(channels, classes, (3, size, size), POOL_BEFORE, n_modules, aux,
                           seed, np.float64)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, 3, size, size))
    y = rng.integers(0, classes, size=batch)
    errors = []
    h = x
    for m in part.modules:
        params = m.params()

        def fb(m=m, h=h, params=params):
            zero_grad(params)
            loss, _, _ = m.local_loss(h, y, train=True)
            return loss

        errors.append(gradient_check(fb, params, max_entries=max_entries, seed=seed))
        h = m.forward(h, train=True)
    return errors


def ratio_text(r: Fraction) -> str:
    return f"{float(r):.4f}" if math.isfinite(float(r)) else "inf"
