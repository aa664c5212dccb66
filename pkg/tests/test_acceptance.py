"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected into the
terminal summary) and then asserts. The training experiments use the desk
preset with intermediate evaluation switched off; together they take roughly
ten to twelve minutes on one core.
"""

import time
from statistics import mean, median

import numpy as np
from dglearn.async_scheduler import pmf_from_slowdown, slowdown_from_pmf
from dglearn.config import ExperimentConfig
from dglearn.data import BatchStream, synthetic_gaussians
from dglearn.diagnostics import TheoryProbe, check_descent_inequality
from dglearn.harness import (build_network, build_state, check_partition_gradients, run, train)
from dglearn.replay_buffer import ReplayBuffer
from dglearn.sync_dgl import train_pipelined, train_sync
from dglearn.vq_codec import Codebook, compression_table, decode, encode, nearest_atoms

from conftest import ACCEPTANCE_LINES

DESK_BUFFER = 16  # batches held by each replay buffer in the desk async runs
_runs: dict = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def final_acc(mode: str, seed: int, **overrides) -> float:
    """Final-module test accuracy of one desk run (memoized across criteria)."""
    key = (mode, seed, tuple(sorted(overrides.items())))
    if key not in _runs:
        if mode.startswith("async"):
            overrides.setdefault("buffer__capacity", DESK_BUFFER)
        cfg = ExperimentConfig.desk(mode, seed, run__eval_every=10**6, **overrides)
        trace, _ = train(cfg)
        _runs[key] = float(trace.final_test_acc[-1])
    return _runs[key]


def test_criterion_1_compression_arithmetic():
    t0 = time.perf_counter()
    rows = compression_table(atoms=(256,), memory=(256,), alpha=1, batch=128, groups=32)[:3]
    bandwidth = [float(r.bandwidth) for r in rows]
    buffer = [float(r.buffer) for r in rows]
    elapsed = time.perf_counter() - t0
    ok = (all(abs(a - b) <= 0.1 for a, b in zip(bandwidth, [15.5, 23.3, 21.3]))
          and all(abs(a - b) <= 0.1 for a, b in zip(buffer, [15.8, 28.4, 28.4]))
          and elapsed < 1.0)
    report(1, ok, f"bandwidth {[round(v, 3) for v in bandwidth]} "
                  f"buffer {[round(v, 3) for v in buffer]} in {elapsed:.3f}s")


def test_criterion_2_slowdown_mapping():
    worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(2000):
        J = int(rng.integers(2, 13))
        j = int(rng.integers(J))
        S = float(np.exp(rng.uniform(-3, 3)))
        worst = max(worst, abs(slowdown_from_pmf(pmf_from_slowdown(J, j, S).pmf, j) / S - 1))
    uniform = all(np.array_equal(pmf_from_slowdown(J, 0, 1.0).pmf, np.full(J, 1.0 / J))
                  for J in range(2, 13))
    p = pmf_from_slowdown(4, 1, 2.0).pmf[1]
    ok = worst <= 4 * np.finfo(float).eps and uniform and abs(p - 1 / 7) < 1e-16
    report(2, ok, f"worst round-trip rel error {worst:.1e}, uniform at S=1: {uniform}, "
                  f"p(j*)={p!r}")


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    errors = check_partition_gradients(width=16, n_modules=4, size=8, batch=4, max_entries=40)
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    report(3, worst < 1e-5 and elapsed < 60, f"max relative error {worst:.2e} in {elapsed:.1f}s")


def test_criterion_4_sync_equals_pipelined():
    cfg = ExperimentConfig.desk("sync", 0, run__dtype="float64", data__batch_size=16,
                                optim__epochs=1)
    ds = synthetic_gaussians(4, 8, 200 * 16, seed=1, noise=2.5, n_test=64, dtype=np.float64)
    results = []
    for driver in (train_sync, train_pipelined):
        part = build_network(cfg, ds)
        stream = BatchStream(ds.x_train, ds.y_train, 16, seed=0)
        state = build_state(cfg, part, stream.batches_per_epoch)
        trace = driver(stream, state, record_trajectory=True)
        results.append((trace.digests, [p.value.copy() for p in part.params()]))
    (da, pa), (db, pb) = results
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(pa, pb))
    steps = [len(d) for d in da]
    ok = da == db and diff == 0.0 and steps == [200] * 4
    report(4, ok, f"{steps} updates per module, digests equal: {da == db}, "
                  f"max abs parameter difference {diff}")


def test_criterion_5_parallel_vs_sequential():
    t0 = time.perf_counter()
    gaps, pairs = [], []
    for seed in range(3):
        a, b = final_acc("sync", seed), final_acc("sequential", seed)
        pairs.append((a, b))
        gaps.append(abs(a - b))
    gap = median(gaps)
    elapsed = time.perf_counter() - t0
    report(5, gap <= 0.02 and elapsed < 900,
           f"median |sync - sequential| {100 * gap:.2f} points; (sync, seq) per seed "
           f"{[(round(a, 4), round(b, 4)) for a, b in pairs]} in {elapsed:.0f}s")


def test_criterion_6_async_robustness():
    t0 = time.perf_counter()
    seeds = range(3)
    sync = {s: final_acc("sync", s) for s in seeds}
    uniform = {s: final_acc("async", s) for s in seeds}
    uniform_gap = abs(mean(uniform.values()) - mean(sync.values()))
    degradation = {1.0: mean(sync[s] - uniform[s] for s in seeds)}
    for S in (1.2, 2.0):
        degradation[S] = mean(sync[s] - final_acc("async", s, delay__slow_module=j,
                                                  delay__slowdown=S)
                              for s in seeds for j in range(4))
    elapsed = time.perf_counter() - t0
    ok = (uniform_gap <= 0.01 and degradation[1.2] <= 0.02
          and degradation[2.0] > degradation[1.0] and elapsed < 1800)
    report(6, ok, f"|uniform async - sync| {100 * uniform_gap:.2f} points; mean degradation "
                  + ", ".join(f"S={S}: {100 * d:+.2f}" for S, d in degradation.items())
                  + f" points in {elapsed:.0f}s")


def test_criterion_7_quantized_async():
    t0 = time.perf_counter()
    seeds = range(5)
    raw = [final_acc("async", s) for s in seeds]
    c256 = [final_acc("async-quantized", s) for s in seeds]
    c4 = [final_acc("async-quantized", s, quantizer__atoms=4) for s in seeds]
    t16 = [final_acc("async-quantized", s, quantizer__period=16) for s in seeds]
    elapsed = time.perf_counter() - t0
    quant_gap = median(raw) - median(c256)
    period_gap = abs(median(c256) - median(t16))
    ok = (quant_gap <= 0.015 and median(c256) >= median(c4) and period_gap <= 0.01
          and elapsed < 1800)
    report(7, ok, f"medians raw {median(raw):.4f}, C=256 {median(c256):.4f}, "
                  f"C=4 {median(c4):.4f}, C=256 period 16 {median(t16):.4f} in {elapsed:.0f}s")


def _brute_force(v, atoms):
    d = ((v[:, None, :].astype(np.float64) - atoms[None].astype(np.float64)) ** 2).sum(-1)
    return np.argmin(d, axis=1)  # argmin keeps the first minimum


def test_criterion_8_codec_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        d, c = int(rng.integers(1, 6)), int(rng.integers(1, 17))
        atoms = rng.normal(size=(c, d)).astype(np.float32)
        v = rng.normal(size=(int(rng.integers(1, 30)), d)).astype(np.float32)
        mismatches += int((nearest_atoms(v, atoms) != _brute_force(v, atoms)).any())

    palette = rng.normal(size=(4, 5, 2)).astype(np.float32)
    choice = rng.integers(0, 5, size=(6, 4, 3, 3))
    x = np.concatenate([palette[g][choice[:, g]].transpose(0, 3, 1, 2) for g in range(4)], axis=1)
    cb = Codebook(8, groups=4, atoms=5)
    cb.set_atoms(palette)
    exact = np.array_equal(decode(encode(x, cb), cb), x)

    centre = np.array([0.5, -1.0, 2.0])
    ema = Codebook(3, groups=1, atoms=1, decay=0.99)
    for _ in range(200):
        ema.ema_update(centre[None, :, None, None] + 0.1 * rng.normal(size=(16, 3, 8, 8)))
    ema_err = float(np.abs(ema.atoms[0][0] - centre).max())
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and exact and ema_err < 1e-3 and elapsed < 60
    report(8, ok, f"{mismatches} brute-force mismatches in 1000 instances, bit-exact roundtrip "
                  f"{exact}, EMA error {ema_err:.1e}")


def test_criterion_9_buffer_protocol():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.push(np.full(1, i), np.array([i]))
    overwrite = sorted(e.seq for e in buf.entries()) == [2, 3, 4]
    order = [buf.sample().seq for _ in range(9)]
    lexicographic = order == [4, 3, 2] * 3
    spreads = []
    for m in range(1, 9):
        fair = ReplayBuffer(m)
        for i in range(m):
            fair.push(np.zeros(1), np.array([i]))
        for _ in range(7 * m + 3):
            fair.sample()
        counts = [e.reuse_count for e in fair.entries()]
        spreads.append(max(counts) - min(counts))
    ok = overwrite and lexicographic and max(spreads) <= 1
    report(9, ok, f"overwrite-oldest {overwrite}, read order {order}, max reuse spread "
                  f"{max(spreads)}")


def test_criterion_10_theory_probe():
    t0 = time.perf_counter()
    res = check_descent_inequality(TheoryProbe(), steps=40, n_traj=20_000, seed=10)
    elapsed = time.perf_counter() - t0
    ok = res.passed and res.accumulation_passed and elapsed < 300
    report(10, ok, f"smallest margin in standard errors "
                   f"{float(np.min(res.margins / res.std_errors)):+.2f}, accumulation "
                   f"{res.accumulation_lhs:.4f} <= {res.accumulation_rhs:.4f}")


def test_criterion_11_determinism(tmp_path):
    outcome = {}
    for mode in ("sync", "sequential", "async", "async-quantized"):
        overrides = dict(data__n=512, data__n_test=256, optim__epochs=3, optim__decay_period=1)
        if mode.startswith("async"):
            overrides.update(delay__slow_module=1, delay__slowdown=2.0, buffer__capacity=4)
        cfg = ExperimentConfig.desk(mode, 11, **overrides)
        a, b = tmp_path / mode / "first", tmp_path / mode / "second"
        first = run(cfg, a)
        second = run(ExperimentConfig.load(a / "config.ini"), b)
        outcome[mode] = (first.exit_code == second.exit_code == 0
                         and all((a / f).read_bytes() == (b / f).read_bytes()
                                 for f in ("metrics.csv", "summary.json", "config.ini")))
    report(11, all(outcome.values()), f"byte-identical reruns {outcome}")
