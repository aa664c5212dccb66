import copy

import numpy as np
import pytest

from dglearn.data import BatchStream, synthetic_gaussians
from dglearn.greedy_net import build_partition
from dglearn.sync_dgl import (OptimConfig, PipelineError, TrainState, module_update, param_digest,
                              train_pipelined, train_sequential, train_sync)
from dglearn.tensor import Sequential, cross_entropy, sgd_step, zero_grad

from conftest import make_net

OPT = OptimConfig(lr=0.05, momentum=0.9, weight_decay=5e-4, decay_factor=0.2, decay_period=2)


def state_for(part, stream, epochs, optim=OPT):
    return TrainState(part, optim, stream.batches_per_epoch, epochs)


@pytest.fixture(scope="module")
def two_gaussians():
    """200-sample, 2-class task, float64."""
    return synthetic_gaussians(classes=2, size=8, n=200, seed=0, noise=2.5, n_test=64).astype(np.float64)


class TestTrainSync:
    def test_update_counters(self, tiny_task):
        s = BatchStream(tiny_task.x_train[:160].astype(np.float64), tiny_task.y_train[:160], 32)
        state = state_for(make_net(), s, 1)
        train_sync(s, state)
        assert state.steps == [5, 5, 5, 5]

    def test_partial_batch_dropped(self, tiny_task):
        s = BatchStream(tiny_task.x_train[:100].astype(np.float64), tiny_task.y_train[:100], 32)
        state = state_for(make_net(), s, 2)
        trace = train_sync(s, state)
        assert state.steps == [6] * 4
        assert all(len(l) == 6 for l in trace.losses)

    def test_single_module_equals_backprop(self, stream):
        part = make_net(n_modules=1)
        reference = copy.deepcopy(part)
        train_sync(stream, state_for(part, stream, 2))

        net = Sequential(list(reference[0].body.layers) + list(reference[0].head.layers))
        params = net.params()
        sched = OPT.schedule()
        for e in range(2):
            for x, y in stream.epoch(e):
                zero_grad(params)
                _, g = cross_entropy(net.forward(x, train=True), y)
                net.backward(g)
                sgd_step(params, sched.rate(e), OPT.momentum, OPT.weight_decay)
        for a, b in zip(part.params(), params):
            np.testing.assert_array_equal(a.value, b.value)

    def test_two_module_losses_decrease(self, two_gaussians):
        # full-batch plain gradient descent: one update per epoch
        ds = two_gaussians
        part = build_partition([4, 8], 2, (3, 8, 8), (1,), 2, "mlp-aux", 0, np.float64)
        s = BatchStream(ds.x_train, ds.y_train, 200, seed=0)
        optim = OptimConfig(lr=0.05, momentum=0.0, weight_decay=5e-4, decay_period=100)
        trace = train_sync(s, state_for(part, s, 20, optim))
        for j in range(2):
            e = trace.epoch_losses(j, 1)
            assert len(e) == 20
            assert sum(b < a for a, b in zip(e, e[1:])) >= 18

    def test_update_unlocking(self, rng):
        """Module j's step does not depend on module j+1's parameters."""
        x = rng.normal(size=(8, 3, 8, 8))
        y = rng.integers(0, 4, size=8)
        digests = []
        for perturb in (False, True):
            part = make_net()
            if perturb:
                for p in part[2].params():
                    p.value += rng.normal(size=p.value.shape)
            state = TrainState(part, OPT, 1, 1)
            h = part.forward(x, upto=1, train=False)
            module_update(state, 1, h, y)
            digests.append(param_digest(part[1].params()))
        assert digests[0] == digests[1]

    def test_loss_trace_and_records(self, stream, tiny_task):
        test = (tiny_task.x_test.astype(np.float64), tiny_task.y_test)
        trace = train_sync(stream, state_for(make_net(), stream, 2), test=test,
                           probe=stream.x[:32])
        assert len(trace.final_test_acc) == 4
        assert all(0 <= a <= 1 for a in trace.final_test_acc)
        assert {r.module_id for r in trace.records} == {0, 1, 2, 3}
        assert all(np.isfinite(r.train_loss) for r in trace.records)


class TestTrainSequential:
    def test_first_module_trajectory_matches_sync(self, stream):
        a = train_sync(stream, state_for(make_net(), stream, 2), record_trajectory=True)
        b = train_sequential(stream, state_for(make_net(), stream, 2), record_trajectory=True)
        assert a.digests[0] == b.digests[0]
        assert a.digests[1] != b.digests[1]

    def test_single_module_identical(self, stream):
        a = train_sync(stream, state_for(make_net(n_modules=1), stream, 2), record_trajectory=True)
        b = train_sequential(stream, state_for(make_net(n_modules=1), stream, 2),
                             record_trajectory=True)
        assert a.digests == b.digests

    def test_equal_update_counts_and_freezing(self, stream):
        state = state_for(make_net(), stream, 2)
        train_sequential(stream, state)
        assert state.steps == [2 * stream.batches_per_epoch] * 4
        assert state.frozen == [True] * 4


class TestTrainPipelined:
    def test_trajectory_equals_sync(self, tiny_task):
        s = BatchStream(tiny_task.x_train[:250].astype(np.float64), tiny_task.y_train[:250], 5,
                        seed=2)
        assert s.batches_per_epoch == 50
        kw = dict(width=4, n_modules=3)
        a = train_sync(s, TrainState(make_net(**kw), OPT, 50, 1), record_trajectory=True)
        b = train_pipelined(s, TrainState(make_net(**kw), OPT, 50, 1), record_trajectory=True)
        assert a.digests == b.digests
        assert len(b.digests[2]) == 50

    def test_capacity_one_is_live(self):
        x = np.random.default_rng(0).normal(size=(1000, 3, 4, 4))
        y = np.arange(1000) % 2
        s = BatchStream(x, y, 1)
        part = build_partition([1, 1, 1], 2, (3, 4, 4), (), 3, "mlp-aux", 0, np.float64)
        state = TrainState(part, OptimConfig(lr=0.01), s.batches_per_epoch, 1)
        train_pipelined(s, state, capacity=1)
        assert state.steps == [1000, 1000, 1000]

    def test_overlapped_throughput(self, tiny_task):
        d = 0.03
        s = BatchStream(tiny_task.x_train[:160].astype(np.float64), tiny_task.y_train[:160], 16)
        part = make_net(width=2, n_modules=3)
        state = TrainState(part, OPT, 10, 1)
        trace = train_pipelined(s, state, delay=d)
        last = np.diff(trace.extra["step_times"][2][3:])
        period = float(np.median(last))
        assert period < 2 * d, f"batch period {period:.4f}s vs per-module delay {d}s"

    def test_failure_names_module(self, stream):
        with pytest.raises(PipelineError) as info:
            train_pipelined(stream, state_for(make_net(), stream, 1), fail_at=(2, 3))
        assert info.value.module == 2
        assert "injected" in str(info.value)

    def test_rejects_zero_capacity(self, stream):
        with pytest.raises(ValueError):
            train_pipelined(stream, state_for(make_net(), stream, 1), capacity=0)

    def test_records_once_per_epoch(self, stream, tiny_task):
        test = (tiny_task.x_test.astype(np.float64), tiny_task.y_test)
        trace = train_pipelined(stream, state_for(make_net(), stream, 2), test=test)
        assert len(trace.records) == 8
        last = [r for r in trace.records if r.epoch_equivalent == 2]
        assert [r.test_acc for r in last] == trace.final_test_acc
