import dataclasses
import math

import numpy as np
import pytest

from scpl.autodiff import Tape
from scpl.data import Dataset, ViewBatch, batches, gen_blobs
from scpl.layers import Parameter
from scpl.losses import NoPositivePairsError, cross_entropy
from scpl.network import NetworkTemplate, build_from_template
from scpl.optim import Adam, MissingGradientError, cosine_lr
from scpl.trainers import (ConfigError, PipelineError, TrainConfig, TrainingDiverged, _EpochStats, bp_step,
                           partition, scpl_step, train)

SMALL = NetworkTemplate(kind="mlp", dims=(4, 8, 8, 3), projection_head="linear", head_out=8)


def blobs(per_class=20, seed=0, classes=3, dim=4, spread=1.0):
    return gen_blobs(classes, dim, per_class, spread, seed)


def params_bytes(net):
    return b"".join(p.value.tobytes() for p in net.params())


# -- Adam and schedule --------------------------------------------------------


def param(value):
    p = Parameter("w", np.shape(value), 1)
    p.value = np.array(value, dtype=np.float64)
    return p


def test_adam_first_step_is_lr_sign():
    p = param([1.0, -2.0, 3.0])
    Adam([p]).step({p: np.ones(3)}, lr=1e-3)
    np.testing.assert_allclose(p.value, [1.0 - 1e-3, -2.0 - 1e-3, 3.0 - 1e-3], atol=1e-10)


def test_adam_zero_gradient_is_noop():
    p = param([0.5, 0.25])
    Adam([p]).step({p: np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p.value, [0.5, 0.25])


def test_adam_decreases_quadratic():
    p = param([1.0])
    opt = Adam([p])
    prev = 1.0
    for _ in range(10):
        opt.step({p: 2 * p.value}, lr=0.05)
        f = float(p.value[0] ** 2)
        assert f < prev
        prev = f


def test_adam_against_reference_formula():
    rng = np.random.default_rng(0)
    p = param(rng.normal(size=4))
    w = p.value.copy()
    m = v = np.zeros(4)
    opt = Adam([p])
    for t in range(1, 6):
        g = rng.normal(size=4)
        opt.step({p: g}, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.value, w, rtol=0, atol=1e-15)


def test_adam_missing_gradient_names_param():
    p = param([1.0])
    p.name = "c2.f.0.weight"
    with pytest.raises(MissingGradientError, match="c2.f.0.weight"):
        Adam([p]).step({}, lr=0.1)


def test_cosine_schedule_points():
    assert cosine_lr(0, 10, 1e-3, 1e-5) == pytest.approx(1e-3, abs=1e-18)
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx(5.05e-4, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3, 1e-5)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-3, 1e-5)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.lr_max, cfg.lr_min, cfg.queue_capacity) == (0.1, 1e-3, 1e-5, 2)
    for bad in (dict(tau=0), dict(lr_min=1e-2, lr_max=1e-3), dict(views=3), dict(strategy="sgd"),
                dict(loss_variant="x"), dict(lr_schedule="step")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigError):
        TrainConfig(workers=5).validate(H=2)


# -- BP ------------------------------------------------------------------------


def test_bp_one_hidden_layer_matches_hand_chain_rule():
    t = NetworkTemplate(kind="mlp", dims=(3, 4, 2), activation="tanh")
    net = build_from_template(t, seed=1)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(5, 3)), np.array([0, 1, 1, 0, 1])
    (W1, b1), (W2, b2) = [c.encoder.params() for c in net.components]
    tape = Tape()
    tape.backward(cross_entropy(net.forward_all(x, tape), y))
    got = tape.param_grads()

    h = np.tanh(x @ W1.value.T + b1.value)
    logits = h @ W2.value.T + b2.value
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    d_logits = p - np.eye(2)[y]
    d_h = d_logits @ W2.value
    d_pre = d_h * (1 - h ** 2)
    want = {W2: d_logits.T @ h, b2: d_logits.sum(0), W1: d_pre.T @ x, b1: d_pre.sum(0)}
    for prm, g in want.items():
        np.testing.assert_allclose(got[prm], g, rtol=0, atol=1e-10)


def test_bp_separable_blobs():
    ds = gen_blobs(2, 4, 60, spread=0.5, seed=3)
    net = build_from_template(NetworkTemplate(kind="mlp", dims=(4, 16, 2)), seed=0)
    recs = train(net, ds, TrainConfig(strategy="bp", epochs=50, batch_size=32, views=1))
    assert recs[-1].test_acc >= 0.99


def test_zero_epochs_leaves_params_unchanged():
    net = build_from_template(SMALL, seed=0)
    before = params_bytes(net)
    for strategy in ("bp", "scpl", "scpl_pipelined"):
        assert train(net, blobs(), TrainConfig(strategy=strategy, epochs=0)) == []
    assert params_bytes(net) == before


def test_single_sample_memorized():
    x = np.array([[0.3, -1.2, 0.7, 2.0]])
    ds = Dataset(x, np.array([2]), np.array([0]), np.array([], dtype=int), 3)
    net = build_from_template(NetworkTemplate(kind="mlp", dims=(4, 8, 3)), seed=0)
    recs = train(net, ds, TrainConfig(strategy="bp", epochs=200, batch_size=4, views=1, lr_schedule="constant"))
    assert recs[-1].train_acc == 1.0


def test_records_one_per_epoch():
    recs = train(build_from_template(SMALL, seed=0), blobs(), TrainConfig(strategy="scpl", epochs=3, batch_size=16))
    assert [r.epoch for r in recs] == [0, 1, 2]
    for r in recs:
        assert len(r.component_losses) == 3
        assert r.global_loss == pytest.approx(sum(r.component_losses))
        assert r.examples_per_sec > 0 and 0 <= r.test_acc <= 1


# -- degenerate equivalence --------------------------------------------------------


def test_h0_scpl_bitwise_equals_bp_for_10_steps():
    t = NetworkTemplate(kind="mlp", dims=(4, 3))
    ds = blobs(per_class=40)
    cfg = TrainConfig(strategy="scpl", batch_size=8, views=2)
    bp_net, scpl_net = build_from_template(t, seed=9), build_from_template(t, seed=9)
    opt = Adam(bp_net.effective_params())
    scpl_net.output.optimizer = Adam(scpl_net.output.params())
    stream = batches(ds, cfg.batch_size, cfg.seed, 0, cfg.views, cfg.aug_noise)
    for step, b in zip(range(10), stream):
        lr = cfg.lr_at(0)
        bp_step(bp_net, opt, b, lr)
        scpl_step(scpl_net, b, cfg, lr, _EpochStats(1))
        assert params_bytes(bp_net) == params_bytes(scpl_net), f"diverged at step {step}"


# -- determinism ---------------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["bp", "early_exit", "scpl"])
def test_fixed_seed_is_bitwise_reproducible(strategy):
    def run():
        net = build_from_template(SMALL, seed=2)
        recs = train(net, blobs(), TrainConfig(strategy=strategy, epochs=2, batch_size=16, seed=5))
        return [(r.component_losses, r.train_acc, r.test_acc) for r in recs], params_bytes(net)

    assert run() == run()


def test_early_exit_blocks_and_uses_h_classifiers():
    net = build_from_template(SMALL, seed=0)
    recs = train(net, blobs(), TrainConfig(strategy="early_exit", epochs=2, batch_size=16, check_blocking=True))
    assert len(recs[-1].component_losses) == 3
    assert all(r.blocking_violations == 0 for r in recs)


# -- pipelined ----------------------------------------------------------------------------


def test_partition_contiguous():
    assert partition(4, 4) == [range(0, 1), range(1, 2), range(2, 3), range(3, 4)]
    assert partition(4, 2) == [range(0, 2), range(2, 4)]
    assert partition(3, 1) == [range(0, 3)]


@pytest.mark.parametrize("workers,capacity", [(1, 0), (2, 1), (3, 2)])
def test_pipelined_matches_sequential_trajectory(workers, capacity):
    ds = blobs()
    cfg = TrainConfig(strategy="scpl", epochs=3, batch_size=16, seed=1)
    seq_net, pipe_net = build_from_template(SMALL, seed=3), build_from_template(SMALL, seed=3)
    seq = train(seq_net, ds, cfg)
    pipe = train(pipe_net, ds, dataclasses.replace(cfg, strategy="scpl_pipelined", workers=workers,
                                                   queue_capacity=capacity))
    assert params_bytes(seq_net) == params_bytes(pipe_net)
    for a, b in zip(seq, pipe):
        assert a.component_losses == b.component_losses
        assert (a.train_acc, a.test_acc) == (b.train_acc, b.test_acc)


def test_pipelined_blocking_zero():
    recs = train(build_from_template(SMALL, seed=0), blobs(),
                 TrainConfig(strategy="scpl_pipelined", epochs=1, batch_size=16, check_blocking=True))
    assert recs[0].blocking_violations == 0


def _all_distinct_labels():
    n = 8
    x = np.random.default_rng(0).normal(size=(n, 4))
    return Dataset(x, np.arange(n) % 8, np.arange(n), np.array([], dtype=int), 8)


def test_pipeline_error_names_component():
    t = NetworkTemplate(kind="mlp", dims=(4, 8, 8, 8), projection_head="linear", head_out=8)
    cfg = TrainConfig(strategy="scpl_pipelined", epochs=1, batch_size=8, views=1)
    with pytest.raises(PipelineError) as info:
        train(build_from_template(t, seed=0), _all_distinct_labels(), cfg)
    assert info.value.component == 1
    assert isinstance(info.value.cause, NoPositivePairsError)


def test_sequential_propagates_empty_positive_error():
    t = NetworkTemplate(kind="mlp", dims=(4, 8, 8), projection_head="linear", head_out=8)
    with pytest.raises(NoPositivePairsError):
        train(build_from_template(t, seed=0), _all_distinct_labels(),
              TrainConfig(strategy="scpl", epochs=1, batch_size=8, views=1))


@pytest.mark.parametrize("strategy", ["bp", "scpl", "scpl_pipelined"])
def test_divergence_reports_epoch(strategy):
    ds = blobs()
    ds.features *= 1e306
    with pytest.raises(TrainingDiverged) as info:
        train(build_from_template(SMALL, seed=0), ds, TrainConfig(strategy=strategy, epochs=3, batch_size=16))
    assert info.value.epoch == 0


def test_view_batch_labels_feed_training():
    b = next(batches(blobs(), 10, seed=0, epoch=0, views=2))
    assert isinstance(b, ViewBatch) and len(b) == 20
    assert math.isfinite(b.features.sum())
