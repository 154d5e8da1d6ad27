import io
import json

import numpy as np
import pytest

from shiftwarp import dataset, losses, nets, shift, train
from shiftwarp.errors import ContractError, InvariantError
from shiftwarp.tensor import Node


def make_samples(count, seed=21, size=32):
    cfg = dataset.DatasetConfig(count=count, seed=seed, size=size)
    return [dataset.render_sample(cfg, i) for i in range(count)]


def tiny_cfg(**kw):
    base = dict(lr=0.05, momentum=0.9, batch=4, epochs=2, seed=3)
    base.update(kw)
    return train.TrainConfig(**base)


def test_config_invariants():
    with pytest.raises(ContractError):
        train.TrainConfig(lr=0.0)
    with pytest.raises(ContractError):
        train.TrainConfig(momentum=1.0)
    with pytest.raises(ContractError):
        train.TrainConfig(momentum=-0.1)
    with pytest.raises(ContractError):
        train.TrainConfig(batch=0)
    with pytest.raises(ContractError):
        train.TrainConfig(ratio_min=0.0)
    with pytest.raises(ContractError):
        train.TrainConfig(ratio_min=0.6, ratio_max=0.5)
    with pytest.raises(ContractError):
        train.TrainConfig(ratio_max=1.0)


# -- optimizer ----------------------------------------------------------------

def _one_param(value):
    node = Node(np.asarray(value, dtype=np.float64), requires_grad=True)
    params = {"p": node}
    return node, params, train.OptimizerState.for_params(params)


def test_sgd_momentum_zero_is_vanilla():
    node, params, state = _one_param([1.0, 2.0])
    g = np.array([0.5, -1.0])
    train.sgd_step(params, {"p": g}, state, lr=0.1, momentum=0.0)
    assert np.allclose(node.value, [1.0, 2.0] - 0.1 * g)


def test_sgd_two_steps_constant_gradient():
    node, params, state = _one_param([1.0])
    g = np.array([2.0])
    train.sgd_step(params, {"p": g}, state, lr=0.01, momentum=0.9)
    train.sgd_step(params, {"p": g}, state, lr=0.01, momentum=0.9)
    # v1 = g, v2 = 0.9 g + g  =>  p = p0 - lr*g*(2 + 0.9)
    assert np.allclose(node.value, 1.0 - 0.01 * 2.0 * 2.9)


def test_sgd_zero_gradient_is_identity():
    node, params, state = _one_param([3.0, 4.0])
    state.velocity["p"][:] = 0.0
    train.sgd_step(params, {"p": np.zeros(2)}, state, lr=0.5, momentum=0.9)
    assert np.array_equal(node.value, [3.0, 4.0])


def test_sgd_shape_mismatch():
    _, params, state = _one_param([1.0, 2.0])
    with pytest.raises(ContractError):
        train.sgd_step(params, {"p": np.zeros(3)}, state, 0.1, 0.9)


def test_optimizer_state_mirrors_trainables():
    rng = np.random.default_rng(0)
    clf = nets.build_classifier(4, rng, width=2)
    model = nets.build_encoder_decoder(clf, rng, height=16)
    params = nets.trainable_params(model)
    state = train.OptimizerState.for_params(params)
    assert set(state.velocity) == set(params)
    for name, node in params.items():
        assert state.velocity[name].shape == node.value.shape
        assert np.all(state.velocity[name] == 0.0)


# -- classifier pretraining ---------------------------------------------------

def test_single_sample_overfit():
    sample = make_samples(1, seed=5)[0]
    rng = np.random.default_rng(1)
    model = nets.build_classifier(len(sample.labels), rng, width=4)
    params = nets.trainable_params(model)
    state = train.OptimizerState.for_params(params)
    images, labels = dataset.to_batch([sample])
    value = None
    for _ in range(200):
        loss = losses.content_loss(nets.classify(model, Node(images)).logits,
                                   labels)
        value = float(loss.value.reshape(()))
        train.zero_grads(params)
        from shiftwarp import tensor
        tensor.backward(loss)
        train.sgd_step(params, train.collect_grads(params), state,
                       lr=0.05, momentum=0.9)
    assert value < 0.01, value


def test_pretrain_improves_and_logs(tmp_path):
    samples = make_samples(24, seed=6)
    log = io.StringIO()
    model = train.pretrain_classifier(samples[:20], samples[20:],
                                      tiny_cfg(epochs=3), width=4, log=log)
    lines = [json.loads(x) for x in log.getvalue().splitlines()]
    assert len(lines) == 3
    assert all({"epoch", "loss", "mAP"} <= set(x) for x in lines)
    assert lines[-1]["loss"] < lines[0]["loss"]
    assert isinstance(model, nets.Model)


def test_pretrain_is_bitwise_deterministic():
    samples = make_samples(12, seed=7)
    logs = []
    models = []
    for _ in range(2):
        log = io.StringIO()
        models.append(train.pretrain_classifier(samples[:10], samples[10:],
                                                tiny_cfg(), width=2, log=log))
        logs.append(log.getvalue())
    assert logs[0] == logs[1]
    a, b = (nets.trainable_params(m) for m in models)
    for name in a:
        assert np.array_equal(a[name].value, b[name].value)


def test_pretrain_divergence_aborts(monkeypatch):
    samples = make_samples(6, seed=8)
    monkeypatch.setattr(losses, "content_loss",
                        lambda *a, **k: Node(np.float64("nan")))
    with pytest.raises(InvariantError, match="diverged"):
        train.pretrain_classifier(samples[:5], samples[5:],
                                  tiny_cfg(epochs=1), width=4)


def test_pretrain_returns_best_holdout_epoch():
    samples = make_samples(16, seed=9)
    log = io.StringIO()
    model = train.pretrain_classifier(samples[:13], samples[13:],
                                      tiny_cfg(epochs=4), width=4, log=log)
    curves = [json.loads(x)["mAP"] for x in log.getvalue().splitlines()]
    final = train._holdout_map(model, samples[13:])
    assert final == pytest.approx(max(curves))


# -- retargeting training -----------------------------------------------------

@pytest.fixture(scope="module")
def pretrained():
    samples = make_samples(20, seed=12)
    model = train.pretrain_classifier(samples[:16], samples[16:],
                                      tiny_cfg(epochs=2), width=2)
    return samples, model


def test_retargeter_freezes_classifier_and_trunk(pretrained):
    samples, classifier = pretrained
    before_clf = {lid: {k: n.value.copy() for k, n in grp.items()}
                  for lid, grp in classifier.params.items()}
    log = io.StringIO()
    model = train.train_retargeter(samples[:8], samples[16:18], classifier,
                                   tiny_cfg(epochs=1, lr=1e-3), log=log)
    for lid, grp in classifier.params.items():
        for k, node in grp.items():
            assert np.array_equal(node.value, before_clf[lid][k]), (lid, k)
    for lid in model.frozen:
        assert lid in classifier.params  # trunk ids mirror the classifier
    records = [json.loads(x) for x in log.getvalue().splitlines()]
    steps = [r for r in records if "step" in r]
    assert steps, "no per-step records logged"
    assert all({"step", "epoch", "E_c", "E_s", "total", "W'"} <= set(r)
               for r in steps)


def test_retargeter_moves_only_decoder(pretrained):
    samples, classifier = pretrained
    rng = np.random.default_rng(4)
    model = nets.build_encoder_decoder(classifier, rng, height=32)
    frozen_before = {f"{lid}.{k}": node.value.copy()
                     for lid, grp in model.params.items() if lid in model.frozen
                     for k, node in grp.items()}
    params = nets.trainable_params(model)
    decoder_before = {name: node.value.copy() for name, node in params.items()}
    state = train.OptimizerState.for_params(params)
    cfg = tiny_cfg(lr=1e-2, epochs=1)
    train._retarget_step(samples[:2], model, classifier, cfg, 12,
                         params, state)
    for name, value in frozen_before.items():
        lid, k = name.split(".")
        assert np.array_equal(model.params[lid][k].value, value)
    moved = [name for name, before in decoder_before.items()
             if not np.array_equal(params[name].value, before)]
    assert moved, "no trainable parameter moved"


def test_retargeter_abort_serializes_step(pretrained, monkeypatch):
    samples, classifier = pretrained

    real = shift.retarget_width
    calls = {"n": 0}

    def boom(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 2:  # let the initial 2-sample holdout pass through
            raise InvariantError("synthetic violation")
        return real(*args, **kwargs)

    monkeypatch.setattr(shift, "retarget_width", boom)
    log = io.StringIO()
    with pytest.raises(InvariantError, match="synthetic"):
        train.train_retargeter(samples[:4], samples[16:18], classifier,
                               tiny_cfg(epochs=1), log=log)
    records = [json.loads(x) for x in log.getvalue().splitlines()]
    abort = [r for r in records if r.get("event") == "abort"]
    assert len(abort) == 1
    assert {"step", "epoch", "W'", "batch", "error"} <= set(abort[0])
    assert sorted(abort[0]["batch"]) == sorted(s.id for s in samples[:4])


def test_retargeter_deterministic_and_improves(pretrained):
    samples, classifier = pretrained
    runs = []
    for _ in range(2):
        log = io.StringIO()
        model = train.train_retargeter(samples[:8], samples[16:20],
                                       classifier,
                                       tiny_cfg(epochs=2, lr=1e-2), log=log)
        runs.append((log.getvalue(),
                     {n: p.value.copy()
                      for n, p in nets.trainable_params(model).items()}))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name])
    records = [json.loads(x) for x in runs[0][0].splitlines()]
    init = [r for r in records if r.get("event") == "init"][0]["eval_total"]
    epochs = [r["eval_total"] for r in records if r.get("event") == "epoch"]
    best = min([init] + epochs)
    model_loss = train.eval_total_loss(model, classifier, samples[16:20],
                                       tiny_cfg(epochs=2, lr=1e-2))
    assert model_loss == pytest.approx(best)


def test_eval_total_loss_fixed_ratio(pretrained):
    samples, classifier = pretrained
    rng = np.random.default_rng(5)
    model = nets.build_encoder_decoder(classifier, rng, height=32)
    a = train.eval_total_loss(model, classifier, samples[:3], tiny_cfg())
    b = train.eval_total_loss(model, classifier, samples[:3], tiny_cfg())
    assert a == b
    assert np.isfinite(a) and a > 0.0
