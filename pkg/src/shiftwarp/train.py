"""SGD-with-momentum training: classifier pretraining and the end-to-end
retargeting loop with per-batch target-width sampling.

Both loops are deterministic for a fixed config: every random draw comes
from one seeded generator consumed in a fixed order, batches are assembled
on the driver thread, and parameter updates never overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import evaluate, losses, nets, shift, tensor
from .dataset import Sample, to_batch, u8_to_unit
from .errors import ContractError, InvariantError
from .tensor import Node


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 8
    epochs: int = 50
    lam: float = 0.2
    gamma: float = 1.0
    w_s: float = 1.0
    ratio_min: float = 0.25
    ratio_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got "
                                f"{self.momentum}")
        if self.batch < 1 or self.epochs < 1:
            raise ContractError("batch and epochs must be >= 1")
        if not 0.0 < self.ratio_min <= self.ratio_max < 1.0:
            raise ContractError(f"need 0 < ratio_min <= ratio_max < 1, got "
                                f"[{self.ratio_min}, {self.ratio_max}]")
        if self.w_s < 0:
            raise ContractError(f"w_s must be >= 0, got {self.w_s}")


@dataclass
class OptimizerState:
    velocity: dict

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls({name: np.zeros_like(node.value)
                    for name, node in params.items()})


def sgd_step(params: dict, grads: dict, state: OptimizerState,
             lr: float, momentum: float) -> None:
    """v <- momentum*v + g; p <- p - lr*v, in place."""
    for name, node in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != node.value.shape or v.shape != node.value.shape:
            raise ContractError(f"gradient shape {g.shape} does not match "
                                f"parameter {name} {node.value.shape}")
        v *= momentum
        v += g
        node.value -= lr * v


def zero_grads(params: dict) -> None:
    for node in params.values():
        if node.grad is not None:
            node.grad[...] = 0.0


def collect_grads(params: dict) -> dict:
    return {name: node.grad.copy() for name, node in params.items()}


def _snapshot(params: dict) -> dict:
    return {name: node.value.copy() for name, node in params.items()}


def _restore(params: dict, snapshot: dict) -> None:
    for name, node in params.items():
        node.value = snapshot[name].copy()


def _emit(log, record: dict) -> None:
    if log is not None:
        log.write(json.dumps(record) + "\n")
        log.flush()


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise InvariantError(f"loss diverged ({value}) at {where}")


def pretrain_classifier(train: list[Sample], holdout: list[Sample],
                        cfg: TrainConfig, width: int = 8,
                        log=None) -> nets.Model:
    """Minimize the multi-label cross entropy on full-size images; keep the
    parameters from the epoch with the best holdout mAP."""
    n_classes = len(train[0].labels)
    rng = np.random.default_rng(cfg.seed)
    model = nets.build_classifier(n_classes, rng, width)
    params = nets.trainable_params(model)
    state = OptimizerState.for_params(params)
    best = {"map": -1.0, "params": _snapshot(params)}

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch):
            batch = [train[i] for i in order[start:start + cfg.batch]]
            images, labels = to_batch(batch)
            logits = nets.classify(model, Node(images)).logits
            loss = losses.content_loss(logits, labels)
            value = float(loss.value.reshape(()))
            _check_finite(value, f"pretrain step {step} (epoch {epoch})")
            zero_grads(params)
            tensor.backward(loss)
            sgd_step(params, collect_grads(params), state,
                     cfg.lr, cfg.momentum)
            epoch_losses.append(value)
            step += 1
        holdout_map = _holdout_map(model, holdout)
        _emit(log, {"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                    "mAP": holdout_map})
        if holdout_map > best["map"]:
            best = {"map": holdout_map, "params": _snapshot(params)}
    _restore(params, best["params"])
    return model


def _holdout_map(model: nets.Model, holdout: list[Sample]) -> float:
    scores = evaluate.classify_images(model, [s.image for s in holdout])
    labels = np.stack([s.labels for s in holdout])
    return evaluate.mean_average_precision(scores, labels)


def training_map(model: nets.Model, samples: list[Sample]) -> float:
    return _holdout_map(model, samples)


def eval_total_loss(model: nets.Model, classifier: nets.Model,
                    samples: list[Sample], cfg: TrainConfig,
                    ratio: float = 0.5) -> float:
    """Mean retargeting loss over a split at one fixed width ratio."""
    total = 0.0
    for sample in samples:
        image = Node(u8_to_unit(sample.image))
        h, w = image.value.shape[-2:]
        spec = shift.RetargetSpec(h, w, max(1, round(ratio * w)),
                                  cfg.lam, cfg.gamma)
        result = shift.retarget_width(image, model, spec)
        padded = losses.pad_to_canvas(result.output, w)
        e_c = losses.content_loss(nets.classify(classifier, padded).logits,
                                  sample.labels[None, :])
        e_s = losses.structure_loss(image, result.output, result.shift,
                                    classifier)
        combined, _ = losses.total_loss(e_c, e_s, cfg.w_s)
        total += float(combined.value.reshape(()))
    return total / len(samples)


def train_retargeter(train: list[Sample], holdout: list[Sample],
                     classifier: nets.Model, cfg: TrainConfig,
                     log=None) -> nets.Model:
    """End-to-end loop: attention -> shift -> warp -> pad -> classify.

    The classifier and the copied encoder trunk stay frozen; only decoder
    and column-filter parameters move.  One target width is drawn per
    batch.  A shift-map invariant violation aborts with the offending step
    serialized to the log.
    """
    nets.freeze_model(classifier)
    rng = np.random.default_rng(cfg.seed)
    h, w = train[0].image.shape[:2]
    model = nets.build_encoder_decoder(classifier, rng, height=h)
    params = nets.trainable_params(model)
    state = OptimizerState.for_params(params)

    initial = eval_total_loss(model, classifier, holdout, cfg)
    _emit(log, {"event": "init", "eval_total": initial})
    best = {"loss": initial, "params": _snapshot(params)}

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch):
            batch = [train[i] for i in order[start:start + cfg.batch]]
            lo = int(round(cfg.ratio_min * w))
            hi = int(round(cfg.ratio_max * w))
            target = int(rng.integers(lo, hi + 1))
            try:
                report = _retarget_step(batch, model, classifier, cfg,
                                        target, params, state)
            except InvariantError as exc:
                _emit(log, {"event": "abort", "step": step, "epoch": epoch,
                            "W'": target, "batch": [s.id for s in batch],
                            "error": str(exc)})
                raise
            _emit(log, {"step": step, "epoch": epoch, **report,
                        "W'": target})
            step += 1
        holdout_loss = eval_total_loss(model, classifier, holdout, cfg)
        _emit(log, {"event": "epoch", "epoch": epoch,
                    "eval_total": holdout_loss})
        if holdout_loss < best["loss"]:
            best = {"loss": holdout_loss, "params": _snapshot(params)}
    _restore(params, best["params"])
    return model


def _retarget_step(batch: list[Sample], model: nets.Model,
                   classifier: nets.Model, cfg: TrainConfig, target: int,
                   params: dict, state: OptimizerState) -> dict:
    zero_grads(params)
    sum_c = sum_s = 0.0
    for sample in batch:
        image = Node(u8_to_unit(sample.image))
        h, w = image.value.shape[-2:]
        spec = shift.RetargetSpec(h, w, target, cfg.lam, cfg.gamma)
        result = shift.retarget_width(image, model, spec)
        padded = losses.pad_to_canvas(result.output, w)
        e_c = losses.content_loss(nets.classify(classifier, padded).logits,
                                  sample.labels[None, :])
        e_s = losses.structure_loss(image, result.output, result.shift,
                                    classifier)
        combined, report = losses.total_loss(e_c, e_s, cfg.w_s)
        _check_finite(report.total, f"retarget step on {sample.id}")
        tensor.backward(tensor.scalar_mul(combined, 1.0 / len(batch)))
        sum_c += report.content
        sum_s += report.structure
    sgd_step(params, collect_grads(params), state, cfg.lr, cfg.momentum)
    n = len(batch)
    return {"E_c": sum_c / n, "E_s": sum_s / n,
            "total": (sum_c + cfg.w_s * sum_s) / n, "w_s": cfg.w_s}
