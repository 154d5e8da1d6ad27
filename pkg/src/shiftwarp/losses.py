"""Content and structure losses for weakly supervised retarget training.

Content: per-class sigmoid cross entropy of a frozen classifier on the
retargeted image, averaged over classes and batch.  Structure: mean L1
gap between first-block features of the retargeted image and source
features sampled at the warped coordinates, summed over the two taps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nets, ops, tensor
from .errors import ContractError
from .shift import ShiftMap
from .tensor import Node


@dataclass
class LossReport:
    content: float
    structure: float
    total: float
    weight: float  # the E_s multiplier

    def to_json(self, **extra) -> str:
        record = {"E_c": self.content, "E_s": self.structure,
                  "total": self.total, "w_s": self.weight}
        record.update(extra)
        return json.dumps(record)


def pad_to_canvas(output: Node, width: int) -> Node:
    """Center the retargeted image on a zero canvas of the source width."""
    return ops.pad_width_centered(output, width)


def content_loss(logits: Node, labels: np.ndarray) -> Node:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.value.shape:
        raise ContractError(
            f"labels {labels.shape} do not match logits {logits.value.shape}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ContractError("labels must be multi-hot 0/1 vectors")
    p = tensor.sigmoid(logits)
    on = tensor.mul(Node(labels), tensor.log(p))
    off = tensor.mul(Node(1.0 - labels), tensor.log(1.0 - p))
    return tensor.scalar_mul(tensor.reduce_mean(tensor.add(on, off)), -1.0)


def structure_loss(image: Node, output: Node, s: ShiftMap,
                   classifier: nets.Model) -> Node:
    """Sum over the two first-block taps of mean |F_j(O) - F_j(I) at x+S|.

    Source features are sampled with the same two-tap stencil as the warp,
    so the loss compares each retargeted pixel's neighborhood against the
    source neighborhood it was pulled from.
    """
    feats_out = nets.block1_features(classifier, output)
    feats_src = nets.block1_features(classifier, image)
    total = None
    for f_out, f_src in zip(feats_out, feats_src):
        sampled = ops.warp_width(f_src, s.values)
        gap = tensor.reduce_mean(tensor.absolute(tensor.sub(f_out, sampled)))
        total = gap if total is None else tensor.add(total, gap)
    return total


def total_loss(e_c: Node, e_s: Node, weight: float) -> tuple[Node, LossReport]:
    combined = tensor.add(e_c, tensor.scalar_mul(e_s, weight))
    report = LossReport(content=float(e_c.value.reshape(())),
                        structure=float(e_s.value.reshape(())),
                        total=float(combined.value.reshape(())),
                        weight=weight)
    return combined, report
