"""Classification-preservation experiment: retarget, rescale back, classify.

The headline metric is the mAP ratio mAP(retargeted) / mAP(original) per
method and scale.  Retargeted images are linearly rescaled back to the
source width before classification so every method is scored by the same
classifier on the same canvas, and that classifier should be a separately
seeded (and wider) model than the one driving the attention pipeline to
keep the comparison honest.
"""

from __future__ import annotations

import io
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import baselines, nets, shift
from .dataset import Sample, u8_to_unit, unit_to_u8
from .errors import ConfigurationError, ContractError
from .tensor import Node

DEFAULT_SCALES = (0.7, 0.6, 0.5, 0.4, 0.3)

# report key -> baseline callable; "ours" is handled by the shift pipeline
BASELINE_KEYS = {
    "linear": baselines.linear_scale,
    "center_crop": baselines.center_crop,
    "edge_crop": baselines.edge_crop,
    "seam_carve": baselines.seam_carve,
}

METHOD_ORDER = ("ours",) + tuple(BASELINE_KEYS)


def average_precision(scores, labels):
    """Mean precision at each positive, ranked by descending score.

    Ties keep input order (stable sort).  Returns None when the class has
    no positives, which callers report as a skip.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"scores {scores.shape} vs labels {labels.shape}")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    positives = ranked.cumsum()
    if positives[-1] == 0:
        return None
    ranks = np.arange(1, len(ranked) + 1)
    hits = ranked == 1.0
    return float((positives[hits] / ranks[hits]).mean())


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes that have at least one positive."""
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ContractError(f"scores {scores.shape} vs labels {labels.shape}")
    per_class = [average_precision(scores[:, c], labels[:, c])
                 for c in range(scores.shape[1])]
    kept = [ap for ap in per_class if ap is not None]
    if not kept:
        raise ContractError("no class has a positive label")
    return float(np.mean(kept))


def classify_images(model: nets.Model, images: list[np.ndarray],
                    batch: int = 32) -> np.ndarray:
    """Sigmoid class scores for a list of HxWx3 uint8 images."""
    scores = []
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        x = Node(np.concatenate([u8_to_unit(im) for im in chunk], axis=0))
        logits = nets.classify(model, x).logits
        scores.append(1.0 / (1.0 + np.exp(-logits.value)))
    return np.concatenate(scores, axis=0)


@dataclass
class EvalReport:
    scales: list[float]
    methods: dict[str, list[float]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, ratios in self.methods.items():
            if len(ratios) != len(self.scales):
                raise ContractError(f"method {name!r} has {len(ratios)} "
                                    f"ratios for {len(self.scales)} scales")
            if any(r < 0.0 for r in ratios):
                raise ContractError(f"negative mAP ratio under {name!r}")

    def to_json(self) -> str:
        return json.dumps({"scales": self.scales, "methods": self.methods,
                           "meta": self.meta}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(scales=raw["scales"], methods=raw["methods"],
                   meta=raw.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", "scale", "ratio"])
        for name, ratios in self.methods.items():
            for scale, ratio in zip(self.scales, ratios):
                writer.writerow([name, scale, repr(ratio)])
        return buf.getvalue()


def retarget_ours(image: np.ndarray, model: nets.Model, target_width: int,
                  lam: float, gamma: float) -> np.ndarray:
    spec = shift.RetargetSpec(image.shape[0], image.shape[1], target_width,
                              lam, gamma)
    result = shift.retarget_width(Node(u8_to_unit(image)), model, spec)
    return unit_to_u8(result.output.value)


def map_ratio_experiment(samples: list[Sample], model: nets.Model,
                         eval_classifier: nets.Model,
                         scales=DEFAULT_SCALES, lam: float = 0.2,
                         gamma: float = 1.0, meta: dict | None = None
                         ) -> EvalReport:
    if model is None or eval_classifier is None:
        raise ConfigurationError("both the retargeting model and the "
                                 "evaluation classifier are required")
    if not samples:
        raise ContractError("empty evaluation split")
    labels = np.stack([s.labels for s in samples])
    originals = [s.image for s in samples]
    width = originals[0].shape[1]
    base_scores = classify_images(eval_classifier, originals)
    base_map = mean_average_precision(base_scores, labels)

    methods = {name: [] for name in METHOD_ORDER}
    for scale in scales:
        target = max(1, round(scale * width))
        narrowed = {"ours": [retarget_ours(im, model, target, lam, gamma)
                             for im in originals]}
        for name, fn in BASELINE_KEYS.items():
            narrowed[name] = [fn(im, target) for im in originals]
        for name in METHOD_ORDER:
            restored = [baselines.linear_scale(im, width)
                        for im in narrowed[name]]
            scores = classify_images(eval_classifier, restored)
            ratio = mean_average_precision(scores, labels) / base_map
            methods[name].append(ratio)

    report_meta = {"base_map": base_map, "samples": len(samples),
                   "lam": lam, "gamma": gamma}
    if meta:
        report_meta.update(meta)
    return EvalReport(scales=list(scales), methods=methods, meta=report_meta)
