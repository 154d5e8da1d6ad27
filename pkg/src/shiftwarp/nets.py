"""Miniature classifier and encoder-decoder models with checkpoint I/O.

A Model is an ordered list of layer descriptors plus a name-addressed
parameter store.  The classifier trunk is three conv blocks separated by
2x2 max pools, ending in global average pooling and a dense head; the
decoder mirrors the trunk with upsampling stages and emits a sigmoid
attention map at input resolution.  Frozen layer ids are excluded from
training updates and carry no gradient state at all.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops, tensor
from .errors import ContractError, FormatError, IntegrityError
from .tensor import Node


@dataclass
class Layer:
    """One architecture entry: convs/dense carry channel extents, the
    shift1d entry carries the column-filter length in cin."""
    id: str
    kind: str            # conv3 | pool | up | gap | dense | shift1d
    cin: int = 0
    cout: int = 0
    act: str = "none"    # elu | sigmoid | none


@dataclass
class Model:
    layers: list[Layer]
    params: dict[str, dict[str, Node]]
    frozen: set[str] = field(default_factory=set)


@dataclass
class ClassifierOutput:
    logits: Node
    features: list[Node]  # first-block conv activations, input resolution


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _init_params(layers, rng) -> dict:
    params: dict[str, dict[str, Node]] = {}
    for lay in layers:
        if lay.kind == "conv3":
            params[lay.id] = {
                "w": Node(_he(rng, (lay.cout, lay.cin, 3, 3), lay.cin * 9),
                          requires_grad=True),
                "b": Node(np.zeros(lay.cout), requires_grad=True),
            }
        elif lay.kind == "dense":
            params[lay.id] = {
                "w": Node(_he(rng, (lay.cin, lay.cout), lay.cin),
                          requires_grad=True),
                "b": Node(np.zeros(lay.cout), requires_grad=True),
            }
        elif lay.kind == "shift1d":
            # uniform column averaging keeps the initial combined attention
            # positive and the first shift maps sane
            params[lay.id] = {
                "w": Node(np.full(lay.cin, 1.0 / lay.cin), requires_grad=True),
                "b": Node(np.zeros(1), requires_grad=True),
            }
    return params


def _activate(x: Node, act: str) -> Node:
    if act == "elu":
        return tensor.elu(x)
    if act == "sigmoid":
        return tensor.sigmoid(x)
    return x


def forward(model: Model, x: Node) -> tuple[Node, list[Node]]:
    """Walk the layer list; returns the final node and the pre-pool conv
    activations (F_1, F_2 for the classifier trunk)."""
    sizes: list[tuple[int, int]] = []
    features: list[Node] = []
    before_pool = True
    for lay in model.layers:
        if lay.kind == "conv3":
            p = model.params[lay.id]
            x = _activate(ops.conv2d(x, p["w"], p["b"]), lay.act)
            if before_pool:
                features.append(x)
        elif lay.kind == "pool":
            before_pool = False
            sizes.append(x.value.shape[-2:])
            x = ops.maxpool2(x)
        elif lay.kind == "up":
            # restore the exact pre-pool extent; 2x everywhere the input
            # extents divide evenly
            h, w = sizes.pop()
            x = ops.resize_bilinear(x, h, w)
        elif lay.kind == "gap":
            x = tensor.reduce_mean(x, axes=(2, 3))
        elif lay.kind == "dense":
            p = model.params[lay.id]
            x = tensor.add(ops.matmul(x, p["w"]), p["b"])
        elif lay.kind == "shift1d":
            pass  # pulled by the shift pipeline, not part of the stack
        else:
            raise ContractError(f"unknown layer kind {lay.kind!r}")
    return x, features


def classify(model: Model, x: Node) -> ClassifierOutput:
    logits, features = forward(model, x)
    return ClassifierOutput(logits=logits, features=features)


def block1_features(model: Model, x: Node) -> list[Node]:
    """Only the pre-pool conv activations; cheap, and defined for inputs
    too narrow to survive the pooling stack."""
    features = []
    for lay in model.layers:
        if lay.kind == "pool":
            break
        if lay.kind == "conv3":
            p = model.params[lay.id]
            x = _activate(ops.conv2d(x, p["w"], p["b"]), lay.act)
            features.append(x)
    return features


def attention_map(model: Model, x: Node) -> Node:
    out, _ = forward(model, x)
    return out


def build_classifier(n_classes: int, rng: np.random.Generator,
                     width: int = 8) -> Model:
    """Three-block conv trunk with GAP head; width is the block-1 channel
    count (wider variants serve the held-out evaluation classifier)."""
    if n_classes < 1:
        raise ContractError(f"need at least one class, got {n_classes}")
    w1, w2, w3 = width, 2 * width, 4 * width
    layers = [
        Layer("c1", "conv3", 3, w1, "elu"),
        Layer("c2", "conv3", w1, w1, "elu"),
        Layer("p1", "pool"),
        Layer("c3", "conv3", w1, w2, "elu"),
        Layer("p2", "pool"),
        Layer("c4", "conv3", w2, w3, "elu"),
        Layer("p3", "pool"),
        Layer("gap", "gap"),
        Layer("head", "dense", w3, n_classes),
    ]
    return Model(layers, _init_params(layers, rng))


def build_encoder_decoder(classifier: Model, rng: np.random.Generator,
                          height: int = 64) -> Model:
    """Encoder = frozen copy of the classifier conv trunk; decoder mirrors
    it upward to a sigmoid attention map.  Also owns the H-length column
    filter applied downstream of the decoder."""
    trunk = [lay for lay in classifier.layers if lay.kind in ("conv3", "pool")]
    if all(not classifier.params[lay.id]["w"].value.any()
           for lay in trunk if lay.kind == "conv3"):
        warnings.warn("classifier trunk weights are all zero; encoder "
                      "features will be uninformative", stacklevel=2)

    widths = [lay.cout for lay in trunk if lay.kind == "conv3"]
    w1, w3 = widths[0], widths[-1]
    layers = [Layer(lay.id, lay.kind, lay.cin, lay.cout, lay.act)
              for lay in trunk]
    layers += [
        Layer("u1", "up"),
        Layer("g1", "conv3", w3, w3 // 2, "elu"),
        Layer("u2", "up"),
        Layer("g2", "conv3", w3 // 2, w1, "elu"),
        Layer("u3", "up"),
        Layer("g3", "conv3", w1, w1, "elu"),
        Layer("g4", "conv3", w1, 1, "sigmoid"),
        Layer("s1", "shift1d", height, 1),
    ]

    frozen = {lay.id for lay in trunk if lay.kind == "conv3"}
    params = _init_params([lay for lay in layers if lay.id not in frozen], rng)
    for lid in frozen:
        params[lid] = {
            name: Node(node.value.copy(), requires_grad=False)
            for name, node in classifier.params[lid].items()
        }
    return Model(layers, params, frozen)


def shift_filter(model: Model) -> tuple[Node, Node]:
    """The learned column filter and bias of the shift1d entry."""
    for lay in model.layers:
        if lay.kind == "shift1d":
            p = model.params[lay.id]
            return p["w"], p["b"]
    raise ContractError("model has no shift1d entry")


def trainable_params(model: Model) -> dict[str, Node]:
    out = {}
    for lid, group in model.params.items():
        if lid in model.frozen:
            continue
        for name, node in group.items():
            out[f"{lid}.{name}"] = node
    return out


def freeze_model(model: Model) -> None:
    """Mark every layer frozen and drop gradient tracking on its params."""
    for lid, group in model.params.items():
        model.frozen.add(lid)
        for node in group.values():
            node.requires_grad = False
            node.grad = None


# ---------------------------------------------------------------------------
# Checkpoint container: magic "RTCK", u8 version, u16 entry count, then per
# entry a u16 name length, the UTF-8 name, and one serialized tensor.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RTCK"
CHECKPOINT_VERSION = 1
_META_NAME = "__meta__"


def _text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _tensor_text(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8)).decode("utf-8")


def save_checkpoint(model: Model, path) -> None:
    meta = {"layers": [asdict(lay) for lay in model.layers],
            "frozen": sorted(model.frozen)}
    entries: list[tuple[str, np.ndarray]] = [
        (_META_NAME, _text_tensor(json.dumps(meta)))]
    for lid in sorted(model.params):
        for pname in sorted(model.params[lid]):
            entries.append((f"{lid}.{pname}", model.params[lid][pname].value))

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<BH", CHECKPOINT_VERSION, len(entries))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += tensor.tensor_to_bytes(arr)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack_from("<BH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")

    tensors: dict[str, np.ndarray] = {}
    pos = 7
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise IntegrityError("truncated checkpoint entry name")
            pos += name_len
            arr, pos = tensor.tensor_from_bytes(data, pos)
            tensors[name] = arr
    except (struct.error, FormatError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint: {exc}") from exc

    if _META_NAME not in tensors:
        raise IntegrityError("checkpoint has no architecture record")
    try:
        meta = json.loads(_tensor_text(tensors[_META_NAME]))
        layers = [Layer(**entry) for entry in meta["layers"]]
        frozen = set(meta["frozen"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"corrupt architecture record: {exc}") from exc

    params: dict[str, dict[str, Node]] = {}
    for lay in layers:
        if lay.kind not in ("conv3", "dense", "shift1d"):
            continue
        group = {}
        for pname in ("w", "b"):
            key = f"{lay.id}.{pname}"
            if key not in tensors:
                raise IntegrityError(f"missing parameter {key}")
            group[pname] = Node(tensors[key],
                                requires_grad=lay.id not in frozen)
        params[lay.id] = group
    return Model(layers, params, frozen)
