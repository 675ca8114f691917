"""Block-structured models (MLP, small CNN), training, and checkpoints.

A model is an ordered list of named blocks; each block is an ordered list
of layers. Parameters live on the layers as immutable tensors and are
replaced wholesale by SGD updates, so inference on a model is reentrant
and safe to share across threads while training is single-threaded.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tape, Tensor, backward
from .errors import CheckpointError, ConfigError, NumericError, ShapeMismatchError
from .gcm import GcmConfig, gcm_node

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCMB"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layers


class DenseLayer:
    def __init__(self, w: Tensor, b: Tensor, name: str):
        self.w = w
        self.b = b
        self.name = name

    def apply(self, tape, node):
        wn = tape.leaf(self.w.data, name=f"{self.name}.w", param_id=f"{self.name}.w")
        bn = tape.leaf(self.b.data, name=f"{self.name}.b", param_id=f"{self.name}.b")
        return ops.dense(tape, node, wn, bn)

    def params(self):
        return [(f"{self.name}.w", "w"), (f"{self.name}.b", "b")]


class Conv2dLayer:
    def __init__(self, k: Tensor, b: Tensor, name: str, stride: int = 1, padding: int = 0):
        self.k = k
        self.b = b
        self.name = name
        self.stride = stride
        self.padding = padding

    def apply(self, tape, node):
        kn = tape.leaf(self.k.data, name=f"{self.name}.k", param_id=f"{self.name}.k")
        bn = tape.leaf(self.b.data, name=f"{self.name}.b", param_id=f"{self.name}.b")
        return ops.conv2d(tape, node, kn, bn, stride=self.stride, padding=self.padding)

    def params(self):
        return [(f"{self.name}.k", "k"), (f"{self.name}.b", "b")]


class ReluLayer:
    def __init__(self, name: str = "relu"):
        self.name = name

    def apply(self, tape, node):
        return ops.relu(tape, node)

    def params(self):
        return []


class MaxPool2Layer:
    def __init__(self, name: str = "pool"):
        self.name = name

    def apply(self, tape, node):
        return ops.maxpool2(tape, node)

    def params(self):
        return []


class FlattenLayer:
    def __init__(self, name: str = "flatten"):
        self.name = name

    def apply(self, tape, node):
        return ops.flatten(tape, node)

    def params(self):
        return []


class GcmLayer:
    """Inference-time concealment layer; parameter-free."""

    def __init__(self, cfg: GcmConfig, name: str = "gcm"):
        self.cfg = cfg
        self.name = name

    def apply(self, tape, node):
        return gcm_node(tape, node, self.cfg)

    def params(self):
        return []


class Block:
    def __init__(self, name: str, layers: list):
        self.name = name
        self.layers = layers


class Model:
    """Ordered blocks with a softmax cross-entropy loss head."""

    def __init__(self, arch: dict, blocks: list, input_shape: tuple, num_classes: int):
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise ConfigError(f"block names must be unique, got {names}")
        self.arch = arch
        self.blocks = blocks
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)

    def block_names(self):
        return [b.name for b in self.blocks]

    def param_items(self):
        """(param_id, layer, attribute) triples in deterministic model order."""
        for block in self.blocks:
            for layer in block.layers:
                for pid, attr in layer.params():
                    yield pid, layer, attr

    def param_tensors(self) -> dict:
        return {pid: getattr(layer, attr) for pid, layer, attr in self.param_items()}

    def param_count(self) -> int:
        return sum(t.size for t in self.param_tensors().values())

    def set_param(self, param_id: str, tensor: Tensor):
        for pid, layer, attr in self.param_items():
            if pid == param_id:
                if getattr(layer, attr).shape != tensor.shape:
                    raise ShapeMismatchError(
                        f"parameter {param_id}: shape {tensor.shape} != {getattr(layer, attr).shape}")
                setattr(layer, attr, tensor)
                return
        raise KeyError(f"unknown parameter {param_id}")

    def is_cascade(self) -> bool:
        return any(isinstance(layer, GcmLayer) for b in self.blocks for layer in b.layers)

    def __repr__(self):
        return f"Model({self.arch.get('arch', '?')}, blocks={self.block_names()})"


# ---------------------------------------------------------------------------
# forward / gradients


def prepare_inputs(model: Model, images: np.ndarray) -> np.ndarray:
    """Reshape (N,H,W,C) image arrays to the model's declared input shape
    (flattening for the MLP). Raises on incompatible sizes."""
    images = np.asarray(images, dtype=np.float32)
    want = model.input_shape
    if images.shape[1:] == want:
        return images
    if int(np.prod(images.shape[1:])) == int(np.prod(want)):
        return images.reshape((images.shape[0],) + want)
    raise ShapeMismatchError(
        f"input images {images.shape[1:]} incompatible with model input {want}")


def forward_eval(model: Model, x: Tensor):
    """Run the model forward, recording every primitive on a fresh tape.

    Returns (logits, tape); the tape exposes the logits node and the input
    node for building losses and differentiating. Raises NumericError
    naming the offending layer if an activation goes non-finite.
    """
    if x.ndim < 1 or x.shape[1:] != model.input_shape:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match model input (N, {model.input_shape})")
    tape = Tape()
    node = tape.leaf(x.data, name="input", is_input=True)
    for block in model.blocks:
        for layer in block.layers:
            node = layer.apply(tape, node)
            if not np.all(np.isfinite(node.value)):
                raise NumericError(
                    f"non-finite activation after layer '{block.name}/{layer.name}'")
    tape.logits = node
    return Tensor(node.value), tape


_LOSS_KINDS = ("cross_entropy", "logit_sum", "neg_logit_sum")


def loss_node(tape, kind: str, labels=None):
    if kind == "cross_entropy":
        return ops.softmax_cross_entropy(tape, tape.logits, labels)
    if kind == "logit_sum":
        return ops.sum_all(tape, tape.logits)
    if kind == "neg_logit_sum":
        return ops.scale(tape, ops.sum_all(tape, tape.logits), -1.0)
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {_LOSS_KINDS}")


def grad_wrt_input(model: Model, x: Tensor, y=None, loss_kind: str = "cross_entropy") -> Tensor:
    """Gradient of the loss with respect to the input, model untouched.

    y: integer class labels in [0, num_classes), required for cross_entropy.
    """
    if loss_kind == "cross_entropy":
        y = np.asarray(y)
        if y.size and (y.min() < 0 or y.max() >= model.num_classes):
            raise ValueError(f"label out of range [0, {model.num_classes})")
    _, tape = forward_eval(model, x)
    loss = loss_node(tape, loss_kind, y)
    return backward(tape, loss).input_gradient


def predict(model: Model, x: Tensor) -> np.ndarray:
    """Argmax class labels; ties break toward the lowest class index."""
    logits, _ = forward_eval(model, x)
    return np.argmax(logits.data, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# construction


def _init_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(float(fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))


def normalize_arch(arch: dict) -> dict:
    """Fill defaults and validate an architecture descriptor."""
    if not isinstance(arch, dict) or "arch" not in arch:
        raise ConfigError(f"architecture descriptor needs an 'arch' key, got {arch!r}")
    kind = arch["arch"]
    if kind == "mlp":
        widths = [int(v) for v in arch.get("widths", [784, 128, 10])]
        if len(widths) < 2 or any(v <= 0 for v in widths):
            raise ConfigError(f"mlp widths must be >= 2 positive integers, got {widths}")
        return {"arch": "mlp", "widths": widths}
    if kind == "smallcnn":
        out = {
            "arch": "smallcnn",
            "input_hw": [int(v) for v in arch.get("input_hw", [28, 28])],
            "in_channels": int(arch.get("in_channels", 1)),
            "conv_channels": [int(v) for v in arch.get("conv_channels", [8, 16])],
            "kernel": int(arch.get("kernel", 3)),
            "classes": int(arch.get("classes", 10)),
        }
        if len(out["conv_channels"]) != 2:
            raise ConfigError("smallcnn takes exactly two conv channel counts")
        return out
    raise ConfigError(f"unknown architecture {kind!r}; expected 'mlp' or 'smallcnn'")


def build_model(arch: dict, seed: int = 0) -> Model:
    """Deterministically initialized model from a descriptor.

    Weights and biases are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
    drawn from a seeded generator, so the same seed gives bit-identical
    parameters.
    """
    arch = normalize_arch(arch)
    rng = np.random.default_rng(seed)

    if arch["arch"] == "mlp":
        widths = arch["widths"]
        blocks = []
        for i in range(len(widths) - 1):
            name = f"block{i + 1}"
            layers = [DenseLayer(_init_uniform(rng, (widths[i], widths[i + 1]), widths[i]),
                                 _init_uniform(rng, (widths[i + 1],), widths[i]),
                                 name=f"{name}/dense")]
            if i < len(widths) - 2:
                layers.append(ReluLayer())
            blocks.append(Block(name, layers))
        return Model(arch, blocks, input_shape=(widths[0],), num_classes=widths[-1])

    h, w = arch["input_hw"]
    cin = arch["in_channels"]
    c1, c2 = arch["conv_channels"]
    k = arch["kernel"]
    classes = arch["classes"]

    def conv(name, ci, co):
        return Conv2dLayer(_init_uniform(rng, (k, k, ci, co), k * k * ci),
                           _init_uniform(rng, (co,), k * k * ci), name=name)

    h1, w1 = (h - k + 1) // 2, (w - k + 1) // 2
    h2, w2 = (h1 - k + 1) // 2, (w1 - k + 1) // 2
    if h2 <= 0 or w2 <= 0:
        raise ConfigError(f"smallcnn: input {h}x{w} too small for two conv+pool stages")
    flat = h2 * w2 * c2
    blocks = [
        Block("block1", [conv("block1/conv", cin, c1), ReluLayer(), MaxPool2Layer()]),
        Block("block2", [conv("block2/conv", c1, c2), ReluLayer(), MaxPool2Layer()]),
        Block("block3", [FlattenLayer(),
                         DenseLayer(_init_uniform(rng, (flat, classes), flat),
                                    _init_uniform(rng, (classes,), flat),
                                    name="block3/dense")]),
    ]
    return Model(arch, blocks, input_shape=(h, w, cin), num_classes=classes)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


def train(model: Model, dataset, cfg: TrainConfig) -> Model:
    """Plain SGD on softmax cross-entropy; epochs=0 is an exact no-op.

    Concealment layers never take part in training (they are inference-time
    wrappers); the dataset is shuffled by a generator seeded from cfg.seed,
    so identical configs give bit-identical parameters. Aborts with the
    epoch index if the loss goes non-finite.
    """
    if len(dataset.labels) == 0:
        raise ConfigError("training dataset is empty")
    if dataset.labels.min() < 0 or dataset.labels.max() >= model.num_classes:
        raise ValueError(f"training labels out of range [0, {model.num_classes})")
    images = prepare_inputs(model, dataset.images)
    labels = dataset.labels
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    lr = float(cfg.learning_rate)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = Tensor(np.ascontiguousarray(images[idx]))
            try:
                _, tape = forward_eval(model, x)
                loss = ops.softmax_cross_entropy(tape, tape.logits, labels[idx])
                loss_val = float(loss.value)
                if not np.isfinite(loss_val):
                    raise NumericError("loss is non-finite")
                bundle = backward(tape, loss)
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}: {e}") from e
            for pid, layer, attr in model.param_items():
                p = getattr(layer, attr)
                g = bundle.params[pid]
                setattr(layer, attr, Tensor(
                    (p.data.astype(np.float64) - lr * g.data.astype(np.float64)).astype(np.float32)))
            total += loss_val
            batches += 1
        log.info("epoch %d/%d: mean loss %.6f", epoch + 1, cfg.epochs, total / batches)
    return model


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: magic "GCMB" | u16 LE version | u32 LE descriptor length |
# descriptor (UTF-8 JSON) | float32 LE parameter payload in model order |
# u32 LE CRC-32 of the payload bytes.


def save_checkpoint(model: Model, path):
    if model.is_cascade():
        raise ConfigError("cascaded models are inference wrappers; checkpoint the inner model")
    desc = json.dumps(model.arch, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        for t in model.param_tensors().values())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (desc_len,) = struct.unpack_from("<I", blob, 6)
    desc_end = 10 + desc_len
    if len(blob) < desc_end + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    try:
        arch = json.loads(blob[10:desc_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt architecture descriptor: {e}") from e

    model = build_model(arch, seed=0)
    payload = blob[desc_end:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, checkpoint corrupt or truncated")
    expected = model.param_count() * 4
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, architecture needs {expected}")

    offset = 0
    for pid, layer, attr in model.param_items():
        t = getattr(layer, attr)
        raw = np.frombuffer(payload, dtype="<f4", count=t.size, offset=offset)
        setattr(layer, attr, Tensor(raw.reshape(t.shape).copy(), allow_nonfinite=True))
        offset += t.size * 4
    return model


def checkpoint_roundtrip(model: Model, path) -> Model:
    """Save then reload; the result has bit-identical parameters."""
    save_checkpoint(model, path)
    return load_checkpoint(path)
