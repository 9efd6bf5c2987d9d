"""From-scratch classifiers served to the attack as probability oracles.

Three families are available:

* ``lr``  - a single softmax layer (multinomial logistic regression)
* ``dnn`` - fully connected ReLU network, two hidden layers of 128 by default
* ``cnn`` - one 3x3 convolution (8 filters, ReLU), 2x2 max pool, dense softmax

Everything is float64 numpy. Layers are stateless: ``forward`` returns the
output together with a cache, ``backward`` consumes that cache, so a trained
model can be queried from several threads at once.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import LabeledDataset

log = logging.getLogger(__name__)

KINDS = ("lr", "dnn", "cnn")
WEIGHTS_MAGIC = b"EVOW"
WEIGHTS_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class WeightsFormatError(ValueError):
    pass


def softmax_t(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, shifted by the max for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- layers -----------------------------------------------------------------

class Dense:
    def __init__(self, name, n_in, n_out, relu_after=False):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.relu_after = relu_after

    def shapes(self):
        return {f"{self.name}.W": (self.n_in, self.n_out), f"{self.name}.b": (self.n_out,)}

    def init(self, rng):
        scale = np.sqrt((2.0 if self.relu_after else 1.0) / self.n_in)
        return {f"{self.name}.W": rng.standard_normal((self.n_in, self.n_out)) * scale,
                f"{self.name}.b": np.zeros(self.n_out)}

    def forward(self, params, x):
        return x @ params[f"{self.name}.W"] + params[f"{self.name}.b"], x

    def backward(self, params, x, dy):
        grads = {f"{self.name}.W": x.T @ dy, f"{self.name}.b": dy.sum(axis=0)}
        return dy @ params[f"{self.name}.W"].T, grads


class ReLU:
    def shapes(self):
        return {}

    def init(self, rng):
        return {}

    def forward(self, params, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, params, mask, dy):
        return dy * mask, {}


class Reshape:
    def __init__(self, in_shape, out_shape):
        self.in_shape, self.out_shape = tuple(in_shape), tuple(out_shape)

    def shapes(self):
        return {}

    def init(self, rng):
        return {}

    def forward(self, params, x):
        return x.reshape((x.shape[0],) + self.out_shape), None

    def backward(self, params, cache, dy):
        return dy.reshape((dy.shape[0],) + self.in_shape), {}


class Conv2D:
    """Valid (unpadded) stride-1 convolution on NHWC input."""

    def __init__(self, name, size, c_in, c_out):
        self.name, self.size, self.c_in, self.c_out = name, size, c_in, c_out

    def shapes(self):
        k = self.size
        return {f"{self.name}.W": (k, k, self.c_in, self.c_out), f"{self.name}.b": (self.c_out,)}

    def init(self, rng):
        k = self.size
        scale = np.sqrt(2.0 / (k * k * self.c_in))
        return {f"{self.name}.W": rng.standard_normal((k, k, self.c_in, self.c_out)) * scale,
                f"{self.name}.b": np.zeros(self.c_out)}

    def forward(self, params, x):
        k = self.size
        # (B, Ho, Wo, C, k, k) -> (B, Ho, Wo, k, k, C)
        cols = sliding_window_view(x, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
        b, ho, wo = cols.shape[:3]
        flat = cols.reshape(b * ho * wo, k * k * self.c_in)
        w = params[f"{self.name}.W"].reshape(k * k * self.c_in, self.c_out)
        y = (flat @ w).reshape(b, ho, wo, self.c_out) + params[f"{self.name}.b"]
        return y, (x.shape, flat)

    def backward(self, params, cache, dy):
        in_shape, flat = cache
        k = self.size
        b, ho, wo, _ = dy.shape
        dy2 = dy.reshape(b * ho * wo, self.c_out)
        w = params[f"{self.name}.W"]
        grads = {f"{self.name}.W": (flat.T @ dy2).reshape(w.shape),
                 f"{self.name}.b": dy2.sum(axis=0)}
        dcols = (dy2 @ w.reshape(k * k * self.c_in, self.c_out).T).reshape(b, ho, wo, k, k, self.c_in)
        dx = np.zeros(in_shape)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return dx, grads


class MaxPool:
    """Non-overlapping max pool; trailing rows/columns that do not fill a window are dropped."""

    def __init__(self, size):
        self.size = size

    def shapes(self):
        return {}

    def init(self, rng):
        return {}

    def forward(self, params, x):
        p = self.size
        b, h, w, c = x.shape
        ho, wo = h // p, w // p
        win = x[:, :ho * p, :wo * p, :].reshape(b, ho, p, wo, p, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(b, ho, wo, c, p * p)
        arg = win.argmax(axis=-1)  # first maximum wins
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, params, cache, dy):
        in_shape, arg = cache
        p = self.size
        b, h, w, c = in_shape
        ho, wo = h // p, w // p
        dwin = np.zeros((b, ho, wo, c, p * p))
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(b, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(b, ho * p, wo * p, c)
        dx = np.zeros(in_shape)
        dx[:, :ho * p, :wo * p, :] = dwin
        return dx, {}


# -- configuration and weights ------------------------------------------------

@dataclass
class ModelConfig:
    kind: str = "lr"
    input_shape: tuple = (8, 8, 1)
    num_classes: int = 10
    hidden: tuple = (128, 128)
    conv_filters: int = 8
    conv_size: int = 3
    pool: int = 2
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    temperature: float = 1.0
    accuracy_floor: float = 0.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "cnn":
            h, w, _ = self.input_shape
            conv = h - self.conv_size + 1, w - self.conv_size + 1
            if min(conv) < self.pool:
                raise ValueError(f"input {self.input_shape} too small for the conv/pool stack")

    @property
    def num_features(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


def architecture(config: ModelConfig) -> list:
    n, m = config.num_features, config.num_classes
    if config.kind == "lr":
        return [Dense("dense0", n, m)]
    if config.kind == "dnn":
        layers, width = [], n
        for i, h in enumerate(config.hidden):
            layers += [Dense(f"dense{i}", width, h, relu_after=True), ReLU()]
            width = h
        return layers + [Dense(f"dense{len(config.hidden)}", width, m)]
    h, w, c = config.input_shape
    k, p, f = config.conv_size, config.pool, config.conv_filters
    ho, wo = (h - k + 1) // p, (w - k + 1) // p
    return [
        Reshape((n,), (h, w, c)),
        Conv2D("conv0", k, c, f), ReLU(), MaxPool(p),
        Reshape((ho, wo, f), (ho * wo * f,)),
        Dense("dense0", ho * wo * f, m),
    ]


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict
    version: int = WEIGHTS_VERSION
    train_accuracy: float | None = None
    below_floor: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = {}
        for layer in architecture(self.config):
            expected.update(layer.shapes())
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")


def init_weights(config: ModelConfig, seed: int | None = None) -> ModelWeights:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for layer in architecture(config):
        params.update(layer.init(rng))
    return ModelWeights(config, params)


def logits(layers, params, x, keep=False):
    caches = []
    for layer in layers:
        x, cache = layer.forward(params, x)
        if keep:
            caches.append(cache)
    return (x, caches) if keep else x


def loss_and_grads(config: ModelConfig, params: dict, x, targets, temperature: float):
    """Cross-entropy of softmax(z / T) against (soft) targets, averaged over the batch."""
    layers = architecture(config)
    z, caches = logits(layers, params, x, keep=True)
    if not np.all(np.isfinite(z)):
        return np.inf, {}
    probs = softmax_t(z, temperature)
    b = len(x)
    loss = -np.sum(targets * np.log(np.maximum(probs, 1e-300))) / b
    dy = (probs - targets) / (temperature * b)
    grads = {}
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dy, g = layer.backward(params, cache, dy)
        grads.update(g)
    return loss, grads


# -- the oracle -----------------------------------------------------------------

class Classifier:
    """Probability oracle over trained weights. Queries never mutate the model."""

    def __init__(self, weights: ModelWeights, temperature: float | None = None):
        self.weights = weights
        self.config = weights.config
        self.temperature = self.config.temperature if temperature is None else temperature
        self._layers = architecture(self.config)

    @property
    def input_shape(self):
        return self.config.input_shape

    @property
    def num_classes(self):
        return self.config.num_classes

    def classify_batch(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.num_features:
            raise ValueError(f"expected (k, {self.config.num_features}) input, got {x.shape}")
        return softmax_t(logits(self._layers, self.weights.params, x), self.temperature)

    def classify(self, image) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"expected a flat image vector, got shape {x.shape}")
        return self.classify_batch(x[None, :])[0]

    def predict(self, images) -> np.ndarray:
        # np.argmax returns the lowest index among ties
        return self.classify_batch(images).argmax(axis=1)

    __call__ = classify


def classify(weights: ModelWeights, x) -> np.ndarray:
    return Classifier(weights).classify(x)


def accuracy(weights: ModelWeights, data: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if len(data) == 0:
        return 0.0
    if data.num_features != weights.config.num_features:
        raise ValueError("dataset and model input sizes differ")
    return float(np.mean(Classifier(weights).predict(data.images) == data.labels))


# -- training -----------------------------------------------------------------

def _check_data(config: ModelConfig, data: LabeledDataset):
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.num_features != config.num_features:
        raise ValueError(f"dataset has {data.num_features} features, model expects {config.num_features}")
    if data.num_classes != config.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model expects {config.num_classes}")


def _fit(config, images, targets, seed, temperature):
    """Plain mini-batch SGD. Init and shuffling both draw from one generator seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in architecture(config):
        params.update(layer.init(rng))
    n = len(images)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            _epoch(config, params, images, targets, rng.permutation(n), temperature, epoch)
    return params


def _epoch(config, params, images, targets, order, temperature, epoch):
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        loss, grads = loss_and_grads(config, params, images[idx], targets[idx], temperature)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
        for name, g in grads.items():
            params[name] -= config.learning_rate * g


def _finish(config, params, data, meta=None) -> ModelWeights:
    weights = ModelWeights(config, params, meta=meta or {})
    weights.train_accuracy = accuracy(weights, data)
    if weights.train_accuracy < config.accuracy_floor:
        weights.below_floor = True
        log.warning("training accuracy %.4f below floor %.4f", weights.train_accuracy, config.accuracy_floor)
    return weights


def train(config: ModelConfig, data: LabeledDataset, seed: int | None = None) -> ModelWeights:
    """Train on hard labels at the configured temperature. ``seed`` defaults to ``config.seed``."""
    _check_data(config, data)
    seed = config.seed if seed is None else seed
    onehot = np.eye(config.num_classes)[data.labels]
    params = _fit(config, data.images, onehot, seed, config.temperature)
    return _finish(config, params, data)


def distill(teacher_cfg: ModelConfig, student_cfg: ModelConfig, temperature: float,
            data: LabeledDataset, seed: int | None = None, serve_temperature: float = 1.0):
    """Defensive distillation.

    The teacher is trained at ``temperature`` on hard labels; the student is
    trained at the same temperature on the teacher's softened probabilities
    and then served at ``serve_temperature``. Returns ``(student, teacher)``.
    """
    if temperature < 1:
        raise ValueError("distillation temperature must be >= 1")
    seed = teacher_cfg.seed if seed is None else seed
    teacher = train(replace(teacher_cfg, temperature=temperature), data, seed)
    soft = Classifier(teacher).classify_batch(data.images)
    _check_data(student_cfg, data)
    params = _fit(student_cfg, data.images, soft, seed + 1, temperature)
    student = _finish(replace(student_cfg, temperature=serve_temperature), params, data,
                      meta={"distilled_at": temperature})
    return student, teacher


# -- persistence ----------------------------------------------------------------
#
# Layout (all integers little-endian):
#   0   4 bytes   magic b"EVOW"
#   4   uint32    format version (currently 1)
#   8   uint32    header length H
#   12  H bytes   UTF-8 JSON header: {"config": {...}, "arrays": [{"name", "shape"}...],
#                 "train_accuracy", "below_floor", "meta"}
#   12+H          float64 LE arrays, C order, in header order
#   end-4 uint32  CRC-32 of every preceding byte

def save_weights(weights: ModelWeights, path) -> None:
    names = list(weights.params)
    header = json.dumps({
        "config": weights.config.to_dict(),
        "arrays": [{"name": k, "shape": list(weights.params[k].shape)} for k in names],
        "train_accuracy": weights.train_accuracy,
        "below_floor": weights.below_floor,
        "meta": weights.meta,
    }, sort_keys=True).encode()
    body = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(header)), header]
    body += [np.ascontiguousarray(weights.params[k], dtype="<f8").tobytes() for k in names]
    blob = b"".join(body)
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_weights(path) -> ModelWeights:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: not a weights file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: weights version {version}, expected {WEIGHTS_VERSION}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise WeightsFormatError(f"{path}: checksum mismatch, payload corrupt")
    try:
        header = json.loads(blob[12:12 + hlen])
    except ValueError as exc:
        raise WeightsFormatError(f"{path}: bad header") from exc
    offset, params = 12 + hlen, {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        if offset + 8 * count > len(blob) - 4:
            raise WeightsFormatError(f"{path}: truncated array {spec['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(blob) - 4:
        raise WeightsFormatError(f"{path}: {len(blob) - 4 - offset} trailing bytes")
    return ModelWeights(ModelConfig.from_dict(header["config"]), params, version=version,
                        train_accuracy=header["train_accuracy"], below_floor=header["below_floor"],
                        meta=header["meta"])
