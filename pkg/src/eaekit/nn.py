"""Layers, preset models, softmax / cross-entropy, SGD and the triangular LR schedule."""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError
from .tensor import COUNTERS, Tensor

CHECKPOINT_FORMAT = "eaekit-checkpoint"
CHECKPOINT_VERSION = 1


class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out, rng):
        bound = math.sqrt(6.0 / n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.params = [self.weight, self.bias]

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d:
    kind = "conv2d"

    def __init__(self, c_in, c_out, k, rng, stride=1, padding=1):
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)
        self.kernel = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.params = [self.kernel, self.bias]

    def __call__(self, x):
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class ReLU:
    kind = "relu"
    params = ()

    def __call__(self, x):
        return T.relu(x)


class Flatten:
    kind = "flatten"
    params = ()

    def __call__(self, x):
        return T.reshape(x, (x.shape[0], -1))


class MaxPool2x2:
    kind = "maxpool2x2"
    params = ()

    def __call__(self, x):
        return T.maxpool2x2(x)


def _flat(shape):
    return int(np.prod(shape))


def _mlp_small(in_shape, num_classes, rng):
    return [Flatten(), Dense(_flat(in_shape), 128, rng), ReLU(), Dense(128, num_classes, rng)]


def _mlp_deep(in_shape, num_classes, rng):
    return [
        Flatten(),
        Dense(_flat(in_shape), 64, rng),
        ReLU(),
        Dense(64, 64, rng),
        ReLU(),
        Dense(64, num_classes, rng),
    ]


def _cnn_small(in_shape, num_classes, rng):
    if len(in_shape) != 3 or in_shape[1] % 4 or in_shape[2] % 4:
        raise DimensionError(f"cnn-small needs CxHxW input with H, W divisible by 4; got {in_shape}")
    c, h, w = in_shape
    return [
        Conv2d(c, 16, 3, rng),
        ReLU(),
        MaxPool2x2(),
        Conv2d(16, 32, 3, rng),
        ReLU(),
        MaxPool2x2(),
        Flatten(),
        Dense(32 * (h // 4) * (w // 4), num_classes, rng),
    ]


PRESETS = {"mlp-small": _mlp_small, "mlp-deep": _mlp_deep, "cnn-small": _cnn_small}


class Model:
    """An ordered layer stack whose final output is the logit vector ``z``."""

    def __init__(self, layers, num_classes, in_shape, preset=None):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.in_shape = tuple(int(s) for s in in_shape)
        self.preset = preset

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def forward_logits(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.in_shape:
            raise DimensionError(f"model expects inputs of shape {self.in_shape}, got {x.shape[1:]}")
        COUNTERS.forward_passes += 1
        for layer in self.layers:
            x = layer(x)
        if x.shape[-1] != self.num_classes:
            raise DimensionError(f"final layer yields {x.shape[-1]} outputs, not {self.num_classes}")
        return x

    __call__ = forward_logits

    def logits(self, inputs, batch_size=512):
        """Untaped logits for a whole array, evaluated in chunks."""
        inputs = np.asarray(inputs, dtype=np.float64)
        out = [self.forward_logits(inputs[i : i + batch_size]).data for i in range(0, len(inputs), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, inputs, batch_size=512):
        return self.logits(inputs, batch_size).argmax(axis=1)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def get_flat_params(self):
        return [p.data.copy() for p in self.parameters()]

    def set_flat_params(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ContractError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise DimensionError(f"parameter shape {a.shape} != {p.shape}")
            p.data = a.copy()
            p.grad = None

    def clone(self):
        twin = build_model(self.preset, self.in_shape, self.num_classes, seed=0)
        twin.set_flat_params(self.get_flat_params())
        return twin


def build_model(preset, in_shape, num_classes, seed=0):
    """Instantiate a named preset with He-uniform weights drawn from ``seed``."""
    try:
        factory = PRESETS[preset]
    except KeyError:
        raise ContractError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}") from None
    rng = np.random.default_rng(seed)
    return Model(factory(tuple(in_shape), num_classes, rng), num_classes, in_shape, preset=preset)


# ---------------------------------------------------------------------------
# losses


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(z):
    """Row-wise softmax with max subtraction."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    p = _softmax_rows(z.data)

    def bw(g, needs):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return T._record("softmax", p, (z,), bw)


def cross_entropy(z, labels):
    """Mean over rows of ``-log softmax(z)[label]``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} do not match {labels.shape[0]} labels")
    c = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    m = z.shape[0]
    rows = np.arange(m)
    top = z.data.argmax(axis=1)
    shifted = z.data - z.data[rows, top][:, None]
    rest = np.exp(shifted)
    rest[rows, top] = 0.0
    # log(1 + sum of the non-max terms) keeps tiny losses accurate
    lse = np.log1p(rest.sum(axis=1))
    loss = float(np.mean(lse - shifted[rows, labels]))

    def bw(g, needs):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / m),)

    return T._record("cross_entropy", np.asarray(loss), (z,), bw)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(model, lr):
    """``p <- p - lr * grad(p)`` for every parameter, then zero the grads."""
    params = model.parameters()
    if any(p.grad is None for p in params):
        raise ContractError("sgd_step called before backward populated every gradient")
    for p in params:
        p.data = p.data - lr * p.grad
        p.grad = None


@dataclass(frozen=True)
class CyclicLrSchedule:
    """Triangular schedule rising from ``clr_min`` to ``clr_max`` at mid-run and back.

    Steps past ``total_steps`` are clamped to ``clr_min``.
    """

    clr_min: float
    clr_max: float
    total_steps: int

    def __post_init__(self):
        if self.clr_min < 0 or self.clr_max <= self.clr_min:
            raise ContractError("need 0 <= clr_min < clr_max")
        if self.total_steps < 1:
            raise ContractError("total_steps must be positive")

    def lr_at(self, step):
        return lr_at(self, step)


def lr_at(schedule, step):
    if step < 0:
        raise ContractError("step must be non-negative")
    if step > schedule.total_steps:
        return schedule.clr_min
    frac = 1.0 - abs(2.0 * step / schedule.total_steps - 1.0)
    return schedule.clr_min + (schedule.clr_max - schedule.clr_min) * frac


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "preset": model.preset,
        "num_classes": model.num_classes,
        "in_shape": list(model.in_shape),
        "params": [{"shape": list(p.shape), "data": p.data.reshape(-1).tolist()} for p in model.parameters()],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        try:
            doc = json.loads(fh.read().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unrecognised checkpoint format")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    model = build_model(doc["preset"], doc["in_shape"], doc["num_classes"], seed=0)
    model.set_flat_params([np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]])
    return model
