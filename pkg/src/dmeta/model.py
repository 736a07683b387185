"""Four-block convolutional classifier and parameter-set algebra.

Each block is conv3x3 -> batchnorm -> [maxpool] -> relu; a fully connected
head maps the flattened features to ``num_logits`` outputs. Parameters live in
a :class:`ParameterSet` of plain numpy arrays so that meta-steps are simple
element-wise arithmetic.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

from dmeta.errors import InvalidArgumentError
from dmeta.tensor import ops
from dmeta.tensor.tape import Tape, Tensor

NUM_BLOCKS = 4
HEAD_NAMES = ("fc.weight", "fc.bias")
CHECKPOINT_MAGIC = b"DMETA1"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``input_shape`` is (height, width, channels). Omniglot uses stride-2
    convolutions without pooling; Mini-ImageNet uses stride 1 with a 2x2
    max-pool in each block.
    """

    input_shape: tuple = (28, 28, 1)
    channels: int = 64
    use_maxpool: bool = False
    num_logits: int = 5
    conv_stride: int = 2

    def __post_init__(self):
        if self.num_logits < 2:
            raise InvalidArgumentError(f"num_logits must be >= 2, got {self.num_logits}")
        if len(self.input_shape) != 3:
            raise InvalidArgumentError(f"input_shape must be (H, W, C), got {self.input_shape}")

    @classmethod
    def omniglot(cls, num_logits=5, channels=64):
        return cls((28, 28, 1), channels, False, num_logits, 2)

    @classmethod
    def mini_imagenet(cls, num_logits=5, channels=32):
        return cls((84, 84, 3), channels, True, num_logits, 1)

    def feature_hw(self):
        h, w = self.input_shape[:2]
        for _ in range(NUM_BLOCKS):
            h, w = -(-h // self.conv_stride), -(-w // self.conv_stride)
            if self.use_maxpool:
                h, w = -(-h // 2), -(-w // 2)
        return h, w

    def feature_dim(self):
        h, w = self.feature_hw()
        return h * w * self.channels

    def parameter_shapes(self):
        """Ordered mapping of parameter name to shape; this is also the checkpoint order."""
        shapes = OrderedDict()
        c_in = self.input_shape[2]
        for i in range(NUM_BLOCKS):
            shapes[f"conv{i}.weight"] = (self.channels, c_in, 3, 3)
            shapes[f"conv{i}.bias"] = (self.channels,)
            shapes[f"bn{i}.gamma"] = (self.channels,)
            shapes[f"bn{i}.beta"] = (self.channels,)
            shapes[f"bn{i}.running_mean"] = (self.channels,)
            shapes[f"bn{i}.running_var"] = (self.channels,)
            c_in = self.channels
        shapes["fc.weight"] = (self.feature_dim(), self.num_logits)
        shapes["fc.bias"] = (self.num_logits,)
        return shapes

    def to_items(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, ",".join(map(str, v)) if isinstance(v, tuple) else str(v)))
        return out

    @classmethod
    def from_items(cls, items):
        d = dict(items)
        try:
            return cls(
                input_shape=tuple(int(v) for v in d["input_shape"].split(",")),
                channels=int(d["channels"]),
                use_maxpool=d["use_maxpool"] == "True",
                num_logits=int(d["num_logits"]),
                conv_stride=int(d["conv_stride"]),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidArgumentError(f"bad network spec fields: {exc}") from exc


class ParameterSet:
    """Named weights split into a body (convs, batchnorm incl. running stats) and a head (fc).

    Arithmetic (``+``, ``-``, scalar ``*``) is element-wise over every entry,
    running statistics included.
    """

    def __init__(self, spec, arrays):
        self.spec = spec
        shapes = spec.parameter_shapes()
        if list(arrays) != list(shapes):
            raise InvalidArgumentError("parameter names do not match the network spec")
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise InvalidArgumentError(f"{name}: shape {arrays[name].shape} != {shape}")
        self.arrays = OrderedDict(arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        if value.shape != self.arrays[name].shape:
            raise InvalidArgumentError(f"{name}: shape {value.shape} != {self.arrays[name].shape}")
        self.arrays[name] = value

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def names(self):
        return list(self.arrays)

    @property
    def head_names(self):
        return list(HEAD_NAMES)

    @property
    def body_names(self):
        return [n for n in self.arrays if n not in HEAD_NAMES]

    @property
    def buffer_names(self):
        return [n for n in self.arrays if ".running_" in n]

    @property
    def trainable_names(self):
        return [n for n in self.arrays if ".running_" not in n]

    def copy(self):
        return ParameterSet(self.spec, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def _check_compatible(self, other):
        if not isinstance(other, ParameterSet) or self.spec != other.spec:
            raise InvalidArgumentError("parameter sets have different architectures")

    def __add__(self, other):
        self._check_compatible(other)
        return ParameterSet(self.spec, OrderedDict((k, v + other[k]) for k, v in self.items()))

    def __sub__(self, other):
        self._check_compatible(other)
        return ParameterSet(self.spec, OrderedDict((k, v - other[k]) for k, v in self.items()))

    def __mul__(self, factor):
        f = np.float32(factor)
        return ParameterSet(self.spec, OrderedDict((k, v * f) for k, v in self.items()))

    __rmul__ = __mul__

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def equals(self, other):
        """Bit-exact equality."""
        return self.spec == other.spec and all(np.array_equal(v, other[k]) for k, v in self.items())

    def zero_head(self):
        for n in HEAD_NAMES:
            self.arrays[n] = np.zeros_like(self.arrays[n])
        return self


def init_params(spec, rng):
    """Glorot-uniform conv kernels, unit batchnorm, zero biases and a zero head."""
    arrays = OrderedDict()
    for name, shape in spec.parameter_shapes().items():
        if name.startswith("conv") and name.endswith(".weight"):
            fan_in = shape[1] * 9
            fan_out = shape[0] * 9
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float32)
    return ParameterSet(spec, arrays)


def _leaf(params, leaves, name):
    if leaves is not None and name in leaves:
        return leaves[name]
    return Tensor(params[name])


def features(params, images, mode="eval", transductive=True, update_stats=False, leaves=None,
             bn_momentum=ops.BN_MOMENTUM, unbiased_stats=True):
    """Flattened output of the convolutional body, shape [batch, feature_dim].

    ``images`` is [batch, C, H, W]. ``leaves`` optionally maps parameter names
    to tape-watched tensors so gradients flow to them.
    """
    spec = params.spec
    images = np.asarray(images)
    H, W, C = spec.input_shape
    if images.ndim != 4 or images.shape[1:] != (C, H, W):
        raise InvalidArgumentError(f"images must have shape [batch, {C}, {H}, {W}], got {images.shape}")
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    use_batch = mode == "train" or transductive
    x = Tensor(np.ascontiguousarray(images.transpose(0, 2, 3, 1)), dtype=params["conv0.weight"].dtype)
    for i in range(NUM_BLOCKS):
        x = ops.conv2d(x, _leaf(params, leaves, f"conv{i}.weight"), _leaf(params, leaves, f"conv{i}.bias"),
                       stride=spec.conv_stride, layout="NHWC")
        x = ops.batchnorm(
            x,
            _leaf(params, leaves, f"bn{i}.gamma"),
            _leaf(params, leaves, f"bn{i}.beta"),
            params[f"bn{i}.running_mean"],
            params[f"bn{i}.running_var"],
            use_batch_stats=use_batch,
            update_stats=update_stats and mode == "train",
            momentum=bn_momentum,
            unbiased=unbiased_stats,
            layout="NHWC",
        )
        if spec.use_maxpool:
            x = ops.maxpool2x2(x, layout="NHWC")
        x = ops.relu(x)
    return ops.flatten(x)


def head(params, feats, head_dropout=None, rng=None, leaves=None):
    if head_dropout:
        feats = ops.dropout(feats, head_dropout, rng)
    return ops.fully_connected(feats, _leaf(params, leaves, "fc.weight"), _leaf(params, leaves, "fc.bias"))


def forward(params, images, mode="eval", head_dropout=None, rng=None, transductive=True,
            update_stats=False, leaves=None):
    """Logits [batch, num_logits].

    In ``train`` mode batchnorm uses batch statistics (and updates running
    buffers in place when ``update_stats``). In ``eval`` mode it uses batch
    statistics when ``transductive`` and the running buffers otherwise.
    ``head_dropout`` applies dropout to the inputs of the final layer only.
    """
    feats = features(params, images, mode, transductive, update_stats, leaves)
    return head(params, feats, head_dropout, rng, leaves)


def argmax_rows(logits):
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(logits), axis=1)


def predict(params, images, transductive=True, head_dropout=None, rng=None):
    return argmax_rows(forward(params, images, "eval", head_dropout, rng, transductive).data)


def with_batch_stats(params, images):
    """Copy of ``params`` whose running buffers hold this batch's exact statistics.

    Evaluating the copy with ``transductive=False`` reproduces the batch-stat
    forward while making every sample independent of the others.
    """
    frozen = params.copy()
    features(frozen, images, "train", update_stats=True, bn_momentum=0.0, unbiased_stats=False)
    return frozen


def value_and_grad(params, names, loss_fn):
    """Evaluate ``loss_fn(leaves)`` on a tape and return (loss, {name: grad}).

    ``leaves`` maps each of ``names`` to a watched tensor wrapping ``params[name]``.
    """
    leaves = {n: Tensor(params[n], requires_grad=True, name=n) for n in names}
    with Tape() as tape:
        tape.watch(*leaves.values())
        loss = loss_fn(leaves)
    tape.backward(loss)
    return float(loss.data), {n: t.grad for n, t in leaves.items()}


def weighted_mean(param_sets, weights):
    """Convex combination of parameter sets, accumulated in 64-bit."""
    if not param_sets:
        raise InvalidArgumentError("weighted_mean needs at least one parameter set")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(param_sets),):
        raise InvalidArgumentError("one weight per parameter set is required")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise InvalidArgumentError(f"weights must be non-negative and sum to 1, got sum {w.sum()}")
    first = param_sets[0]
    for ps in param_sets[1:]:
        first._check_compatible(ps)
    out = OrderedDict()
    for name, arr in first.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for wi, ps in zip(w, param_sets):
            if wi:
                acc += wi * ps[name]
        out[name] = acc.astype(arr.dtype)
    return ParameterSet(first.spec, out)


def interpolate(origin, target, step):
    """``origin + step * (target - origin)`` for ``step`` in [0, 1]."""
    if not 0.0 <= step <= 1.0:
        raise InvalidArgumentError(f"step must lie in [0, 1], got {step}")
    return weighted_mean([origin, target], [1.0 - step, step])


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params, path):
    """Write ``params`` in the DMETA1 format (see README for the layout)."""
    items = params.spec.to_items()
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<I", len(items))
    for key, value in items:
        text = f"{key}={value}".encode("utf-8")
        blob += struct.pack("<I", len(text)) + text
    for arr in params.arrays.values():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise InvalidArgumentError(f"{path}: not a DMETA1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        items = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            key, _, value = blob[pos : pos + n].decode("utf-8").partition("=")
            pos += n
            items.append((key, value))
    except (struct.error, UnicodeDecodeError) as exc:
        raise InvalidArgumentError(f"{path}: corrupt header") from exc
    spec = NetworkSpec.from_items(items)
    arrays = OrderedDict()
    for name, shape in spec.parameter_shapes().items():
        size = int(np.prod(shape))
        chunk = blob[pos : pos + 4 * size]
        if len(chunk) != 4 * size:
            raise InvalidArgumentError(f"{path}: truncated at {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
        pos += 4 * size
    if pos != len(blob):
        raise InvalidArgumentError(f"{path}: {len(blob) - pos} trailing bytes")
    return ParameterSet(spec, arrays)
