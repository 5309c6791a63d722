"""A small deterministic CNN core: layers, forward/backward, SGD, tensor I/O.

Activations are batched numpy arrays laid out (N, C, H, W).  Parameters are
:class:`Tensor` objects holding ``data`` and an accumulating ``grad``.
Everything runs in float32 unless a network is explicitly built in float64
(used by gradient checks).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "global_avg_pool", "linear")


class NonFiniteError(FloatingPointError):
    """A tensor, activation or loss contains NaN or Inf."""


class ShapeError(ValueError):
    pass


def check_finite(a, what="value"):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite {what}")
    return a


class Tensor:
    """Dense real array with an optional gradient buffer.

    ``frozen`` tensors still accumulate gradients but :func:`sgd_step`
    never changes them.
    """

    def __init__(self, data, frozen=False, dtype=np.float32):
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        check_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.frozen = frozen

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, frozen={self.frozen})"


@dataclass
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class NetworkSpec:
    """Ordered layers; layers before ``split_index`` form the feature extractor."""

    layers: list
    split_index: int
    input_shape: tuple

    def __post_init__(self):
        if not 0 < self.split_index < len(self.layers):
            raise ValueError("split_index must fall strictly inside the layer list")
        self.input_shape = tuple(self.input_shape)

    def parameters(self, start=0, stop=None):
        """(name, Tensor) pairs for layers in [start, stop)."""
        stop = len(self.layers) if stop is None else stop
        out = []
        for i in range(start, stop):
            for pname, t in self.layers[i].params.items():
                out.append((f"layer{i}.{pname}", t))
        return out

    def feature_parameters(self):
        return [t for _, t in self.parameters(0, self.split_index)]

    def classifier_parameters(self):
        return [t for _, t in self.parameters(self.split_index)]

    def freeze_features(self, frozen=True):
        for t in self.feature_parameters():
            t.frozen = frozen

    def shape_at(self, layer_index):
        """Per-example input shape expected by layer ``layer_index``."""
        shape = self.input_shape
        for layer in self.layers[:layer_index]:
            shape = _output_shape(layer, shape)
        return shape

    @property
    def feature_shape(self):
        return self.shape_at(self.split_index)

    @property
    def num_classes(self):
        return self.layers[-1].hyper["out_features"]

    @property
    def dtype(self):
        for _, t in self.parameters():
            return t.data.dtype
        return np.dtype(np.float32)

    def describe(self):
        return {
            "input_shape": list(self.input_shape),
            "split_index": self.split_index,
            "layers": [{"kind": l.kind, **l.hyper} for l in self.layers],
        }


def _output_shape(layer, shape):
    k = layer.kind
    if k == "relu":
        return shape
    if k == "conv2d":
        c, h, w = shape
        hp = layer.hyper
        if c != hp["in_channels"]:
            raise ShapeError(f"conv2d expects {hp['in_channels']} channels, got {c}")
        kk, s, p = hp["kernel"], hp["stride"], hp["pad"]
        return (hp["out_channels"], (h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1)
    if k == "maxpool2d":
        c, h, w = shape
        kk = layer.hyper["size"]
        return (c, h // kk, w // kk)
    if k == "global_avg_pool":
        return (shape[0],)
    if k == "linear":
        if int(np.prod(shape)) != layer.hyper["in_features"]:
            raise ShapeError(f"linear expects {layer.hyper['in_features']} inputs, got {shape}")
        return (layer.hyper["out_features"],)
    raise AssertionError(k)


# --- layer construction -------------------------------------------------------

def kaiming(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv2d(in_channels, out_channels, kernel, rng, stride=1, pad=0, dtype=np.float32):
    fan_in = in_channels * kernel * kernel
    return LayerSpec(
        "conv2d",
        dict(in_channels=in_channels, out_channels=out_channels, kernel=kernel, stride=stride, pad=pad),
        dict(
            weight=Tensor(kaiming(rng, (out_channels, in_channels, kernel, kernel), fan_in), dtype=dtype),
            bias=Tensor(np.zeros(out_channels), dtype=dtype),
        ),
    )


def linear(in_features, out_features, rng, dtype=np.float32):
    return LayerSpec(
        "linear",
        dict(in_features=in_features, out_features=out_features),
        dict(
            weight=Tensor(kaiming(rng, (out_features, in_features), in_features), dtype=dtype),
            bias=Tensor(np.zeros(out_features), dtype=dtype),
        ),
    )


def relu():
    return LayerSpec("relu")


def maxpool2d(size=2):
    return LayerSpec("maxpool2d", dict(size=size))


def global_avg_pool():
    return LayerSpec("global_avg_pool")


def build_network(num_classes, rng, image_side=56, in_channels=3, conv_channels=(8, 16, 16),
                  hidden=64, dtype=np.float32):
    """The default desk-scale CNN.

    conv3x3(pad 1)-relu-pool, conv3x3-relu-pool, conv3x3(pad 1)-relu form the
    feature extractor; linear-relu-linear the classifier.  A 56x56 input
    yields a (conv_channels[-1], 13, 13) feature map.
    """
    c1, c2, c3 = conv_channels
    layers = [
        conv2d(in_channels, c1, 3, rng, pad=1, dtype=dtype), relu(), maxpool2d(2),
        conv2d(c1, c2, 3, rng, pad=0, dtype=dtype), relu(), maxpool2d(2),
        conv2d(c2, c3, 3, rng, pad=1, dtype=dtype), relu(),
    ]
    split = len(layers)
    probe = NetworkSpec(layers + [relu()], split, (in_channels, image_side, image_side))
    feat = int(np.prod(probe.feature_shape))
    layers += [linear(feat, hidden, rng, dtype), relu(), linear(hidden, num_classes, rng, dtype)]
    return NetworkSpec(layers, split, (in_channels, image_side, image_side))


def grow_classifier(net, num_classes, rng):
    """Widen the output layer to ``num_classes``; existing rows are kept."""
    layer = net.layers[-1]
    old = layer.hyper["out_features"]
    if num_classes < old:
        raise ValueError("classifier cannot shrink")
    if num_classes == old:
        return
    w, b = layer.params["weight"], layer.params["bias"]
    fan_in = layer.hyper["in_features"]
    extra = kaiming(rng, (num_classes - old, fan_in), fan_in, w.data.dtype)
    w.data = np.concatenate([w.data, extra])
    b.data = np.concatenate([b.data, np.zeros(num_classes - old, b.data.dtype)])
    w.grad = b.grad = None
    layer.hyper["out_features"] = num_classes


# --- forward / backward --------------------------------------------------------

class Activations(list):
    """Per-layer outputs of one forward pass, plus what backward needs."""

    def __init__(self, x, from_layer):
        super().__init__()
        self.input = x
        self.from_layer = from_layer
        self.caches = []

    def input_of(self, i):
        """Input to the i-th executed layer."""
        return self.input if i == 0 else self[i - 1]


def forward(net, x, from_layer=0, to_layer=None):
    """Run layers [from_layer, to_layer) on the batch ``x``.

    Returns an :class:`Activations` list with one entry per executed layer;
    run to the end, the last entry is the (N, classes) logits.
    """
    to_layer = len(net.layers) if to_layer is None else to_layer
    if not 0 <= from_layer < len(net.layers) or not from_layer < to_layer <= len(net.layers):
        raise ValueError(f"bad layer range [{from_layer}, {to_layer})")
    expected = net.shape_at(from_layer)
    if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"layer {from_layer} expects (N, {expected}), got {x.shape}")
    acts = Activations(x, from_layer)
    h = x
    for i in range(from_layer, to_layer):
        h, cache = _FORWARD[net.layers[i].kind](net.layers[i], h)
        check_finite(h, f"activation at layer {i}")
        acts.append(h)
        acts.caches.append(cache)
    return acts


def backward(net, acts, grad_output, to_layer=None):
    """Backpropagate ``grad_output`` through the layers recorded in ``acts``.

    Parameter gradients are accumulated.  Returns the gradient with respect
    to the input of layer ``to_layer`` (default: the first executed layer).
    """
    if acts is None or len(acts) == 0:
        raise ValueError("backward needs the activations of a forward pass")
    to_layer = acts.from_layer if to_layer is None else to_layer
    last = acts.from_layer + len(acts) - 1
    if not acts.from_layer <= to_layer <= last:
        raise ValueError(f"to_layer {to_layer} outside executed range")
    g = grad_output
    if g.shape != acts[-1].shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {acts[-1].shape}")
    for i in range(last, to_layer - 1, -1):
        k = i - acts.from_layer
        layer = net.layers[i]
        g = _BACKWARD[layer.kind](layer, acts.input_of(k), acts[k], acts.caches[k], g)
    return g


def _conv_fwd(layer, x):
    hp = layer.hyper
    kk, s, p = hp["kernel"], hp["stride"], hp["pad"]
    n, _, h, w = x.shape
    oh = (h + 2 * p - kk) // s + 1
    ow = (w + 2 * p - kk) // s + 1
    cols = kernels.im2col(x, kk, kk, s, p)
    wmat = layer.params["weight"].data.reshape(hp["out_channels"], -1)
    out = cols @ wmat.T + layer.params["bias"].data
    out = out.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_bwd(layer, x, y, cols, g):
    hp = layer.hyper
    kk, s, p = hp["kernel"], hp["stride"], hp["pad"]
    w = layer.params["weight"]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, hp["out_channels"])
    w.accumulate((gm.T @ cols).reshape(w.shape))
    layer.params["bias"].accumulate(gm.sum(axis=0))
    dcols = gm @ w.data.reshape(hp["out_channels"], -1)
    return kernels.col2im(dcols, x.shape, kk, kk, s, p)


def _relu_fwd(layer, x):
    return np.maximum(x, 0), None


def _relu_bwd(layer, x, y, cache, g):
    return g * (x > 0)


def _pool_fwd(layer, x):
    k = layer.hyper["size"]
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    win = x[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_bwd(layer, x, y, arg, g):
    k = layer.hyper["size"]
    n, c, h, w = x.shape
    oh, ow = g.shape[2], g.shape[3]
    win = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    dx = np.zeros_like(x)
    dx[:, :, :oh * k, :ow * k] = win
    return dx


def _gap_fwd(layer, x):
    return x.mean(axis=(2, 3)), None


def _gap_bwd(layer, x, y, cache, g):
    n, c, h, w = x.shape
    return np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(g.dtype)


def _linear_fwd(layer, x):
    flat = x.reshape(x.shape[0], -1)
    return flat @ layer.params["weight"].data.T + layer.params["bias"].data, None


def _linear_bwd(layer, x, y, cache, g):
    flat = x.reshape(x.shape[0], -1)
    layer.params["weight"].accumulate(g.T @ flat)
    layer.params["bias"].accumulate(g.sum(axis=0))
    return (g @ layer.params["weight"].data).reshape(x.shape)


_FORWARD = {"conv2d": _conv_fwd, "relu": _relu_fwd, "maxpool2d": _pool_fwd,
            "global_avg_pool": _gap_fwd, "linear": _linear_fwd}
_BACKWARD = {"conv2d": _conv_bwd, "relu": _relu_bwd, "maxpool2d": _pool_bwd,
             "global_avg_pool": _gap_bwd, "linear": _linear_bwd}


# --- losses and optimization ---------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_class):
    """Cross-entropy of one logits vector; returns (loss, d loss / d logits)."""
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError("logits must be a vector of length >= 2")
    if not 0 <= target_class < logits.shape[0]:
        raise IndexError(f"target class {target_class} out of range")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    loss = float(lse - logits[target_class])
    grad = softmax(logits)
    grad[target_class] -= 1
    return loss, grad


def cross_entropy_batch(logits, targets):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError("target class out of range")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    losses = lse - logits[np.arange(n), targets]
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1
    return float(losses.mean()), grad / n


def sgd_step(params, learning_rate):
    """Plain SGD on trainable tensors, then clear every gradient.

    ``params`` is a network or an iterable of tensors.
    """
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    if isinstance(params, NetworkSpec):
        params = [t for _, t in params.parameters()]
    for t in params:
        if t.grad is not None and not t.frozen:
            check_finite(t.grad, "gradient")
            t.data -= np.asarray(learning_rate, t.data.dtype) * t.grad
        t.grad = None


def zero_grads(params):
    for t in params:
        t.grad = None


def finite_diff_grad(loss_fn, coordinates, eps=1e-3):
    """Central-difference gradient estimate at each (tensor, index) coordinate.

    ``loss_fn`` takes no arguments and reads the tensors' current data.
    """
    out = np.empty(len(coordinates), dtype=np.float64)
    for i, (t, idx) in enumerate(coordinates):
        orig = t.data[idx].copy()
        t.data[idx] = orig + eps
        hi = float(loss_fn())
        t.data[idx] = orig - eps
        lo = float(loss_fn())
        t.data[idx] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out


def snapshot_parameters(net):
    """Copies of every parameter array, keyed by name."""
    return {name: t.data.copy() for name, t in net.parameters()}


# --- tensor container ------------------------------------------------------------

TENSOR_MAGIC = b"CRTN"


def encode_tensor(array):
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim == 0 or a.ndim > 255 or 0 in a.shape:
        raise ShapeError("tensor container needs rank 1..255 with positive extents")
    head = TENSOR_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf, offset=0):
    """Parse one container at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise ValueError("not a CRTN tensor")
    rank = buf[offset + 4]
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 5)
    start = offset + 5 + 4 * rank
    count = int(np.prod(shape))
    end = start + 4 * count
    if end > len(buf):
        raise ValueError("truncated CRTN tensor")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape)
    return arr.astype(np.float32), end


def save_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path):
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_checkpoint(directory, tensors):
    """Write ``{name: array}`` as one container file each plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        fname = name.replace("/", "_") + ".crtn"
        save_tensor(directory / fname, tensors[name])
        lines.append(f"{name}\t{fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    directory = Path(directory)
    out = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, fname = line.split("\t")
        out[name] = load_tensor(directory / fname)
    return out


def network_state(net):
    return {name: t.data for name, t in net.parameters()}


def load_network_state(net, state):
    """Copy checkpoint arrays into ``net``; the output layer may be wider."""
    head = net.layers[-1]
    width = state.get(f"layer{len(net.layers) - 1}.bias")
    if width is not None and width.shape[0] != head.hyper["out_features"]:
        head.hyper["out_features"] = width.shape[0]
        for t in head.params.values():
            t.data = np.zeros((width.shape[0],) + t.shape[1:], t.data.dtype)
    for name, t in net.parameters():
        if name not in state:
            raise KeyError(f"checkpoint lacks {name}")
        if state[name].shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != network shape {t.shape}")
        t.data = state[name].astype(t.data.dtype)
        t.grad = None


def network_from_description(desc, dtype=np.float32):
    """Rebuild a network skeleton (zero parameters) from :meth:`NetworkSpec.describe`."""
    layers = []
    for spec in desc["layers"]:
        hyper = {k: v for k, v in spec.items() if k != "kind"}
        kind = spec["kind"]
        params = {}
        if kind == "conv2d":
            k = hyper["kernel"]
            params = dict(weight=np.zeros((hyper["out_channels"], hyper["in_channels"], k, k)),
                          bias=np.zeros(hyper["out_channels"]))
        elif kind == "linear":
            params = dict(weight=np.zeros((hyper["out_features"], hyper["in_features"])),
                          bias=np.zeros(hyper["out_features"]))
        layers.append(LayerSpec(kind, hyper, {n: Tensor(a, dtype=dtype) for n, a in params.items()}))
    return NetworkSpec(layers, desc["split_index"], tuple(desc["input_shape"]))
