"""A small convolutional network engine with exact forward and backward passes.

Tensors are laid out channels-last, ``(batch, height, width, channel)``, so
that the 3x3 patch matrix of a convolution feeds straight into one GEMM.
Every forward pass can return an :class:`ActivationRecord`; the saliency
rules in :mod:`lesionbench.saliency` walk that record backwards.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as _rng
from .tensorio import read_tensor_typed, write_tensor

CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """A layer produced NaN or Inf."""


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 patches of ``x`` (N, H, W, C) as a (N*H*W, 9*C) matrix.

    Columns are ordered (kernel row, kernel col, channel).
    """
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def col2im3x3(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`: scatter-add patch gradients back."""
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, 3, 3, c)
    out = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            out[:, i:i + h, j:j + w, :] += cols[:, :, :, i, j, :]
    return out[:, 1:-1, 1:-1, :]


def conv3x3_forward(x, weights, bias):
    """Same-padded, stride-1 cross-correlation.

    ``weights`` has shape (3, 3, C_in, C_out), ``bias`` (C_out,).
    """
    n, h, w, c = x.shape
    if weights.shape[:3] != (3, 3, c):
        raise ShapeError(f"kernel {weights.shape} does not match input channels {c}")
    cols = im2col3x3(x)
    y = cols @ weights.reshape(9 * c, -1)
    if bias is not None:
        y += bias
    return y.reshape(n, h, w, -1)


def conv3x3_backward(x, weights, g, need_input_grad=True, cols=None):
    """Gradients of a 3x3 convolution w.r.t. input, weights and bias.

    ``cols`` may carry the patch matrix already built by the forward pass.
    """
    n, h, w, c = x.shape
    f = weights.shape[-1]
    if cols is None:
        cols = im2col3x3(x)
    g2 = g.reshape(n * h * w, f)
    dw = (cols.T @ g2).reshape(weights.shape)
    db = g2.sum(axis=0)
    dx = conv3x3_input_grad(x.shape, weights, g) if need_input_grad else None
    return dx, dw, db


def conv3x3_input_grad(x_shape, weights, g):
    """Transpose of the convolution: correlate ``g`` with the flipped,
    channel-swapped kernel."""
    flipped = np.ascontiguousarray(weights[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv3x3_forward(g, flipped, None)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, g):
    return g * (x > 0)


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling with floor semantics.

    Returns the pooled tensor and the flat window index (0..3, row-major) of
    each maximum; ties resolve to the first index.
    """
    h, w = x.shape[1:3]
    ho, wo = h // 2, w // 2
    quad = [x[:, i:2 * ho:2, j:2 * wo:2, :] for i, j in _WINDOW]
    y = np.maximum(np.maximum(quad[0], quad[1]), np.maximum(quad[2], quad[3]))
    idx = np.full(y.shape, 3, dtype=np.uint8)
    for k in (2, 1, 0):
        idx[quad[k] == y] = k
    return y, idx


_WINDOW = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2x2_backward(x_shape, argmax, g):
    ho, wo = argmax.shape[1:3]
    out = np.zeros(x_shape, dtype=g.dtype)
    for k, (i, j) in enumerate(_WINDOW):
        out[:, i:2 * ho:2, j:2 * wo:2, :] = np.where(argmax == k, g, 0)
    return out


def dense_forward(x, weights, bias):
    """``y = x W + b`` with ``weights`` shaped (in, out)."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense expects {weights.shape[0]} inputs, got {x.shape[-1]}")
    y = x @ weights
    if bias is not None:
        y += bias
    return y


def dense_backward(x, weights, g):
    return g @ weights.T, x.T @ g, g.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, one_hot):
    """Per-sample cross-entropy of softmax(logits) and its logit gradient."""
    logits = np.atleast_2d(logits)
    one_hot = np.atleast_2d(one_hot)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - log_norm
    loss = -(one_hot * logp).sum(axis=-1)
    return loss, np.exp(logp) - one_hot


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def is_linear(self) -> bool:
        return self.kind in ("conv3x3", "dense")

    def forward(self, x):
        if self.kind == "conv3x3":
            return conv3x3_forward(x, self.weights, self.bias), None
        if self.kind == "dense":
            return dense_forward(x, self.weights, self.bias), None
        if self.kind == "relu":
            return relu_forward(x), None
        if self.kind == "maxpool2x2":
            return maxpool2x2_forward(x)
        if self.kind == "flatten":
            return x.reshape(x.shape[0], -1), None
        raise ShapeError(f"unknown layer kind {self.kind!r}")

    def linear_forward(self, x, weights, bias=None):
        """Forward with substituted parameters (used by relevance rules)."""
        if self.kind == "conv3x3":
            return conv3x3_forward(x, weights, bias)
        return dense_forward(x, weights, bias)

    def linear_transpose(self, x_shape, weights, g):
        """Apply the transpose of the linear map with ``weights`` to ``g``."""
        if self.kind == "conv3x3":
            return conv3x3_input_grad(x_shape, weights, g)
        return g @ weights.T


@dataclass
class LayerRecord:
    kind: str
    input: np.ndarray
    output: np.ndarray
    argmax: np.ndarray | None = None
    cols: np.ndarray | None = None


@dataclass
class ActivationRecord:
    """Inputs and outputs of every layer for one forward pass.

    For linear layers the stored output is the pre-activation (the ReLU is a
    separate layer).
    """
    entries: list[LayerRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def logits(self):
        return self.entries[-1].output

    def select(self, index):
        """Record restricted to a subset of the batch."""
        pick = lambda a: None if a is None else a[index]
        return ActivationRecord([LayerRecord(e.kind, pick(e.input), pick(e.output), pick(e.argmax))
                                 for e in self.entries])


def layer_shapes(input_shape, kinds_and_units):
    """Propagate (H, W, C) through a layer list, returning per-layer output shapes."""
    shape = tuple(input_shape)
    out = []
    for kind, units in kinds_and_units:
        if kind == "conv3x3":
            shape = (shape[0], shape[1], units)
        elif kind == "maxpool2x2":
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            shape = (units,)
        out.append(shape)
    return out


def architecture(blocks=(32, 64, 128, 256), dense_units=128, n_classes=2):
    """Layer plan of the VGG-style classifier: per block two conv+ReLU pairs
    and a max-pool, then flatten, dense+ReLU and the class logits."""
    plan = []
    for filters in blocks:
        plan += [("conv3x3", filters), ("relu", None), ("conv3x3", filters), ("relu", None),
                 ("maxpool2x2", None)]
    plan += [("flatten", None), ("dense", dense_units), ("relu", None), ("dense", n_classes)]
    return plan


def he_init(shape, seed, fan_in=None, dtype=np.float32):
    """Zero-mean normal weights with std sqrt(2 / fan_in).

    ``fan_in`` defaults to the product of all but the last axis, which is
    right for both (3, 3, C_in, C_out) kernels and (in, out) matrices.
    """
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1]))
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    g = _rng.generator(seed)
    return (g.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class NetworkModel:
    """Ordered list of layers plus the metadata needed to rebuild it.

    The final layer produces logits; softmax is applied only by the loss and
    by :meth:`probabilities`.
    """

    def __init__(self, layers, input_shape, metadata=None, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.metadata = dict(metadata or {})
        self.dtype = np.dtype(dtype)

    @classmethod
    def build(cls, input_shape, blocks=(32, 64, 128, 256), dense_units=128, n_classes=2,
              seed=0, dtype=np.float32, bias=True):
        plan = architecture(blocks, dense_units, n_classes)
        if len(input_shape) == 2:
            input_shape = (*input_shape, 1)
        layers = []
        channels = input_shape[-1]
        shapes = layer_shapes(input_shape, plan)
        prev = tuple(input_shape)
        for i, ((kind, units), shape) in enumerate(zip(plan, shapes)):
            lseed = _rng.derive_seed(seed, "layer", i)
            if kind == "conv3x3":
                w = he_init((3, 3, prev[-1], units), lseed, dtype=dtype)
                layers.append(Layer(kind, w, np.zeros(units, dtype) if bias else None))
            elif kind == "dense":
                w = he_init((prev[0], units), lseed, dtype=dtype)
                layers.append(Layer(kind, w, np.zeros(units, dtype) if bias else None))
            else:
                layers.append(Layer(kind))
            prev = shape
        meta = {"seed": int(seed), "init": "he_normal", "blocks": list(blocks),
                "dense_units": dense_units, "n_classes": n_classes, "trained_epochs": 0}
        return cls(layers, input_shape, meta, dtype)

    # -- parameters ---------------------------------------------------------

    def params(self):
        """Flat list of parameter arrays, in layer order (weights then bias)."""
        out = []
        for layer in self.layers:
            if layer.is_linear:
                out.append(layer.weights)
                if layer.bias is not None:
                    out.append(layer.bias)
        return out

    def set_params(self, arrays):
        it = iter(arrays)
        for layer in self.layers:
            if layer.is_linear:
                layer.weights = next(it)
                if layer.bias is not None:
                    layer.bias = next(it)

    def copy(self):
        layers = [Layer(l.kind, None if l.weights is None else l.weights.copy(),
                        None if l.bias is None else l.bias.copy()) for l in self.layers]
        return NetworkModel(layers, self.input_shape, dict(self.metadata), self.dtype)

    def astype(self, dtype):
        m = self.copy()
        m.dtype = np.dtype(dtype)
        m.set_params([p.astype(dtype) for p in m.params()])
        return m

    # -- passes -------------------------------------------------------------

    def _prepare(self, batch):
        x = np.asarray(batch, dtype=self.dtype)
        spatial = self.input_shape[:-1] if len(self.input_shape) == 3 else None
        if x.shape == self.input_shape or (spatial and x.shape == spatial):
            x = x[None]
        if spatial and x.shape[1:] == spatial:
            x = x[..., None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x

    def forward(self, batch, record=True, keep_cols=False):
        """Logits for a batch of (H, W) or (H, W, C) images, plus the record.

        ``keep_cols`` stores convolution patch matrices in the record so the
        training backward pass can reuse them.
        """
        x = self._prepare(batch)
        rec = ActivationRecord() if record else None
        for i, layer in enumerate(self.layers):
            cols = None
            if keep_cols and layer.kind == "conv3x3":
                cols = im2col3x3(x)
                y = (cols @ layer.weights.reshape(cols.shape[1], -1)).reshape(*x.shape[:3], -1)
                if layer.bias is not None:
                    y += layer.bias
                aux = None
            else:
                y, aux = layer.forward(x)
            if not np.isfinite(y).all():
                raise NumericError(f"non-finite output in layer {i} ({layer.kind})")
            if record:
                rec.entries.append(LayerRecord(layer.kind, x, y, aux, cols))
            x = y
        return x, rec

    def logits(self, batch, chunk=64):
        x = self._prepare(batch)
        return np.concatenate([self.forward(x[i:i + chunk], record=False)[0]
                               for i in range(0, len(x), chunk)]) if len(x) else np.zeros((0, 2))

    def probabilities(self, batch, chunk=64):
        return softmax(self.logits(batch, chunk))

    def predict(self, batch, chunk=64):
        """Predicted class index; ties go to the lower index."""
        return self.logits(batch, chunk).argmax(axis=-1)

    def backward(self, record, g_logits):
        """Parameter gradients (aligned with :meth:`params`) and input gradient."""
        grads = []
        g = g_logits
        for layer, e in zip(reversed(self.layers), reversed(record.entries)):
            first = e is record.entries[0]
            if layer.kind == "conv3x3":
                g, dw, db = conv3x3_backward(e.input, layer.weights, g, need_input_grad=not first,
                                             cols=e.cols)
                grads.append((dw, db))
            elif layer.kind == "dense":
                g, dw, db = dense_backward(e.input, layer.weights, g)
                grads.append((dw, db))
            elif layer.kind == "relu":
                g = relu_backward(e.input, g)
            elif layer.kind == "maxpool2x2":
                g = maxpool2x2_backward(e.input.shape, e.argmax, g)
            elif layer.kind == "flatten":
                g = g.reshape(e.input.shape)
        flat = []
        for (dw, db), layer in zip(reversed(grads), [l for l in self.layers if l.is_linear]):
            flat.append(dw)
            if layer.bias is not None:
                flat.append(db)
        return flat, g

    def loss_and_grads(self, batch, labels, chunk=32):
        """Mean cross-entropy over the batch and its parameter gradients.

        The batch is processed in fixed chunks to bound memory; chunk sums are
        accumulated in order so results are deterministic.
        """
        x = self._prepare(batch)
        labels = np.asarray(labels)
        n = len(x)
        n_classes = self.layers[-1].weights.shape[-1]
        total = None
        loss_sum = 0.0
        for i in range(0, n, chunk):
            xb, yb = x[i:i + chunk], labels[i:i + chunk]
            logits, rec = self.forward(xb, keep_cols=True)
            onehot = np.eye(n_classes, dtype=self.dtype)[yb]
            loss, g = softmax_xent(logits, onehot)
            loss_sum += float(loss.sum(dtype=np.float64))
            grads, _ = self.backward(rec, (g / n).astype(self.dtype))
            total = grads if total is None else [a + b for a, b in zip(total, grads)]
        return loss_sum / n, total

    # -- persistence --------------------------------------------------------

    def header(self):
        return {
            "format_version": CHECKPOINT_VERSION,
            "input_shape": list(self.input_shape),
            "layers": [{"kind": l.kind, "bias": l.bias is not None} for l in self.layers],
            "metadata": self.metadata,
        }

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True).encode() + b"\n")
            for p in self.params():
                write_tensor(fh, p.astype(np.float32))

    @classmethod
    def load(cls, path, dtype=np.float32):
        with open(path, "rb") as fh:
            head = json.loads(fh.readline())
            if head.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {head.get('format_version')}")
            layers = []
            for spec in head["layers"]:
                if spec["kind"] in ("conv3x3", "dense"):
                    w = read_tensor_typed(fh).astype(dtype)
                    b = read_tensor_typed(fh).astype(dtype) if spec["bias"] else None
                    layers.append(Layer(spec["kind"], w, b))
                else:
                    layers.append(Layer(spec["kind"]))
        return cls(layers, tuple(head["input_shape"]), head["metadata"], dtype)

    def to_bytes(self):
        buf = io.BytesIO()
        for p in self.params():
            write_tensor(buf, p)
        return buf.getvalue()
