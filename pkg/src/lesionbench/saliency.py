"""Attribution heatmaps as backward passes with per-layer rules.

All eight methods share one engine: a signal is seeded at the pre-softmax
logit of the target output and walked back through the
:class:`~lesionbench.netcore.ActivationRecord`.  Methods differ only in what
they do at ReLU layers and at linear (conv/dense) layers:

================== ====================== =================================
method             ReLU layer             linear layer
================== ====================== =================================
gradient           forward mask           transpose of W
deconvnet          clip negative signal   transpose of W
guided_backprop    mask and clip          transpose of W
pattern_net        forward mask           transpose of pattern A
pattern_attribution forward mask          transpose of W * A
lrp_z              pass through           z-rule (epsilon-stabilized)
lrp_alpha_beta     pass through           alpha-beta rule
deep_taylor        pass through           z+ rule, z^B rule on first layer
================== ====================== =================================

Max-pooling always routes the signal to the stored window winner and
flatten layers only reshape.  Output indices (0/1) are used as targets.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netcore import (
    ActivationRecord,
    NetworkModel,
    im2col3x3,
    maxpool2x2_backward,
)
from .tensorio import load_tensor, read_tensor_typed, save_tensor, write_tensor

log = logging.getLogger(__name__)

METHODS = (
    "gradient",
    "lrp_z",
    "lrp_alpha_beta",
    "deep_taylor",
    "guided_backprop",
    "deconvnet",
    "pattern_net",
    "pattern_attribution",
)
# Methods whose backward signal starts at the logit value rather than 1.
CONSERVATIVE = ("lrp_z", "lrp_alpha_beta", "deep_taylor", "pattern_attribution")
PATTERN_METHODS = ("pattern_net", "pattern_attribution")


class UnsupportedArchitecture(ValueError):
    pass


class MissingPatterns(KeyError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    alpha: float = 2.0
    beta: float = 1.0
    epsilon: float = 1e-7
    bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown saliency method {self.kind!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kind == "lrp_alpha_beta" and not np.isclose(self.alpha - self.beta, 1.0):
            raise ValueError("alpha - beta must equal 1")


@dataclass
class Heatmap:
    relevance: np.ndarray
    method: str
    target: int
    sample_id: int | None = None

    @property
    def shape(self):
        return self.relevance.shape


@dataclass
class PatternSet:
    """Per linear layer (keyed by layer index) a pattern shaped like its weights."""
    patterns: dict
    stats: dict = field(default_factory=dict)

    def __getitem__(self, i):
        try:
            return self.patterns[i]
        except KeyError:
            raise MissingPatterns(f"no pattern for layer {i}") from None

    def save(self, path):
        head = {"layers": sorted(int(k) for k in self.patterns), "stats": self.stats}
        with open(path, "wb") as fh:
            fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
            for k in head["layers"]:
                write_tensor(fh, self.patterns[k].astype(np.float32))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            head = json.loads(fh.readline())
            pats = {k: read_tensor_typed(fh).astype(np.float64) for k in head["layers"]}
        return cls(pats, head.get("stats", {}))

    @classmethod
    def from_weights(cls, model: NetworkModel):
        """Patterns equal to the weights (turns pattern_net into gradient)."""
        return cls({i: l.weights.astype(np.float64) for i, l in enumerate(model.layers)
                    if l.is_linear})


def as_method(method) -> MethodSpec:
    return method if isinstance(method, MethodSpec) else MethodSpec(method)


# ---------------------------------------------------------------------------
# layer rules
# ---------------------------------------------------------------------------

def rule_gradient_relu(x, g):
    return g * (x > 0)


def rule_deconvnet(x, g):
    """ReLU rule ignoring the forward mask: ``max(0, g)``."""
    return np.maximum(g, 0)


def rule_guided_backprop(x, g):
    """``g * 1[x > 0] * 1[g > 0]``."""
    return g * ((x > 0) & (g > 0))


_RELU_RULES = {
    "gradient": rule_gradient_relu,
    "pattern_net": rule_gradient_relu,
    "pattern_attribution": rule_gradient_relu,
    "deconvnet": rule_deconvnet,
    "guided_backprop": rule_guided_backprop,
}


def _stabilize(z, eps):
    return z + eps * np.where(z >= 0, 1.0, -1.0).astype(z.dtype)


def rule_gradient(layer, x, g, weights=None):
    """Linear-layer chain rule, optionally with substituted weights."""
    w = layer.weights if weights is None else weights
    return layer.linear_transpose(x.shape, w.astype(g.dtype), g)


def rule_lrp_z(layer, x, r, epsilon=1e-7):
    """``R_j = sum_i x_j w_ij / (z_i + eps*sign(z_i)) * R_i``."""
    z = layer.linear_forward(x, layer.weights, layer.bias)
    s = r / _stabilize(z, epsilon)
    return x * layer.linear_transpose(x.shape, layer.weights, s)


def rule_lrp_alpha_beta(layer, x, r, alpha=2.0, beta=1.0, epsilon=1e-7):
    """Positive and negative contributions redistributed separately.

    Inputs may have either sign, so each part pairs positive inputs with
    same-signed weights; the bias joins the denominator matching its sign.
    A neuron whose contributions all share one sign passes its whole
    relevance through that side, which keeps the rule conservative.
    """
    w = layer.weights
    wp, wn = np.maximum(w, 0), np.minimum(w, 0)
    xp, xn = np.maximum(x, 0), np.minimum(x, 0)
    fwd, tr = layer.linear_forward, layer.linear_transpose
    bp = bn = None
    if layer.bias is not None:
        bp, bn = np.maximum(layer.bias, 0), np.minimum(layer.bias, 0)
    zp = fwd(xp, wp, bp) + fwd(xn, wn)
    zn = fwd(xp, wn, bn) + fwd(xn, wp)
    no_pos, no_neg = zp == 0, zn == 0
    a = np.where(no_pos, 0.0, np.where(no_neg, 1.0, alpha)).astype(r.dtype)
    b = np.where(no_neg, 0.0, np.where(no_pos, -1.0, beta)).astype(r.dtype)
    sp = a * r / (zp + epsilon)
    sn = b * r / (zn - epsilon)
    return (xp * tr(x.shape, wp, sp) + xn * tr(x.shape, wn, sp)
            - xp * tr(x.shape, wn, sn) - xn * tr(x.shape, wp, sn))


def rule_zb(layer, x, r, low, high, epsilon=1e-7):
    """Box-constrained deep Taylor rule for the pixel layer."""
    w = layer.weights
    wp, wn = np.maximum(w, 0), np.minimum(w, 0)
    lo = np.broadcast_to(np.asarray(low, dtype=x.dtype), x.shape)
    hi = np.broadcast_to(np.asarray(high, dtype=x.dtype), x.shape)
    fwd, tr = layer.linear_forward, layer.linear_transpose
    z = fwd(x, w) - fwd(lo, wp) - fwd(hi, wn)
    s = r / _stabilize(z, epsilon)
    return x * tr(x.shape, w, s) - lo * tr(x.shape, wp, s) - hi * tr(x.shape, wn, s)


def rule_deep_taylor(layer, x, r, first=False, bounds=(0.0, 1.0), epsilon=1e-7):
    if first:
        return rule_zb(layer, x, r, bounds[0], bounds[1], epsilon)
    return rule_lrp_alpha_beta(layer, x, r, alpha=1.0, beta=0.0, epsilon=epsilon)


def rule_pattern_net(layer, x, g, pattern):
    return rule_gradient(layer, x, g, weights=pattern)


def rule_pattern_attribution(layer, x, r, pattern):
    return rule_gradient(layer, x, r, weights=layer.weights * pattern)


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

def _linear_rule(method: MethodSpec, layer, index, x, signal, first, patterns):
    kind = method.kind
    if kind in ("gradient", "deconvnet", "guided_backprop"):
        return rule_gradient(layer, x, signal)
    if kind == "lrp_z":
        return rule_lrp_z(layer, x, signal, method.epsilon)
    if kind == "lrp_alpha_beta":
        return rule_lrp_alpha_beta(layer, x, signal, method.alpha, method.beta, method.epsilon)
    if kind == "deep_taylor":
        return rule_deep_taylor(layer, x, signal, first, method.bounds, method.epsilon)
    if patterns is None:
        raise MissingPatterns(f"{kind} needs a PatternSet")
    if kind == "pattern_net":
        return rule_pattern_net(layer, x, signal, patterns[index])
    return rule_pattern_attribution(layer, x, signal, patterns[index])


def backward_signal(model: NetworkModel, record: ActivationRecord, method, targets,
                    patterns: PatternSet | None = None):
    """Input-layer signal (N, H, W, C) for a batch record and per-sample targets."""
    method = as_method(method)
    logits = record.logits
    n, n_out = logits.shape
    targets = np.broadcast_to(np.asarray(targets, dtype=int), (n,))
    if np.any(targets < 0) or np.any(targets >= n_out):
        raise ValueError(f"target outside 0..{n_out - 1}")
    signal = np.zeros_like(logits)
    rows = np.arange(n)
    signal[rows, targets] = logits[rows, targets] if method.kind in CONSERVATIVE else 1
    first_linear = next(i for i, l in enumerate(model.layers) if l.is_linear)

    for index in range(len(model.layers) - 1, -1, -1):
        layer, entry = model.layers[index], record[index]
        x = entry.input
        if layer.kind == "flatten":
            signal = signal.reshape(x.shape)
        elif layer.kind == "maxpool2x2":
            signal = maxpool2x2_backward(x.shape, entry.argmax, signal)
        elif layer.kind == "relu":
            rule = _RELU_RULES.get(method.kind)
            if rule is not None:
                signal = rule(x, signal)
        elif layer.is_linear:
            signal = _linear_rule(method, layer, index, x, signal, index == first_linear, patterns)
        else:
            raise UnsupportedArchitecture(f"{method.kind} has no rule for layer {layer.kind!r}")
    return signal


def explain_batch(model: NetworkModel, images, method, targets, patterns=None, chunk=32):
    """Heatmaps (N, H, W) for a batch of images, summed over input channels."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), chunk):
        _, record = model.forward(images[i:i + chunk])
        t = np.broadcast_to(np.asarray(targets), (len(images),))[i:i + chunk]
        sig = backward_signal(model, record, method, t, patterns)
        out.append(sig.sum(axis=-1) if sig.ndim == 4 else sig)
    rel = np.concatenate(out)
    if not np.isfinite(rel).all():
        raise FloatingPointError("non-finite relevance")
    return rel


def explain(model: NetworkModel, record: ActivationRecord, method, target_class,
            patterns=None, sample_id=None) -> Heatmap:
    """Heatmap for a single-sample record."""
    method = as_method(method)
    sig = backward_signal(model, record, method, [target_class], patterns)
    rel = sig[0].sum(axis=-1) if sig.ndim == 4 else sig[0]
    return Heatmap(rel, method.kind, int(target_class), sample_id)


# ---------------------------------------------------------------------------
# pattern estimation
# ---------------------------------------------------------------------------

class _Moments:
    """Streaming sums for the positive-regime and linear pattern estimators."""

    def __init__(self, n_out, n_in):
        z = lambda *s: np.zeros(s)
        self.pos = [z(n_out), z(n_out, n_in), z(n_out), z(n_out, n_in)]
        self.all = [0.0, z(n_in), z(n_out), z(n_out, n_in)]

    def add(self, xs, ys):
        xs = xs.astype(np.float64)
        ys = ys.astype(np.float64)
        on = ys > 0
        yon = ys * on
        self.pos[0] += on.sum(axis=0)
        self.pos[1] += on.T.astype(np.float64) @ xs
        self.pos[2] += yon.sum(axis=0)
        self.pos[3] += yon.T @ xs
        self.all[0] += len(xs)
        self.all[1] += xs.sum(axis=0)
        self.all[2] += ys.sum(axis=0)
        self.all[3] += ys.T @ xs

    def covariance(self):
        n, sx, sy, sxy = self.pos
        safe = np.maximum(n, 1)[:, None]
        cov_pos = sxy / safe - (sx / safe) * (sy[:, None] / safe)
        na, sxa, sya, sxya = self.all
        cov_lin = sxya / na - np.outer(sya / na, sxa / na)
        return cov_pos, cov_lin, n


def _as_rows(layer, x, y):
    if layer.kind == "conv3x3":
        return im2col3x3(x), y.reshape(-1, y.shape[-1])
    return x, y


def estimate_patterns(model: NetworkModel, images, batch_size=32) -> PatternSet:
    """Two-component (positive-regime) signal patterns for every linear layer.

    For neuron weights ``w`` with inputs ``x`` and outputs ``y``:
    ``c = E+[x y] - E+[x] E+[y]`` over inputs with ``y > 0`` and
    ``a = c / (w . c)``.  Convolution neurons pool their statistics over all
    spatial positions.  Neurons that never fire use the all-sample covariance.
    """
    linear = [i for i, l in enumerate(model.layers) if l.is_linear]
    moments = {}
    for start in range(0, len(images), batch_size):
        _, record = model.forward(np.asarray(images[start:start + batch_size]))
        for i in linear:
            layer, e = model.layers[i], record[i]
            xs, ys = _as_rows(layer, e.input, e.output)
            if i not in moments:
                moments[i] = _Moments(ys.shape[1], xs.shape[1])
            moments[i].add(xs, ys)

    patterns, stats = {}, {"layers": {}}
    for i in linear:
        w = model.layers[i].weights
        wmat = w.reshape(-1, w.shape[-1]).T.astype(np.float64)  # (out, in)
        cov_pos, cov_lin, n_pos = moments[i].covariance()
        dead = n_pos == 0
        cov = np.where(dead[:, None], cov_lin, cov_pos)
        denom = (wmat * cov).sum(axis=1)
        degenerate = np.abs(denom) <= 1e-12 * np.maximum(
            np.linalg.norm(wmat, axis=1) * np.linalg.norm(cov, axis=1), 1e-300)
        if dead.any():
            warnings.warn(f"layer {i}: {int(dead.sum())} neurons never active; "
                          "using the linear estimator for them", RuntimeWarning, stacklevel=2)
        if degenerate.any():
            # no measurable signal covariance: fall back to the filter direction
            cov[degenerate] = wmat[degenerate]
            denom[degenerate] = (wmat[degenerate] ** 2).sum(axis=1)
        a = cov / denom[:, None]
        patterns[i] = a.T.reshape(w.shape)
        stats["layers"][str(i)] = {"inactive": int(dead.sum()), "degenerate": int(degenerate.sum()),
                                   "samples": int(moments[i].all[0])}
    return PatternSet(patterns, stats)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def save_heatmaps(directory, relevance, method, target, sample_ids):
    """``heatmaps.ten`` (N, H, W) plus a JSON sidecar naming method/target/samples."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "heatmaps.ten", np.asarray(relevance, dtype=np.float32))
    side = {"method": method, "target": int(target), "sample_ids": [int(s) for s in sample_ids]}
    (directory / "heatmaps.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_heatmaps(directory):
    directory = Path(directory)
    side = json.loads((directory / "heatmaps.json").read_text())
    rel = load_tensor(directory / "heatmaps.ten")
    return [Heatmap(r, side["method"], side["target"], sid)
            for r, sid in zip(rel, side["sample_ids"])]
