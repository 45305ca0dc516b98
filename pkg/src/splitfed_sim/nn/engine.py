"""Forward/backward passes over a layer segment and the cross-entropy loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .layers import ModelSpec, Segment, SpecError
from .weights import Gradients, Weights, build_manifest


class CacheMismatch(ValueError):
    """A backward pass was given a cache from a different forward."""


@dataclass(eq=False)
class ForwardCache:
    segment: Segment
    entries: list  # one per executed layer
    output: np.ndarray


def _as_segment(seg) -> Segment:
    return seg.full if isinstance(seg, ModelSpec) else seg


def _check_input(seg: Segment, x: np.ndarray):
    if x.ndim != len(seg.input_shape) + 1 or tuple(x.shape[1:]) != seg.input_shape:
        raise SpecError(f"input shape {x.shape[1:]} does not match segment input {seg.input_shape}")


def forward(seg, w: Weights, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    seg = _as_segment(seg)
    _check_input(seg, x)
    if w.manifest != build_manifest(seg):
        raise SpecError("weights layout does not match segment")
    entries = []
    for i, layer in enumerate(seg.layers):
        kind = layer.kind
        if kind == "Conv2d":
            wt, b = w.tensors(seg.start + i)
            n, _, h, wd = x.shape
            cols = kernels.im2col3x3(x)
            y = wt.reshape(wt.shape[0], -1) @ cols
            y += b[:, None]
            entries.append((x.shape, cols))
            x = np.ascontiguousarray(y.reshape(wt.shape[0], n, h, wd).transpose(1, 0, 2, 3))
        elif kind == "ReLU":
            mask = x > 0
            entries.append(mask)
            x = np.where(mask, x, np.zeros((), dtype=x.dtype))
        elif kind == "MaxPool2d":
            y, arg = kernels.maxpool2x2(x)
            entries.append((x.shape, arg))
            x = y
        elif kind == "Flatten":
            entries.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:
            wt, b = w.tensors(seg.start + i)
            entries.append(x)
            x = x @ wt.T
            x += b
    return x, ForwardCache(seg, entries, x)


def backward(seg, w: Weights, cache: ForwardCache, grad_out: np.ndarray,
             need_input_grad: bool = True) -> Gradients:
    seg = _as_segment(seg)
    if cache.segment != seg or len(cache.entries) != len(seg.layers):
        raise CacheMismatch("cache was produced by a different segment")
    if grad_out.shape != cache.output.shape:
        raise CacheMismatch(f"grad_out shape {grad_out.shape} != cached output {cache.output.shape}")
    manifest = w.manifest
    grads = np.zeros(w.values.size, dtype=w.values.dtype)
    g = grad_out.astype(w.values.dtype, copy=False)
    for i in range(len(seg.layers) - 1, -1, -1):
        layer = seg.layers[i]
        entry = cache.entries[i]
        idx = seg.start + i
        last = i == 0 and not need_input_grad
        if layer.kind == "Conv2d":
            wt, _ = w.tensors(idx)
            gw, gb = _param_views(grads, manifest, idx)
            x_shape, cols = entry
            cout = wt.shape[0]
            g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
            gw[...] = (g2 @ cols.T).reshape(gw.shape)
            gb[...] = g2.sum(axis=1)
            if not last:
                g = kernels.col2im3x3(wt.reshape(cout, -1).T @ g2, x_shape)
        elif layer.kind == "ReLU":
            g = np.where(entry, g, np.zeros((), dtype=g.dtype))
        elif layer.kind == "MaxPool2d":
            x_shape, arg = entry
            g = kernels.maxpool2x2_backward(g, arg, x_shape)
        elif layer.kind == "Flatten":
            g = g.reshape(entry)
        else:
            wt, _ = w.tensors(idx)
            gw, gb = _param_views(grads, manifest, idx)
            x = entry
            gw[...] = g.T @ x
            gb[...] = g.sum(axis=0)
            if not last:
                g = g @ wt
    return Gradients(grads, manifest, None if not need_input_grad else g)


def _param_views(flat, manifest, layer_index):
    return [
        flat[e.offset : e.offset + e.size].reshape(e.shape)
        for e in manifest
        if e.layer_index == layer_index
    ]


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_probs = shifted[rows, labels] - np.log(denom[:, 0])
    loss = float(-log_probs.mean(dtype=np.float64))
    grad = exp / denom
    grad[rows, labels] -= 1
    grad /= np.asarray(n, dtype=grad.dtype)
    return loss, grad


def predict(seg, w: Weights, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward in chunks without keeping caches."""
    outs = [forward(seg, w, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,) + _as_segment(seg).output_shape)
