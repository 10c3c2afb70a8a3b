"""Minimal forward-only executor for architecture graphs.

All arithmetic is 64-bit; dropout runs with inference semantics (identity).
Pooling is average pooling, which keeps the skip-branch pool replication an
exactly linear operation.  The executor exists to check that weight morphing
preserves the network function and to drive desk-scale oracles; it is not a
training engine.
"""

from __future__ import annotations

import numpy as np

from morphnas.graph import ArchGraph

__all__ = ["WeightSet", "forward", "random_weights", "ExecError"]

WeightSet = dict[int, dict[str, np.ndarray]]

INIT_STD = 0.05


class ExecError(ValueError):
    """Shape or weight mismatch during a forward pass."""


def random_weights(g: ArchGraph, rng: np.random.Generator) -> WeightSet:
    """Gaussian(0, 0.05) weights, zero biases, batchnorm as identity."""
    weights: WeightSet = {}
    for lid in sorted(g.layers):
        layer = g.layers[lid]
        in_shape = g.nodes[layer.inputs[0]] if layer.inputs else None
        if layer.kind == "conv":
            p = layer.params
            weights[lid] = {
                "kernel": rng.normal(0.0, INIT_STD, (p.kernel_size, p.kernel_size, in_shape.channels, p.filters)),
                "bias": np.zeros(p.filters),
            }
        elif layer.kind == "dense":
            weights[lid] = {
                "matrix": rng.normal(0.0, INIT_STD, (in_shape.elements(), layer.params.units)),
                "bias": np.zeros(layer.params.units),
            }
        elif layer.kind == "batchnorm":
            c = in_shape.channels
            weights[lid] = {
                "scale": np.ones(c),
                "shift": np.zeros(c),
                "mean": np.zeros(c),
                "var": np.ones(c),
            }
    return weights


def _conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    kh, kw, cin, cout = kernel.shape
    h, w, _ = x.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    pb, pr = kh - 1 - pt, kw - 1 - pl
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    out = np.zeros((h, w, cout))
    flat = out.reshape(h * w, cout)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[di : di + h, dj : dj + w, :].reshape(h * w, cin)
            flat += patch @ kernel[di, dj]
    return out + bias


def _avg_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = x[i * stride : i * stride + window, j * stride : j * stride + window].mean(axis=(0, 1))
    return out


def forward(g: ArchGraph, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    """Run one example through the graph; returns the flattened output vector."""
    x = np.asarray(x, dtype=np.float64)
    in_shape = g.nodes[g.input_node]
    if x.shape != (in_shape.height, in_shape.width, in_shape.channels):
        raise ExecError(
            f"input shape {x.shape} does not match graph input {in_shape.as_list()}"
        )
    values: dict[int, np.ndarray] = {}
    for layer in g.topo_layers():
        try:
            ins = [values[n] for n in layer.inputs]
            if layer.kind == "input":
                out = x
            elif layer.kind == "conv":
                w = weights[layer.id]
                out = _conv2d_same(ins[0], w["kernel"], w["bias"])
            elif layer.kind == "dense":
                w = weights[layer.id]
                out = (ins[0].reshape(-1) @ w["matrix"] + w["bias"]).reshape(1, 1, -1)
            elif layer.kind == "relu":
                out = np.maximum(ins[0], 0.0)
            elif layer.kind == "batchnorm":
                w = weights[layer.id]
                out = w["scale"] * (ins[0] - w["mean"]) / np.sqrt(w["var"]) + w["shift"]
            elif layer.kind == "pool":
                out = _avg_pool(ins[0], layer.params.window, layer.params.stride)
            elif layer.kind == "globalavgpool":
                out = ins[0].mean(axis=(0, 1)).reshape(1, 1, -1)
            elif layer.kind == "dropout":
                out = ins[0]
            elif layer.kind == "softmax":
                z = ins[0].reshape(-1)
                z = z - z.max()
                e = np.exp(z)
                out = (e / e.sum()).reshape(ins[0].shape)
            elif layer.kind == "add":
                out = ins[0] + ins[1]
            elif layer.kind == "concat":
                out = np.concatenate(ins, axis=-1)
            else:
                raise ExecError(f"unknown kind {layer.kind!r}")
        except (KeyError, ValueError) as exc:
            raise ExecError(f"forward failed at layer {layer.id} ({layer.kind}): {exc}") from exc
        expected = g.nodes[layer.output]
        if out.shape != (expected.height, expected.width, expected.channels):
            raise ExecError(
                f"shape mismatch at layer {layer.id} ({layer.kind}): "
                f"got {out.shape}, declared {expected.as_list()}"
            )
        values[layer.output] = out
    return values[g.output_node].reshape(-1)
