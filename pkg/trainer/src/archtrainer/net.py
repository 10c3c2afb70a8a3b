"""Build a runnable torch network from an architecture JSON document.

The document format is the engine's export schema: nodes carry [h, w, c]
shapes, layers carry a kind, params, input node ids and an output node id.
Tensors stay NCHW end to end; dense-segment tensors keep 1x1 spatial.

Kind mapping:

    input          identity
    conv           Conv2d(kernel_size, stride 1, 'same' padding)
    dense          flatten -> Linear -> reshape to (N, units, 1, 1)
    relu           ReLU
    batchnorm      BatchNorm2d
    pool           AvgPool2d(window, stride)
    globalavgpool  adaptive average pool to 1x1
    dropout        Dropout(rate)
    softmax        softmax over channels
    add            elementwise sum
    concat         channel concatenation, inputs in listed order
"""

from __future__ import annotations

import torch
from torch import nn


class ArchError(ValueError):
    pass


def _topo_order(layers: list[dict]) -> list[dict]:
    produced = {layer["output"]: layer for layer in layers}
    pending = {layer["id"]: len(layer["inputs"]) for layer in layers}
    consumers: dict[int, list[dict]] = {}
    for layer in layers:
        for node in layer["inputs"]:
            consumers.setdefault(node, []).append(layer)
    ready = sorted(lid for lid, deg in pending.items() if deg == 0)
    by_id = {layer["id"]: layer for layer in layers}
    order = []
    while ready:
        lid = ready.pop(0)
        layer = by_id[lid]
        order.append(layer)
        for consumer in consumers.get(layer["output"], []):
            pending[consumer["id"]] -= 1
            if pending[consumer["id"]] == 0:
                ready.append(consumer["id"])
        ready.sort()
    if len(order) != len(layers):
        raise ArchError("architecture document is not a DAG")
    return order


def estimate_bytes(doc: dict, batch: int) -> int:
    """The engine's footprint formula: 4 * (params + batch * activations)."""
    shapes = {n["id"]: n["shape"] for n in doc["nodes"]}
    params = 0
    for layer in doc["layers"]:
        kind = layer["kind"]
        if kind == "conv":
            h, w, cin = shapes[layer["inputs"][0]]
            p = layer["params"]
            params += p["kernel_size"] ** 2 * cin * p["filters"] + p["filters"]
        elif kind == "dense":
            h, w, cin = shapes[layer["inputs"][0]]
            params += h * w * cin * layer["params"]["units"] + layer["params"]["units"]
        elif kind == "batchnorm":
            params += 4 * shapes[layer["inputs"][0]][2]
    activations = sum(h * w * c for h, w, c in shapes.values())
    return 4 * (params + batch * activations)


class GraphNet(nn.Module):
    """Executes the architecture DAG on NCHW batches."""

    def __init__(self, doc: dict):
        super().__init__()
        self.shapes = {n["id"]: tuple(n["shape"]) for n in doc["nodes"]}
        self.input_node = doc["input_node"]
        self.output_node = doc["output_node"]
        self.order = _topo_order(doc["layers"])
        self.modules_by_layer = nn.ModuleDict()
        for layer in self.order:
            kind = layer["kind"]
            key = str(layer["id"])
            params = layer["params"]
            if kind == "conv":
                _, _, cin = self.shapes[layer["inputs"][0]]
                k = params["kernel_size"]
                self.modules_by_layer[key] = nn.Conv2d(
                    cin, params["filters"], k, stride=params["stride"], padding=(k - 1) // 2
                )
            elif kind == "dense":
                h, w, cin = self.shapes[layer["inputs"][0]]
                self.modules_by_layer[key] = nn.Linear(h * w * cin, params["units"])
            elif kind == "batchnorm":
                _, _, c = self.shapes[layer["inputs"][0]]
                self.modules_by_layer[key] = nn.BatchNorm2d(c)
            elif kind == "pool":
                self.modules_by_layer[key] = nn.AvgPool2d(params["window"], params["stride"])
            elif kind == "dropout":
                self.modules_by_layer[key] = nn.Dropout(params["rate"])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        values = {self.input_node: x}
        out = x
        for layer in self.order:
            kind = layer["kind"]
            key = str(layer["id"])
            ins = [values[n] for n in layer["inputs"]]
            if kind == "input":
                out = x
            elif kind in ("conv", "batchnorm", "pool", "dropout"):
                out = self.modules_by_layer[key](ins[0])
            elif kind == "dense":
                n = ins[0].shape[0]
                # engine weights flatten HWC row-major; torch tensors are NCHW
                flat = ins[0].permute(0, 2, 3, 1).reshape(n, -1)
                out = self.modules_by_layer[key](flat).reshape(n, -1, 1, 1)
            elif kind == "relu":
                out = torch.relu(ins[0])
            elif kind == "globalavgpool":
                out = torch.nn.functional.adaptive_avg_pool2d(ins[0], 1)
            elif kind == "softmax":
                n = ins[0].shape[0]
                out = torch.softmax(ins[0].reshape(n, -1), dim=1).reshape(ins[0].shape)
            elif kind == "add":
                out = ins[0] + ins[1]
            elif kind == "concat":
                out = torch.cat(ins, dim=1)
            else:
                raise ArchError(f"unknown layer kind {kind!r}")
            values[layer["output"]] = out
        probs = values[self.output_node]
        return probs.reshape(probs.shape[0], -1)
