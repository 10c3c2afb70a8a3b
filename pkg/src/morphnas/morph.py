"""Network morphism: the four graph edits and the child sampler.

Each operation grows a graph while keeping it valid; existing node and layer
ids are never renumbered, so an op sequence planned against successive
intermediate graphs replays with :func:`apply_sequence`.  Weight
counterparts live in :func:`morph_weights`, which initializes new weights so
the morphed network computes the same function as the original (up to the
requested symmetry-breaking noise).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from morphnas.graph import (
    JOIN_KINDS,
    TRUNK_KINDS,
    ArchGraph,
    ConvParams,
    DenseParams,
    DropoutParams,
    Layer,
    PoolParams,
    TensorShape,
)

__all__ = [
    "Deep",
    "Wide",
    "AddSkip",
    "ConcatSkip",
    "MorphOp",
    "MorphError",
    "EffectiveArea",
    "effective_area",
    "deep",
    "wide",
    "add_skip",
    "concat_skip",
    "apply_sequence",
    "sample_children",
    "morph_weights",
    "op_to_json",
    "op_from_json",
    "DEEP_KINDS",
    "WIDE_CAP",
]

# Kinds the deepening op may insert; dense only where spatial extents are 1x1.
DEEP_KINDS = ("conv", "dense", "relu", "batchnorm", "dropout")
# The sampler doubles widths up to this cap.
WIDE_CAP = 512
INSERTED_DROPOUT_RATE = 0.25


class MorphError(ValueError):
    """Raised when a morph operation is illegal on the given graph."""


@dataclass(frozen=True)
class Deep:
    node: int
    kind: str


@dataclass(frozen=True)
class Wide:
    node: int
    new_width: int


@dataclass(frozen=True)
class AddSkip:
    start: int
    end: int


@dataclass(frozen=True)
class ConcatSkip:
    start: int
    end: int


MorphOp = Deep | Wide | AddSkip | ConcatSkip

_OP_NAMES = {Deep: "deep", Wide: "wide", AddSkip: "add", ConcatSkip: "concat"}


def op_to_json(op: MorphOp) -> dict:
    return {"op": _OP_NAMES[type(op)], "params": dict(op.__dict__)}


def op_from_json(doc: dict) -> MorphOp:
    by_name = {"deep": Deep, "wide": Wide, "add": AddSkip, "concat": ConcatSkip}
    try:
        cls = by_name[doc["op"]]
        return cls(**doc["params"])
    except (KeyError, TypeError) as exc:
        raise MorphError(f"bad morph op document: {doc!r}") from exc


@dataclass(frozen=True)
class EffectiveArea:
    """Nodes sharing one channel extent, with the trunk layers feeding them
    (prev_layers) and consuming them (next_layers)."""

    nodes: frozenset[int]
    prev_layers: frozenset[int]
    next_layers: frozenset[int]


def effective_area(g: ArchGraph, u0: int) -> EffectiveArea:
    """Closure of {u0} under non-conv/dense edges, in both directions."""
    if u0 not in g.nodes:
        raise MorphError(f"unknown node {u0}")
    area = {u0}
    frontier = [u0]
    # a join reached through one input pulls in its siblings transitively:
    # the join output enters via the forward rule, its inputs via the backward rule
    while frontier:
        n = frontier.pop()
        for layer in g.consumers_of(n):
            if layer.kind not in TRUNK_KINDS and layer.output not in area:
                area.add(layer.output)
                frontier.append(layer.output)
        prod = g.producer_of(n)
        if prod is not None and prod.kind not in TRUNK_KINDS:
            for m in prod.inputs:
                if m not in area:
                    area.add(m)
                    frontier.append(m)
    prev_layers = frozenset(
        lid for lid in g.layers if g.layers[lid].kind in TRUNK_KINDS and g.layers[lid].output in area
    )
    next_layers = frozenset(
        lid
        for lid in g.layers
        if g.layers[lid].kind in TRUNK_KINDS and any(n in area for n in g.layers[lid].inputs)
    )
    return EffectiveArea(frozenset(area), prev_layers, next_layers)


def _check_widenable(g: ArchGraph, area: EffectiveArea) -> None:
    if g.output_node in area.nodes:
        raise MorphError("cannot widen the classifier output")
    if not area.prev_layers:
        raise MorphError("cannot widen the graph input")
    for lid in sorted(area.next_layers):
        if lid in area.prev_layers:
            raise MorphError(f"effective area crosses trunk layer {lid} on both sides")
    for lid in sorted(g.layers):
        layer = g.layers[lid]
        if layer.kind == "concat" and layer.output in area.nodes:
            raise MorphError("cannot widen across a concat join")


def wide(g: ArchGraph, u0: int, new_width: int) -> ArchGraph:
    """Widen node u0 (and everything sharing its channel extent) to new_width."""
    g2, _ = _wide_detailed(g, u0, new_width)
    return g2


def _wide_detailed(g: ArchGraph, u0: int, new_width: int, validate: bool = True) -> tuple[ArchGraph, EffectiveArea]:
    area = effective_area(g, u0)
    cur = g.nodes[u0].channels
    if new_width <= cur:
        raise MorphError(f"new width {new_width} must exceed current width {cur}")
    _check_widenable(g, area)
    nodes = dict(g.nodes)
    for nid in area.nodes:
        nodes[nid] = nodes[nid].with_channels(new_width)
    layers = dict(g.layers)
    for lid in area.prev_layers:
        layer = layers[lid]
        if layer.kind == "conv":
            p = layer.params
            params = ConvParams(p.kernel_size, p.stride, new_width)
        else:
            params = DenseParams(new_width)
        layers[lid] = Layer(layer.id, layer.kind, params, layer.inputs, layer.output)
    out = ArchGraph(nodes, layers, g.input_node, g.output_node)
    if validate:
        report = out.validate()
        if report is not None:
            raise MorphError(f"widening produced an invalid graph: {report}")
    return out, area


def deep(g: ArchGraph, u: int, kind: str) -> ArchGraph:
    """Insert an identity-shaped layer right after main-path node u."""
    g2, _ = _deep_detailed(g, u, kind)
    return g2


def _deep_detailed(g: ArchGraph, u: int, kind: str, validate: bool = True) -> tuple[ArchGraph, int]:
    if u not in g.nodes:
        raise MorphError(f"unknown node {u}")
    if kind not in DEEP_KINDS:
        raise MorphError(f"cannot insert layer kind {kind!r}")
    if u == g.output_node:
        raise MorphError("cannot insert after the output node")
    if u not in set(g.trunk_nodes()):
        raise MorphError(f"insertion point {u} is not on the main path")
    prod = g.producer_of(u)
    if prod is not None and prod.kind in JOIN_KINDS:
        raise MorphError("cannot insert right after a skip join")
    shape = g.nodes[u]
    if kind == "dense" and shape.spatial() != (1, 1):
        raise MorphError("dense insertion requires collapsed spatial extents")
    if kind == "conv":
        params = ConvParams(3, 1, shape.channels)
    elif kind == "dense":
        params = DenseParams(shape.channels)
    elif kind == "dropout":
        params = DropoutParams(INSERTED_DROPOUT_RATE)
    else:
        params = None
    new_node = g.max_node_id() + 1
    new_layer = g.max_layer_id() + 1
    nodes = dict(g.nodes)
    nodes[new_node] = shape
    layers = {}
    for lid, layer in g.layers.items():
        if u in layer.inputs:
            layers[lid] = Layer(
                layer.id,
                layer.kind,
                layer.params,
                tuple(new_node if n == u else n for n in layer.inputs),
                layer.output,
            )
        else:
            layers[lid] = layer
    layers[new_layer] = Layer(new_layer, kind, params, (u,), new_node)
    out = ArchGraph(nodes, layers, g.input_node, g.output_node)
    if validate:
        report = out.validate()
        if report is not None:
            raise MorphError(f"deepening produced an invalid graph: {report}")
    return out, new_layer


def _skip_precheck(g: ArchGraph, u0: int, v0: int) -> list[PoolParams]:
    """Validate endpoints and return the pools to replicate along the branch."""
    if u0 == v0:
        raise MorphError("skip endpoints must differ")
    ranks = g.node_ranks()
    if u0 not in ranks or v0 not in ranks:
        raise MorphError("skip endpoints must lie on the main path")
    if ranks[u0] >= ranks[v0]:
        raise MorphError(
            f"skip must run from an earlier rank to a later one "
            f"(got ranks {ranks[u0]} -> {ranks[v0]})"
        )
    if v0 == g.output_node:
        raise MorphError("skip may not end at the output node")
    pools: list[PoolParams] = []
    h, w = g.nodes[u0].spatial()
    collecting = False
    for layer in g.trunk_path():
        if layer.inputs[-1] == u0:
            collecting = True
        if collecting and layer.kind == "pool":
            p = layer.params
            if h < p.window or w < p.window:
                raise MorphError("skip endpoints have incompatible spatial extents")
            h = (h - p.window) // p.stride + 1
            w = (w - p.window) // p.stride + 1
            pools.append(p)
        if layer.output == v0:
            break
    if (h, w) != g.nodes[v0].spatial():
        raise MorphError("skip endpoints have incompatible spatial extents")
    return pools


def _branch_to(g_nodes, g_layers, u0: int, pools: list[PoolParams]) -> int:
    """Append replicated pools after u0; returns the branch head node."""
    cur = u0
    for p in pools:
        shape = g_nodes[cur]
        nid = max(g_nodes) + 1
        lid = max(g_layers) + 1
        g_nodes[nid] = TensorShape(
            (shape.height - p.window) // p.stride + 1,
            (shape.width - p.window) // p.stride + 1,
            shape.channels,
        )
        g_layers[lid] = Layer(lid, "pool", p, (cur,), nid)
        cur = nid
    return cur


def _width_matcher_params(target_shape: TensorShape, out_channels: int):
    """A 1x1 conv in spatial segments, a dense layer once spatial collapsed."""
    if target_shape.spatial() == (1, 1):
        return "dense", DenseParams(out_channels)
    return "conv", ConvParams(1, 1, out_channels)


def _rewire(layers: dict[int, Layer], old: int, new: int, skip_ids: set[int]) -> None:
    for lid, layer in list(layers.items()):
        if lid in skip_ids or old not in layer.inputs:
            continue
        layers[lid] = Layer(
            layer.id,
            layer.kind,
            layer.params,
            tuple(new if n == old else n for n in layer.inputs),
            layer.output,
        )


def add_skip(g: ArchGraph, u0: int, v0: int) -> ArchGraph:
    """Add an additive skip-connection from node u0 to node v0."""
    g2, _ = _add_skip_detailed(g, u0, v0)
    return g2


def _add_skip_detailed(g: ArchGraph, u0: int, v0: int, validate: bool = True) -> tuple[ArchGraph, dict]:
    pools = _skip_precheck(g, u0, v0)
    nodes = dict(g.nodes)
    layers = dict(g.layers)
    branch = _branch_to(nodes, layers, u0, pools)
    v_shape = g.nodes[v0]
    kind, params = _width_matcher_params(v_shape, v_shape.channels)
    z = max(nodes) + 1
    lc = max(layers) + 1
    nodes[z] = v_shape
    layers[lc] = Layer(lc, kind, params, (branch,), z)
    joined = max(nodes) + 1
    join = max(layers) + 1
    nodes[joined] = v_shape
    layers[join] = Layer(join, "add", None, (z, v0), joined)
    _rewire(layers, v0, joined, {join})
    out = ArchGraph(nodes, layers, g.input_node, g.output_node)
    if validate:
        report = out.validate()
        if report is not None:
            raise MorphError(f"add skip produced an invalid graph: {report}")
    return out, {"lc": lc, "join": join, "branch_channels": g.nodes[u0].channels}


def concat_skip(g: ArchGraph, u0: int, v0: int) -> ArchGraph:
    """Add a concatenative skip-connection from node u0 to node v0."""
    g2, _ = _concat_skip_detailed(g, u0, v0)
    return g2


def _concat_skip_detailed(g: ArchGraph, u0: int, v0: int, validate: bool = True) -> tuple[ArchGraph, dict]:
    pools = _skip_precheck(g, u0, v0)
    nodes = dict(g.nodes)
    layers = dict(g.layers)
    branch = _branch_to(nodes, layers, u0, pools)
    v_shape = g.nodes[v0]
    u_channels = g.nodes[u0].channels
    cat_node = max(nodes) + 1
    cat = max(layers) + 1
    nodes[cat_node] = TensorShape(v_shape.height, v_shape.width, u_channels + v_shape.channels)
    layers[cat] = Layer(cat, "concat", None, (branch, v0), cat_node)
    kind, params = _width_matcher_params(v_shape, v_shape.channels)
    z = max(nodes) + 1
    lc = max(layers) + 1
    nodes[z] = v_shape
    layers[lc] = Layer(lc, kind, params, (cat_node,), z)
    _rewire(layers, v0, z, {cat})
    out = ArchGraph(nodes, layers, g.input_node, g.output_node)
    if validate:
        report = out.validate()
        if report is not None:
            raise MorphError(f"concat skip produced an invalid graph: {report}")
    return out, {"lc": lc, "join": cat, "branch_channels": u_channels, "trunk_channels": v_shape.channels}


def apply_op(g: ArchGraph, op: MorphOp, validate: bool = True) -> ArchGraph:
    if isinstance(op, Deep):
        return _deep_detailed(g, op.node, op.kind, validate)[0]
    if isinstance(op, Wide):
        return _wide_detailed(g, op.node, op.new_width, validate)[0]
    if isinstance(op, AddSkip):
        return _add_skip_detailed(g, op.start, op.end, validate)[0]
    if isinstance(op, ConcatSkip):
        return _concat_skip_detailed(g, op.start, op.end, validate)[0]
    raise MorphError(f"unknown morph op {op!r}")


def apply_sequence(g: ArchGraph, ops: list[MorphOp]) -> ArchGraph:
    """Left-fold the operations over the graph."""
    out = g
    for i, op in enumerate(ops):
        try:
            out = apply_op(out, op)
        except MorphError as exc:
            raise MorphError(f"op {i}: {exc}") from exc
    return out


# -- legal-operation enumeration ------------------------------------------


def legal_deep_ops(g: ArchGraph) -> list[Deep]:
    ops: list[Deep] = []
    for node in g.trunk_nodes():
        if node == g.output_node:
            continue
        prod = g.producer_of(node)
        if prod is not None and prod.kind in JOIN_KINDS:
            continue
        for kind in DEEP_KINDS:
            if kind == "dense" and g.nodes[node].spatial() != (1, 1):
                continue
            ops.append(Deep(node, kind))
    return ops


def legal_wide_ops(g: ArchGraph) -> list[Wide]:
    ops: list[Wide] = []
    for lid in sorted(g.layers):
        layer = g.layers[lid]
        if layer.kind not in TRUNK_KINDS:
            continue
        u0 = layer.output
        cur = g.nodes[u0].channels
        new_width = min(2 * cur, WIDE_CAP)
        if new_width <= cur:
            continue
        try:
            _check_widenable(g, effective_area(g, u0))
        except MorphError:
            continue
        ops.append(Wide(u0, new_width))
    return ops


def legal_skip_pairs(g: ArchGraph) -> list[tuple[int, int]]:
    """(u0, v0) node pairs a new skip may connect.

    Endpoints lie on the main path at distinct ranks, are not join outputs,
    spatial extents must agree after pool replication, and the rank pair must
    not already carry a skip.  Pool replication matches spatial extents
    exactly when no collapsing layer (dense or global pooling applied to a
    non-collapsed tensor) sits between the endpoints, which makes the
    per-pair test O(1).
    """
    ranks = g.node_ranks()
    taken = {(s.start_rank, s.start_rank + s.span) for s in g.skip_set()}
    # candidates as (node, rank, collapse count before node)
    candidates: list[tuple[int, int, int]] = []
    collapses = 0
    trunk = [(g.input_node, None)] + [(l.output, l) for l in g.trunk_path()]
    for node, prod in trunk:
        if prod is not None and prod.kind in ("dense", "globalavgpool"):
            if g.nodes[prod.inputs[0]].spatial() != (1, 1):
                collapses += 1
        if node == g.output_node:
            continue
        if prod is not None and prod.kind in JOIN_KINDS:
            continue
        candidates.append((node, ranks[node], collapses))
    pairs: list[tuple[int, int]] = []
    for i, (u0, ru, cu) in enumerate(candidates):
        for v0, rv, cv in candidates[i + 1 :]:
            if ru >= rv or cu != cv or (ru, rv) in taken:
                continue
            pairs.append((u0, v0))
    return pairs


def sample_children(
    g: ArchGraph, rng: random.Random, max_children: int = 8
) -> list[tuple[MorphOp, ArchGraph]]:
    """Sample up to max_children distinct valid children of g.

    Operation type is drawn uniformly from {deep, wide, skip}; a draw whose
    type has no legal operation is redrawn.  Children are de-duplicated by
    structural hash.  Deterministic for a fixed rng state.
    """
    deep_ops = legal_deep_ops(g)
    wide_ops = legal_wide_ops(g)
    pairs = legal_skip_pairs(g)
    total_legal = len(deep_ops) + len(wide_ops) + 2 * len(pairs)
    if total_legal == 0:
        return []
    children: list[tuple[MorphOp, ArchGraph]] = []
    seen_hashes = {g.structural_hash()}
    tried: set[MorphOp] = set()
    while len(children) < max_children and len(tried) < total_legal:
        kind = rng.randrange(3)
        if kind == 0:
            if not deep_ops:
                continue
            op: MorphOp = deep_ops[rng.randrange(len(deep_ops))]
        elif kind == 1:
            if not wide_ops:
                continue
            op = wide_ops[rng.randrange(len(wide_ops))]
        else:
            if not pairs:
                continue
            skip_cls = AddSkip if rng.randrange(2) == 0 else ConcatSkip
            u0, v0 = pairs[rng.randrange(len(pairs))]
            op = skip_cls(u0, v0)
        if op in tried:
            continue
        tried.add(op)
        try:
            child = apply_op(g, op, validate=False)
        except MorphError:
            continue
        h = child.structural_hash()
        if h in seen_hashes:
            continue
        seen_hashes.add(h)
        children.append((op, child))
    return children


# -- weight morphing --------------------------------------------------------


def _identity_weights(g2: ArchGraph, layer: Layer) -> dict[str, np.ndarray]:
    c_in = g2.nodes[layer.inputs[0]]
    if layer.kind == "conv":
        p = layer.params
        kernel = np.zeros((p.kernel_size, p.kernel_size, c_in.channels, p.filters))
        mid = (p.kernel_size - 1) // 2
        for c in range(min(c_in.channels, p.filters)):
            kernel[mid, mid, c, c] = 1.0
        return {"kernel": kernel, "bias": np.zeros(p.filters)}
    if layer.kind == "dense":
        fan_in = c_in.elements()
        return {"matrix": np.eye(fan_in, layer.params.units), "bias": np.zeros(layer.params.units)}
    if layer.kind == "batchnorm":
        c = c_in.channels
        return {
            "scale": np.ones(c),
            "shift": np.zeros(c),
            "mean": np.zeros(c),
            "var": np.ones(c),
        }
    return {}


def _add_noise(bundle: dict[str, np.ndarray], noise_scale: float, rng: np.random.Generator) -> None:
    if noise_scale <= 0:
        return
    for name, arr in bundle.items():
        arr += rng.uniform(-noise_scale, noise_scale, size=arr.shape)


def morph_weights(
    g: ArchGraph,
    weights: dict[int, dict[str, np.ndarray]],
    op: MorphOp,
    noise_scale: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> tuple[ArchGraph, dict[int, dict[str, np.ndarray]]]:
    """Apply op to (g, weights); new weights preserve the network function.

    With noise_scale 0 the morphed network computes exactly the original
    function (inserted relu layers excepted: rectification has no identity
    initialization).  Returns the morphed graph and weight set.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    new_weights = {lid: dict(bundle) for lid, bundle in weights.items()}

    if isinstance(op, Deep):
        g2, new_layer = _deep_detailed(g, op.node, op.kind)
        bundle = _identity_weights(g2, g2.layers[new_layer])
        _add_noise(bundle, noise_scale, rng)
        if bundle:
            new_weights[new_layer] = bundle
        return g2, new_weights

    if isinstance(op, Wide):
        g2, area = _wide_detailed(g, op.node, op.new_width)
        nw = op.new_width
        for lid in sorted(area.prev_layers):
            new_weights[lid] = _widen_out(g, g.layers[lid], weights[lid], nw, noise_scale, rng)
        for lid in sorted(area.next_layers):
            new_weights[lid] = _widen_in(g, g2, g.layers[lid], new_weights[lid], noise_scale, rng)
        for lid in sorted(g.layers):
            layer = g.layers[lid]
            if layer.kind == "batchnorm" and layer.output in area.nodes:
                new_weights[lid] = _widen_bn(weights[lid], nw, noise_scale, rng)
        return g2, new_weights

    if isinstance(op, AddSkip):
        g2, info = _add_skip_detailed(g, op.start, op.end)
        lc_layer = g2.layers[info["lc"]]
        c_in = g2.nodes[lc_layer.inputs[0]]
        if lc_layer.kind == "conv":
            bundle = {
                "kernel": np.zeros((1, 1, c_in.channels, lc_layer.params.filters)),
                "bias": np.zeros(lc_layer.params.filters),
            }
        else:
            bundle = {
                "matrix": np.zeros((c_in.elements(), lc_layer.params.units)),
                "bias": np.zeros(lc_layer.params.units),
            }
        _add_noise(bundle, noise_scale, rng)
        new_weights[info["lc"]] = bundle
        return g2, new_weights

    if isinstance(op, ConcatSkip):
        g2, info = _concat_skip_detailed(g, op.start, op.end)
        lc_layer = g2.layers[info["lc"]]
        cu, cv = info["branch_channels"], info["trunk_channels"]
        if lc_layer.kind == "conv":
            kernel = np.zeros((1, 1, cu + cv, cv))
            for j in range(cv):
                kernel[0, 0, cu + j, j] = 1.0
            bundle = {"kernel": kernel, "bias": np.zeros(cv)}
        else:
            matrix = np.zeros((cu + cv, cv))
            matrix[cu:, :] = np.eye(cv)
            bundle = {"matrix": matrix, "bias": np.zeros(cv)}
        _add_noise(bundle, noise_scale, rng)
        new_weights[info["lc"]] = bundle
        return g2, new_weights

    raise MorphError(f"unknown morph op {op!r}")


def _widen_out(g, layer, bundle, new_width, noise_scale, rng):
    """Grow a trunk layer's output extent; new units produce zeros."""
    if layer.kind == "conv":
        kernel = bundle["kernel"]
        kh, kw, cin, cout = kernel.shape
        grown = np.zeros((kh, kw, cin, new_width))
        grown[:, :, :, :cout] = kernel
        if noise_scale > 0:
            grown[:, :, :, cout:] += rng.uniform(-noise_scale, noise_scale, (kh, kw, cin, new_width - cout))
        bias = np.zeros(new_width)
        bias[:cout] = bundle["bias"]
        if noise_scale > 0:
            bias[cout:] += rng.uniform(-noise_scale, noise_scale, new_width - cout)
        out = {"kernel": grown, "bias": bias}
    else:
        matrix = bundle["matrix"]
        fan_in, units = matrix.shape
        grown = np.zeros((fan_in, new_width))
        grown[:, :units] = matrix
        if noise_scale > 0:
            grown[:, units:] += rng.uniform(-noise_scale, noise_scale, (fan_in, new_width - units))
        bias = np.zeros(new_width)
        bias[:units] = bundle["bias"]
        if noise_scale > 0:
            bias[units:] += rng.uniform(-noise_scale, noise_scale, new_width - units)
        out = {"matrix": grown, "bias": bias}
    return out


def _widen_in(g, g2, layer, bundle, noise_scale, rng):
    """Grow a trunk layer's input extent; weights of new inputs are zero."""
    in_old = g.nodes[layer.inputs[0]]
    in_new = g2.nodes[layer.inputs[0]]
    if in_old.channels == in_new.channels:
        return bundle
    if layer.kind == "conv":
        kernel = bundle["kernel"]
        kh, kw, _, cout = kernel.shape
        grown = np.zeros((kh, kw, in_new.channels, cout))
        grown[:, :, : in_old.channels, :] = kernel
        if noise_scale > 0:
            grown[:, :, in_old.channels :, :] += rng.uniform(
                -noise_scale, noise_scale, (kh, kw, in_new.channels - in_old.channels, cout)
            )
        return {"kernel": grown, "bias": bundle["bias"].copy()}
    matrix = bundle["matrix"]
    units = matrix.shape[1]
    # flattened dense input is (h, w, c) row-major: widening interleaves rows
    old_view = matrix.reshape(in_old.height, in_old.width, in_old.channels, units)
    grown = np.zeros((in_new.height, in_new.width, in_new.channels, units))
    grown[:, :, : in_old.channels, :] = old_view
    if noise_scale > 0:
        grown[:, :, in_old.channels :, :] += rng.uniform(
            -noise_scale, noise_scale, (in_new.height, in_new.width, in_new.channels - in_old.channels, units)
        )
    return {"matrix": grown.reshape(in_new.elements(), units), "bias": bundle["bias"].copy()}


def _widen_bn(bundle, new_width, noise_scale, rng):
    out = {}
    fill = {"scale": 1.0, "shift": 0.0, "mean": 0.0, "var": 1.0}
    for name, arr in bundle.items():
        grown = np.full(new_width, fill[name], dtype=float)
        grown[: len(arr)] = arr
        if noise_scale > 0:
            grown[len(arr) :] += rng.uniform(-noise_scale, noise_scale, new_width - len(arr))
        out[name] = grown
    return out
