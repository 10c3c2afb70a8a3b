"""Architecture graphs: a DAG of tensor nodes connected by layer edges.

A graph is an immutable value after construction.  Every node is produced by
exactly one layer (the unique ``input`` layer produces the graph input node),
and every forward path ends at the graph output node, whose producer is a
``softmax`` layer.  Join layers (``add``/``concat``) list the side branch
first and the main-path tensor last, which is what makes the main chain and
the skip descriptors derivable from structure alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

__all__ = [
    "TensorShape",
    "ConvParams",
    "DenseParams",
    "PoolParams",
    "DropoutParams",
    "Layer",
    "SkipDescriptor",
    "ArchGraph",
    "InvalidGraphError",
    "GraphParseError",
    "default_cnn",
    "LAYER_KINDS",
    "TRUNK_KINDS",
    "JOIN_KINDS",
    "BYTES_PER_ELEMENT",
]

LAYER_KINDS = (
    "input",
    "conv",
    "dense",
    "relu",
    "batchnorm",
    "pool",
    "globalavgpool",
    "dropout",
    "softmax",
    "add",
    "concat",
)

# Layers that carry trainable width: the main-chain edit distance and the
# effective-area closure both stop at these.
TRUNK_KINDS = frozenset({"conv", "dense"})
JOIN_KINDS = frozenset({"add", "concat"})

# 32-bit float precision assumed for memory estimates.
BYTES_PER_ELEMENT = 4


class InvalidGraphError(ValueError):
    """Raised when an operation requires a valid graph and gets none."""


class GraphParseError(ValueError):
    """Raised when an architecture document is malformed."""


@dataclass(frozen=True)
class TensorShape:
    """Shape of one tensor node; dense tensors use height = width = 1."""

    height: int
    width: int
    channels: int

    def elements(self) -> int:
        return self.height * self.width * self.channels

    def spatial(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_channels(self, channels: int) -> "TensorShape":
        return TensorShape(self.height, self.width, channels)

    def as_list(self) -> list[int]:
        return [self.height, self.width, self.channels]


@dataclass(frozen=True)
class ConvParams:
    kernel_size: int
    stride: int
    filters: int


@dataclass(frozen=True)
class DenseParams:
    units: int


@dataclass(frozen=True)
class PoolParams:
    window: int
    stride: int


@dataclass(frozen=True)
class DropoutParams:
    rate: float


LayerParams = ConvParams | DenseParams | PoolParams | DropoutParams | None

_PARAM_KINDS = {"conv": ConvParams, "dense": DenseParams, "pool": PoolParams, "dropout": DropoutParams}

_ARITY = {"input": 0, "add": 2, "concat": 2}


def _arity(kind: str) -> int:
    return _ARITY.get(kind, 1)


@dataclass(frozen=True)
class Layer:
    """One edge of the computational graph."""

    id: int
    kind: str
    params: LayerParams
    inputs: tuple[int, ...]
    output: int


@dataclass(frozen=True, order=True)
class SkipDescriptor:
    """Summary of one skip-connection.

    ``start_rank`` is the topological rank of the main-chain layer the
    connection starts from, ``span`` the number of main-chain layers it
    jumps over.
    """

    start_rank: int
    span: int
    kind: str  # "add" | "concat"


def output_shape(kind: str, params: LayerParams, in_shapes: list[TensorShape]) -> TensorShape:
    """Deterministic shape function of each layer kind.

    Raises ValueError when the inputs are not acceptable for the kind.
    """
    if kind == "conv":
        # stride-1 'same' padding: spatial preserved, channels = filters
        s = in_shapes[0]
        return TensorShape(s.height, s.width, params.filters)
    if kind == "dense":
        return TensorShape(1, 1, params.units)
    if kind == "pool":
        s = in_shapes[0]
        if s.height < params.window or s.width < params.window:
            raise ValueError("pool window exceeds spatial extent")
        h = (s.height - params.window) // params.stride + 1
        w = (s.width - params.window) // params.stride + 1
        if h < 1 or w < 1:
            raise ValueError("pool collapses spatial extent below 1")
        return TensorShape(h, w, s.channels)
    if kind == "globalavgpool":
        s = in_shapes[0]
        return TensorShape(1, 1, s.channels)
    if kind == "add":
        a, b = in_shapes
        if a != b:
            raise ValueError("add shape mismatch")
        return a
    if kind == "concat":
        a, b = in_shapes
        if a.spatial() != b.spatial():
            raise ValueError("concat spatial mismatch")
        return TensorShape(a.height, a.width, a.channels + b.channels)
    if kind in ("relu", "batchnorm", "dropout", "softmax", "input"):
        return in_shapes[0]
    raise ValueError(f"unknown layer kind {kind!r}")


class ArchGraph:
    """Immutable architecture graph.

    ``nodes`` maps node id to its tensor shape, ``layers`` maps layer id to
    the layer edge.  Construction is cheap and does not validate; call
    :meth:`validate` (report) or :meth:`require_valid` (raise).
    """

    __slots__ = ("nodes", "layers", "input_node", "output_node", "_producer", "_consumers", "_cache")

    def __init__(
        self,
        nodes: dict[int, TensorShape],
        layers: dict[int, Layer],
        input_node: int,
        output_node: int,
    ):
        self.nodes = dict(nodes)
        self.layers = dict(layers)
        self.input_node = input_node
        self.output_node = output_node
        producer: dict[int, list[int]] = {}
        consumers: dict[int, list[int]] = {}
        for lid in sorted(self.layers):
            layer = self.layers[lid]
            producer.setdefault(layer.output, []).append(lid)
            for n in layer.inputs:
                consumers.setdefault(n, []).append(lid)
        self._producer = producer
        self._consumers = consumers
        self._cache: dict[str, object] = {}

    # -- basic accessors ---------------------------------------------------

    def shape(self, node_id: int) -> TensorShape:
        return self.nodes[node_id]

    def producer_of(self, node_id: int) -> Layer | None:
        lids = self._producer.get(node_id)
        return self.layers[lids[0]] if lids else None

    def consumers_of(self, node_id: int) -> list[Layer]:
        return [self.layers[lid] for lid in self._consumers.get(node_id, [])]

    def layer_width(self, layer_id: int) -> int:
        """w(l): channel extent of the layer's output tensor."""
        return self.nodes[self.layers[layer_id].output].channels

    def max_node_id(self) -> int:
        return max(self.nodes)

    def max_layer_id(self) -> int:
        return max(self.layers)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ArchGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.layers == other.layers
            and self.input_node == other.input_node
            and self.output_node == other.output_node
        )

    def __hash__(self):  # identity hash; structural identity via structural_hash()
        return id(self)

    # -- validation --------------------------------------------------------

    def validate(self) -> str | None:
        """Return None when every invariant holds, else a report naming the
        first violated invariant and the offending ids."""
        if self.input_node not in self.nodes:
            return f"unknown input node {self.input_node}"
        if self.output_node not in self.nodes:
            return f"unknown output node {self.output_node}"
        for nid in sorted(self.nodes):
            s = self.nodes[nid]
            if s.height < 1 or s.width < 1 or s.channels < 1:
                return f"invalid tensor shape at node {nid}: {s.as_list()}"
        for lid in sorted(self.layers):
            layer = self.layers[lid]
            if layer.id != lid:
                return f"layer {lid} carries mismatched id {layer.id}"
            if layer.kind not in LAYER_KINDS:
                return f"layer {lid} has unknown kind {layer.kind!r}"
            if len(layer.inputs) != _arity(layer.kind):
                return f"layer {lid}: {layer.kind} takes exactly {_arity(layer.kind)} inputs"
            for n in layer.inputs:
                if n not in self.nodes:
                    return f"layer {lid} references unknown node {n}"
            if layer.output not in self.nodes:
                return f"layer {lid} references unknown node {layer.output}"
            err = self._check_params(layer)
            if err:
                return err
        inputs = [lid for lid in sorted(self.layers) if self.layers[lid].kind == "input"]
        if len(inputs) != 1:
            return f"exactly one input layer required, found {len(inputs)}"
        if self.layers[inputs[0]].output != self.input_node:
            return f"input layer {inputs[0]} must produce the graph input node"
        for nid in sorted(self.nodes):
            prods = self._producer.get(nid, [])
            if len(prods) == 0:
                return f"node {nid} has no producer"
            if len(prods) > 1:
                return f"node {nid} has {len(prods)} producers"
        order = self._topo_layer_order()
        if order is None:
            return "not a DAG"
        reach = self._reachable_from_input()
        for nid in sorted(self.nodes):
            if nid not in reach:
                return f"node {nid} unreachable from input"
        for nid in sorted(self.nodes):
            if nid != self.output_node and not self._consumers.get(nid):
                return f"node {nid} is a dead end (only the output node may have no consumer)"
        if self._consumers.get(self.output_node):
            return f"output node {self.output_node} must not feed another layer"
        for lid in order:
            layer = self.layers[lid]
            if layer.kind == "input":
                continue
            try:
                want = output_shape(layer.kind, layer.params, [self.nodes[n] for n in layer.inputs])
            except ValueError as exc:
                return f"{exc} at layer {lid}"
            got = self.nodes[layer.output]
            if want != got:
                return (
                    f"layer {lid} ({layer.kind}): output shape mismatch, "
                    f"declared {got.as_list()} vs computed {want.as_list()}"
                )
        out_prod = self.producer_of(self.output_node)
        if out_prod is None or out_prod.kind != "softmax":
            return "terminal layer must be softmax"
        return None

    def _check_params(self, layer: Layer) -> str | None:
        cls = _PARAM_KINDS.get(layer.kind)
        if cls is None:
            if layer.params is not None:
                return f"layer {layer.id}: {layer.kind} takes no params"
            return None
        if not isinstance(layer.params, cls):
            return f"layer {layer.id}: invalid params for {layer.kind}"
        p = layer.params
        if isinstance(p, ConvParams) and (p.filters < 1 or p.kernel_size < 1 or p.stride < 1):
            return f"layer {layer.id}: conv params out of range"
        if isinstance(p, DenseParams) and p.units < 1:
            return f"layer {layer.id}: dense units must be >= 1"
        if isinstance(p, PoolParams) and (p.window < 1 or p.stride < 1):
            return f"layer {layer.id}: pool params out of range"
        if isinstance(p, DropoutParams) and not (0.0 <= p.rate < 1.0):
            return f"layer {layer.id}: dropout rate must be in [0, 1)"
        return None

    def require_valid(self) -> "ArchGraph":
        report = self.validate()
        if report is not None:
            raise InvalidGraphError(report)
        return self

    def _topo_layer_order(self) -> list[int] | None:
        """Kahn's algorithm over layers (id tie-break); None on a cycle."""
        if "topo" in self._cache:
            return self._cache["topo"]  # type: ignore[return-value]
        import heapq

        pending = {lid: len(self.layers[lid].inputs) for lid in self.layers}
        ready = [lid for lid in pending if pending[lid] == 0]
        heapq.heapify(ready)
        order: list[int] = []
        while ready:
            lid = heapq.heappop(ready)
            order.append(lid)
            out = self.layers[lid].output
            for consumer in self._consumers.get(out, []):
                pending[consumer] -= 1
                if pending[consumer] == 0:
                    heapq.heappush(ready, consumer)
        result = order if len(order) == len(self.layers) else None
        self._cache["topo"] = result
        return result

    def topo_layers(self) -> list[Layer]:
        order = self._topo_layer_order()
        if order is None:
            raise InvalidGraphError("not a DAG")
        return [self.layers[lid] for lid in order]

    def _reachable_from_input(self) -> set[int]:
        seen = {self.input_node}
        frontier = [self.input_node]
        while frontier:
            nid = frontier.pop()
            for layer in self.consumers_of(nid):
                if layer.output not in seen:
                    seen.add(layer.output)
                    frontier.append(layer.output)
        return seen

    # -- main chain and skips ------------------------------------------------

    def trunk_path(self) -> list[Layer]:
        """All layers on the main input-to-output path, in forward order.

        Walks backward from the output producer; at a join the last input is
        the main-path side.  The input layer itself is excluded.
        """
        if "trunk" in self._cache:
            return self._cache["trunk"]  # type: ignore[return-value]
        path: list[Layer] = []
        node = self.output_node
        seen: set[int] = set()
        while True:
            layer = self.producer_of(node)
            if layer is None or layer.kind == "input":
                break
            if layer.id in seen:
                raise InvalidGraphError("not a DAG")
            seen.add(layer.id)
            path.append(layer)
            node = layer.inputs[-1]
        path.reverse()
        self._cache["trunk"] = path
        return path

    def trunk_nodes(self) -> list[int]:
        """Node ids on the main path, input node first."""
        return [self.input_node] + [layer.output for layer in self.trunk_path()]

    def node_ranks(self) -> dict[int, int]:
        """Topological rank of each main-path node: the number of main-chain
        (conv/dense) layers between the input and that node."""
        if "ranks" in self._cache:
            return self._cache["ranks"]  # type: ignore[return-value]
        ranks = {self.input_node: 0}
        rank = 0
        for layer in self.trunk_path():
            if layer.kind in TRUNK_KINDS:
                rank += 1
            ranks[layer.output] = rank
        self._cache["ranks"] = ranks
        return ranks

    def main_chain(self) -> list[Layer]:
        """The trunk: conv/dense layers on the main path, topologically ordered."""
        return [layer for layer in self.trunk_path() if layer.kind in TRUNK_KINDS]

    def main_chain_widths(self) -> tuple[int, ...]:
        return tuple(self.layer_width(layer.id) for layer in self.main_chain())

    def skip_set(self) -> list[SkipDescriptor]:
        """One descriptor per join whose branch forks from an earlier rank.

        Sorted by (start_rank, span, kind) for determinism.
        """
        ranks = self.node_ranks()
        trunk = set(ranks)
        out: list[SkipDescriptor] = []
        for layer in self.trunk_path():
            if layer.kind not in JOIN_KINDS:
                continue
            end_rank = ranks[layer.inputs[-1]]
            node = layer.inputs[0]
            while node not in trunk:
                prod = self.producer_of(node)
                if prod is None:
                    break
                node = prod.inputs[-1] if prod.inputs else self.input_node
            start_rank = ranks.get(node)
            if start_rank is None:
                continue
            span = end_rank - start_rank
            if span >= 1:
                out.append(SkipDescriptor(start_rank, span, layer.kind))
        out.sort()
        return out

    # -- memory --------------------------------------------------------------

    def parameter_count(self) -> int:
        total = 0
        for lid in sorted(self.layers):
            layer = self.layers[lid]
            if layer.kind == "conv":
                cin = self.nodes[layer.inputs[0]].channels
                p = layer.params
                total += p.kernel_size * p.kernel_size * cin * p.filters + p.filters
            elif layer.kind == "dense":
                fan_in = self.nodes[layer.inputs[0]].elements()
                total += fan_in * layer.params.units + layer.params.units
            elif layer.kind == "batchnorm":
                # scale, shift, running mean, running var
                total += 4 * self.nodes[layer.inputs[0]].channels
        return total

    def estimate_memory(self, batch: int) -> int:
        """Bytes to hold parameters plus per-example activations for a batch."""
        if batch < 1:
            raise ValueError("batch must be >= 1")
        activations = sum(self.nodes[nid].elements() for nid in self.nodes)
        return BYTES_PER_ELEMENT * (self.parameter_count() + batch * activations)

    # -- serialization ---------------------------------------------------------

    def to_json(self, indent: int | None = 2) -> str:
        doc = {
            "version": 1,
            "input_node": self.input_node,
            "output_node": self.output_node,
            "nodes": [
                {"id": nid, "shape": self.nodes[nid].as_list()} for nid in sorted(self.nodes)
            ],
            "layers": [
                {
                    "id": lid,
                    "kind": self.layers[lid].kind,
                    "params": _params_to_json(self.layers[lid].params),
                    "inputs": list(self.layers[lid].inputs),
                    "output": self.layers[lid].output,
                }
                for lid in sorted(self.layers)
            ],
        }
        return json.dumps(doc, indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "ArchGraph":
        """Parse and validate an architecture document.

        Raises GraphParseError for malformed documents and InvalidGraphError
        when the parsed graph violates a structural invariant.
        """
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        g = cls.from_dict(doc)
        g.require_valid()
        return g

    @classmethod
    def from_dict(cls, doc: object) -> "ArchGraph":
        if not isinstance(doc, dict):
            raise GraphParseError("document must be a JSON object")
        _require_keys(doc, {"version", "input_node", "output_node", "nodes", "layers"}, "document")
        if doc["version"] != 1:
            raise GraphParseError(f"unsupported version {doc['version']!r}")
        nodes: dict[int, TensorShape] = {}
        if not isinstance(doc["nodes"], list):
            raise GraphParseError("field 'nodes' must be an array")
        for entry in doc["nodes"]:
            _require_keys(entry, {"id", "shape"}, "node")
            nid = _require_int(entry["id"], "node id")
            shape = entry["shape"]
            if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) for v in shape)):
                raise GraphParseError(f"node {nid}: field 'shape' must be [h, w, c] integers")
            if nid in nodes:
                raise GraphParseError(f"duplicate node id {nid}")
            nodes[nid] = TensorShape(*shape)
        layers: dict[int, Layer] = {}
        if not isinstance(doc["layers"], list):
            raise GraphParseError("field 'layers' must be an array")
        for entry in doc["layers"]:
            _require_keys(entry, {"id", "kind", "params", "inputs", "output"}, "layer")
            lid = _require_int(entry["id"], "layer id")
            kind = entry["kind"]
            if kind not in LAYER_KINDS:
                raise GraphParseError(f"layer {lid}: unknown kind {kind!r}")
            params = _params_from_json(kind, entry["params"], lid)
            if not (isinstance(entry["inputs"], list) and all(isinstance(v, int) for v in entry["inputs"])):
                raise GraphParseError(f"layer {lid}: field 'inputs' must be an array of node ids")
            out = _require_int(entry["output"], f"layer {lid} output")
            if lid in layers:
                raise GraphParseError(f"duplicate layer id {lid}")
            layers[lid] = Layer(lid, kind, params, tuple(entry["inputs"]), out)
        return cls(
            nodes,
            layers,
            _require_int(doc["input_node"], "input_node"),
            _require_int(doc["output_node"], "output_node"),
        )

    def structural_hash(self) -> str:
        """Stable 64-bit hex digest of the graph structure."""
        key = (
            self.input_node,
            self.output_node,
            tuple(sorted((nid, s.height, s.width, s.channels) for nid, s in self.nodes.items())),
            tuple(
                sorted(
                    (lid, l.kind, tuple(sorted(_params_to_json(l.params).items())), l.inputs, l.output)
                    for lid, l in self.layers.items()
                )
            ),
        )
        return hashlib.blake2b(repr(key).encode(), digest_size=8).hexdigest()


def _params_to_json(params: LayerParams) -> dict:
    if params is None:
        return {}
    return dict(params.__dict__)


def _params_from_json(kind: str, raw: object, lid: int) -> LayerParams:
    if not isinstance(raw, dict):
        raise GraphParseError(f"layer {lid}: field 'params' must be an object")
    cls = _PARAM_KINDS.get(kind)
    if cls is None:
        if raw:
            raise GraphParseError(f"layer {lid}: {kind} takes no params, got {sorted(raw)}")
        return None
    fields = {f for f in cls.__dataclass_fields__}
    if set(raw) != fields:
        raise GraphParseError(f"layer {lid}: {kind} params must have fields {sorted(fields)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise GraphParseError(f"layer {lid}: bad params ({exc})") from exc


def _require_keys(obj: object, keys: set[str], what: str) -> None:
    if not isinstance(obj, dict):
        raise GraphParseError(f"{what} must be a JSON object")
    missing = keys - set(obj)
    if missing:
        raise GraphParseError(f"{what} missing field: {sorted(missing)[0]}")
    unknown = set(obj) - keys
    if unknown:
        raise GraphParseError(f"{what} has unknown field: {sorted(unknown)[0]}")


def _require_int(value: object, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise GraphParseError(f"{what} must be an integer")
    return value


class _Builder:
    """Append-only helper for constructing graphs layer by layer."""

    def __init__(self, input_shape: TensorShape):
        self.nodes: dict[int, TensorShape] = {0: input_shape}
        self.layers: dict[int, Layer] = {0: Layer(0, "input", None, (), 0)}
        self.head = 0

    def append(self, kind: str, params: LayerParams = None) -> int:
        shape = output_shape(kind, params, [self.nodes[self.head]])
        nid = max(self.nodes) + 1
        lid = max(self.layers) + 1
        self.nodes[nid] = shape
        self.layers[lid] = Layer(lid, kind, params, (self.head,), nid)
        self.head = nid
        return nid

    def build(self) -> ArchGraph:
        return ArchGraph(self.nodes, self.layers, 0, self.head)


DEFAULT_CONV_FILTERS = 64
DEFAULT_DENSE_UNITS = 64
DEFAULT_DROPOUT_RATE = 0.25
DEFAULT_CONV_BLOCKS = 3


def default_cnn(input_shape: tuple[int, int, int] | TensorShape, num_classes: int) -> ArchGraph:
    """The default starting architecture.

    Three blocks of [relu, batchnorm, conv(3x3, stride 1, 64 filters), pool],
    then global average pooling, dropout, a 64-unit dense layer, relu, the
    classifier dense layer, and softmax.
    """
    if not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if min(input_shape.height, input_shape.width, input_shape.channels) < 1:
        raise ValueError("input extents must be >= 1")
    h, w = input_shape.spatial()
    for _ in range(DEFAULT_CONV_BLOCKS):
        if h < 2 or w < 2:
            raise ValueError(
                f"spatial extent {input_shape.spatial()} too small for "
                f"{DEFAULT_CONV_BLOCKS} pooling halvings"
            )
        h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    b = _Builder(input_shape)
    for _ in range(DEFAULT_CONV_BLOCKS):
        b.append("relu")
        b.append("batchnorm")
        b.append("conv", ConvParams(3, 1, DEFAULT_CONV_FILTERS))
        b.append("pool", PoolParams(2, 2))
    b.append("globalavgpool")
    b.append("dropout", DropoutParams(DEFAULT_DROPOUT_RATE))
    b.append("dense", DenseParams(DEFAULT_DENSE_UNITS))
    b.append("relu")
    b.append("dense", DenseParams(num_classes))
    b.append("softmax")
    return b.build().require_valid()
