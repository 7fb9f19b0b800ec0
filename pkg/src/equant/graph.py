"""Topologically sorted DAG of convolution layers with a pure executor.

Every node names its producers in ``inputs``; the reserved name ``input``
refers to the graph input tensor.  Graphs are immutable after construction:
rewrite passes build modified copies via :meth:`Graph.with_nodes`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

from .errors import GraphError, ShapeMismatchError
from .quantsim import GRAPH_INPUT, LayerQuant, quantize_dequantize
from .tensors import (
    LINEAR,
    Activation,
    apply_activation,
    conv2d,
    depthwise_conv2d,
    normalize_depthwise_kernel,
)

LAYER_OPS = ("conv", "depthwise")
JUNCTION_KINDS = ("add", "concat")


@dataclass(frozen=True, eq=False)
class LayerNode:
    """One convolution or depthwise-convolution layer."""

    id: str
    op: str
    inputs: tuple[str, ...]
    kernel: np.ndarray
    bias: np.ndarray
    activation: Activation = LINEAR
    stride: tuple[int, int] = (1, 1)
    padding: str = "valid"
    quant: LayerQuant | None = None
    bn_folded: bool = False

    def __post_init__(self):
        if self.op not in LAYER_OPS:
            raise GraphError(f"layer {self.id!r}: unknown op {self.op!r}")
        if len(self.inputs) != 1:
            raise GraphError(f"layer {self.id!r}: expected exactly one producer")
        object.__setattr__(self, "kernel", np.asarray(self.kernel, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "stride", (int(self.stride[0]), int(self.stride[1])))
        if self.op == "conv":
            if self.kernel.ndim != 4:
                raise ShapeMismatchError(
                    f"layer {self.id!r}: conv kernel must be rank 4, got {self.kernel.ndim}"
                )
        else:
            normalize_depthwise_kernel(self.kernel)
        if self.bias.ndim != 1 or self.bias.shape[0] != self.out_channels:
            raise ShapeMismatchError(
                f"layer {self.id!r}: bias length {self.bias.shape} != "
                f"output channels {self.out_channels}"
            )
        if isinstance(self.activation.slope, tuple) and len(self.activation.slope) not in (
            1,
            self.out_channels,
        ):
            raise ShapeMismatchError(
                f"layer {self.id!r}: prelu slope count {len(self.activation.slope)} != "
                f"output channels {self.out_channels}"
            )

    @property
    def in_channels(self) -> int:
        if self.op == "depthwise":
            return normalize_depthwise_kernel(self.kernel).shape[2]
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        if self.op == "depthwise":
            return normalize_depthwise_kernel(self.kernel).shape[2]
        return self.kernel.shape[3]


@dataclass(frozen=True, eq=False)
class JunctionNode:
    """Element-wise add or channel concat of two or more producers."""

    id: str
    kind: str
    inputs: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in JUNCTION_KINDS:
            raise GraphError(f"junction {self.id!r}: unknown kind {self.kind!r}")
        if len(self.inputs) < 2:
            raise GraphError(f"junction {self.id!r}: needs at least two producers")
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True, eq=False)
class BatchNormNode:
    """Per-channel normalization; removed by folding before quantization."""

    id: str
    inputs: tuple[str, ...]
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    activation: Activation = LINEAR

    def __post_init__(self):
        if len(self.inputs) != 1:
            raise GraphError(f"batchnorm {self.id!r}: expected exactly one producer")
        for name in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        n = self.gamma.shape[0]
        if any(getattr(self, p).shape != (n,) for p in ("beta", "mean", "var")):
            raise ShapeMismatchError(f"batchnorm {self.id!r}: parameter lengths differ")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


Node = Union[LayerNode, JunctionNode, BatchNormNode]


class ExecResult(NamedTuple):
    outputs: dict[str, np.ndarray]
    taps: dict[str, np.ndarray]


class Graph:
    """Immutable DAG of layers, junctions and (pre-fold) batchnorm nodes."""

    def __init__(
        self,
        nodes: Sequence[Node],
        outputs: Sequence[str],
        input_shape: tuple[int, int, int],
    ):
        self._nodes: dict[str, Node] = {}
        for node in nodes:
            if node.id == GRAPH_INPUT:
                raise GraphError(f"node id {GRAPH_INPUT!r} is reserved for the graph input")
            if node.id in self._nodes:
                raise GraphError(f"duplicate node id {node.id!r}")
            self._nodes[node.id] = node
        self.outputs: list[str] = list(outputs)
        if not self.outputs:
            raise GraphError("graph has no outputs")
        for oid in self.outputs:
            if oid not in self._nodes:
                raise GraphError(f"output {oid!r} is not a node")
        self.input_shape = (int(input_shape[0]), int(input_shape[1]), int(input_shape[2]))

        self._successors: dict[str, list[str]] = {nid: [] for nid in self._nodes}
        for node in self._nodes.values():
            for ref in node.inputs:
                if ref == GRAPH_INPUT:
                    continue
                if ref not in self._nodes:
                    raise GraphError(f"node {node.id!r} references unknown producer {ref!r}")
                self._successors[ref].append(node.id)

        self.order: list[str] = self._toposort()
        self.channels: dict[str, int] = self._check_channels()

    # -- construction helpers -------------------------------------------------

    def _toposort(self) -> list[str]:
        pending = {
            nid: sum(1 for ref in node.inputs if ref != GRAPH_INPUT)
            for nid, node in self._nodes.items()
        }
        ready = [nid for nid in self._nodes if pending[nid] == 0]
        order: list[str] = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for succ in self._successors[nid]:
                pending[succ] -= 1
                if pending[succ] == 0:
                    ready.append(succ)
        if len(order) != len(self._nodes):
            cyclic = sorted(nid for nid, n in pending.items() if n > 0)
            raise GraphError(f"graph contains a cycle through {cyclic}")
        return order

    def _check_channels(self) -> dict[str, int]:
        channels: dict[str, int] = {GRAPH_INPUT: self.input_shape[2]}
        for nid in self.order:
            node = self._nodes[nid]
            if isinstance(node, LayerNode):
                produced = channels[node.inputs[0]]
                if node.in_channels != produced:
                    raise GraphError(
                        f"node {nid!r} expects {node.in_channels} input channels but "
                        f"producer {node.inputs[0]!r} yields {produced}"
                    )
                channels[nid] = node.out_channels
            elif isinstance(node, JunctionNode):
                widths = [channels[ref] for ref in node.inputs]
                if node.kind == "add":
                    if len(set(widths)) != 1:
                        raise GraphError(
                            f"add junction {nid!r} operands have unequal channels {widths}"
                        )
                    channels[nid] = widths[0]
                else:
                    channels[nid] = sum(widths)
            else:  # BatchNormNode
                produced = channels[node.inputs[0]]
                if node.channels != produced:
                    raise GraphError(
                        f"batchnorm {nid!r} has {node.channels} parameters but producer "
                        f"yields {produced} channels"
                    )
                channels[nid] = produced
        return channels

    # -- queries ---------------------------------------------------------------

    @property
    def nodes(self) -> Mapping[str, Node]:
        return self._nodes

    @property
    def layer_ids(self) -> list[str]:
        return [nid for nid in self.order if isinstance(self._nodes[nid], LayerNode)]

    @property
    def junction_ids(self) -> list[str]:
        return [nid for nid in self.order if isinstance(self._nodes[nid], JunctionNode)]

    @property
    def batchnorm_ids(self) -> list[str]:
        return [nid for nid in self.order if isinstance(self._nodes[nid], BatchNormNode)]

    def successors(self, nid: str) -> list[str]:
        if nid not in self._successors:
            raise GraphError(f"unknown node id {nid!r}")
        return list(self._successors[nid])

    def predecessors(self, nid: str) -> list[str]:
        if nid not in self._nodes:
            raise GraphError(f"unknown node id {nid!r}")
        return [ref for ref in self._nodes[nid].inputs if ref != GRAPH_INPUT]

    # -- rewriting ---------------------------------------------------------------

    def with_nodes(self, replacements: Mapping[str, Node]) -> "Graph":
        """New graph with some nodes swapped for rewritten versions."""
        for nid, node in replacements.items():
            if nid not in self._nodes:
                raise GraphError(f"cannot replace unknown node {nid!r}")
            if node.id != nid:
                raise GraphError(f"replacement for {nid!r} has mismatched id {node.id!r}")
        nodes = [replacements.get(nid, node) for nid, node in self._nodes.items()]
        return Graph(nodes, self.outputs, self.input_shape)

    # -- execution ---------------------------------------------------------------

    def execute(self, x: np.ndarray, taps: Iterable[str] | None = None) -> ExecResult:
        """Forward pass in topological order, tapping post-activation outputs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise GraphError(
                f"input shape {tuple(x.shape)} does not match graph input "
                f"(batch, {', '.join(map(str, self.input_shape))})"
            )
        tap_set = set(taps) if taps is not None else set()
        for tid in tap_set:
            if tid not in self._nodes:
                raise GraphError(f"cannot tap unknown node {tid!r}")
        values: dict[str, np.ndarray] = {GRAPH_INPUT: x}
        tapped: dict[str, np.ndarray] = {}
        for nid in self.order:
            node = self._nodes[nid]
            try:
                y = _compute(node, values)
            except ShapeMismatchError as exc:
                raise GraphError(f"node {nid!r}: {exc}") from exc
            values[nid] = y
            if nid in tap_set:
                tapped[nid] = y
        return ExecResult({oid: values[oid] for oid in self.outputs}, tapped)

    def run(self, x: np.ndarray) -> np.ndarray:
        """Forward pass of a single-output graph."""
        if len(self.outputs) != 1:
            raise GraphError(f"run() needs a single-output graph, got {self.outputs}")
        return self.execute(x).outputs[self.outputs[0]]


def _compute(node: Node, values: dict[str, np.ndarray]) -> np.ndarray:
    if isinstance(node, LayerNode):
        x = values[node.inputs[0]]
        kernel, bias = node.kernel, node.bias
        if node.quant is not None:
            if node.quant.weight is not None:
                kernel = quantize_dequantize(kernel, node.quant.weight)
            if node.quant.bias is not None:
                bias = quantize_dequantize(bias, node.quant.bias)
        if node.op == "conv":
            y = conv2d(x, kernel, bias, node.stride, node.padding)
        else:
            y = depthwise_conv2d(x, kernel, bias, node.stride, node.padding)
        y = apply_activation(y, node.activation)
        if node.quant is not None and node.quant.act is not None:
            y = quantize_dequantize(y, node.quant.act)
        return y
    if isinstance(node, JunctionNode):
        operands = [values[ref] for ref in node.inputs]
        if node.kind == "add":
            shapes = {op.shape for op in operands}
            if len(shapes) != 1:
                raise ShapeMismatchError(f"add operands have unequal shapes {sorted(shapes)}")
            out = operands[0].copy()
            for op in operands[1:]:
                out += op
            return out
        spatial = {op.shape[:3] for op in operands}
        if len(spatial) != 1:
            raise ShapeMismatchError(
                f"concat operands have unequal batch/spatial shapes {sorted(spatial)}"
            )
        return np.concatenate(operands, axis=-1)
    # BatchNormNode
    x = values[node.inputs[0]]
    scale = node.gamma / np.sqrt(node.var + node.eps)
    y = (x - node.mean) * scale + node.beta
    return apply_activation(y, node.activation)


def fold_batchnorm(graph: Graph) -> Graph:
    """Absorb every batchnorm into its producing layer; function-preserving.

    Requires each batchnorm to be the sole consumer of a linear-activation
    conv/depthwise layer; the batchnorm's activation moves onto the layer.
    """
    bn_ids = graph.batchnorm_ids
    if not bn_ids:
        return graph

    nodes: dict[str, Node] = dict(graph.nodes)
    rename: dict[str, str] = {}
    for bid in bn_ids:
        bn = nodes[bid]
        pid = bn.inputs[0]
        pid = rename.get(pid, pid)
        if pid == GRAPH_INPUT or not isinstance(nodes.get(pid), LayerNode):
            raise GraphError(
                f"unsupported topology: batchnorm {bid!r} does not follow a conv layer"
            )
        if graph.successors(bn.inputs[0]) != [bid]:
            raise GraphError(
                f"unsupported topology: layer {bn.inputs[0]!r} feeds nodes besides "
                f"batchnorm {bid!r}; folding would change them"
            )
        layer = nodes[pid]
        if layer.activation.kind != "linear":
            raise GraphError(
                f"unsupported topology: cannot fold batchnorm {bid!r} through "
                f"{layer.activation.kind} activation of layer {pid!r}"
            )
        scale = bn.gamma / np.sqrt(bn.var + bn.eps)
        if layer.op == "conv":
            kernel = layer.kernel * scale[None, None, None, :]
        else:
            kernel = normalize_depthwise_kernel(layer.kernel) * scale[None, None, :]
        bias = (layer.bias - bn.mean) * scale + bn.beta
        nodes[pid] = replace(
            layer, kernel=kernel, bias=bias, activation=bn.activation, bn_folded=True
        )
        del nodes[bid]
        rename[bid] = pid

    def resolve(ref: str) -> str:
        while ref in rename:
            ref = rename[ref]
        return ref

    rewired = []
    for node in nodes.values():
        new_inputs = tuple(resolve(ref) for ref in node.inputs)
        rewired.append(replace(node, inputs=new_inputs) if new_inputs != node.inputs else node)
    outputs = [resolve(oid) for oid in graph.outputs]
    return Graph(rewired, outputs, graph.input_shape)
