"""Model persistence (JSON manifest + raw little-endian blob) and synthetic
fixture networks.

The native format keeps the toolkit framework-free: a versioned manifest
describes topology and tensor placement, the blob concatenates IEEE-754
little-endian arrays, and an optional sidecar JSON carries quantization
specs and equalization scales.  Fixture networks are deterministic per seed
and can be shaped to any per-channel activation-extremum imbalance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .equalize import _structural_skip_reason, factorize_pair
from .errors import ModelFormatError
from .graph import BatchNormNode, Graph, JunctionNode, LayerNode, Node
from .quantsim import LayerQuant
from .tensors import LINEAR, RELU, RELU6, Activation, normalize_depthwise_kernel, prelu

FORMAT_VERSION = 1
DTYPES = {"f64": "<f8", "f32": "<f4"}

TOPOLOGIES = ("chain", "residual", "depthwise-chain")
FIXTURE_ACTIVATIONS = ("relu", "linear", "prelu", "relu6", "mixed")

# Sample-stream tags so calibration, held-out and correction sets never overlap.
STREAM_CALIBRATION = 1
STREAM_HELD_OUT = 2
STREAM_CORRECTION = 3

_SHAPING_PROBES = 64
_MAX_SHAPING_FACTOR = 1e4
_RELU6_LADDER_TOP = 12.0

# Split of the requested imbalance between raw output-channel ladders and
# consumer-compensated scalings ("natural gain control").  Keeping the
# compensated share small mirrors real networks, where the successor only
# mildly attenuates dominant channels.
_NATURAL_ATTENUATION_EXP = 0.3
_MAX_NATURAL_ATTENUATION = 2.5


# ---------------------------------------------------------------------------
# save / load


def _tensor_entries(graph: Graph) -> list[tuple[str, str, np.ndarray]]:
    """(tensor name, owning node, array) in deterministic node order."""
    entries = []
    for nid, node in graph.nodes.items():
        if isinstance(node, LayerNode):
            entries.append((f"{nid}.kernel", nid, node.kernel))
            entries.append((f"{nid}.bias", nid, node.bias))
        elif isinstance(node, BatchNormNode):
            for role in ("gamma", "beta", "mean", "var"):
                entries.append((f"{nid}.{role}", nid, getattr(node, role)))
    return entries


def save_model(
    graph: Graph,
    manifest_path: str | Path,
    weights_path: str | Path,
    dtype: str = "f64",
    metadata: dict | None = None,
    sidecar: dict | None = None,
    sidecar_path: str | Path | None = None,
) -> None:
    """Write manifest + weight blob (and optional sidecar annotations)."""
    if dtype not in DTYPES:
        raise ModelFormatError(f"unsupported dtype {dtype!r}; expected one of {list(DTYPES)}")
    if not graph.layer_ids:
        raise ModelFormatError("refusing to save a graph with no layers")

    blob = bytearray()
    table: dict[str, dict] = {}
    for name, _nid, arr in _tensor_entries(graph):
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        table[name] = {
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": len(blob),
            "nbytes": len(raw),
        }
        blob.extend(raw)

    nodes_json = []
    for nid, node in graph.nodes.items():
        if isinstance(node, LayerNode):
            nodes_json.append(
                {
                    "id": nid,
                    "op": node.op,
                    "inputs": list(node.inputs),
                    "activation": node.activation.to_json(),
                    "stride": list(node.stride),
                    "padding": node.padding,
                    "kernel": f"{nid}.kernel",
                    "bias": f"{nid}.bias",
                    "bn_folded": node.bn_folded,
                }
            )
        elif isinstance(node, JunctionNode):
            nodes_json.append({"id": nid, "op": node.kind, "inputs": list(node.inputs)})
        else:
            nodes_json.append(
                {
                    "id": nid,
                    "op": "batchnorm",
                    "inputs": list(node.inputs),
                    "eps": node.eps,
                    "activation": node.activation.to_json(),
                    **{role: f"{nid}.{role}" for role in ("gamma", "beta", "mean", "var")},
                }
            )

    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "nodes": nodes_json,
        "outputs": list(graph.outputs),
        "tensors": table,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "metadata": metadata or {},
    }
    Path(weights_path).write_bytes(bytes(blob))
    Path(manifest_path).write_text(json.dumps(manifest, indent=2) + "\n")
    if sidecar is not None:
        if sidecar_path is None:
            raise ModelFormatError("sidecar annotations given but no sidecar path")
        Path(sidecar_path).write_text(json.dumps(sidecar, indent=2) + "\n")


def _read_tensor(name: str, table: dict, blob: bytes) -> np.ndarray:
    entry = table.get(name)
    if entry is None:
        raise ModelFormatError(f"manifest references missing tensor {name!r}")
    dtype = entry["dtype"]
    if dtype not in DTYPES:
        raise ModelFormatError(f"tensor {name!r} has unsupported dtype {dtype!r}")
    offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
    if offset < 0 or offset + nbytes > len(blob):
        raise ModelFormatError(f"tensor {name!r} extends past the end of the weight blob")
    shape = tuple(int(s) for s in entry["shape"])
    itemsize = np.dtype(DTYPES[dtype]).itemsize
    if int(np.prod(shape)) * itemsize != nbytes:
        raise ModelFormatError(
            f"tensor {name!r}: shape {shape} disagrees with byte length {nbytes}"
        )
    arr = np.frombuffer(blob, dtype=DTYPES[dtype], count=int(np.prod(shape)),
                        offset=offset).reshape(shape)
    return np.asarray(arr, dtype=np.float64)


def load_model(
    manifest_path: str | Path,
    weights_path: str | Path,
    fold: bool = True,
    sidecar_path: str | Path | None = None,
) -> Graph:
    """Load a model; batchnorm nodes are folded away unless ``fold=False``."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported manifest version {manifest.get('format_version')!r}"
        )
    blob = Path(weights_path).read_bytes()
    recorded = manifest.get("blob_sha256")
    if recorded and hashlib.sha256(blob).hexdigest() != recorded:
        raise ModelFormatError("weight blob checksum does not match the manifest")

    table = manifest["tensors"]
    spans = sorted((int(e["offset"]), int(e["nbytes"]), n) for n, e in table.items())
    for (o1, n1, name1), (o2, _n2, name2) in zip(spans, spans[1:]):
        if o1 + n1 > o2:
            raise ModelFormatError(f"tensors {name1!r} and {name2!r} overlap in the blob")

    nodes: list[Node] = []
    for entry in manifest["nodes"]:
        nid, op = entry["id"], entry["op"]
        inputs = tuple(entry["inputs"])
        if op in ("conv", "depthwise"):
            nodes.append(
                LayerNode(
                    id=nid,
                    op=op,
                    inputs=inputs,
                    kernel=_read_tensor(entry["kernel"], table, blob),
                    bias=_read_tensor(entry["bias"], table, blob),
                    activation=Activation.from_json(entry["activation"]),
                    stride=tuple(entry.get("stride", (1, 1))),
                    padding=entry.get("padding", "valid"),
                    bn_folded=bool(entry.get("bn_folded", False)),
                )
            )
        elif op in ("add", "concat"):
            nodes.append(JunctionNode(id=nid, kind=op, inputs=inputs))
        elif op == "batchnorm":
            nodes.append(
                BatchNormNode(
                    id=nid,
                    inputs=inputs,
                    gamma=_read_tensor(entry["gamma"], table, blob),
                    beta=_read_tensor(entry["beta"], table, blob),
                    mean=_read_tensor(entry["mean"], table, blob),
                    var=_read_tensor(entry["var"], table, blob),
                    eps=float(entry.get("eps", 1e-5)),
                    activation=Activation.from_json(
                        entry.get("activation", {"kind": "linear"})
                    ),
                )
            )
        else:
            raise ModelFormatError(f"node {nid!r} has unknown op {op!r}")

    graph = Graph(nodes, manifest["outputs"], tuple(manifest["input_shape"]))
    if fold:
        from .graph import fold_batchnorm

        graph = fold_batchnorm(graph)

    if sidecar_path is not None:
        sidecar = json.loads(Path(sidecar_path).read_text())
        quant = sidecar.get("quant", {}).get("layers", {})
        updates = {}
        for lid, q in quant.items():
            node = graph.nodes.get(lid)
            if not isinstance(node, LayerNode):
                raise ModelFormatError(f"sidecar annotates unknown layer {lid!r}")
            updates[lid] = replace(node, quant=LayerQuant.from_json(q))
        if updates:
            graph = graph.with_nodes(updates)
    return graph


# ---------------------------------------------------------------------------
# fixtures


@dataclass(frozen=True)
class FixtureSpec:
    """Deterministic synthetic network + sample stream description."""

    topology: str = "chain"
    layers: int = 5
    channels: int = 8
    imbalance: float = 1.0
    seed: int = 0
    activation: str = "relu"
    height: int = 8
    width: int = 8
    in_channels: int = 3

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ModelFormatError(f"unknown topology {self.topology!r}")
        if self.activation not in FIXTURE_ACTIVATIONS:
            raise ModelFormatError(f"unknown fixture activation {self.activation!r}")
        if self.layers < 2:
            raise ModelFormatError("fixtures need at least 2 layers")
        if self.topology == "residual" and self.layers < 4:
            raise ModelFormatError("residual fixtures need at least 4 layers")
        if self.imbalance < 1.0:
            raise ModelFormatError("imbalance factor must be >= 1")


@dataclass
class Fixture:
    graph: Graph
    spec: FixtureSpec

    def samples(self, count: int, stream: int = STREAM_CALIBRATION) -> Iterator[np.ndarray]:
        return fixture_samples(self.graph.input_shape, self.spec.seed, count, stream)


def fixture_samples(
    input_shape: tuple[int, int, int], seed: int, count: int, stream: int = STREAM_CALIBRATION
) -> Iterator[np.ndarray]:
    """Deterministic image-like inputs, uniform on [0, 1)."""
    rng = np.random.default_rng([seed, stream])
    h, w, c = input_shape
    for _ in range(count):
        yield rng.random((1, h, w, c))


def _fixture_activation(spec: FixtureSpec, index: int, channels: int, rng) -> Activation:
    kind = spec.activation
    if kind == "mixed":
        kind = ("relu", "prelu", "linear")[index % 3]
    if kind == "relu":
        return RELU
    if kind == "linear":
        return LINEAR
    if kind == "relu6":
        return RELU6
    return prelu(np.round(rng.uniform(0.05, 0.5, channels), 3))


def _base_kernel(rng, shape, fan: int) -> np.ndarray:
    """Sign-random weights with tightly bounded magnitudes.

    Keeping |w| within a narrow band means no single entry can dominate a
    kernel slice, so per-input-channel extrema stay balanced under any
    later per-channel rescaling (like the implicit gain control of trained
    networks, where no weight is orders of magnitude above its peers)."""
    mag = rng.uniform(0.75, 1.25, shape) / np.sqrt(fan)
    return mag * rng.choice((-1.0, 1.0), shape)


def _conv_layer(spec, rng, nid, producer, c_in, c_out, index, kh=3) -> LayerNode:
    kernel = _base_kernel(rng, (kh, kh, c_in, c_out), kh * kh * c_in)
    bias = rng.uniform(0.01, 0.1, c_out)
    return LayerNode(
        id=nid,
        op="conv",
        inputs=(producer,),
        kernel=kernel,
        bias=bias,
        activation=_fixture_activation(spec, index, c_out, rng),
        padding="same",
    )


def _depthwise_layer(spec, rng, nid, producer, c, index) -> LayerNode:
    kernel = _base_kernel(rng, (3, 3, c), 9)
    bias = rng.uniform(0.01, 0.1, c)
    return LayerNode(
        id=nid,
        op="depthwise",
        inputs=(producer,),
        kernel=kernel,
        bias=bias,
        activation=_fixture_activation(spec, index, c, rng),
        padding="same",
    )


def _base_graph(spec: FixtureSpec, rng) -> Graph:
    c = spec.channels
    nodes: list[Node] = []
    if spec.topology == "chain":
        producer = "input"
        for i in range(spec.layers):
            node = _conv_layer(spec, rng, f"c{i}", producer, spec.in_channels if i == 0 else c,
                               c, i)
            nodes.append(node)
            producer = node.id
        return Graph(nodes, [producer], (spec.height, spec.width, spec.in_channels))
    if spec.topology == "depthwise-chain":
        producer = "input"
        for i in range(spec.layers):
            if i == 0:
                node = _conv_layer(spec, rng, f"c{i}", producer, spec.in_channels, c, i)
            elif i % 2 == 1:
                node = _depthwise_layer(spec, rng, f"d{i}", producer, c, i)
            else:
                node = _conv_layer(spec, rng, f"c{i}", producer, c, c, i, kh=1)
            nodes.append(node)
            producer = node.id
        return Graph(nodes, [producer], (spec.height, spec.width, spec.in_channels))
    # residual: ... -> cK -> cK+1 -> add(cK, cK+1) -> ...
    producer = "input"
    join_at = spec.layers // 2
    skip_from = None
    for i in range(spec.layers):
        node = _conv_layer(spec, rng, f"c{i}", producer, spec.in_channels if i == 0 else c, c, i)
        nodes.append(node)
        producer = node.id
        if i == join_at - 1:
            skip_from = node.id
        if i == join_at:
            nodes.append(JunctionNode(id="add0", kind="add", inputs=(skip_from, node.id)))
            producer = "add0"
    return Graph(nodes, [producer], (spec.height, spec.width, spec.in_channels))


def _abs_channel_max(y: np.ndarray) -> np.ndarray:
    return np.abs(y.reshape(-1, y.shape[-1])).max(axis=0)


def _scale_out_channels(graph: Graph, lid: str, factors: np.ndarray) -> Graph:
    """Multiply a layer's output channels in place (changes the function)."""
    node = graph.nodes[lid]
    if node.op == "conv":
        kernel = node.kernel * factors[None, None, None, :]
    else:
        kernel = normalize_depthwise_kernel(node.kernel) * factors[None, None, :]
    return graph.with_nodes({lid: replace(node, kernel=kernel, bias=node.bias * factors)})


def _bimodal_ladder(top: float, imbalance: float, channels: int, rng) -> np.ndarray:
    """Target extrema: a dominant cluster exactly at ``top`` and a weak
    cluster ``imbalance`` below it, randomly assigned to channels.  Dominant
    channels set the quantization range; the weak cluster carries the noise
    penalty equalization removes."""
    if imbalance <= 1.0 or channels < 2:
        return np.full(channels, top)
    n_top = max(1, channels // 2)
    weak_top = min(2.0, imbalance) * top / imbalance
    values = np.concatenate(
        [np.full(n_top, top), np.geomspace(top / imbalance, weak_top, channels - n_top)]
    )
    return values[rng.permutation(channels)]


def _shape_imbalance(graph: Graph, spec: FixtureSpec, rng) -> Graph:
    """Set each scalable layer's per-channel activation extrema onto a
    bimodal ladder spanning the requested imbalance ratio.

    Most of the ratio comes from plain output-channel scaling; a bounded
    remainder is applied as compensated factorizations that amplify dominant
    channels while shrinking the consumer weights that read them, mirroring
    the implicit gain control seen in trained networks.
    """
    probe = np.concatenate(
        list(fixture_samples(graph.input_shape, spec.seed, _SHAPING_PROBES)), axis=0
    )
    layer_ids = [lid for lid in graph.layer_ids if _structural_skip_reason(graph, lid) is None]
    if not layer_ids:
        return graph
    rho = min(spec.imbalance**_NATURAL_ATTENUATION_EXP, _MAX_NATURAL_ATTENUATION)
    base_ratio = spec.imbalance / rho

    # Raw ladders change the function downstream, so re-probe layer by layer.
    for lid in layer_ids:
        _, taps = graph.execute(probe, taps=[lid])
        m = _abs_channel_max(taps[lid])
        top = (_RELU6_LADDER_TOP / rho) if spec.activation == "relu6" else float(m.max())
        if top <= 0.0:
            continue
        ladder = _bimodal_ladder(top, base_ratio, m.shape[0], rng)
        with np.errstate(divide="ignore", invalid="ignore"):
            factors = np.where(m > 0.0, ladder / m, 1.0)
        factors = np.clip(factors, 1.0 / _MAX_SHAPING_FACTOR, _MAX_SHAPING_FACTOR)
        graph = _scale_out_channels(graph, lid, factors)
        dead = m <= 0.0
        if dead.any():
            # Revive channels the base net never activates: zero their kernel
            # and set a constant bias exactly on the ladder.
            node = graph.nodes[lid]
            bias = node.bias.copy()
            bias[dead] = ladder[dead]
            kernel = (
                node.kernel.copy()
                if node.op == "conv"
                else normalize_depthwise_kernel(node.kernel).copy()
            )
            kernel[..., dead] = 0.0
            graph = graph.with_nodes({lid: replace(node, kernel=kernel, bias=bias)})

    if rho <= 1.0:
        return graph
    # Compensated scalings preserve the function; one probe covers all layers.
    _, taps = graph.execute(probe, taps=layer_ids)
    for lid in layer_ids:
        m = _abs_channel_max(taps[lid])
        if m.max() <= 0.0:
            continue
        dominant = m >= m.max() / np.sqrt(max(spec.imbalance, 1.0 + 1e-9))
        graph = factorize_pair(graph, lid, np.where(dominant, rho, 1.0))
    return graph


def make_fixture(spec: FixtureSpec) -> Fixture:
    """Build a deterministic pseudorandom network for the given spec."""
    rng = np.random.default_rng([spec.seed, 0])
    relu6 = spec.activation == "relu6"
    base_spec = spec if not relu6 else FixtureSpec(
        topology=spec.topology,
        layers=spec.layers,
        channels=spec.channels,
        imbalance=spec.imbalance,
        seed=spec.seed,
        activation="linear",
        height=spec.height,
        width=spec.width,
        in_channels=spec.in_channels,
    )
    graph = _base_graph(base_spec, rng)
    graph = _shape_imbalance(graph, spec, rng)
    if relu6:
        graph = graph.with_nodes(
            {lid: replace(graph.nodes[lid], activation=RELU6) for lid in graph.layer_ids}
        )
    return Fixture(graph, spec)
