import numpy as np
import pytest

from equant.graph import Graph, LayerNode
from equant.tensors import LINEAR, RELU


def conv_node(nid, producer, kernel, bias=None, activation=RELU, padding="same", op="conv"):
    kernel = np.asarray(kernel, dtype=np.float64)
    if bias is None:
        c_out = kernel.shape[-1] if op == "conv" else kernel.shape[2]
        bias = np.zeros(c_out)
    return LayerNode(
        id=nid,
        op=op,
        inputs=(producer,),
        kernel=kernel,
        bias=np.asarray(bias, dtype=np.float64),
        activation=activation,
        padding=padding,
    )


def chain_graph(kernels, input_shape, activation=RELU, biases=None, padding="same"):
    """Conv chain from a list of (kh, kw, cin, cout) kernels."""
    nodes = []
    producer = "input"
    for i, k in enumerate(kernels):
        bias = None if biases is None else biases[i]
        node = conv_node(f"c{i}", producer, k, bias, activation, padding)
        nodes.append(node)
        producer = node.id
    return Graph(nodes, [producer], input_shape)


def random_chain(rng, layers=3, channels=4, input_shape=(6, 6, 3), activation=RELU):
    kernels = []
    cin = input_shape[2]
    for _ in range(layers):
        kernels.append(rng.normal(0, 0.4, (3, 3, cin, channels)))
        cin = channels
    biases = [rng.normal(0, 0.1, channels) for _ in range(layers)]
    return chain_graph(kernels, input_shape, activation, biases)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
