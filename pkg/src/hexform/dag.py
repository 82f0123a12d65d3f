"""Static multiplicative-depth analysis of a plaintext forward graph.

This is an independent check on the HE backends' runtime depth counters: it
walks the ``Tensor.parents`` graph of an ordinary float forward pass, treats
the embedding input as the only encrypted source, and propagates depth by
the leveled-HE rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_MULTIPLY = {"mul", "matmul"}
_RESET = {"relu"}


def _order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
        elif id(node) not in seen:
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents if id(p) not in seen)
    return order


@dataclass
class DagDepth:
    max_depth: int
    output_depth: int
    relu_sites: int


def graph_depth(output, source):
    """Depth of ``output`` where ``source`` is the single encrypted leaf.

    Encrypted-ness flows to every descendant of ``source``. A multiplication
    with at least one encrypted operand adds one; ReLU is a client round trip
    and restarts at zero; everything else keeps the deepest encrypted input.
    """
    depth = {id(source): 0}
    peak, relus = 0, 0
    for node in _order(output):
        if node is source:
            continue
        enc = [depth[id(p)] for p in node.parents if id(p) in depth]
        if not enc:
            continue
        if node.op in _RESET:
            d = 0
            relus += 1
        elif node.op in _MULTIPLY:
            d = max(enc) + 1
        else:
            d = max(enc)
        depth[id(node)] = d
        peak = max(peak, d)
    return DagDepth(peak, depth.get(id(output), 0), relus)


def model_depth(model, mask=None, embeddings=None):
    """Run the plaintext forward on ``embeddings`` (zeros by default) and analyse it."""
    cfg = model.config
    if embeddings is None:
        embeddings = np.zeros((cfg.max_seq_len, cfg.hidden_size))
    src = Tensor(embeddings)
    out = model(embeddings=src, mask=mask)
    return graph_depth(out, src)
