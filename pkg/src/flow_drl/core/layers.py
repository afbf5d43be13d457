"""
Dense layers and MLPs on top of diffcore.

Weights are looked up by name in a mapping that is either a graph binding
(name -> Node) or a plain ParamSet.values() dict, so the same forward code
serves training graphs and eager evaluation.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .diffcore import Operand, ParamSet, add, broadcast, matmul, relu, shape_of


def init_dense(
    params: ParamSet,
    prefix: str,
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    zero: bool = False,
) -> None:
    """He-uniform weights, zero bias. `zero=True` gives an all-zero output head."""
    if zero:
        weight = np.zeros((fan_in, fan_out))
    else:
        limit = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    params.add(f"{prefix}.w", weight)
    params.add(f"{prefix}.b", np.zeros(fan_out))


def dense(x: Operand, weights: Mapping[str, Operand], prefix: str) -> Operand:
    """Affine map x @ w + b over the last axis.

    Args:
        x: Input of shape (..., fan_in)
        weights: Name -> weight mapping holding `{prefix}.w` (fan_in, fan_out)
            and `{prefix}.b` (fan_out,)
        prefix: Layer name

    Returns:
        Output of shape (..., fan_out); a Node when any operand is one
    """
    w = weights[f"{prefix}.w"]
    b = weights[f"{prefix}.b"]
    out_shape = tuple(shape_of(x)[:-1]) + (shape_of(w)[1],)
    return add(matmul(x, w), broadcast(b, out_shape))


def init_mlp(
    params: ParamSet,
    prefix: str,
    sizes: Sequence[int],
    rng: np.random.Generator,
    zero_last: bool = False,
) -> None:
    """sizes = [in, hidden..., out]; one dense layer per consecutive pair."""
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        last = i == n_layers - 1
        init_dense(params, f"{prefix}{i}", sizes[i], sizes[i + 1], rng, zero=zero_last and last)


def mlp(x: Operand, weights: Mapping[str, Operand], prefix: str, n_layers: int) -> Operand:
    """ReLU between layers, linear output."""
    h = x
    for i in range(n_layers):
        h = dense(h, weights, f"{prefix}{i}")
        if i < n_layers - 1:
            h = relu(h)
    return h
