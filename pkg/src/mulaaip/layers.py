"""Network blocks: edge-aware graph attention, sum readout, normalised GCN."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor, xavier_uniform

LEAKY_SLOPE = 0.2


class EmptyGraphError(ValueError):
    pass


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, name: str, bias: bool = True):
        self.weight = Parameter(xavier_uniform((in_dim, out_dim), rng), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias", kind="bias") if bias else None

    def __call__(self, x) -> Tensor:
        out = ad.matmul(x, self.weight)
        return out if self.bias is None else ad.add(out, self.bias)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class GatBlock:
    """Single-head attention over in-neighbourhoods with edge features.

    logit_ij = LeakyReLU(a_s . Ts v_i + a_t . Tt v_j + a_e . Te e_ij)
    alpha_i. = softmax over j in N(i);  v_i' = sum_j alpha_ij Tt v_j
    """

    def __init__(self, in_dim: int, out_dim: int, edge_dim: int, rng: Rng, name: str,
                 leaky_slope: float = LEAKY_SLOPE):
        self.theta_s = Parameter(xavier_uniform((in_dim, out_dim), rng), f"{name}.theta_s")
        self.theta_t = Parameter(xavier_uniform((in_dim, out_dim), rng), f"{name}.theta_t")
        self.theta_e = Parameter(xavier_uniform((edge_dim, out_dim), rng), f"{name}.theta_e")
        self.a_s = Parameter(xavier_uniform((out_dim,), rng), f"{name}.a_s")
        self.a_t = Parameter(xavier_uniform((out_dim,), rng), f"{name}.a_t")
        self.a_e = Parameter(xavier_uniform((out_dim,), rng), f"{name}.a_e")
        self.leaky_slope = leaky_slope
        self.out_dim = out_dim

    def parameters(self):
        return [self.theta_s, self.theta_t, self.theta_e, self.a_s, self.a_t, self.a_e]


def gat_forward(block: GatBlock, node_feats, edges, edge_feats, return_attention: bool = False):
    """``edges`` rows are (i, j): message from j into target i."""
    v = ad.as_tensor(node_feats)
    n = v.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = ad.as_tensor(edge_feats)
    if e.shape[0] != edges.shape[0]:
        raise ad.ShapeMismatchError(f"{edges.shape[0]} edges but {e.shape[0]} edge feature rows")
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise ad.ShapeMismatchError("edge index out of range")
    tgt, src = edges[:, 0], edges[:, 1]

    ts = ad.matmul(v, block.theta_s)
    tt = ad.matmul(v, block.theta_t)
    if len(edges) == 0:
        out = ad.mul(tt, 0.0)
        return (out, ad.Tensor(np.zeros(0))) if return_attention else out
    score_s = ad.matmul(ts, block.a_s)
    score_t = ad.matmul(tt, block.a_t)
    score_e = ad.matmul(ad.matmul(e, block.theta_e), block.a_e)
    logits = ad.leaky_relu(ad.gather_rows(score_s, tgt) + ad.gather_rows(score_t, src) + score_e,
                           block.leaky_slope)
    alpha = ad.softmax_segmented(logits, tgt, n)
    msg = ad.mul(ad.gather_rows(tt, src), ad.reshape(alpha, (-1, 1)))
    out = ad.segment_sum(msg, tgt, n)
    return (out, alpha) if return_attention else out


def readout(node_feats, graph_ids=None, num_graphs: int | None = None) -> Tensor:
    """Sum over nodes; with ``graph_ids`` sums each graph of a disjoint union."""
    v = ad.as_tensor(node_feats)
    if v.shape[0] == 0:
        raise EmptyGraphError("readout of an empty graph")
    if graph_ids is None:
        return ad.sum_(v, axis=0)
    return ad.segment_sum(v, graph_ids, num_graphs)


def center_and_scale(H, s: float = 1.0, eps: float = 1e-12) -> Tensor:
    """Subtract the column mean, then rescale so the mean squared row norm is s^2."""
    H = ad.as_tensor(H)
    centered = ad.sub(H, ad.mean(H, axis=0, keepdims=True))
    ms = ad.mean(ad.sum_(ad.square(centered), axis=1))
    if float(ms.data) <= eps:
        return ad.mul(centered, 0.0)
    return ad.mul(ad.div(centered, ad.sqrt(ms)), s)


def normalized_adjacency(adjacency: np.ndarray, min_degree: float = 1.0) -> np.ndarray:
    """D^-1/2 A D^-1/2 with d_i = 1 + sum_{j != i} e_ij (i.e. the row sum with a unit self-loop).

    Degrees are floored at ``min_degree`` so strongly anti-correlated
    neighbourhoods cannot push a degree to zero or below.
    """
    A = np.array(adjacency, dtype=np.float64)
    np.fill_diagonal(A, 1.0)
    deg = np.maximum(A.sum(axis=1), min_degree)
    inv = 1.0 / np.sqrt(deg)
    return A * inv[:, None] * inv[None, :]


class NormAdaptiveGcn:
    def __init__(self, dims: list[int], rng: Rng, name: str, scale: float = 1.0, dropout: float = 0.0):
        self.thetas = [Parameter(xavier_uniform((a, b), rng), f"{name}.theta{k}")
                       for k, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.scale = scale
        self.dropout = dropout

    @property
    def num_layers(self) -> int:
        return len(self.thetas)

    def parameters(self):
        return list(self.thetas)


def gcn_forward(net: NormAdaptiveGcn, norm_adj: np.ndarray, node_embs, training: bool = False,
                rng: Rng | None = None) -> Tensor:
    """Propagate over a pre-normalised adjacency (see :func:`normalized_adjacency`).

    Between layers: center-and-scale, LeakyReLU, dropout.
    """
    h = ad.as_tensor(node_embs)
    if norm_adj.shape != (h.shape[0], h.shape[0]):
        raise ad.ShapeMismatchError(f"adjacency {norm_adj.shape} vs {h.shape[0]} nodes")
    for k, theta in enumerate(net.thetas):
        h = ad.matmul(ad.matmul(norm_adj, h), theta)
        if k < net.num_layers - 1:
            h = center_and_scale(h, net.scale)
            h = ad.leaky_relu(h, LEAKY_SLOPE)
            h = ad.dropout(h, net.dropout, rng, training)
    return h
