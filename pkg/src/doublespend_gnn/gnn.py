"""Two-layer graph neural network classifier written directly against numpy.

Supports GCN, GraphSAGE (mean aggregator) and single-head GAT layers.  Each
layer is followed by ReLU and inverted dropout; node embeddings go through a
row-wise softmax, are averaged over nodes and fed to a dense two-way head.
Gradients are derived by hand; ``grad_check`` compares them with central
finite differences.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

from doublespend_gnn.errors import InvalidInputError, InvalidParametersError, ShapeError
from doublespend_gnn.topology import Topology

LEAKY_SLOPE = 0.2
N_CLASSES = 2
CHECKPOINT_VERSION = 1


class LayerKind(str, enum.Enum):
    GCN = "gcn"
    SAGE = "graphsage"
    GAT = "gat"


# --------------------------------------------------------------------------
# graph operators


def normalize_adjacency(t: Topology) -> sp.csr_matrix:
    """Symmetric normalisation D^-1/2 (A + I) D^-1/2 with D the degree of A + I."""
    a_hat = (t.csr + sp.identity(t.node_count, format="csr")).tocsr()
    a_hat.sort_indices()
    inv_sqrt = 1.0 / np.sqrt(np.asarray(a_hat.sum(axis=1)).ravel())
    return sp.csr_matrix(sp.diags(inv_sqrt) @ a_hat @ sp.diags(inv_sqrt))


def mean_aggregator(t: Topology) -> sp.csr_matrix:
    """Row-normalised adjacency; rows of isolated nodes stay zero."""
    deg = t.degrees.astype(np.float64)
    scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(sp.diags(scale) @ t.csr)


@dataclass
class GraphData:
    """Per-graph operators shared by every forward and backward pass."""

    n: int
    norm_adj: sp.csr_matrix
    mean_agg: sp.csr_matrix
    mean_agg_t: sp.csr_matrix
    # A + I in CSR order, used for attention
    att_indptr: np.ndarray
    att_src: np.ndarray
    att_tgt: np.ndarray

    @classmethod
    def from_topology(cls, t: Topology) -> "GraphData":
        a_hat = (t.csr + sp.identity(t.node_count, format="csr")).tocsr()
        a_hat.sort_indices()
        tgt = np.repeat(np.arange(t.node_count), np.diff(a_hat.indptr))
        mean_agg = mean_aggregator(t)
        return cls(t.node_count, normalize_adjacency(t), mean_agg, mean_agg.T.tocsr(),
                   a_hat.indptr.copy(), a_hat.indices.astype(np.int64), tgt)


def _graph(g: GraphData | Topology) -> GraphData:
    return g if isinstance(g, GraphData) else GraphData.from_topology(g)


def _check_shapes(x: np.ndarray, n: int, *weights: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != n:
        raise ShapeError(f"expected features with {n} rows, got shape {x.shape}")
    for w in weights:
        if w.ndim != 2 or w.shape[0] != x.shape[1]:
            raise ShapeError(f"weight shape {w.shape} incompatible with features {x.shape}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# --------------------------------------------------------------------------
# layers: each *_layer returns (pre-activation output, cache)


def _gcn_layer(g: GraphData, x: np.ndarray, w: np.ndarray):
    ax = g.norm_adj @ x
    return ax @ w, ax


def _gcn_layer_back(g: GraphData, cache, w: np.ndarray, dz: np.ndarray, need_dx: bool = True):
    ax = cache
    dw = ax.T @ dz
    # the normalised adjacency is symmetric
    dx = g.norm_adj @ (dz @ w.T) if need_dx else None
    return dx, {"W": dw}


def _sage_layer(g: GraphData, x: np.ndarray, w_self: np.ndarray, w_neigh: np.ndarray):
    m = g.mean_agg @ x
    return x @ w_self + m @ w_neigh, (x, m)


def _sage_layer_back(g: GraphData, cache, w_self, w_neigh, dz, need_dx: bool = True):
    x, m = cache
    dx = dz @ w_self.T + g.mean_agg_t @ (dz @ w_neigh.T) if need_dx else None
    return dx, {"W_self": x.T @ dz, "W_neigh": m.T @ dz}


def _gat_layer(g: GraphData, x: np.ndarray, w: np.ndarray, a: np.ndarray):
    d = w.shape[1]
    if a.shape != (2 * d,):
        raise ShapeError(f"attention vector must have shape ({2 * d},), got {a.shape}")
    z = x @ w
    s_tgt = z @ a[:d]
    s_src = z @ a[d:]
    e = s_tgt[g.att_tgt] + s_src[g.att_src]
    logits = np.where(e > 0, e, LEAKY_SLOPE * e)
    starts = g.att_indptr[:-1]
    shift = np.maximum.reduceat(logits, starts)
    ex = np.exp(logits - shift[g.att_tgt])
    alpha = ex / np.add.reduceat(ex, starts)[g.att_tgt]
    att = sp.csr_matrix((alpha, g.att_src, g.att_indptr), shape=(g.n, g.n))
    return att @ z, (x, z, e, alpha, att)


def _gat_layer_back(g: GraphData, cache, w, a, dout, need_dx: bool = True):
    x, z, e, alpha, att = cache
    d = w.shape[1]
    dz = att.T @ dout
    dalpha = np.einsum("ij,ij->i", dout[g.att_tgt], z[g.att_src])
    weighted = np.add.reduceat(alpha * dalpha, g.att_indptr[:-1])
    dlogit = alpha * (dalpha - weighted[g.att_tgt])
    de = np.where(e > 0, dlogit, LEAKY_SLOPE * dlogit)
    ds_tgt = np.add.reduceat(de, g.att_indptr[:-1])
    ds_src = np.bincount(g.att_src, weights=de, minlength=g.n)
    da = np.concatenate([z.T @ ds_tgt, z.T @ ds_src])
    dz = dz + np.outer(ds_tgt, a[:d]) + np.outer(ds_src, a[d:])
    return (dz @ w.T if need_dx else None), {"W": x.T @ dz, "a": da}


def attention_coefficients(g: GraphData | Topology, x: np.ndarray, w: np.ndarray,
                           a: np.ndarray) -> sp.csr_matrix:
    """Attention matrix whose row v holds alpha_{vu} over N(v) plus v itself."""
    g = _graph(g)
    _check_shapes(x, g.n, w)
    return _gat_layer(g, x, w, a)[1][4]


def gcn_forward(norm_adj: sp.spmatrix, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    _check_shapes(x, norm_adj.shape[0], w)
    return relu(norm_adj @ x @ w)


def sage_forward(g: GraphData | Topology, x: np.ndarray, w_self: np.ndarray,
                 w_neigh: np.ndarray) -> np.ndarray:
    g = _graph(g)
    _check_shapes(x, g.n, w_self, w_neigh)
    if w_self.shape != w_neigh.shape:
        raise ShapeError("W_self and W_neigh must have the same shape")
    return relu(_sage_layer(g, x, w_self, w_neigh)[0])


def gat_forward(g: GraphData | Topology, x: np.ndarray, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    g = _graph(g)
    _check_shapes(x, g.n, w)
    return relu(_gat_layer(g, x, w, a)[0])


# --------------------------------------------------------------------------
# readout, dropout, loss


def softmax_rows(h: np.ndarray) -> np.ndarray:
    ex = np.exp(h - h.max(axis=1, keepdims=True))
    return ex / ex.sum(axis=1, keepdims=True)


def pooled_readout(h: np.ndarray) -> np.ndarray:
    """Mean over nodes of the per-node softmax across embedding dimensions."""
    if h.ndim != 2 or h.shape[0] == 0:
        raise InvalidInputError("readout needs at least one node embedding")
    return softmax_rows(h).mean(axis=0)


def readout_classify(h: np.ndarray, head_w: np.ndarray, head_b: np.ndarray) -> np.ndarray:
    pooled = pooled_readout(h)
    if head_w.shape != (h.shape[1], N_CLASSES) or head_b.shape != (N_CLASSES,):
        raise ShapeError(f"head shapes {head_w.shape}, {head_b.shape} do not match width {h.shape[1]}")
    return pooled @ head_w + head_b


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= p < 1:
        raise InvalidParametersError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def apply_dropout(h: np.ndarray, p: float, seed: int | np.random.Generator | None = None,
                  training: bool = True) -> np.ndarray:
    """Inverted dropout; identity when ``training`` is false or ``p`` is zero."""
    if not 0 <= p < 1:
        raise InvalidParametersError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return h
    return h * dropout_mask(h.shape, p, np.random.default_rng(seed))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits)
    return logits - (m + np.log(np.sum(np.exp(logits - m))))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[int(label)])


def predict_label(logits: np.ndarray) -> int:
    """Class 1 (no attack) only when its logit is strictly larger; ties go to class 0."""
    return int(logits[1] > logits[0])


# --------------------------------------------------------------------------
# model


def _layer_blocks(kind: LayerKind) -> tuple[str, ...]:
    return {LayerKind.GCN: ("W",), LayerKind.SAGE: ("W_self", "W_neigh"),
            LayerKind.GAT: ("W", "a")}[kind]


def block_names(kind: LayerKind) -> list[str]:
    names = [f"layer{i}.{b}" for i in (1, 2) for b in _layer_blocks(kind)]
    return names + ["head.W", "head.b"]


@dataclass
class ModelParams:
    layer_kind: LayerKind
    d_in: int
    d_h: int
    dropout_p: float
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.layer_kind, self.d_in, self.d_h, self.dropout_p,
                           {k: v.copy() for k, v in self.blocks.items()})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, fan_in in ((1, self.d_in), (2, self.d_h)):
            for b in _layer_blocks(self.layer_kind):
                shapes[f"layer{i}.{b}"] = (2 * self.d_h,) if b == "a" else (fan_in, self.d_h)
        shapes["head.W"] = (self.d_h, N_CLASSES)
        shapes["head.b"] = (N_CLASSES,)
        return shapes

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks.values())


def init_params(kind: LayerKind | str, d_in: int = 12, d_h: int = 32, dropout_p: float = 0.5,
                seed: int | np.random.Generator = 0, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights, zero head bias."""
    kind = LayerKind(kind)
    if not 0 <= dropout_p < 1:
        raise InvalidParametersError(f"dropout probability must be in [0, 1), got {dropout_p}")
    rng = np.random.default_rng(seed)
    params = ModelParams(kind, d_in, d_h, dropout_p)
    for name, shape in params.expected_shapes().items():
        if name == "head.b":
            params.blocks[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in, fan_out = (shape[0], 1) if len(shape) == 1 else shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.blocks[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


@dataclass
class ForwardCache:
    graph: GraphData
    x: np.ndarray
    layer_caches: list
    pre: list[np.ndarray]  # pre-activation outputs per layer
    masks: list[np.ndarray | None]
    h_out: np.ndarray
    probs: np.ndarray  # row softmax of the final embeddings
    pooled: np.ndarray
    logits: np.ndarray


def forward(params: ModelParams, g: GraphData | Topology, x: np.ndarray, training: bool = False,
            rng: np.random.Generator | int | None = None) -> ForwardCache:
    """Run the network on one graph; dropout masks are drawn only when ``training``."""
    g = _graph(g)
    x = np.asarray(x, dtype=params.blocks["head.W"].dtype)
    if x.ndim != 2 or x.shape != (g.n, params.d_in):
        raise ShapeError(f"expected features of shape ({g.n}, {params.d_in}), got {x.shape}")
    drop = training and params.dropout_p > 0
    if drop:
        rng = np.random.default_rng(rng)
    h = x
    caches, pres, masks = [], [], []
    for i in (1, 2):
        ws = [params.blocks[f"layer{i}.{b}"] for b in _layer_blocks(params.layer_kind)]
        if params.layer_kind is LayerKind.GCN:
            z, c = _gcn_layer(g, h, *ws)
        elif params.layer_kind is LayerKind.SAGE:
            z, c = _sage_layer(g, h, *ws)
        else:
            z, c = _gat_layer(g, h, *ws)
        h = relu(z)
        mask = dropout_mask(h.shape, params.dropout_p, rng) if drop else None
        if mask is not None:
            h = h * mask
        caches.append(c)
        pres.append(z)
        masks.append(mask)
    probs = softmax_rows(h)
    pooled = probs.mean(axis=0)
    logits = pooled @ params.blocks["head.W"] + params.blocks["head.b"]
    return ForwardCache(g, x, caches, pres, masks, h, probs, pooled, logits)


def backward(params: ModelParams, cache: ForwardCache, label: int) -> dict[str, np.ndarray]:
    """Gradients of the cross-entropy loss for every parameter block."""
    logits = cache.logits
    p = np.exp(log_softmax(logits))
    dlogits = p.copy()
    dlogits[int(label)] -= 1.0
    grads = {"head.W": np.outer(cache.pooled, dlogits), "head.b": dlogits}
    dpooled = params.blocks["head.W"] @ dlogits
    ds = np.broadcast_to(dpooled / cache.graph.n, cache.probs.shape)
    s = cache.probs
    dh = s * (ds - (s * ds).sum(axis=1, keepdims=True))
    for i in (2, 1):
        idx = i - 1
        if cache.masks[idx] is not None:
            dh = dh * cache.masks[idx]
        dz = dh * (cache.pre[idx] > 0)
        names = _layer_blocks(params.layer_kind)
        ws = [params.blocks[f"layer{i}.{b}"] for b in names]
        back = {LayerKind.GCN: _gcn_layer_back, LayerKind.SAGE: _sage_layer_back,
                LayerKind.GAT: _gat_layer_back}[params.layer_kind]
        dh, g = back(cache.graph, cache.layer_caches[idx], *ws, dz, need_dx=i > 1)
        for b, v in g.items():
            grads[f"layer{i}.{b}"] = v
    return {name: grads[name] for name in block_names(params.layer_kind)}


def loss_and_grads(params: ModelParams, g: GraphData | Topology, x: np.ndarray, label: int,
                   training: bool = False, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    cache = forward(params, g, x, training, rng)
    return cross_entropy(cache.logits, label), backward(params, cache, label)


def grad_check(params: ModelParams, g: GraphData | Topology, x: np.ndarray, label: int,
               h: float = 1e-5, samples: int = 50, seed: int = 0) -> float:
    """Max relative gap between analytic and central-difference gradients.

    Up to ``samples`` coordinates are drawn per block (all of them for small
    blocks).  Dropout is disabled.
    """
    g = _graph(g)
    _, grads = loss_and_grads(params, g, x, label)
    rng = np.random.default_rng(seed)
    probe = params.copy()
    worst = 0.0
    for name, block in probe.blocks.items():
        size = block.size
        coords = np.arange(size) if size <= samples else rng.choice(size, samples, replace=False)
        flat = block.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = cross_entropy(forward(probe, g, x).logits, label)
            flat[c] = orig - h
            down = cross_entropy(forward(probe, g, x).logits, label)
            flat[c] = orig
            fd = (up - down) / (2 * h)
            an = grads[name].reshape(-1)[c]
            worst = max(worst, abs(an - fd) / max(1e-8, abs(an) + abs(fd)))
    return worst


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, blocks: dict[str, np.ndarray], lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in blocks.items()},
                   {k: np.zeros_like(v) for k, v in blocks.items()}, 0, lr, beta1, beta2, eps)


def adam_step(blocks: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if state.lr <= 0:
        raise InvalidParametersError("learning rate must be positive")
    if set(grads) != set(blocks):
        raise ShapeError("gradient blocks do not match parameter blocks")
    t = state.t + 1
    new_blocks, new_m, new_v = {}, {}, {}
    for k, w in blocks.items():
        gk = grads[k]
        if gk.shape != w.shape or state.m[k].shape != w.shape:
            raise ShapeError(f"shape mismatch for block {k}: {gk.shape} vs {w.shape}")
        m = state.beta1 * state.m[k] + (1 - state.beta1) * gk
        v = state.beta2 * state.v[k] + (1 - state.beta2) * gk * gk
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_blocks[k] = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_blocks, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path, config: dict[str, Any] | None = None) -> None:
    """Write a JSON checkpoint; floats are stored with round-trip precision."""
    doc = {
        "format": "doublespend_gnn.checkpoint",
        "version": CHECKPOINT_VERSION,
        "layer_kind": params.layer_kind.value,
        "d_in": params.d_in,
        "d_h": params.d_h,
        "dropout_p": params.dropout_p,
        "dtype": str(params.blocks["head.W"].dtype),
        "blocks": [{"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in params.blocks.items()],
        "config": config or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != "doublespend_gnn.checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
    dtype = np.dtype(doc["dtype"])
    params = ModelParams(LayerKind(doc["layer_kind"]), doc["d_in"], doc["d_h"], doc["dropout_p"])
    for b in doc["blocks"]:
        params.blocks[b["name"]] = np.asarray(b["values"], dtype=dtype).reshape(b["shape"])
    expected = params.expected_shapes()
    if {k: v.shape for k, v in params.blocks.items()} != expected or list(params.blocks) != list(expected):
        raise InvalidInputError(f"checkpoint {path} has inconsistent block shapes")
    return params, doc["config"]
