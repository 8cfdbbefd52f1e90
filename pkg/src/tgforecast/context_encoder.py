"""Polyline subgraphs followed by one global self-attention pass."""
from __future__ import annotations

import numpy as np

from .scene import VECTOR_WIDTH
from .substrate import Params, block, init_attention, init_mlp2, masked_self_attention, mlp2
from .substrate import tensor as T
from .substrate.tensor import Var


def init_context_params(store: Params, d: int, n_layers: int, rng: np.random.Generator, prefix: str = "ctx") -> None:
    half = d // 2
    width = VECTOR_WIDTH
    for layer in range(n_layers):
        init_mlp2(store, f"{prefix}.sub{layer}", width, half, half, rng)
        width = d
    init_attention(store, f"{prefix}.global", d, rng)


def encode_packed(vec_feats, seg_starts: np.ndarray, p: Params, n_layers: int) -> Var:
    """Encode packed vectors (M, F) grouped into contiguous non-empty polylines -> (S, d) unit rows."""
    x = T.as_var(vec_feats)
    seg_starts = np.asarray(seg_starts, dtype=np.int64)
    m = x.shape[0]
    for layer in range(n_layers):
        h = mlp2(x, block(p, f"sub{layer}"))
        pooled = T.segment_broadcast(T.segment_max(h, seg_starts), seg_starts, m)
        x = T.concat([h, pooled], axis=-1)
    return T.l2_normalize(T.segment_max(x, seg_starts))


def encode_polylines(feats, vec_mask: np.ndarray, p: Params, n_layers: int) -> Var:
    """Encode padded polylines (..., V, F) with vector mask (..., V) into (..., d) unit rows.

    Polylines without any vector encode to the zero row.
    """
    feats = np.asarray(feats, dtype=np.float64)
    vec_mask = np.asarray(vec_mask, dtype=bool)
    lead = vec_mask.shape[:-1]
    flat_mask = vec_mask.reshape(-1, vec_mask.shape[-1])
    counts = flat_mask.sum(axis=1)
    rows = np.flatnonzero(counts > 0)
    packed = feats.reshape(-1, vec_mask.shape[-1], feats.shape[-1])[flat_mask]
    starts = np.concatenate([[0], np.cumsum(counts[rows])[:-1]]).astype(np.int64)
    d = p["sub0.fc2.W"].shape[0] * 2
    if rows.size == 0:
        return T.Var(np.zeros(lead + (d,)))
    enc = encode_packed(packed, starts, p, n_layers)
    return T.reshape(T.scatter_rows(enc, rows, flat_mask.shape[0]), lead + (d,))


def encode_polyline(vector_feats: np.ndarray, p: Params, n_layers: int = 3) -> Var:
    """Single polyline (V, F) -> (d,); an empty polyline gives the zero vector."""
    vector_feats = np.asarray(vector_feats, dtype=np.float64).reshape(-1, VECTOR_WIDTH)
    if vector_feats.shape[0] == 0:
        return T.Var(np.zeros(p["sub0.fc2.W"].shape[0] * 2))
    return encode_polylines(vector_feats, np.ones(vector_feats.shape[0], dtype=bool), p, n_layers)


def global_interaction(features, p: Params, valid: np.ndarray | None = None) -> Var:
    """Unmasked single-head self-attention among the valid rows."""
    features = T.as_var(features)
    if valid is None:
        valid = np.ones(features.shape[:-1], dtype=bool)
    mask = valid[..., :, None] & valid[..., None, :]
    return masked_self_attention(features, mask, block(p, "global"))


def encode_context(vec_feats: np.ndarray, seg_starts: np.ndarray, seg_node: np.ndarray, valid: np.ndarray, p: Params, n_layers: int) -> Var:
    """Packed polyline vectors -> (B, N, d) context features in node order.

    ``seg_node`` holds the flat node index ``b * N + n`` of each non-empty polyline.
    """
    valid = np.asarray(valid, dtype=bool)
    d = p["sub0.fc2.W"].shape[0] * 2
    if len(seg_starts) == 0:
        nodes = T.Var(np.zeros(valid.shape + (d,)))
    else:
        enc = encode_packed(vec_feats, seg_starts, p, n_layers)
        nodes = T.reshape(T.scatter_rows(enc, seg_node, valid.size), valid.shape + (d,))
    return global_interaction(nodes, p, valid)
