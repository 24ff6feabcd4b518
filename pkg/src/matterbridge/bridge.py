"""Trainable query-transformer bridging atom embeddings and text.

A bank of learned query vectors passes through L_b transformer layers.
Every layer self-attends over the concatenated [queries; text] sequence
under a mode-specific mask; even-indexed layers (0, 2, ...) additionally
let the query positions cross-attend onto the frozen per-atom
embeddings.  Query outputs project linearly into the language model's
embedding space.

Interaction modes:

* ``correlation``  - queries and text see only their own segment; used
  for the contrastive objective.
* ``prediction``   - text attends causally to itself and to all queries;
  queries see only queries; used for conditional text generation.
* ``association``  - full bidirectional attention; used for match
  scoring.
* ``inference``    - queries only, no text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .nn import (
    feed_forward,
    init_attention,
    init_feed_forward,
    init_layer_norm,
    init_weight,
    layer_norm_block,
    linear,
    multi_head_attention,
)
from .tensor import Tensor, concat, embedding

MODES = ("correlation", "prediction", "association", "inference")

__all__ = [
    "MODES",
    "BridgeParams",
    "init_bridge",
    "attention_mask",
    "bridge_forward",
    "project_to_lm",
    "text_logits",
    "match_score",
]


@dataclass
class BridgeParams:
    n_q: int
    d_b: int
    L_b: int
    n_heads: int
    d_enc: int
    d_lm: int
    vocab_size: int
    max_text: int
    params: dict  # name -> Tensor, all trainable

    def tensors(self):
        return self.params


def init_bridge(seed, vocab_size, d_b=32, n_q=32, L_b=4, n_heads=4,
                d_enc=32, d_lm=64, max_text=256):
    if min(n_q, d_b, L_b, n_heads, vocab_size) < 1:
        raise ContractError("bridge dimensions must be >= 1")
    rng = np.random.default_rng(int(seed))
    p = {}
    p["queries"] = Tensor(init_weight(rng, n_q, d_b), True)
    p["tok_embed"] = Tensor(init_weight(rng, vocab_size, d_b), True)
    p["pos_embed"] = Tensor(init_weight(rng, max_text, d_b), True)
    p["seg_embed"] = Tensor(init_weight(rng, 2, d_b), True)
    for l in range(L_b):
        init_layer_norm(p, f"layers.{l}.ln1", d_b)
        init_attention(p, rng, f"layers.{l}.self", d_b)
        if l % 2 == 0:
            init_layer_norm(p, f"layers.{l}.lnc", d_b)
            init_attention(p, rng, f"layers.{l}.cross", d_b, d_kv=d_enc)
        init_layer_norm(p, f"layers.{l}.ln2", d_b)
        init_feed_forward(p, rng, f"layers.{l}.ffn", d_b, 4 * d_b)
    init_layer_norm(p, "ln_f", d_b)
    p["proj.w"] = Tensor(init_weight(rng, d_b, d_lm), True)
    p["proj.b"] = Tensor(np.zeros(d_lm), True)
    p["match.w"] = Tensor(init_weight(rng, d_b, 1), True)
    p["match.b"] = Tensor(np.zeros(1), True)
    return BridgeParams(
        n_q=n_q, d_b=d_b, L_b=L_b, n_heads=n_heads, d_enc=d_enc, d_lm=d_lm,
        vocab_size=vocab_size, max_text=max_text, params=p,
    )


def attention_mask(mode, n_q, n_text):
    """Boolean (n_q+n_text)^2 mask; True marks an allowed key position."""
    if mode not in MODES:
        raise ContractError(f"unknown attention mode {mode!r}")
    if n_q < 1 or n_text < 0:
        raise ContractError(f"bad extents n_q={n_q}, n_text={n_text}")
    total = n_q + n_text
    mask = np.zeros((total, total), dtype=bool)
    if mode == "correlation":
        mask[:n_q, :n_q] = True
        mask[n_q:, n_q:] = True
    elif mode == "prediction":
        mask[:n_q, :n_q] = True
        mask[n_q:, :n_q] = True
        mask[n_q:, n_q:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    elif mode == "association":
        mask[:, :] = True
    else:  # inference
        if n_text != 0:
            raise ContractError("inference mode takes no text")
        mask[:, :] = True
    return mask


def bridge_forward(atoms, text_ids, mode, bp):
    """Run the bridge; returns {"query_out", "text_out"} Tensors."""
    if mode not in MODES:
        raise ContractError(f"unknown attention mode {mode!r}")
    if mode == "inference":
        if text_ids is not None and len(text_ids) > 0:
            raise ContractError("inference mode takes no text")
        text_ids = []
    else:
        if text_ids is None or len(text_ids) == 0:
            raise ContractError(f"{mode} mode requires text tokens")
    text_ids = np.asarray(text_ids, dtype=np.int64)
    n_text = len(text_ids)
    if n_text > bp.max_text:
        raise ContractError(f"text length {n_text} exceeds {bp.max_text}")

    atoms = atoms if isinstance(atoms, Tensor) else Tensor(atoms)
    if atoms.ndim != 2 or atoms.shape[1] != bp.d_enc:
        raise ShapeError(f"atom embeddings must be (n, {bp.d_enc})")
    if atoms.shape[0] < 1:
        raise ContractError("bridge needs at least one atom")

    p = bp.params
    n_q = bp.n_q
    seg_q = p["seg_embed"][np.zeros(n_q, dtype=np.int64)]
    x = p["queries"] + seg_q
    if n_text:
        tok = embedding(p["tok_embed"], text_ids)
        pos = p["pos_embed"][np.arange(n_text)]
        seg_t = p["seg_embed"][np.ones(n_text, dtype=np.int64)]
        x = concat([x, tok + pos + seg_t], axis=0)

    mask = attention_mask(mode, n_q, n_text)
    for l in range(bp.L_b):
        normed = layer_norm_block(x, p, f"layers.{l}.ln1")
        x = x + multi_head_attention(normed, normed, p, f"layers.{l}.self",
                                     bp.n_heads, mask)
        if l % 2 == 0:
            q_rows = x[:n_q]
            q_norm = layer_norm_block(q_rows, p, f"layers.{l}.lnc")
            crossed = q_rows + multi_head_attention(
                q_norm, atoms, p, f"layers.{l}.cross", bp.n_heads
            )
            x = concat([crossed, x[n_q:]], axis=0) if n_text else crossed
        x = x + feed_forward(layer_norm_block(x, p, f"layers.{l}.ln2"),
                             p, f"layers.{l}.ffn")
    x = layer_norm_block(x, p, "ln_f")
    return {
        "query_out": x[:n_q],
        "text_out": x[n_q:] if n_text else None,
    }


def project_to_lm(query_out, bp):
    """Affine map of query outputs into LM embedding space, rows independent."""
    if query_out.shape[1] != bp.d_b:
        raise ShapeError(
            f"query_out width {query_out.shape[1]} != d_b {bp.d_b}"
        )
    return linear(query_out, bp.params["proj.w"], bp.params["proj.b"])


def text_logits(text_out, bp):
    """Next-symbol logits from the bridge's text pathway, head tied to tok_embed."""
    return text_out @ bp.params["tok_embed"].T


def match_score(query_out, bp):
    """Scalar match probability in (0, 1): linear head on mean query output."""
    pooled = query_out.mean(axis=0).reshape(1, -1)
    logit = linear(pooled, bp.params["match.w"], bp.params["match.b"])
    return logit.sigmoid().reshape(())
