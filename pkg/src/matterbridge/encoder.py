"""Frozen message-passing encoder producing per-atom embeddings.

Stands in for a pretrained interatomic-potential encoder: parameters are
drawn once from a seeded generator, never trained, and kept as plain
numpy arrays (no autodiff tape).  Messages depend on neighbor species
and interatomic distance only, so embeddings are invariant under rigid
rotation and translation of the cell.

Per-node message sums reduce in a value-sorted order (distance, then
neighbor species, then the message components themselves), which makes
the result bitwise independent of atom labeling and edge enumeration
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError

N_ELEMENTS = 94  # H through Pu
N_RBF = 16

__all__ = ["EncoderParams", "init_encoder", "encode_atoms", "radial_basis"]


@dataclass
class EncoderParams:
    d_enc: int
    L_enc: int
    cutoff: float
    atom_embed: np.ndarray  # (N_ELEMENTS, d_enc)
    rbf_centers: np.ndarray  # (N_RBF,)
    rbf_width: float
    layers: list  # per layer: dict with w_msg, w_edge, w_update
    frozen: bool = True

    def state_dict(self):
        out = {"atom_embed": self.atom_embed, "rbf_centers": self.rbf_centers}
        for l, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layers.{l}.{k}"] = v
        return out


def init_encoder(seed, d_enc=32, L_enc=2, cutoff=6.0):
    """Deterministic parameter draw; weights scaled by 1/sqrt(fan-in)."""
    if d_enc < 1 or L_enc < 1:
        raise ContractError(f"d_enc and L_enc must be >= 1, got {d_enc}, {L_enc}")
    if not cutoff > 0:
        raise ContractError(f"cutoff must be positive, got {cutoff}")
    rng = np.random.default_rng(int(seed))
    centers = np.linspace(0.0, cutoff, N_RBF)
    width = centers[1] - centers[0]
    layers = []
    for _ in range(L_enc):
        layers.append(
            {
                "w_msg": rng.standard_normal((d_enc, d_enc)) / np.sqrt(d_enc),
                "w_edge": rng.standard_normal((N_RBF, d_enc)) / np.sqrt(N_RBF),
                "w_update": rng.standard_normal((d_enc, d_enc)) / np.sqrt(d_enc),
            }
        )
    return EncoderParams(
        d_enc=d_enc,
        L_enc=L_enc,
        cutoff=float(cutoff),
        atom_embed=rng.standard_normal((N_ELEMENTS, d_enc)) / np.sqrt(d_enc),
        rbf_centers=centers,
        rbf_width=float(width),
        layers=layers,
    )


def radial_basis(dist, centers, width):
    """Gaussian expansion of distances: (E,) -> (E, N_RBF)."""
    dist = np.asarray(dist, dtype=np.float64)
    return np.exp(-((dist[:, None] - centers[None, :]) ** 2) / (2.0 * width**2))


def encode_atoms(graph, params):
    """Per-atom embeddings, shape (n_atoms, d_enc), input atom order."""
    z = np.asarray(graph.node_species, dtype=np.int64)
    if z.size == 0:
        raise ValidationError("graph has no atoms")
    if z.min() < 1 or z.max() > N_ELEMENTS:
        raise ValidationError(
            f"atomic number outside embedding table [1, {N_ELEMENTS}]"
        )
    h = params.atom_embed[z - 1].copy()

    ei = np.asarray(graph.edge_i)
    ej = np.asarray(graph.edge_j)
    edge_feat = radial_basis(graph.edge_dist, params.rbf_centers, params.rbf_width)
    n = len(z)

    for layer in params.layers:
        edge_term = edge_feat @ layer["w_edge"]
        if len(ei):
            msg = np.tanh(h[ej] @ layer["w_msg"] + edge_term)
            agg = np.zeros_like(h)
            for node in range(n):
                rows = np.flatnonzero(ei == node)
                if rows.size == 0:
                    continue
                block = msg[rows]
                # value-determined summation order: distance, neighbor
                # species, then the message components as tie-breakers
                keys = tuple(block[:, c] for c in range(block.shape[1] - 1, -1, -1))
                order = np.lexsort(
                    keys + (z[ej[rows]], np.asarray(graph.edge_dist)[rows])
                )
                acc = np.zeros(block.shape[1])
                for r in order:
                    acc += block[r]
                agg[node] = acc
        else:
            agg = np.zeros_like(h)
        h = np.tanh(h @ layer["w_update"] + agg)
    return h
