"""Global recycle network.

K global queries cross-attend onto the instances removed by large-scale
masking and return K recovered rows.  The queries are never trained by
gradient; they track the recovered rows by an exponential moving average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregators import multi_head_attention, uniform_init
from .numerics import Node, Tape


@dataclass
class GlobalQueries:
    q: np.ndarray  # K x D
    momentum: float = 0.9

    @property
    def k(self) -> int:
        return self.q.shape[0]


class GlobalRecycle:
    """Multi-head cross-attention parameters plus the global query bank."""

    def __init__(self, params: dict[str, np.ndarray], queries: GlobalQueries, heads: int):
        dim = queries.q.shape[1]
        if dim % heads:
            raise ValueError(f"model width {dim} is not divisible by {heads} recycle heads")
        self.params = params
        self.queries = queries
        self.heads = heads

    @classmethod
    def create(cls, rng, dim: int, k: int = 16, heads: int = 8, momentum: float = 0.9):
        p = {f"grn.{m}": uniform_init(rng, dim, (dim, dim)) for m in ("wq", "wk", "wv", "wo")}
        q = uniform_init(rng, dim, (k, dim))
        return cls(p, GlobalQueries(q, momentum), heads)

    @property
    def dim(self) -> int:
        return self.queries.q.shape[1]

    def forward(self, tape: Tape, zm: Node, trainable: bool = True) -> Node:
        """K x D recovered rows; K x D zeros when nothing was masked out."""
        k = self.queries.k
        if zm.value.shape[0] == 0 or k == 0:
            return tape.constant(np.zeros((k, self.dim)))
        q = tape.constant(self.queries.q)
        out, _ = multi_head_attention(tape, q, zm, self.params, "grn", self.heads, trainable)
        return out

    def update_queries(self, recovered: np.ndarray) -> None:
        update_queries(self.queries, recovered)

    def copy(self) -> "GlobalRecycle":
        return GlobalRecycle({k: v.copy() for k, v in self.params.items()},
                             GlobalQueries(self.queries.q.copy(), self.queries.momentum),
                             self.heads)


def update_queries(queries: GlobalQueries, recovered: np.ndarray) -> GlobalQueries:
    r = np.asarray(recovered, dtype=np.float64)
    if r.shape != queries.q.shape:
        raise ValueError(f"recovered rows {r.shape} do not match queries {queries.q.shape}")
    lam = queries.momentum
    queries.q = lam * queries.q + (1.0 - lam) * r
    return queries


def assemble(tape: Tape, kept: Node, recovered: Node) -> Node:
    if recovered.value.shape[0] == 0:
        return kept
    return tape.concat_rows([kept, recovered])
