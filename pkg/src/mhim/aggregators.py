"""Attention-based MIL aggregators.

Two families share one surface: ``project`` maps raw instance features to
the model width, ``aggregate`` pools a projected sequence into a bag
embedding and logits.  ``forward`` is the two composed.  All maths goes
through a :class:`~mhim.numerics.Tape` so the same code serves training
(recording) and teacher / inference passes (``Tape(record=False)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Node, Tape


class EmptyBagError(ValueError):
    pass


class ModelConfigError(ValueError):
    pass


@dataclass
class BagOutput:
    logits: Node  # 1 x C
    embedding: Node  # 1 x D
    attention: np.ndarray  # (N,) instance scores, sums to one


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(tape: Tape, params, prefix: str, x: Node, trainable: bool) -> Node:
    w = tape.param(params, prefix + ".weight", trainable)
    out = tape.matmul(x, w)
    bname = prefix + ".bias"
    if bname in params:
        out = tape.add(out, tape.param(params, bname, trainable))
    return out


class MILModel:
    """Base class: a named parameter dict plus the projection and the bag classifier."""

    family = "base"

    def __init__(self, params: dict[str, np.ndarray], d_in: int, dim: int, n_classes: int):
        self.params = params
        self.d_in = d_in
        self.dim = dim
        self.n_classes = n_classes

    @staticmethod
    def _init_linear(params, rng, prefix, fan_in, fan_out, bias=True):
        params[prefix + ".weight"] = uniform_init(rng, fan_in, (fan_in, fan_out))
        if bias:
            params[prefix + ".bias"] = uniform_init(rng, fan_in, (1, fan_out))

    def project(self, tape: Tape, x, trainable: bool = True) -> Node:
        """Linear + ReLU projection of raw N x D_in features to N x D."""
        xn = x if isinstance(x, Node) else tape.constant(x)
        if xn.value.shape[0] == 0:
            raise EmptyBagError("bag has no instances")
        if xn.value.shape[1] != self.d_in:
            raise ModelConfigError(f"expected {self.d_in} input features, got {xn.value.shape[1]}")
        return tape.relu(linear(tape, self.params, "proj", xn, trainable))

    def classify(self, tape: Tape, f: Node, trainable: bool = True) -> Node:
        return linear(tape, self.params, "classifier", f, trainable)

    def aggregate(self, tape: Tape, h: Node, trainable: bool = True) -> BagOutput:
        raise NotImplementedError

    def forward(self, tape: Tape, x, trainable: bool = True) -> BagOutput:
        return self.aggregate(tape, self.project(tape, x, trainable), trainable)

    def copy(self) -> "MILModel":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def hyper(self) -> dict:
        return {"family": self.family, "d_in": self.d_in, "dim": self.dim, "n_classes": self.n_classes}


class GatedAttentionMIL(MILModel):
    """Gated attention pooling: a = softmax(w^T (tanh(V h) * sigmoid(U h)))."""

    family = "gated"

    def __init__(self, params, d_in, dim, n_classes, attn_dim):
        super().__init__(params, d_in, dim, n_classes)
        self.attn_dim = attn_dim

    @classmethod
    def create(cls, rng, d_in, dim=512, n_classes=1, attn_dim=128):
        p: dict[str, np.ndarray] = {}
        cls._init_linear(p, rng, "proj", d_in, dim)
        cls._init_linear(p, rng, "attn_V", dim, attn_dim)
        cls._init_linear(p, rng, "attn_U", dim, attn_dim)
        cls._init_linear(p, rng, "attn_w", attn_dim, 1)
        cls._init_linear(p, rng, "classifier", dim, n_classes)
        return cls(p, d_in, dim, n_classes, attn_dim)

    def aggregate(self, tape, h, trainable=True):
        if h.value.shape[0] == 0:
            raise EmptyBagError("bag has no instances")
        p = self.params
        v = tape.tanh(linear(tape, p, "attn_V", h, trainable))
        u = tape.sigmoid(linear(tape, p, "attn_U", h, trainable))
        s = linear(tape, p, "attn_w", tape.mul(v, u), trainable)  # N x 1
        a = tape.softmax(tape.transpose(s))  # 1 x N
        f = tape.matmul(a, h)
        return BagOutput(self.classify(tape, f, trainable), f, a.value[0].copy())

    def hyper(self):
        return {**super().hyper(), "attn_dim": self.attn_dim}


def multi_head_attention(tape: Tape, q_in: Node, kv_in: Node, params, prefix: str,
                         heads: int, trainable: bool):
    """Per-head softmax(Q K^T / sqrt(d_h)) V, heads concatenated, then W^O.

    Returns the output node and the list of per-head attention nodes.
    """
    dim = q_in.value.shape[1]
    dh = dim // heads
    q = tape.matmul(q_in, tape.param(params, prefix + ".wq", trainable))
    k = tape.matmul(kv_in, tape.param(params, prefix + ".wk", trainable))
    v = tape.matmul(kv_in, tape.param(params, prefix + ".wv", trainable))
    outs, attns = [], []
    for hd in range(heads):
        lo, hi = hd * dh, (hd + 1) * dh
        qh = tape.slice_cols(q, lo, hi)
        kh = tape.slice_cols(k, lo, hi)
        vh = tape.slice_cols(v, lo, hi)
        scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(dh))
        ah = tape.softmax(scores)
        attns.append(ah)
        outs.append(tape.matmul(ah, vh))
    cat = outs[0] if heads == 1 else tape.concat_cols(outs)
    return tape.matmul(cat, tape.param(params, prefix + ".wo", trainable)), attns


class ClassTokenMSA(MILModel):
    """Class token + L exact multi-head self-attention blocks; F is the final class token."""

    family = "msa"

    def __init__(self, params, d_in, dim, n_classes, layers, heads):
        super().__init__(params, d_in, dim, n_classes)
        if dim % heads:
            raise ModelConfigError(f"model width {dim} is not divisible by {heads} heads")
        self.layers = layers
        self.heads = heads

    @classmethod
    def create(cls, rng, d_in, dim=512, n_classes=1, layers=2, heads=8):
        if dim % heads:
            raise ModelConfigError(f"model width {dim} is not divisible by {heads} heads")
        p: dict[str, np.ndarray] = {}
        cls._init_linear(p, rng, "proj", d_in, dim)
        p["cls_token"] = uniform_init(rng, dim, (1, dim))
        for layer in range(layers):
            for m in ("wq", "wk", "wv", "wo"):
                p[f"msa{layer}.{m}"] = uniform_init(rng, dim, (dim, dim))
        cls._init_linear(p, rng, "classifier", dim, n_classes)
        return cls(p, d_in, dim, n_classes, layers, heads)

    def aggregate(self, tape, h, trainable=True):
        n = h.value.shape[0]
        if n == 0:
            raise EmptyBagError("bag has no instances")
        z = tape.concat_rows([tape.param(self.params, "cls_token", trainable), h])
        attns = []
        for layer in range(self.layers):
            z, attns = multi_head_attention(tape, z, z, self.params, f"msa{layer}",
                                            self.heads, trainable)
        f = tape.slice_rows(z, 0, 1)
        cls_rows = np.stack([a.value[0, 1:] for a in attns])
        att = cls_rows.mean(axis=0)
        att = att / att.sum()
        return BagOutput(self.classify(tape, f, trainable), f, att)

    def hyper(self):
        return {**super().hyper(), "layers": self.layers, "heads": self.heads}


def build_model(family: str, rng, d_in: int, dim: int, n_classes: int = 1,
                attn_dim: int = 128, layers: int = 2, heads: int = 8) -> MILModel:
    if family == "gated":
        return GatedAttentionMIL.create(rng, d_in, dim, n_classes, attn_dim)
    if family == "msa":
        return ClassTokenMSA.create(rng, d_in, dim, n_classes, layers, heads)
    raise ModelConfigError(f"unknown model family {family!r}")


def model_from_hyper(hyper: dict, params: dict[str, np.ndarray]) -> MILModel:
    fam = hyper["family"]
    if fam == "gated":
        return GatedAttentionMIL(params, hyper["d_in"], hyper["dim"], hyper["n_classes"],
                                 hyper["attn_dim"])
    if fam == "msa":
        return ClassTokenMSA(params, hyper["d_in"], hyper["dim"], hyper["n_classes"],
                             hyper["layers"], hyper["heads"])
    raise ModelConfigError(f"unknown model family {fam!r}")
