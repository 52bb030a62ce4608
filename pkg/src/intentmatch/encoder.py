"""Shared token encoder.

Queries and category texts run through one and the same parameter set, so
both land in a single semantic space: a token+position embedding followed
by a small stack of masked multi-head self-attention and feed-forward
blocks, each with a residual connection and post-residual layer
normalization.  No classification token is prepended; the output is one
contextual vector per input position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, VocabError
from .textdata import DEFAULT_CATEGORY_LEN, assemble_category_text

LAYERNORM_EPS = 1e-5


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_width: int = 0  # 0 means 4*d
    max_len: int = 32

    def __post_init__(self):
        if self.ffn_width == 0:
            self.ffn_width = 4 * self.d
        if self.d % self.num_heads != 0:
            raise ConfigError(
                f"d={self.d} not divisible by num_heads={self.num_heads}"
            )
        if self.vocab_size < 2:
            raise ConfigError("vocab must include at least PAD and UNK")


def _zeros(shape):
    t = ad.Tensor(np.zeros(shape), requires_grad=True)
    return t


class EncoderParams:
    """All encoder weights, registered in a fixed declaration order."""

    def __init__(self, config, rng):
        c = config
        self.config = c
        self._registry = []

        def reg(name, tensor):
            self._registry.append((name, tensor))
            return tensor

        self.tok_emb = reg("tok_emb", ad.parameter(rng, (c.vocab_size, c.d), c.d))
        self.pos_emb = reg("pos_emb", ad.parameter(rng, (c.max_len, c.d), c.d))
        self.layers = []
        for i in range(c.num_layers):
            layer = {
                "w_q": ad.parameter(rng, (c.d, c.d), c.d),
                "w_k": ad.parameter(rng, (c.d, c.d), c.d),
                "w_v": ad.parameter(rng, (c.d, c.d), c.d),
                "w_o": ad.parameter(rng, (c.d, c.d), c.d),
                "ln1_g": ad.Tensor(np.ones(c.d), requires_grad=True),
                "ln1_b": _zeros(c.d),
                "ffn_w1": ad.parameter(rng, (c.d, c.ffn_width), c.d),
                "ffn_b1": _zeros(c.ffn_width),
                "ffn_w2": ad.parameter(rng, (c.ffn_width, c.d), c.ffn_width),
                "ffn_b2": _zeros(c.d),
                "ln2_g": ad.Tensor(np.ones(c.d), requires_grad=True),
                "ln2_b": _zeros(c.d),
            }
            for key, tensor in layer.items():
                reg(f"layer{i}.{key}", tensor)
            self.layers.append(layer)

    def parameters(self):
        return list(self._registry)


def layer_norm(x, gamma, beta, eps=LAYERNORM_EPS):
    """Row-wise normalization to zero mean / unit variance, then affine."""
    mu = ad.reduce_mean(x, axis=1, keepdims=True)
    centered = x - mu
    var = ad.reduce_mean(centered * centered, axis=1, keepdims=True)
    normed = centered / ad.sqrt(var + eps)
    return normed * gamma + beta


def _attention_block(x, layer, key_mask, num_heads):
    length, d = x.shape
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)
    q_all = x @ layer["w_q"]
    k_all = x @ layer["w_k"]
    v_all = x @ layer["w_v"]
    heads = []
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh = q_all[:, cols]
        kh = k_all[:, cols]
        vh = v_all[:, cols]
        scores = (qh @ ad.transpose(kh)) * scale
        # PAD keys get exactly zero attention from every position
        attn = ad.softmax(scores, axis=1, mask=key_mask[None, :])
        heads.append(attn @ vh)
    merged = ad.concat(heads, axis=1) @ layer["w_o"]
    return layer_norm(x + merged, layer["ln1_g"], layer["ln1_b"])


def _ffn_block(x, layer):
    hidden = ad.relu(x @ layer["ffn_w1"] + layer["ffn_b1"])
    out = hidden @ layer["ffn_w2"] + layer["ffn_b2"]
    return layer_norm(x + out, layer["ln2_g"], layer["ln2_b"])


def encode(tokens, params):
    """Contextual embeddings [L x d] for one fixed-length token sequence."""
    c = params.config
    ids = np.asarray(tokens.ids)
    length = len(ids)
    if length > c.max_len:
        raise ConfigError(f"sequence length {length} exceeds max_len {c.max_len}")
    if ids.min() < 0 or ids.max() >= c.vocab_size:
        bad = ids[(ids < 0) | (ids >= c.vocab_size)][0]
        raise VocabError(f"token id {bad} outside vocab of size {c.vocab_size}")
    x = ad.embedding(params.tok_emb, ids) + params.pos_emb[:length]
    key_mask = np.zeros(length)
    key_mask[: tokens.true_length] = 1.0
    for layer in params.layers:
        x = _attention_block(x, layer, key_mask, c.num_heads)
        x = _ffn_block(x, layer)
    return x


def encode_all_categories(cats, params, l_max=DEFAULT_CATEGORY_LEN):
    """Encode every category text with the same weights used for queries."""
    return [encode(assemble_category_text(rec, l_max), params) for rec in cats]
