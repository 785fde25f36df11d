"""Scaled dot-product attention and the single cross+self perceiver block.

The block distils a (batch, steps, features) sequence into a learned
latent array via one cross-attention, then refines it with one
self-attention. With causal masking enabled (the default here) latent i
may only see input steps and latents j <= i, so the latent at step i is
a function of the past alone. Blocks are not repeated and there is no
feed-forward sublayer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, dropout
from .tensor import Tensor

__all__ = ["AttentionConfig", "PerceiverBlock", "scaled_dot_attention", "causal_mask"]


def causal_mask(lq, lk):
    """Boolean (lq, lk) mask, True where attending is allowed: j <= i."""
    if lq != lk:
        raise ValueError(f"causal mask needs grid-aligned lengths, got {lq} x {lk}")
    return np.tril(np.ones((lq, lk), dtype=bool))


def scaled_dot_attention(q, k, v, mask=None, dropout_rate=0.0, training=False, rng=None):
    """softmax(q k^T / sqrt(d_k) + mask) v.

    ``mask`` is a boolean (Lq, Lk) array, True = attend allowed; masked
    scores are filled with -inf before the softmax. Attention-weight
    dropout applies in training mode only.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key dims disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value lengths disagree: {k.shape} vs {v.shape}")
    dk = q.shape[-1]
    scores = (q @ k.transpose()) * (1.0 / np.sqrt(dk))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            bad = int(np.argmin(mask.any(axis=-1)))
            raise ValueError(f"attention mask forbids every key for query row {bad}")
        scores = scores.masked_fill(~mask, -np.inf)
    weights = scores.softmax(axis=-1)
    weights = dropout(weights, dropout_rate, training, rng)
    return weights @ v


@dataclass
class AttentionConfig:
    """Dimensions and flags shared by the block's two attentions."""

    context_dim: int      # input feature size (keys/values of the cross-attend)
    latent_dim: int       # latent channel size
    head_dim: int         # projection size of the single attention head
    dropout_rate: float = 0.0
    causal: bool = True


class PerceiverBlock:
    """Learned latent array + one causal cross-attention + one causal self-attention.

    Each attention projects queries/keys/values into head_dim and its
    output back to latent_dim, with a residual connection around it.
    With causal=True the latent count must equal the input step count.
    """

    def __init__(self, cfg, latent_count, rng):
        self.cfg = cfg
        self.latent_count = int(latent_count)
        d, e, hd = cfg.latent_dim, cfg.context_dim, cfg.head_dim
        self.latent = Tensor(rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(latent_count, d)),
                             requires_grad=True)
        self.cross_q = Linear(d, hd, rng)
        self.cross_k = Linear(e, hd, rng)
        self.cross_v = Linear(e, hd, rng)
        self.cross_out = Linear(hd, d, rng)
        self.self_q = Linear(d, hd, rng)
        self.self_k = Linear(d, hd, rng)
        self.self_v = Linear(d, hd, rng)
        self.self_out = Linear(hd, d, rng)

    def __call__(self, x, training=False, rng=None):
        if x.ndim != 3 or x.shape[-1] != self.cfg.context_dim:
            raise ValueError(f"perceiver expects (batch, steps, {self.cfg.context_dim}), got {x.shape}")
        n, steps, _ = x.shape
        if self.cfg.causal and steps != self.latent_count:
            raise ValueError(
                f"causal masking needs latent count == step count, got {self.latent_count} latents, {steps} steps")
        dr = self.cfg.dropout_rate

        z = self.latent.expand_batch(n)
        mask = causal_mask(self.latent_count, steps) if self.cfg.causal else None
        attended = scaled_dot_attention(self.cross_q(z), self.cross_k(x), self.cross_v(x),
                                        mask=mask, dropout_rate=dr, training=training, rng=rng)
        z = z + self.cross_out(attended)

        mask = causal_mask(self.latent_count, self.latent_count) if self.cfg.causal else None
        attended = scaled_dot_attention(self.self_q(z), self.self_k(z), self.self_v(z),
                                        mask=mask, dropout_rate=dr, training=training, rng=rng)
        z = z + self.self_out(attended)
        return z

    def parameters(self):
        out = [("latent", self.latent)]
        for prefix, layer in (("cross_q", self.cross_q), ("cross_k", self.cross_k),
                              ("cross_v", self.cross_v), ("cross_out", self.cross_out),
                              ("self_q", self.self_q), ("self_k", self.self_k),
                              ("self_v", self.self_v), ("self_out", self.self_out)):
            for name, p in layer.parameters():
                out.append((f"{prefix}.{name}", p))
        return out
