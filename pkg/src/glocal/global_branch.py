"""Global branch: self-attention over the coarsest features, classifier, BCE loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T

PROB_CLAMP = 1e-12


class GlobalBranch:
    """Self-attention over the stride-32 map followed by a shared classifier.

    Queries, keys and values come from three learned channel projections of
    the flattened map; attention scores are scaled by 1/sqrt(C) before the
    row softmax.  The classifier is a shared per-position linear map whose
    outputs are max-pooled over space, so the branch predicts a class as
    soon as any position fires for it.
    """

    def __init__(self, rng: np.random.Generator, channels: int, n_classes: int):
        self.channels = channels
        self.n_classes = n_classes
        s = 1.0 / np.sqrt(channels)
        self.w_q = T.Tensor(rng.normal(0.0, s, (channels, channels)), requires_grad=True)
        self.w_k = T.Tensor(rng.normal(0.0, s, (channels, channels)), requires_grad=True)
        self.w_v = T.Tensor(rng.normal(0.0, s, (channels, channels)), requires_grad=True)
        self.w_cls = T.Tensor(rng.normal(0.0, s, (n_classes, channels)), requires_grad=True)
        self.b_cls = T.Tensor(np.zeros(n_classes), requires_grad=True)

    def parameters(self) -> dict[str, T.Tensor]:
        return {
            "global.w_q": self.w_q,
            "global.w_k": self.w_k,
            "global.w_v": self.w_v,
            "global.w_cls": self.w_cls,
            "global.b_cls": self.b_cls,
        }

    def self_attention(self, f32: T.Tensor):
        """Returns (attn HWxHW, attended CxHxW, global_feature C-vector).

        Each output token is the attention-weighted convex combination of the
        value tokens; the global feature is the spatial max of the result.
        """
        c, h, w = f32.data.shape
        if c != self.channels:
            raise T.ShapeError(f"expected {self.channels} channels, got {c}")
        flat = T.reshape(f32, (c, h * w))
        q = T.matmul(self.w_q, flat)
        k = T.matmul(self.w_k, flat)
        v = T.matmul(self.w_v, flat)
        scores = T.scale(T.matmul(T.transpose(q), k), 1.0 / np.sqrt(c))
        attn = T.softmax_rows(scores)
        attended_flat = T.matmul(v, T.transpose(attn))
        attended = T.reshape(attended_flat, (c, h, w))
        global_feat = T.global_max_pool(attended)
        return attn, attended, global_feat

    def predict(self, attended: T.Tensor):
        """Shared linear map per position, then per-class spatial max."""
        c, h, w = attended.data.shape
        flat = T.reshape(attended, (c, h * w))
        # materialize the bias per position: broadcasting is scalar-only by contract
        bias_full = T.matmul(T.reshape(self.b_cls, (self.n_classes, 1)),
                             T.const(np.ones((1, h * w))))
        logits_map = T.add(T.matmul(self.w_cls, flat), bias_full)
        logits = T.max_over_axis(logits_map, axis=1)
        probs = T.sigmoid(logits)
        return logits, probs

    def classify_direct(self, f32: T.Tensor):
        """Ablation path: classify the raw stride-32 map, no self-attention."""
        return self.predict(f32)


def bce_sum(probs: T.Tensor, targets: T.Tensor) -> T.Tensor:
    """Summed binary cross-entropy over classes, probabilities pre-clamped.

    loss = -sum_j [ y_j*log(p_j) + (1-y_j)*log(1-p_j) ],
    with p clamped to [1e-12, 1-1e-12] before the logs.
    """
    if probs.data.shape != targets.data.shape:
        raise T.ShapeError(f"probs {probs.data.shape} vs targets {targets.data.shape}")
    p = T.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = targets
    one = T.const(np.ones_like(p.data))
    pos = T.mul(y, T.log(p))
    neg = T.mul(T.sub(one, y), T.log(T.sub(one, p)))
    return T.scale(T.sum_all(T.add(pos, neg)), -1.0)


def global_loss(probs: T.Tensor, labels) -> T.Tensor:
    """BCE of the global prediction against the multi-hot label vector."""
    y = labels if isinstance(labels, T.Tensor) else T.const(np.asarray(labels, dtype=np.float64))
    if y.data.shape != probs.data.shape:
        raise T.ShapeError(f"labels {y.data.shape} vs probs {probs.data.shape}")
    return bce_sum(probs, y)
