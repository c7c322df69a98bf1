"""Attention across the global token and the pooled region tokens."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .global_branch import bce_sum


class CrossAttention:
    """Embeds pooled region features and mixes them with the global feature.

    The token set is (n_regions + 1) x C with the global feature first.
    Attention scores are NOT scaled by 1/sqrt(C) by default; the optional
    ``scaled`` flag exists for comparison runs.  Fusing per-region class
    logits uses an elementwise max by default ("sum" is available for the
    ablation harness).
    """

    def __init__(self, rng: np.random.Generator, region_channels: int,
                 channels: int, n_classes: int, depth: int = 1,
                 scaled: bool = False, fusion: str = "max"):
        if fusion not in ("max", "sum"):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.channels = channels
        self.n_classes = n_classes
        self.depth = depth
        self.scaled = scaled
        self.fusion = fusion
        s = 1.0 / np.sqrt(channels)
        emb = rng.normal(0.0, np.sqrt(2.0 / region_channels),
                         size=(channels, region_channels, 1, 1))
        self.embed_w = T.Tensor(emb, requires_grad=True)
        self.embed_b = T.Tensor(np.zeros(channels), requires_grad=True)
        self.layers = []
        for _ in range(depth):
            self.layers.append({
                "w_q": T.Tensor(rng.normal(0.0, s, (channels, channels)), requires_grad=True),
                "w_k": T.Tensor(rng.normal(0.0, s, (channels, channels)), requires_grad=True),
                "w_v": T.Tensor(rng.normal(0.0, s, (channels, channels)), requires_grad=True),
            })
        self.w_cls = T.Tensor(rng.normal(0.0, s, (n_classes, channels)), requires_grad=True)
        self.b_cls = T.Tensor(np.zeros(n_classes), requires_grad=True)

    def parameters(self) -> dict[str, T.Tensor]:
        params = {"local.embed.w": self.embed_w, "local.embed.b": self.embed_b,
                  "local.w_cls": self.w_cls, "local.b_cls": self.b_cls}
        for i, layer in enumerate(self.layers):
            for key, tensor in layer.items():
                params[f"local.attn{i}.{key}"] = tensor
        return params

    def local_embed(self, pooled: T.Tensor) -> T.Tensor:
        """Pooled (k, C_r, S, S) patches -> (k, C) region tokens.

        Shared 1x1 conv, ReLU, then spatial max per region.
        """
        k = pooled.data.shape[0]
        x = T.relu(T.conv2d(pooled, self.embed_w, self.embed_b))
        flat = T.reshape(x, (k * self.channels, -1))
        return T.reshape(T.max_over_axis(flat, axis=1), (k, self.channels))

    def attend(self, tokens: T.Tensor):
        """Row-softmax attention over the token set, stacked ``depth`` times.

        Returns (attention of the last layer, output tokens).  Every row of
        the attention matrix sums to 1, so each output token sees every
        other token including the global one.
        """
        out = tokens
        attn = None
        for layer in self.layers:
            q = T.linear(out, layer["w_q"])
            k = T.linear(out, layer["w_k"])
            v = T.linear(out, layer["w_v"])
            scores = T.matmul(q, T.transpose(k))
            if self.scaled:
                scores = T.scale(scores, 1.0 / np.sqrt(self.channels))
            attn = T.softmax_rows(scores)
            out = T.matmul(attn, v)
        return attn, out

    def predict(self, out_tokens: T.Tensor):
        """Classify the region tokens (global token dropped) and fuse.

        Per-token logits are combined across regions by elementwise max (or
        sum when configured), then squashed to probabilities.
        """
        n_tokens = out_tokens.data.shape[0]
        locals_only = T.narrow(out_tokens, 0, 1, n_tokens)
        per_token = T.linear(locals_only, self.w_cls, self.b_cls)  # (k, L)
        if self.fusion == "max":
            fused = T.max_over_axis(T.transpose(per_token), axis=1)
        else:
            fused = T.reshape(
                T.matmul(T.const(np.ones((1, n_tokens - 1))), per_token),
                (self.n_classes,))
        return fused, T.sigmoid(fused)

    def predict_direct(self, region_tokens: T.Tensor):
        """Ablation path: classify region tokens without any attention."""
        per_token = T.linear(region_tokens, self.w_cls, self.b_cls)
        if self.fusion == "max":
            fused = T.max_over_axis(T.transpose(per_token), axis=1)
        else:
            k = region_tokens.data.shape[0]
            fused = T.reshape(
                T.matmul(T.const(np.ones((1, k))), per_token),
                (self.n_classes,))
        return fused, T.sigmoid(fused)


def build_token_set(global_feat: T.Tensor, region_tokens: T.Tensor) -> T.Tensor:
    """Stack the global feature above the region tokens: (k+1, C)."""
    c = global_feat.data.shape[0]
    return T.concat([T.reshape(global_feat, (1, c)), region_tokens], axis=0)


def local_loss(probs: T.Tensor, labels) -> T.Tensor:
    """BCE of the fused region prediction against the multi-hot labels."""
    y = labels if isinstance(labels, T.Tensor) else T.const(np.asarray(labels, dtype=np.float64))
    if y.data.shape != probs.data.shape:
        raise T.ShapeError(f"labels {y.data.shape} vs probs {probs.data.shape}")
    return bce_sum(probs, y)
