"""Per-class activation maps and the absent-class suppression loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

# Keeps log(1 - sigmoid(x) + DELTA) finite when an activation saturates high.
DELTA = 1e-6


@dataclass
class CategoryActivationMaps:
    """One post-BN spatial activation map per class."""

    maps: T.Tensor          # (n_classes, H, W)
    stride: int             # input pixels per map cell

    @property
    def n_classes(self) -> int:
        return self.maps.data.shape[0]


class WeakHead:
    """1x1 projection of the chosen pyramid level down to one map per class.

    No ReLU here: rectification belongs to region selection, which needs the
    signed activations to apply its offset trick first.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, n_classes: int,
                 stride: int = 32):
        self.n_classes = n_classes
        self.stride = stride
        w = rng.normal(0.0, np.sqrt(2.0 / in_channels), size=(n_classes, in_channels, 1, 1))
        self.conv_w = T.Tensor(w, requires_grad=True)
        self.bn = T.BNState.create(n_classes)

    def parameters(self) -> dict[str, T.Tensor]:
        return {
            "weak.conv.w": self.conv_w,
            "weak.bn.gamma": self.bn.gamma,
            "weak.bn.beta": self.bn.beta,
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            "weak.bn.running_mean": self.bn.running_mean,
            "weak.bn.running_var": self.bn.running_var,
        }

    def project(self, f_w: T.Tensor, train: bool) -> CategoryActivationMaps:
        maps = T.batch_norm(T.conv2d(f_w, self.conv_w), self.bn, train=train)
        return CategoryActivationMaps(maps=maps, stride=self.stride)


def weak_loss(cam: CategoryActivationMaps, present: set[int],
              delta: float = DELTA) -> T.Tensor:
    """Penalize activation on maps of classes absent from the image.

    loss = -(1/(H*W)) * sum_cells (1/N_abs) * sum_{absent k} log(1 - S(act) + delta)

    where N_abs counts the absent classes.  Cells of present-class maps are
    masked out by a constant factor, so their gradient is exactly zero.
    Returns a zero constant when every class is present.
    """
    n, h, w = cam.maps.data.shape
    for k in present:
        if not 0 <= k < n:
            raise ValueError(f"present class {k} outside 0..{n - 1}")
    absent = np.ones(n, dtype=np.float64)
    absent[sorted(present)] = 0.0
    n_abs = int(absent.sum())
    if n_abs == 0:
        return T.const(0.0)
    mask = T.const(np.broadcast_to(absent[:, None, None], (n, h, w)).copy())
    s = T.sigmoid(cam.maps)
    inner = T.log(T.add(T.sub(T.const(np.ones((n, h, w))), s),
                        T.const(np.full((n, h, w), delta))))
    total = T.sum_all(T.mul(mask, inner))
    return T.scale(total, -1.0 / (h * w * n_abs))


def mean_activation(cam_values: np.ndarray, classes) -> float:
    """Mean sigmoid activation over the given class maps (diagnostics).

    Sigmoid puts raw post-BN map values on the same (0,1) scale the
    suppression loss operates on, so absent/present comparisons are
    meaningful regardless of sign.
    """
    sel = cam_values[sorted(classes)]
    return float(T._sigmoid_values(sel).mean())
