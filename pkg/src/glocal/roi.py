"""Energy-ranked region selection from class activation maps, and ROI pooling.

Regions are 8-connected components of the strictly positive support of a
rectified activation map.  Each component is scored by its energy (the sum
of rectified activations inside it) rather than its area; box variants of
different sizes come from shifting the map by a fraction of its BN running
mean before rectification, which shrinks the positive support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
VAR_FLOOR = 1e-5


@dataclass(frozen=True)
class RegionProposal:
    """A candidate box in activation-map cell coordinates (inclusive)."""

    box: tuple[int, int, int, int]   # (x0, y0, x1, y1)
    energy: float
    category: int
    variant: int
    energy_rank: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if x0 > x1 or y0 > y1:
            raise ValueError(f"inverted box {self.box}")
        if self.energy < 0:
            raise ValueError(f"negative energy {self.energy}")

    def pixel_box(self, stride: int) -> tuple[int, int, int, int]:
        """Inclusive pixel extent of the covered cells."""
        x0, y0, x1, y1 = self.box
        return (x0 * stride, y0 * stride,
                (x1 + 1) * stride - 1, (y1 + 1) * stride - 1)


@dataclass
class SelectionConfig:
    """Counts and offsets controlling how many proposals come out.

    top_maps * energy_ranks * scale_variants proposals are always returned.
    ``zetas`` holds the scale_variants - 1 offset multipliers for the
    shrunken variants (variant 0 is the unshifted map).
    """

    top_maps: int = 4          # class maps taken from the score ranking
    energy_ranks: int = 2      # regions kept per map variant
    scale_variants: int = 3    # box sizes per region, incl. the original
    zetas: tuple = (0.5, 1.0)
    pool_size: int = 3

    def __post_init__(self):
        if min(self.top_maps, self.energy_ranks, self.scale_variants) < 1:
            raise ValueError("all selection counts must be positive")
        if len(self.zetas) != self.scale_variants - 1:
            raise ValueError(f"need {self.scale_variants - 1} zeta values, "
                             f"got {len(self.zetas)}")

    @property
    def total(self) -> int:
        return self.top_maps * self.energy_ranks * self.scale_variants


def select_top_maps(global_logits: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest logits, descending, ties to the lower index."""
    logits = np.asarray(global_logits, dtype=np.float64).ravel()
    if k > logits.size:
        raise ValueError(f"asked for top {k} of {logits.size} classes")
    order = np.lexsort((np.arange(logits.size), -logits))
    return [int(i) for i in order[:k]]


def connected_regions(map_values: np.ndarray) -> list[tuple[np.ndarray, tuple]]:
    """8-connected components of the positive support after rectification.

    Returns (mask, box) pairs with boxes as inclusive (x0, y0, x1, y1) cell
    coordinates, the minimum enclosing rectangle of each component.  A map
    with no positive cells yields an empty list.
    """
    values = np.asarray(map_values, dtype=np.float64)
    support = values > 0.0
    if not support.any():
        return []
    labels, count = ndimage.label(support, structure=EIGHT_CONNECTED)
    regions = []
    for idx in range(1, count + 1):
        mask = labels == idx
        ys, xs = np.nonzero(mask)
        box = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        regions.append((mask, box))
    return regions


def region_energy(map_values: np.ndarray, mask: np.ndarray) -> float:
    """Sum of rectified activation over the masked cells."""
    if not mask.any():
        raise ValueError("region mask is empty")
    return float(np.maximum(np.asarray(map_values, dtype=np.float64)[mask], 0.0).sum())


def scale_variants(map_values: np.ndarray, running_mean: float, running_var: float,
                   zetas) -> list[np.ndarray]:
    """The map plus shrunken-support variants shifted down by zeta*mu_t/std_t.

    ``running_mean``/``running_var`` are the BN running statistics of the
    map's class channel; variance is floored at 1e-5 before the square root.
    """
    values = np.asarray(map_values, dtype=np.float64)
    std = np.sqrt(max(float(running_var), VAR_FLOOR))
    variants = [values]
    for z in zetas:
        variants.append(values - float(z) * float(running_mean) / std)
    return variants


def _ranked_components(map_values: np.ndarray, criterion: str = "energy"):
    """Components sorted by the ranking criterion, best first.

    Ties break toward the smaller bounding-box area, then lexicographically
    on (x0, y0, x1, y1).  ``criterion`` is "energy" or "area" (the latter
    only exists for comparison runs; selection proper always ranks by
    energy).
    """
    scored = []
    for mask, box in connected_regions(map_values):
        energy = region_energy(map_values, mask)
        x0, y0, x1, y1 = box
        area = (x1 - x0 + 1) * (y1 - y0 + 1)
        key_value = energy if criterion == "energy" else float(area)
        scored.append((-key_value, area, box, energy))
    scored.sort()
    return [(box, energy) for _, _, box, energy in scored]


def select_rois(cam_values: np.ndarray, global_logits: np.ndarray,
                cfg: SelectionConfig, running_mean: np.ndarray,
                running_var: np.ndarray,
                criterion: str = "energy") -> list[RegionProposal]:
    """Pick cfg.total proposals: per selected class map, per scale variant,
    the top energy_ranks regions by energy.

    Output order is class rank, then variant, then energy rank.  Maps whose
    variant has fewer regions than requested are padded with the full-map
    box at energy 0, so the count and ordering are static for the attention
    stage downstream.
    """
    cam_values = np.asarray(cam_values, dtype=np.float64)
    n, h, w = cam_values.shape
    full_box = (0, 0, w - 1, h - 1)
    chosen = select_top_maps(global_logits, cfg.top_maps)
    proposals = []
    for cls in chosen:
        variants = scale_variants(cam_values[cls], running_mean[cls],
                                  running_var[cls], cfg.zetas)
        for v_idx, variant_map in enumerate(variants):
            ranked = _ranked_components(variant_map, criterion=criterion)
            for rank in range(cfg.energy_ranks):
                if rank < len(ranked):
                    box, energy = ranked[rank]
                else:
                    box, energy = full_box, 0.0
                proposals.append(RegionProposal(box=box, energy=energy,
                                                category=cls, variant=v_idx,
                                                energy_rank=rank))
    return proposals


def roi_pool(f_r, proposals: list[RegionProposal], pool_size: int,
             stride_ratio: int = 2):
    """Max-pool each proposal's patch of the stride-16 map into an SxS grid.

    Boxes arrive in activation-map cells and are scaled into f_r cells with
    outward rounding (floor for the near corner, ceil for the far one), then
    clamped.  Gradient routes to the argmax position of each grid cell.
    Returns a (n_proposals, C, S, S) tensor differentiable in f_r.
    """
    c, h, w = f_r.data.shape
    s = pool_size
    k = len(proposals)
    out = np.empty((k, c, s, s))
    ys_idx = np.empty((k, c, s, s), dtype=np.intp)
    xs_idx = np.empty((k, c, s, s), dtype=np.intp)
    data = f_r.data
    for p_i, prop in enumerate(proposals):
        bx0, by0, bx1, by1 = prop.box
        x0 = max(0, min(w - 1, int(np.floor(bx0 * stride_ratio))))
        y0 = max(0, min(h - 1, int(np.floor(by0 * stride_ratio))))
        x1 = max(0, min(w - 1, int(np.ceil((bx1 + 1) * stride_ratio)) - 1))
        y1 = max(0, min(h - 1, int(np.ceil((by1 + 1) * stride_ratio)) - 1))
        if x1 < x0:
            x0 = x1 = min(x0, x1)
        if y1 < y0:
            y0 = y1 = min(y0, y1)
        nx, ny = x1 - x0 + 1, y1 - y0 + 1
        # grid cell i spans [floor(i*n/S), ceil((i+1)*n/S)), never empty
        for gy in range(s):
            ya = y0 + (ny * gy) // s
            yb = y0 + -(-(ny * (gy + 1)) // s)
            for gx in range(s):
                xa = x0 + (nx * gx) // s
                xb = x0 + -(-(nx * (gx + 1)) // s)
                window = data[:, ya:yb, xa:xb].reshape(c, -1)
                flat_idx = np.argmax(window, axis=1)
                out[p_i, :, gy, gx] = window[np.arange(c), flat_idx]
                span = xb - xa
                ys_idx[p_i, :, gy, gx] = ya + flat_idx // span
                xs_idx[p_i, :, gy, gx] = xa + flat_idx % span

    result = T.Tensor(out)
    chan_idx = np.broadcast_to(np.arange(c)[None, :, None, None], (k, c, s, s))

    def rule(g):
        gf = np.zeros_like(data)
        np.add.at(gf, (chan_idx, ys_idx, xs_idx), g)
        return (gf,)

    return T._finish(result, (f_r,), rule)
