"""The assembled two-branch recognizer and its checkpoint format."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import serialize
from . import tensor as T
from .backbone import Backbone, FeaturePyramid, STAGE_WIDTHS
from .cross_attention import CrossAttention, build_token_set
from .global_branch import GlobalBranch
from .roi import RegionProposal, SelectionConfig, roi_pool, select_rois
from .weak_head import CategoryActivationMaps, WeakHead

WEAK_STRIDE = 32       # activation maps live on the stride-32 level
REGION_STRIDE = 16     # ROI pooling crops the stride-16 level


@dataclass
class ModelConfig:
    n_classes: int = 6
    widths: tuple = STAGE_WIDTHS
    top_maps: int = 4
    energy_ranks: int = 2
    scale_variants: int = 3
    zetas: tuple = (0.5, 1.0)
    pool_size: int = 3
    attn_depth: int = 1
    attn_scaled: bool = False
    fusion: str = "max"
    use_global_attention: bool = True
    use_cross_attention: bool = True
    init_seed: int = 0

    def selection(self) -> SelectionConfig:
        return SelectionConfig(top_maps=self.top_maps,
                               energy_ranks=self.energy_ranks,
                               scale_variants=self.scale_variants,
                               zetas=tuple(self.zetas),
                               pool_size=self.pool_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["zetas"] = list(self.zetas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", STAGE_WIDTHS))
        d["zetas"] = tuple(d.get("zetas", (0.5, 1.0)))
        return cls(**d)


@dataclass
class ForwardResult:
    pyramid: FeaturePyramid
    global_attn: Optional[T.Tensor]
    global_feat: T.Tensor
    global_logits: T.Tensor
    global_probs: T.Tensor
    cam: CategoryActivationMaps
    proposals: list[RegionProposal] = field(default_factory=list)
    local_attn: Optional[T.Tensor] = None
    local_logits: Optional[T.Tensor] = None
    local_probs: Optional[T.Tensor] = None


class TwoBranchModel:
    """Backbone + global branch + weak head + region branch, end to end.

    All submodules share one parameter/buffer namespace so checkpoints and
    the optimizer can address every tensor by name.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        c32 = config.widths[-1]
        c16 = config.widths[-2]
        self.backbone = Backbone(rng, widths=config.widths)
        self.global_branch = GlobalBranch(rng, channels=c32, n_classes=config.n_classes)
        self.weak_head = WeakHead(rng, in_channels=c32, n_classes=config.n_classes,
                                  stride=WEAK_STRIDE)
        self.cross = CrossAttention(rng, region_channels=c16, channels=c32,
                                    n_classes=config.n_classes,
                                    depth=config.attn_depth,
                                    scaled=config.attn_scaled,
                                    fusion=config.fusion)

    def parameters(self) -> dict[str, T.Tensor]:
        params = {}
        params.update(self.backbone.parameters())
        params.update(self.global_branch.parameters())
        params.update(self.weak_head.parameters())
        params.update(self.cross.parameters())
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        bufs.update(self.backbone.buffers())
        bufs.update(self.weak_head.buffers())
        return bufs

    def forward(self, image: T.Tensor, train: bool,
                compute_local: bool = True) -> ForwardResult:
        pyramid = self.backbone.extract(image, train=train)
        f32 = pyramid.at_stride(WEAK_STRIDE)

        if self.config.use_global_attention:
            g_attn, attended, global_feat = self.global_branch.self_attention(f32)
            g_logits, g_probs = self.global_branch.predict(attended)
        else:
            g_attn = None
            global_feat = T.global_max_pool(f32)
            g_logits, g_probs = self.global_branch.classify_direct(f32)

        cam = self.weak_head.project(f32, train=train)

        result = ForwardResult(pyramid=pyramid, global_attn=g_attn,
                               global_feat=global_feat, global_logits=g_logits,
                               global_probs=g_probs, cam=cam)
        if not compute_local:
            return result

        # box selection is discrete: it reads values, no gradient flows here
        result.proposals = select_rois(cam.maps.data, g_logits.data,
                                       self.config.selection(),
                                       self.weak_head.bn.running_mean,
                                       self.weak_head.bn.running_var)
        pooled = roi_pool(pyramid.at_stride(REGION_STRIDE), result.proposals,
                          self.config.pool_size,
                          stride_ratio=WEAK_STRIDE // REGION_STRIDE)
        region_tokens = self.cross.local_embed(pooled)
        if self.config.use_cross_attention:
            tokens = build_token_set(global_feat, region_tokens)
            attn, out_tokens = self.cross.attend(tokens)
            result.local_attn = attn
            result.local_logits, result.local_probs = self.cross.predict(out_tokens)
        else:
            result.local_logits, result.local_probs = \
                self.cross.predict_direct(region_tokens)
        return result

    def predict_probs(self, image_values: np.ndarray, use_local: bool = True) -> np.ndarray:
        """Eval-mode class probabilities for one image.

        The final score averages the global and region branch predictions
        when the region branch is in play; otherwise it is the global
        prediction alone.
        """
        result = self.forward(T.const(image_values), train=False,
                              compute_local=use_local)
        if use_local:
            return (result.global_probs.data + result.local_probs.data) / 2.0
        return result.global_probs.data.copy()

    # -- checkpoints --------------------------------------------------------

    def save(self, path, extra_meta: Optional[dict] = None):
        tensors = {name: p.data for name, p in self.parameters().items()}
        tensors.update(self.buffers())
        meta = {"model": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        serialize.save_bundle(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["TwoBranchModel", dict]:
        tensors, meta = serialize.load_bundle(path)
        model = cls(ModelConfig.from_dict(meta["model"]))
        params = model.parameters()
        for name, param in params.items():
            param.data = tensors[name].copy()
        for name, buf in model.buffers().items():
            buf[...] = tensors[name]
        return model, meta
