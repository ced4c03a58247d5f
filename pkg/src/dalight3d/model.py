"""Full DALight-3D network: stem, four encoder stages, three decoder levels, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layers import (
    SSFB,
    BlockConfig,
    CrossSliceAttention,
    Downsample,
    InitProjection,
    Layer,
    LightweightBlock,
    SegmentationHead,
    SepConv3d,
    SimpleFusion,
    Upsample,
)
from .tensor import Tensor

ABLATIONS = ("none", "no_sepconv", "no_scanner_norm", "no_csa", "no_ssfb")

# CLI / report names for the five rows of the ablation table
VARIANTS = {
    "full": "none",
    "no_sepconv": "no_sepconv",
    "no_scanner_norm": "no_scanner_norm",
    "no_csa": "no_csa",
    "no_ssfb": "no_ssfb",
}


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 24
    channel_cap: int = 384
    bottleneck_width: int = 432
    ssfb_rank: int = 8
    num_buckets: int = 8
    num_classes: int = 4
    num_modalities: int = 4
    se_reduction: int = 4
    ablation: str = "none"

    def validate(self) -> None:
        problems = []
        if self.base_width < 1:
            problems.append("base_width must be >= 1")
        if self.channel_cap < 1:
            problems.append("channel_cap must be >= 1")
        if self.bottleneck_width < self.base_width:
            problems.append("bottleneck_width must be >= base_width")
        if self.ssfb_rank < 1:
            problems.append("ssfb_rank must be >= 1")
        if self.num_buckets < 1:
            problems.append("num_buckets must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.num_modalities < 1:
            problems.append("num_modalities must be >= 1")
        if self.se_reduction < 1:
            problems.append("se_reduction must be >= 1")
        if self.ablation not in ABLATIONS:
            problems.append(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown model field {k!r}" for k in sorted(unknown)])
        return cls(**d)


def channel_plan(base_width: int, channel_cap: int, bottleneck_width: int) -> list[int]:
    """Stage widths ``min(C0 * 2^l, C_max)`` for l = 0..2, then the bottleneck width."""
    if min(base_width, channel_cap, bottleneck_width) < 1:
        raise ConfigError("channel plan inputs must be positive")
    return [min(base_width * 2 ** level, channel_cap) for level in range(3)] + [bottleneck_width]


class Stage(Layer):
    """Optional downsample followed by one LightweightBlock."""

    def __init__(self, block, down=None):
        super().__init__()
        if down is not None:
            self.down = down
        else:
            self.down = None
        self.block = block

    def __call__(self, x, s=None):
        if self.down is not None:
            x = self.down(x)
        return self.block(x, s)


class DecoderLevel(Layer):
    """Upsample, fuse with the encoder skip, refine with a LightweightBlock (no CSA)."""

    def __init__(self, up, fusion, block):
        super().__init__()
        self.up = up
        self.fusion = fusion
        self.block = block

    def __call__(self, x, skip, s=None):
        x = self.up(x)
        if x.shape[2:] != skip.shape[2:]:
            x = ops.interpolate_trilinear(x, skip.shape[2:])
        return self.block(self.fusion(x, skip, s), s)


class DALightModel(Layer):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = channel_plan(cfg.base_width, cfg.channel_cap, cfg.bottleneck_width)
        self.widths = widths
        ab = cfg.ablation
        norm = "group" if ab == "no_scanner_norm" else "scanner_aware"
        sep = "dense" if ab == "no_sepconv" else "separable"
        csa = ab != "no_csa"

        def block(c_in, c_out, conv_kind, use_csa=False):
            return LightweightBlock(BlockConfig(c_in, c_out, conv_kind, norm, use_csa,
                                                cfg.se_reduction, None, cfg.num_buckets), rng)

        self.stem = InitProjection(cfg.num_modalities, widths[0], rng)
        self.e0 = Stage(block(widths[0], widths[0], "dense"))
        self.e1 = Stage(block(widths[1], widths[1], sep), Downsample(widths[0], widths[1], rng))
        self.e2 = Stage(block(widths[2], widths[2], sep, csa), Downsample(widths[1], widths[2], rng))
        self.e3 = Stage(block(widths[3], widths[3], sep, csa), Downsample(widths[2], widths[3], rng))

        def fusion(c, level):
            if level == 0 or ab == "no_ssfb":
                return SimpleFusion(c, c, rng)
            return SSFB(c, c, cfg.ssfb_rank, rng)

        # decoding order: d0 at 1/4 resolution (fused with e2), d1 with e1, d2 with e0
        self.d0 = DecoderLevel(Upsample(widths[3], widths[2], rng), fusion(widths[2], 0),
                               block(widths[2], widths[2], sep))
        self.d1 = DecoderLevel(Upsample(widths[2], widths[1], rng), fusion(widths[1], 1),
                               block(widths[1], widths[1], sep))
        self.d2 = DecoderLevel(Upsample(widths[1], widths[0], rng), fusion(widths[0], 2),
                               block(widths[0], widths[0], "dense"))
        self.head = SegmentationHead(widths[0], cfg.num_classes, rng)

    def check_input(self, x: Tensor, s=None) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.num_modalities:
            raise ShapeError(f"expected [B, {self.cfg.num_modalities}, D, H, W], got {x.shape}")
        bad = [n for n in x.shape[2:] if n % 8]
        if bad:
            raise ShapeError(f"spatial extents must be divisible by 8, got {x.shape[2:]}")
        if s is not None:
            ids = [s] if np.isscalar(s) else list(s)
            if any(not 0 <= int(v) < self.cfg.num_buckets for v in ids):
                raise ValueError(f"bucket {s} outside [0, {self.cfg.num_buckets})")

    def features(self, x: Tensor, s=None) -> dict[str, Tensor]:
        """Every stage output keyed by stage name (used for the shape ladder)."""
        self.check_input(x, s)
        out = {"stem": self.stem(x)}
        out["e0"] = self.e0(out["stem"], s)
        out["e1"] = self.e1(out["e0"], s)
        out["e2"] = self.e2(out["e1"], s)
        out["e3"] = self.e3(out["e2"], s)
        out["d0"] = self.d0(out["e3"], out["e2"], s)
        out["d1"] = self.d1(out["d0"], out["e1"], s)
        out["d2"] = self.d2(out["d1"], out["e0"], s)
        out["logits"] = self.head(out["d2"])
        return out

    def logits(self, x: Tensor, s=None) -> Tensor:
        return self.features(x, s)["logits"]

    def __call__(self, x: Tensor, s=None) -> Tensor:
        """Per-voxel class probabilities ``[B, K, D, H, W]``."""
        return ops.softmax_channel(self.logits(x, s))

    def modules_of(self, cls) -> list[tuple[str, Layer]]:
        return [(n, m) for n, m in self.named_layers() if isinstance(m, cls)]


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> DALightModel:
    return DALightModel(cfg or ModelConfig(), seed)


def variant_config(variant: str, base: ModelConfig | None = None) -> ModelConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(base or ModelConfig(), ablation=VARIANTS[variant])


STAGES = ("stem", "e0", "e1", "e2", "e3", "d0", "d1", "d2", "head")


def count_params(model: DALightModel) -> dict:
    """Exact learnable totals, overall and per top-level stage."""
    per_stage = {name: getattr(model, name).param_count for name in STAGES}
    total = model.param_count
    assert total == sum(per_stage.values())
    return {"total": total, "per_stage": per_stage}


def separable_report(model: DALightModel) -> list[dict]:
    """Each separable conv's count next to its dense equivalent."""
    rows = []
    for name, layer in model.modules_of(SepConv3d):
        rows.append({"layer": name, "c_in": layer.c_in, "c_out": layer.c_out,
                     "separable": layer.param_count, "dense_equivalent": layer.dense_equivalent()})
    return rows


def estimate_flops(model: DALightModel, shape) -> dict[str, int]:
    """Analytic multiply-accumulate counts per layer for an input ``[B, M, D, H, W]``.

    Convolutions, projections and attention products are counted;
    normalization, activations and pooling are not.
    """
    B = shape[0]
    D, H, W = shape[-3:]
    if D % 8 or H % 8 or W % 8:
        raise ShapeError(f"spatial extents must be divisible by 8, got {(D, H, W)}")
    res = [(D >> l, H >> l, W >> l) for l in range(4)]
    vox = [B * d * h * w for d, h, w in res]
    counts: dict[str, int] = {}

    def conv(name, layer, v):
        counts[name] = layer.macs(v)

    def block(prefix, blk, level):
        v = vox[level]
        conv(prefix + ".conv1", blk.conv1, v)
        conv(prefix + ".conv2", blk.conv2, v)
        counts[prefix + ".se"] = B * (blk.se.fc1.c_in * blk.se.fc1.c_out + blk.se.fc2.c_in * blk.se.fc2.c_out)
        if blk.csa is not None:
            for part, c in blk.csa.macs(res[level][0]).items():
                counts[f"{prefix}.csa.{part}"] = B * c
        if blk.proj is not None:
            conv(prefix + ".proj", blk.proj, v)

    conv("stem.conv", model.stem.conv, vox[0])
    block("e0.block", model.e0.block, 0)
    for l in (1, 2, 3):
        stage = getattr(model, f"e{l}")
        conv(f"e{l}.down", stage.down, vox[l])
        block(f"e{l}.block", stage.block, l)
    for i, level in enumerate((2, 1, 0)):
        dec = getattr(model, f"d{i}")
        counts[f"d{i}.up"] = dec.up.macs(vox[level + 1])
        if isinstance(dec.fusion, SSFB):
            for part, c in dec.fusion.macs(vox[level]).items():
                counts[f"d{i}.fusion.{part}"] = c
        else:
            conv(f"d{i}.fusion.proj", dec.fusion.proj, vox[level])
        block(f"d{i}.block", dec.block, level)
    conv("head.conv", model.head.conv, vox[0])
    conv("head.classifier", model.head.classifier, vox[0])
    return counts


def count_modules(model: DALightModel) -> dict[str, int]:
    return {"csa": len(model.modules_of(CrossSliceAttention)), "ssfb": len(model.modules_of(SSFB))}
