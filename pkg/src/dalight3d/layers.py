"""DALight-3D building blocks with exact parameter accounting.

Layers register their learnable tensors and sub-layers by attribute
assignment, so ``named_parameters`` walks a composite layer in definition
order and visits every learnable exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, parameter


@dataclass
class LayerParams:
    entries: list[tuple[str, Tensor, bool]] = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return sum(t.size for _, t, learnable in self.entries if learnable)

    def names(self) -> list[str]:
        return [n for n, _, _ in self.entries]


class Layer:
    """Base class: attribute assignment registers parameters and children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Layer):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_layers(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        for name, child in self._children.items():
            yield prefix + name, child
            yield from child.named_layers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def layer_params(self) -> LayerParams:
        return LayerParams([(n, t, True) for n, t in self.named_parameters()])

    @property
    def param_count(self) -> int:
        return self.layer_params().param_count

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        from .errors import TensorNameError

        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            raise TensorNameError(set(own) - set(state), set(state) - set(own))
        for name, t in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != t.shape:
                    raise ShapeError(f"{name}: stored shape {arr.shape} != {t.shape}")
                t.data[...] = arr


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def zeros(*shape) -> Tensor:
    return parameter(np.zeros(shape))


def ones(*shape) -> Tensor:
    return parameter(np.ones(shape))


def default_groups(channels: int) -> int:
    """8 when it divides ``channels``, else the largest divisor not above 8."""
    return max(g for g in range(1, min(8, channels) + 1) if channels % g == 0)


# ---------------------------------------------------------------------------
# convolutions


class Conv3d(Layer):
    """Dense ``k^3`` convolution with bias."""

    kind = "dense"

    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, padding=None):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = he_normal(rng, (c_out, c_in, kernel, kernel, kernel), c_in * kernel ** 3)
        self.bias = zeros(c_out)

    def __call__(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def macs(self, out_voxels: int) -> int:
        return out_voxels * self.c_out * self.c_in * self.kernel ** 3


class Pointwise(Layer):
    """``1x1x1`` channel mixing; also serves as the dense layer on ``[B, C]``."""

    def __init__(self, c_in, c_out, rng, bias=True, zero_init=False):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.weight = zeros(c_out, c_in) if zero_init else he_normal(rng, (c_out, c_in), c_in)
        if bias:
            self.bias = zeros(c_out)
        else:
            self.bias = None

    def __call__(self, x):
        return ops.pointwise_conv3d(x, self.weight, self.bias)

    def macs(self, voxels: int) -> int:
        return voxels * self.c_in * self.c_out


class SepConv3d(Layer):
    """Depthwise ``3^3`` filter (no bias) followed by a pointwise map with bias.

    Learnable count is ``c_in*27 + c_in*c_out + c_out``.
    """

    kind = "separable"

    def __init__(self, c_in, c_out, rng, kernel=3):
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.depthwise = he_normal(rng, (c_in, kernel, kernel, kernel), kernel ** 3)
        self.pointwise = Pointwise(c_in, c_out, rng)

    def __call__(self, x):
        return self.pointwise(ops.depthwise_conv3d(x, self.depthwise, 1, self.kernel // 2))

    def dense_equivalent(self) -> int:
        return self.c_in * self.c_out * self.kernel ** 3 + self.c_out

    def macs(self, out_voxels: int) -> int:
        return out_voxels * (self.c_in * self.kernel ** 3 + self.c_in * self.c_out)


def make_conv(kind: str, c_in: int, c_out: int, rng) -> Layer:
    if kind == "dense":
        return Conv3d(c_in, c_out, rng)
    if kind == "separable":
        return SepConv3d(c_in, c_out, rng)
    raise ConfigError(f"conv_kind must be 'dense' or 'separable', got {kind!r}")


class Downsample(Conv3d):
    """Dense ``3^3`` convolution, stride 2, padding 1; extents must be even."""

    def __init__(self, c_in, c_out, rng):
        super().__init__(c_in, c_out, rng, kernel=3, stride=2, padding=1)

    def __call__(self, x):
        odd = [n for n in x.shape[2:] if n % 2]
        if odd:
            raise ShapeError(f"downsample needs even spatial extents, got {x.shape[2:]}")
        return super().__call__(x)


class Upsample(Layer):
    """Transposed convolution, kernel 2 and stride 2."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.weight = he_normal(rng, (c_in, c_out, 2, 2, 2), c_in)
        self.bias = zeros(c_out)

    def __call__(self, x):
        return ops.transposed_conv3d(x, self.weight, self.bias)

    def macs(self, in_voxels: int) -> int:
        return in_voxels * 8 * self.c_in * self.c_out


# ---------------------------------------------------------------------------
# normalization


class GroupNorm(Layer):
    def __init__(self, channels, groups=None, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.groups = default_groups(channels) if groups is None else groups
        if channels % self.groups:
            raise ConfigError(f"{self.groups} groups do not divide {channels} channels")
        self.eps = eps
        self.gamma = ones(channels)
        self.beta = zeros(channels)

    def __call__(self, x, s=None):
        return ops.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ScannerAwareNorm(Layer):
    """Group normalization with affine parameters looked up per bucket.

    ``forward(x, s)`` uses row ``s`` of the ``[S, C]`` gamma/beta tables, or
    the learned default pair when ``s`` is None. ``s`` may also be a sequence
    with one bucket per batch sample.
    """

    def __init__(self, channels, num_buckets, groups=None, eps=1e-5):
        super().__init__()
        self.channels, self.num_buckets = channels, num_buckets
        self.groups = default_groups(channels) if groups is None else groups
        if channels % self.groups:
            raise ConfigError(f"{self.groups} groups do not divide {channels} channels")
        self.eps = eps
        self.gamma_table = ones(num_buckets, channels)
        self.beta_table = zeros(num_buckets, channels)
        self.gamma_default = ones(1, channels)
        self.beta_default = zeros(1, channels)

    def _rows(self, s, batch):
        if s is None:
            return self.gamma_default, self.beta_default, [0] * batch
        ids = [int(s)] * batch if np.isscalar(s) else [int(v) for v in s]
        if len(ids) != batch:
            raise ShapeError(f"got {len(ids)} bucket ids for a batch of {batch}")
        bad = [v for v in ids if not 0 <= v < self.num_buckets]
        if bad:
            raise ValueError(f"bucket id {bad[0]} outside [0, {self.num_buckets})")
        return self.gamma_table, self.beta_table, ids

    def __call__(self, x, s=None):
        gt, bt, ids = self._rows(s, x.shape[0])
        xhat = ops.group_norm(x, self.groups, eps=self.eps)
        return ops.add(ops.mul(xhat, ops.take_rows(gt, ids)), ops.take_rows(bt, ids))


def make_norm(kind: str, channels: int, num_buckets: int) -> Layer:
    if kind == "group":
        return GroupNorm(channels)
    if kind == "scanner_aware":
        return ScannerAwareNorm(channels, num_buckets)
    raise ConfigError(f"norm_kind must be 'group' or 'scanner_aware', got {kind!r}")


# ---------------------------------------------------------------------------
# attention and recalibration


class SEBlock(Layer):
    """Squeeze-and-excitation: global mean, C -> C/r -> C, GELU then sigmoid gate."""

    def __init__(self, channels, rng, reduction=4):
        super().__init__()
        if reduction < 1:
            raise ConfigError("se_reduction must be >= 1")
        self.hidden = max(1, channels // reduction)
        self.fc1 = Pointwise(channels, self.hidden, rng)
        self.fc2 = Pointwise(self.hidden, channels, rng)

    def __call__(self, x):
        squeezed = ops.pool(x, "global_mean")
        gate = ops.sigmoid(self.fc2(ops.gelu(self.fc1(squeezed))))
        return ops.mul(x, gate)


class CrossSliceAttention(Layer):
    """Attention along the depth axis of in-plane-pooled features.

    Slice descriptors ``p = mean_HW(x)`` are projected to rank ``d``; the
    ``D x D`` matrix ``A = softmax(Q^T K / sqrt(d))`` mixes the value slices and
    the result, mapped back to ``C`` channels, is added to every ``(h, w)``
    position. ``W_o`` starts at zero, so a fresh layer is the identity.

    ``attention_flops`` holds the multiply count of the two ``D x D``
    products from the most recent forward.
    """

    def __init__(self, channels, rank, rng):
        super().__init__()
        self.channels, self.rank = channels, rank
        self.w_q = he_normal(rng, (rank, channels), channels)
        self.w_k = he_normal(rng, (rank, channels), channels)
        self.w_v = he_normal(rng, (rank, channels), channels)
        self.w_o = zeros(channels, rank)
        self.attention_flops = 0
        self.last_attention: np.ndarray | None = None

    def attention(self, x):
        p = ops.pool(x, "mean_over_HW")  # [B, C, D]
        q = ops.pointwise_conv3d(p, self.w_q)  # [B, d, D]
        k = ops.pointwise_conv3d(p, self.w_k)
        v = ops.pointwise_conv3d(p, self.w_v)
        scores = ops.affine_scalar(ops.matmul(ops.transpose_last(q), k), 1.0 / np.sqrt(self.rank))
        a = ops.softmax(scores, axis=-1)  # [B, D, D], rows sum to 1
        B, D = x.shape[0], x.shape[2]
        self.attention_flops = 2 * B * self.rank * D * D
        return a, v

    def __call__(self, x):
        a, v = self.attention(x)
        self.last_attention = a.data
        correction = ops.pointwise_conv3d(ops.matmul(v, a), self.w_o)  # [B, C, D]
        return ops.add(x, correction)

    def macs(self, d: int) -> dict[str, int]:
        return {"projection": 4 * self.channels * self.rank * d, "attention": 2 * self.rank * d * d}


class SSFB(Layer):
    """Skip fusion blending a low-rank attention path and a channel gate.

    Attention path (linearized, ``O(N r^2)``): ``Q`` from the decoder map,
    ``K``, ``V`` from the encoder map, all ``r x N``. Keys are softmaxed over
    positions, ``G = V K~^T`` is ``r x r`` and ``o_attn = W_out (G Q)``.
    Gate path: ``f_enc * sigmoid(MLP([gap(f_dec); gap(f_enc)]))``.
    The blend ``alpha = sigmoid(logit)`` mixes them, and a ``3^3`` conv, GN and
    GELU fuse ``[f_dec; m]`` down to ``c_enc`` channels.
    """

    def __init__(self, c_dec, c_enc, rank, rng):
        super().__init__()
        self.c_dec, self.c_enc, self.rank = c_dec, c_enc, rank
        self.q_proj = Pointwise(c_dec, rank, rng, bias=False)
        self.k_proj = Pointwise(c_enc, rank, rng, bias=False)
        self.v_proj = Pointwise(c_enc, rank, rng, bias=False)
        self.out_proj = Pointwise(rank, c_enc, rng, bias=False, zero_init=True)
        hidden = max(8, (c_dec + c_enc) // 4)
        self.gate_fc1 = Pointwise(c_dec + c_enc, hidden, rng)
        self.gate_fc2 = Pointwise(hidden, c_enc, rng, zero_init=True)
        self.alpha_logit = zeros(1)
        self.fuse = Conv3d(c_dec + c_enc, c_enc, rng)
        self.norm = GroupNorm(c_enc)
        self.attention_flops = 0

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_logit.data[0])))

    def attention_path(self, f_dec, f_enc):
        B = f_dec.shape[0]
        n = int(np.prod(f_dec.shape[2:]))
        q = ops.reshape(self.q_proj(f_dec), (B, self.rank, n))
        k = ops.reshape(self.k_proj(f_enc), (B, self.rank, n))
        v = ops.reshape(self.v_proj(f_enc), (B, self.rank, n))
        k_soft = ops.softmax(k, axis=-1)
        context = ops.matmul(v, ops.transpose_last(k_soft))  # [B, r, r]
        mixed = ops.matmul(context, q)  # [B, r, N]
        self.attention_flops = 2 * B * n * self.rank * self.rank
        out = self.out_proj(mixed)  # [B, c_enc, N]
        return ops.reshape(out, f_enc.shape)

    def gate_path(self, f_dec, f_enc):
        desc = ops.concat_channels([ops.pool(f_dec, "global_mean"), ops.pool(f_enc, "global_mean")])
        gate = ops.sigmoid(self.gate_fc2(ops.gelu(self.gate_fc1(desc))))
        return ops.mul(f_enc, gate)

    def blend(self, f_dec, f_enc):
        if f_dec.shape[0] != f_enc.shape[0] or f_dec.shape[2:] != f_enc.shape[2:]:
            raise ShapeError(f"SSFB inputs are not aligned: {f_dec.shape} vs {f_enc.shape}")
        alpha = ops.sigmoid(self.alpha_logit)
        one_minus = ops.affine_scalar(alpha, -1.0, 1.0)
        o_attn = self.attention_path(f_dec, f_enc)
        o_gate = self.gate_path(f_dec, f_enc)
        return ops.add(ops.scale_by(o_attn, alpha), ops.scale_by(o_gate, one_minus))

    def __call__(self, f_dec, f_enc, s=None):
        m = self.blend(f_dec, f_enc)
        return ops.gelu(self.norm(self.fuse(ops.concat_channels([f_dec, m]))))

    def macs(self, n: int) -> dict[str, int]:
        c = self.fuse.macs(n)
        return {
            "projection": n * self.rank * (self.c_dec + 2 * self.c_enc),
            "attention": 2 * n * self.rank * self.rank,
            "output": n * self.rank * self.c_enc,
            "fuse": c,
        }


class SimpleFusion(Layer):
    """Concatenate, pointwise conv to the skip width, GN, GELU."""

    def __init__(self, c_dec, c_enc, rng):
        super().__init__()
        self.proj = Pointwise(c_dec + c_enc, c_enc, rng)
        self.norm = GroupNorm(c_enc)

    def __call__(self, f_dec, f_enc, s=None):
        if f_dec.shape[2:] != f_enc.shape[2:]:
            raise ShapeError(f"fusion inputs are not aligned: {f_dec.shape} vs {f_enc.shape}")
        return ops.gelu(self.norm(self.proj(ops.concat_channels([f_dec, f_enc]))))


# ---------------------------------------------------------------------------
# residual unit, stem and head


@dataclass
class BlockConfig:
    c_in: int
    c_out: int
    conv_kind: str = "separable"
    norm_kind: str = "scanner_aware"
    use_csa: bool = False
    se_reduction: int = 4
    csa_rank: int | None = None
    num_buckets: int = 8

    def validate(self) -> None:
        problems = []
        if self.c_in < 1 or self.c_out < 1:
            problems.append("c_in and c_out must be >= 1")
        if self.conv_kind not in ("dense", "separable"):
            problems.append(f"conv_kind: unknown {self.conv_kind!r}")
        if self.norm_kind not in ("group", "scanner_aware"):
            problems.append(f"norm_kind: unknown {self.norm_kind!r}")
        if self.se_reduction < 1:
            problems.append("se_reduction must be >= 1")
        if self.csa_rank is not None and self.csa_rank < 1:
            problems.append("csa_rank must be >= 1")
        if problems:
            raise ConfigError(problems)

    @property
    def rank(self) -> int:
        return self.csa_rank if self.csa_rank is not None else max(8, self.c_out // 4)


class LightweightBlock(Layer):
    """``GELU(SE(N2(C2(GELU(N1(C1(h)))))) [-> CSA] + Proj(h))``.

    CSA already carries its own residual, so it is applied as ``z <- CSA(z)``.
    ``Proj`` is the identity when input and output widths match, otherwise a
    pointwise map with bias.
    """

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.conv1 = make_conv(cfg.conv_kind, cfg.c_in, cfg.c_out, rng)
        self.norm1 = make_norm(cfg.norm_kind, cfg.c_out, cfg.num_buckets)
        self.conv2 = make_conv(cfg.conv_kind, cfg.c_out, cfg.c_out, rng)
        self.norm2 = make_norm(cfg.norm_kind, cfg.c_out, cfg.num_buckets)
        self.se = SEBlock(cfg.c_out, rng, cfg.se_reduction)
        if cfg.use_csa:
            self.csa = CrossSliceAttention(cfg.c_out, cfg.rank, rng)
        else:
            self.csa = None
        if cfg.c_in != cfg.c_out:
            self.proj = Pointwise(cfg.c_in, cfg.c_out, rng)
        else:
            self.proj = None

    def __call__(self, h, s=None):
        z = ops.gelu(self.norm1(self.conv1(h), s))
        z = self.se(self.norm2(self.conv2(z), s))
        if self.csa is not None:
            z = self.csa(z)
        skip = h if self.proj is None else self.proj(h)
        return ops.gelu(ops.add(z, skip))


class InitProjection(Layer):
    """Stem: ``3^3`` conv from the modalities to the base width, GN, GELU."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.conv = Conv3d(c_in, c_out, rng)
        self.norm = GroupNorm(c_out)

    def __call__(self, x, s=None):
        return ops.gelu(self.norm(self.conv(x)))


class SegmentationHead(Layer):
    """``3^3`` conv, GN, GELU, then a pointwise map to class logits.

    The final map starts at zero, so an untrained head predicts the uniform
    posterior.
    """

    def __init__(self, channels, num_classes, rng):
        super().__init__()
        self.conv = Conv3d(channels, channels, rng)
        self.norm = GroupNorm(channels)
        self.classifier = Pointwise(channels, num_classes, rng, zero_init=True)

    def __call__(self, f, s=None):
        return self.classifier(ops.gelu(self.norm(self.conv(f))))
