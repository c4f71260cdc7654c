"""Network building blocks: conv, inverted-residual mobile block,
scaled dot-product attention, transformer encoder, the mobile-ViT
fusion block and the dual-channel CM block.

Blocks own their parameters (plain Tensors) and batch-norm states.
Parameter traversal follows attribute declaration order so checkpoint
layout is stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BatchNorm2dState, Tensor


@dataclass
class BlockConfig:
    """Geometry/width knobs shared by the block constructors."""

    in_channels: int = 1
    out_channels: int = 16
    kernel: int = 3
    stride: int = 1
    padding: int | None = None  # None -> same padding for odd kernels
    expansion_ratio: float = 4.0
    token_dim: int = 64
    heads: int = 2
    d_k: int | None = None  # None -> token_dim // heads
    transformer_depth: int = 2
    patch_w: int = 2
    patch_h: int = 2
    ffn_dim: int = 128

    def __post_init__(self):
        if self.d_k is None:
            if self.token_dim % self.heads:
                raise ConfigError(
                    f"token_dim {self.token_dim} not divisible by heads {self.heads}"
                )
            self.d_k = self.token_dim // self.heads
        if self.heads * self.d_k != self.token_dim:
            raise ConfigError(
                f"heads*d_k = {self.heads}*{self.d_k} != token_dim {self.token_dim}"
            )
        if self.padding is None:
            self.padding = self.kernel // 2


class Module:
    """Minimal parameter container; children found via __dict__ order."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, BatchNorm2dState):
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_bn_states(f"{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_bn_states(f"{key}.{i}.")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _param(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _kaiming_std(fan_in):
    return math.sqrt(2.0 / fan_in)


class ConvBlock(Module):
    """Convolution + batch norm + silu. kernel=1 gives the pointwise variant."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None,
                 dtype=np.float64, activation=True):
        rng = rng or np.random.default_rng(0)
        self.kernel_size = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.activation = activation
        self.weight = _param(rng, (out_ch, in_ch, kernel, kernel),
                             _kaiming_std(in_ch * kernel * kernel), dtype)
        self.gamma = Tensor(np.ones(out_ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.bn_state = BatchNorm2dState.create(out_ch, dtype=dtype)

    def forward(self, x, mode="train"):
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        out = T.batchnorm2d(out, self.gamma, self.beta, self.bn_state, mode)
        return T.silu(out) if self.activation else out


class MobileBlock(Module):
    """Inverted residual: expand -> depthwise -> project, skip iff shape-preserving."""

    def __init__(self, in_ch, out_ch, stride=1, expansion_ratio=4.0, kernel=3,
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        hidden = max(1, int(round(in_ch * expansion_ratio)))
        self.stride = stride
        self.use_skip = stride == 1 and in_ch == out_ch
        self.expand = ConvBlock(in_ch, hidden, kernel=1, stride=1, rng=rng, dtype=dtype)
        self.dw_weight = _param(rng, (hidden, kernel, kernel),
                                _kaiming_std(kernel * kernel), dtype)
        self.dw_gamma = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)
        self.dw_beta = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.dw_state = BatchNorm2dState.create(hidden, dtype=dtype)
        self.dw_padding = kernel // 2
        self.project = ConvBlock(hidden, out_ch, kernel=1, stride=1, rng=rng,
                                 dtype=dtype, activation=False)

    def forward(self, x, mode="train"):
        out = self.expand.forward(x, mode)
        out = T.depthwise_conv2d(out, self.dw_weight, stride=self.stride,
                                 padding=self.dw_padding)
        out = T.silu(T.batchnorm2d(out, self.dw_gamma, self.dw_beta, self.dw_state, mode))
        out = self.project.forward(out, mode)
        if self.use_skip:
            out = T.add(out, x)
        return out


def attention(q, k, v, d_k):
    """Scaled dot-product attention on [..., tokens, width] operands."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != d_k or k.shape[-1] != d_k:
        raise ShapeError(f"query/key width must be d_k={d_k}, got {q.shape} / {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / math.sqrt(d_k))
    weights = T.softmax(scores)
    return T.matmul(weights, v)


class MultiHeadSelfAttention(Module):
    """Per-head Q/K/V projections, attention, concat, output projection."""

    def __init__(self, dim, heads, d_k=None, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        if d_k is None:
            if dim % heads:
                raise ConfigError(f"token dim {dim} not divisible by {heads} heads")
            d_k = dim // heads
        self.dim = dim
        self.heads = heads
        self.d_k = d_k
        inner = heads * d_k
        std = 1.0 / math.sqrt(dim)
        self.wq = _param(rng, (dim, inner), std, dtype)
        self.wk = _param(rng, (dim, inner), std, dtype)
        self.wv = _param(rng, (dim, inner), std, dtype)
        self.wo = _param(rng, (inner, dim), 1.0 / math.sqrt(inner), dtype)

    def _split_heads(self, x, n_tokens):
        # [..., n, h*d_k] -> [..., h, n, d_k]
        lead = x.shape[:-2]
        x = T.reshape(x, lead + (n_tokens, self.heads, self.d_k))
        axes = list(range(x.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return T.transpose(x, axes)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"mhsa expects token width {self.dim}, got {x.shape}")
        n = x.shape[-2]
        q = self._split_heads(T.linear(x, self.wq), n)
        k = self._split_heads(T.linear(x, self.wk), n)
        v = self._split_heads(T.linear(x, self.wv), n)
        out = attention(q, k, v, self.d_k)
        axes = list(range(out.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        out = T.transpose(out, axes)  # [..., n, h, d_k]
        out = T.reshape(out, out.shape[:-2] + (self.heads * self.d_k,))
        return T.linear(out, self.wo)


class TransformerEncoder(Module):
    """Stack of pre-norm [LN -> MHSA -> +] [LN -> FFN -> +] layers."""

    def __init__(self, dim, depth, heads, ffn_dim, d_k=None, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.layers = []
        for _ in range(depth):
            layer = Module()
            layer.ln1_gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
            layer.ln1_beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
            layer.mhsa = MultiHeadSelfAttention(dim, heads, d_k, rng=rng, dtype=dtype)
            layer.ln2_gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
            layer.ln2_beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
            layer.ffn_w1 = _param(rng, (dim, ffn_dim), 1.0 / math.sqrt(dim), dtype)
            layer.ffn_b1 = Tensor(np.zeros(ffn_dim, dtype=dtype), requires_grad=True)
            layer.ffn_w2 = _param(rng, (ffn_dim, dim), 1.0 / math.sqrt(ffn_dim), dtype)
            layer.ffn_b2 = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
            self.layers.append(layer)

    def forward(self, x):
        for ly in self.layers:
            h = T.layernorm(x, ly.ln1_gamma, ly.ln1_beta)
            x = T.add(x, ly.mhsa.forward(h))
            h = T.layernorm(x, ly.ln2_gamma, ly.ln2_beta)
            h = T.linear(T.silu(T.linear(h, ly.ffn_w1, ly.ffn_b1)), ly.ffn_w2, ly.ffn_b2)
            x = T.add(x, h)
        return x


class MobileViTBlock(Module):
    """Local conv, patch unfold, transformer across patches per pixel
    position, fold back, fuse with the block input. Spatial dims preserved."""

    def __init__(self, channels, token_dim, depth=2, heads=2, patch_w=2, patch_h=2,
                 ffn_dim=None, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        ffn_dim = ffn_dim or 2 * token_dim
        self.patch_w = patch_w
        self.patch_h = patch_h
        self.local = ConvBlock(channels, channels, kernel=3, stride=1, rng=rng, dtype=dtype)
        self.to_tokens = _param(rng, (token_dim, channels, 1, 1), _kaiming_std(channels), dtype)
        self.encoder = TransformerEncoder(token_dim, depth, heads, ffn_dim, rng=rng, dtype=dtype)
        self.from_tokens = _param(rng, (channels, token_dim, 1, 1), _kaiming_std(token_dim), dtype)
        self.fuse = ConvBlock(2 * channels, channels, kernel=3, stride=1, rng=rng, dtype=dtype)

    def forward(self, x, mode="train"):
        B, C, H, W = x.shape
        out = self.local.forward(x, mode)
        out = T.conv2d(out, self.to_tokens)
        t = T.unfold_patches(out, self.patch_w, self.patch_h)  # [B,P,pix,d]
        t = T.transpose(t, (0, 2, 1, 3))  # attend across patches per pixel position
        t = self.encoder.forward(t)
        t = T.transpose(t, (0, 2, 1, 3))
        out = T.fold_patches(t, H, W, self.patch_w, self.patch_h)
        out = T.conv2d(out, self.from_tokens)
        out = T.concat([out, x], axis=1)
        return self.fuse.forward(out, mode)


@dataclass
class CMBlockConfig:
    """Widths/depths of the two CM-block channels. Defaults are a small
    mobile-ViT-style profile; everything is overridable."""

    in_channels: int = 1
    stem_channels: int = 16
    mobile_channels: tuple = (24, 48)
    expansion_ratio: float = 4.0
    token_dim: int = 64
    transformer_depth: int = 2
    heads: int = 2
    patch_w: int = 2
    patch_h: int = 2
    ffn_dim: int = 128
    out_channels: int = 128

    @property
    def downsample(self):
        # stem stride 2 plus one stride-2 mobile stage per entry
        return 2 ** (1 + len(self.mobile_channels))


class CMBlock(Module):
    """Dual-channel Siamese module: a conv channel for local contour
    features and a mobile-ViT channel for long-range attention features,
    merged by channel concat + pointwise conv."""

    def __init__(self, cfg: CMBlockConfig, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg

        def stack():
            blocks = [ConvBlock(cfg.in_channels, cfg.stem_channels, kernel=3,
                                stride=2, rng=rng, dtype=dtype)]
            ch = cfg.stem_channels
            for out_ch in cfg.mobile_channels:
                blocks.append(MobileBlock(ch, out_ch, stride=2,
                                          expansion_ratio=cfg.expansion_ratio,
                                          rng=rng, dtype=dtype))
                ch = out_ch
            return blocks, ch

        self.conv_channel, conv_out = stack()
        self.vit_channel, vit_out = stack()
        self.vit_channel.append(
            MobileViTBlock(vit_out, cfg.token_dim, depth=cfg.transformer_depth,
                           heads=cfg.heads, patch_w=cfg.patch_w, patch_h=cfg.patch_h,
                           ffn_dim=cfg.ffn_dim, rng=rng, dtype=dtype)
        )
        if conv_out + vit_out <= 0:
            raise ConfigError("cm_block channel merge has zero width")
        self.merge = ConvBlock(conv_out + vit_out, cfg.out_channels, kernel=1,
                               stride=1, rng=rng, dtype=dtype)

    def forward(self, x, mode="train"):
        a = x
        for blk in self.conv_channel:
            a = blk.forward(a, mode)
        b = x
        for blk in self.vit_channel:
            b = blk.forward(b, mode)
        if a.shape[2:] != b.shape[2:]:
            raise ConfigError(
                f"cm_block channels disagree on spatial dims: {a.shape} vs {b.shape}"
            )
        merged = T.concat([a, b], axis=1)
        return self.merge.forward(merged, mode)
