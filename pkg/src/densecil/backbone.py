"""Tiny ViT building blocks: patch embedding, multi-head self-attention, MLP.

Tokens are kept per head throughout: a width-``d`` feature row is really
``H`` heads of ``head_dim`` values side by side, and layer norm is applied
to each head token separately.  That per-head discipline is what lets the
same blocks be stitched across task experts later without re-normalizing
foreign widths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class PatchEmbedConfig:
    image_size: int
    patch_size: int
    in_channels: int
    head_dim: int
    heads: int

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        for name in ("image_size", "patch_size", "in_channels", "head_dim", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def width(self) -> int:
        return self.head_dim * self.heads


@dataclass
class PatchEmbedParams:
    weight: Tensor    # (C*ps*ps, D*H)
    bias: Tensor      # (D*H,)


def init_patch_embed(rng: np.random.Generator, cfg: PatchEmbedConfig) -> PatchEmbedParams:
    return PatchEmbedParams(
        weight=Tensor(T.fan_in_normal(rng, (cfg.patch_dim, cfg.width)), requires_grad=True),
        bias=Tensor(np.zeros(cfg.width), requires_grad=True),
    )


def init_positional_table(rng: np.random.Generator, num_patches: int, head_dim: int) -> Tensor:
    """One learned D-vector per patch, added to every head's token.

    Drawn at 1/sqrt(D) scale so position and patch content start with
    comparable magnitude, as they do in a standard ViT.
    """
    std = 1.0 / math.sqrt(head_dim)
    return Tensor(rng.normal(0.0, std, size=(num_patches, head_dim)), requires_grad=True)


def extract_patches(image: np.ndarray, cfg: PatchEmbedConfig) -> np.ndarray:
    """Flatten non-overlapping patches in row-major grid order -> (P, C*ps*ps)."""
    c, h, w = image.shape
    if c != cfg.in_channels or h != cfg.image_size or w != cfg.image_size:
        raise ConfigError(
            f"image shape {image.shape} does not match config "
            f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
    ps = cfg.patch_size
    side = h // ps
    patches = image.reshape(c, side, ps, side, ps)
    patches = patches.transpose(1, 3, 0, 2, 4).reshape(side * side, c * ps * ps)
    return np.ascontiguousarray(patches)


def patch_embed(image: Tensor, params: PatchEmbedParams, pos: Tensor,
                cfg: PatchEmbedConfig) -> Tensor:
    """Project flattened patches and add the per-head positional table.

    Returns (P, D*H) token rows.
    """
    patches = Tensor(extract_patches(image.data, cfg))
    tokens = T.linear(patches, params.weight, params.bias)
    toks3 = T.reshape(tokens, (cfg.num_patches, cfg.heads, cfg.head_dim))
    pos3 = T.reshape(pos, (cfg.num_patches, 1, cfg.head_dim))
    return T.reshape(T.add(toks3, pos3), (cfg.num_patches, cfg.width))


# ------------------------------------------------------------- attention

@dataclass
class SelfAttentionParams:
    """Per-head q/k/v projections plus the per-task fusion layer.

    The stacks hold one D x D matrix per head; fusion mixes the
    concatenated head outputs back to the task width.
    """
    ln_gain: Tensor   # (D,)
    ln_bias: Tensor   # (D,)
    wq: Tensor        # (H, D, D)
    wk: Tensor        # (H, D, D)
    wv: Tensor        # (H, D, D)
    bq: Tensor        # (H, 1, D)
    bk: Tensor        # (H, 1, D)
    bv: Tensor        # (H, 1, D)
    fuse_w: Tensor    # (D*H, D*H)
    fuse_b: Tensor    # (D*H,)


def init_self_attention(rng: np.random.Generator, heads: int, head_dim: int) -> SelfAttentionParams:
    d, h = head_dim, heads
    mk = lambda *shape: Tensor(T.fan_in_normal(rng, shape), requires_grad=True)
    zeros = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
    return SelfAttentionParams(
        ln_gain=Tensor(np.ones(d), requires_grad=True),
        ln_bias=zeros(d),
        wq=mk(h, d, d), wk=mk(h, d, d), wv=mk(h, d, d),
        bq=zeros(h, 1, d), bk=zeros(h, 1, d), bv=zeros(h, 1, d),
        fuse_w=mk(d * h, d * h), fuse_b=zeros(d * h),
    )


def per_head_layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
                        head_dim: int, eps: float = 1e-5) -> Tensor:
    """Layer norm applied to each head token of a (P, D*H) row matrix."""
    p, width = x.shape
    heads = width // head_dim
    toks = T.reshape(x, (p, heads, head_dim))
    return T.reshape(T.layer_norm(toks, gain, bias, eps), (p, width))


@dataclass
class TiedAttentionParams:
    """One q/k/v projection shared by every head of every task.

    Used by the joint spatial-task wiring: identical tokens then produce
    identical keys regardless of which head owns them, which is what makes
    cross-head attention comparable to within-head attention.
    """
    ln_gain: Tensor   # (D,)
    ln_bias: Tensor
    wq: Tensor        # (D, D)
    wk: Tensor
    wv: Tensor
    bq: Tensor        # (D,)
    bk: Tensor
    bv: Tensor


def init_tied_attention(rng: np.random.Generator, head_dim: int) -> TiedAttentionParams:
    d = head_dim
    mk = lambda: Tensor(T.fan_in_normal(rng, (d, d)), requires_grad=True)
    zeros = lambda: Tensor(np.zeros(d), requires_grad=True)
    return TiedAttentionParams(
        ln_gain=Tensor(np.ones(d), requires_grad=True), ln_bias=zeros(),
        wq=mk(), wk=mk(), wv=mk(), bq=zeros(), bk=zeros(), bv=zeros(),
    )


def tied_head_projections(r: Tensor, params: TiedAttentionParams, head_dim: int):
    """q/k/v of every head through the shared matrices: each (H, P, D)."""
    p, width = r.shape
    heads = width // head_dim
    toks = T.reshape(r, (p, heads, head_dim))
    x = T.layer_norm(toks, params.ln_gain, params.ln_bias)
    flat = T.reshape(x, (p * heads, head_dim))
    out = []
    for w, b in ((params.wq, params.bq), (params.wk, params.bk),
                 (params.wv, params.bv)):
        y = T.reshape(T.linear(flat, w, b), (p, heads, head_dim))
        out.append(T.swap_axes(y, 0, 1))
    return tuple(out)


def head_projections(r: Tensor, params: SelfAttentionParams, head_dim: int):
    """Normalized per-head q/k/v stacks, head-major: each (H, P, D)."""
    p, width = r.shape
    heads = width // head_dim
    toks = T.reshape(r, (p, heads, head_dim))
    x = T.layer_norm(toks, params.ln_gain, params.ln_bias)
    xh = T.swap_axes(x, 0, 1)                      # (H, P, D)
    q = T.add(T.bmm(xh, params.wq), params.bq)
    k = T.add(T.bmm(xh, params.wk), params.bk)
    v = T.add(T.bmm(xh, params.wv), params.bv)
    return q, k, v


def attention_readout(r: Tensor, q: Tensor, k: Tensor, v: Tensor,
                      fuse_w: Tensor, fuse_b: Tensor, head_dim: int):
    """Per-head scaled dot-product attention plus residual fusion.

    q/k/v are head-major (H, P, D); returns the (P, D*H) block output and
    the (H, P, P) attention weights.
    """
    p, width = r.shape
    logits = T.bmm(q, T.swap_axes(k, 1, 2))        # (H, P, P)
    attn = T.softmax_rows(logits, math.sqrt(head_dim))
    av = T.bmm(attn, v)                            # (H, P, D)
    cat = T.reshape(T.swap_axes(av, 0, 1), (p, width))
    s = T.add(r, T.linear(cat, fuse_w, fuse_b))
    return s, attn


def mhsa_block(r: Tensor, params: SelfAttentionParams, head_dim: int):
    """Residual multi-head self-attention: s = r + fuse(per-head attention).

    Each head attends over all P patches within itself.  Returns the block
    output and the (H, P, P) attention weights.
    """
    width = r.shape[1]
    if width % head_dim != 0:
        raise T.ShapeError(f"width {width} not divisible by head dim {head_dim}")
    q, k, v = head_projections(r, params, head_dim)
    return attention_readout(r, q, k, v, params.fuse_w, params.fuse_b, head_dim)


# ------------------------------------------------------------- MLP

@dataclass
class MlpStageParams:
    """One linear stage of the feature-mixing block, with its own pre-norm."""
    ln_gain: Tensor   # (din_head,)
    ln_bias: Tensor
    w: Tensor         # (din, dout) over the full task width
    b: Tensor


def init_mlp_stage(rng: np.random.Generator, din_head: int, din: int, dout: int) -> MlpStageParams:
    return MlpStageParams(
        ln_gain=Tensor(np.ones(din_head), requires_grad=True),
        ln_bias=Tensor(np.zeros(din_head), requires_grad=True),
        w=Tensor(T.fan_in_normal(rng, (din, dout)), requires_grad=True),
        b=Tensor(np.zeros(dout), requires_grad=True),
    )


@dataclass
class MlpParams:
    fc1: MlpStageParams   # D*H -> gamma*D*H
    fc2: MlpStageParams   # gamma*D*H -> D*H


def init_mlp(rng: np.random.Generator, heads: int, head_dim: int, gamma: int) -> MlpParams:
    width = heads * head_dim
    hidden = gamma * width
    return MlpParams(
        fc1=init_mlp_stage(rng, head_dim, width, hidden),
        fc2=init_mlp_stage(rng, gamma * head_dim, hidden, width),
    )


def mlp_block(s: Tensor, params: MlpParams, head_dim: int, gamma: int):
    """Two-stage mixing with residual: r = s + fc2(ln(gelu(fc1(ln(s))))).

    Norms run per head token (dim D before fc1, gamma*D before fc2).
    Returns (r, o) with o the post-GELU intermediate.
    """
    o = T.gelu(T.linear(per_head_layer_norm(s, params.fc1.ln_gain, params.fc1.ln_bias, head_dim),
                        params.fc1.w, params.fc1.b))
    upd = T.linear(per_head_layer_norm(o, params.fc2.ln_gain, params.fc2.ln_bias,
                                       gamma * head_dim),
                   params.fc2.w, params.fc2.b)
    return T.add(s, upd), o


@dataclass
class TransformerBlockParams:
    attn: SelfAttentionParams
    mlp: MlpParams


def init_transformer_block(rng: np.random.Generator, heads: int, head_dim: int,
                           gamma: int) -> TransformerBlockParams:
    return TransformerBlockParams(
        attn=init_self_attention(rng, heads, head_dim),
        mlp=init_mlp(rng, heads, head_dim, gamma),
    )


def transformer_block(r: Tensor, params: TransformerBlockParams, head_dim: int, gamma: int):
    s, attn = mhsa_block(r, params.attn, head_dim)
    out, _ = mlp_block(s, params.mlp, head_dim, gamma)
    return out, attn
