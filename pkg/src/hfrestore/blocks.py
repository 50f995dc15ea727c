"""Network building blocks.

Every block is a pair ``init_<block>(store, prefix, ...) -> dict`` that
registers parameters and a pure forward function taking the input tensors and
that dict.  Feature maps are [C, H, W]; token sequences are [L, C].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, ShapeError
from .params import ParameterStore
from .tensor import SortIndex, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    width: int

    def __post_init__(self):
        if self.heads < 1 or self.width < 1 or self.width % self.heads:
            raise ConfigurationError(
                f"width {self.width} is not divisible by {self.heads} heads")

    @property
    def key_dim(self) -> int:
        return self.width // self.heads


@dataclass(frozen=True)
class HistConfig:
    bins: int = 16
    bin_frequency: int = 16

    def __post_init__(self):
        if self.bins < 1 or self.bin_frequency < 1:
            raise ConfigurationError("bin counts must be positive")


@dataclass(frozen=True)
class MsffConfig:
    expansion: int = 2

    def __post_init__(self):
        if self.expansion < 1:
            raise ConfigurationError("MSFF expansion must be positive")


@dataclass
class TaskFeaturePyramid:
    t1: Optional[Tensor]
    t2: Optional[Tensor]
    t3: Optional[Tensor]


# ---------------------------------------------------------------------------
# shared pieces


def to_tokens(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)), (1, 0))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    return T.reshape(T.transpose(x, (1, 0)), (x.shape[1], h, w))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[..., in] @ w[out, in]^T + b."""
    y = T.matmul(x, T.transpose(w, (1, 0)))
    return y if b is None else y + b


def pointwise(x: Tensor, p: dict, name: str) -> Tensor:
    return T.conv2d(x, p[f"{name}_w"], p.get(f"{name}_b"), mode="pointwise")


def depthwise(x: Tensor, p: dict, name: str) -> Tensor:
    return T.conv2d(x, p[f"{name}_w"], p.get(f"{name}_b"), mode="depthwise")


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, scale: float) -> Tensor:
    """softmax(q k^T * scale) v per head.  q: [..., Lq, C]; k, v: [..., Lk, C]."""
    c = q.shape[-1]
    d = c // heads

    def split_heads(x):
        lead = x.shape[:-2]
        x = T.reshape(x, (*lead, x.shape[-2], heads, d))
        n = x.ndim
        return T.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))

    out = T.attention(split_heads(q), split_heads(k), split_heads(v), scale)
    n = out.ndim
    out = T.transpose(out, (*range(n - 3), n - 2, n - 3, n - 1))
    return T.reshape(out, (*out.shape[:-2], c))


def _init_ffn(store: ParameterStore, prefix: str, c: int, r: int, p: dict) -> None:
    p["ffn1_w"] = store.normal(f"{prefix}.ffn1.w", (r * c, c))
    p["ffn1_b"] = store.zeros(f"{prefix}.ffn1.b", (r * c,))
    p["ffn2_w"] = store.normal(f"{prefix}.ffn2.w", (c, r * c))
    p["ffn2_b"] = store.zeros(f"{prefix}.ffn2.b", (c,))


def ffn(x: Tensor, p: dict) -> Tensor:
    return pointwise(T.relu(pointwise(x, p, "ffn1")), p, "ffn2")


def _init_linear(store: ParameterStore, prefix: str, name: str, c_out: int, c_in: int, p: dict) -> None:
    p[f"{name}_w"] = store.normal(f"{prefix}.{name}.w", (c_out, c_in))
    p[f"{name}_b"] = store.zeros(f"{prefix}.{name}.b", (c_out,))


def _init_ln(store: ParameterStore, prefix: str, name: str, c: int, p: dict) -> None:
    p[f"{name}_w"] = store.ones(f"{prefix}.{name}.w", (c,))
    p[f"{name}_b"] = store.zeros(f"{prefix}.{name}.b", (c,))


def ln(x: Tensor, p: dict, name: str) -> Tensor:
    return T.layernorm(x, p[f"{name}_w"], p[f"{name}_b"], axis=0)


# ---------------------------------------------------------------------------
# Task Intra-Patch Block


def partition_patches(x: Tensor) -> Tensor:
    """[C, H, W] -> [4, C, H/2, W/2], patches in row-major grid order."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"cannot split {x.shape} into a 2x2 patch grid")
    y = T.reshape(x, (c, 2, h // 2, 2, w // 2))
    y = T.transpose(y, (1, 3, 0, 2, 4))
    return T.reshape(y, (4, c, h // 2, w // 2))


def merge_patches(p: Tensor) -> Tensor:
    """Inverse of :func:`partition_patches`."""
    _, c, h, w = p.shape
    y = T.reshape(p, (2, 2, c, h, w))
    y = T.transpose(y, (2, 0, 3, 1, 4))
    return T.reshape(y, (c, 2 * h, 2 * w))


def init_tipb(store: ParameterStore, prefix: str, width: int, patch_hw: int, expansion: int = 2) -> dict:
    p = {"query": store.normal(f"{prefix}.query", (patch_hw, width))}
    for name in ("k", "v", "proj"):
        _init_linear(store, prefix, name, width, width, p)
    _init_ffn(store, prefix, width, expansion, p)
    return p


def tipb_forward(x: Tensor, p: dict, acfg: AttentionConfig) -> Tensor:
    """FFN(MSA(x) + x) where queries are the learnable task sequence and keys/values
    come from each of the four half-size patches of ``x``."""
    c, h, w = x.shape
    if c % acfg.heads:
        raise ConfigurationError(f"width {c} is not divisible by {acfg.heads} heads")
    patches = partition_patches(x)
    hp, wp = h // 2, w // 2
    tokens = T.transpose(T.reshape(patches, (4, c, hp * wp)), (0, 2, 1))
    q = p["query"]
    if q.shape != (hp * wp, c):
        raise ShapeError(f"task query {q.shape} does not match patch tokens {(hp * wp, c)}")
    k = linear(tokens, p["k_w"], p["k_b"])
    v = linear(tokens, p["v_w"], p["v_b"])
    attn = multihead_attention(q, k, v, acfg.heads, 1.0 / math.sqrt(acfg.key_dim))
    attn = linear(attn, p["proj_w"], p["proj_b"])
    attn = T.reshape(T.transpose(attn, (0, 2, 1)), (4, c, hp, wp))
    return ffn(merge_patches(attn) + x, p)


# ---------------------------------------------------------------------------
# Task Sequence Generator


def init_task_query(store: ParameterStore, prefix: str, widths: tuple[int, int, int]) -> dict:
    c1, c2, c3 = widths
    p: dict = {}
    _init_linear(store, prefix, "align1", c3, c1, p)
    _init_linear(store, prefix, "align2", c3, c2, p)
    for name, k in (("conv7", 7), ("conv5", 5), ("conv3", 3), ("fuse", 3)):
        p[f"{name}_w"] = store.normal(f"{prefix}.{name}.w", (c3, c3, k, k))
        p[f"{name}_b"] = store.zeros(f"{prefix}.{name}.b", (c3,))
    return p


def _full(x: Tensor, p: dict, name: str) -> Tensor:
    return T.conv2d(x, p[f"{name}_w"], p[f"{name}_b"], mode="full")


def _downsample_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    while x.shape[1:] != size:
        if x.shape[1] < size[0] or x.shape[2] < size[1]:
            raise ShapeError(f"cannot downsample {x.shape} to {size}")
        x = T.bilinear_resize(x, 0.5)
    return x


def task_query_build(pyr: TaskFeaturePyramid, p: dict) -> Tensor:
    """Fuse T1..T3 into the task query map at T3's resolution and width."""
    if pyr.t1 is None or pyr.t2 is None or pyr.t3 is None:
        raise ContractError("task feature pyramid must provide T1, T2 and T3")
    size = pyr.t3.shape[1:]
    a1 = pointwise(_downsample_to(pyr.t1, size), p, "align1")
    a2 = pointwise(_downsample_to(pyr.t2, size), p, "align2")
    s = _full(a1, p, "conv7") + _full(a2, p, "conv5") + _full(pyr.t3, p, "conv3")
    return _full(s, p, "fuse")


def init_tsg(store: ParameterStore, prefix: str, width: int, task_width: int, expansion: int = 2) -> dict:
    p: dict = {}
    _init_linear(store, prefix, "q", width, task_width, p)
    for name in ("k", "v", "proj"):
        _init_linear(store, prefix, name, width, width, p)
    _init_ffn(store, prefix, width, expansion, p)
    return p


def tsg_attend(x: Tensor, qtask: Tensor, p: dict, acfg: AttentionConfig) -> Tensor:
    """MSA(x, Q_task) + x: cross-attention with task-derived queries, plus the residual."""
    c, h, w = x.shape
    if qtask.shape[1:] != (h, w):
        raise ShapeError(f"task query map {qtask.shape} does not cover feature map {x.shape}")
    q = linear(to_tokens(qtask), p["q_w"], p["q_b"])
    if q.shape[-1] != c:
        raise ShapeError(f"projected task query width {q.shape[-1]} != feature width {c}")
    xt = to_tokens(x)
    k = linear(xt, p["k_w"], p["k_b"])
    v = linear(xt, p["v_w"], p["v_b"])
    attn = multihead_attention(q, k, v, acfg.heads, 1.0 / math.sqrt(acfg.key_dim))
    return from_tokens(linear(attn, p["proj_w"], p["proj_b"]), h, w) + x


def tsg_forward(x: Tensor, qtask: Tensor, p: dict, acfg: AttentionConfig) -> Tensor:
    return ffn(tsg_attend(x, qtask, p, acfg), p)


# ---------------------------------------------------------------------------
# Dynamic-range Histogram Self-Attention


def sort_rows_cols(x: Tensor) -> tuple[Tensor, SortIndex, SortIndex]:
    """Sort each row (along width), then each column (along height)."""
    xs, idx_h = T.sort_with_index(x, axis=2)
    xs, idx_v = T.sort_with_index(xs, axis=1)
    return xs, idx_h, idx_v


def unsort_rows_cols(x: Tensor, idx_h: SortIndex, idx_v: SortIndex) -> Tensor:
    return T.scatter(T.scatter(x, idx_v), idx_h)


def init_dynamic_range_conv(store: ParameterStore, prefix: str, width: int) -> dict:
    p: dict = {}
    _init_linear(store, prefix, "drc_pw", width, width, p)
    p["drc_dw_w"] = store.normal(f"{prefix}.drc_dw.w", (width, 3, 3))
    p["drc_dw_b"] = store.zeros(f"{prefix}.drc_dw.b", (width,))
    return p


def dynamic_range_conv(f: Tensor, p: dict) -> tuple[Tensor, SortIndex, SortIndex]:
    """Sort the first channel half spatially, then 1x1 and 3x3 depthwise convs.

    Returns the convolved map and the two sort indices needed to restore the
    sorted half to its original positions later.
    """
    c = f.shape[0]
    if c % 2:
        raise ConfigurationError(f"dynamic-range convolution needs an even width, got {c}")
    f1, f2 = T.split(f, 2, axis=0)
    f1, idx_h, idx_v = sort_rows_cols(f1)
    x = T.concat([f1, f2], axis=0)
    return depthwise(pointwise(x, p, "drc_pw"), p, "drc_dw"), idx_h, idx_v


def bin_layout(n: int, count: int, mode: str) -> tuple[int, int]:
    """(number of bins, elements per bin) for a length-``n`` sequence.

    ``bhr`` fixes the number of bins; ``fhr`` fixes the elements per bin.
    """
    if mode == "bhr":
        per = -(-n // count)
        return count, per
    if mode == "fhr":
        return -(-n // count), count
    raise ConfigurationError(f"unknown histogram reshape {mode!r}")


def bin_reshape(x: Tensor, count: int, mode: str) -> Tensor:
    """[C, N] sorted sequences -> [C, bins, per_bin], padding by repeating the last element."""
    c, n = x.shape
    nb, per = bin_layout(n, count, mode)
    total = nb * per
    if total != n:
        idx = np.minimum(np.arange(total), n - 1)
        x = T.take(x, idx, axis=1)
    if x.shape[1] % per:
        raise ConfigurationError("bin divisibility violated after padding")
    return T.reshape(x, (c, nb, per))


def binned_attention(q: Tensor, k: Tensor, v: Tensor, count: int, mode: str,
                     heads: int) -> Tensor:
    """Attention among the elements of each bin; q, k, v are sorted [C, N] sequences."""
    c, n = v.shape
    if c % heads:
        raise ConfigurationError(f"width {c} is not divisible by {heads} heads")

    def tokens(x):
        return T.transpose(bin_reshape(x, count, mode), (1, 2, 0))  # [bins, per, C]

    out = multihead_attention(tokens(q), tokens(k), tokens(v), heads, 1.0 / math.sqrt(heads))
    nb, per, _ = out.shape
    out = T.reshape(T.transpose(out, (2, 0, 1)), (c, nb * per))
    if nb * per != n:
        out = T.slice_axis(out, 0, n, axis=1)
    return out


def histogram_attention(v: Tensor, fqk1: Tensor, fqk2: Tensor, hcfg: HistConfig,
                        acfg: AttentionConfig) -> Tensor:
    """Dual-path (BHR x FHR) attention over intensity-sorted values, scattered back."""
    c, h, w = v.shape
    if fqk1.shape != (2 * c, h, w) or fqk2.shape != (2 * c, h, w):
        raise ShapeError(f"query-key maps {fqk1.shape}, {fqk2.shape} must be {(2 * c, h, w)}")
    n = h * w
    vs, d = T.sort_with_index(T.reshape(v, (c, n)), axis=1)
    d2 = d.tile(2)
    q1, k1 = T.split(T.gather(T.reshape(fqk1, (2 * c, n)), d2, check=False), 2, axis=0)
    q2, k2 = T.split(T.gather(T.reshape(fqk2, (2 * c, n)), d2, check=False), 2, axis=0)
    a_b = binned_attention(q1, k1, vs, hcfg.bins, "bhr", acfg.heads)
    a_f = binned_attention(q2, k2, vs, hcfg.bin_frequency, "fhr", acfg.heads)
    return T.reshape(T.scatter(a_b * a_f, d), (c, h, w))


def init_dhsa(store: ParameterStore, prefix: str, width: int) -> dict:
    p = init_dynamic_range_conv(store, prefix, width)
    _init_linear(store, prefix, "qkv", 5 * width, width, p)
    _init_linear(store, prefix, "proj", width, width, p)
    return p


def dhsa_forward(f: Tensor, p: dict, hcfg: HistConfig, acfg: AttentionConfig) -> Tensor:
    c = f.shape[0]
    x, idx_h, idx_v = dynamic_range_conv(f, p)
    v, fqk1, fqk2 = T.split(pointwise(x, p, "qkv"), [c, 2 * c, 2 * c], axis=0)
    a = histogram_attention(v, fqk1, fqk2, hcfg, acfg)
    a1, a2 = T.split(a, 2, axis=0)
    a = T.concat([unsort_rows_cols(a1, idx_h, idx_v), a2], axis=0)
    return pointwise(a, p, "proj")


# ---------------------------------------------------------------------------
# Multi-scale feature-fusion feed-forward


def init_msff(store: ParameterStore, prefix: str, width: int, cfg: MsffConfig) -> dict:
    e = cfg.expansion * width
    p: dict = {}
    _init_ln(store, prefix, "ln", width, p)
    _init_linear(store, prefix, "expand", e, width, p)
    for name, ch, k in (("p1", e, 3), ("s1", e, 5), ("p2", 2 * e, 3), ("s2", 2 * e, 5)):
        p[f"{name}_w"] = store.normal(f"{prefix}.{name}.w", (ch, k, k))
        p[f"{name}_b"] = store.zeros(f"{prefix}.{name}.b", (ch,))
    _init_linear(store, prefix, "fuse", width, 4 * e, p)
    return p


def msff_forward(x: Tensor, p: dict) -> Tensor:
    xh = pointwise(ln(x, p, "ln"), p, "expand")
    xp1 = T.relu(depthwise(xh, p, "p1"))
    xs1 = T.relu(depthwise(xh, p, "s1"))
    xp2 = T.relu(depthwise(T.concat([xp1, xs1], axis=0), p, "p2"))
    xs2 = T.relu(depthwise(T.concat([xs1, xp1], axis=0), p, "s2"))
    return pointwise(T.concat([xp2, xs2], axis=0), p, "fuse") + x


# ---------------------------------------------------------------------------
# Histogram Transformer Block


def init_htb(store: ParameterStore, prefix: str, width: int, mcfg: MsffConfig) -> dict:
    p: dict = {}
    _init_ln(store, prefix, "ln1", width, p)
    p["dhsa"] = init_dhsa(store, f"{prefix}.dhsa", width)
    p["msff"] = init_msff(store, f"{prefix}.msff", width, mcfg)
    return p


def htb_forward(f: Tensor, p: dict, hcfg: HistConfig, acfg: AttentionConfig) -> Tensor:
    # the MSFF owns the second layer norm and residual
    f = f + dhsa_forward(ln(f, p, "ln1"), p["dhsa"], hcfg, acfg)
    return msff_forward(f, p["msff"])


# ---------------------------------------------------------------------------
# SPFI cross-self-attention fusion


def init_spfi(store: ParameterStore, prefix: str, width: int) -> dict:
    p: dict = {}
    for name in ("ln_task", "ln_x", "ln_self"):
        _init_ln(store, prefix, name, width, p)
    for name in ("cq", "ck", "cv", "co", "sq", "sk", "sv", "so"):
        _init_linear(store, prefix, name, width, width, p)
    return p


def spfi_fuse(x: Tensor, task: Tensor, p: dict) -> Tensor:
    """Cross-attention (queries from the task map) then self-attention, both pre-norm residual."""
    if task.shape != x.shape:
        raise ShapeError(f"task features {task.shape} do not match backbone {x.shape}")
    c, h, w = x.shape
    scale = 1.0 / math.sqrt(c)
    tt = to_tokens(ln(task, p, "ln_task"))
    xt = to_tokens(ln(x, p, "ln_x"))
    cross = multihead_attention(linear(tt, p["cq_w"], p["cq_b"]), linear(xt, p["ck_w"], p["ck_b"]),
                                linear(xt, p["cv_w"], p["cv_b"]), 1, scale)
    x = x + from_tokens(linear(cross, p["co_w"], p["co_b"]), h, w)
    st = to_tokens(ln(x, p, "ln_self"))
    self_ = multihead_attention(linear(st, p["sq_w"], p["sq_b"]), linear(st, p["sk_w"], p["sk_b"]),
                                linear(st, p["sv_w"], p["sv_b"]), 1, scale)
    return x + from_tokens(linear(self_, p["so_w"], p["so_b"]), h, w)


# ---------------------------------------------------------------------------
# Adaptive mixup


def adaptive_mixup(f_down: Tensor, f_up: Tensor, theta: Tensor) -> Tensor:
    """sigmoid(theta) * f_down + (1 - sigmoid(theta)) * f_up."""
    if f_down.shape != f_up.shape:
        raise ShapeError(f"mixup operands differ: {f_down.shape} vs {f_up.shape}")
    g = T.sigmoid(theta)
    return g * f_down + (1.0 - g) * f_up
