"""Building blocks: dilated residual dense CNN, windowed attention, the
CNN-ViT hybrid block with its channel-budget transition, squeeze-excitation,
and the backbone chain with its ablation variants.

All blocks preserve spatial size; feature maps are (C, H, W). Parameters live
in a ParamStore under hierarchical dot-separated names, so one ``init_*`` /
``*_forward`` pair per block shares a prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import ParamStore, ShapeError, Tensor

BACKBONE_VARIANTS = ("drdn", "rstb", "xbb", "ih1", "ih2", "ih3")

# Dense-layer dilation pattern, cycled and truncated to the layer count.
DILATION_CYCLE = (1, 2, 4)


@dataclass(frozen=True)
class XBBConfig:
    """Hyperparameters of one backbone (image-domain or k-space-domain)."""

    g0: int = 64  # base channel width
    g: int = 48  # dense growth rate
    d: int = 4  # number of chained blocks
    c: int = 5  # conv layers per dense block
    alpha: float = 0.5  # ViT-branch channel budget: floor(alpha * g0)
    window_sizes: tuple[int, ...] = (16, 16)  # per-STL attention windows
    heads: int = 4
    variant: str = "xbb"

    def __post_init__(self):
        if not (self.g0 >= 1 and self.g >= 1 and self.d >= 1 and self.c >= 1):
            raise ValueError(f"g0, g, d, c must all be >= 1, got {self}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        vit_c = self.vit_channels
        if vit_c < self.heads:
            raise ValueError(f"floor(alpha*g0)={vit_c} is smaller than heads={self.heads}")
        if vit_c % self.heads != 0:
            raise ValueError(f"floor(alpha*g0)={vit_c} not divisible by heads={self.heads}")
        if self.variant not in BACKBONE_VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if not self.window_sizes or any(w < 1 for w in self.window_sizes):
            raise ValueError(f"window_sizes must be positive, got {self.window_sizes}")

    @property
    def vit_channels(self) -> int:
        return int(np.floor(self.alpha * self.g0))

    def stl_window(self, layer: int = 0) -> int:
        return self.window_sizes[min(layer, len(self.window_sizes) - 1)]


@dataclass
class BlockOutput:
    fused: Tensor
    cnn_branch: Tensor | None = None
    vit_branch: Tensor | None = None


# ---------------------------------------------------------------------------
# parameter initialisation helpers


def init_conv(store: ParamStore, rng, name: str, c_out: int, c_in: int, k: int,
              gain: str = "relu", zero: bool = False) -> None:
    fan_in = c_in * k * k
    std = np.sqrt((2.0 if gain == "relu" else 1.0) / fan_in)
    w = np.zeros((c_out, c_in, k, k)) if zero else rng.normal(0.0, std, (c_out, c_in, k, k))
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(c_out))


def init_dense(store: ParamStore, rng, name: str, d_in: int, d_out: int,
               gain: str = "linear", zero: bool = False) -> None:
    std = np.sqrt((2.0 if gain == "relu" else 1.0) / d_in)
    w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(d_out))


def init_layernorm(store: ParamStore, name: str, c: int) -> None:
    store.add(f"{name}.gain", np.ones(c))
    store.add(f"{name}.shift", np.zeros(c))


def conv(x: Tensor, store: ParamStore, name: str, dilation: int = 1) -> Tensor:
    return ops.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], dilation=dilation)


def dense(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return ops.dense(x, store[f"{name}.w"], store[f"{name}.b"])


def layernorm(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return ops.layernorm(x, store[f"{name}.gain"], store[f"{name}.shift"])


# ---------------------------------------------------------------------------
# dilated residual dense block


def drdb_dilations(c: int) -> list[int]:
    return [DILATION_CYCLE[i % len(DILATION_CYCLE)] for i in range(c)]


def init_drdb(store: ParamStore, rng, prefix: str, g0: int, g: int, c: int) -> None:
    for i in range(c):
        init_conv(store, rng, f"{prefix}.layer{i}", g, g0 + i * g, 3)
    init_conv(store, rng, f"{prefix}.lff", g0, g0 + c * g, 1, gain="linear")


def drdb_forward(x: Tensor, store: ParamStore, prefix: str, c: int, g: int) -> Tensor:
    feats = [x]
    for i, dil in enumerate(drdb_dilations(c)):
        inp = feats[0] if i == 0 else ops.concat(feats, axis=0)
        feats.append(ops.relu(conv(inp, store, f"{prefix}.layer{i}", dilation=dil)))
    fused = conv(ops.concat(feats, axis=0), store, f"{prefix}.lff")
    return ops.add(fused, x)


# ---------------------------------------------------------------------------
# windowed multi-head self-attention


_REL_IDX_CACHE: dict[int, np.ndarray] = {}


def relative_position_index(window: int) -> np.ndarray:
    """Index into a ((2w-1)^2, heads) bias table for every token pair."""
    idx = _REL_IDX_CACHE.get(window)
    if idx is None:
        coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
        flat = coords.reshape(2, -1)
        rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
        idx = (rel[0] * (2 * window - 1) + rel[1]).astype(np.intp)
        _REL_IDX_CACHE[window] = idx
    return idx


def window_partition(x: Tensor, window: int) -> tuple[Tensor, tuple[int, int]]:
    """(C,H,W) -> (n_windows, window*window, C), zero-padding H and W up."""
    c, h, w = x.shape
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    if (hp, wp) != (h, w):
        x = ops.pad2d(x, hp - h, wp - w)
    t = ops.transpose(x, (1, 2, 0))
    t = ops.reshape(t, (hp // window, window, wp // window, window, c))
    t = ops.transpose(t, (0, 2, 1, 3, 4))
    return ops.reshape(t, ((hp // window) * (wp // window), window * window, c)), (h, w)


def window_merge(tokens: Tensor, window: int, orig_hw: tuple[int, int]) -> Tensor:
    h, w = orig_hw
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    c = tokens.shape[-1]
    t = ops.reshape(tokens, (hp // window, wp // window, window, window, c))
    t = ops.transpose(t, (0, 2, 1, 3, 4))
    t = ops.reshape(t, (hp, wp, c))
    x = ops.transpose(t, (2, 0, 1))
    if (hp, wp) != (h, w):
        x = ops.crop2d(x, h, w)
    return x


def init_wmsa(store: ParamStore, rng, prefix: str, c: int, heads: int, window: int,
              use_rel_bias: bool = True) -> None:
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    for name in ("q", "k", "v", "out"):
        init_dense(store, rng, f"{prefix}.{name}", c, c)
    if use_rel_bias:
        table = rng.normal(0.0, 0.02, ((2 * window - 1) ** 2, heads))
        store.add(f"{prefix}.rel_bias", table)


def attention_tokens(tokens: Tensor, store: ParamStore, prefix: str, heads: int,
                     bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product MSA over (B, T, C) token groups."""
    b, t, c = tokens.shape
    if c % heads != 0:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    hd = c // heads
    scale = 1.0 / np.sqrt(hd)

    def split_heads(x):
        x = ops.reshape(x, (b, t, heads, hd))
        return ops.transpose(x, (0, 2, 1, 3))

    q = split_heads(dense(tokens, store, f"{prefix}.q"))
    k = split_heads(dense(tokens, store, f"{prefix}.k"))
    v = split_heads(dense(tokens, store, f"{prefix}.v"))
    attn = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), scale)
    if bias is not None:
        attn = ops.add(attn, bias)
    attn = ops.softmax(attn, axis=-1)
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, c))
    return dense(out, store, f"{prefix}.out")


def _rel_bias(store: ParamStore, prefix: str, window: int, heads: int) -> Tensor:
    idx = relative_position_index(window)
    t = window * window
    bias = ops.gather_rows(store[f"{prefix}.rel_bias"], idx.ravel())
    bias = ops.reshape(bias, (t, t, heads))
    return ops.transpose(bias, (2, 0, 1))  # (heads, T, T), broadcast over windows


def wmsa_forward(x: Tensor, store: ParamStore, prefix: str, window: int, heads: int,
                 use_rel_bias: bool = True) -> Tensor:
    tokens, orig_hw = window_partition(x, window)
    bias = _rel_bias(store, prefix, window, heads) if use_rel_bias else None
    out = attention_tokens(tokens, store, prefix, heads, bias=bias)
    return window_merge(out, window, orig_hw)


# ---------------------------------------------------------------------------
# Swin transformer layer (pre-norm, MLP ratio 2, gelu) and the residual chain


def init_stl(store: ParamStore, rng, prefix: str, c: int, heads: int, window: int) -> None:
    init_layernorm(store, f"{prefix}.ln1", c)
    init_wmsa(store, rng, f"{prefix}.attn", c, heads, window)
    init_layernorm(store, f"{prefix}.ln2", c)
    init_dense(store, rng, f"{prefix}.mlp1", c, 2 * c, gain="relu")
    init_dense(store, rng, f"{prefix}.mlp2", 2 * c, c)


def stl_forward(x: Tensor, store: ParamStore, prefix: str, window: int, heads: int) -> Tensor:
    tokens, orig_hw = window_partition(x, window)
    bias = _rel_bias(store, f"{prefix}.attn", window, heads)
    t = ops.add(tokens, attention_tokens(layernorm(tokens, store, f"{prefix}.ln1"),
                                         store, f"{prefix}.attn", heads, bias=bias))
    mlp = dense(ops.gelu(dense(layernorm(t, store, f"{prefix}.ln2"), store, f"{prefix}.mlp1")),
                store, f"{prefix}.mlp2")
    return window_merge(ops.add(t, mlp), window, orig_hw)


def init_rstb(store: ParamStore, rng, prefix: str, c: int, heads: int,
              windows: tuple[int, ...]) -> None:
    for j in range(2):
        w = windows[min(j, len(windows) - 1)]
        init_stl(store, rng, f"{prefix}.stl{j}", c, heads, w)
    init_conv(store, rng, f"{prefix}.conv", c, c, 3, gain="linear")


def rstb_forward(x: Tensor, store: ParamStore, prefix: str, heads: int,
                 windows: tuple[int, ...]) -> Tensor:
    y = x
    for j in range(2):
        w = windows[min(j, len(windows) - 1)]
        y = stl_forward(y, store, f"{prefix}.stl{j}", w, heads)
    return ops.add(conv(y, store, f"{prefix}.conv"), x)


# ---------------------------------------------------------------------------
# transition layer, hybrid block, squeeze-excitation


def init_x_tl(store: ParamStore, rng, prefix: str, c: int, alpha: float) -> None:
    c_out = int(np.floor(alpha * c))
    if c_out < 1:
        raise ValueError(f"floor(alpha*c) = floor({alpha}*{c}) < 1")
    init_conv(store, rng, prefix, c_out, c, 1, gain="linear")


def x_tl_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return conv(x, store, prefix)


def init_xbb(store: ParamStore, rng, prefix: str, cfg: XBBConfig) -> None:
    init_drdb(store, rng, f"{prefix}.drdb", cfg.g0, cfg.g, cfg.c)
    init_x_tl(store, rng, f"{prefix}.xtl", cfg.g0, cfg.alpha)
    init_stl(store, rng, f"{prefix}.stl", cfg.vit_channels, cfg.heads, cfg.stl_window())
    init_conv(store, rng, f"{prefix}.fuse", cfg.g0, cfg.g0 + cfg.vit_channels, 1, gain="linear")


def xbb_forward(x: Tensor, store: ParamStore, prefix: str, cfg: XBBConfig) -> BlockOutput:
    cnn = drdb_forward(x, store, f"{prefix}.drdb", cfg.c, cfg.g)
    vit = stl_forward(x_tl_forward(x, store, f"{prefix}.xtl"), store, f"{prefix}.stl",
                      cfg.stl_window(), cfg.heads)
    fused = conv(ops.concat([cnn, vit], axis=0), store, f"{prefix}.fuse")
    return BlockOutput(fused=fused, cnn_branch=cnn, vit_branch=vit)


def init_se(store: ParamStore, rng, prefix: str, c: int, reduction: int = 4) -> None:
    if c < reduction:
        raise ValueError(f"SE needs channels >= reduction, got c={c}, reduction={reduction}")
    init_dense(store, rng, f"{prefix}.fc1", c, c // reduction, gain="relu")
    init_dense(store, rng, f"{prefix}.fc2", c // reduction, c)


def se_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    pooled = ops.mean_(x, axis=(1, 2))
    gate = ops.sigmoid(dense(ops.relu(dense(pooled, store, f"{prefix}.fc1")), store, f"{prefix}.fc2"))
    return ops.mul(x, ops.reshape(gate, (x.shape[0], 1, 1)))


# ---------------------------------------------------------------------------
# backbone chain: D blocks + conventional global feature fusion (1x1 then 3x3)


def backbone_block_kinds(cfg: XBBConfig) -> list[str]:
    if cfg.variant == "xbb":
        return ["xbb"] * cfg.d
    if cfg.variant == "drdn":
        return ["drdb"] * cfg.d
    if cfg.variant == "rstb":
        return ["rstb"] * cfg.d
    n_rstb = int(cfg.variant[2:])  # ih1..ih3: replace the last k blocks, back to front
    if n_rstb > cfg.d:
        raise ValueError(f"variant {cfg.variant} needs at least {n_rstb} blocks, got d={cfg.d}")
    return ["drdb"] * (cfg.d - n_rstb) + ["rstb"] * n_rstb


def init_backbone(store: ParamStore, rng, prefix: str, cfg: XBBConfig) -> None:
    for j, kind in enumerate(backbone_block_kinds(cfg)):
        name = f"{prefix}.block{j}"
        if kind == "drdb":
            init_drdb(store, rng, name, cfg.g0, cfg.g, cfg.c)
        elif kind == "rstb":
            init_rstb(store, rng, name, cfg.g0, cfg.heads, cfg.window_sizes)
        else:
            init_xbb(store, rng, name, cfg)
    init_conv(store, rng, f"{prefix}.gff1", cfg.g0, cfg.d * cfg.g0, 1, gain="linear")
    init_conv(store, rng, f"{prefix}.gff2", cfg.g0, cfg.g0, 3, gain="linear")


def backbone_forward(x: Tensor, store: ParamStore, prefix: str, cfg: XBBConfig) -> Tensor:
    if x.shape[0] != cfg.g0:
        raise ShapeError(f"backbone expects {cfg.g0} channels, got {x.shape[0]}")
    feats = []
    cur = x
    for j, kind in enumerate(backbone_block_kinds(cfg)):
        name = f"{prefix}.block{j}"
        if kind == "drdb":
            cur = drdb_forward(cur, store, name, cfg.c, cfg.g)
        elif kind == "rstb":
            cur = rstb_forward(cur, store, name, cfg.heads, cfg.window_sizes)
        else:
            cur = xbb_forward(cur, store, name, cfg).fused
        feats.append(cur)
    gf = conv(ops.concat(feats, axis=0) if len(feats) > 1 else feats[0], store, f"{prefix}.gff1")
    return conv(gf, store, f"{prefix}.gff2")


# ---------------------------------------------------------------------------
# parameter accounting


def param_breakdown(store: ParamStore, depth: int = 2) -> dict[str, int]:
    """Learnable-scalar counts grouped by the first ``depth`` name components."""
    groups: dict[str, int] = {}
    for name, tensor in store.items():
        key = ".".join(name.split(".")[:depth])
        groups[key] = groups.get(key, 0) + tensor.size
    return groups
