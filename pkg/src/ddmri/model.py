"""Model assembly: partially shared shallow encoder, adaptive coarse-to-fine
fusion, the image-domain and k-space-domain recovery networks, and the
recurrent dual-domain pipeline with interleaved data consistency.

The k-space network is single-contrast in the default layout; the image
network is reference-aware and receives the availability flag AC. When AC is
0 every fusion variant provably ignores the reference branch, so outputs are
bit-identical across arbitrary reference inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import (
    XBBConfig,
    backbone_forward,
    conv,
    init_backbone,
    init_conv,
    init_se,
    init_wmsa,
    se_forward,
    wmsa_forward,
)
from .engine import ParamStore, ShapeError, Tensor
from .mri import data_consistency_t, fft2c, fft2c_t, ifft2c_t

FUSION_VARIANTS = ("max", "hemis", "adaf2c", "adac2f")
ENCODER_VARIANTS = ("shared", "distinct", "pass")
LAYOUT_VARIANTS = ("k_unii", "unii_k", "unik_unii", "unii_unik")

# layout -> (k-space net runs first, k-space net sees the reference k-space)
_LAYOUTS = {
    "k_unii": (True, False),
    "unik_unii": (True, True),
    "unii_k": (False, False),
    "unii_unik": (False, True),
}


def _default_image_cfg() -> XBBConfig:
    return XBBConfig(g0=64, g=48, d=4, c=5, alpha=0.5, window_sizes=(16, 16), heads=4, variant="xbb")


def _default_kspace_cfg() -> XBBConfig:
    return XBBConfig(g0=64, g=48, d=3, c=3, alpha=0.5, window_sizes=(16, 16), heads=4, variant="xbb")


@dataclass(frozen=True)
class ModelConfig:
    """Full model hyperparameter record; defaults reproduce the reference setup."""

    n_recurrent: int = 2
    image: XBBConfig = field(default_factory=_default_image_cfg)
    kspace: XBBConfig = field(default_factory=_default_kspace_cfg)
    c2f_windows: tuple[int, int] = (16, 8)
    c2f_heads: int = 4
    fusion: str = "adac2f"
    encoder: str = "pass"
    layout: str = "k_unii"
    share_recurrent_params: bool = True

    def __post_init__(self):
        if self.n_recurrent < 1:
            raise ValueError(f"n_recurrent must be >= 1, got {self.n_recurrent}")
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}")
        if self.encoder not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.encoder!r}")
        if self.layout not in LAYOUT_VARIANTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if len(self.c2f_windows) != 2:
            raise ValueError(f"c2f_windows must hold two window sizes, got {self.c2f_windows}")
        if self.image.g0 % self.c2f_heads != 0:
            raise ValueError(
                f"c2f_heads={self.c2f_heads} must divide the image channel width {self.image.g0}"
            )

    @property
    def k_first(self) -> bool:
        return _LAYOUTS[self.layout][0]

    @property
    def k_conditioned(self) -> bool:
        return _LAYOUTS[self.layout][1]

    def net_prefixes(self, step: int) -> tuple[str, str]:
        if self.share_recurrent_params:
            return "inet", "knet"
        return f"inet{step}", f"knet{step}"


# ---------------------------------------------------------------------------
# parameter construction


def _init_encoder(store: ParamStore, rng, prefix: str, cfg: ModelConfig) -> None:
    g0 = cfg.image.g0
    if cfg.encoder == "shared":
        widths = [(2, g0), (g0, g0), (g0, g0), (g0, g0)]
        for i, (c_in, c_out) in enumerate(widths, start=1):
            init_conv(store, rng, f"{prefix}.cb{i}", c_out, c_in, 3)
        return
    if cfg.encoder == "distinct":
        for branch in ("tar", "ref"):
            widths = [(2, g0), (g0, g0), (g0, g0), (g0, g0)]
            for i, (c_in, c_out) in enumerate(widths, start=1):
                init_conv(store, rng, f"{prefix}.{branch}.cb{i}", c_out, c_in, 3)
        return
    # Partially shared: one shared chain, two specific chains, per-layer 1x1
    # merges (shared between the specific branches), one shared tail block.
    for chain in ("shared", "tar", "ref"):
        for i, (c_in, c_out) in enumerate([(2, g0), (g0, g0), (g0, g0)], start=1):
            init_conv(store, rng, f"{prefix}.{chain}.cb{i}", c_out, c_in, 3)
    for i in range(1, 4):
        init_conv(store, rng, f"{prefix}.merge{i}", g0, 2 * g0, 1, gain="linear")
    init_conv(store, rng, f"{prefix}.cb4", g0, g0, 3)


def _init_fusion(store: ParamStore, rng, prefix: str, cfg: ModelConfig) -> None:
    g0 = cfg.image.g0
    if cfg.fusion in ("adac2f", "adaf2c"):
        for branch in ("tar", "ref"):
            for stage, window in enumerate(_fusion_windows(cfg)):
                init_wmsa(store, rng, f"{prefix}.{branch}.s{stage}", g0, cfg.c2f_heads, window)
    elif cfg.fusion == "hemis":
        init_conv(store, rng, f"{prefix}.mix", g0, 2 * g0, 1, gain="linear")
    # max: parameter-free


def _fusion_windows(cfg: ModelConfig) -> tuple[int, int]:
    w = tuple(cfg.c2f_windows)
    return w if cfg.fusion != "adaf2c" else w[::-1]


def _init_head(store: ParamStore, rng, prefix: str, g0: int, zero_tails: bool) -> None:
    # Reconstruction head: several conv layers down to the 2-channel output.
    init_conv(store, rng, f"{prefix}.head1", g0, g0, 3)
    init_conv(store, rng, f"{prefix}.head2", g0, g0, 3)
    init_conv(store, rng, f"{prefix}.head3", 2, g0, 3, gain="linear", zero=zero_tails)


def _head_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    x = ops.relu(conv(x, store, f"{prefix}.head1"))
    x = ops.relu(conv(x, store, f"{prefix}.head2"))
    return conv(x, store, f"{prefix}.head3")


def _init_i_net(store: ParamStore, rng, prefix: str, cfg: ModelConfig, zero_tails: bool) -> None:
    g0 = cfg.image.g0
    _init_encoder(store, rng, f"{prefix}.enc", cfg)
    _init_fusion(store, rng, f"{prefix}.fuse", cfg)
    init_backbone(store, rng, f"{prefix}.backbone", cfg.image)
    init_se(store, rng, f"{prefix}.se", g0)
    init_conv(store, rng, f"{prefix}.se_proj", 2, g0, 1, gain="linear", zero=zero_tails)
    _init_head(store, rng, prefix, g0, zero_tails)


def _init_k_net(store: ParamStore, rng, prefix: str, cfg: ModelConfig, zero_tails: bool) -> None:
    g0 = cfg.kspace.g0
    c_in = 4 if cfg.k_conditioned else 2
    init_conv(store, rng, f"{prefix}.sfe1", g0, c_in, 3, gain="linear")
    init_conv(store, rng, f"{prefix}.sfe2", g0, g0, 3, gain="linear")
    init_backbone(store, rng, f"{prefix}.backbone", cfg.kspace)
    _init_head(store, rng, prefix, g0, zero_tails)


def init_model_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                      zero_tails: bool = True) -> ParamStore:
    """Build the full parameter store. ``zero_tails`` zero-initialises the
    output projections so the untrained model reproduces the zero-filled
    reconstruction; gradient checks should disable it."""
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore(dtype=dtype)
    n_copies = 1 if cfg.share_recurrent_params else cfg.n_recurrent
    for i in range(n_copies):
        pfx_i, pfx_k = cfg.net_prefixes(i)
        _init_i_net(store, rng, pfx_i, cfg, zero_tails)
        _init_k_net(store, rng, pfx_k, cfg, zero_tails)
    return store


def count_model_params(cfg: ModelConfig) -> dict:
    """Exact learnable-scalar counts: per-submodule, per-network, and total."""
    store = init_model_params(cfg, seed=0, dtype=np.float32, zero_tails=False)
    per_module: dict[str, int] = {}
    subtotal = {"image_net": 0, "kspace_net": 0}
    for name, tensor in store.items():
        head, sub = name.split(".")[0], ".".join(name.split(".")[:2])
        per_module[sub] = per_module.get(sub, 0) + tensor.size
        subtotal["image_net" if head.startswith("inet") else "kspace_net"] += tensor.size
    return {
        "per_module": per_module,
        "image_net": subtotal["image_net"],
        "kspace_net": subtotal["kspace_net"],
        "total": store.n_params(),
    }


# ---------------------------------------------------------------------------
# forward passes


def encoder_branch(x: Tensor, branch: str, store: ParamStore, prefix: str,
                   cfg: ModelConfig) -> Tensor:
    """Shallow features for one modality; a branch never sees the other
    modality's input in any encoder mode."""
    if cfg.encoder == "shared":
        for i in range(1, 5):
            x = ops.relu(conv(x, store, f"{prefix}.cb{i}"))
        return x

    if cfg.encoder == "distinct":
        for i in range(1, 5):
            x = ops.relu(conv(x, store, f"{prefix}.{branch}.cb{i}"))
        return x

    shared, specific = x, x
    for i in range(1, 4):
        shared = ops.relu(conv(shared, store, f"{prefix}.shared.cb{i}"))
        specific = ops.relu(conv(specific, store, f"{prefix}.{branch}.cb{i}"))
        specific = conv(ops.concat([specific, shared], axis=0), store, f"{prefix}.merge{i}")
    return ops.relu(conv(specific, store, f"{prefix}.cb4"))


def encoder_forward(i_tar: Tensor, i_ref: Tensor, store: ParamStore, prefix: str,
                    cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    if i_tar.shape != i_ref.shape:
        raise ShapeError(f"target/reference shapes differ: {i_tar.shape} vs {i_ref.shape}")
    return (encoder_branch(i_tar, "tar", store, prefix, cfg),
            encoder_branch(i_ref, "ref", store, prefix, cfg))


def c2f_attention(f: Tensor, store: ParamStore, prefix: str, windows, heads: int) -> Tensor:
    """Cascaded coarse-then-fine windowed MSA producing a full attention map."""
    a = f
    for stage, window in enumerate(windows):
        a = wmsa_forward(a, store, f"{prefix}.s{stage}", window, heads)
    return a


def fuse_forward(f_tar: Tensor, f_ref: Tensor, ac: int, store: ParamStore, prefix: str,
                 cfg: ModelConfig) -> Tensor:
    if f_tar.shape != f_ref.shape:
        raise ShapeError(f"fuse: branch shapes differ {f_tar.shape} vs {f_ref.shape}")
    if ac not in (0, 1):
        raise ValueError(f"availability condition must be 0 or 1, got {ac}")

    if cfg.fusion == "max":
        return f_tar if ac == 0 else ops.maximum(f_tar, f_ref)

    if cfg.fusion == "hemis":
        if ac == 0:
            mean, second = f_tar, ops.mul(f_tar, f_tar)
        else:
            mean = ops.mul(ops.add(f_tar, f_ref), 0.5)
            second = ops.mul(ops.add(ops.mul(f_tar, f_tar), ops.mul(f_ref, f_ref)), 0.5)
        return conv(ops.concat([mean, second], axis=0), store, f"{prefix}.mix")

    windows = _fusion_windows(cfg)

    def enhance(f, branch):
        attn = c2f_attention(f, store, f"{prefix}.{branch}", windows, cfg.c2f_heads)
        return ops.mul(f, ops.softmax(attn, axis=0))

    enhanced_tar = enhance(f_tar, "tar")
    if ac == 0:
        return enhanced_tar
    return ops.maximum(enhanced_tar, enhance(f_ref, "ref"))


def i_net_forward(i_k: Tensor, i_ref: Tensor, ac: int, store: ParamStore, prefix: str,
                  cfg: ModelConfig) -> Tensor:
    """Reference-aware image restoration: SE-gated shallow path plus the
    backbone path, each projected to the 2-channel complex image.

    With AC = 0 the reference branch is never evaluated, so the output is
    independent of the reference input by construction."""
    f_tar = encoder_branch(i_k, "tar", store, f"{prefix}.enc", cfg)
    if ac == 0:
        f_ref = f_tar  # placeholder; every fusion variant ignores it at AC=0
    else:
        f_ref = encoder_branch(i_ref, "ref", store, f"{prefix}.enc", cfg)
    f0 = fuse_forward(f_tar, f_ref, ac, store, f"{prefix}.fuse", cfg)
    f_gf = backbone_forward(f0, store, f"{prefix}.backbone", cfg.image)
    se_path = conv(se_forward(f0, store, f"{prefix}.se"), store, f"{prefix}.se_proj")
    return ops.add(se_path, _head_forward(f_gf, store, prefix))


def k_net_forward(k_in: Tensor, store: ParamStore, prefix: str, cfg: ModelConfig,
                  ref_k: np.ndarray | None = None) -> Tensor:
    """Single-contrast k-space recovery with a global residual of its input."""
    if cfg.k_conditioned:
        if ref_k is None:
            raise ValueError(f"layout {cfg.layout} expects a reference k-space")
        x = ops.concat([k_in, ops.as_tensor(ref_k, like=k_in)], axis=0)
    else:
        x = k_in
    x = conv(x, store, f"{prefix}.sfe1")
    x = conv(x, store, f"{prefix}.sfe2")
    f_gf = backbone_forward(x, store, f"{prefix}.backbone", cfg.kspace)
    return ops.add(_head_forward(f_gf, store, prefix), k_in)


def recurrent_forward(k_sub: np.ndarray, mask, i_ref: np.ndarray, ac: int,
                      store: ParamStore, cfg: ModelConfig) -> tuple[Tensor, list[dict]]:
    """Unrolled reconstruction.

    Returns the final image and, per recurrent block, the data-consistent
    k-space outputs of the k-space net (``k_k``) and of the image net
    (``k_dc``). The final image is the inverse FFT of the last block's last
    data-consistent k-space.
    """
    dtype = store.dtype
    k_meas = np.ascontiguousarray(k_sub, dtype=dtype)
    i_ref = np.ascontiguousarray(i_ref, dtype=dtype)
    if ac == 0 and np.any(i_ref):
        i_ref = np.zeros_like(i_ref)  # absent reference is a black image
    ref_k = fft2c(i_ref) if cfg.k_conditioned else None
    i_ref_t = ops.as_tensor(i_ref, dtype=dtype)

    prev = ops.as_tensor(k_meas, dtype=dtype)
    intermediates: list[dict] = []
    for step in range(cfg.n_recurrent):
        pfx_i, pfx_k = cfg.net_prefixes(step)
        if cfg.k_first:
            k_k = data_consistency_t(k_net_forward(prev, store, pfx_k, cfg, ref_k), k_meas, mask)
            i_i = i_net_forward(ifft2c_t(k_k), i_ref_t, ac, store, pfx_i, cfg)
            k_dc = data_consistency_t(fft2c_t(i_i), k_meas, mask)
            prev = k_dc
        else:
            i_i = i_net_forward(ifft2c_t(prev), i_ref_t, ac, store, pfx_i, cfg)
            k_dc = data_consistency_t(fft2c_t(i_i), k_meas, mask)
            k_k = data_consistency_t(k_net_forward(k_dc, store, pfx_k, cfg, ref_k), k_meas, mask)
            prev = k_k
        intermediates.append({"k_k": k_k, "k_dc": k_dc})
    return ifft2c_t(prev), intermediates
