"""Dual-domain loss, Adam, the randomized-reference training loop, and the
held-out evaluator.

Training draws a fresh phantom, acceleration, mask, and reference condition
every step (batch size 1), all as pure functions of the training seed.
Phantom seeds are the block [seed * 2^20, seed * 2^20 + steps), which lets the
evaluator verify its own held-out seed block is disjoint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .engine import NonFiniteError, ParamStore, Tape, backward
from .metrics import psnr, ssim
from .model import ModelConfig, init_model_params, recurrent_forward
from .mri import fft2c, ifft2c, ifft2c_t, make_cartesian_mask, undersample, degrade_reference
from .phantom import gen_phantom_pair

REFERENCE_CONDITIONS = ("HQ", "LQ", "absent")
LOSS_VARIANTS = ("rss", "ss", "mse")
_SEED_BLOCK = 1 << 20


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    steps: int = 500
    accel_range: tuple[float, float] = (4.0, 8.0)
    acs_frac: float = 0.125
    ref_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    image_size: int = 32
    loss_variant: str = "rss"
    clip_norm: float | None = None

    def __post_init__(self):
        if abs(sum(self.ref_probs) - 1.0) > 1e-9:
            raise ValueError(f"ref_probs must sum to 1, got {self.ref_probs}")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        lo, hi = self.accel_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad accel_range {self.accel_range}")
        n_cols = int(np.floor(self.image_size / hi + 0.5))
        n_acs = int(np.ceil(self.acs_frac * self.image_size))
        if n_cols < n_acs:
            raise ValueError(
                f"accel {hi} infeasible at size {self.image_size}: {n_cols} columns < {n_acs} ACS"
            )

    def phantom_seed_range(self) -> tuple[int, int]:
        base = self.seed * _SEED_BLOCK
        return (base, base + self.steps)


@dataclass(frozen=True)
class TrainSample:
    """One step's data-stream draw (arrays are derived, not stored)."""

    step: int
    phantom_seed: int
    accel: float
    condition: str
    mask_seed: int
    degrade_seed: int


def training_stream(cfg: TrainConfig) -> list[TrainSample]:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    base = cfg.seed * _SEED_BLOCK
    samples = []
    for step in range(cfg.steps):
        accel = float(rng.uniform(*cfg.accel_range))
        condition = str(rng.choice(REFERENCE_CONDITIONS, p=cfg.ref_probs))
        mask_seed = int(rng.integers(0, 2**31))
        degrade_seed = int(rng.integers(0, 2**31))
        samples.append(TrainSample(step, base + step, accel, condition, mask_seed, degrade_seed))
    return samples


def stream_hash(samples: list[TrainSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(f"{s.step},{s.phantom_seed},{s.accel!r},{s.condition},{s.mask_seed},{s.degrade_seed};".encode())
    return h.hexdigest()


def materialize_sample(sample: TrainSample, image_size: int, acs_frac: float):
    """Arrays for one training case: (k_sub, mask, i_ref, ac, k_gt, i_gt)."""
    pair = gen_phantom_pair(image_size, sample.phantom_seed)
    i_gt = pair.target
    k_gt = fft2c(i_gt)
    mask = make_cartesian_mask(image_size, image_size, sample.accel, acs_frac, sample.mask_seed)
    k_sub = undersample(k_gt, mask)
    i_ref, ac = degrade_reference(pair.reference, sample.condition, sample.degrade_seed)
    return k_sub, mask, i_ref, ac, k_gt, i_gt


# ---------------------------------------------------------------------------
# loss


def _l2_term(diff, variant: str):
    total_sq = ops.sum_(ops.mul(diff, diff))
    if variant == "ss":
        return total_sq
    if variant == "mse":
        return ops.mul(total_sq, 1.0 / diff.size)
    return ops.sqrt_(total_sq)


def dudo_loss(intermediates, k_gt: np.ndarray, i_gt: np.ndarray, variant: str = "rss",
              n_expected: int | None = None):
    """Per-block k-space plus image L2 terms, summed over recurrent blocks.

    The default reads ||.||_2 literally (root-sum-square over both channels
    and all pixels); "ss"/"mse" are squared and per-element-mean variants.
    """
    if n_expected is not None and len(intermediates) != n_expected:
        raise ValueError(f"got {len(intermediates)} intermediates, expected {n_expected}")
    if not intermediates:
        raise ValueError("dudo_loss needs at least one recurrent block")
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    total = None
    for inter in intermediates:
        k_term = _l2_term(ops.sub(ops.as_tensor(k_gt, like=inter["k_k"]), inter["k_k"]), variant)
        i_term = _l2_term(ops.sub(ops.as_tensor(i_gt, like=inter["k_dc"]), ifft2c_t(inter["k_dc"])), variant)
        term = ops.add(k_term, i_term)
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam (the step-size folding of the original algorithm):
    p -= lr * sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(v) + eps)."""
    grads = params.grads()
    if state.t == 0:
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
    if cfg.clip_norm is not None:
        total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        if total > cfg.clip_norm:
            scale = cfg.clip_norm / total
            grads = {name: g * scale for name, g in grads.items()}
    state.t += 1
    step_size = cfg.lr * np.sqrt(1.0 - cfg.beta2**state.t) / (1.0 - cfg.beta1**state.t)
    for name, tensor in params.items():
        g = grads[name].astype(tensor.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        tensor.data = tensor.data - step_size * m / (np.sqrt(v) + cfg.eps)


# ---------------------------------------------------------------------------
# training loop


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          params: ParamStore | None = None) -> tuple[ParamStore, list[float]]:
    """Run the randomized-reference training scheme; returns params and the
    per-step loss curve. Deterministic given (configs, seed)."""
    if params is None:
        params = init_model_params(model_cfg, seed=train_cfg.seed, dtype=np.float32)
    state = AdamState()
    losses: list[float] = []
    for sample in training_stream(train_cfg):
        k_sub, mask, i_ref, ac, k_gt, i_gt = materialize_sample(
            sample, train_cfg.image_size, train_cfg.acs_frac
        )
        params.zero_grads()
        try:
            with Tape() as tape:
                _, inter = recurrent_forward(k_sub, mask, i_ref, ac, params, model_cfg)
                loss = dudo_loss(inter, k_gt, i_gt, train_cfg.loss_variant, model_cfg.n_recurrent)
            backward(loss, tape)
        except NonFiniteError as e:
            raise TrainingError(f"non-finite loss at step {sample.step}: {e}") from e
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {sample.step}")
        adam_step(params, state, train_cfg)
        losses.append(value)
    return params, losses


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricRecord:
    condition: str
    accel: float
    seed: int
    psnr_db: float
    ssim: float

    def __post_init__(self):
        if self.ssim > 1 + 1e-9:
            raise ValueError(f"ssim {self.ssim} > 1")


def seed_ranges_overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def evaluate(params: ParamStore, model_cfg: ModelConfig, n_cases: int, conditions, accels,
             seed: int, image_size: int = 32, acs_frac: float = 0.125,
             train_seed_range: tuple[int, int] | None = None
             ) -> dict[str, list[MetricRecord]]:
    """Held-out metrics per (condition, accel), plus the zero-filled baseline.

    Cases reuse the same phantoms across conditions and accelerations so the
    comparison is paired. Refuses phantom-seed overlap with training.
    """
    eval_range = (seed * _SEED_BLOCK, seed * _SEED_BLOCK + n_cases)
    if train_seed_range is not None and seed_ranges_overlap(eval_range, tuple(train_seed_range)):
        raise ValueError(
            f"evaluation seed range {eval_range} overlaps training range {tuple(train_seed_range)}"
        )
    for condition in conditions:
        if condition not in REFERENCE_CONDITIONS:
            raise ValueError(f"unknown reference condition {condition!r}")

    records: dict[str, list[MetricRecord]] = {"model": [], "zero_filled": []}
    for condition in conditions:
        for accel in accels:
            for case in range(n_cases):
                phantom_seed = eval_range[0] + case
                sample = TrainSample(
                    step=case,
                    phantom_seed=phantom_seed,
                    accel=float(accel),
                    condition=condition,
                    mask_seed=phantom_seed ^ 0x5A17ED,
                    degrade_seed=phantom_seed ^ 0x0DE6AD,
                )
                k_sub, mask, i_ref, ac, _, i_gt = materialize_sample(sample, image_size, acs_frac)
                i_rec, _ = recurrent_forward(k_sub, mask, i_ref, ac, params, model_cfg)
                records["model"].append(MetricRecord(
                    condition, float(accel), phantom_seed,
                    psnr(i_rec.data, i_gt), ssim(i_rec.data, i_gt),
                ))
                zf = ifft2c(k_sub)
                records["zero_filled"].append(MetricRecord(
                    condition, float(accel), phantom_seed, psnr(zf, i_gt), ssim(zf, i_gt),
                ))
    return records


def mean_psnr(records: list[MetricRecord], condition: str | None = None,
              accel: float | None = None) -> float:
    vals = [
        r.psnr_db
        for r in records
        if (condition is None or r.condition == condition)
        and (accel is None or r.accel == accel)
    ]
    if not vals:
        raise ValueError("no records match the filter")
    return float(np.mean(vals))
