"""JSON run configuration: parsing with exhaustive unknown-key rejection,
default materialization, and canonical hashing.

Semantic errors carry the dotted key path (for example ``model.image.g0``);
syntax errors surface json's line/column diagnostics unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import XBBConfig
from .model import ModelConfig
from .training import REFERENCE_CONDITIONS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_cases: int = 50
    conditions: tuple[str, ...] = REFERENCE_CONDITIONS
    accels: tuple[float, ...] = (4.0, 8.0)
    seed: int = 900
    image_size: int = 32

    def __post_init__(self):
        for c in self.conditions:
            if c not in REFERENCE_CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}")
        if self.n_cases < 1:
            raise ConfigError(f"n_cases must be >= 1, got {self.n_cases}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/out"


class _Section:
    """One JSON object being consumed key by key; leftovers are errors."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
        self.data = dict(data)
        self.path = path

    def _sub(self, key):
        return f"{self.path}.{key}" if self.path else key

    def take(self, key, default, caster):
        if key not in self.data:
            return default
        raw = self.data.pop(key)
        try:
            return caster(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{self._sub(key)}: {e}") from None

    def section(self, key) -> "_Section | None":
        if key not in self.data:
            return None
        return _Section(self.data.pop(key), self._sub(key))

    def finish(self):
        if self.data:
            extras = ", ".join(self._sub(k) for k in sorted(self.data))
            raise ConfigError(f"unknown config keys: {extras}")


def _int(x):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ValueError(f"expected an integer, got {x!r}")
    return x


def _num(x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError(f"expected a number, got {x!r}")
    return float(x)


def _str(x):
    if not isinstance(x, str):
        raise ValueError(f"expected a string, got {x!r}")
    return x


def _bool(x):
    if not isinstance(x, bool):
        raise ValueError(f"expected true/false, got {x!r}")
    return x


def _num_list(x):
    if not isinstance(x, list) or not x:
        raise ValueError(f"expected a non-empty list of numbers, got {x!r}")
    return tuple(_num(v) for v in x)


def _int_list(x):
    if not isinstance(x, list) or not x:
        raise ValueError(f"expected a non-empty list of integers, got {x!r}")
    return tuple(_int(v) for v in x)


def _str_list(x):
    if not isinstance(x, list) or not x:
        raise ValueError(f"expected a non-empty list of strings, got {x!r}")
    return tuple(_str(v) for v in x)


def _parse_xbb(sec: _Section | None, default: XBBConfig) -> XBBConfig:
    if sec is None:
        return default
    cfg = XBBConfig(
        g0=sec.take("g0", default.g0, _int),
        g=sec.take("g", default.g, _int),
        d=sec.take("d", default.d, _int),
        c=sec.take("c", default.c, _int),
        alpha=sec.take("alpha", default.alpha, _num),
        window_sizes=sec.take("window_sizes", default.window_sizes, _int_list),
        heads=sec.take("heads", default.heads, _int),
        variant=sec.take("variant", default.variant, _str),
    )
    sec.finish()
    return cfg


def _parse_model(sec: _Section | None, path_hint: str = "model") -> ModelConfig:
    default = ModelConfig()
    if sec is None:
        return default
    try:
        cfg = ModelConfig(
            n_recurrent=sec.take("n_recurrent", default.n_recurrent, _int),
            image=_parse_xbb(sec.section("image"), default.image),
            kspace=_parse_xbb(sec.section("kspace"), default.kspace),
            c2f_windows=sec.take("c2f_windows", default.c2f_windows, _int_list),
            c2f_heads=sec.take("c2f_heads", default.c2f_heads, _int),
            fusion=sec.take("fusion", default.fusion, _str),
            encoder=sec.take("encoder", default.encoder, _str),
            layout=sec.take("layout", default.layout, _str),
            share_recurrent_params=sec.take(
                "share_recurrent_params", default.share_recurrent_params, _bool
            ),
        )
    except ValueError as e:
        raise ConfigError(f"{path_hint}: {e}") from None
    sec.finish()
    return cfg


def _parse_train(sec: _Section | None) -> TrainConfig:
    default = TrainConfig()
    if sec is None:
        return default
    try:
        cfg = TrainConfig(
            lr=sec.take("lr", default.lr, _num),
            beta1=sec.take("beta1", default.beta1, _num),
            beta2=sec.take("beta2", default.beta2, _num),
            eps=sec.take("eps", default.eps, _num),
            batch_size=sec.take("batch_size", default.batch_size, _int),
            steps=sec.take("steps", default.steps, _int),
            accel_range=sec.take("accel_range", default.accel_range, _num_list),
            acs_frac=sec.take("acs_frac", default.acs_frac, _num),
            ref_probs=sec.take("ref_probs", default.ref_probs, _num_list),
            seed=sec.take("seed", default.seed, _int),
            image_size=sec.take("image_size", default.image_size, _int),
            loss_variant=sec.take("loss_variant", default.loss_variant, _str),
            clip_norm=sec.take("clip_norm", default.clip_norm,
                               lambda x: None if x is None else _num(x)),
        )
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    sec.finish()
    return cfg


def _parse_eval(sec: _Section | None) -> EvalConfig:
    default = EvalConfig()
    if sec is None:
        return default
    cfg = EvalConfig(
        n_cases=sec.take("n_cases", default.n_cases, _int),
        conditions=sec.take("conditions", default.conditions, _str_list),
        accels=sec.take("accels", default.accels, _num_list),
        seed=sec.take("seed", default.seed, _int),
        image_size=sec.take("image_size", default.image_size, _int),
    )
    sec.finish()
    return cfg


def parse_run_config(doc: dict) -> RunConfig:
    root = _Section(doc, "")
    cfg = RunConfig(
        model=_parse_model(root.section("model")),
        train=_parse_train(root.section("train")),
        eval=_parse_eval(root.section("eval")),
        output_dir=root.take("output_dir", RunConfig.output_dir, _str),
    )
    root.finish()
    return cfg


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text()
    doc = json.loads(text)  # JSONDecodeError carries line/column
    return parse_run_config(doc)


def run_config_to_dict(cfg: RunConfig) -> dict:
    def xbb(x: XBBConfig) -> dict:
        return {
            "g0": x.g0, "g": x.g, "d": x.d, "c": x.c, "alpha": x.alpha,
            "window_sizes": list(x.window_sizes), "heads": x.heads, "variant": x.variant,
        }

    return {
        "model": {
            "n_recurrent": cfg.model.n_recurrent,
            "image": xbb(cfg.model.image),
            "kspace": xbb(cfg.model.kspace),
            "c2f_windows": list(cfg.model.c2f_windows),
            "c2f_heads": cfg.model.c2f_heads,
            "fusion": cfg.model.fusion,
            "encoder": cfg.model.encoder,
            "layout": cfg.model.layout,
            "share_recurrent_params": cfg.model.share_recurrent_params,
        },
        "train": {
            "lr": cfg.train.lr, "beta1": cfg.train.beta1, "beta2": cfg.train.beta2,
            "eps": cfg.train.eps, "batch_size": cfg.train.batch_size,
            "steps": cfg.train.steps, "accel_range": list(cfg.train.accel_range),
            "acs_frac": cfg.train.acs_frac, "ref_probs": list(cfg.train.ref_probs),
            "seed": cfg.train.seed, "image_size": cfg.train.image_size,
            "loss_variant": cfg.train.loss_variant, "clip_norm": cfg.train.clip_norm,
        },
        "eval": {
            "n_cases": cfg.eval.n_cases, "conditions": list(cfg.eval.conditions),
            "accels": list(cfg.eval.accels), "seed": cfg.eval.seed,
            "image_size": cfg.eval.image_size,
        },
        "output_dir": cfg.output_dir,
    }


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(run_config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
