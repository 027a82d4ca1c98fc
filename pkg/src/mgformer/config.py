"""Run configuration shared by the trainer, estimator and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .attention import MASK_MODES
from .features import KINDS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str | None = None
    cache_dir: str = "mgformer_cache"
    out_dir: str = "mgformer_run"
    d: int = 32
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    patience: int = 5
    split_seed: int = 0
    init_seed: int = 0
    simrf_seed: int = 0
    svd_seed: int = 0
    mask_mode: str = "sine_degree"
    feature_map: str = "simrf"
    focus_power: float = 3.0
    degree_source: str = "train"
    split_ratios: tuple = (0.8, 0.1, 0.1)
    popularity_quantiles: tuple = (1 / 3, 2 / 3)
    k: int = 20
    eval_k: int = 20
    structural_encodings: bool = True
    normalize: bool = True
    residual: bool = False
    summary_refresh: int = 1
    degree_buckets: int = 32
    degree_dim: int = 8
    oversample: int = 8
    power_iters: int = 2
    threads: int = 1
    synthetic: str | None = None

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.popularity_quantiles = tuple(float(q) for q in self.popularity_quantiles)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("d", "batch_size", "k", "eval_k", "summary_refresh", "degree_buckets",
                     "degree_dim", "threads"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1,
                 f"{name} must be a positive integer")
        for name in ("epochs", "patience", "oversample", "power_iters"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 0,
                 f"{name} must be a non-negative integer")
        need(self.batch_size >= 2, "batch_size must be at least 2")
        need(0.0 <= self.lam <= 100.0, "lam must lie in [0, 100]")
        need(self.lr > 0, "lr must be positive")
        need(self.mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}")
        need(self.feature_map in KINDS, f"feature_map must be one of {KINDS}")
        need(self.focus_power > 0, "focus_power must be positive")
        need(self.degree_source in ("train", "full"), "degree_source must be 'train' or 'full'")
        need(len(self.split_ratios) == 3, "split_ratios needs three values")
        need(all(0.0 <= r <= 1.0 for r in self.split_ratios), "split ratios must lie in [0, 1]")
        need(abs(sum(self.split_ratios) - 1.0) <= 1e-9, "split ratios must sum to 1")
        q = self.popularity_quantiles
        need(len(q) == 2 and 0 < q[0] < q[1] < 1, "popularity_quantiles need 0 < q1 < q2 < 1")
        need(self.synthetic in (None, "blocks"), "synthetic must be 'blocks' or null")

    @property
    def token_dim(self) -> int:
        return 2 * self.d if self.structural_encodings else self.d

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["split_ratios"] = list(self.split_ratios)
        out["popularity_quantiles"] = list(self.popularity_quantiles)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data.update(overrides)
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def graph_key(cfg: RunConfig) -> dict:
    """Config fields the prepared graph depends on."""
    return {
        "dataset": cfg.dataset,
        "synthetic": cfg.synthetic,
        "split_seed": cfg.split_seed,
        "split_ratios": list(cfg.split_ratios),
    }


def encoding_key(cfg: RunConfig) -> dict:
    return {
        **graph_key(cfg),
        "d": cfg.d,
        "svd_seed": cfg.svd_seed,
        "oversample": cfg.oversample,
        "power_iters": cfg.power_iters,
    }

