"""IA distributions over random initialisations and median-based ranking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .data import ImageDataset
from .errors import ConfigError
from .pipeline import RunConfig, initial_alignment, load_run_datasets

DEFAULT_SEEDS = 20

# Hyperparameters that change what IA measures. Optimiser settings are
# accepted too (the network is never trained, so they leave IA unchanged).
HYPERPARAMS = {
    "num_clusters": int,
    "pca_components": int,
    "architecture": str,
    "use_sobel": bool,
    "use_batchnorm": bool,
    "learning_rate": float,
    "weight_decay": float,
    "momentum": float,
    "batch_size": int,
}
ALIASES = {"k": "num_clusters", "pca": "pca_components"}


def _order_median(values) -> float:
    s = sorted(values)
    n = len(s)
    if n == 0:
        raise ValueError("median of an empty sample")
    mid = n // 2
    return float(s[mid]) if n % 2 else (s[mid - 1] + s[mid]) / 2.0


def _percentile25(values) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), 25, method="linear"))


@dataclass
class IaDistribution:
    hyperparam: str
    value: object
    samples: list[tuple[int, float]] = field(default_factory=list)

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.samples]

    @property
    def sample_count(self) -> int:
        return len(self.samples)

    @property
    def median(self) -> float:
        return _order_median(self.values)

    @property
    def p25(self) -> float:
        return _percentile25(self.values)

    def to_dict(self) -> dict:
        return {
            "hyperparam": self.hyperparam,
            "value": self.value,
            "median": self.median,
            "p25": self.p25,
            "sample_count": self.sample_count,
            "samples": [{"seed": s, "ia": v} for s, v in self.samples],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def resolve_hyperparam(name: str, value):
    """Canonical field name and a value coerced to that field's type."""
    key = ALIASES.get(name, name)
    if key not in HYPERPARAMS:
        raise ConfigError(f"unknown hyperparameter {name!r}; choose from {sorted(HYPERPARAMS) + sorted(ALIASES)}")
    kind = HYPERPARAMS[key]
    if key == "pca_components" and value in (None, "off", "none", "null"):
        return key, None
    try:
        if kind is bool and isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return key, value.lower() in ("true", "1")
        return key, kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def sample_ia(config: RunConfig, hyperparam: str, value, n_seeds: int = DEFAULT_SEEDS, seed_base: int = 0,
              dataset: ImageDataset | None = None) -> IaDistribution:
    """IA of ``n_seeds`` fresh networks (seeds ``seed_base + i``); nothing is trained."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    key, value = resolve_hyperparam(hyperparam, value)
    cfg = dataclasses.replace(config, **{key: value}).validate()
    if dataset is None:
        dataset, _ = load_run_datasets(cfg, need_test=False)
    if dataset.labels is None:
        raise ValueError("IA sampling needs a labelled dataset")
    dist = IaDistribution(key, value)
    for i in range(n_seeds):
        s = seed_base + i
        dist.samples.append((s, initial_alignment(cfg, dataset, seed=s)))
    return dist


def rank_candidates(dists: list[IaDistribution]) -> list[IaDistribution]:
    """Descending median; ties go to the higher 25th percentile, then the lower value."""
    if len(dists) < 2:
        raise ValueError("ranking needs at least two distributions")
    names = {d.hyperparam for d in dists}
    if len(names) > 1:
        raise ValueError(f"cannot rank across different hyperparameters: {sorted(names)}")

    def value_key(v):
        return (v is None, v if isinstance(v, (int, float)) else str(v))

    return sorted(dists, key=lambda d: (-d.median, -d.p25, value_key(d.value)))
