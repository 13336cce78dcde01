"""DeepCluster orchestration: cluster -> train cycles, halt schedules, linear probing."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .clustering import kmeans, save_assignments
from .data import DATASETS, ImageDataset, Phase, Split, TransformSpec, apply_transforms, default_transform, load_dataset
from .errors import ConfigError, NonFiniteError
from .features import extract_features, prepare_for_clustering
from .metrics import accuracy, cycle_consistency, ia, nmi
from .nn import (Architecture, Linear, Network, NetworkConfig, OptimizerState, backward, build_network, reset_head,
                 sgd_step, softmax_cross_entropy)

log = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1

# Stream tags for derived seeds.
_KMEANS, _HEAD, _SHUFFLE, _FLIP = 1, 2, 3, 4


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class RunConfig:
    dataset: str = "fmnist"
    data_root: str | None = None
    max_samples: int | None = None
    test_max_samples: int | None = None
    subset_seed: int = 0
    synthetic_size: int = 2000

    architecture: str = "lenet5"
    filters: list[int] | None = None
    use_batchnorm: bool = True
    use_sobel: bool = False
    normalize_mean: list[float] | None = None
    normalize_std: list[float] | None = None

    learning_rate: float = 0.1
    weight_decay: float = 0.001
    momentum: float = 0.1
    batch_size: int = 128
    num_cycles: int = 50
    epochs_per_cycle: int = 1
    num_clusters: int = 5
    pca_components: int | None = None
    halt_cycle: int | None = None
    seed: int = 0

    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-4
    feature_batch_size: int = 256

    probe_layer: str | None = None
    probe_epochs: int = 20
    probe_learning_rate: float = 0.01
    probe_momentum: float = 0.9
    probe_batch_size: int = 128

    checkpoint_every: int = 0
    save_assignments: bool = False

    # -- validation ----------------------------------------------------------
    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dataset in DATASETS, f"dataset: unknown {self.dataset!r}, choose from {sorted(DATASETS)}")
        need(self.architecture in {a.value for a in Architecture} - {"custom"},
             f"architecture: must be 'lenet5' or 'mini_alexnet', got {self.architecture!r}")
        need(self.num_clusters >= 2, f"num_clusters: must be >= 2 (got {self.num_clusters}); "
                                     "a single cluster gives a constant pseudo-label")
        need(self.num_cycles >= 1, "num_cycles: must be >= 1")
        need(self.epochs_per_cycle >= 1, "epochs_per_cycle: must be >= 1")
        need(self.batch_size >= 1 and self.probe_batch_size >= 1, "batch sizes must be >= 1")
        need(self.learning_rate > 0 and self.probe_learning_rate > 0, "learning rates must be > 0")
        need(0 <= self.momentum < 1 and 0 <= self.probe_momentum < 1, "momentum must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay: must be >= 0")
        need(self.seed >= 0 and self.subset_seed >= 0, "seeds must be non-negative integers")
        need(self.halt_cycle is None or 1 <= self.halt_cycle <= self.num_cycles,
             f"halt_cycle: must lie in [1, num_cycles={self.num_cycles}], got {self.halt_cycle}")
        need(self.pca_components is None or self.pca_components >= 1, "pca_components: must be >= 1 or null")
        need(self.max_samples is None or self.max_samples >= self.num_clusters,
             "max_samples: must be at least num_clusters")
        need(self.probe_epochs >= 1, "probe_epochs: must be >= 1")
        need(self.checkpoint_every >= 0, "checkpoint_every: must be >= 0")
        return self

    # -- derived objects -----------------------------------------------------
    def transform_spec(self) -> TransformSpec:
        channels, size, _ = DATASETS[self.dataset]["shape"]
        return default_transform(channels, size, sobel=self.use_sobel,
                                 mean=self.normalize_mean, std=self.normalize_std)

    def network_config(self) -> NetworkConfig:
        channels = DATASETS[self.dataset]["shape"][0]
        return NetworkConfig(
            architecture=Architecture(self.architecture),
            input_channels=channels,
            input_size=self.transform_spec().crop_size,
            use_batchnorm=self.use_batchnorm,
            use_sobel=self.use_sobel,
            num_classes=self.num_clusters,
            filters=tuple(self.filters) if self.filters else None,
        )

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["format_version"] = CONFIG_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("format_version", None)
        if version is None:
            raise ConfigError("format_version: required key missing")
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"format_version: unsupported value {version!r} (expected {CONFIG_FORMAT_VERSION})")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for f in dataclasses.fields(cls):
            if f.name in d:
                _check_type(f.name, d[f.name], f.default)
        return cls(**d).validate()


def _check_type(key, value, default):
    if value is None:
        return
    expected = type(default) if default is not None else None
    if expected is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if expected is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if expected is str and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")


def fmnist_config(**overrides) -> RunConfig:
    """Selected Fashion-MNIST hyperparameters of the original grid search."""
    base = dict(dataset="fmnist", architecture="lenet5", learning_rate=0.1, weight_decay=0.001, momentum=0.1,
                use_sobel=False, use_batchnorm=True, num_cycles=50, num_clusters=5, pca_components=None,
                batch_size=128)
    return RunConfig(**{**base, **overrides})


def svhn_config(**overrides) -> RunConfig:
    base = dict(dataset="svhn", architecture="mini_alexnet", learning_rate=0.1, weight_decay=0.001, momentum=0.5,
                use_sobel=True, use_batchnorm=True, num_cycles=100, num_clusters=200, pca_components=256,
                batch_size=64)
    return RunConfig(**{**base, **overrides})


def cifar10_config(**overrides) -> RunConfig:
    base = dict(dataset="cifar10", architecture="mini_alexnet", learning_rate=0.1, weight_decay=0.001, momentum=0.9,
                use_sobel=True, use_batchnorm=True, num_cycles=100, num_clusters=1000, pca_components=256,
                batch_size=64)
    return RunConfig(**{**base, **overrides})


def load_run_datasets(config: RunConfig, need_test=True) -> tuple[ImageDataset, ImageDataset | None]:
    kw = dict(root=config.data_root, seed=config.subset_seed, synthetic_size=config.synthetic_size)
    train = load_dataset(config.dataset, Split.TRAIN, max_samples=config.max_samples, **kw)
    test = load_dataset(config.dataset, Split.TEST, max_samples=config.test_max_samples, **kw) if need_test else None
    return train, test


# --------------------------------------------------------------------------
# Run records and on-disk layout
# --------------------------------------------------------------------------


@dataclass
class CycleRecord:
    cycle: int  # 0-based
    clustered: bool
    pseudo_labels: np.ndarray
    inertia: float | None
    kmeans_iterations: int | None
    nmi_prev: float | None
    nmi_truth: float | None
    loss: float
    cluster_seconds: float
    train_seconds: float


@dataclass
class RunLog:
    config: RunConfig
    records: list[CycleRecord]
    network: Network

    @property
    def clustering_invocations(self) -> int:
        return sum(r.clustered for r in self.records)

    @property
    def clustering_seconds(self) -> float:
        return sum(r.cluster_seconds for r in self.records)

    def nmi_prev_series(self) -> list[float]:
        return [r.nmi_prev for r in self.records if r.nmi_prev is not None]


METRICS_COLUMNS = ["cycle", "clustered", "inertia", "kmeans_iterations", "nmi_prev", "nmi_truth", "loss"]
TIMING_COLUMNS = ["cycle", "cluster_seconds", "train_seconds"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class RunDirectory:
    """config.json, metrics.csv (deterministic), timings.csv, checkpoints/, clusters/."""

    def __init__(self, root, config: RunConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        write_json(self.root / "config.json", config.to_dict())
        self._metrics = self._open_csv("metrics.csv", METRICS_COLUMNS)
        self._timings = self._open_csv("timings.csv", TIMING_COLUMNS)

    def _open_csv(self, name, columns):
        path = self.root / name
        with open(path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(columns)
        return path

    def _append(self, path, row):
        with open(path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([_fmt(v) for v in row])

    def write_cycle(self, rec: CycleRecord, result=None) -> None:
        self._append(self._metrics, [rec.cycle, rec.clustered, rec.inertia, rec.kmeans_iterations,
                                     rec.nmi_prev, rec.nmi_truth, rec.loss])
        self._append(self._timings, [rec.cycle, rec.cluster_seconds, rec.train_seconds])
        if result is not None and self.config.save_assignments:
            (self.root / "clusters").mkdir(exist_ok=True)
            save_assignments(self.root / "clusters" / f"cycle_{rec.cycle:04d}.kasg", result)

    def checkpoint(self, net: Network, name: str, **meta) -> Path:
        path = self.root / "checkpoints" / f"{name}.dckp"
        save_checkpoint(path, net, {"config": self.config.to_dict(), **meta})
        return path


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def train_epoch(net: Network, ds: ImageDataset, targets, spec: TransformSpec, opt: OptimizerState,
                batch_size: int, seed: int) -> float:
    """One epoch of uniformly shuffled mini-batch SGD; returns the mean loss."""
    order = np.random.default_rng(seed).permutation(len(ds))
    net.train()
    total = 0.0
    for idx, x in apply_transforms(ds, spec, Phase.TRAIN, seed=derive_seed(seed, _FLIP), batch_size=batch_size,
                                   order=order):
        logits = net.forward(x)
        loss, grads = backward(net, logits, targets[idx])
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite training loss")
        sgd_step(net.parameters(), grads, opt)
        total += loss * len(idx)
    return total / len(ds)


def run_deepcluster(config: RunConfig, train: ImageDataset | None = None, out_dir=None,
                    progress=None) -> RunLog:
    """Alternate clustering and training for ``config.num_cycles`` cycles.

    Cycle ``c`` (0-based) clusters when no halt is configured or
    ``c < halt_cycle``; later cycles keep training on the last pseudo-labels.
    """
    config.validate()
    if train is None:
        train, _ = load_run_datasets(config, need_test=False)
    spec = config.transform_spec()
    net = build_network(config.network_config(), config.seed)
    opt = OptimizerState.for_params(net.parameters(), config.learning_rate, config.momentum, config.weight_decay)
    run_dir = RunDirectory(out_dir, config) if out_dir is not None else None
    truth = train.labels

    records: list[CycleRecord] = []
    labels = prev = None
    for c in range(config.num_cycles):
        clustered = config.halt_cycle is None or c < config.halt_cycle
        result = None
        try:
            t0 = time.perf_counter()
            if clustered:
                F = extract_features(net, train, spec, batch_size=config.feature_batch_size)
                V = prepare_for_clustering(F, config.pca_components)
                result = kmeans(V, config.num_clusters, seed=derive_seed(config.seed, c, _KMEANS),
                                max_iter=config.kmeans_max_iter, tol=config.kmeans_tol)
                labels = result.assignments
                reset_head(net, config.num_clusters, derive_seed(config.seed, c, _HEAD))
                opt.reset(net.parameters(), [n for n in net.parameters() if n.startswith("head.")])
            t1 = time.perf_counter()
            loss = 0.0
            for e in range(config.epochs_per_cycle):
                loss = train_epoch(net, train, labels, spec, opt, config.batch_size,
                                   derive_seed(config.seed, c, e, _SHUFFLE))
            t2 = time.perf_counter()
        except NonFiniteError as exc:
            if run_dir is not None:
                path = run_dir.checkpoint(net, "abort", cycle=c, reason=str(exc))
                log.error("cycle %d aborted (%s); diagnostic checkpoint at %s", c, exc, path)
            raise NonFiniteError(f"cycle {c}: {exc}") from exc

        rec = CycleRecord(
            cycle=c,
            clustered=clustered,
            pseudo_labels=labels,
            inertia=result.inertia if result is not None else None,
            kmeans_iterations=result.iterations_run if result is not None else None,
            nmi_prev=cycle_consistency(prev, labels) if prev is not None else None,
            nmi_truth=nmi(labels, truth) if truth is not None else None,
            loss=float(loss),
            cluster_seconds=t1 - t0,
            train_seconds=t2 - t1,
        )
        records.append(rec)
        if run_dir is not None:
            run_dir.write_cycle(rec, result)
            if config.checkpoint_every and (c + 1) % config.checkpoint_every == 0:
                run_dir.checkpoint(net, f"cycle_{c:04d}", cycle=c)
        if progress is not None:
            progress(rec)
        log.info("cycle %d: clustered=%s loss=%.4f nmi_prev=%s nmi_truth=%s", c, clustered, rec.loss,
                 rec.nmi_prev, rec.nmi_truth)
        prev = labels

    if run_dir is not None:
        run_dir.checkpoint(net, "final", cycle=config.num_cycles - 1)
    net.eval()
    return RunLog(config, records, net)


# --------------------------------------------------------------------------
# Linear probe
# --------------------------------------------------------------------------


@dataclass
class ProbeResult:
    layer: str
    accuracy: float  # on the test set
    train_accuracy: float
    epochs: int
    losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def linear_probe(net: Network, train: ImageDataset, test: ImageDataset, layer: str | None = None, epochs: int = 20,
                 spec: TransformSpec | None = None, seed: int = 0, learning_rate: float = 0.01,
                 momentum: float = 0.9, batch_size: int = 128, feature_batch_size: int = 256) -> ProbeResult:
    """Multinomial logistic regression on frozen features of ``layer``.

    Features are standardised with training-set statistics before the
    classifier; the network itself is never updated.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("linear probing needs labelled train and test sets")
    layer = net.resolve_layer(layer)
    if spec is None:
        spec = default_transform(train.channels, train.size, sobel=net.config.use_sobel)
    Xtr = extract_features(net, train, spec, feature_batch_size, layer).data.astype(np.float32)
    Xte = extract_features(net, test, spec, feature_batch_size, layer).data.astype(np.float32)
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd[sd < 1e-6] = 1.0
    Xtr = (Xtr - mu) / sd
    Xte = (Xte - mu) / sd

    n_classes = max(train.class_count, test.class_count)
    rng = np.random.default_rng(seed)
    clf = Linear(Xtr.shape[1], n_classes, rng)
    clf.params["weight"][:] = 0
    opt = OptimizerState.for_params(clf.params, learning_rate, momentum, 0.0)
    ytr = train.labels
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(Xtr))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, dlogits = softmax_cross_entropy(clf.forward(Xtr[idx], True), ytr[idx])
            clf.backward(dlogits)
            sgd_step(clf.params, clf.grads, opt)
            total += loss * len(idx)
        losses.append(total / len(order))

    def predict(X):
        return np.argmax(clf.forward(X, False), axis=1)

    return ProbeResult(layer, accuracy(predict(Xte), test.labels), accuracy(predict(Xtr), ytr), epochs, losses)


def probe_run(net: Network, config: RunConfig, train: ImageDataset, test: ImageDataset) -> ProbeResult:
    return linear_probe(net, train, test, layer=config.probe_layer, epochs=config.probe_epochs,
                        spec=config.transform_spec(), seed=derive_seed(config.seed, 99),
                        learning_rate=config.probe_learning_rate, momentum=config.probe_momentum,
                        batch_size=config.probe_batch_size, feature_batch_size=config.feature_batch_size)


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass
class HaltSweepEntry:
    halt_cycle: int | None
    accuracy: float
    clustering_seconds: float
    clustering_invocations: int
    log: RunLog


def halt_sweep(config: RunConfig, halt_points, train=None, test=None) -> list[HaltSweepEntry]:
    """One run per halt point, everything else (including the seed) fixed."""
    if train is None or test is None:
        train, test = load_run_datasets(config)
    out = []
    for h in halt_points:
        cfg = dataclasses.replace(config, halt_cycle=h)
        run = run_deepcluster(cfg, train)
        probe = probe_run(run.network, cfg, train, test)
        out.append(HaltSweepEntry(h, probe.accuracy, run.clustering_seconds, run.clustering_invocations, run))
    return out


SWEEP_AXES = {"k": "num_clusters", "seed": "seed", "halt": "halt_cycle", "pca": "pca_components"}


def initial_alignment(config: RunConfig, train: ImageDataset, seed: int | None = None) -> float:
    """IA of the untrained network that ``config`` (or ``seed``) would start from."""
    seed = config.seed if seed is None else seed
    net = build_network(config.network_config(), seed)
    return ia(net, train, config.num_clusters, config.transform_spec(), config.pca_components,
              seed=derive_seed(seed, 0, _KMEANS), batch_size=config.feature_batch_size)


def _value_sort_key(v):
    return (v is None, v if v is not None else 0)


def sweep(config: RunConfig, axis: str, values, train=None, test=None, on_row=None, out_dir=None) -> list[dict]:
    """Run one child per value of ``axis``; rows sorted by value ascending.

    With ``out_dir`` each child writes its own run directory
    ``<out_dir>/<axis>_<value>``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if train is None or test is None:
        train, test = load_run_datasets(config)
    key = SWEEP_AXES[axis]
    rows = []
    for v in sorted(values, key=_value_sort_key):
        cfg = dataclasses.replace(config, **{key: v}).validate()
        row = {"value": v, "ia": None}
        if axis != "halt" and train.labels is not None:
            row["ia"] = initial_alignment(cfg, train)
        child = None if out_dir is None else Path(out_dir) / f"{axis}_{'none' if v is None else v}"
        run = run_deepcluster(cfg, train, out_dir=child)
        probe = probe_run(run.network, cfg, train, test)
        if child is not None:
            write_json(child / "probe.json", probe.to_dict())
        row["probe_accuracy"] = probe.accuracy
        rows.append(row)
        if on_row is not None:
            on_row(row, run)
    return rows
