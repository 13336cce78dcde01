"""Minimal numpy convnet engine with reverse-mode gradients and momentum SGD.

Layout is NCHW throughout. Each layer caches what its backward pass needs
during ``forward``; ``Network.backward`` walks the cached graph in reverse.
"""
from __future__ import annotations

import copy
import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NonFiniteError

LENET5_FILTERS = (6, 16)
MINI_ALEXNET_FILTERS = (48, 126, 192, 192, 128)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Architecture(str, enum.Enum):
    LENET5 = "lenet5"
    MINI_ALEXNET = "mini_alexnet"
    CUSTOM = "custom"


@dataclass(frozen=True)
class BlockSpec:
    """One conv block: conv -> [batchnorm] -> relu -> [2x2 max-pool]."""

    filters: int
    kernel: int = 3
    padding: int = 0
    pool: bool = False


@dataclass
class NetworkConfig:
    architecture: Architecture = Architecture.LENET5
    input_channels: int = 1
    input_size: int = 28
    use_batchnorm: bool = True
    use_sobel: bool = False
    num_classes: int = 5
    # Overrides the architecture's default filter counts.
    filters: tuple[int, ...] | None = None
    # Only used by Architecture.CUSTOM.
    blocks: tuple[BlockSpec, ...] | None = None

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        if self.filters is not None:
            self.filters = tuple(int(f) for f in self.filters)
        if self.blocks is not None:
            self.blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)

    @property
    def in_channels(self) -> int:
        """Channels the first conv sees (Sobel replaces the image with 2 gradient maps)."""
        return 2 if self.use_sobel else self.input_channels

    def block_specs(self) -> list[BlockSpec]:
        arch = self.architecture
        if arch is Architecture.LENET5:
            filters = self.filters or LENET5_FILTERS
            if len(filters) != 2:
                raise ConfigError(f"lenet5 needs 2 filter counts, got {filters}")
            return [BlockSpec(f, kernel=5, padding=0, pool=True) for f in filters]
        if arch is Architecture.MINI_ALEXNET:
            filters = self.filters or MINI_ALEXNET_FILTERS
            if len(filters) != 5:
                raise ConfigError(f"mini_alexnet needs 5 filter counts, got {filters}")
            return [BlockSpec(f, kernel=3, padding=1, pool=i in (0, 1, 4)) for i, f in enumerate(filters)]
        if not self.blocks:
            raise ConfigError("custom architecture requires a non-empty `blocks` list")
        return list(self.blocks)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1 or self.input_size < 1:
            raise ConfigError("input_channels and input_size must be positive")
        if self.use_sobel and self.input_channels not in (1, 3):
            raise ConfigError("sobel preprocessing needs 1- or 3-channel input")
        specs = self.block_specs()
        if any(b.filters < 1 or b.kernel < 1 or b.padding < 0 for b in specs):
            raise ConfigError(f"invalid filter counts or kernel geometry: {specs}")
        _spatial_schedule(specs, self.input_size)

    def to_dict(self) -> dict:
        d = {
            "architecture": self.architecture.value,
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "use_batchnorm": self.use_batchnorm,
            "use_sobel": self.use_sobel,
            "num_classes": self.num_classes,
            "filters": list(self.filters) if self.filters is not None else None,
            "blocks": None,
        }
        if self.blocks is not None:
            d["blocks"] = [vars(b).copy() for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _spatial_schedule(specs, size: int) -> list[int]:
    """Output side length after each block; raises if pooling does not divide evenly."""
    sizes = []
    for i, b in enumerate(specs):
        size = size + 2 * b.padding - b.kernel + 1
        if size < 1:
            raise ConfigError(f"input too small: block {i + 1} output would be empty")
        if b.pool:
            if size % 2:
                raise ConfigError(f"input size incompatible with pooling: odd size {size} at block {i + 1}")
            size //= 2
        sizes.append(size)
    return sizes


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_finite(x, what):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2d(Layer):
    name = "conv"

    def __init__(self, in_channels, out_channels, kernel, padding, rng, dtype=np.float32, bias=True):
        super().__init__()
        self.kernel = kernel
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = _kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x, training):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        out = np.tensordot(win, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        self._cache = (xp.shape, win)
        return np.ascontiguousarray(out)

    def backward(self, dout):
        xp_shape, win = self._cache
        k, p = self.kernel, self.padding
        w = self.params["weight"]
        self.grads["weight"] = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        if "bias" in self.params:
            self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        ho, wo = dout.shape[2], dout.shape[3]
        dcols = np.tensordot(dout, w, axes=([1], [0]))  # N, Ho, Wo, C, k, k
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class BatchNorm2d(Layer):
    name = "bn"

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["weight"] = np.ones(channels, dtype=dtype)
        self.params["bias"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def normalize(self, x, training):
        """Pre-affine output; updates running statistics in training mode."""
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            self.buffers["running_mean"] = ((1 - BN_MOMENTUM) * self.buffers["running_mean"]
                                            + BN_MOMENTUM * mu).astype(x.dtype)
            self.buffers["running_var"] = ((1 - BN_MOMENTUM) * self.buffers["running_var"]
                                           + BN_MOMENTUM * unbiased).astype(x.dtype)
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, training)
        return xhat

    def forward(self, x, training):
        xhat = self.normalize(x, training)
        return xhat * self.params["weight"][None, :, None, None] + self.params["bias"][None, :, None, None]

    def backward(self, dout):
        xhat, inv_std, training = self._cache
        self.grads["weight"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.params["weight"][None, :, None, None]
        if not training:
            return dxhat * inv_std[None, :, None, None]
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    name = "relu"

    def forward(self, x, training):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, dout):
        return np.where(self._mask, dout, 0).astype(dout.dtype)


class MaxPool2d(Layer):
    """2x2 max-pool, stride 2. Ties route the gradient to the first maximum."""

    name = "pool"

    def forward(self, x, training):
        n, c, h, w = x.shape
        cells = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = cells.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(cells, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (n, c, h, w), idx = self._cache
        cells = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(cells, idx[..., None], dout[..., None], axis=-1)
        return cells.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class Linear(Layer):
    name = "linear"

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = _kaiming_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    @property
    def out_features(self):
        return self.params["weight"].shape[0]

    def forward(self, x, training):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = dout.T @ self._x
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"]


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


class Network:
    """Feature extractor (ordered conv blocks) plus a single linear head.

    Blocks are addressable by id: ``conv1`` .. ``convN`` (``relu<i>`` is an
    alias) name the output of block i, post activation and pooling.
    """

    def __init__(self, config: NetworkConfig, blocks, head: Linear, dtype=np.float32):
        self.config = config
        self.blocks: list[tuple[str, list[Layer]]] = blocks
        self.head = head
        self.dtype = np.dtype(dtype)
        self.training = False
        sizes = _spatial_schedule(config.block_specs(), config.input_size)
        self.block_dims = {name: spec.filters * s * s
                           for (name, _), spec, s in zip(blocks, config.block_specs(), sizes)}
        self.feature_layer = blocks[-1][0]
        self.feature_dim = self.block_dims[self.feature_layer]
        self._last_upto = None

    # -- modes ---------------------------------------------------------------
    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    # -- introspection -------------------------------------------------------
    @property
    def layer_ids(self) -> list[str]:
        return [name for name, _ in self.blocks]

    def resolve_layer(self, layer: str | None) -> str:
        if layer is None or layer == "features":
            return self.feature_layer
        if layer.startswith("relu"):
            layer = "conv" + layer[4:]
        if layer not in self.block_dims:
            raise KeyError(f"unknown layer id {layer!r}; available: {self.layer_ids}")
        return layer

    def _named_layers(self, include_head=True):
        for bname, layers in self.blocks:
            for layer in layers:
                yield f"{bname}.{layer.name}", layer
        if include_head:
            yield "head", self.head

    def parameters(self, include_head=True) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self._named_layers(include_head) for pn, p in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self._named_layers() for pn in layer.params}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for ln, layer in self._named_layers():
            for pn, p in layer.params.items():
                state[f"{ln}.{pn}"] = p
            for bn, b in layer.buffers.items():
                state[f"{ln}.{bn}"] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ValueError(f"state keys mismatch: missing {set(own) - set(state)}, extra {set(state) - set(own)}")
        for ln, layer in self._named_layers():
            for store in (layer.params, layer.buffers):
                for key in store:
                    arr = np.asarray(state[f"{ln}.{key}"], dtype=self.dtype)
                    if arr.shape != store[key].shape:
                        raise ValueError(f"shape mismatch for {ln}.{key}: {arr.shape} vs {store[key].shape}")
                    store[key] = arr.copy()

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        net = copy.deepcopy(self)
        net.dtype = np.dtype(dtype)
        for _, layer in net._named_layers():
            for store in (layer.params, layer.buffers):
                for key in store:
                    store[key] = store[key].astype(dtype)
        return net

    # -- computation ---------------------------------------------------------
    def forward(self, x, upto: str = "logits"):
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"batch shape {x.shape} does not match network input (N, {expected})")
        target = None if upto == "logits" else self.resolve_layer(upto)
        h = np.asarray(x, dtype=self.dtype)
        _check_finite(h, "input batch")
        for bname, layers in self.blocks:
            for layer in layers:
                h = layer.forward(h, self.training)
            if bname == target:
                break
        self._pre_flatten_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        if target is None:
            h = self.head.forward(h, self.training)
        _check_finite(h, "activations")
        self._last_upto = upto
        return h

    def backward(self, dlogits):
        if self._last_upto != "logits":
            raise RuntimeError("backward needs a preceding forward(..., upto='logits')")
        d = self.head.backward(dlogits).reshape(self._pre_flatten_shape)
        for _, layers in reversed(self.blocks):
            for layer in reversed(layers):
                d = layer.backward(d)
        return d


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> Network:
    """Build and initialise a network; parameters are a pure function of ``seed``.

    The feature extractor and the head draw from independent child streams,
    so the random filters do not depend on the head width.
    """
    config.validate()
    feat_ss, head_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(feat_ss)
    blocks = []
    in_ch = config.in_channels
    for i, spec in enumerate(config.block_specs()):
        # A bias ahead of batchnorm is cancelled by the mean subtraction.
        conv = Conv2d(in_ch, spec.filters, spec.kernel, spec.padding, rng, dtype, bias=not config.use_batchnorm)
        layers: list[Layer] = [conv]
        if config.use_batchnorm:
            layers.append(BatchNorm2d(spec.filters, dtype))
        layers.append(ReLU())
        if spec.pool:
            layers.append(MaxPool2d())
        blocks.append((f"conv{i + 1}", layers))
        in_ch = spec.filters
    sizes = _spatial_schedule(config.block_specs(), config.input_size)
    feature_dim = in_ch * sizes[-1] ** 2
    head = Linear(feature_dim, config.num_classes, np.random.default_rng(head_ss), dtype)
    return Network(config, blocks, head, dtype)


def forward(net: Network, batch, upto: str = "logits"):
    return net.forward(batch, upto)


def softmax_cross_entropy(logits, targets):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match batch size {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, targets].mean())
    dlogits = np.exp(log_p)
    dlogits[rows, targets] -= 1
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


def backward(net: Network, logits, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients of every parameter for the last forward pass."""
    loss, dlogits = softmax_cross_entropy(logits, targets)
    net.backward(dlogits)
    grads = net.gradients()
    for name, g in grads.items():
        _check_finite(g, f"gradient of {name}")
    return loss, grads


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @classmethod
    def for_params(cls, params, learning_rate, momentum=0.0, weight_decay=0.0):
        state = cls(learning_rate, momentum, weight_decay)
        state.reset(params)
        return state

    def reset(self, params, names=None):
        """Zero the velocity of ``names`` (all params when None)."""
        for name in params if names is None else names:
            self.velocity[name] = np.zeros_like(params[name])


def sgd_step(params, grads, state: OptimizerState):
    """In-place momentum SGD with weight decay coupled into the gradient."""
    lr, mom, wd = state.learning_rate, state.momentum, state.weight_decay
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        v = state.velocity.get(name)
        if v is None or v.shape != w.shape:
            raise ValueError(f"velocity for {name} missing or misshapen")
        if wd:
            g = g + wd * w
        v *= mom
        v += g
        w -= lr * v
    return params, state


def reset_head(net: Network, k: int, seed: int) -> Network:
    """Replace the head with a freshly initialised ``k``-way linear layer."""
    if k < 2:
        raise ConfigError(f"head width must be >= 2, got {k}")
    net.head = Linear(net.feature_dim, k, np.random.default_rng(seed), net.dtype)
    net.config.num_classes = k
    return net


def parameter_digest(net: Network, include_head: bool = False) -> str:
    """SHA-256 over parameters and buffers; used to verify freeze contracts."""
    h = hashlib.sha256()
    for name, arr in net.state_dict().items():
        if not include_head and name.startswith("head."):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
