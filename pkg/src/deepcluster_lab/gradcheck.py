"""Central finite-difference gradient checking.

The oracle uses forward passes only, on a float64 copy of the network, so it
is independent of the backward code it checks. An element is excluded from
comparison when central differences are not a valid reference there:

* the perturbation flips a ReLU mask or a max-pool winner (a kink lies
  inside [w - h, w + h]), or
* the step-h and step-h/2 estimates disagree by more than the tolerance,
  which happens near batchnorm's scale singularity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Architecture, BlockSpec, MaxPool2d, Network, NetworkConfig, ReLU, backward, softmax_cross_entropy

STEP = 1e-3
GRAD_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float  # elementwise, over checked elements
    max_tensor_rel_error: float  # ||a - n|| / max(||a||, ||n||) per parameter tensor
    checked: int
    skipped: int
    worst_param: str | None

    @property
    def skipped_fraction(self) -> float:
        total = self.checked + self.skipped
        return self.skipped / total if total else 0.0


def _pattern(net: Network):
    out = []
    for _, layers in net.blocks:
        for layer in layers:
            if isinstance(layer, ReLU):
                out.append(layer._mask.copy())
            elif isinstance(layer, MaxPool2d):
                out.append(layer._cache[1].copy())
    return out


def _loss(net, x, y):
    loss, _ = softmax_cross_entropy(net.forward(x), y)
    return loss, _pattern(net)


def relative_error(analytic, numeric, floor=GRAD_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(net: Network, x, y, step=STEP, tol=1e-3) -> GradCheckReport:
    """Compare the engine's analytic gradients against central differences.

    ``net`` is evaluated in train mode at its own dtype for the analytic
    gradients; the oracle runs on a float64 copy.
    """
    net.train()
    _, grads = backward(net, net.forward(x), y)
    ref = net.astype(np.float64).train()
    x64 = np.asarray(x, dtype=np.float64)
    _, base = _loss(ref, x64, y)

    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    worst_tensor = 0.0
    for name, p in ref.parameters().items():
        a = grads[name].astype(np.float64)
        a_ok, n_ok = [], []
        for idx in np.ndindex(p.shape):
            w0 = p[idx]
            vals = {}
            smooth = True
            for s in (step, -step, step / 2, -step / 2):
                p[idx] = w0 + s
                vals[s], pat = _loss(ref, x64, y)
                smooth &= all(np.array_equal(u, v) for u, v in zip(pat, base))
            p[idx] = w0
            fd = (vals[step] - vals[-step]) / (2 * step)
            fd_half = (vals[step / 2] - vals[-step / 2]) / step
            if not smooth or relative_error(fd, fd_half) > tol / 2:
                skipped += 1
                continue
            checked += 1
            a_ok.append(a[idx])
            n_ok.append(fd)
            err = float(relative_error(a[idx], fd))
            if err > worst:
                worst, worst_name = err, name
        if a_ok:
            a_ok, n_ok = np.array(a_ok), np.array(n_ok)
            scale = max(np.linalg.norm(a_ok), np.linalg.norm(n_ok), GRAD_FLOOR)
            worst_tensor = max(worst_tensor, float(np.linalg.norm(a_ok - n_ok) / scale))
    return GradCheckReport(worst, worst_tensor, checked, skipped, worst_name)


def random_small_network(seed: int, batch: int = 4):
    """A random <=3-block, <=8-channel network config plus a labelled batch."""
    rng = np.random.default_rng(seed)
    size = int(rng.choice([8, 10, 12]))
    s = size
    blocks = []
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.choice([1, 3])) if s >= 3 else 1
        p = int(rng.integers(0, 2)) if k == 3 else 0
        out = s + 2 * p - k + 1
        pool = bool(out % 2 == 0 and out >= 4 and rng.random() < 0.5)
        blocks.append(BlockSpec(int(rng.integers(1, 9)), k, p, pool))
        s = out // 2 if pool else out
    cfg = NetworkConfig(Architecture.CUSTOM, input_channels=int(rng.integers(1, 4)), input_size=size,
                        use_batchnorm=bool(rng.random() < 0.5), num_classes=int(rng.integers(2, 5)),
                        blocks=tuple(blocks))
    x = rng.normal(size=(batch, cfg.in_channels, size, size))
    y = rng.integers(0, cfg.num_classes, batch)
    return cfg, x, y
