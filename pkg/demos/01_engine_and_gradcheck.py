"""Build a small convnet, check its gradients, and take a few SGD steps.

Run: python3 demos/01_engine_and_gradcheck.py
"""
import numpy as np

from deepcluster_lab.gradcheck import check_gradients, random_small_network
from deepcluster_lab.nn import OptimizerState, backward, build_network, sgd_step

cfg, x, y = random_small_network(seed=3, batch=8)
print("blocks:", [(b.filters, b.kernel, b.padding, b.pool) for b in cfg.blocks])

# the finite-difference oracle only calls forward(), so it does not trust backward()
report = check_gradients(build_network(cfg, 3, dtype=np.float64), x, y)
print(f"64-bit engine: worst elementwise rel error {report.max_rel_error:.2e} "
      f"({report.checked} checked, {report.skipped} skipped at kinks)")

report32 = check_gradients(build_network(cfg, 3), x, y)
print(f"32-bit engine: worst tensor-wise rel error {report32.max_tensor_rel_error:.2e}")

# a handful of steps on one batch should drive the loss down
net = build_network(cfg, 3).train()
opt = OptimizerState.for_params(net.parameters(), learning_rate=0.05, momentum=0.9)
for step in range(10):
    loss, grads = backward(net, net.forward(x), y)
    sgd_step(net.parameters(), grads, opt)
    print(f"step {step}: loss {loss:.4f}")
