"""A short DeepCluster run on synthetic blobs, then a linear probe.

Writes a run directory to ./demo_run (metrics.csv, timings.csv, checkpoints/).
"""
import sys

from deepcluster_lab.data import Split, make_synthetic
from deepcluster_lab.nn import build_network
from deepcluster_lab.pipeline import RunConfig, probe_run, run_deepcluster

out = sys.argv[1] if len(sys.argv) > 1 else "demo_run"
cfg = RunConfig(dataset="synthetic", synthetic_size=600, num_cycles=6, num_clusters=10,
                batch_size=64, probe_epochs=5)
train = make_synthetic(600, split=Split.TRAIN)
test = make_synthetic(300, split=Split.TEST)


def show(rec):
    prev = "   -  " if rec.nmi_prev is None else f"{rec.nmi_prev:.3f}"
    print(f"cycle {rec.cycle}: NMI(prev) {prev}  NMI(truth) {rec.nmi_truth:.3f}  loss {rec.loss:.3f}")


log = run_deepcluster(cfg, train, out_dir=out, progress=show)

# the pretrained trunk against an untouched network with the same seed
pre = probe_run(log.network, cfg, train, test).accuracy
rnd = probe_run(build_network(cfg.network_config(), cfg.seed), cfg, train, test).accuracy
print(f"linear probe on {log.network.config.architecture.value}: pretrained {pre:.3f}, random {rnd:.3f}")
print(f"k-means ran {log.clustering_invocations} times, {log.clustering_seconds:.2f}s total; outputs in {out}/")
