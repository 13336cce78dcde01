"""Stop re-clustering early and compare probe accuracy and clustering cost."""
from deepcluster_lab.data import Split, make_synthetic
from deepcluster_lab.pipeline import RunConfig, halt_sweep

cfg = RunConfig(dataset="synthetic", synthetic_size=600, num_cycles=6, num_clusters=10,
                batch_size=64, probe_epochs=5)
train = make_synthetic(600, split=Split.TRAIN)
test = make_synthetic(300, split=Split.TEST)

for e in halt_sweep(cfg, [1, 3, None], train, test):
    halt = "never" if e.halt_cycle is None else f"after {e.halt_cycle}"
    print(f"halt {halt:>8}: {e.clustering_invocations} k-means calls, "
          f"{e.clustering_seconds:.2f}s clustering, probe {e.accuracy:.3f}")
