"""Rank candidate K values by initial alignment, without training anything.

IA is NMI between ground truth and k-means on a freshly initialised
network's features. Each candidate gets a distribution over seeds.
"""
from deepcluster_lab.data import Split, make_synthetic
from deepcluster_lab.ia_select import rank_candidates, sample_ia
from deepcluster_lab.pipeline import RunConfig

cfg = RunConfig(dataset="synthetic", synthetic_size=500)
ds = make_synthetic(500, split=Split.TRAIN)

dists = [sample_ia(cfg, "k", k, n_seeds=8, dataset=ds) for k in (3, 10, 40)]
for d in rank_candidates(dists):
    print(f"K={d.value:>3}: median {d.median:.3f}  p25 {d.p25:.3f}  "
          f"spread [{min(d.values):.3f}, {max(d.values):.3f}]")
