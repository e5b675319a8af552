"""
Four-factor look at a trained model
===================================

Weight similarity, inter-class and intra-class feature similarity, and how
well each classifier row lines up with its class prototype.
"""
import numpy as np

from fednorm import FLConfig, factor_report, gen_synthetic, partition_iid, partition_sharding, run_federated

train = gen_synthetic(10, 16, 100, 5.0, 1.0, seed=1)
test = gen_synthetic(10, 16, 100, 5.0, 1.0, seed=1, split="test")
cfg = FLConfig(num_clients=20, rounds=24, local_epochs=5, batch_size=10, lr=0.1, seed=1)


def off_diagonal_mean(m):
    return m[~np.eye(len(m), dtype=bool)].mean()


for name, part in (("iid", partition_iid(train, 20, 1)), ("s=2", partition_sharding(train, 20, 2, 1))):
    model = run_federated(cfg, train, test, part, snapshot_rounds=[]).model
    rep = factor_report(model, test)
    print(f"{name}:")
    print(f"  weight similarity (off-diagonal mean)      {off_diagonal_mean(rep.weight_similarity):+.3f}")
    print(f"  inter-class similarity (off-diagonal mean) {off_diagonal_mean(rep.inter_class_similarity):+.3f}")
    print(f"  intra-class similarity (mean)              {rep.intra_class_similarity.mean():+.3f}")
    print(f"  prototype/weight alignment (mean cosine)   {rep.prototype_weight_alignment.mean():+.3f}")

# higher inter-class similarity means class prototypes crowd together
