"""
Splitting a dataset across clients
==================================

IID, label sharding and Dirichlet (LDA) splits of the same synthetic data,
with the class histogram of the first few clients.
"""
import numpy as np

from fednorm import gen_synthetic, partition_iid, partition_lda, partition_sharding

train = gen_synthetic(num_classes=10, dim=16, n_per_class=100, class_separation=5.0,
                      noise_scale=1.0, seed=0)
print("examples:", len(train), "classes:", train.num_classes)

splits = {
    "iid": partition_iid(train, 20, seed=0),
    "sharding s=2": partition_sharding(train, 20, 2, seed=0),
    "lda alpha=0.1": partition_lda(train, 20, 0.1, seed=0),
}

for name, part in splits.items():
    print(f"\n{name}  (client sizes {part.sizes().min()}..{part.sizes().max()})")
    for n in range(4):
        hist = np.bincount(train.y[part.assignments[n]], minlength=10)
        print(f"  client {n}: {hist.tolist()}")

# smaller alpha concentrates each class on fewer clients
for alpha in (0.1, 1.0, 1000.0):
    part = partition_lda(train, 20, alpha, seed=1)
    counts = np.stack([np.bincount(train.y[a], minlength=10) for a in part.assignments])
    print(f"alpha={alpha:<7g} mean largest client share per class: "
          f"{np.mean(counts.max(axis=0) / train.class_counts()):.3f}")
