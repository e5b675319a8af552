"""
Personalizing a global model
============================

Each client fine-tunes the converged global model on its own shard for five
epochs. We score it on test examples of the classes that client holds and
pick the best learning rate from {lr, lr/10, lr/100}.
"""
from fednorm import FLConfig, gen_synthetic, partition_sharding, pfl_evaluate, run_federated

seed = 2
train = gen_synthetic(10, 16, 100, 5.0, 1.0, seed)
test = gen_synthetic(10, 16, 100, 5.0, 1.0, seed, split="test")
part = partition_sharding(train, 20, 2, seed)

for alg, lr in (("fedavg", 0.1), ("fedfn", 0.3), ("fedbabu", 0.1)):
    cfg = FLConfig(num_clients=20, rounds=32, local_epochs=5, batch_size=10, lr=lr, algorithm=alg, seed=seed)
    model = run_federated(cfg, train, test, part, snapshot_rounds=[]).model
    rep = pfl_evaluate(model, part, train, test, epochs=5, lr_grid=(lr, lr / 10, lr / 100), seed=seed,
                       batch_size=10)
    g = rep.global_personal
    print(f"{alg:8s} global on personal sets {100 * g.mean:.2f}±{100 * g.std:.2f}")
    for r in rep.results:
        print(f"         fine-tuned lr={r.lr:<7g} {100 * r.mean:.2f}±{100 * r.std:.2f}")
