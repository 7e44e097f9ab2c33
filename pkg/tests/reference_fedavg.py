"""Independent FedAvg-LoRA loop used as the oracle for the protocol.

Shares only the toy model, the local optimiser and the data partition with
the package. Client sampling, wire rounding, aggregation and the dense
update are rewritten here from their definitions.
"""

import numpy as np

from fedcodec import lora
from fedcodec.fedsim import make_experiment_data, partition_dirichlet


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def bernoulli_clients(n, frac, seed, t):
    rng = np.random.default_rng([seed, t, 0x5A])
    for _ in range(2):
        picked = [i for i, u in enumerate(rng.random(n)) if u < frac]
        if picked:
            return picked
    return [int(rng.integers(n))]


def reference_run(cfg):
    """Return the list of dense global deltas after every round."""
    data = make_experiment_data(cfg)
    model, adapter = lora.init_model(cfg.d, cfg.n_layers, cfg.rank, cfg.n_classes, cfg.seed)
    X, y = data.X_finetune, data.y_finetune
    parts = partition_dirichlet(y, cfg.n_clients, cfg.dirichlet_alpha, seed=cfg.seed)
    L, r, d = cfg.n_layers, cfg.rank, cfg.d
    D = np.zeros((L, 4, d, d))
    seen_by_clients = np.zeros_like(D)
    history = []
    for t in range(cfg.rounds):
        chosen = bernoulli_clients(cfg.n_clients, cfg.fraction, cfg.seed, t)
        sumA = np.zeros((L, 4, r, d))
        sumB = np.zeros((L, 4, d, r))
        for i in chosen:
            inc = lora.local_train(
                model, adapter, X[parts[i]], y[parts[i]],
                epochs=cfg.local_epochs, lr=cfg.local_lr, batch_size=cfg.local_batch,
                seed=[cfg.seed, t, i], delta=seen_by_clients,
            )
            sumA += adapter.A + f32(inc.A)
            sumB += adapter.B + f32(inc.B)
        if cfg.aggregation == "mean":
            sumA /= len(chosen)
            sumB /= len(chosen)
        for l in range(L):
            for p in range(4):
                D[l, p] += cfg.eta * np.einsum("ik,kj->ij", sumB[l, p], sumA[l, p])
        seen_by_clients = f32(D)
        history.append(D.copy())
    return history, model, data
