"""Random objective instances, their oracle values and parameter binding for gradient checks."""

from __future__ import annotations

import numpy as np

import oracle
from geocsp.autodiff import Linear, Tensor
from geocsp.location import sample_sphere
from geocsp.objectives import ContrastiveConfig, objective
from geocsp.supervised import cross_entropy, presence_absence_loss

from conftest import random_batch, small_encoder


def random_instance(rng, n=None, d=None, loss=None):
    n = n or int(rng.integers(2, 5))
    d = d or int(rng.integers(2, 7))
    loss = loss or str(rng.choice(["nce", "mc", "mse"]))
    comps = "".join(c for c in "BLD" if rng.random() < 0.6) or "B"
    cfg = ContrastiveConfig(
        loss, comps, *rng.uniform(0.1, 2.0, 4), *rng.uniform(0.2, 2.0, 3), n_neg_locations=int(rng.integers(1, 4))
    )
    feature_dim = int(rng.integers(2, 6))
    batch = random_batch(rng, n, feature_dim)
    encoder = small_encoder(rng, embed_dim=d, dropout=float(rng.choice([0.0, 0.3])), hidden_units=8)
    head = Linear.init(d, feature_dim, rng) if loss == "mse" else Linear.init(feature_dim, d, rng)
    # nonzero biases keep embeddings away from the origin, where cosine has no gradient
    for layer in encoder.layers + [head]:
        layer.bias.data = rng.normal(0, 0.1, layer.bias.shape)
    return batch, encoder, head, cfg


def oracle_objective(batch, encoder, head, cfg, seed):
    """Recompute the embeddings with the same draws, then enumerate pairs."""
    rng = np.random.default_rng(seed)
    E = encoder.forward(batch.locations, train=True, rng=rng).data.tolist()
    W, b = head.weight.data.tolist(), head.bias.data.tolist()
    if cfg.loss == "mse":
        return oracle.mse(oracle.affine(E, W, b), batch.features.tolist())
    P = oracle.affine(batch.features.tolist(), W, b)
    R = E2 = None
    C = cfg.n_neg_locations
    if cfg.has("L"):
        R = encoder.forward(sample_sphere(len(E) * C, rng), train=True, rng=rng).data.tolist()
    if cfg.has("D"):
        E2 = encoder.forward(batch.locations, train=True, rng=rng).data.tolist()
    comps = cfg.components
    if cfg.loss == "nce":
        return oracle.nce_objective(E, P, R, E2, C, comps, cfg.beta1, cfg.beta2)
    return oracle.mc_objective(E, P, R, E2, C, comps, cfg.alpha1, cfg.alpha2, cfg.tau0, cfg.tau1, cfg.tau2)


def production_objective(batch, encoder, head, cfg, seed):
    return objective(batch, encoder, head, cfg, np.random.default_rng(seed)).item()


def layer_arrays(layers):
    return [a for layer in layers for a in (layer.weight.data.copy(), layer.bias.data.copy())]


def bind(layers, tensors):
    for k, layer in enumerate(layers):
        layer.weight, layer.bias = tensors[2 * k], tensors[2 * k + 1]


def objective_fd_problem(batch, encoder, head, cfg, seed):
    """``(f, point)`` for :func:`finite_difference_check` over every trainable weight."""
    layers = encoder.layers + [head]

    def f(tensors):
        bind(layers, tensors)
        return objective(batch, encoder, head, cfg, np.random.default_rng(seed))

    return f, layer_arrays(layers)


def presence_absence_fd_problem(rng, n, d, n_classes=3, seed=0):
    batch = random_batch(rng, n, 2, n_classes)
    encoder = small_encoder(rng, embed_dim=d, dropout=0.3, hidden_units=5)
    T = rng.normal(0, 0.5, (d, n_classes))
    beta = float(rng.uniform(0.2, 2.0))

    def f(tensors):
        bind(encoder.layers, tensors[:-1])
        return presence_absence_loss(batch, encoder, tensors[-1], beta, np.random.default_rng(seed))

    return f, layer_arrays(encoder.layers) + [T]


def cross_entropy_fd_problem(rng, n, d, n_classes=4):
    features = rng.standard_normal((n, d))
    labels = rng.integers(0, n_classes, n)
    head = Linear.init(d, n_classes, rng)

    def f(tensors):
        bind([head], tensors)
        return cross_entropy(head, features, labels)

    return f, layer_arrays([head])


def as_tensor_list(arrays):
    return [Tensor(a, requires_grad=True) for a in arrays]
