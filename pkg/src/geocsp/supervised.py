"""Supervised fine-tuning: presence-absence location loss, image head, posterior combination."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit, softmax

from . import autodiff as ad
from .autodiff import Adam, Linear, Tensor
from .data import Dataset, minibatches
from .errors import ShapeError, UsageError
from .location import GeoLocation, LocationEncoder, as_lonlat, sample_sphere
from .objectives import PairSet, nce_loss


def init_class_embedding(embed_dim: int, n_classes: int, rng: np.random.Generator) -> Tensor:
    """``embed_dim x n_classes`` matrix with N(0, 1e-4^2) entries."""
    return Tensor(1e-4 * rng.standard_normal((embed_dim, n_classes)), requires_grad=True)


def presence_absence_pairs(
    loc_emb: Tensor, rand_emb: Tensor, class_emb: Tensor, labels: np.ndarray
) -> tuple[PairSet, PairSet]:
    """Labeled positives, and labeled negatives united with random-location negatives.

    Rows of ``left`` are the batch embeddings followed by one random-location
    embedding per example; rows of ``right`` are the class columns.
    """
    n, q = len(loc_emb), class_emb.shape[1]
    left = ad.concat([loc_emb, rand_emb])
    right = ad.transpose(class_emb)
    rows = np.arange(n)
    positives = np.column_stack([rows, labels])
    grid_r, grid_c = np.meshgrid(rows, np.arange(q), indexing="ij")
    others = grid_c != labels[:, None]
    labeled_neg = np.column_stack([grid_r[others], grid_c[others]])
    random_neg = np.column_stack([grid_r.ravel() + n, grid_c.ravel()])
    empty = np.zeros((0, 2), dtype=np.intp)
    pos = PairSet(left, right, positives, empty)
    neg = PairSet(left, right, empty, np.vstack([labeled_neg, random_neg]))
    return pos, neg


def presence_absence_loss(
    batch: Dataset,
    encoder: LocationEncoder,
    class_emb: Tensor,
    pos_weight: float,
    rng: np.random.Generator,
) -> Tensor:
    """Weighted positive term plus negative term, scoring pairs by ``sigmoid(e(x) . T[:, y])``.

    Every example also contributes one fresh uniform sphere location, paired
    against all classes as negatives.
    """
    if not batch.labeled:
        raise UsageError("presence-absence loss needs labeled examples")
    if class_emb.shape[0] != encoder.embed_dim:
        raise ShapeError(
            f"class embedding has {class_emb.shape[0]} rows, encoder emits {encoder.embed_dim}"
        )
    if batch.labels.max(initial=-1) >= class_emb.shape[1]:
        raise UsageError("label exceeds the number of class columns")
    loc_emb = encoder.forward(batch.locations, train=True, rng=rng)
    rand_emb = encoder.forward(sample_sphere(len(batch), rng), train=True, rng=rng)
    pos, neg = presence_absence_pairs(loc_emb, rand_emb, class_emb, batch.labels)
    return pos_weight * nce_loss(pos, similarity="dot") + nce_loss(neg, similarity="dot")


def finetune_location(
    encoder: LocationEncoder,
    class_emb: Tensor,
    data: Dataset,
    rng: np.random.Generator,
    pos_weight: float = 1.0,
    lr: float = 5e-4,
    epochs: int = 30,
    batch_size: int = 32,
) -> list[float]:
    """Adam on encoder weights and class embeddings; returns the mean loss per epoch."""
    opt = Adam(encoder.parameters() + [class_emb], lr)
    history = []
    for _ in range(epochs):
        losses = [
            opt.minimize(lambda: presence_absence_loss(batch, encoder, class_emb, pos_weight, rng))
            for batch in minibatches(data, batch_size, rng)
        ]
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return history


# ---------------------------------------------------------------- image head


def cross_entropy(head: Linear, features, labels: np.ndarray) -> Tensor:
    logits = head(features)
    lse = ad.logsumexp(logits)
    picked = logits[np.arange(len(labels)), labels]
    return (lse - picked).mean()


def train_classifier_head(
    features: np.ndarray,
    labels: np.ndarray,
    head: Linear,
    rng: np.random.Generator,
    lr: float = 1e-3,
    epochs: int = 200,
    batch_size: int = 64,
) -> list[float]:
    """Linear probe over frozen features with softmax cross-entropy and Adam."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise UsageError("cannot train a classifier head on an empty dataset")
    if features.shape[1] != head.n_in:
        raise ShapeError(f"head expects {head.n_in} features, got {features.shape[1]}")
    opt = Adam(head.parameters(), lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(features))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            losses.append(opt.minimize(lambda: cross_entropy(head, features[idx], labels[idx])))
        history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------- inference


def location_logits(locs, encoder: LocationEncoder, class_emb) -> np.ndarray:
    t = class_emb.data if isinstance(class_emb, Tensor) else np.asarray(class_emb)
    return encoder.forward(as_lonlat(locs), train=False).data @ t


def location_posterior(locs, encoder: LocationEncoder, class_emb) -> np.ndarray:
    """Per-class presence scores ``sigmoid(e(x) . T[:, y])``; rows are not normalised."""
    single = isinstance(locs, GeoLocation) or np.ndim(locs) == 1
    scores = expit(location_logits(locs, encoder, class_emb))
    return scores[0] if single else scores


def image_posterior(features, head: Linear) -> np.ndarray:
    """Softmax of the head's logits."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != head.n_in:
        raise ShapeError(f"head expects {head.n_in} features, got {x.shape[1]}")
    probs = softmax(head(x).data, axis=1)
    return probs[0] if single else probs


def combine_posteriors(loc_post: np.ndarray, img_post: np.ndarray) -> np.ndarray:
    """Argmax of the product of the two posteriors; ties go to the lowest class id."""
    return np.argmax(np.atleast_2d(loc_post) * np.atleast_2d(img_post), axis=1)


def combined_predict(loc, feature, encoder: LocationEncoder, class_emb, head: Linear):
    pred = combine_posteriors(location_posterior(loc, encoder, class_emb), image_posterior(feature, head))
    return int(pred[0]) if len(pred) == 1 else pred


def evaluate_top1(dataset: Dataset, predictor: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
    """Fraction of examples where ``predictor(locations, features)`` equals the label."""
    if not dataset.labeled:
        raise UsageError("Top-1 evaluation needs a labeled dataset")
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    pred = np.asarray(predictor(dataset.locations, dataset.features))
    return int(np.count_nonzero(pred == dataset.labels)) / len(dataset)
