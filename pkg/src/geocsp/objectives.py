"""Positive/negative pair construction and the contrastive pre-training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Tensor
from .data import Dataset
from .errors import ConfigError, ShapeError, UsageError
from .location import LocationEncoder, sample_sphere

SIMILARITIES = {"cosine": ad.pair_cosine, "dot": ad.pair_dot}
COMPONENTS = frozenset("BLD")


def _empty_pairs() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.intp)


@dataclass
class PairSet:
    """Positive and negative (left row, right row) pairs over two embedding matrices.

    Every pair carries the index of the anchor it is grouped under; the
    multi-class loss compares each positive against the negatives that share
    its anchor.
    """

    left: Tensor
    right: Tensor
    positives: np.ndarray
    negatives: np.ndarray
    pos_anchor: np.ndarray | None = None
    neg_anchor: np.ndarray | None = None

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.intp).reshape(-1, 2)
        self.negatives = np.asarray(self.negatives, dtype=np.intp).reshape(-1, 2)
        for name, pairs in (("pos_anchor", self.positives), ("neg_anchor", self.negatives)):
            anchor = getattr(self, name)
            if anchor is None:
                continue
            anchor = np.asarray(anchor, dtype=np.intp).reshape(-1)
            if len(anchor) != len(pairs):
                raise ShapeError(f"{name} has {len(anchor)} entries for {len(pairs)} pairs")
            setattr(self, name, anchor)
        for pairs in (self.positives, self.negatives):
            if len(pairs) and (
                pairs[:, 0].max() >= len(self.left) or pairs[:, 1].max() >= len(self.right)
            ):
                raise ShapeError("pair index out of range")

    @property
    def n_positive(self) -> int:
        return len(self.positives)

    @property
    def n_negative(self) -> int:
        return len(self.negatives)

    def positive_part(self) -> "PairSet":
        return PairSet(self.left, self.right, self.positives, _empty_pairs(), self.pos_anchor, np.zeros(0, np.intp))

    def negative_part(self) -> "PairSet":
        return PairSet(self.left, self.right, _empty_pairs(), self.negatives, np.zeros(0, np.intp), self.neg_anchor)

    def merge(self, other: "PairSet") -> "PairSet":
        """Union of two pair sets; embedding matrices shared by identity are not duplicated."""
        def joined(a: Tensor, b: Tensor):
            if a is b:
                return a, 0
            return ad.concat([a, b]), len(a)

        left, left_off = joined(self.left, other.left)
        right, right_off = joined(self.right, other.right)
        offset = np.array([left_off, right_off])

        def anchors(a, b):
            if a is None or b is None:
                return None
            return np.concatenate([a, b])

        return PairSet(
            left,
            right,
            np.vstack([self.positives, other.positives + offset]),
            np.vstack([self.negatives, other.negatives + offset]),
            anchors(self.pos_anchor, other.pos_anchor),
            anchors(self.neg_anchor, other.neg_anchor),
        )

    def similarities(self, which: str, similarity: str = "cosine") -> Tensor:
        pairs = self.positives if which == "pos" else self.negatives
        return SIMILARITIES[similarity](self.left, self.right, pairs[:, 0], pairs[:, 1])


def _all_off_diagonal(n: int) -> np.ndarray:
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return np.column_stack([i, j])


def _matched_pairs(left: Tensor, right: Tensor) -> PairSet:
    n = len(left)
    if n < 2:
        raise UsageError(f"in-batch pairs need a batch of at least 2, got {n}")
    if len(right) != n:
        raise ShapeError(f"batch sizes differ: {n} vs {len(right)}")
    diag = np.arange(n)
    neg = _all_off_diagonal(n)
    return PairSet(left, right, np.column_stack([diag, diag]), neg, diag, neg[:, 0].copy())


def build_inbatch_pairs(loc_emb: Tensor, img_emb: Tensor) -> PairSet:
    """Matched location-image pairs are positive; every mismatched pair is negative."""
    return _matched_pairs(loc_emb, img_emb)


def build_negative_location_pairs(
    locations,
    img_emb: Tensor,
    n_neg: int,
    encoder: LocationEncoder,
    rng: np.random.Generator,
) -> PairSet:
    """Pair every image with ``n_neg`` freshly sampled uniform sphere locations.

    Returns negatives only, anchored at the image index. Negative location
    ``j`` of image ``i`` sits at row ``i * n_neg + j`` of ``left``.
    """
    if n_neg < 1:
        raise ConfigError(f"need at least one negative location, got C={n_neg}")
    n = len(img_emb)
    if len(locations) != n:
        raise ShapeError(f"{len(locations)} locations but {n} image embeddings")
    locs = sample_sphere(n * n_neg, rng)
    neg_emb = encoder.forward(locs, train=True, rng=rng)
    rows = np.arange(n * n_neg)
    anchor = rows // n_neg
    return PairSet(neg_emb, img_emb, _empty_pairs(), np.column_stack([rows, anchor]), np.zeros(0, np.intp), anchor)


def build_simcse_pairs(
    locations,
    encoder: LocationEncoder,
    rng: np.random.Generator,
    first: Tensor | None = None,
) -> PairSet:
    """Two dropout-perturbed encodings of the same batch.

    ``(E[i], E'[i])`` are positives and ``(E[i], E'[j])``, ``j != i``, negatives.
    ``first`` reuses an already computed train-mode pass as ``E``.
    """
    if first is None:
        first = encoder.forward(locations, train=True, rng=rng)
    second = encoder.forward(locations, train=True, rng=rng)
    return _matched_pairs(first, second)


# ---------------------------------------------------------------- losses


def nce_loss(pairs: PairSet, similarity: str = "cosine") -> Tensor:
    """Binary logistic loss: positives pushed to high similarity, negatives to low.

    Each side is averaged over its own pairs; an empty side contributes nothing.
    """
    if pairs.n_positive == 0 and pairs.n_negative == 0:
        raise UsageError("nce_loss needs at least one pair")
    total = Tensor(0.0)
    if pairs.n_positive:
        total = total - ad.log_sigmoid(pairs.similarities("pos", similarity)).mean()
    if pairs.n_negative:
        total = total - ad.log_sigmoid(-pairs.similarities("neg", similarity)).mean()
    return total


def mc_loss(pairs: PairSet, tau: float = 1.0, similarity: str = "cosine") -> Tensor:
    """Mean over positives of the negative log-softmax of the positive within its anchor group."""
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if pairs.n_positive == 0:
        raise UsageError("mc_loss needs at least one positive pair")
    if pairs.pos_anchor is None or (pairs.n_negative and pairs.neg_anchor is None):
        raise UsageError("mc_loss needs anchor grouping for every pair")
    scores = pairs.similarities("pos", similarity)
    if pairs.n_negative:
        scores = ad.concat([scores, pairs.similarities("neg", similarity)])
    # slot 0 of each row is the positive, the rest are that anchor's negatives
    order = np.argsort(pairs.neg_anchor, kind="stable") if pairs.n_negative else np.zeros(0, np.intp)
    sorted_anchor = pairs.neg_anchor[order] if pairs.n_negative else order
    starts = np.searchsorted(sorted_anchor, pairs.pos_anchor, side="left")
    stops = np.searchsorted(sorted_anchor, pairs.pos_anchor, side="right")
    width = 1 + int((stops - starts).max(initial=0))
    index = np.zeros((pairs.n_positive, width), dtype=np.intp)
    mask = np.zeros((pairs.n_positive, width), dtype=bool)
    index[:, 0] = np.arange(pairs.n_positive)
    mask[:, 0] = True
    for row, (lo, hi) in enumerate(zip(starts, stops)):
        index[row, 1 : 1 + hi - lo] = pairs.n_positive + order[lo:hi]
        mask[row, 1 : 1 + hi - lo] = True
    logits = ad.take(scores, index) * (1.0 / tau)
    log_prob = logits[:, 0] - ad.logsumexp(logits, mask)
    return -log_prob.mean()


# ---------------------------------------------------------------- objectives


@dataclass(frozen=True)
class ContrastiveConfig:
    loss: str = "mc"
    components: str = "BLD"
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    tau0: float = 1.0
    tau1: float = 1.0
    tau2: float = 1.0
    n_neg_locations: int = 1

    def __post_init__(self):
        if self.loss not in ("nce", "mc", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        comps = set(self.components.upper())
        if not comps <= COMPONENTS:
            raise ConfigError(f"components must be drawn from B, L, D; got {self.components!r}")
        if self.loss != "mse" and not comps:
            raise ConfigError("all loss components are disabled")
        if min(self.tau0, self.tau1, self.tau2) <= 0:
            raise ConfigError("temperatures must be > 0")
        if min(self.alpha1, self.alpha2, self.beta1, self.beta2) < 0:
            raise ConfigError("loss weights must be >= 0")
        if "L" in comps and self.n_neg_locations < 1:
            raise ConfigError("the L component needs n_neg_locations >= 1")

    def has(self, component: str) -> bool:
        return component in self.components.upper()


def _batch_parts(batch: Dataset, encoder: LocationEncoder, rng):
    loc_emb = encoder.forward(batch.locations, train=True, rng=rng)
    return loc_emb, Tensor(batch.features)


def csp_nce_objective(
    batch: Dataset,
    encoder: LocationEncoder,
    projection: Linear,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
) -> Tensor:
    """In-batch term plus weighted negative-location and dropout terms, all binary NCE."""
    if cfg.loss != "nce":
        raise ConfigError(f"csp_nce_objective called with loss={cfg.loss!r}")
    loc_emb, features = _batch_parts(batch, encoder, rng)
    img_emb = projection(features)
    total = Tensor(0.0)
    if cfg.has("B"):
        total = total + nce_loss(build_inbatch_pairs(loc_emb, img_emb))
    if cfg.has("L"):
        neg = build_negative_location_pairs(batch.locations, img_emb, cfg.n_neg_locations, encoder, rng)
        total = total + cfg.beta1 * nce_loss(neg)
    if cfg.has("D"):
        total = total + cfg.beta2 * nce_loss(build_simcse_pairs(batch.locations, encoder, rng, first=loc_emb))
    return total


def csp_mc_objective(
    batch: Dataset,
    encoder: LocationEncoder,
    projection: Linear,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Multi-class counterpart; the L term re-uses the matched pairs as its positives."""
    if cfg.loss != "mc":
        raise ConfigError(f"csp_mc_objective called with loss={cfg.loss!r}")
    loc_emb, features = _batch_parts(batch, encoder, rng)
    img_emb = projection(features)
    matched = build_inbatch_pairs(loc_emb, img_emb)
    total = Tensor(0.0)
    if cfg.has("B"):
        total = total + mc_loss(matched, cfg.tau0)
    if cfg.has("L"):
        neg = build_negative_location_pairs(batch.locations, img_emb, cfg.n_neg_locations, encoder, rng)
        total = total + cfg.alpha1 * mc_loss(matched.positive_part().merge(neg), cfg.tau1)
    if cfg.has("D"):
        simcse = build_simcse_pairs(batch.locations, encoder, rng, first=loc_emb)
        total = total + cfg.alpha2 * mc_loss(simcse, cfg.tau2)
    return total


def mse_objective(
    batch: Dataset,
    encoder: LocationEncoder,
    regressor: Linear,
    rng: np.random.Generator,
) -> Tensor:
    """Mean squared error between a linear read-out of the embedding and the frozen feature."""
    if regressor.n_in != encoder.embed_dim or regressor.n_out != batch.dim:
        raise ShapeError(
            f"regressor maps {regressor.n_in}->{regressor.n_out}, "
            f"need {encoder.embed_dim}->{batch.dim}"
        )
    loc_emb, features = _batch_parts(batch, encoder, rng)
    return ad.square(regressor(loc_emb) - features).mean()


def objective(
    batch: Dataset,
    encoder: LocationEncoder,
    head: Linear,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Dispatch on ``cfg.loss``; ``head`` is the projection (nce/mc) or regressor (mse)."""
    if cfg.loss == "nce":
        return csp_nce_objective(batch, encoder, head, cfg, rng)
    if cfg.loss == "mc":
        return csp_mc_objective(batch, encoder, head, cfg, rng)
    return mse_objective(batch, encoder, head, rng)
