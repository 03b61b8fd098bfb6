"""Geo-tagged example datasets: synthetic generation, persistence and sampling."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
)
from .location import GeoLocation, as_lonlat, wrap_longitude

FORMAT_VERSION = 1
_HEADER = re.compile(r"^GEOCSP v(\d+) M=(\d+) DIM=(\d+) Q=(\d+)$")


class GeoTaggedExample(NamedTuple):
    location: GeoLocation
    feature: np.ndarray
    label: int | None


@dataclass(eq=False)
class Dataset:
    """Column-oriented collection of geo-tagged examples.

    ``labels`` is None for an unlabeled dataset; otherwise every entry is a
    class id below ``n_classes``.
    """

    locations: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int = 0
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.locations = as_lonlat(self.locations) if len(self.locations) else np.zeros((0, 2))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.locations):
            raise DimensionMismatchError("locations and features have different lengths")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.locations),):
                raise DimensionMismatchError("labels length differs from locations")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise UsageError(f"labels must lie in [0, {self.n_classes})")
        for arr in (self.locations, self.features, self.labels):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.locations)

    def __getitem__(self, i: int) -> GeoTaggedExample:
        lon, lat = self.locations[i]
        label = None if self.labels is None else int(self.labels[i])
        return GeoTaggedExample(GeoLocation(lon, lat), self.features[i], label)

    def __iter__(self) -> Iterator[GeoTaggedExample]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None
            and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return (
            (not self.labeled or self.n_classes == other.n_classes)
            and self.features.shape == other.features.shape
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.features, other.features)
            and same_labels
        )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return Dataset(
            self.locations[index],
            self.features[index],
            None if self.labels is None else self.labels[index],
            self.n_classes,
            dict(self.provenance),
        )

    def unlabeled(self) -> "Dataset":
        return Dataset(self.locations, self.features, None, 0, dict(self.provenance))

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise UsageError("dataset is unlabeled")
        return np.bincount(self.labels, minlength=self.n_classes)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Per-class spatial mixtures of von Mises-Fisher components plus feature prototypes.

    ``centers[q]`` is a ``(k_q, 2)`` lon/lat array, ``kappas[q]`` and
    ``weights[q]`` have length ``k_q``.
    """

    centers: list[np.ndarray]
    kappas: list[np.ndarray]
    weights: list[np.ndarray]
    prototypes: np.ndarray
    feature_noise: np.ndarray

    def __post_init__(self):
        q = len(self.centers)
        self.prototypes = np.atleast_2d(np.asarray(self.prototypes, dtype=np.float64))
        self.feature_noise = np.broadcast_to(
            np.asarray(self.feature_noise, dtype=np.float64), (q,)
        ).copy()
        if q < 1 or not (len(self.kappas) == len(self.weights) == len(self.prototypes) == q):
            raise ConfigError("per-class lists must all have length Q >= 1")
        for c, k, w in zip(self.centers, self.kappas, self.weights):
            c, k, w = np.atleast_2d(c), np.atleast_1d(k), np.atleast_1d(w)
            if not (len(c) == len(k) == len(w)) or len(c) == 0:
                raise ConfigError("centers, kappas and weights disagree in length")
            if np.any(k <= 0):
                raise ConfigError("kappa must be > 0")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("mixture weights must be non-negative and sum to 1")
        if np.any(self.feature_noise < 0):
            raise ConfigError("feature noise must be >= 0")

    @property
    def n_classes(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def random(
        cls,
        n_classes: int,
        dim: int,
        rng: np.random.Generator,
        kappa: float = 20.0,
        centers_per_class: int = 1,
        prototype_scale: float = 1.0,
        feature_noise: float = 1.0,
    ) -> "SyntheticSpec":
        """Uniform random centers, equal mixture weights, Gaussian prototypes."""
        from .location import sample_sphere

        centers = [sample_sphere(centers_per_class, rng) for _ in range(n_classes)]
        kappas = [np.full(centers_per_class, float(kappa)) for _ in range(n_classes)]
        weights = [np.full(centers_per_class, 1.0 / centers_per_class) for _ in range(n_classes)]
        prototypes = prototype_scale * rng.standard_normal((n_classes, dim))
        return cls(centers, kappas, weights, prototypes, feature_noise)


def lonlat_to_xyz(lonlat: np.ndarray) -> np.ndarray:
    lon, lat = lonlat[:, 0], lonlat[:, 1]
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def xyz_to_lonlat(xyz: np.ndarray) -> np.ndarray:
    xyz = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)
    lat = np.arcsin(np.clip(xyz[:, 2], -1.0, 1.0))
    lon = wrap_longitude(np.arctan2(xyz[:, 1], xyz[:, 0]))
    return np.column_stack([lon, lat])


def sample_vmf(mu: np.ndarray, kappa, rng: np.random.Generator) -> np.ndarray:
    """One von Mises-Fisher draw on S^2 per row of unit vectors ``mu``.

    The cosine to the mean direction uses the closed-form S^2 inverse CDF; the
    tangent direction is uniform in the plane orthogonal to ``mu``.
    """
    mu = np.atleast_2d(mu)
    n = len(mu)
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (n,))
    u = 1.0 - rng.random(n)  # (0, 1]
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    # orthonormal tangent basis at mu
    helper = np.where(np.abs(mu[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(mu, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(mu, e1)
    theta = 2.0 * math.pi * rng.random(n)
    radial = np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None]
    return w[:, None] * mu + radial * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)


def generate_synthetic(spec: SyntheticSpec, m: int, rng: np.random.Generator) -> Dataset:
    """Draw ``m`` labeled examples: class, mixture component, location, noisy feature."""
    if m < 1:
        raise ConfigError(f"need at least one example, got M={m}")
    labels = rng.integers(spec.n_classes, size=m)
    mu = np.empty((m, 3))
    kappa = np.empty(m)
    for q in range(spec.n_classes):
        idx = np.flatnonzero(labels == q)
        comp = rng.choice(len(spec.weights[q]), size=len(idx), p=spec.weights[q])
        mu[idx] = lonlat_to_xyz(np.atleast_2d(spec.centers[q]))[comp]
        kappa[idx] = np.atleast_1d(spec.kappas[q])[comp]
    locations = xyz_to_lonlat(sample_vmf(mu, kappa, rng))
    noise = rng.standard_normal((m, spec.dim)) * spec.feature_noise[labels][:, None]
    features = spec.prototypes[labels] + noise
    return Dataset(locations, features, labels, spec.n_classes, {"generator": "vmf-mixture"})


# ---------------------------------------------------------------- sampling


def stratified_sample(ds: Dataset, ratio_percent: float, rng: np.random.Generator) -> Dataset:
    """Keep ``round(ratio% * count)`` examples of every class, at least one per nonempty class.

    Output is ordered by class id, then by original index.
    """
    if not ds.labeled:
        raise UsageError("stratified sampling needs a labeled dataset")
    if not 0 < ratio_percent <= 100:
        raise ConfigError(f"ratio must lie in (0, 100], got {ratio_percent}")
    chosen = []
    for q in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == q)
        if len(idx) == 0:
            continue
        take = max(1, math.floor(ratio_percent / 100.0 * len(idx) + 0.5))
        chosen.append(np.sort(rng.choice(idx, size=min(take, len(idx)), replace=False)))
    index = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.intp)
    out = ds.subset(index)
    out.provenance["stratified_ratio"] = repr(float(ratio_percent))
    return out


def minibatches(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[Dataset]:
    """One epoch of shuffled batches; a final batch smaller than 2 is dropped."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield ds.subset(idx)


# ---------------------------------------------------------------- persistence


def save(path: str | os.PathLike, ds: Dataset) -> None:
    q = ds.n_classes if ds.labeled else 0
    lines = [f"GEOCSP v{FORMAT_VERSION} M={len(ds)} DIM={ds.dim} Q={q}"]
    lines += [f"# {k}={v}" for k, v in sorted(ds.provenance.items())]
    labels = ds.labels if ds.labeled else np.full(len(ds), -1)
    for (lon, lat), label, feat in zip(ds.locations, labels, ds.features):
        fields = [repr(float(lon)), repr(float(lat)), str(int(label))]
        fields += [repr(float(v)) for v in feat]
        lines.append(" ".join(fields))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_header(line: str) -> tuple[int, int, int]:
    match = _HEADER.match(line.strip())
    if match is None:
        raise MalformedHeaderError(f"bad dataset header: {line.strip()[:80]!r}")
    version, m, dim, q = (int(g) for g in match.groups())
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"dataset format v{version} is not supported (this reader handles v{FORMAT_VERSION})"
        )
    return m, dim, q


def load(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="ascii") as fh:
        text = fh.read().splitlines()
    if not text:
        raise MalformedHeaderError(f"{path}: empty file")
    m, dim, q = parse_header(text[0])
    provenance = {}
    records = []
    for lineno, line in enumerate(text[1:], start=2):
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            provenance[key] = value
            continue
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != dim + 3:
            raise DimensionMismatchError(
                f"{path}:{lineno}: expected {dim + 3} fields (lon lat label + {dim} features), "
                f"found {len(fields)}"
            )
        records.append(fields)
    if len(records) < m:
        raise TruncatedFileError(f"{path}: header promises {m} records, found {len(records)}")
    if len(records) > m:
        raise DimensionMismatchError(f"{path}: header promises {m} records, found {len(records)}")
    if m == 0:
        labels = None if q == 0 else np.zeros(0, dtype=np.int64)
        return Dataset(np.zeros((0, 2)), np.zeros((0, dim)), labels, q, provenance)
    try:
        arr = np.array(records, dtype=np.float64)
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: unparseable record ({exc})") from None
    labels = arr[:, 2].astype(np.int64)
    if np.all(labels == -1):
        labels = None
    elif np.any(labels < 0):
        raise UsageError(f"{path}: dataset mixes labeled and unlabeled records")
    return Dataset(arr[:, :2], arr[:, 3:], labels, q, provenance)
