"""Sinusoidal location features and the dropout MLP that maps them to embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Tensor
from .errors import ConfigError, ShapeError, UsageError

TWO_PI = 2.0 * math.pi


def wrap_longitude(lon):
    """Map longitudes (radians) into ``[-pi, pi)``."""
    return np.mod(np.asarray(lon, dtype=np.float64) + math.pi, TWO_PI) - math.pi


@dataclass(frozen=True)
class GeoLocation:
    """A point on the sphere: longitude in ``[-pi, pi)``, latitude in ``[-pi/2, pi/2]``."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise UsageError(f"non-finite coordinates ({self.lon}, {self.lat})")
        if abs(self.lat) > math.pi / 2:
            raise UsageError(f"latitude {self.lat} outside [-pi/2, pi/2]")
        object.__setattr__(self, "lon", float(wrap_longitude(self.lon)))
        object.__setattr__(self, "lat", float(self.lat))

    def as_array(self) -> np.ndarray:
        return np.array([self.lon, self.lat])


def as_lonlat(locs) -> np.ndarray:
    """Validate locations into an ``(n, 2)`` float array with wrapped longitudes."""
    if isinstance(locs, GeoLocation):
        return locs.as_array()[None, :]
    if len(locs) and isinstance(locs[0], GeoLocation):
        return np.array([loc.as_array() for loc in locs])
    arr = np.array(locs, dtype=np.float64).reshape(-1, 2) if len(locs) else np.zeros((0, 2))
    if not np.all(np.isfinite(arr)):
        raise UsageError("locations contain non-finite values")
    if np.any(np.abs(arr[:, 1]) > math.pi / 2):
        raise UsageError("latitude outside [-pi/2, pi/2]")
    arr[:, 0] = wrap_longitude(arr[:, 0])
    return arr


def sphere_point(u1, u2):
    """Area-uniform sphere point from two U(0,1) variates."""
    lon = TWO_PI * np.asarray(u1, dtype=np.float64) - math.pi
    lat = np.arcsin(2.0 * np.asarray(u2, dtype=np.float64) - 1.0)
    return lon, lat


def uniform_sphere_sample(rng: np.random.Generator) -> GeoLocation:
    u1, u2 = rng.random(2)
    lon, lat = sphere_point(u1, u2)
    return GeoLocation(float(lon), float(lat))


def sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform sphere locations as an ``(n, 2)`` array.

    Draws the same variates, in the same order, as ``n`` calls to
    :func:`uniform_sphere_sample`.
    """
    u = rng.random((n, 2))
    lon, lat = sphere_point(u[:, 0], u[:, 1])
    return np.column_stack([wrap_longitude(lon), lat])


# ---------------------------------------------------------------- positional features


@dataclass(frozen=True)
class PositionalEncodingConfig:
    kind: str = "grid"
    n_scales: int = 64
    min_radius: float = 0.01
    max_radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("wrap", "grid"):
            raise ConfigError(f"unknown positional encoding {self.kind!r}")
        if self.kind == "grid":
            if int(self.n_scales) != self.n_scales or self.n_scales < 1:
                raise ConfigError(f"n_scales must be a positive integer, got {self.n_scales}")
            if not 0 < self.min_radius <= self.max_radius:
                raise ConfigError(
                    f"need 0 < min_radius <= max_radius, got {self.min_radius}, {self.max_radius}"
                )

    @property
    def width(self) -> int:
        return 4 if self.kind == "wrap" else 4 * self.n_scales

    def scales(self) -> np.ndarray:
        if self.n_scales == 1:
            return np.array([self.min_radius])
        growth = (self.max_radius / self.min_radius) ** (1.0 / (self.n_scales - 1))
        return self.min_radius * growth ** np.arange(self.n_scales)


def _normalized(lonlat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return lonlat[:, 0] / math.pi, 2.0 * lonlat[:, 1] / math.pi


def wrap_features(lonlat: np.ndarray) -> np.ndarray:
    lon_n, lat_n = _normalized(lonlat)
    return np.column_stack(
        [np.sin(math.pi * lon_n), np.cos(math.pi * lon_n), np.sin(math.pi * lat_n), np.cos(math.pi * lat_n)]
    )


def grid_features(lonlat: np.ndarray, cfg: PositionalEncodingConfig) -> np.ndarray:
    lon_n, lat_n = _normalized(lonlat)
    inv = 1.0 / cfg.scales()
    a = lon_n[:, None] * inv
    b = lat_n[:, None] * inv
    # per scale: sin(lon), cos(lon), sin(lat), cos(lat)
    out = np.stack([np.sin(a), np.cos(a), np.sin(b), np.cos(b)], axis=2)
    return out.reshape(len(lonlat), -1)


def positional_features(lonlat: np.ndarray, cfg: PositionalEncodingConfig) -> np.ndarray:
    if cfg.kind == "wrap":
        return wrap_features(lonlat)
    return grid_features(lonlat, cfg)


def wrap_encode(loc: GeoLocation) -> np.ndarray:
    return wrap_features(as_lonlat(loc))[0]


def grid_encode(loc: GeoLocation, cfg: PositionalEncodingConfig) -> np.ndarray:
    if cfg.kind != "grid":
        raise ConfigError("grid_encode needs a grid config")
    return grid_features(as_lonlat(loc), cfg)[0]


# ---------------------------------------------------------------- encoder

ACTIVATIONS = {
    "leaky_relu": ad.leaky_relu,
    "relu": ad.relu,
    "gelu": ad.gelu,
}


class LocationEncoder:
    """Positional features followed by an MLP with dropout after each hidden layer.

    In train mode every input row draws its dropout masks from its own child
    stream of the supplied generator, so row ``i`` of a batch equals encoding
    ``locs[i]`` alone with ``rng.spawn(n)[i]``.
    """

    def __init__(
        self,
        pe: PositionalEncodingConfig,
        layers: list[Linear],
        dropout: float = 0.5,
        activation: str = "leaky_relu",
    ):
        if not 0 <= dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {dropout}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if not layers or layers[0].n_in != pe.width:
            raise ShapeError("first layer width does not match positional features")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError("consecutive layer widths do not match")
        self.pe = pe
        self.layers = layers
        self.dropout = float(dropout)
        self.activation = activation

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        pe: PositionalEncodingConfig | None = None,
        hidden_layers: int = 1,
        hidden_units: int = 512,
        embed_dim: int = 512,
        dropout: float = 0.5,
        activation: str = "leaky_relu",
    ) -> "LocationEncoder":
        pe = pe or PositionalEncodingConfig()
        if hidden_layers < 0 or hidden_units < 1 or embed_dim < 1:
            raise ConfigError("layer counts and widths must be positive")
        widths = [pe.width] + [hidden_units] * hidden_layers + [embed_dim]
        layers = [Linear.init(a, b, rng) for a, b in zip(widths, widths[1:])]
        return cls(pe, layers, dropout=dropout, activation=activation)

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def hidden_units(self) -> int:
        return self.layers[0].n_out

    @property
    def hidden_layers(self) -> int:
        return len(self.layers) - 1

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def _masks(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        keep = 1.0 - self.dropout
        widths = [layer.n_out for layer in self.layers[:-1]]
        draws = [child.random(sum(widths)) for child in rng.spawn(n)]
        u = np.array(draws).reshape(n, -1)
        masks, start = [], 0
        for w in widths:
            masks.append((u[:, start : start + w] < keep) / keep)
            start += w
        return masks

    def forward(self, locs, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Embed a batch of locations; returns an ``(n, embed_dim)`` Tensor."""
        lonlat = as_lonlat(locs)
        use_dropout = train and self.dropout > 0
        if use_dropout and rng is None:
            raise UsageError("train mode with dropout needs an rng")
        n = len(lonlat)
        if n == 0:
            return Tensor(np.zeros((0, self.embed_dim)))
        masks = self._masks(n, rng) if use_dropout else None
        act = ACTIVATIONS[self.activation]
        h = Tensor(positional_features(lonlat, self.pe))
        for i, layer in enumerate(self.layers[:-1]):
            h = act(layer(h))
            if masks is not None:
                h = h * masks[i]
        return self.layers[-1](h)

    def encode(self, loc, mode: str = "eval", rng=None) -> Tensor:
        """Embedding of a single location as a length-``embed_dim`` vector."""
        _check_mode(mode)
        if mode == "train" and self.dropout > 0:
            if rng is None:
                raise UsageError("train mode with dropout needs an rng")
            masks = self._single_masks(rng)
            return self._forward_with_masks(as_lonlat(loc), masks)[0]
        return self.forward(loc, train=False)[0]

    def _single_masks(self, rng: np.random.Generator) -> list[np.ndarray]:
        keep = 1.0 - self.dropout
        widths = [layer.n_out for layer in self.layers[:-1]]
        u = rng.random(sum(widths))
        masks, start = [], 0
        for w in widths:
            masks.append(((u[start : start + w] < keep) / keep)[None, :])
            start += w
        return masks

    def _forward_with_masks(self, lonlat: np.ndarray, masks) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = Tensor(positional_features(lonlat, self.pe))
        for i, layer in enumerate(self.layers[:-1]):
            h = act(layer(h)) * masks[i]
        return self.layers[-1](h)

    def encode_batch(self, locs, mode: str = "eval", rng=None) -> Tensor:
        _check_mode(mode)
        return self.forward(locs, train=(mode == "train"), rng=rng)

    def copy(self) -> "LocationEncoder":
        layers = [Linear(l.weight.data.copy(), l.bias.data.copy()) for l in self.layers]
        return LocationEncoder(self.pe, layers, self.dropout, self.activation)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.weight"] = layer.weight.data
            out[f"layer{i}.bias"] = layer.bias.data
        return out

    def config_dict(self) -> dict:
        return {
            "pe_kind": self.pe.kind,
            "pe_n_scales": self.pe.n_scales,
            "pe_min_radius": self.pe.min_radius,
            "pe_max_radius": self.pe.max_radius,
            "dropout": self.dropout,
            "activation": self.activation,
            "n_layers": len(self.layers),
        }

    @classmethod
    def from_state(cls, config: dict, arrays: dict[str, np.ndarray]) -> "LocationEncoder":
        pe = PositionalEncodingConfig(
            config["pe_kind"],
            int(config["pe_n_scales"]),
            float(config["pe_min_radius"]),
            float(config["pe_max_radius"]),
        )
        layers = [
            Linear(arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"])
            for i in range(int(config["n_layers"]))
        ]
        return cls(pe, layers, float(config["dropout"]), config["activation"])


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
