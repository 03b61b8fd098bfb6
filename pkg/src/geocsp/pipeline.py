"""Pre-train, fine-tune, evaluate, export and cluster: the stages behind the CLI.

Every stage draws randomness from ``np.random.default_rng([seed, stage, ...])``,
so a whole experiment is a pure function of the resolved config.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage

from . import data as geodata
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig, is_pretrained
from .data import Dataset, SyntheticSpec, generate_synthetic, stratified_sample
from .errors import ConfigError, DimensionMismatchError, FileFormatError, UsageError
from .estimators import CSPEncoder, LinearProbeClassifier, PresenceAbsenceClassifier
from .location import LocationEncoder
from .supervised import combine_posteriors, image_posterior, location_posterior

STAGE_DATA, STAGE_ENCODER, STAGE_SUBSET, STAGE_LOCATION, STAGE_HEAD = range(5)

# Ward linkage needs the full condensed distance matrix (8 n^2 / 2 bytes).
MAX_CLUSTER_ROWS = 20000


def stage_rng(seed: int, stage: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, *extra])


def ratio_key(ratio: float) -> int:
    return int(round(ratio * 1000))


@dataclass
class RunReport:
    """Outcome of one (model, ratio) cell. Timings are kept out of the serialized text."""

    model: str
    ratio: float
    seed: int
    config_hash: str
    n_train: int = 0
    n_labeled: int = 0
    n_eval: int = 0
    pretrain_loss: tuple = ()
    finetune_loss: tuple = ()
    head_loss: tuple = ()
    image_top1: float = float("nan")
    location_top1: float = float("nan")
    combined_top1: float = float("nan")
    timings: dict = field(default_factory=dict, compare=False)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "timings":
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}\n")
        return "".join(lines)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())
        with open(f"{path}.timings", "w") as fh:
            fh.writelines(f"{k} = {v:.3f}\n" for k, v in sorted(self.timings.items()))


# ---------------------------------------------------------------- data


def make_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Load the configured train/eval files, or generate the synthetic benchmark."""
    if cfg.train_path or cfg.eval_path:
        if not (cfg.train_path and cfg.eval_path):
            raise ConfigError("train_path and eval_path must be given together")
        train, held_out = geodata.load(cfg.train_path), geodata.load(cfg.eval_path)
        if train.dim != held_out.dim:
            raise DimensionMismatchError(f"train has {train.dim} features, eval has {held_out.dim}")
        return train, held_out
    rng = stage_rng(cfg.seed, STAGE_DATA)
    spec = SyntheticSpec.random(
        cfg.n_classes,
        cfg.feature_dim,
        rng,
        kappa=cfg.kappa,
        centers_per_class=cfg.centers_per_class,
        prototype_scale=cfg.prototype_scale,
        feature_noise=cfg.feature_noise,
    )
    train = generate_synthetic(spec, cfg.n_train, rng)
    held_out = generate_synthetic(spec, cfg.n_eval, rng)
    for ds, split in ((train, "train"), (held_out, "eval")):
        ds.provenance.update({"split": split, "seed": str(cfg.seed)})
    return train, held_out


def labeled_subset(cfg: TrainConfig, train: Dataset, ratio: float) -> Dataset:
    return stratified_sample(train, ratio, stage_rng(cfg.seed, STAGE_SUBSET, ratio_key(ratio)))


# ---------------------------------------------------------------- stages


def encoder_estimator(cfg: TrainConfig) -> CSPEncoder:
    lr = cfg.mse_lr if cfg.objective == "mse" else cfg.pretrain_lr
    return CSPEncoder(
        encoding=cfg.encoding,
        n_scales=cfg.n_scales,
        min_radius=cfg.min_radius,
        max_radius=cfg.max_radius,
        hidden_layers=cfg.hidden_layers,
        hidden_units=cfg.hidden_units,
        embed_dim=cfg.embed_dim,
        dropout=cfg.dropout,
        activation=cfg.activation,
        objective=cfg.objective,
        components=cfg.components,
        alpha1=cfg.alpha1,
        alpha2=cfg.alpha2,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        tau0=cfg.tau0,
        tau1=cfg.tau1,
        tau2=cfg.tau2,
        n_neg_locations=cfg.n_neg_locations,
        learning_rate=lr,
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.batch_size,
        random_state=stage_rng(cfg.seed, STAGE_ENCODER),
    )


def pretrain(cfg: TrainConfig, train: Dataset) -> tuple[Checkpoint, list[float]]:
    """Optimise the configured objective over the location encoder and its image-side head."""
    if len(train) < 2:
        raise UsageError("pre-training needs at least 2 examples")
    est = encoder_estimator(cfg).fit(train.locations, train.features)
    meta = {"stage": "pretrain", "objective": cfg.objective, "components": cfg.components,
            "seed": cfg.seed, "config_hash": cfg.hash()}
    return Checkpoint(est.encoder_, est.head_, meta=meta), list(est.loss_curve_)


def random_encoder(cfg: TrainConfig) -> LocationEncoder:
    """The untrained encoder; identical to the starting point of :func:`pretrain`."""
    return encoder_estimator(cfg).init_encoder(stage_rng(cfg.seed, STAGE_ENCODER))


def finetune(
    cfg: TrainConfig, pretrained: Checkpoint | None, labeled: Dataset, ratio: float = 100.0
) -> tuple[Checkpoint, dict[str, list[float]]]:
    """Fit (encoder, class embeddings) and the image head as two independent optimisations.

    ``pretrained=None`` starts from a random encoder, which gives the
    supervised-only baseline.
    """
    if len(labeled) == 0 or not labeled.labeled:
        raise UsageError("fine-tuning needs a non-empty labeled subset")
    encoder = pretrained.encoder if pretrained is not None else random_encoder(cfg)
    if encoder is None:
        raise FileFormatError("checkpoint holds no location encoder")
    key = ratio_key(ratio)
    loc_model = PresenceAbsenceClassifier(
        encoder,
        n_classes=labeled.n_classes,
        pos_weight=cfg.pos_weight,
        learning_rate=cfg.finetune_lr,
        epochs=cfg.finetune_epochs,
        batch_size=cfg.finetune_batch_size,
        random_state=stage_rng(cfg.seed, STAGE_LOCATION, key),
    ).fit(labeled.locations, labeled.labels)
    img_model = LinearProbeClassifier(
        n_classes=labeled.n_classes,
        learning_rate=cfg.head_lr,
        epochs=cfg.head_epochs,
        batch_size=cfg.head_batch_size,
        random_state=stage_rng(cfg.seed, STAGE_HEAD, key),
    ).fit(labeled.features, labeled.labels)
    meta = {"stage": "finetune", "ratio": float(ratio), "seed": cfg.seed,
            "n_classes": labeled.n_classes, "config_hash": cfg.hash()}
    ckpt = Checkpoint(
        loc_model.encoder_,
        pretrained.projection if pretrained is not None else None,
        loc_model.class_embedding_.data,
        img_model.head_,
        meta,
    )
    return ckpt, {"location": loc_model.loss_curve_, "head": img_model.loss_curve_}


def evaluate(ckpt: Checkpoint, held_out: Dataset) -> dict[str, float]:
    """Image-only, location-only and combined Top-1 on a labeled dataset."""
    if ckpt.encoder is None or ckpt.class_embedding is None or ckpt.classifier is None:
        raise FileFormatError("evaluation needs a fine-tuned checkpoint")
    if not held_out.labeled or len(held_out) == 0:
        raise UsageError("evaluation needs a non-empty labeled dataset")
    if ckpt.classifier.n_in != held_out.dim:
        raise DimensionMismatchError(
            f"checkpoint head expects {ckpt.classifier.n_in} features, dataset has {held_out.dim}"
        )
    n_classes = ckpt.class_embedding.shape[1]
    if held_out.labels.max() >= n_classes:
        raise DimensionMismatchError(f"dataset labels exceed the checkpoint's {n_classes} classes")
    loc_post = location_posterior(held_out.locations, ckpt.encoder, ckpt.class_embedding)
    img_post = image_posterior(held_out.features, ckpt.classifier)
    y = held_out.labels
    return {
        "image_top1": float(np.mean(np.argmax(img_post, axis=1) == y)),
        "location_top1": float(np.mean(np.argmax(loc_post, axis=1) == y)),
        "combined_top1": float(np.mean(combine_posteriors(loc_post, img_post) == y)),
    }


# ---------------------------------------------------------------- embedding maps


def grid_points(resolution_deg: float) -> np.ndarray:
    """Cell centres of a regular lon/lat grid in radians, latitude-major, south to north."""
    if not resolution_deg > 0:
        raise UsageError(f"grid resolution must be > 0, got {resolution_deg}")
    n_lon = int(round(360.0 / resolution_deg))
    n_lat = int(round(180.0 / resolution_deg))
    if abs(n_lat * resolution_deg - 180.0) > 1e-9 or n_lon < 1 or n_lat < 1:
        raise UsageError(f"grid resolution {resolution_deg} does not divide 180 degrees")
    lon = np.deg2rad(-180.0 + resolution_deg * (np.arange(n_lon) + 0.5))
    lat = np.deg2rad(-90.0 + resolution_deg * (np.arange(n_lat) + 0.5))
    lat_g, lon_g = np.meshgrid(lat, lon, indexing="ij")
    return np.column_stack([lon_g.ravel(), lat_g.ravel()])


def write_table(path, lonlat: np.ndarray, columns: np.ndarray, names: list[str]) -> None:
    header = "# " + " ".join(["lon", "lat", *names]) + "  (radians)\n"
    with open(path, "w") as fh:
        fh.write(header)
        for (lon, lat), row in zip(lonlat, columns):
            fh.write(" ".join([repr(float(lon)), repr(float(lat)), *(_cell(v) for v in row)]) + "\n")


def _cell(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


def read_table(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        table = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    if table.shape[0] == 0:
        raise UsageError(f"{path}: table is empty")
    if table.shape[1] < 3:
        raise DimensionMismatchError(f"{path}: need lon, lat and at least one value column")
    return table[:, :2], table[:, 2:]


def export_grid_embeddings(ckpt: Checkpoint, resolution_deg: float, path) -> np.ndarray:
    """Eval-mode embeddings of every grid cell centre, one row per point."""
    if ckpt.encoder is None:
        raise FileFormatError("checkpoint holds no location encoder")
    points = grid_points(resolution_deg)
    emb = ckpt.encoder.forward(points, train=False).data
    write_table(path, points, emb, [f"e{i}" for i in range(emb.shape[1])])
    return emb


def ward_clusters(embeddings: np.ndarray, k: int) -> np.ndarray:
    """Ward-linkage agglomerative clustering cut at exactly ``k`` clusters.

    Cluster ids are renumbered in order of first appearance.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n == 0:
        raise UsageError("cannot cluster an empty table")
    if not 1 <= k <= n:
        raise UsageError(f"K must lie in [1, {n}], got {k}")
    if n > MAX_CLUSTER_ROWS:
        raise UsageError(f"{n} rows exceed the clustering limit of {MAX_CLUSTER_ROWS}; use a coarser grid")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    raw = cut_tree(linkage(embeddings, method="ward"), n_clusters=k).ravel()
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(np.argsort(first))
    return order[np.searchsorted(np.unique(raw), raw)]


def cluster_embeddings(table_path, k: int, path) -> np.ndarray:
    lonlat, emb = read_table(table_path)
    labels = ward_clusters(emb, k)
    write_table(path, lonlat, labels[:, None], ["cluster"])
    return labels


# ---------------------------------------------------------------- experiment


def run_experiment(cfg: TrainConfig, out_dir: str | os.PathLike) -> list[RunReport]:
    """Data, then pre-training per model, then fine-tune + evaluate at every ratio.

    Writes datasets, checkpoints, one report per (model, ratio) cell and a
    summary table under ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    train, held_out = make_datasets(cfg)
    geodata.save(os.path.join(out_dir, "train.txt"), train)
    geodata.save(os.path.join(out_dir, "eval.txt"), held_out)
    subsets = {r: labeled_subset(cfg, train, r) for r in cfg.ratios}
    reports = []
    for model in cfg.models:
        mcfg = cfg.for_model(model)
        start = time.perf_counter()
        pretrained, pre_loss = None, []
        if is_pretrained(model):
            pretrained, pre_loss = pretrain(mcfg, train.unlabeled())
            save_checkpoint(os.path.join(out_dir, f"{model}.pretrain.ckpt"), pretrained)
        pre_time = time.perf_counter() - start
        for ratio in cfg.ratios:
            start = time.perf_counter()
            tuned, curves = finetune(mcfg, pretrained, subsets[ratio], ratio)
            tune_time = time.perf_counter() - start
            tag = f"{model}.r{ratio:g}"
            save_checkpoint(os.path.join(out_dir, f"{tag}.ckpt"), tuned)
            start = time.perf_counter()
            acc = evaluate(tuned, held_out)
            report = RunReport(
                model,
                float(ratio),
                cfg.seed,
                mcfg.hash(),
                len(train),
                len(subsets[ratio]),
                len(held_out),
                tuple(pre_loss),
                tuple(curves["location"]),
                tuple(curves["head"]),
                **acc,
                timings={"pretrain_s": pre_time, "finetune_s": tune_time,
                         "evaluate_s": time.perf_counter() - start},
            )
            report.save(os.path.join(out_dir, f"{tag}.report"))
            reports.append(report)
    write_summary(os.path.join(out_dir, "summary.txt"), reports)
    return reports


def write_summary(path, reports: list[RunReport]) -> None:
    with open(path, "w") as fh:
        fh.write("# model ratio image_top1 location_top1 combined_top1\n")
        for r in reports:
            fh.write(f"{r.model} {r.ratio:g} {r.image_top1:.4f} {r.location_top1:.4f} {r.combined_top1:.4f}\n")
