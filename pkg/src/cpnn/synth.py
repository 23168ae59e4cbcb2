"""Synthetic data drawn from the model's own generative assumptions.

Everything (prototypes, batch effects, compositions, patch features, counts)
comes from one seeded ``numpy.random.Generator`` so a fixed seed gives
bit-identical datasets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._functional import softmax
from .data import (
    CellAnnotations,
    CountMatrix,
    PatchFeatureSet,
    SampleRecord,
    fmt_float,
    write_annotations,
    write_dense_counts,
    write_feature_set,
    write_sparse_counts,
)
from .prototype import BatchNuisance


def nb_sample(mu, theta, rng: np.random.Generator):
    """Draw NB(mu, theta) counts as a Gamma-Poisson mixture (broadcasts)."""
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(mu <= 0) or np.any(theta <= 0) or not (np.all(np.isfinite(mu)) and np.all(np.isfinite(theta))):
        raise ValueError("NB sampling needs finite positive mu and theta")
    mu, theta = np.broadcast_arrays(mu, theta)
    rate = rng.gamma(shape=theta, scale=mu / theta)
    out = rng.poisson(rate)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


@dataclass
class SynthConfig:
    C: int = 5
    G: int = 200
    D_feat: int = 16
    D_batch: int = 3
    n_cells: int = 2000
    n_slides: int = 120
    patches_per_slide: int = 32
    library_size: float = 1e5
    dirichlet_alpha: float = 1.0
    feature_noise_sigma: float = 0.05
    batch_scale_sigma: float = 0.3
    # fixed per-batch scales; overrides batch_scale_sigma when given
    batch_scales: tuple = None
    # background level relative to the mean prototype entry (1/G)
    batch_shift: float = 0.05
    # log-normal spread of alpha*, and beta* level relative to the mean per-gene signal
    alpha_spread: float = 0.0
    beta_level: float = 0.0
    proto_sigma: float = 1.0
    cell_size: float = 1000.0
    theta_sc: float = 5.0
    theta_bulk: float = 50.0
    patch_logit_sigma: float = 0.3
    spot_library_size: float = 5000.0
    seed: int = 0

    def __post_init__(self):
        for name in ("C", "G", "D_feat", "D_batch", "n_cells", "n_slides", "patches_per_slide"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_cells < self.C or self.n_cells < self.D_batch:
            raise ValueError("need at least one cell per type and per batch")
        for name in ("feature_noise_sigma", "batch_scale_sigma", "batch_shift", "alpha_spread",
                     "beta_level", "proto_sigma", "patch_logit_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("dirichlet_alpha", "library_size", "cell_size", "theta_sc", "theta_bulk", "spot_library_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_scales is not None:
            self.batch_scales = tuple(float(x) for x in self.batch_scales)
            if len(self.batch_scales) != self.D_batch or min(self.batch_scales) <= 0:
                raise ValueError("batch_scales must list D_batch positive values")

    @classmethod
    def from_dict(cls, doc):
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SynthTruth:
    true_prototypes: np.ndarray
    true_slide_proportions: np.ndarray
    true_patch_weights: list
    true_alpha: np.ndarray
    true_beta: np.ndarray
    nuisance: BatchNuisance
    feature_map: np.ndarray


@dataclass
class SynthDataset:
    sc: CountMatrix
    annotations: CellAnnotations
    slides: list
    truth: SynthTruth
    config: SynthConfig
    spots: list = field(default_factory=list)

    @property
    def bulk(self) -> CountMatrix:
        return CountMatrix(
            np.stack([s.target_counts for s in self.slides]),
            [s.slide_id for s in self.slides],
            self.sc.gene_ids,
        )


def _names(prefix, n):
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate(cfg: SynthConfig, spatial: bool = False) -> SynthDataset:
    """Sample single-cell counts, slides and the ground truth behind them.

    With ``spatial=True`` every slide also gets per-patch spot counts drawn
    from the patch-level model (``dataset.spots``, aligned with ``slides``).
    """
    rng = np.random.default_rng(cfg.seed)
    C, G, Db = cfg.C, cfg.G, cfg.D_batch
    genes = _names("g", G)
    types = _names("type", C)

    T = rng.lognormal(0.0, cfg.proto_sigma, size=(C, G)) if cfg.proto_sigma > 0 else np.ones((C, G))
    T /= T.sum(axis=1, keepdims=True)
    if cfg.batch_scales is not None:
        s = np.array(cfg.batch_scales)
    else:
        s = rng.lognormal(0.0, cfg.batch_scale_sigma, size=Db) if cfg.batch_scale_sigma > 0 else np.ones(Db)
    b = cfg.batch_shift * rng.exponential(1.0, size=(Db, G)) / G
    alpha = np.exp(cfg.alpha_spread * rng.standard_normal(G))
    beta_unit = cfg.beta_level * rng.uniform(0.0, 2.0, size=G) / G
    M = rng.standard_normal((cfg.D_feat, C))

    ct = rng.permutation(np.arange(cfg.n_cells) % C)
    bt = rng.permutation(np.arange(cfg.n_cells) % Db)
    mu_sc = (T[ct] + b[bt]) * s[bt][:, None] * cfg.cell_size
    sc_counts = nb_sample(mu_sc, cfg.theta_sc, rng)
    sc = CountMatrix(sc_counts, _names("cell", cfg.n_cells), genes)
    ann = CellAnnotations(ct, bt, types, _names("batch", Db))

    n_p = cfg.patches_per_slide
    beta_slide = beta_unit * n_p
    props = rng.dirichlet(np.full(C, cfg.dirichlet_alpha), size=cfg.n_slides)
    slides, spots, patch_weights = [], [], []
    for n, sid in enumerate(_names("s", cfg.n_slides)):
        with np.errstate(divide="ignore"):
            logp = np.log(props[n])
        logp = np.maximum(logp, -50.0)
        w = softmax(logp + cfg.patch_logit_sigma * rng.standard_normal((n_p, C)))
        feats = w @ M.T + cfg.feature_noise_sigma * rng.standard_normal((n_p, cfg.D_feat))
        mu = alpha * (w.sum(axis=0) @ T) + beta_slide
        mu_bar = cfg.library_size * mu / mu.sum()
        counts = nb_sample(mu_bar, cfg.theta_bulk, rng)
        fs = PatchFeatureSet(sid, feats, _names("p", n_p))
        slides.append(SampleRecord(sid, fs, counts))
        patch_weights.append(w)
        if spatial:
            e_hat = alpha * (w @ T) + beta_unit
            mu_spot = cfg.spot_library_size * e_hat / e_hat.sum(axis=1, keepdims=True)
            spots.append(CountMatrix(nb_sample(mu_spot, cfg.theta_bulk, rng), fs.patch_ids, genes))

    truth = SynthTruth(T, props, patch_weights, alpha, beta_slide, BatchNuisance(s, b), M)
    return SynthDataset(sc, ann, slides, truth, cfg, spots)


def _write_matrix(path, header, row_ids, values):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for rid, row in zip(row_ids, np.atleast_2d(values)):
            fh.write(str(rid) + "," + ",".join(fmt_float(v) for v in row) + "\n")


def write_dataset(ds: SynthDataset, out_dir) -> None:
    """Write the dataset in the pipeline's input formats plus a ``truth/`` directory."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "truth" / "patch_weights").mkdir(parents=True, exist_ok=True)
    write_sparse_counts(ds.sc, out / "sc.mtx", out / "sc_rows.txt", out / "sc_genes.txt")
    write_annotations(ds.annotations, ds.sc.row_ids, out / "sc_annotations.csv")
    write_dense_counts(ds.bulk, out / "bulk.csv")
    for rec in ds.slides:
        write_feature_set(rec.features, out / "features" / f"{rec.slide_id}.csv")
    if ds.spots:
        (out / "spots").mkdir(exist_ok=True)
        for rec, spot in zip(ds.slides, ds.spots):
            write_dense_counts(spot, out / "spots" / f"{rec.slide_id}.csv")

    tr = ds.truth
    types = ds.annotations.cell_type_names
    genes = ds.sc.gene_ids
    sids = [r.slide_id for r in ds.slides]
    _write_matrix(out / "truth" / "prototypes.csv", ["cell_type", *genes], types, tr.true_prototypes)
    _write_matrix(out / "truth" / "slide_proportions.csv", ["slide_id", *types], sids, tr.true_slide_proportions)
    for rec, w in zip(ds.slides, tr.true_patch_weights):
        _write_matrix(out / "truth" / "patch_weights" / f"{rec.slide_id}.csv", ["patch_id", *types], rec.features.patch_ids, w)
    _write_matrix(out / "truth" / "modality.csv", ["gene", "alpha", "beta"], genes,
                  np.column_stack([tr.true_alpha, tr.true_beta]))
    _write_matrix(out / "truth" / "batch_scale.csv", ["batch", "s"], ds.annotations.batch_names,
                  np.asarray(tr.nuisance.s)[:, None])
    _write_matrix(out / "truth" / "batch_shift.csv", ["batch", *genes], ds.annotations.batch_names, tr.nuisance.b)
    _write_matrix(out / "truth" / "feature_map.csv", ["feature", *types], [f"f_{j}" for j in range(tr.feature_map.shape[0])],
                  tr.feature_map)
    manifest = {"config": asdict(ds.config), "seed": ds.config.seed, "spatial": bool(ds.spots)}
    if manifest["config"]["batch_scales"] is not None:
        manifest["config"]["batch_scales"] = list(manifest["config"]["batch_scales"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
