"""Batch-agnostic cell-type prototypes from single-cell counts.

Counts of cell ``k`` (type ``c``, batch ``d``) are modelled as
``NB((t[c] + b[d]) * s[d], theta[g])``.  ``t`` is the raw prototype,
``b`` an additive per-gene background of the batch and ``s`` a batch scale
with ``s[0] = 1`` pinned for identifiability.  Normalising the rows of ``t``
gives the prototype matrix used downstream.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._functional import sigmoid, softplus, softplus_inv
from .data import CellAnnotations, CountMatrix, DataError, fmt_float
from .nb import nb_nll_batch, nb_nll_grads
from .optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrototypeMatrix:
    values: np.ndarray
    cell_type_names: tuple
    gene_ids: tuple
    normalized: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        names = tuple(str(n) for n in self.cell_type_names)
        genes = tuple(str(g) for g in self.gene_ids)
        if vals.shape != (len(names), len(genes)):
            raise DataError(f"prototype shape {vals.shape} != ({len(names)}, {len(genes)})")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise DataError("prototype entries must be finite and nonnegative")
        if self.normalized and not np.allclose(vals.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise DataError("normalized prototype rows must sum to 1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "cell_type_names", names)
        object.__setattr__(self, "gene_ids", genes)

    @property
    def n_types(self):
        return self.values.shape[0]

    def select_genes(self, genes) -> "PrototypeMatrix":
        index = {g: j for j, g in enumerate(self.gene_ids)}
        vals = self.values[:, [index[g] for g in genes]]
        if self.normalized:
            return normalize_prototype(PrototypeMatrix(vals, self.cell_type_names, genes))
        return PrototypeMatrix(vals, self.cell_type_names, genes)


@dataclass(frozen=True)
class BatchNuisance:
    s: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.s) <= 0) or np.any(np.asarray(self.b) < 0):
            raise ValueError("batch scale must be positive and background nonnegative")


@dataclass(frozen=True)
class ScDispersion:
    theta_sc: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.theta_sc) <= 0):
            raise ValueError("dispersion must be positive")


@dataclass
class FitConfig:
    lr: float = 1e-2
    epochs: int = 300
    b_penalty: float = 1e-3
    b_init_frac: float = 1e-3
    record_every: int = 10


def normalize_prototype(raw: PrototypeMatrix) -> PrototypeMatrix:
    """Scale each row to sum to one."""
    vals = np.asarray(raw.values, dtype=np.float64)
    sums = vals.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        bad = int(np.argmin(sums[:, 0]))
        raise DataError(f"prototype row {raw.cell_type_names[bad]!r} has zero sum")
    return PrototypeMatrix(vals / sums, raw.cell_type_names, raw.gene_ids, normalized=True)


def _moment_batch_scales(E, ct, bt, n_types, n_batches):
    totals = E.sum(axis=1).astype(np.float64)
    scales = np.ones(n_batches)
    for d in range(1, n_batches):
        logs = []
        for c in range(n_types):
            in_d = (ct == c) & (bt == d)
            in_0 = (ct == c) & (bt == 0)
            if in_d.any() and in_0.any():
                m_d, m_0 = totals[in_d].mean(), totals[in_0].mean()
                if m_d > 0 and m_0 > 0:
                    logs.append(np.log(m_d / m_0))
        if logs:
            scales[d] = np.exp(np.mean(logs))
    return scales


def _fit(E, ann: CellAnnotations, cfg: FitConfig):
    E = np.asarray(E, dtype=np.float64)
    n_cells, n_genes = E.shape
    ct, bt = np.asarray(ann.cell_type), np.asarray(ann.batch)
    C, Db = ann.n_types, ann.n_batches
    type_counts = np.bincount(ct, minlength=C)
    if np.any(type_counts == 0):
        raise DataError("empty cell type")
    if np.any(type_counts < 2):
        warnings.warn("some cell types have fewer than 2 cells", RuntimeWarning, stacklevel=3)

    A = np.zeros((n_cells, C))
    A[np.arange(n_cells), ct] = 1.0
    B = np.zeros((n_cells, Db))
    B[np.arange(n_cells), bt] = 1.0

    s0 = _moment_batch_scales(E, ct, bt, C, Db)
    t0 = (A.T @ (E / s0[bt][:, None])) / type_counts[:, None] + 1e-4
    b0 = np.full((Db, n_genes), max(cfg.b_init_frac * float(E.mean()), 1e-6))
    params = {
        "t": softplus_inv(t0),
        "b": softplus_inv(b0),
        "log_s": np.log(s0),
        "log_theta": np.zeros(n_genes),
    }
    state = AdamWState(lr=cfg.lr, weight_decay=0.0)

    def unpack(p):
        t = softplus(p["t"])
        b = softplus(p["b"])
        s = np.exp(p["log_s"])
        s[0] = 1.0
        return t, b, s, np.exp(p["log_theta"])

    def objective(p, with_grads):
        t, b, s, theta = unpack(p)
        base = A @ t + B @ b
        s_cell = s[bt][:, None]
        mu = base * s_cell
        if not with_grads:
            return nb_nll_batch(E, mu, theta) * n_cells + cfg.b_penalty * float(np.sum(b * b))
        d_mu, d_theta = nb_nll_grads(E, mu, theta)
        d_mu *= n_cells
        d_theta *= n_cells
        d_base = d_mu * s_cell
        d_s = B.T @ np.sum(d_mu * base, axis=1)
        grads = {
            "t": (A.T @ d_base) * sigmoid(p["t"]),
            "b": (B.T @ d_base + 2.0 * cfg.b_penalty * b) * sigmoid(p["b"]),
            "log_s": d_s * s,
            "log_theta": d_theta * theta,
        }
        grads["log_s"][0] = 0.0
        return grads

    nll0 = objective(params, False)
    if not np.isfinite(nll0):
        raise FloatingPointError("prototype NLL is non-finite at initialisation")
    history = [(0, nll0)]
    for epoch in range(1, cfg.epochs + 1):
        grads = objective(params, True)
        adamw_step(state, params, grads)
        if epoch % cfg.record_every == 0 or epoch == cfg.epochs:
            history.append((epoch, objective(params, False)))
    if not history[-1][1] < nll0:
        warnings.warn("prototype fit did not decrease the NLL", RuntimeWarning, stacklevel=3)
    t, b, s, theta = unpack(params)
    return t, b, s, theta, history


def fit_prototypes(sc: CountMatrix, ann: CellAnnotations, cfg: FitConfig = None):
    """Fit raw prototypes, batch nuisances and per-gene dispersion.

    Returns ``(raw, nuisance, dispersion, normalized)``.
    """
    cfg = cfg or FitConfig()
    if len(ann.cell_type) != sc.shape[0]:
        raise DataError("annotation length does not match the number of cells")
    t, b, s, theta, _ = _fit(sc.values, ann, cfg)
    raw = PrototypeMatrix(t, ann.cell_type_names, sc.gene_ids)
    return raw, BatchNuisance(s, b), ScDispersion(theta), normalize_prototype(raw)


class PrototypeEstimator(BaseEstimator):
    """Estimator wrapper around :func:`fit_prototypes`.

    After ``fit``: ``raw_prototypes_``, ``prototypes_`` (normalized),
    ``nuisance_``, ``dispersion_`` and ``nll_history_`` (epoch, NLL) pairs.
    """

    def __init__(self, lr=1e-2, epochs=300, b_penalty=1e-3):
        self.lr = lr
        self.epochs = epochs
        self.b_penalty = b_penalty

    def fit(self, X, cell_type=None, batch=None, cell_type_names=None, gene_ids=None):
        if isinstance(X, CountMatrix):
            cm = X
        else:
            X = np.asarray(X)
            genes = gene_ids if gene_ids is not None else [f"g{j}" for j in range(X.shape[1])]
            cm = CountMatrix(X, [f"c{i}" for i in range(X.shape[0])], genes)
        if isinstance(cell_type, CellAnnotations):
            ann = cell_type
        else:
            if cell_type is None:
                raise ValueError("cell_type labels are required")
            ct = np.asarray(cell_type)
            names = cell_type_names if cell_type_names is not None else [str(i) for i in range(int(ct.max()) + 1)]
            bt = np.zeros_like(ct) if batch is None else np.asarray(batch)
            ann = CellAnnotations(ct, bt, names)
        cfg = FitConfig(lr=self.lr, epochs=self.epochs, b_penalty=self.b_penalty)
        t, b, s, theta, history = _fit(cm.values, ann, cfg)
        self.raw_prototypes_ = PrototypeMatrix(t, ann.cell_type_names, cm.gene_ids)
        self.prototypes_ = normalize_prototype(self.raw_prototypes_)
        self.nuisance_ = BatchNuisance(s, b)
        self.dispersion_ = ScDispersion(theta)
        self.nll_history_ = history
        return self

    def transform(self, X=None):
        """Return the normalized prototype matrix as an array (C x G)."""
        check_is_fitted(self, "prototypes_")
        return np.array(self.prototypes_.values)


# ---------------------------------------------------------------- file formats


def write_prototypes(pm: PrototypeMatrix, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("cell_type," + ",".join(pm.gene_ids) + "\n")
        for name, row in zip(pm.cell_type_names, pm.values):
            fh.write(name + "," + ",".join(fmt_float(v) for v in row) + "\n")


def read_prototypes(path, normalized=None) -> PrototypeMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise DataError(f"{path}: no prototype rows")
    genes = lines[0].split(",")[1:]
    names, rows = [], []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(genes) + 1:
            raise DataError(f"{path}: ragged prototype row {parts[0]!r}")
        names.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    vals = np.array(rows)
    if normalized is None:
        normalized = bool(np.allclose(vals.sum(axis=1), 1.0, rtol=0, atol=1e-9))
    return PrototypeMatrix(vals, names, genes, normalized=normalized)


def write_fit_sidecar(path, nuisance: BatchNuisance, dispersion: ScDispersion, gene_ids, batch_names=()) -> None:
    b = np.asarray(nuisance.b)
    doc = {
        "gene_ids": list(gene_ids),
        "batch_names": list(batch_names),
        "s": [float(x) for x in nuisance.s],
        "b_mean": [float(x) for x in b.mean(axis=1)],
        "b_max": [float(x) for x in b.max(axis=1)],
        "theta_sc": [float(x) for x in dispersion.theta_sc],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_dispersion(path) -> tuple:
    """Return ``(ScDispersion, gene_ids)`` from a fit sidecar."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ScDispersion(np.array(doc["theta_sc"], dtype=np.float64)), tuple(doc["gene_ids"])
