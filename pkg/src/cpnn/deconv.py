"""Reference deconvolution of bulk counts onto normalized prototypes.

Each sample gets proportions ``p = softmax(z)`` and a free scale
``s = exp(zeta)``; counts are modelled as ``NB(s * l * (p @ T)_g, theta_g)``
and all samples are optimised jointly with AdamW.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._functional import softmax
from .data import CountMatrix, DataError, fmt_float
from .nb import nb_nll_batch, nb_nll_grads
from .optim import AdamWState, adamw_step


@dataclass(frozen=True)
class ProportionMatrix:
    values: np.ndarray
    row_ids: tuple
    cell_type_names: tuple

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        rows = tuple(str(r) for r in self.row_ids)
        names = tuple(str(n) for n in self.cell_type_names)
        if vals.shape != (len(rows), len(names)):
            raise DataError(f"proportion shape {vals.shape} != ({len(rows)}, {len(names)})")
        if np.any(vals < 0) or not np.allclose(vals.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise DataError("proportion rows must lie on the simplex")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "row_ids", rows)
        object.__setattr__(self, "cell_type_names", names)


@dataclass
class DeconvConfig:
    lr: float = 1e-2
    steps: int = 500


def _deconvolve_arrays(E, library, T, theta, cfg: DeconvConfig):
    E = np.asarray(E, dtype=np.float64)
    N, G = E.shape
    C = T.shape[0]
    if C == 1:
        return np.ones((N, 1))
    lib = np.asarray(library, dtype=np.float64)[:, None]
    params = {"z": np.zeros((N, C)), "zeta": np.zeros(N)}
    state = AdamWState(lr=cfg.lr, weight_decay=0.0)

    def means(p):
        prop = softmax(p["z"], axis=1)
        scale = np.exp(p["zeta"])[:, None]
        return prop, scale, scale * lib * (prop @ T)

    _, _, mu0 = means(params)
    if not np.isfinite(nb_nll_batch(E, mu0, theta)):
        raise FloatingPointError("deconvolution loss is non-finite at initialisation")
    for _ in range(cfg.steps):
        prop, scale, mu = means(params)
        d_mu, _ = nb_nll_grads(E, mu, theta)
        d_mu *= N
        d_prop = (d_mu @ T.T) * (scale * lib)
        grads = {
            "z": prop * (d_prop - np.sum(d_prop * prop, axis=1, keepdims=True)),
            "zeta": np.sum(d_mu * mu, axis=1),
        }
        adamw_step(state, params, grads)
    prop, _, mu = means(params)
    if not np.isfinite(nb_nll_batch(E, mu, theta)):
        raise FloatingPointError("deconvolution loss became non-finite")
    return prop


def deconvolve(bulk: CountMatrix, proto, disp, cfg: DeconvConfig = None) -> ProportionMatrix:
    """Cell-type proportions for every row of ``bulk``.

    ``proto`` is a normalized PrototypeMatrix over the same genes (same
    order) as ``bulk``; ``disp`` supplies per-gene dispersion.
    """
    cfg = cfg or DeconvConfig()
    if tuple(bulk.gene_ids) != tuple(proto.gene_ids):
        raise DataError("bulk and prototype genes are not aligned")
    theta = np.asarray(getattr(disp, "theta_sc", disp), dtype=np.float64)
    if theta.shape != (bulk.shape[1],):
        raise DataError("dispersion length does not match the number of genes")
    library = bulk.values.sum(axis=1)
    if np.any(library <= 0):
        raise DataError("every bulk sample needs a positive total count")
    prop = _deconvolve_arrays(bulk.values, library, np.asarray(proto.values), theta, cfg)
    return ProportionMatrix(prop, bulk.row_ids, proto.cell_type_names)


class NBDeconvolver(TransformerMixin, BaseEstimator):
    """Transformer mapping bulk count rows to cell-type proportions.

    ``fit`` only validates and stores the reference; ``transform`` runs
    the per-sample optimisation.
    """

    def __init__(self, prototypes=None, dispersion=None, lr=1e-2, steps=500):
        self.prototypes = prototypes
        self.dispersion = dispersion
        self.lr = lr
        self.steps = steps

    def fit(self, X=None, y=None):
        T = np.asarray(getattr(self.prototypes, "values", self.prototypes), dtype=np.float64)
        if T.ndim != 2 or not np.allclose(T.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("prototypes must be a normalized C x G matrix")
        theta = np.asarray(getattr(self.dispersion, "theta_sc", self.dispersion), dtype=np.float64)
        if theta.shape != (T.shape[1],) or np.any(theta <= 0):
            raise ValueError("dispersion must be a positive vector with one entry per gene")
        self.reference_ = T
        self.theta_ = theta
        self.n_features_in_ = T.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        E = X.values if isinstance(X, CountMatrix) else np.asarray(X)
        if E.ndim != 2 or E.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} genes, got shape {E.shape}")
        lib = E.sum(axis=1)
        if np.any(lib <= 0) or np.any(E < 0):
            raise ValueError("counts must be nonnegative with positive row totals")
        return _deconvolve_arrays(E, lib, self.reference_, self.theta_, DeconvConfig(self.lr, self.steps))


def write_proportions(pm: ProportionMatrix, path, id_column="slide_id") -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(id_column + "," + ",".join(pm.cell_type_names) + "\n")
        for rid, row in zip(pm.row_ids, pm.values):
            fh.write(rid + "," + ",".join(fmt_float(v) for v in row) + "\n")


def read_proportions(path) -> ProportionMatrix:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    if len(lines) < 2:
        raise DataError(f"{path}: no proportion rows")
    names = lines[0].split(",")[1:]
    rows, vals = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(names) + 1:
            raise DataError(f"{path}: ragged row {parts[0]!r}")
        rows.append(parts[0])
        vals.append([float(x) for x in parts[1:]])
    return ProportionMatrix(np.array(vals), rows, names)
