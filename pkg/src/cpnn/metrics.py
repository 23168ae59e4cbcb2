"""Per-gene Pearson and Spearman evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import DataError, fmt_float


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    return x, y


def pearson(x, y) -> float:
    """Sample Pearson correlation; NaN when either input is constant."""
    x, y = _check_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if denom == 0:
        return float("nan")
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share the mean rank)."""
    x, y = _check_pair(x, y)
    return pearson(rankdata(x), rankdata(y))


def _columnwise_pcc(a, b):
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt(np.sum(ac * ac, axis=0))
    nb = np.sqrt(np.sum(bc * bc, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sum(ac * bc, axis=0) / (na * nb)
    return np.clip(r, -1.0, 1.0)


@dataclass(frozen=True)
class EvalReport:
    gene_ids: tuple
    per_gene_pcc: np.ndarray
    per_gene_scc: np.ndarray
    mean_pcc: float
    mean_scc: float
    n_genes_evaluated: int
    n_excluded: int

    def summary_line(self) -> str:
        return f"mean_pcc={fmt_float(self.mean_pcc)} mean_scc={fmt_float(self.mean_scc)} n_genes={self.n_genes_evaluated}"

    def write_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("gene,pcc,scc\n")
            for g, p, s in zip(self.gene_ids, self.per_gene_pcc, self.per_gene_scc):
                fh.write(f"{g},{fmt_float(p)},{fmt_float(s)}\n")


def evaluate(pred, truth, gene_ids=None, axis="gene", log1p=False) -> EvalReport:
    """Correlate predictions with observed counts.

    With ``axis="gene"`` each gene is scored across samples (rows); with
    ``axis="sample"`` each sample is scored across genes.  Units that are
    constant in either matrix are dropped and counted in ``n_excluded``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise DataError(f"prediction {pred.shape} and truth {truth.shape} shapes differ")
    if axis not in ("gene", "sample"):
        raise ValueError("axis must be 'gene' or 'sample'")
    if log1p:
        pred, truth = np.log1p(pred), np.log1p(truth)
    if axis == "sample":
        pred, truth = pred.T, truth.T
    n, m = pred.shape
    if n < 2:
        raise DataError("need at least two samples to correlate")
    if gene_ids is None:
        gene_ids = tuple(f"g{j}" for j in range(m)) if axis == "gene" else tuple(f"s{j}" for j in range(m))
    keep = (np.ptp(pred, axis=0) > 0) & (np.ptp(truth, axis=0) > 0)
    if not keep.any():
        raise DataError("every unit is constant; correlations undefined")
    pcc = _columnwise_pcc(pred[:, keep], truth[:, keep])
    rp = rankdata(pred[:, keep], axis=0)
    rt = rankdata(truth[:, keep], axis=0)
    scc = _columnwise_pcc(rp, rt)
    ids = tuple(g for g, k in zip(gene_ids, keep) if k)
    return EvalReport(ids, pcc, scc, float(pcc.mean()), float(scc.mean()), int(keep.sum()), int((~keep).sum()))
