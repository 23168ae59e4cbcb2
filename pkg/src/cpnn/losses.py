"""Training objectives.

Slide level: NB negative log-likelihood plus ``lam`` times a regulariser that
keeps the prototype near its initial value and the mean patch weights near a
reference deconvolution.  Patch level: ``1 - PCC`` per spot plus a
prototype-only regulariser.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import DataError
from .nb import nb_nll_batch, nb_nll_grads


@dataclass
class LossConfig:
    lam: float = 1e3
    patch_log1p: bool = True
    patch_lambda: float = 1.0
    # "spot": correlation across genes within each spot; "gene": across spots per gene
    patch_axis: str = "spot"

    def __post_init__(self):
        if self.lam < 0 or self.patch_lambda < 0:
            raise ValueError("regularisation weights must be >= 0")
        if self.patch_axis not in ("spot", "gene"):
            raise ValueError("patch_axis must be 'spot' or 'gene'")


def reference_rows(Wref, slide_ids):
    """Rows of a ProportionMatrix for ``slide_ids`` in order."""
    if Wref is None:
        raise DataError("reference proportions are required when lambda > 0")
    index = {r: i for i, r in enumerate(Wref.row_ids)}
    missing = [s for s in slide_ids if s not in index]
    if missing:
        raise DataError(f"no reference proportions for slide {missing[0]!r}")
    return np.asarray(Wref.values)[[index[s] for s in slide_ids]]


def _stack(traces, attr):
    return np.stack([getattr(t, attr) for t in traces])


def regularizer(proto, proto0, mean_weights=None, Wref=None):
    """Squared Frobenius prototype drift plus mean squared weight residual."""
    reg = float(np.sum((proto0 - proto) ** 2))
    if mean_weights is not None:
        diff = np.asarray(Wref) - np.asarray(mean_weights)
        reg += float(np.mean(np.sum(diff * diff, axis=1)))
    return reg


def loss_slide(traces, targets, theta, Wref, proto, proto0, cfg: LossConfig):
    """Mini-batch slide loss; returns ``(total, {"nb": ..., "reg": ...})``.

    ``Wref`` holds the reference proportions row-aligned with ``traces``.
    """
    mu_bar = _stack(traces, "mu_bar")
    nb = nb_nll_batch(targets, mu_bar, theta)
    if Wref is None:
        if cfg.lam != 0:
            raise DataError("reference proportions are required when lambda > 0")
        return nb, {"nb": nb, "reg": 0.0}
    Wref = np.asarray(Wref, dtype=np.float64)
    if Wref.shape[0] != len(traces):
        raise DataError("missing reference proportions for some slides")
    reg = regularizer(proto, proto0, _stack(traces, "mean_weight"), Wref)
    if cfg.lam == 0:
        return nb, {"nb": nb, "reg": reg}
    return nb + cfg.lam * reg, {"nb": nb, "reg": reg}


def loss_slide_grads(traces, targets, theta, Wref, proto, proto0, cfg: LossConfig):
    """Gradients of :func:`loss_slide` w.r.t. mu_bar, theta, mean weights and prototype."""
    mu_bar = _stack(traces, "mu_bar")
    d_mu_bar, d_theta = nb_nll_grads(targets, mu_bar, theta)
    n = len(traces)
    if cfg.lam == 0 or Wref is None:
        return {
            "mu_bar": d_mu_bar,
            "theta": d_theta,
            "mean_weight": np.zeros((n, proto.shape[0])),
            "proto": np.zeros_like(proto),
        }
    W_bar = _stack(traces, "mean_weight")
    return {
        "mu_bar": d_mu_bar,
        "theta": d_theta,
        "mean_weight": cfg.lam * 2.0 * (W_bar - np.asarray(Wref)) / n,
        "proto": cfg.lam * 2.0 * (proto - proto0),
    }


def _pcc_rows(x, y):
    """Row-wise PCC with the centred vectors and norms needed for gradients."""
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    nx = np.sqrt(np.sum(xc * xc, axis=1))
    ny = np.sqrt(np.sum(yc * yc, axis=1))
    valid = (nx > 0) & (ny > 0)
    r = np.zeros(x.shape[0])
    r[valid] = np.sum(xc[valid] * yc[valid], axis=1) / (nx[valid] * ny[valid])
    return r, xc, yc, nx, ny, valid


def _patch_prep(pred, obs, cfg):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape or pred.ndim != 2:
        raise DataError(f"prediction {pred.shape} and observation {obs.shape} shapes differ")
    if cfg.patch_log1p:
        x, y = np.log1p(pred), np.log1p(obs)
    else:
        x, y = pred, obs
    if cfg.patch_axis == "gene":
        return pred, x.T, y.T
    return pred, x, y


def loss_patch(pred, obs, proto, proto0, cfg: LossConfig):
    """Mean ``1 - PCC`` over spots plus ``patch_lambda`` times prototype drift.

    Rows with zero variance in either argument are skipped with a warning.
    """
    _, x, y = _patch_prep(pred, obs, cfg)
    r, _, _, _, _, valid = _pcc_rows(x, y)
    if not valid.any():
        raise DataError("every spot has zero variance; correlation undefined")
    if not valid.all():
        warnings.warn(f"skipping {int((~valid).sum())} zero-variance rows in the patch loss", RuntimeWarning, stacklevel=2)
    corr = float(np.mean(1.0 - r[valid]))
    reg = float(np.sum((proto0 - proto) ** 2))
    return corr + cfg.patch_lambda * reg, {"corr": corr, "reg": reg}


def loss_patch_grads(pred, obs, proto, proto0, cfg: LossConfig):
    """Gradients of :func:`loss_patch` w.r.t. ``pred`` and the prototype."""
    pred, x, y = _patch_prep(pred, obs, cfg)
    r, xc, yc, nx, ny, valid = _pcc_rows(x, y)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("every spot has zero variance; correlation undefined")
    d_x = np.zeros_like(x)
    v = valid
    d_x[v] = -(yc[v] / (nx[v] * ny[v])[:, None] - r[v][:, None] * xc[v] / (nx[v] ** 2)[:, None]) / n_valid
    if cfg.patch_axis == "gene":
        d_x = d_x.T
    d_pred = d_x / (1.0 + pred) if cfg.patch_log1p else d_x
    return {"pred": d_pred, "proto": cfg.patch_lambda * 2.0 * (proto - proto0)}
