"""Input validation shared by the estimator classes."""

from __future__ import annotations

import numpy as np

from .data import PatchFeatureSet, SampleRecord


def check_feature_sets(X, dim=None, prefix="s"):
    """Coerce a list of patch-feature arrays (or PatchFeatureSets) to PatchFeatureSets."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a list of per-slide (n_patches, dim) arrays, not a single matrix")
    out = []
    for n, item in enumerate(X):
        if isinstance(item, SampleRecord):
            item = item.features
        if not isinstance(item, PatchFeatureSet):
            item = PatchFeatureSet(f"{prefix}{n}", np.asarray(item, dtype=np.float64))
        out.append(item)
    if not out:
        raise ValueError("X is empty")
    dims = {fs.dim for fs in out}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
    if dim is not None and out[0].dim != dim:
        raise ValueError(f"expected feature dimension {dim}, got {out[0].dim}")
    return out


def check_counts(y, n_rows, n_genes=None):
    """Nonnegative integer-valued count matrix with ``n_rows`` rows."""
    arr = np.asarray(y)
    if arr.ndim != 2 or arr.shape[0] != n_rows:
        raise ValueError(f"expected counts with {n_rows} rows, got shape {arr.shape}")
    if n_genes is not None and arr.shape[1] != n_genes:
        raise ValueError(f"expected {n_genes} genes, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr != np.round(arr)):
        raise ValueError("counts must be finite nonnegative integers")
    return arr.astype(np.int64)


def check_prototypes(proto):
    """Return a normalized C x G array from a PrototypeMatrix or array."""
    T = np.asarray(getattr(proto, "values", proto), dtype=np.float64)
    if T.ndim != 2 or np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("prototypes must be a nonnegative C x G matrix with rows summing to 1")
    return T
