"""Typed containers for counts, features and splits, plus their file formats.

All containers are frozen dataclasses holding read-only numpy arrays.
Dense CSV files are UTF-8, comma separated, unquoted ids.  Floats are written
with 17 significant digits so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _readonly(arr):
    arr.setflags(write=False)
    return arr


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"duplicate {what} id {i!r}")
        seen.add(i)


def fmt_float(x) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class CountMatrix:
    values: np.ndarray
    row_ids: tuple
    gene_ids: tuple

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise DataError(f"count matrix must be 2-d, got shape {vals.shape}")
        if vals.dtype.kind == "f":
            if not np.all(np.isfinite(vals)) or np.any(vals != np.round(vals)):
                raise DataError("counts must be finite integers")
        vals = np.array(vals, dtype=np.int64, copy=True)
        if np.any(vals < 0):
            r, c = np.argwhere(vals < 0)[0]
            raise DataError(f"negative count at row {r}, column {c}")
        row_ids = tuple(str(r) for r in self.row_ids)
        gene_ids = tuple(str(g) for g in self.gene_ids)
        if vals.shape != (len(row_ids), len(gene_ids)):
            raise DataError(
                f"matrix shape {vals.shape} does not match {len(row_ids)} rows x {len(gene_ids)} genes"
            )
        _check_unique(row_ids, "row")
        _check_unique(gene_ids, "gene")
        object.__setattr__(self, "values", _readonly(vals))
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "gene_ids", gene_ids)

    @property
    def shape(self):
        return self.values.shape

    def select_genes(self, genes) -> "CountMatrix":
        index = {g: j for j, g in enumerate(self.gene_ids)}
        cols = [index[g] for g in genes]
        return CountMatrix(self.values[:, cols], self.row_ids, tuple(genes))

    def select_rows(self, rows) -> "CountMatrix":
        index = {r: i for i, r in enumerate(self.row_ids)}
        idx = [index[r] for r in rows]
        return CountMatrix(self.values[idx], tuple(rows), self.gene_ids)

    def row(self, row_id) -> np.ndarray:
        return self.values[self.row_ids.index(row_id)]


@dataclass(frozen=True)
class CellAnnotations:
    """Per-cell category indices for cell type and batch (experimental condition)."""

    cell_type: np.ndarray
    batch: np.ndarray
    cell_type_names: tuple
    batch_names: tuple = ()

    def __post_init__(self):
        ct = np.array(self.cell_type, dtype=np.int64, copy=True)
        bt = np.array(self.batch, dtype=np.int64, copy=True)
        names = tuple(str(n) for n in self.cell_type_names)
        bnames = tuple(str(n) for n in self.batch_names) or tuple(str(i) for i in range(int(bt.max(initial=-1)) + 1))
        if ct.shape != bt.shape or ct.ndim != 1:
            raise DataError("cell_type and batch must be equal-length 1-d arrays")
        for arr, k, what in ((ct, len(names), "cell type"), (bt, len(bnames), "batch")):
            if np.any(arr < 0) or np.any(arr >= k):
                raise DataError(f"{what} index out of range [0, {k})")
            counts = np.bincount(arr, minlength=k)
            if np.any(counts == 0):
                raise DataError(f"{what} {int(np.argmin(counts))} has no cells")
        object.__setattr__(self, "cell_type", _readonly(ct))
        object.__setattr__(self, "batch", _readonly(bt))
        object.__setattr__(self, "cell_type_names", names)
        object.__setattr__(self, "batch_names", bnames)

    @property
    def n_types(self):
        return len(self.cell_type_names)

    @property
    def n_batches(self):
        return len(self.batch_names)


@dataclass(frozen=True)
class PatchFeatureSet:
    slide_id: str
    features: np.ndarray
    patch_ids: tuple = ()

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise DataError(f"slide {self.slide_id}: features must be a nonempty 2-d array")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"slide {self.slide_id}: non-finite feature")
        ids = tuple(str(p) for p in self.patch_ids) or tuple(f"p{i}" for i in range(feats.shape[0]))
        if len(ids) != feats.shape[0]:
            raise DataError(f"slide {self.slide_id}: {len(ids)} patch ids for {feats.shape[0]} rows")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "patch_ids", ids)

    @property
    def n_patches(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SampleRecord:
    slide_id: str
    features: PatchFeatureSet
    target_counts: np.ndarray
    total_count: int = None

    def __post_init__(self):
        counts = np.array(self.target_counts, dtype=np.int64, copy=True)
        if counts.ndim != 1 or np.any(counts < 0):
            raise DataError(f"slide {self.slide_id}: target counts must be a nonnegative vector")
        total = int(counts.sum())
        if self.total_count is not None and int(self.total_count) != total:
            raise DataError(f"slide {self.slide_id}: total_count {self.total_count} != sum of counts {total}")
        if total <= 0:
            raise DataError(f"slide {self.slide_id}: total count must be positive")
        object.__setattr__(self, "target_counts", _readonly(counts))
        object.__setattr__(self, "total_count", total)


@dataclass(frozen=True)
class SplitPlan:
    """Fold index per slide plus the ids held out for early stopping."""

    fold_assignments: dict
    validation_ids: tuple = ()
    n_folds: int = field(default=None)

    def __post_init__(self):
        folds = {str(k): int(v) for k, v in self.fold_assignments.items()}
        k = self.n_folds if self.n_folds is not None else (max(folds.values()) + 1 if folds else 0)
        if any(f < 0 or f >= k for f in folds.values()):
            raise DataError(f"fold index outside [0, {k})")
        object.__setattr__(self, "fold_assignments", folds)
        object.__setattr__(self, "validation_ids", tuple(str(v) for v in self.validation_ids))
        object.__setattr__(self, "n_folds", k)

    def test_ids(self, fold):
        return [s for s, f in self.fold_assignments.items() if f == fold]

    def train_ids(self, fold):
        return [s for s, f in self.fold_assignments.items() if f != fold]


# ---------------------------------------------------------------- dense counts


def read_dense_counts(path) -> CountMatrix:
    """Read ``id,<gene_1>,...`` CSV with one integer row per sample."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        genes = header[1:]
        _check_unique(genes, "gene")
        rows, values = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(rec)} fields, expected {len(header)}")
            row = []
            for col, cell in enumerate(rec[1:], start=1):
                try:
                    v = int(cell)
                except ValueError:
                    raise DataError(f"{path}: malformed count {cell!r} at row {lineno}, column {col} ({header[col]})") from None
                if v < 0:
                    raise DataError(f"{path}: negative count at row {lineno}, column {col}")
                row.append(v)
            rows.append(rec[0])
            values.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return CountMatrix(np.array(values, dtype=np.int64).reshape(len(rows), len(genes)), rows, genes)


def write_dense_counts(cm: CountMatrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("id," + ",".join(cm.gene_ids) + "\n")
        for rid, row in zip(cm.row_ids, cm.values):
            fh.write(rid + "," + ",".join(str(int(v)) for v in row) + "\n")


# ---------------------------------------------------------------- sparse counts

_MM_HEADER = "%%MatrixMarket matrix coordinate integer general"


def _read_ids(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh if line.strip()]


def read_sparse_counts(matrix_path, row_ids_path, gene_ids_path) -> CountMatrix:
    """Read a Matrix Market coordinate file (rows x genes) plus id sidecars."""
    row_ids = _read_ids(row_ids_path)
    gene_ids = _read_ids(gene_ids_path)
    with Path(matrix_path).open(encoding="utf-8") as fh:
        banner = fh.readline().strip()
        parts = banner.lower().split()
        if parts[:4] != ["%%matrixmarket", "matrix", "coordinate", "integer"] or parts[4:] not in (["general"], []):
            raise DataError(f"{matrix_path}: expected header {_MM_HEADER!r}, got {banner!r}")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        try:
            n_rows, n_cols, nnz = (int(x) for x in line.split())
        except ValueError:
            raise DataError(f"{matrix_path}: malformed size line {line.strip()!r}") from None
        if n_rows != len(row_ids) or n_cols != len(gene_ids):
            raise DataError(
                f"{matrix_path}: header says {n_rows}x{n_cols} but id files list "
                f"{len(row_ids)} rows and {len(gene_ids)} genes"
            )
        values = np.zeros((n_rows, n_cols), dtype=np.int64)
        seen = np.zeros((n_rows, n_cols), dtype=bool)
        n_read = 0
        for lineno, line in enumerate(fh, start=3):
            if not line.strip() or line.startswith("%"):
                continue
            try:
                i, j, v = (int(x) for x in line.split())
            except ValueError:
                raise DataError(f"{matrix_path}: malformed entry on line {lineno}") from None
            if not (1 <= i <= n_rows and 1 <= j <= n_cols):
                raise DataError(f"{matrix_path}: coordinate ({i},{j}) out of range on line {lineno}")
            if seen[i - 1, j - 1]:
                raise DataError(f"{matrix_path}: duplicate entry ({i},{j}) on line {lineno}")
            if v < 0:
                raise DataError(f"{matrix_path}: negative count on line {lineno}")
            seen[i - 1, j - 1] = True
            values[i - 1, j - 1] = v
            n_read += 1
    if n_read != nnz:
        raise DataError(f"{matrix_path}: header declares {nnz} entries, found {n_read}")
    return CountMatrix(values, row_ids, gene_ids)


def write_sparse_counts(cm: CountMatrix, matrix_path, row_ids_path, gene_ids_path) -> None:
    rows, cols = np.nonzero(cm.values)
    with Path(matrix_path).open("w", encoding="utf-8") as fh:
        fh.write(_MM_HEADER + "\n")
        fh.write(f"{cm.shape[0]} {cm.shape[1]} {len(rows)}\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i + 1} {j + 1} {int(cm.values[i, j])}\n")
    Path(row_ids_path).write_text("".join(f"{r}\n" for r in cm.row_ids), encoding="utf-8")
    Path(gene_ids_path).write_text("".join(f"{g}\n" for g in cm.gene_ids), encoding="utf-8")


# ---------------------------------------------------------------- annotations


def read_annotations(path, row_ids=None) -> CellAnnotations:
    """Read ``cell_id,cell_type,batch`` CSV; categories are indexed in sorted order."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        recs = {r["cell_id"]: (r["cell_type"], r.get("batch") or "0") for r in reader}
    order = list(row_ids) if row_ids is not None else list(recs)
    missing = [r for r in order if r not in recs]
    if missing:
        raise DataError(f"{path}: no annotation for cell {missing[0]!r}")
    types = sorted({recs[r][0] for r in order})
    batches = sorted({recs[r][1] for r in order})
    t_idx = {t: i for i, t in enumerate(types)}
    b_idx = {b: i for i, b in enumerate(batches)}
    return CellAnnotations(
        [t_idx[recs[r][0]] for r in order],
        [b_idx[recs[r][1]] for r in order],
        types,
        batches,
    )


def write_annotations(ann: CellAnnotations, row_ids, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("cell_id,cell_type,batch\n")
        for rid, t, b in zip(row_ids, ann.cell_type, ann.batch):
            fh.write(f"{rid},{ann.cell_type_names[t]},{ann.batch_names[b]}\n")


# ---------------------------------------------------------------- features


def read_feature_set(path, slide_id=None) -> PatchFeatureSet:
    """Read ``patch_id,f_0,...,f_{D-1}`` CSV; the slide id defaults to the file stem."""
    path = Path(path)
    slide_id = slide_id or path.stem
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: ragged row on line {lineno}")
            try:
                vals = [float(x) for x in rec[1:]]
            except ValueError:
                raise DataError(f"{path}: malformed feature on line {lineno}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: non-finite feature on line {lineno}")
            ids.append(rec[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no patches")
    return PatchFeatureSet(slide_id, np.array(rows, dtype=np.float64), ids)


def write_feature_set(fs: PatchFeatureSet, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("patch_id," + ",".join(f"f_{j}" for j in range(fs.dim)) + "\n")
        for pid, row in zip(fs.patch_ids, fs.features):
            fh.write(pid + "," + ",".join(fmt_float(v) for v in row) + "\n")


def read_features_dir(directory) -> dict:
    """Load every ``*.csv`` in ``directory`` keyed by slide id (file stem)."""
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".csv"):
            fs = read_feature_set(Path(directory) / name)
            out[fs.slide_id] = fs
    if not out:
        raise DataError(f"{directory}: no feature files")
    dims = {fs.dim for fs in out.values()}
    if len(dims) != 1:
        raise DataError(f"{directory}: inconsistent feature dimensions {sorted(dims)}")
    return out


def build_samples(counts: CountMatrix, features: dict) -> list:
    """Pair bulk count rows with feature sets by ``row_id == slide_id``."""
    missing = [r for r in counts.row_ids if r not in features]
    if missing:
        raise DataError(f"no feature file for slide {missing[0]!r}")
    return [SampleRecord(r, features[r], counts.values[i]) for i, r in enumerate(counts.row_ids)]


# ---------------------------------------------------------------- splits


def read_splits(path, validation_path=None) -> SplitPlan:
    """Read ``slide_id,fold`` CSV (an optional ``patient`` column is ignored here)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        folds = {r["slide_id"]: int(r["fold"]) for r in csv.DictReader(fh)}
    val = _read_ids(validation_path) if validation_path else ()
    return SplitPlan(folds, val)


def read_split_groups(path):
    """``slide_id -> patient`` from a splits or slide table with a ``patient`` column, else None."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if "slide_id" not in (reader.fieldnames or ()):
            raise DataError(f"{path}: missing slide_id column")
        if "patient" not in reader.fieldnames:
            return None
        return {r["slide_id"]: r["patient"] for r in reader}


def write_splits(plan: SplitPlan, path, validation_path=None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("slide_id,fold\n")
        for s, f in plan.fold_assignments.items():
            fh.write(f"{s},{f}\n")
    if validation_path is not None:
        Path(validation_path).write_text("".join(f"{v}\n" for v in plan.validation_ids), encoding="utf-8")


# ---------------------------------------------------------------- gene handling


def align_genes(a: CountMatrix, b: CountMatrix):
    """Restrict both matrices to their shared genes in lexicographic order."""
    if a.values.size == 0 or b.values.size == 0:
        raise DataError("cannot align empty matrices")
    shared = sorted(set(a.gene_ids) & set(b.gene_ids))
    if not shared:
        raise DataError("no genes in common")
    return a.select_genes(shared), b.select_genes(shared)


BULK_FILTER_DEFAULTS = dict(max_mito_frac=0.3, max_total=40000, min_genes=5000, min_rows_per_gene=50)
SC_FILTER_DEFAULTS = dict(max_mito_frac=0.3, max_genes=2500, min_genes=200, min_rows_per_gene=200)


def filter_counts(cm: CountMatrix, *, mito_genes=None, max_mito_frac=None, max_total=None,
                  max_genes=None, min_genes=None, min_rows_per_gene=None):
    """Quality filters for curated cohorts; returns ``(filtered, kept_row_mask)``.

    Row filters (mitochondrial fraction, total counts, detected genes) run
    first, then genes detected in fewer than ``min_rows_per_gene`` rows are
    dropped.  The mitochondrial filter is skipped unless ``mito_genes`` is
    supplied.  See ``BULK_FILTER_DEFAULTS`` / ``SC_FILTER_DEFAULTS``.
    """
    vals = cm.values
    keep = np.ones(vals.shape[0], dtype=bool)
    totals = vals.sum(axis=1)
    detected = (vals > 0).sum(axis=1)
    if mito_genes is not None and max_mito_frac is not None:
        mito = set(mito_genes)
        cols = [j for j, g in enumerate(cm.gene_ids) if g in mito]
        frac = vals[:, cols].sum(axis=1) / np.maximum(totals, 1)
        keep &= frac < max_mito_frac
    if max_total is not None:
        keep &= totals <= max_total
    if max_genes is not None:
        keep &= detected <= max_genes
    if min_genes is not None:
        keep &= detected >= min_genes
    if not keep.any():
        raise DataError("all rows removed by filters")
    kept = vals[keep]
    gene_keep = np.ones(vals.shape[1], dtype=bool)
    if min_rows_per_gene is not None:
        gene_keep = (kept > 0).sum(axis=0) >= min_rows_per_gene
    if not gene_keep.any():
        raise DataError("all genes removed by filters")
    logger.info("filter_counts kept %d/%d rows, %d/%d genes", keep.sum(), len(keep), gene_keep.sum(), len(gene_keep))
    rows = [r for r, k in zip(cm.row_ids, keep) if k]
    genes = [g for g, k in zip(cm.gene_ids, gene_keep) if k]
    return CountMatrix(kept[:, gene_keep], rows, genes), keep
