"""Training loops (slide and patch level), early stopping and cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._functional import sigmoid
from .data import CountMatrix, DataError, PatchFeatureSet, SampleRecord, SplitPlan
from .losses import (
    LossConfig,
    loss_patch,
    loss_patch_grads,
    loss_slide,
    loss_slide_grads,
    reference_rows,
)
from .metrics import evaluate
from .model import (
    Ablation,
    CpnnParameters,
    backward_patch,
    backward_slide,
    compute_weights,
    forward_patch,
    forward_slide,
    init_params,
)
from .nb import nb_nll_batch
from .optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)

_NO_DECAY = ("alpha_free", "beta_free", "rho", "proto_free")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 16
    lam: float = 1e3
    patience: int = 20
    seed: int = 0
    folds: int = 4
    validation_count: int = 30
    flags: Ablation = field(default_factory=Ablation)
    hidden: int = None
    activation: str = "gelu"
    weight_decay: float = 0.01
    val_includes_reg: bool = False
    patch_log1p: bool = True
    patch_lambda: float = 1.0
    patch_axis: str = "spot"
    patch_batch_size: int = 256
    patch_val_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.flags, dict):
            self.flags = Ablation(**self.flags)
        elif isinstance(self.flags, str):
            self.flags = Ablation.from_string(self.flags)
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.patch_batch_size < 1:
            raise ValueError("epochs, batch sizes and patience must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lam=self.lam if self.flags.r else 0.0,
            patch_log1p=self.patch_log1p,
            patch_lambda=self.patch_lambda,
            patch_axis=self.patch_axis,
        )

    def to_dict(self):
        d = asdict(self)
        d["flags"] = asdict(self.flags)
        return d

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names - {"lambda"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_epoch: int = 0
    best_val_loss: float = math.inf
    n_steps: int = 0
    stopped_early: bool = False
    validation_ids: tuple = ()

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "nb", "reg"])
            for r in self.rows:
                writer.writerow([r["epoch"]] + [format(r[k], ".17g") for k in ("train_loss", "val_loss", "nb", "reg")])


def validation_size(n_train, requested):
    """Requested count, clipped to ceil(20%) of the training fold."""
    return max(1, min(requested, math.ceil(0.2 * n_train)))


def _optimizer(cfg: TrainConfig):
    return AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay, decay_overrides={k: 0.0 for k in _NO_DECAY})


# ---------------------------------------------------------------- slide level


def slide_batch_loss_and_grads(params: CpnnParameters, batch, Wref_rows, loss_cfg: LossConfig, on_gradient=None):
    """Loss parts and parameter gradients for a mini-batch of SampleRecords."""
    traces = [forward_slide(params, rec.features, rec.total_count) for rec in batch]
    targets = np.stack([rec.target_counts for rec in batch]).astype(np.float64)
    theta = params.theta()
    proto = params.proto()
    total, parts = loss_slide(traces, targets, theta, Wref_rows, proto, params.proto_init, loss_cfg)
    g = loss_slide_grads(traces, targets, theta, Wref_rows, proto, params.proto_init, loss_cfg)
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for n, (rec, tr) in enumerate(zip(batch, traces)):
        backward_slide(params, tr, g["mu_bar"][n], g["mean_weight"][n], grads)
        if on_gradient is not None:
            on_gradient(rec.slide_id)
    grads["rho"] += g["theta"] * theta
    if params.flags.u:
        grads["proto_free"] += g["proto"] * sigmoid(params.tensors["proto_free"])
    return total, parts, grads


def predict_slides(params: CpnnParameters, records) -> np.ndarray:
    """Count-normalised means for each record (uses its observed total count)."""
    return np.stack([forward_slide(params, r.features, r.total_count).mu_bar for r in records])


def mean_weights(params: CpnnParameters, feature_sets) -> np.ndarray:
    return np.stack([compute_weights(params.head, fs).mean(axis=0) for fs in feature_sets])


def _slide_val_loss(params, records, Wref, loss_cfg, include_reg):
    mu = predict_slides(params, records)
    targets = np.stack([r.target_counts for r in records]).astype(np.float64)
    nb = nb_nll_batch(targets, mu, params.theta())
    if include_reg and loss_cfg.lam > 0 and Wref is not None:
        W = reference_rows(Wref, [r.slide_id for r in records])
        return nb + loss_cfg.lam * _reg_of(params, records, W)
    return nb


def _reg_of(params, records, W):
    from .losses import regularizer

    return regularizer(params.proto(), params.proto_init, mean_weights(params, [r.features for r in records]), W)


def _split_validation(dataset, cfg, rng, validation):
    if validation is not None:
        return list(dataset), list(validation)
    n_val = validation_size(len(dataset), cfg.validation_count)
    if len(dataset) - n_val < 1:
        raise DataError("not enough slides to hold out a validation set")
    idx = rng.permutation(len(dataset))
    val_idx = set(idx[:n_val].tolist())
    train = [r for i, r in enumerate(dataset) if i not in val_idx]
    val = [r for i, r in enumerate(dataset) if i in val_idx]
    return train, val


def train_slide(dataset, proto0, Wref, cfg: TrainConfig, validation=None, on_gradient=None):
    """Train on SampleRecords; returns ``(best_params, history)``.

    When ``validation`` is None, ``validation_size`` slides are drawn from
    ``dataset`` (seeded) and excluded from gradient updates.
    """
    if not dataset:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    train, val = _split_validation(dataset, cfg, rng, validation)
    if not val:
        raise DataError("empty validation set")
    loss_cfg = cfg.loss_config()
    dim = train[0].features.dim
    params = init_params(proto0, dim, cfg.hidden, cfg.flags, cfg.seed, cfg.activation)
    G = params.proto_init.shape[1]
    for rec in list(train) + list(val):
        if rec.target_counts.shape[0] != G or rec.features.dim != dim:
            raise DataError(f"slide {rec.slide_id}: gene or feature dimension mismatch")
    use_ref = loss_cfg.lam > 0
    W_train = reference_rows(Wref, [r.slide_id for r in train]) if use_ref else None
    trainable = params.trainable(slide=True)
    opt = _optimizer(cfg)

    history = TrainHistory(validation_ids=tuple(r.slide_id for r in val))
    history.initial_val_loss = _slide_val_loss(params, val, Wref, loss_cfg, cfg.val_includes_reg)
    best = params.copy()
    history.best_val_loss = history.initial_val_loss
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        tot = nb_sum = reg_sum = 0.0
        n_batches = 0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train[i] for i in idx]
            W_rows = W_train[idx] if use_ref else None
            total, parts, grads = slide_batch_loss_and_grads(params, batch, W_rows, loss_cfg, on_gradient)
            adamw_step(opt, params.tensors, {k: grads[k] for k in trainable})
            history.n_steps += 1
            tot += total
            nb_sum += parts["nb"]
            reg_sum += parts["reg"]
            n_batches += 1
        val_loss = _slide_val_loss(params, val, Wref, loss_cfg, cfg.val_includes_reg)
        history.rows.append({
            "epoch": epoch,
            "train_loss": tot / n_batches,
            "val_loss": val_loss,
            "nb": nb_sum / n_batches,
            "reg": reg_sum / n_batches,
        })
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = params.copy()
        elif epoch - history.best_epoch >= cfg.patience:
            history.stopped_early = True
            break
    return best, history


# ---------------------------------------------------------------- patch level


@dataclass(frozen=True)
class SpatialSample:
    """Patch features of one slide with row-aligned spot counts."""

    slide_id: str
    features: PatchFeatureSet
    spot_counts: CountMatrix

    def __post_init__(self):
        if self.spot_counts.shape[0] != self.features.n_patches:
            raise DataError(f"slide {self.slide_id}: {self.spot_counts.shape[0]} spots for {self.features.n_patches} patches")


def _patch_val_loss(params, feats, obs, loss_cfg):
    pred = forward_patch(params, feats)
    return loss_patch(pred, obs, params.proto(), params.proto_init, loss_cfg)[1]["corr"]


def train_patch(dataset, proto0, cfg: TrainConfig, on_gradient=None):
    """Train on SpatialSamples with the correlation loss; returns ``(best_params, history)``.

    Spots of the training slides are pooled; a seeded ``patch_val_fraction``
    of them is held out for early stopping.
    """
    if not dataset:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = cfg.loss_config()
    feats = np.concatenate([s.features.features for s in dataset])
    obs = np.concatenate([s.spot_counts.values for s in dataset]).astype(np.float64)
    owner = np.concatenate([[i] * s.features.n_patches for i, s in enumerate(dataset)])
    n = feats.shape[0]
    n_val = max(1, int(round(cfg.patch_val_fraction * n)))
    if n - n_val < 2:
        raise DataError("not enough spots to hold out a validation set")
    perm = rng.permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), perm[n_val:]

    params = init_params(proto0, feats.shape[1], cfg.hidden, cfg.flags, cfg.seed, cfg.activation)
    if obs.shape[1] != params.proto_init.shape[1]:
        raise DataError("spot genes do not match the prototype genes")
    trainable = params.trainable(slide=False)
    opt = _optimizer(cfg)
    history = TrainHistory()
    history.initial_val_loss = _patch_val_loss(params, feats[val_idx], obs[val_idx], loss_cfg)
    history.best_val_loss = history.initial_val_loss
    best = params.copy()
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        tot = corr_sum = reg_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.patch_batch_size):
            idx = order[start:start + cfg.patch_batch_size]
            if len(idx) < 2:
                continue
            trace = forward_patch(params, feats[idx], return_trace=True)
            proto = params.proto()
            total, parts = loss_patch(trace.pred, obs[idx], proto, params.proto_init, loss_cfg)
            g = loss_patch_grads(trace.pred, obs[idx], proto, params.proto_init, loss_cfg)
            grads = backward_patch(params, trace, g["pred"])
            if params.flags.u:
                grads["proto_free"] += g["proto"] * sigmoid(params.tensors["proto_free"])
            if on_gradient is not None:
                for i in np.unique(owner[idx]):
                    on_gradient(dataset[i].slide_id)
            adamw_step(opt, params.tensors, {k: grads[k] for k in trainable})
            history.n_steps += 1
            tot += total
            corr_sum += parts["corr"]
            reg_sum += parts["reg"]
            n_batches += 1
        val_loss = _patch_val_loss(params, feats[val_idx], obs[val_idx], loss_cfg)
        history.rows.append({
            "epoch": epoch,
            "train_loss": tot / max(n_batches, 1),
            "val_loss": val_loss,
            "nb": corr_sum / max(n_batches, 1),
            "reg": reg_sum / max(n_batches, 1),
        })
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = params.copy()
        elif epoch - history.best_epoch >= cfg.patience:
            history.stopped_early = True
            break
    return best, history


# ---------------------------------------------------------------- cross-validation


def make_folds(slide_ids, k, seed, groups=None) -> SplitPlan:
    """Seeded assignment of slides (or their groups, e.g. patients) to ``k`` folds."""
    slide_ids = list(slide_ids)
    units = list(dict.fromkeys(groups)) if groups is not None else slide_ids
    if len(units) < k:
        raise DataError(f"cannot make {k} folds from {len(units)} units")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(units))
    unit_fold = {units[j]: rank % k for rank, j in enumerate(perm)}
    keys = groups if groups is not None else slide_ids
    return SplitPlan({s: unit_fold[u] for s, u in zip(slide_ids, keys)}, (), k)


@dataclass
class FoldResult:
    fold: int
    test_ids: list
    report: object
    params: CpnnParameters
    history: TrainHistory
    predictions: np.ndarray = None
    mean_weights: np.ndarray = None


@dataclass
class CVResult:
    folds: list
    plan: SplitPlan
    aggregate: dict


def _run_fold(fold, dataset, plan, cfg, mode, proto0, Wref, on_gradient):
    by_id = {s.slide_id: s for s in dataset}
    test = [by_id[s] for s in plan.test_ids(fold)]
    train = [by_id[s] for s in plan.train_ids(fold)]
    if not test:
        raise DataError(f"fold {fold} has no test samples")
    if mode == "slide":
        params, hist = train_slide(train, proto0, Wref, cfg, on_gradient=on_gradient)
        pred = predict_slides(params, test)
        truth = np.stack([r.target_counts for r in test])
        report = evaluate(pred, truth)
        W = mean_weights(params, [r.features for r in test])
    else:
        params, hist = train_patch(train, proto0, cfg, on_gradient=on_gradient)
        pred = np.concatenate([forward_patch(params, s.features) for s in test])
        truth = np.concatenate([s.spot_counts.values for s in test])
        report = evaluate(pred, truth)
        W = np.concatenate([compute_weights(params.head, s.features) for s in test])
    return FoldResult(fold, [s.slide_id for s in test], report, params, hist, pred, W)


def run_cv(dataset, cfg: TrainConfig, mode="slide", proto0=None, Wref=None, plan=None,
           groups=None, n_jobs=1, on_gradient=None) -> CVResult:
    """K-fold (or leave-one-out when ``cfg.folds == len(dataset)``) train/evaluate.

    Aggregates mean and standard deviation of the per-fold mean PCC/SCC.
    """
    if mode not in ("slide", "patch"):
        raise ValueError("mode must be 'slide' or 'patch'")
    if proto0 is None:
        raise ValueError("an initial prototype matrix is required")
    ids = [s.slide_id for s in dataset]
    if plan is None:
        plan = make_folds(ids, cfg.folds, cfg.seed, groups)
    if set(plan.fold_assignments) != set(ids):
        raise DataError("fold plan does not cover exactly the dataset slides")
    folds = range(plan.n_folds)
    for f in folds:
        if not plan.test_ids(f):
            raise DataError(f"fold {f} has no test samples")
    if n_jobs != 1 and on_gradient is None:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_fold)(f, dataset, plan, cfg, mode, proto0, Wref, None) for f in folds
        )
    else:
        results = [_run_fold(f, dataset, plan, cfg, mode, proto0, Wref, on_gradient) for f in folds]
    pcc = np.array([r.report.mean_pcc for r in results])
    scc = np.array([r.report.mean_scc for r in results])
    aggregate = {
        "mean_pcc": float(pcc.mean()), "std_pcc": float(pcc.std()),
        "mean_scc": float(scc.mean()), "std_scc": float(scc.std()),
    }
    return CVResult(results, plan, aggregate)
