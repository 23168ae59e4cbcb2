"""scikit-learn style wrappers around the slide and patch training loops."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_counts, check_feature_sets, check_prototypes
from .data import CountMatrix, SampleRecord
from .deconv import ProportionMatrix
from .metrics import evaluate
from .model import Ablation, compute_weights, forward_patch, forward_slide
from .training import SpatialSample, TrainConfig, train_patch, train_slide


class _CpnnBase(RegressorMixin, BaseEstimator):
    def __init__(self, prototypes=None, *, lr=1e-3, epochs=500, lam=1e3, patience=20,
                 hidden=None, activation="gelu", pi=True, mc=True, u=True, r=True, random_state=0):
        self.prototypes = prototypes
        self.lr = lr
        self.epochs = epochs
        self.lam = lam
        self.patience = patience
        self.hidden = hidden
        self.activation = activation
        self.pi = pi
        self.mc = mc
        self.u = u
        self.r = r
        self.random_state = random_state

    def _train_config(self, **extra):
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            lr=self.lr, epochs=self.epochs, lam=self.lam, patience=self.patience, seed=seed,
            flags=Ablation(self.pi, self.mc, self.u, self.r), hidden=self.hidden,
            activation=self.activation, **extra,
        )

    def _proto0(self):
        T = check_prototypes(self.prototypes)
        if hasattr(self.prototypes, "gene_ids"):
            return self.prototypes
        return T

    def transform(self, X):
        """Per-slide mean compositional weights (n_slides x C)."""
        check_is_fitted(self, "params_")
        sets = check_feature_sets(X, self.n_features_in_)
        return np.stack([compute_weights(self.params_.head, fs).mean(axis=0) for fs in sets])


class CPNNRegressor(_CpnnBase):
    """Slide-level model: bags of patch features to bulk expression.

    ``fit(X, y, reference=...)`` takes a list of per-slide patch-feature
    arrays, an (n_slides x G) count matrix and, when the regulariser is on,
    reference proportions (n_slides x C) from deconvolution.
    """

    def __init__(self, prototypes=None, *, lr=1e-3, epochs=500, batch_size=16, lam=1e3, patience=20,
                 validation_count=30, hidden=None, activation="gelu", pi=True, mc=True, u=True, r=True,
                 random_state=0):
        super().__init__(prototypes, lr=lr, epochs=epochs, lam=lam, patience=patience, hidden=hidden,
                         activation=activation, pi=pi, mc=mc, u=u, r=r, random_state=random_state)
        self.batch_size = batch_size
        self.validation_count = validation_count

    def fit(self, X, y, reference=None):
        sets = check_feature_sets(X)
        T = check_prototypes(self.prototypes)
        counts = check_counts(y, len(sets), T.shape[1])
        records = [SampleRecord(fs.slide_id, fs, c) for fs, c in zip(sets, counts)]
        cfg = self._train_config(batch_size=self.batch_size, validation_count=self.validation_count)
        Wref = None
        if cfg.loss_config().lam > 0:
            if reference is None:
                raise ValueError("reference proportions are required when the regulariser is enabled")
            ref = np.asarray(getattr(reference, "values", reference), dtype=np.float64)
            Wref = ProportionMatrix(ref, [fs.slide_id for fs in sets], [f"type{c}" for c in range(T.shape[0])])
        self.params_, self.history_ = train_slide(records, self._proto0(), Wref, cfg)
        self.n_features_in_ = sets[0].dim
        return self

    def predict(self, X, library_size=None):
        """Expected counts per slide; ``library_size`` defaults to 1 (proportions)."""
        check_is_fitted(self, "params_")
        sets = check_feature_sets(X, self.n_features_in_)
        lib = np.ones(len(sets)) if library_size is None else np.broadcast_to(np.asarray(library_size, float), (len(sets),))
        return np.stack([forward_slide(self.params_, fs, l).mu_bar for fs, l in zip(sets, lib)])

    def score(self, X, y):
        """Mean per-gene Spearman correlation between predictions and counts."""
        y = np.asarray(y, dtype=np.float64)
        return evaluate(self.predict(X, y.sum(axis=1)), y).mean_scc


class CPNNPatchRegressor(_CpnnBase):
    """Patch-level model: one feature row per spot to spot expression.

    ``X`` is a list of per-slide (n_spots x D) arrays and ``y`` the
    matching list of (n_spots x G) count matrices.
    """

    def __init__(self, prototypes=None, *, lr=1e-3, epochs=500, batch_size=256, patch_lambda=1.0,
                 patience=20, log1p=True, hidden=None, activation="gelu", pi=True, mc=True, u=True,
                 random_state=0):
        super().__init__(prototypes, lr=lr, epochs=epochs, lam=0.0, patience=patience, hidden=hidden,
                         activation=activation, pi=pi, mc=mc, u=u, r=False, random_state=random_state)
        self.batch_size = batch_size
        self.patch_lambda = patch_lambda
        self.log1p = log1p

    def fit(self, X, y):
        sets = check_feature_sets(X)
        T = check_prototypes(self.prototypes)
        if len(y) != len(sets):
            raise ValueError("y must hold one spot-count matrix per slide")
        samples = []
        for fs, counts in zip(sets, y):
            c = check_counts(counts, fs.n_patches, T.shape[1])
            samples.append(SpatialSample(fs.slide_id, fs, CountMatrix(c, fs.patch_ids, [f"g{j}" for j in range(c.shape[1])])))
        cfg = self._train_config(patch_batch_size=self.batch_size, patch_lambda=self.patch_lambda,
                                 patch_log1p=self.log1p)
        self.params_, self.history_ = train_patch(samples, self._proto0(), cfg)
        self.n_features_in_ = sets[0].dim
        return self

    def predict(self, X):
        """List of per-slide (n_spots x G) predictions."""
        check_is_fitted(self, "params_")
        return [forward_patch(self.params_, fs) for fs in check_feature_sets(X, self.n_features_in_)]

    def score(self, X, y):
        """Mean per-gene Spearman correlation across all spots."""
        pred = np.concatenate(self.predict(X))
        return evaluate(pred, np.concatenate([np.asarray(v, float) for v in y])).mean_scc
