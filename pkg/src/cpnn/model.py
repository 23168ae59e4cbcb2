"""Prototype-weighted expression model: weight head, mixing, modality correction.

Per patch ``i`` the head produces simplex weights
``w_i = softmax(W2 act(W1 h_i + b1) + b2)``.  For a slide the mean is
``mu_g = alpha_g * sum_i sum_c w_ic T_cg + beta_g`` and the count-normalised
mean is ``mu_bar = l * mu / sum(mu)``.  Patch-level predictions drop the sum
over patches.  Gradients are written out by hand (no autodiff dependency).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._functional import gelu, gelu_grad, sigmoid, softmax, softplus, softplus_inv
from .data import DataError, PatchFeatureSet, fmt_float

MU_FLOOR = 1e-8
BETA_INIT = 1e-2

PARAM_ORDER = ("W1", "b1", "W2", "b2", "alpha_free", "beta_free", "rho", "proto_free")
ACTIVATIONS = ("gelu", "identity")


@dataclass(frozen=True)
class Ablation:
    """Switches for the ablation study.

    pi: initialise the trainable prototype from the fitted one (else random).
    mc: learn modality correction alpha/beta (else alpha=1, beta=0 fixed).
    u: update the prototype during training (else frozen).
    r: use the consistency regulariser (else lambda is forced to 0).
    """

    pi: bool = True
    mc: bool = True
    u: bool = True
    r: bool = True

    @classmethod
    def from_string(cls, text):
        """Parse e.g. ``"PI,MC,U,R"`` or ``"PI,U"``; ``"none"`` disables all."""
        tokens = {t.strip().lower() for t in text.split(",") if t.strip()} - {"none"}
        unknown = tokens - {"pi", "mc", "u", "r"}
        if unknown:
            raise ValueError(f"unknown ablation flag(s): {sorted(unknown)}")
        return cls(**{k: k in tokens for k in ("pi", "mc", "u", "r")})

    def label(self):
        on = [k.upper() for k, v in asdict(self).items() if v]
        return ",".join(on) if on else "none"


@dataclass(frozen=True)
class WeightHead:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"

    @property
    def n_types(self):
        return self.W2.shape[0]

    @property
    def input_dim(self):
        return self.W1.shape[1]


@dataclass
class CpnnParameters:
    """All model tensors keyed by name plus the frozen initial prototype."""

    tensors: dict
    proto_init: np.ndarray
    gene_ids: tuple
    cell_type_names: tuple
    flags: Ablation = field(default_factory=Ablation)
    activation: str = "gelu"
    seed: int = 0

    @property
    def dims(self):
        C, G = self.proto_init.shape
        H, D = self.tensors["W1"].shape
        return {"C": C, "G": G, "D": D, "H": H}

    @property
    def head(self) -> WeightHead:
        t = self.tensors
        return WeightHead(t["W1"], t["b1"], t["W2"], t["b2"], self.activation)

    def alpha(self):
        if not self.flags.mc:
            return np.ones(self.proto_init.shape[1])
        return np.exp(self.tensors["alpha_free"])

    def beta(self):
        if not self.flags.mc:
            return np.zeros(self.proto_init.shape[1])
        return softplus(self.tensors["beta_free"])

    def theta(self):
        return np.exp(self.tensors["rho"])

    def proto(self):
        return softplus(self.tensors["proto_free"])

    def trainable(self, slide=True):
        names = ["W1", "b1", "W2", "b2"]
        if self.flags.mc:
            names += ["alpha_free", "beta_free"]
        if slide:
            names.append("rho")
        if self.flags.u:
            names.append("proto_free")
        return names

    def copy(self):
        return CpnnParameters(
            {k: v.copy() for k, v in self.tensors.items()},
            self.proto_init.copy(),
            self.gene_ids,
            self.cell_type_names,
            self.flags,
            self.activation,
            self.seed,
        )


def init_params(proto0, feature_dim, hidden=None, flags=None, seed=0, activation="gelu",
                gene_ids=None, cell_type_names=None) -> CpnnParameters:
    """Initialise parameters from a normalized prototype matrix (C x G).

    ``proto0`` may be a ``PrototypeMatrix`` or an array.  The head uses
    uniform fan-in initialisation drawn from ``seed``.
    """
    flags = flags or Ablation()
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    if hasattr(proto0, "values"):
        gene_ids = gene_ids or proto0.gene_ids
        cell_type_names = cell_type_names or proto0.cell_type_names
        proto0 = proto0.values
    P0 = np.array(proto0, dtype=np.float64)
    C, G = P0.shape
    if not np.allclose(P0.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise DataError("initial prototype rows must sum to 1")
    gene_ids = tuple(gene_ids or (f"g{j}" for j in range(G)))
    cell_type_names = tuple(cell_type_names or (f"type{c}" for c in range(C)))
    D = int(feature_dim)
    H = int(hidden or D)
    rng = np.random.default_rng(seed)
    k1, k2 = 1.0 / np.sqrt(D), 1.0 / np.sqrt(H)
    tensors = {
        "W1": rng.uniform(-k1, k1, size=(H, D)),
        "b1": rng.uniform(-k1, k1, size=H),
        "W2": rng.uniform(-k2, k2, size=(C, H)),
        "b2": rng.uniform(-k2, k2, size=C),
        "alpha_free": np.zeros(G),
        "beta_free": np.full(G, float(softplus_inv(BETA_INIT))),
        "rho": np.zeros(G),
    }
    if flags.pi:
        start = P0
    else:
        start = rng.lognormal(0.0, 1.0, size=(C, G))
        start /= start.sum(axis=1, keepdims=True)
    # keep zero prototype entries representable
    tensors["proto_free"] = softplus_inv(np.maximum(start, 1e-12))
    return CpnnParameters(tensors, P0, gene_ids, cell_type_names, flags, activation, seed)


def _features(features, head: WeightHead):
    h = features.features if isinstance(features, PatchFeatureSet) else np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != head.input_dim:
        raise DataError(f"feature dimension {h.shape[-1]} does not match head input {head.input_dim}")
    return h


def _head_forward(head: WeightHead, h):
    z1 = h @ head.W1.T + head.b1
    a1 = gelu(z1) if head.activation == "gelu" else z1
    logits = a1 @ head.W2.T + head.b2
    return z1, a1, softmax(logits, axis=1)


def compute_weights(head: WeightHead, features) -> np.ndarray:
    """Per-patch simplex weights, one row per patch."""
    if isinstance(head, CpnnParameters):
        head = head.head
    h = _features(features, head)
    return _head_forward(head, h)[2]


@dataclass
class ForwardTrace:
    weights: np.ndarray
    mean_weight: np.ndarray
    mu: np.ndarray
    mu_bar: np.ndarray
    library_size: float
    h: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    weight_sum: np.ndarray
    mix: np.ndarray
    clamped: np.ndarray


def forward_slide(params: CpnnParameters, features, l) -> ForwardTrace:
    """Slide-level forward pass; ``l`` is the observed total count."""
    if not l > 0:
        raise ValueError("library size must be positive")
    h = _features(features, params.head)
    z1, a1, w = _head_forward(params.head, h)
    T = params.proto()
    if T.shape[0] != w.shape[1]:
        raise DataError("head output does not match the number of prototypes")
    S = w.sum(axis=0)
    mix = S @ T
    raw = params.alpha() * mix + params.beta()
    clamped = raw < MU_FLOOR
    mu = np.where(clamped, MU_FLOOR, raw)
    mu_bar = float(l) * mu / mu.sum()
    if not np.all(np.isfinite(mu_bar)):
        raise FloatingPointError("non-finite slide prediction")
    return ForwardTrace(w, S / w.shape[0], mu, mu_bar, float(l), h, z1, a1, S, mix, clamped)


@dataclass
class PatchTrace:
    weights: np.ndarray
    pred: np.ndarray
    h: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    clamped: np.ndarray


def forward_patch(params: CpnnParameters, features, return_trace=False):
    """Per-patch predictions ``alpha * (w_i @ T) + beta`` clamped at 0."""
    h = _features(features, params.head)
    z1, a1, w = _head_forward(params.head, h)
    raw = params.alpha() * (w @ params.proto()) + params.beta()
    clamped = raw < 0.0
    pred = np.where(clamped, 0.0, raw)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite patch prediction")
    if return_trace:
        return PatchTrace(w, pred, h, z1, a1, clamped)
    return pred


def _zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _head_backward(params, grads, h, z1, a1, w, d_w):
    d_logits = w * (d_w - np.sum(d_w * w, axis=1, keepdims=True))
    t = params.tensors
    grads["W2"] += d_logits.T @ a1
    grads["b2"] += d_logits.sum(axis=0)
    d_a1 = d_logits @ t["W2"]
    d_z1 = d_a1 * gelu_grad(z1) if params.activation == "gelu" else d_a1
    grads["W1"] += d_z1.T @ h
    grads["b1"] += d_z1.sum(axis=0)


def _mixing_backward(params, grads, d_raw, mix_weights, mix):
    """Slide tail: d_raw (G,) is dL/d(alpha*mix + beta) with clamping already applied."""
    alpha = params.alpha()
    if params.flags.mc:
        grads["alpha_free"] += d_raw * mix * alpha
        grads["beta_free"] += d_raw * sigmoid(params.tensors["beta_free"])
    d_mix = d_raw * alpha
    if params.flags.u:
        d_T = np.atleast_2d(mix_weights).T @ np.atleast_2d(d_mix)
        grads["proto_free"] += d_T * sigmoid(params.tensors["proto_free"])
    return d_mix @ params.proto().T


def backward_slide(params: CpnnParameters, trace: ForwardTrace, d_mu_bar, d_mean_weight=None, grads=None) -> dict:
    """Accumulate parameter gradients of a slide given dL/dmu_bar and dL/dW_bar.

    ``rho`` is untouched here (the dispersion only enters the loss).  Frozen
    tensors (per the ablation flags) receive identically zero gradient.
    """
    d_mu_bar = np.asarray(d_mu_bar, dtype=np.float64)
    if d_mu_bar.shape != trace.mu_bar.shape:
        raise DataError("upstream gradient does not match the trace (stale trace?)")
    if grads is None:
        grads = _zero_grads(params)
    total = trace.mu.sum()
    # quotient rule of mu_bar = l * mu / sum(mu)
    d_mu = (trace.library_size / total) * (d_mu_bar - np.dot(d_mu_bar, trace.mu_bar) / trace.library_size)
    d_raw = np.where(trace.clamped, 0.0, d_mu)
    d_S = _mixing_backward(params, grads, d_raw, trace.weight_sum, trace.mix)
    n_p = trace.weights.shape[0]
    d_w = np.broadcast_to(d_S, trace.weights.shape)
    if d_mean_weight is not None:
        d_w = d_w + np.asarray(d_mean_weight) / n_p
    _head_backward(params, grads, trace.h, trace.z1, trace.a1, trace.weights, d_w)
    return grads


def backward_patch(params: CpnnParameters, trace: PatchTrace, d_pred, grads=None) -> dict:
    """Accumulate parameter gradients given dL/dpred (N_p x G)."""
    d_pred = np.asarray(d_pred, dtype=np.float64)
    if d_pred.shape != trace.pred.shape:
        raise DataError("upstream gradient does not match the trace (stale trace?)")
    if grads is None:
        grads = _zero_grads(params)
    d_raw = np.where(trace.clamped, 0.0, d_pred)
    mix = trace.weights @ params.proto()
    # per-patch mixing: accumulate over patches
    alpha = params.alpha()
    if params.flags.mc:
        grads["alpha_free"] += np.sum(d_raw * mix, axis=0) * alpha
        grads["beta_free"] += np.sum(d_raw, axis=0) * sigmoid(params.tensors["beta_free"])
    d_mix = d_raw * alpha
    if params.flags.u:
        grads["proto_free"] += (trace.weights.T @ d_mix) * sigmoid(params.tensors["proto_free"])
    d_w = d_mix @ params.proto().T
    _head_backward(params, grads, trace.h, trace.z1, trace.a1, trace.weights, d_w)
    return grads


# ---------------------------------------------------------------- checkpoint


def _array_text(arr):
    flat = np.asarray(arr, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("cannot checkpoint non-finite parameters")
    return "[" + ",".join(fmt_float(v) for v in flat) + "]"


def save_checkpoint(params: CpnnParameters, path, extra_meta=None) -> None:
    """Write a JSON checkpoint; arrays are flat row-major lists, 17 significant digits."""
    meta = dict(params.dims)
    meta.update(
        gene_ids=list(params.gene_ids),
        cell_type_names=list(params.cell_type_names),
        flags=asdict(params.flags),
        activation=params.activation,
        seed=params.seed,
        param_order=list(PARAM_ORDER) + ["proto_init"],
    )
    if extra_meta:
        meta.update(extra_meta)
    arrays = [(name, params.tensors[name]) for name in PARAM_ORDER] + [("proto_init", params.proto_init)]
    body = ",\n".join(f"  {json.dumps(name)}: {_array_text(arr)}" for name, arr in arrays)
    text = "{\n" + f' "meta": {json.dumps(meta, sort_keys=True)},\n' + ' "params": {\n' + body + "\n }\n}\n"
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path) -> CpnnParameters:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    meta = doc["meta"]
    C, G, D, H = meta["C"], meta["G"], meta["D"], meta["H"]
    shapes = {
        "W1": (H, D), "b1": (H,), "W2": (C, H), "b2": (C,),
        "alpha_free": (G,), "beta_free": (G,), "rho": (G,), "proto_free": (C, G), "proto_init": (C, G),
    }
    arrays = {}
    for name, shape in shapes.items():
        flat = np.array(doc["params"][name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise DataError(f"checkpoint tensor {name} has {flat.size} values, expected shape {shape}")
        arrays[name] = flat.reshape(shape)
    proto_init = arrays.pop("proto_init")
    return CpnnParameters(
        arrays, proto_init, tuple(meta["gene_ids"]), tuple(meta["cell_type_names"]),
        Ablation(**meta["flags"]), meta.get("activation", "gelu"), int(meta.get("seed", 0)),
    )
