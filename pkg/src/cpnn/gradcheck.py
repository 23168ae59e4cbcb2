"""End-to-end finite-difference checks of the slide and patch objectives."""

from __future__ import annotations

import numpy as np

from .data import PatchFeatureSet, SampleRecord
from ._functional import sigmoid
from .losses import LossConfig, loss_patch, loss_patch_grads
from .model import Ablation, CpnnParameters, backward_patch, forward_patch, init_params
from .optim import GradCheckReport, finite_diff_check
from .training import slide_batch_loss_and_grads


def _with_tensors(params: CpnnParameters, tensors) -> CpnnParameters:
    return CpnnParameters(
        tensors, params.proto_init, params.gene_ids, params.cell_type_names,
        params.flags, params.activation, params.seed,
    )


def _tiny_instance(rng, n_slides=2):
    C = int(rng.integers(2, 4))
    G = int(rng.integers(3, 7))
    D = int(rng.integers(2, 6))
    proto0 = rng.lognormal(0.0, 1.0, size=(C, G))
    proto0 /= proto0.sum(axis=1, keepdims=True)
    records = []
    for n in range(n_slides):
        n_p = int(rng.integers(1, 5))
        feats = PatchFeatureSet(f"s{n}", rng.normal(size=(n_p, D)))
        counts = rng.integers(0, 50, size=G)
        counts[0] += 1
        records.append(SampleRecord(f"s{n}", feats, counts))
    return C, G, D, proto0, records


def _perturbed(params, rng):
    # move away from the symmetric initial point so every term is exercised
    t = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in params.tensors.items()}
    t["proto_free"] = params.tensors["proto_free"] + rng.normal(scale=0.1, size=params.tensors["proto_free"].shape)
    return t


def check_slide(seed: int, lam: float = 1.0, flags: Ablation = None, h: float = 3e-5) -> GradCheckReport:
    """Gradient check of the mini-batch slide loss through the forward pass."""
    rng = np.random.default_rng(seed)
    C, G, D, proto0, records = _tiny_instance(rng)
    params = init_params(proto0, D, hidden=3, flags=flags or Ablation(), seed=seed)
    params = _with_tensors(params, _perturbed(params, rng))
    Wref = rng.dirichlet(np.ones(C), size=len(records))
    cfg = LossConfig(lam=lam)
    _, _, grads = slide_batch_loss_and_grads(params, records, Wref, cfg)
    trainable = params.trainable(slide=True)

    def loss_fn(tensors):
        return slide_batch_loss_and_grads(_with_tensors(params, tensors), records, Wref, cfg)[0]

    return finite_diff_check(loss_fn, params.tensors, {k: grads[k] for k in trainable}, h=h)


def check_patch(seed: int, patch_lambda: float = 1.0, flags: Ablation = None, h: float = 3e-5) -> GradCheckReport:
    """Gradient check of the patch correlation loss through the forward pass."""
    rng = np.random.default_rng(seed)
    C, G, D, proto0, _ = _tiny_instance(rng, n_slides=0)
    n_p = int(rng.integers(2, 5))
    feats = rng.normal(size=(n_p, D))
    obs = rng.integers(0, 30, size=(n_p, G)).astype(np.float64)
    obs[:, 0] += 1.0
    obs[:, -1] = 0.0  # guarantees nonconstant rows
    params = init_params(proto0, D, hidden=3, flags=flags or Ablation(), seed=seed)
    params = _with_tensors(params, _perturbed(params, rng))
    cfg = LossConfig(patch_lambda=patch_lambda)

    def loss_fn(tensors):
        p = _with_tensors(params, tensors)
        return loss_patch(forward_patch(p, feats), obs, p.proto(), p.proto_init, cfg)[0]

    trace = forward_patch(params, feats, return_trace=True)
    g = loss_patch_grads(trace.pred, obs, params.proto(), params.proto_init, cfg)
    grads = backward_patch(params, trace, g["pred"])
    if params.flags.u:
        grads["proto_free"] += g["proto"] * sigmoid(params.tensors["proto_free"])
    trainable = params.trainable(slide=False)
    return finite_diff_check(loss_fn, params.tensors, {k: grads[k] for k in trainable}, h=h)


def run_gradchecks(seed: int, n_seeds: int = 50, tol: float = 1e-4) -> GradCheckReport:
    """Worst report over ``n_seeds`` slide and patch checks starting at ``seed``."""
    worst = None
    total = 0
    for s in range(seed, seed + n_seeds):
        for rep in (check_slide(s), check_patch(s)):
            total += rep.n_checked
            if worst is None or rep.max_rel_err > worst.max_rel_err:
                worst = rep
    return GradCheckReport(worst.max_rel_err, worst.worst_param, worst.max_rel_err < tol, total)
