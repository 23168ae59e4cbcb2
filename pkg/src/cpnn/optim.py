"""AdamW with decoupled weight decay, and a central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamWState:
    """Moment buffers and hyperparameters for :func:`adamw_step`.

    ``weight_decay`` is the default decay; ``decay_overrides`` maps parameter
    names to their own decay coefficient (e.g. 0 for dispersions).
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_overrides: dict = field(default_factory=dict)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0, eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def adamw_step(state: AdamWState, params: dict, grads: dict) -> dict:
    """Apply one AdamW update in place and return ``params``.

    Parameters without an entry in ``grads`` are left untouched (frozen).
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        wd = state.decay_overrides.get(name, state.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + wd * p
        p -= state.lr * update
    return params


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    passed: bool
    n_checked: int

    def line(self) -> str:
        return f"max_rel_err={self.max_rel_err:.3e} worst={self.worst_param} pass={str(self.passed).lower()}"


def _step_for(value, h):
    # scale the probe for large-magnitude coordinates
    mag = abs(value)
    return h * mag / 1e3 if mag > 1e3 else h


def finite_diff_check(loss_fn, params: dict, grads: dict, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn`` takes a dict shaped like ``params`` and returns a float.  Only
    parameters present in ``grads`` are probed.  Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst_err, worst_name, count = 0.0, "", 0
    for name in grads:
        arr = work[name]
        analytic = np.asarray(grads[name], dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            step = _step_for(orig, h)
            arr[idx] = orig + step
            f_plus = loss_fn(work)
            arr[idx] = orig - step
            f_minus = loss_fn(work)
            arr[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss when perturbing {name}{list(idx)}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            count += 1
            if err > worst_err or not worst_name:
                worst_err = err
                worst_name = f"{name}[{','.join(map(str, idx))}]" if idx else name
    return GradCheckReport(worst_err, worst_name, worst_err < tol, count)
