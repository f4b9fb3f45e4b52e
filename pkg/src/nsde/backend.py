"""Selects between the compiled integration kernels and the numpy fallback.

The compiled extension (nsde._core) handles the MLP drift only; anything else
(e.g. a linear drift used by analytic test problems) runs on the numpy
kernels. Set NSDE_BACKEND=pure to force the fallback everywhere, or
NSDE_BACKEND=compiled to fail fast at import when the extension is missing.

Repeated runs are bit-identical within one backend. Across backends results
agree to rounding noise only: the numpy kernels sum matrix products in BLAS
order, the compiled loops in index order.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from .dynamics import DiffusionSpec, DriftNet

__all__ = ["backend_name", "has_compiled", "em_batch", "em_aug_batch"]

_FORCED = os.environ.get("NSDE_BACKEND", "").strip().lower()
if _FORCED not in ("", "pure", "compiled"):
    raise ValueError(
        f"NSDE_BACKEND must be 'pure' or 'compiled', got {_FORCED!r}"
    )

_core = None
if _FORCED != "pure":
    try:
        from . import _core  # type: ignore[attr-defined]
    except ImportError:
        _core = None
if _FORCED == "compiled" and _core is None:
    raise ImportError(
        "NSDE_BACKEND=compiled but the nsde._core extension is not built"
    )

_ACT_IDS = {"tanh": 0, "relu": 1}
_VARIANT_IDS = {"zero": 0, "additive": 1, "multiplicative": 2, "dropout": 3}
_SCHED_IDS = {"constant": 0, "linear_decay": 1}


def backend_name() -> str:
    """Name of the kernel backend in use: 'compiled' or 'pure'."""
    return "compiled" if _core is not None else "pure"


def has_compiled() -> bool:
    return _core is not None


def _mlp_args(drift: DriftNet):
    params = np.ascontiguousarray(drift.params, dtype=np.float64)
    dims = np.asarray(drift.layer_dims, dtype=np.int64)
    return params, dims, _ACT_IDS[drift.activation], float(drift.time_scale)


def _checked_inputs(drift, spec: DiffusionSpec, h0, dW, n_steps: int):
    h = np.ascontiguousarray(h0, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"h0 must be (B, n), got shape {h.shape}")
    B, n = h.shape
    if n != drift.state_dim:
        raise ValueError(f"state width {n} != drift state_dim {drift.state_dim}")
    if spec.variant != "zero":
        if dW is None:
            raise ValueError("non-zero diffusion needs Brownian increments")
        dW = np.ascontiguousarray(dW, dtype=np.float64)
        if dW.shape != (B, n_steps, n):
            raise ValueError(f"dW shape {dW.shape} != {(B, n_steps, n)}")
    else:
        dW = None
    return h, dW


def _use_compiled(drift) -> bool:
    return _core is not None and isinstance(drift, DriftNet)


def em_batch(drift, spec: DiffusionSpec, h0, dW, n_steps, dt, record_every=0):
    """Batched Euler-Maruyama; see _kernels_py.em_batch for the contract."""
    if not _use_compiled(drift):
        return _kernels_py.em_batch(drift, spec, h0, dW, n_steps, dt, record_every)
    h, dW = _checked_inputs(drift, spec, h0, dW, n_steps)
    params, dims, act, ts = _mlp_args(drift)
    return _core.em_batch(
        params, dims, act, ts, h, dW, int(n_steps), float(dt),
        _VARIANT_IDS[spec.variant], float(spec.sigma),
        _SCHED_IDS[spec.schedule], float(spec.t_ref), int(record_every),
    )


def em_aug_batch(drift, spec: DiffusionSpec, h0, dW, n_steps, dt,
                 want_beta=True, want_alpha=False):
    """Augmented integration; see _kernels_py.em_aug_batch for the contract."""
    if not _use_compiled(drift):
        return _kernels_py.em_aug_batch(
            drift, spec, h0, dW, n_steps, dt, want_beta, want_alpha
        )
    h, dW = _checked_inputs(drift, spec, h0, dW, n_steps)
    params, dims, act, ts = _mlp_args(drift)
    return _core.em_aug_batch(
        params, dims, act, ts, h, dW, int(n_steps), float(dt),
        _VARIANT_IDS[spec.variant], float(spec.sigma),
        _SCHED_IDS[spec.schedule], float(spec.t_ref),
        bool(want_beta), bool(want_alpha),
    )
