"""Classifier with a noisy continuous-depth core.

Affine encoder into the state space, one stochastic integration over a fixed
grid, affine head to logits. Prediction can ensemble several noisy forward
passes (averaging probabilities, not logits); training gradients flow through
the forward sensitivities: direct for the head, parameter sensitivity for the
drift, initial-state sensitivity chained through the encoder.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import backend
from .dynamics import (
    DiffusionSpec,
    DriftNet,
    params_from_bytes,
    params_to_bytes,
)
from .solver import NumericOverflowError
from .streams import RandomStream, TimeGrid, sample_brownian_increments

__all__ = [
    "ClassifierModel",
    "PredictOptions",
    "TTNPrediction",
    "ModelGradients",
    "forward",
    "predict_ttn",
    "predict_ttn_batch",
    "softmax",
    "loss_and_grad",
    "cross_entropy_batch",
    "model_gradient",
    "input_gradients",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ClassifierModel:
    """encoder (affine) -> stochastic state evolution -> head (affine)."""

    enc_w: np.ndarray  # (n, input_dim)
    enc_b: np.ndarray  # (n,)
    drift: DriftNet
    diffusion: DiffusionSpec
    grid: TimeGrid
    head_w: np.ndarray  # (C, n)
    head_b: np.ndarray  # (C,)

    def __post_init__(self) -> None:
        n = self.drift.state_dim
        if self.enc_w.ndim != 2 or self.enc_w.shape[0] != n:
            raise ValueError("encoder must map input_dim -> state_dim")
        if self.enc_b.shape != (n,):
            raise ValueError("encoder bias must be (state_dim,)")
        if self.head_w.ndim != 2 or self.head_w.shape[1] != n:
            raise ValueError("head must map state_dim -> n_classes")
        if self.head_b.shape != (self.head_w.shape[0],):
            raise ValueError("head bias must be (n_classes,)")

    @property
    def input_dim(self) -> int:
        return self.enc_w.shape[1]

    @property
    def state_dim(self) -> int:
        return self.enc_w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        state_dim: int,
        n_classes: int,
        hidden_dims: tuple[int, ...],
        activation: str,
        diffusion: DiffusionSpec,
        grid: TimeGrid,
        stream: RandomStream,
        time_scale: float = 1.0,
    ) -> "ClassifierModel":
        """Gaussian fan-in scaled weights, zero biases, like the drift net."""
        drift = DriftNet.initialize(
            state_dim, hidden_dims, activation, stream.substream(0), time_scale
        )
        g_enc = stream.substream(1).generator()
        g_head = stream.substream(2).generator()
        enc_w = g_enc.normal(0.0, input_dim ** -0.5, size=(state_dim, input_dim))
        head_w = g_head.normal(0.0, state_dim ** -0.5, size=(n_classes, state_dim))
        return cls(
            enc_w=enc_w,
            enc_b=np.zeros(state_dim),
            drift=drift,
            diffusion=diffusion,
            grid=grid,
            head_w=head_w,
            head_b=np.zeros(n_classes),
        )

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x @ self.enc_w.T + self.enc_b

    def head(self, h: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        return h @ self.head_w.T + self.head_b


@dataclass(frozen=True)
class PredictOptions:
    """Test-time ensembling: ttn_passes noisy forwards averaged per input."""

    stream: RandomStream
    ttn_passes: int = 10

    def __post_init__(self) -> None:
        if self.ttn_passes < 1:
            raise ValueError("ttn_passes must be >= 1")


@dataclass
class TTNPrediction:
    probabilities: np.ndarray  # (B, C)
    predicted_class: np.ndarray  # (B,) int64
    dropped_passes: int = 0


@dataclass
class ModelGradients:
    enc_w: np.ndarray
    enc_b: np.ndarray
    drift_w: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    loss_mean: float
    dropped_rows: int = 0

    def scaled(self, factor: float) -> "ModelGradients":
        return ModelGradients(
            enc_w=self.enc_w * factor,
            enc_b=self.enc_b * factor,
            drift_w=self.drift_w * factor,
            head_w=self.head_w * factor,
            head_b=self.head_b * factor,
            loss_mean=self.loss_mean,
            dropped_rows=self.dropped_rows,
        )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shift-invariant."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _integrate_states(
    model: ClassifierModel, h0_rows: np.ndarray, stream: RandomStream
) -> tuple[np.ndarray, np.ndarray]:
    """Final states for a row batch; row r rides the path of stream.bump(r)."""
    R, n = h0_rows.shape
    if model.diffusion.variant != "zero":
        dW = sample_brownian_increments(stream, model.grid, n, R)
    else:
        dW = None
    h_T, _, _, overflow = backend.em_batch(
        model.drift, model.diffusion, h0_rows, dW,
        model.grid.n_steps, model.grid.dt,
    )
    return h_T, overflow


def forward(model: ClassifierModel, x: np.ndarray, stream: RandomStream) -> np.ndarray:
    """Logits from one stochastic pass; a batch row i uses stream.bump(i)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h0 = model.encode(x)
    h_T, overflow = _integrate_states(model, h0, stream)
    bad = np.flatnonzero(overflow >= 0)
    if bad.size:
        r = int(bad[0])
        raise NumericOverflowError(
            int(overflow[r]), f"forward pass overflowed at step {int(overflow[r])} (sample {r})"
        )
    logits = model.head(h_T)
    return logits[0] if single else logits


def predict_ttn_batch(
    model: ClassifierModel, x: np.ndarray, opts: PredictOptions
) -> TTNPrediction:
    """Average softmax over ttn_passes independent noisy passes per input.

    Row (sample i, pass j) uses opts.stream.bump(i*k + j). A pass that
    overflows is dropped from that sample's average and counted; a sample
    whose passes all overflow is an error.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    k = opts.ttn_passes
    h0 = model.encode(x)
    rows = np.repeat(h0, k, axis=0)
    h_T, overflow = _integrate_states(model, rows, opts.stream)
    # runaway parameters can push the head product past the float range even
    # when every state stayed finite; such a pass is dropped the same way an
    # overflowed path is, so probabilities are always finite
    with np.errstate(over="ignore", invalid="ignore"):
        logits = model.head(h_T)
    ok = ((overflow < 0) & np.isfinite(logits).all(axis=1)).reshape(B, k)
    kept = ok.sum(axis=1)
    if (kept == 0).any():
        i = int(np.flatnonzero(kept == 0)[0])
        steps = overflow.reshape(B, k)[i]
        step = int(steps.max()) if (steps >= 0).any() else model.grid.n_steps
        raise NumericOverflowError(step, f"all {k} passes overflowed for sample {i}")
    with np.errstate(over="ignore", invalid="ignore"):
        probs_rows = softmax(logits).reshape(B, k, model.n_classes)
    probs_rows = np.where(ok[:, :, None], probs_rows, 0.0)
    probs = probs_rows.sum(axis=1) / kept[:, None]
    return TTNPrediction(
        probabilities=probs,
        predicted_class=np.argmax(probs, axis=1).astype(np.int64),
        dropped_passes=int((~ok).sum()),
    )


def predict_ttn(
    model: ClassifierModel, x: np.ndarray, opts: PredictOptions
) -> TTNPrediction:
    """Single-input convenience wrapper around predict_ttn_batch."""
    pred = predict_ttn_batch(model, np.atleast_2d(x), opts)
    return TTNPrediction(
        probabilities=pred.probabilities[0],
        predicted_class=pred.predicted_class[0],
        dropped_passes=pred.dropped_passes,
    )


def loss_and_grad(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against one label; grad = p - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    C = logits.shape[0]
    if not 0 <= int(label) < C:
        raise ValueError(f"label {label} outside [0, {C})")
    p = softmax(logits)[0]
    z = logits - logits.max()
    log_p = z - np.log(np.exp(z).sum())
    grad = p.copy()
    grad[int(label)] -= 1.0
    return float(-log_p[int(label)]), grad


def cross_entropy_batch(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy values and logit gradients (p - onehot)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError("labels must be (B,) ints inside [0, n_classes)")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    vals = log_norm - z[np.arange(B), labels]
    grads = softmax(logits)
    grads[np.arange(B), labels] -= 1.0
    return vals, grads


def _aug_rows(
    model: ClassifierModel, h0_rows: np.ndarray, stream: RandomStream,
    want_beta: bool = True,
):
    R, n = h0_rows.shape
    if model.diffusion.variant != "zero":
        dW = sample_brownian_increments(stream, model.grid, n, R)
    else:
        dW = None
    return backend.em_aug_batch(
        model.drift, model.diffusion, h0_rows, dW,
        model.grid.n_steps, model.grid.dt,
        want_beta=want_beta, want_alpha=True,
    )


def model_gradient(
    model: ClassifierModel,
    x: np.ndarray,
    labels: np.ndarray,
    k_paths: int,
    stream: RandomStream,
) -> ModelGradients:
    """Mean cross-entropy gradient for all three parameter groups.

    Each sample is averaged over k_paths independent paths (row r = sample
    r//k_paths, path r%k_paths, driven by stream.bump(r)). Rows that
    overflow are skipped and counted; an all-overflow batch is an error.
    """
    if k_paths < 1:
        raise ValueError("k_paths must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    B = x.shape[0]
    if B == 0:
        raise ValueError("batch must be non-empty")
    h0 = model.encode(x)
    rows_h0 = np.repeat(h0, k_paths, axis=0)
    h_T, beta, alpha, overflow = _aug_rows(model, rows_h0, stream)
    ok = overflow < 0
    if not ok.any():
        raise NumericOverflowError(
            int(overflow.max()), "every path in the batch overflowed"
        )
    rows_x = np.repeat(x, k_paths, axis=0)
    rows_y = np.repeat(labels, k_paths)
    h_T, beta, alpha = h_T[ok], beta[ok], alpha[ok]
    rows_x, rows_y = rows_x[ok], rows_y[ok]

    logits = model.head(h_T)
    vals, g_logits = cross_entropy_batch(logits, rows_y)

    # head: direct affine gradients
    g_head_w = np.einsum("rc,rn->cn", g_logits, h_T) / ok.sum()
    g_head_b = g_logits.mean(axis=0)
    # pull the loss gradient back to the final state
    g_h = g_logits @ model.head_w  # (R, n)
    # drift parameters through the parameter sensitivity
    g_drift = np.einsum("rn,rnd->rd", g_h, beta).mean(axis=0)
    # encoder through the initial-state sensitivity
    g_h0 = np.einsum("rn,rnj->rj", g_h, alpha)  # (R, n)
    g_enc_w = np.einsum("rn,ri->ni", g_h0, rows_x) / ok.sum()
    g_enc_b = g_h0.mean(axis=0)
    return ModelGradients(
        enc_w=g_enc_w,
        enc_b=g_enc_b,
        drift_w=g_drift,
        head_w=g_head_w,
        head_b=g_head_b,
        loss_mean=float(vals.mean()),
        dropped_rows=int((~ok).sum()),
    )


def input_gradients(
    model: ClassifierModel,
    x: np.ndarray,
    labels: np.ndarray,
    k_paths: int,
    stream: RandomStream,
) -> np.ndarray:
    """Per-sample gradient of the cross-entropy w.r.t. the raw input.

    Path-averaged over k_paths per sample with the same row keying as
    model_gradient; overflowed rows are dropped from that sample's average.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    B = x.shape[0]
    h0 = model.encode(x)
    rows_h0 = np.repeat(h0, k_paths, axis=0)
    # Only the state sensitivity is needed; skipping the parameter block
    # drops the dominant per-step cost.
    h_T, _, alpha, overflow = _aug_rows(model, rows_h0, stream, want_beta=False)
    ok = (overflow < 0).reshape(B, k_paths)
    kept = ok.sum(axis=1)
    if (kept == 0).any():
        i = int(np.flatnonzero(kept == 0)[0])
        raise NumericOverflowError(
            int(overflow.reshape(B, k_paths)[i].max()),
            f"all {k_paths} paths overflowed for sample {i}",
        )
    rows_y = np.repeat(labels, k_paths)
    logits = model.head(h_T)
    _, g_logits = cross_entropy_batch(logits, rows_y)
    g_h = g_logits @ model.head_w
    g_h0 = np.einsum("rn,rnj->rj", g_h, alpha)  # (R, n)
    g_x = g_h0 @ model.enc_w  # (R, input_dim)
    g_x = np.where(ok.reshape(-1)[:, None], g_x, 0.0).reshape(B, k_paths, -1)
    return g_x.sum(axis=1) / kept[:, None]


# ---------------------------------------------------------------------------
# checkpoint: one binary file (header + three parameter blobs) + JSON sidecar
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"NSDC"
_CKPT_VERSION = 1
_ACT_IDS = {"tanh": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_IDS.items()}
_VARIANT_IDS = {"zero": 0, "additive": 1, "multiplicative": 2, "dropout": 3}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_IDS.items()}
_SCHED_IDS = {"constant": 0, "linear_decay": 1}
_SCHED_NAMES = {v: k for k, v in _SCHED_IDS.items()}

# magic, version, input_dim, n_classes, n_layer_dims, act, variant, sched,
# sigma, t_ref, time_scale, t_end, n_steps
_CKPT_HEAD = struct.Struct("<4sIQQQBBBxddddQ")


def save_checkpoint(model: ClassifierModel, path) -> None:
    """Binary checkpoint plus a readable `<path>.json` hyperparameter sidecar."""
    path = Path(path)
    head = _CKPT_HEAD.pack(
        _CKPT_MAGIC,
        _CKPT_VERSION,
        model.input_dim,
        model.n_classes,
        len(model.drift.layer_dims),
        _ACT_IDS[model.drift.activation],
        _VARIANT_IDS[model.diffusion.variant],
        _SCHED_IDS[model.diffusion.schedule],
        model.diffusion.sigma,
        model.diffusion.t_ref,
        model.drift.time_scale,
        model.grid.t_end,
        model.grid.n_steps,
    )
    dims = np.asarray(model.drift.layer_dims, dtype="<u8").tobytes()
    enc_flat = np.concatenate([model.enc_w.ravel(), model.enc_b])
    head_flat = np.concatenate([model.head_w.ravel(), model.head_b])
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(dims)
        fh.write(params_to_bytes(enc_flat))
        fh.write(params_to_bytes(model.drift.params))
        fh.write(params_to_bytes(head_flat))
    sidecar = {
        "input_dim": model.input_dim,
        "state_dim": model.state_dim,
        "n_classes": model.n_classes,
        "layer_dims": list(model.drift.layer_dims),
        "activation": model.drift.activation,
        "time_scale": model.drift.time_scale,
        "variant": model.diffusion.variant,
        "sigma": model.diffusion.sigma,
        "schedule": model.diffusion.schedule,
        "t_ref": model.diffusion.t_ref,
        "t_end": model.grid.t_end,
        "n_steps": model.grid.n_steps,
        "drift_param_count": model.drift.param_count,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def _read_blob(fh, where: str) -> np.ndarray:
    from .dynamics import _HEADER

    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ValueError(f"checkpoint truncated in {where} blob header")
    _, _, count = _HEADER.unpack(head)
    data = fh.read(count * 8)
    return params_from_bytes(head + data, where=where)


def load_checkpoint(path) -> ClassifierModel:
    """Rebuild a model from its binary checkpoint (sidecar not required)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEAD.size)
        if len(head) < _CKPT_HEAD.size:
            raise ValueError(f"checkpoint too short for header: {path}")
        (magic, version, input_dim, n_classes, n_dims,
         act_id, var_id, sched_id, sigma, t_ref, time_scale,
         t_end, n_steps) = _CKPT_HEAD.unpack(head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims_raw = fh.read(n_dims * 8)
        if len(dims_raw) != n_dims * 8:
            raise ValueError(f"checkpoint truncated in layer dims: {path}")
        layer_dims = tuple(int(v) for v in np.frombuffer(dims_raw, dtype="<u8"))
        enc_flat = _read_blob(fh, "encoder")
        drift_params = _read_blob(fh, "drift")
        head_flat = _read_blob(fh, "head")
    n = layer_dims[-1]
    if enc_flat.size != n * input_dim + n:
        raise ValueError("encoder blob size does not match header dims")
    if head_flat.size != n_classes * n + n_classes:
        raise ValueError("head blob size does not match header dims")
    drift = DriftNet(
        layer_dims=layer_dims,
        activation=_ACT_NAMES[act_id],
        params=drift_params,
        time_scale=time_scale,
    )
    diffusion = DiffusionSpec(
        variant=_VARIANT_NAMES[var_id],
        sigma=sigma,
        schedule=_SCHED_NAMES[sched_id],
        t_ref=t_ref,
    )
    return ClassifierModel(
        enc_w=enc_flat[: n * input_dim].reshape(n, input_dim),
        enc_b=enc_flat[n * input_dim :],
        drift=drift,
        diffusion=diffusion,
        grid=TimeGrid(t_end=t_end, n_steps=int(n_steps)),
        head_w=head_flat[: n_classes * n].reshape(n_classes, n),
        head_b=head_flat[n_classes * n :],
    )
