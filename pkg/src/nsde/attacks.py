"""Projected-gradient attacks and the depth-wise perturbation probe.

Attacking a model with a stochastic core uses expectation-over-paths
gradients: each PGD step freezes a set of paths, averages the input
gradient over them, then projects back onto the norm ball around the
original input (and the valid feature box, when the data has one).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ClassifierModel, input_gradients
from .solver import _coupled_kernel
from .stability import _safe_l2
from .streams import RandomStream, sample_brownian_path

__all__ = [
    "AttackConfig",
    "AttackResult",
    "pgd_attack",
    "depth_probe",
]


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.1
    steps: int = 20
    step_size: float = 0.01
    grad_paths: int = 8

    def __post_init__(self) -> None:
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be linf or l2, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1 or self.grad_paths < 1:
            raise ValueError("steps and grad_paths must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    skipped_steps: int = 0


def _project(x_adv: np.ndarray, x0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "linf":
        return np.clip(x_adv, x0 - cfg.epsilon, x0 + cfg.epsilon)
    delta = x_adv - x0
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.minimum(1.0, cfg.epsilon / np.maximum(norms, 1e-300))
    return x0 + delta * scale


def pgd_attack(
    model: ClassifierModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    stream: RandomStream,
    clip_range: Optional[tuple[float, float]] = None,
) -> AttackResult:
    """Iterative ascent on the classification loss inside the norm ball.

    Step s draws its frozen path set from stream.substream(s). A sample
    whose averaged gradient is exactly zero skips that step (counted in
    the result). The returned points satisfy the ball constraint to within
    1e-9 and the clip box exactly.
    """
    x0 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    x_adv = x0.copy()
    skipped = 0
    if cfg.epsilon == 0.0 or cfg.step_size == 0.0:
        return AttackResult(x_adv=x_adv, skipped_steps=0)
    base = stream.stream_id
    for s in range(cfg.steps):
        g = input_gradients(model, x_adv, y, cfg.grad_paths, stream.substream(base + s))
        if cfg.norm == "linf":
            direction = np.sign(g)
        else:
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            direction = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
        zero_rows = ~np.any(g != 0.0, axis=1)
        skipped += int(zero_rows.sum())
        x_adv = x_adv + cfg.step_size * direction
        x_adv = _project(x_adv, x0, cfg)
        if clip_range is not None:
            x_adv = np.clip(x_adv, clip_range[0], clip_range[1])
    return AttackResult(x_adv=x_adv, skipped_steps=skipped)


def depth_probe(
    model: ClassifierModel,
    x_clean: np.ndarray,
    x_perturbed: np.ndarray,
    stream: RandomStream,
    record_every: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """State-difference norm along depth, averaged over samples.

    Each sample's clean and perturbed encodings ride the same Brownian path
    (sample i uses stream.bump(i)), so the reported growth isolates the
    input perturbation. Returns (times, mean eps norm per recorded step).
    """
    xc = np.atleast_2d(np.asarray(x_clean, dtype=np.float64))
    xp = np.atleast_2d(np.asarray(x_perturbed, dtype=np.float64))
    if xc.shape != xp.shape:
        raise ValueError("clean and perturbed batches must have equal shapes")
    h0c = model.encode(xc)
    h0p = model.encode(xp)
    n = model.state_dim
    norms = []
    times = None
    for i in range(xc.shape[0]):
        path = (
            sample_brownian_path(stream.bump(i), model.grid, n)
            if model.diffusion.variant != "zero"
            else None
        )
        _, rec, rec_steps, overflow = _coupled_kernel(
            h0c[i], h0p[i], model.grid, path, model.drift, model.diffusion,
            record_every,
        )
        bad = overflow[overflow >= 0]
        if bad.size:
            keep = rec_steps <= int(bad.min())
            rec, rec_steps = rec[keep], rec_steps[keep]
        eps = rec[:, 1, :] - rec[:, 0, :]
        # finite pre-overflow states can exceed the norm's squaring range
        norms.append(_safe_l2(eps))
        if times is None or rec_steps.size < times.size:
            times = rec_steps.astype(np.float64) * model.grid.dt
    k = min(v.size for v in norms)
    mean_norm = np.mean([v[:k] for v in norms], axis=0)
    return times[:k], mean_norm
