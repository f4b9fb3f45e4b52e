"""Training loop, evaluation metrics, and the results file format.

Training keys all of its randomness off the caller's stream: with a base
stream of id B, epoch e shuffles with id B+1+2e and draws gradient paths
with id B+2+2e (counter advanced per batch row), so a whole run is a pure
function of the seed. Callers composing several consumers on one seed
should space their base ids far enough apart (the loop touches ids
B+1 .. B+2+2*epochs).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import CORRUPTION_KINDS, CorruptionConfig, Dataset, corrupt, corruption_param
from .model import (
    ClassifierModel,
    ModelGradients,
    PredictOptions,
    model_gradient,
    predict_ttn_batch,
)
from .solver import NumericOverflowError
from .streams import RandomStream

__all__ = [
    "OptimizerConfig",
    "TrainHistory",
    "TrainDivergenceError",
    "Metrics",
    "train",
    "evaluate",
    "evaluate_corruptions",
    "results_header",
    "write_results_csv",
    "severity_echo_rows",
]


class TrainDivergenceError(RuntimeError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, epoch: int):
        self.epoch = int(epoch)
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")


@dataclass(frozen=True)
class OptimizerConfig:
    """First-order optimizer settings.

    lr = 0 is allowed and leaves parameters untouched (useful as a control).
    """

    kind: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 64
    k_paths: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.k_paths < 1:
            raise ValueError("epochs, batch_size, k_paths must be >= 1")


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    dropped_rows: int = 0


@dataclass
class Metrics:
    accuracy_top1: float
    per_severity: Optional[dict[int, float]] = None
    m_acc: Optional[float] = None


_PARAM_GROUPS = ("enc_w", "enc_b", "drift_w", "head_w", "head_b")


def _model_params(model: ClassifierModel) -> dict[str, np.ndarray]:
    return {
        "enc_w": model.enc_w,
        "enc_b": model.enc_b,
        "drift_w": model.drift.params,
        "head_w": model.head_w,
        "head_b": model.head_b,
    }


def _grad_arrays(grads: ModelGradients) -> dict[str, np.ndarray]:
    return {
        "enc_w": grads.enc_w,
        "enc_b": grads.enc_b,
        "drift_w": grads.drift_w,
        "head_w": grads.head_w,
        "head_b": grads.head_b,
    }


def train(
    model: ClassifierModel,
    dataset: Dataset,
    opt: OptimizerConfig,
    stream: RandomStream,
) -> tuple[ClassifierModel, TrainHistory]:
    """Optimize the model in place on mean cross-entropy; returns history.

    Per-epoch accuracy is a single deterministic ensemble pass over the
    training set. A non-finite batch loss aborts with the epoch index.
    """
    if dataset.input_dim != model.input_dim:
        raise ValueError("dataset input_dim does not match the model")
    history = TrainHistory()
    params = _model_params(model)
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    adam_t = 0
    X, y = dataset.features, dataset.labels
    n = dataset.n_samples
    base = stream.stream_id
    for epoch in range(opt.epochs):
        order = stream.substream(base + 1 + 2 * epoch).generator().permutation(n)
        gstream = stream.substream(base + 2 + 2 * epoch)
        losses = []
        for b, lo in enumerate(range(0, n, opt.batch_size)):
            idx = order[lo : lo + opt.batch_size]
            # divergence is detected, not warned about: runaway parameters
            # legitimately push logits past the float range right before the
            # non-finite loss check (or an all-overflow batch) aborts the run
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    grads = model_gradient(
                        model, X[idx], y[idx], opt.k_paths,
                        gstream.bump(b * opt.batch_size * opt.k_paths),
                    )
                except NumericOverflowError as exc:
                    raise TrainDivergenceError(epoch) from exc
            history.dropped_rows += grads.dropped_rows
            if not math.isfinite(grads.loss_mean):
                raise TrainDivergenceError(epoch)
            losses.append(grads.loss_mean)
            garr = _grad_arrays(grads)
            if opt.kind == "sgd_momentum":
                for kname in _PARAM_GROUPS:
                    vel[kname] *= opt.momentum
                    vel[kname] += garr[kname]
                    params[kname] -= opt.lr * vel[kname]
            else:  # adam
                adam_t += 1
                bc1 = 1.0 - opt.beta1 ** adam_t
                bc2 = 1.0 - opt.beta2 ** adam_t
                for kname in _PARAM_GROUPS:
                    m1[kname] *= opt.beta1
                    m1[kname] += (1.0 - opt.beta1) * garr[kname]
                    m2[kname] *= opt.beta2
                    m2[kname] += (1.0 - opt.beta2) * garr[kname] ** 2
                    step = (m1[kname] / bc1) / (np.sqrt(m2[kname] / bc2) + opt.adam_eps)
                    params[kname] -= opt.lr * step
        epoch_loss = float(np.mean(losses))
        if not math.isfinite(epoch_loss):
            raise TrainDivergenceError(epoch)
        history.epoch_loss.append(epoch_loss)
        try:
            acc = evaluate(
                model, dataset,
                PredictOptions(stream.substream(base + 3 + 2 * opt.epochs + epoch), ttn_passes=1),
            ).accuracy_top1
        except NumericOverflowError as exc:
            # finite batch losses do not rule out parameters already past the
            # point of producing finite predictions
            raise TrainDivergenceError(epoch) from exc
        history.epoch_accuracy.append(acc)
    return model, history


def evaluate(
    model: ClassifierModel, dataset: Dataset, opts: PredictOptions
) -> Metrics:
    """Top-1 accuracy under ensembled prediction."""
    if dataset.n_samples == 0:
        raise ValueError("dataset is empty")
    pred = predict_ttn_batch(model, dataset.features, opts)
    acc = float(np.mean(pred.predicted_class == dataset.labels))
    return Metrics(accuracy_top1=acc)


def evaluate_corruptions(
    model: ClassifierModel,
    dataset: Dataset,
    opts: PredictOptions,
    seed: int,
    kinds: Sequence[str] = CORRUPTION_KINDS,
    severities: Sequence[int] = (1, 2, 3, 4, 5),
) -> tuple[Metrics, dict[tuple[str, int], float]]:
    """Accuracy across a corruption family.

    Returns overall metrics (per_severity averages over kinds; m_acc is the
    mean over every kind x severity cell) plus the full per-cell table.
    """
    cells: dict[tuple[str, int], float] = {}
    for kind in kinds:
        for sev in severities:
            corrupted = corrupt(dataset, CorruptionConfig(kind, sev), seed)
            cells[(kind, sev)] = evaluate(model, corrupted, opts).accuracy_top1
    per_sev = {
        sev: float(np.mean([cells[(k, sev)] for k in kinds])) for sev in severities
    }
    m_acc = float(np.mean(list(cells.values())))
    clean = evaluate(model, dataset, opts).accuracy_top1
    return Metrics(accuracy_top1=clean, per_severity=per_sev, m_acc=m_acc), cells


# ---------------------------------------------------------------------------
# results file format
# ---------------------------------------------------------------------------

RESULTS_COLUMNS = ("experiment", "dataset", "variant", "sigma", "seed", "metric", "value")


def results_header() -> str:
    return ",".join(RESULTS_COLUMNS)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_results_csv(
    rows: Sequence[tuple], dest: Union[str, Path, io.TextIOBase]
) -> None:
    """Rows are (experiment, dataset, variant, sigma, seed, metric, value)."""
    lines = [results_header()]
    for row in rows:
        if len(row) != len(RESULTS_COLUMNS):
            raise ValueError(f"results row needs {len(RESULTS_COLUMNS)} fields: {row!r}")
        lines.append(",".join(_fmt_value(v) for v in row))
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    else:
        dest.write(text)


def severity_echo_rows(
    experiment: str, dataset: str, variant: str, sigma: float, seed: int
) -> list[tuple]:
    """The severity parameter table as results rows (metric param:<kind>@<sev>).

    Emitted into every results file produced under the corruption suite so
    the file pins the exact table version it was measured against.
    """
    from .data import severity_table_version

    rows: list[tuple] = [
        (experiment, dataset, variant, sigma, seed, "severity_table_version",
         severity_table_version())
    ]
    for kind in CORRUPTION_KINDS:
        for sev in (1, 2, 3, 4, 5):
            rows.append(
                (experiment, dataset, variant, sigma, seed,
                 f"param:{kind}@{sev}", corruption_param(kind, sev))
            )
    return rows
