"""Datasets: synthetic 2-D generators, IDX image ingestion, corruptions.

The corruption suite's severity parameters live in a versioned text asset
(assets/severity_table_v1.txt) so results files can echo the exact table
they were produced under.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import numpy as np
from scipy import ndimage

from .streams import RandomStream

__all__ = [
    "Dataset",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "CorruptionConfig",
    "CORRUPTION_KINDS",
    "make_two_moons",
    "make_spirals",
    "load_idx",
    "severity_table",
    "severity_table_version",
    "corruption_param",
    "corrupt",
]


@dataclass
class Dataset:
    """Feature matrix with integer labels and a split tag.

    feature_range is the valid clipping box for attacks/corruptions
    ((0, 1) for images); None means unconstrained synthetic features.
    """

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    feature_range: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be (n_samples, input_dim)")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be one integer per sample")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _check_even(n: int) -> int:
    if n < 2 or n % 2:
        raise ValueError(f"n must be an even count >= 2, got {n}")
    return n // 2


def make_two_moons(n: int, noise_sd: float, seed: int, split: str = "train") -> Dataset:
    """Two half-circle arcs of radius 1, the second offset by (1, -0.5).

    Class 0 is the upper arc (cos a, sin a), a in [0, pi]; class 1 is the
    reflected arc (1 - cos a, -0.5 - sin a). With zero jitter the classes
    are linearly separable (every class-0 point has y >= 0, every class-1
    point y <= -0.5, so the line y = -0.25 classifies perfectly).
    """
    per = _check_even(n)
    ang = np.linspace(0.0, np.pi, per)
    x0 = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    x1 = np.stack([1.0 - np.cos(ang), -0.5 - np.sin(ang)], axis=1)
    feats = np.concatenate([x0, x1])
    labels = np.concatenate([np.zeros(per, np.int64), np.ones(per, np.int64)])
    if noise_sd > 0:
        g = RandomStream(seed=seed).generator()
        feats = feats + g.normal(0.0, noise_sd, size=feats.shape)
    return Dataset(features=feats, labels=labels, split=split)


def make_spirals(
    n: int, turns: float, noise_sd: float, seed: int, split: str = "train"
) -> Dataset:
    """Two interleaved spirals r = t, theta = turns*2*pi*t + class*pi."""
    per = _check_even(n)
    t = np.linspace(0.0, 1.0, per)
    feats = np.empty((n, 2))
    labels = np.empty(n, dtype=np.int64)
    for cls in (0, 1):
        theta = turns * 2.0 * np.pi * t + cls * np.pi
        r = t
        feats[cls * per : (cls + 1) * per, 0] = r * np.cos(theta)
        feats[cls * per : (cls + 1) * per, 1] = r * np.sin(theta)
        labels[cls * per : (cls + 1) * per] = cls
    if noise_sd > 0:
        g = RandomStream(seed=seed).generator()
        feats = feats + g.normal(0.0, noise_sd, size=feats.shape)
    return Dataset(features=feats, labels=labels, split=split)


# ---------------------------------------------------------------------------
# IDX ingestion (big-endian; unsigned-byte payloads)
# ---------------------------------------------------------------------------

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxMagicError(ValueError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(ValueError):
    """File ends before the payload its header promises."""


class IdxCountMismatchError(ValueError):
    """Image file and label file disagree on the sample count."""


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxTruncatedError(f"{path}: truncated while reading {what}")
    return data


def _parse_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, path, "magic"))[0]
        if magic != IMAGES_MAGIC:
            raise IdxMagicError(
                f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, path, "sizes"))
        raw = _read_exact(fh, n * rows * cols, path, "pixel data")
        if fh.read(1):
            raise IdxTruncatedError(f"{path}: trailing bytes after pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float64) / 255.0


def _parse_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, path, "magic"))[0]
        if magic != LABELS_MAGIC:
            raise IdxMagicError(
                f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
            )
        n = struct.unpack(">I", _read_exact(fh, 4, path, "count"))[0]
        raw = _read_exact(fh, n, path, "label data")
        if fh.read(1):
            raise IdxTruncatedError(f"{path}: trailing bytes after label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an image/label IDX pair; pixels are scaled to [0, 1] by /255."""
    feats = _parse_idx_images(images_path)
    labels = _parse_idx_labels(labels_path)
    if feats.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{feats.shape[0]} images vs {labels.shape[0]} labels"
        )
    return Dataset(features=feats, labels=labels, split=split, feature_range=(0.0, 1.0))


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

CORRUPTION_KINDS = (
    "gaussian_noise",
    "impulse_noise",
    "blur",
    "contrast",
    "fog_like_additive",
)


@dataclass(frozen=True)
class CorruptionConfig:
    kind: str
    severity: int

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be 1..5, got {self.severity}")


def _load_severity_asset() -> tuple[int, dict[tuple[str, int], float]]:
    text = (
        resources.files("nsde").joinpath("assets/severity_table_v1.txt").read_text()
    )
    version = None
    table: dict[tuple[str, int], float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line == "kind,severity,param":
            continue
        if line.startswith("version="):
            version = int(line.split("=", 1)[1])
            continue
        kind, sev, param = line.split(",")
        table[(kind, int(sev))] = float(param)
    if version is None:
        raise ValueError("severity table asset lacks a version line")
    for kind in CORRUPTION_KINDS:
        params = [table[(kind, s)] for s in range(1, 6)]
        if not all(a < b for a, b in zip(params, params[1:])):
            raise ValueError(f"severity params for {kind} are not strictly increasing")
    return version, table


_SEVERITY_VERSION, _SEVERITY_TABLE = _load_severity_asset()


def severity_table() -> dict[tuple[str, int], float]:
    """Copy of the (kind, severity) -> magnitude table from the asset."""
    return dict(_SEVERITY_TABLE)


def severity_table_version() -> int:
    return _SEVERITY_VERSION


def corruption_param(kind: str, severity: int) -> float:
    return _SEVERITY_TABLE[(kind, int(severity))]


def _square_side(input_dim: int) -> int:
    side = int(round(input_dim ** 0.5))
    if side * side != input_dim:
        raise ValueError(f"blur needs square images, got input_dim={input_dim}")
    return side


def corrupt(dataset: Dataset, cfg: CorruptionConfig, seed: int) -> Dataset:
    """Apply one corruption kind at one severity, deterministically per seed."""
    param = corruption_param(cfg.kind, cfg.severity)
    x = dataset.features.copy()
    stream = RandomStream(seed=seed, stream_id=CORRUPTION_KINDS.index(cfg.kind) * 8 + cfg.severity)
    if cfg.kind == "gaussian_noise":
        x = x + stream.generator().normal(0.0, param, size=x.shape)
    elif cfg.kind == "impulse_noise":
        g = stream.generator()
        hit = g.random(x.shape) < param
        salt = g.random(x.shape) < 0.5
        x[hit & salt] = 1.0
        x[hit & ~salt] = 0.0
    elif cfg.kind == "blur":
        side = _square_side(dataset.input_dim)
        imgs = x.reshape(-1, side, side)
        x = ndimage.gaussian_filter(imgs, sigma=(0, param, param)).reshape(x.shape)
    elif cfg.kind == "contrast":
        mean = x.mean(axis=1, keepdims=True)
        x = mean + (1.0 - param) * (x - mean)
    else:  # fog_like_additive
        x = (1.0 - param) * x + param
    if dataset.feature_range is not None:
        lo, hi = dataset.feature_range
        x = np.clip(x, lo, hi)
    return Dataset(
        features=x,
        labels=dataset.labels.copy(),
        split=dataset.split,
        feature_range=dataset.feature_range,
    )
