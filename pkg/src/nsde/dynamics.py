"""Parameterized drift and diffusion terms with analytic Jacobians.

The drift is a small dimension-preserving MLP: the current time is appended
to the state as one extra input feature (scaled into [0,1] by ``time_scale``)
and the flat parameter vector concatenates each layer's row-major weight
matrix followed by its bias. The diffusion is diagonal and comes in four
variants: zero (plain ODE), additive sigma*I, multiplicative sigma*diag(h),
and dropout sigma*diag(f) with sigma = sqrt((1-p)/p) for keep-probability p.

Jacobians are computed layer by layer (no autodiff) because the sensitivity
integration needs d(drift)/d(state) and d(drift)/d(params) at every step, and
the tests hold them to central finite differences at relative 1e-6.

Evaluation functions accept a single state ``(n,)`` or a batch ``(B, n)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .streams import RandomStream

__all__ = [
    "DriftNet",
    "LinearDrift",
    "DiffusionSpec",
    "DynamicsJacobians",
    "drift_eval",
    "drift_jacobians",
    "drift_vjp",
    "diffusion_eval",
    "diffusion_jacobians",
    "lipschitz_estimate",
    "params_to_bytes",
    "params_from_bytes",
    "save_params",
    "load_params",
    "save_params_text",
    "load_params_text",
]

_ACTIVATIONS = ("tanh", "relu")
_VARIANTS = ("zero", "additive", "multiplicative", "dropout")
_SCHEDULES = ("constant", "linear_decay")

PARAM_MAGIC = b"NSDE"
PARAM_VERSION = 1


def _as_batch(h: np.ndarray, n: int, name: str = "h") -> tuple[np.ndarray, bool]:
    """Coerce (n,) or (B, n) to (B, n); returns (array, was_single)."""
    arr = np.asarray(h, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
        single = True
    elif arr.ndim == 2:
        single = False
    else:
        raise ValueError(f"{name} must be 1- or 2-dimensional, got shape {arr.shape}")
    if arr.shape[1] != n:
        raise ValueError(f"{name} has dimension {arr.shape[1]}, expected {n}")
    return arr, single


@dataclass
class DriftNet:
    """Dimension-preserving MLP drift term.

    ``layer_dims`` runs input -> hidden... -> output where the input width is
    the state dimension plus one time feature and the output width equals the
    state dimension. Hidden layers apply the activation; the output layer is
    affine. ``params`` is the flat float64 vector (weights row-major, then
    bias, per layer).
    """

    layer_dims: tuple[int, ...]
    activation: str
    params: np.ndarray
    time_scale: float = 1.0

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must be >= 2 positive sizes, got {dims}")
        if dims[0] != dims[-1] + 1:
            raise ValueError(
                f"input width must be state_dim + 1 (time feature); got {dims}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if not np.isfinite(self.time_scale) or self.time_scale <= 0:
            raise ValueError(f"time_scale must be positive, got {self.time_scale}")
        self.layer_dims = dims
        p = np.ascontiguousarray(np.asarray(self.params, dtype=np.float64).ravel())
        if p.size != self.param_count:
            raise ValueError(
                f"params has {p.size} entries, layout needs {self.param_count}"
            )
        self.params = p

    @property
    def state_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))

    @classmethod
    def initialize(
        cls,
        state_dim: int,
        hidden_dims: tuple[int, ...],
        activation: str,
        stream: RandomStream,
        time_scale: float = 1.0,
    ) -> "DriftNet":
        """Gaussian init: weight sd = fan_in**-0.5, biases 0."""
        dims = (state_dim + 1, *hidden_dims, state_dim)
        rng = stream.generator()
        chunks = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            chunks.append(rng.normal(0.0, fan_in**-0.5, size=fan_out * fan_in))
            chunks.append(np.zeros(fan_out))
        return cls(dims, activation, np.concatenate(chunks), time_scale)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (no copies) of (weight, bias) per layer."""
        out = []
        offset = 0
        dims = self.layer_dims
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = self.params[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
            offset += fan_out * fan_in
            b = self.params[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def with_params(self, params: np.ndarray) -> "DriftNet":
        return DriftNet(self.layer_dims, self.activation, params, self.time_scale)


@dataclass
class LinearDrift:
    """Drift f(h) = matrix @ h with the matrix entries as parameters.

    The reference system for stability studies and analytic oracles;
    time-independent. param layout: row-major flattened matrix.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        self.matrix = m

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def param_count(self) -> int:
        return self.matrix.size

    @property
    def params(self) -> np.ndarray:
        return self.matrix.ravel()

    def with_params(self, params: np.ndarray) -> "LinearDrift":
        n = self.state_dim
        return LinearDrift(np.asarray(params, dtype=np.float64).reshape(n, n))


@dataclass(frozen=True)
class DiffusionSpec:
    """Diagonal diffusion coefficient g (the diagonal of G).

    variant zero: g = 0. additive: g = sigma*1. multiplicative: g = sigma*h.
    dropout: g = sigma*f(h,t) with sigma = sqrt((1-p)/p). sigma is constant by
    default; schedule "linear_decay" uses sigma*(1 - t/t_ref).
    """

    variant: str
    sigma: float = 0.0
    schedule: str = "constant"
    t_ref: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.schedule not in _SCHEDULES:
            raise ValueError(f"schedule must be one of {_SCHEDULES}")
        if self.schedule == "linear_decay" and self.t_ref <= 0:
            raise ValueError("linear_decay schedule needs t_ref > 0")
        if self.variant == "zero" and self.sigma != 0.0:
            raise ValueError("variant zero must have sigma = 0")

    @classmethod
    def from_keep_prob(cls, p: float, schedule: str = "constant", t_ref: float = 1.0) -> "DiffusionSpec":
        """Dropout variant for keep-probability p: sigma = sqrt((1-p)/p)."""
        if not 0.0 < p <= 1.0:
            raise ValueError(f"keep probability must be in (0, 1], got {p}")
        return cls("dropout", float(np.sqrt((1.0 - p) / p)), schedule, t_ref)

    @property
    def keep_prob(self) -> float:
        """Inverse of from_keep_prob (dropout variant only)."""
        if self.variant != "dropout":
            raise ValueError("keep_prob is defined for the dropout variant only")
        return 1.0 / (1.0 + self.sigma**2)

    def sigma_at(self, t: float) -> float:
        if self.schedule == "constant":
            return self.sigma
        return self.sigma * (1.0 - t / self.t_ref)


@dataclass
class DynamicsJacobians:
    """Derivatives of drift f and diagonal diffusion g at one (h, t).

    For a batch the leading axis is the batch. ``dg_dh``/``dg_dw`` hold the
    row-wise derivatives of the diagonal entries (row i is the gradient of
    g_i); they stay None until filled in by diffusion_jacobians.
    """

    f: np.ndarray        # (B, n)
    df_dh: np.ndarray    # (B, n, n)
    df_dw: np.ndarray    # (B, n, d)
    dg_dh: np.ndarray | None = None
    dg_dw: np.ndarray | None = None


def _mlp_forward(net: DriftNet, h: np.ndarray, t: float, keep: bool = False):
    """Forward pass; with keep=True also returns per-layer inputs and pre-activations."""
    tf = t / net.time_scale
    a = np.concatenate([h, np.full((h.shape[0], 1), tf)], axis=1)
    layer_list = net.layers()
    inputs, preacts = [], []
    for li, (w, b) in enumerate(layer_list):
        if keep:
            inputs.append(a)
        z = a @ w.T + b
        if li < len(layer_list) - 1:
            if keep:
                preacts.append(z)
            a = np.tanh(z) if net.activation == "tanh" else np.maximum(z, 0.0)
        else:
            a = z
    return (a, inputs, preacts) if keep else a


def _act_derivative(net: DriftNet, z: np.ndarray) -> np.ndarray:
    if net.activation == "tanh":
        return 1.0 - np.tanh(z) ** 2
    # relu subgradient at exactly 0 is taken as 0
    return (z > 0.0).astype(np.float64)


def drift_eval(drift, h: np.ndarray, t: float) -> np.ndarray:
    """Evaluate the drift at (h, t); deterministic, shape-preserving."""
    if isinstance(drift, LinearDrift):
        hb, single = _as_batch(h, drift.state_dim)
        f = hb @ drift.matrix.T
        return f[0] if single else f
    hb, single = _as_batch(h, drift.state_dim)
    f = _mlp_forward(drift, hb, t)
    return f[0] if single else f


def drift_jacobians(drift, h: np.ndarray, t: float) -> DynamicsJacobians:
    """Analytic df/dh and df/dw via the layer-wise chain rule."""
    if isinstance(drift, LinearDrift):
        hb, single = _as_batch(h, drift.state_dim)
        B, n = hb.shape
        f = hb @ drift.matrix.T
        df_dh = np.broadcast_to(drift.matrix, (B, n, n)).copy()
        # d(A h)_i / dA_jk = delta_ij h_k
        df_dw = np.zeros((B, n, n * n))
        for i in range(n):
            df_dw[:, i, i * n : (i + 1) * n] = hb
        if single:
            return DynamicsJacobians(f[0], df_dh[0], df_dw[0])
        return DynamicsJacobians(f, df_dh, df_dw)

    net: DriftNet = drift
    hb, single = _as_batch(h, net.state_dim)
    B, n = hb.shape
    f, inputs, preacts = _mlp_forward(net, hb, t, keep=True)
    layer_list = net.layers()
    # r = df/d(layer pre-activation), walked backwards from the output layer
    r = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    blocks: list[np.ndarray | None] = [None] * len(layer_list)
    for li in range(len(layer_list) - 1, -1, -1):
        w, _ = layer_list[li]
        a_in = inputs[li]
        dw = r[:, :, :, None] * a_in[:, None, None, :]
        blocks[li] = np.concatenate([dw.reshape(B, n, -1), r], axis=2)
        if li > 0:
            r = np.einsum("bno,oi->bni", r, w)
            r *= _act_derivative(net, preacts[li - 1])[:, None, :]
    df_dh = np.einsum("bno,oi->bni", r, layer_list[0][0])[:, :, :n]
    df_dw = np.concatenate(blocks, axis=2)
    if single:
        return DynamicsJacobians(f[0], df_dh[0], df_dw[0])
    return DynamicsJacobians(f, df_dh, df_dw)


def drift_vjp(drift, h: np.ndarray, t: float, cotangent: np.ndarray):
    """Vector-Jacobian products (u^T df_dh, u^T df_dw) without forming df_dw.

    Used by the unrolled-chain-rule reference gradient. Returns arrays of
    shape (B, n) and (B, d).
    """
    if isinstance(drift, LinearDrift):
        hb, _ = _as_batch(h, drift.state_dim)
        ub, _ = _as_batch(cotangent, drift.state_dim, "cotangent")
        ut_J = ub @ drift.matrix
        ut_P = (ub[:, :, None] * hb[:, None, :]).reshape(hb.shape[0], -1)
        return ut_J, ut_P

    net: DriftNet = drift
    hb, _ = _as_batch(h, net.state_dim)
    ub, _ = _as_batch(cotangent, net.state_dim, "cotangent")
    B, n = hb.shape
    _, inputs, preacts = _mlp_forward(net, hb, t, keep=True)
    layer_list = net.layers()
    grad_chunks: list[np.ndarray | None] = [None] * len(layer_list)
    lam = ub
    for li in range(len(layer_list) - 1, -1, -1):
        w, _ = layer_list[li]
        a_in = inputs[li]
        gw = lam[:, :, None] * a_in[:, None, :]
        grad_chunks[li] = np.concatenate([gw.reshape(B, -1), lam], axis=1)
        lam = lam @ w
        if li > 0:
            lam = lam * _act_derivative(net, preacts[li - 1])
    return lam[:, :n], np.concatenate(grad_chunks, axis=1)


def diffusion_eval(
    spec: DiffusionSpec, h: np.ndarray, t: float, f: np.ndarray | None = None
) -> np.ndarray:
    """Diagonal diffusion vector g at (h, t); dropout needs the drift value f."""
    hb = np.asarray(h, dtype=np.float64)
    s = spec.sigma_at(t)
    if spec.variant == "zero":
        return np.zeros_like(hb)
    if spec.variant == "additive":
        return np.full_like(hb, s)
    if spec.variant == "multiplicative":
        return s * hb
    if f is None:
        raise ValueError("dropout diffusion needs the drift value f")
    fb = np.asarray(f, dtype=np.float64)
    if fb.shape != hb.shape:
        raise ValueError(f"f shape {fb.shape} does not match h shape {hb.shape}")
    return s * fb


def diffusion_jacobians(
    spec: DiffusionSpec, h: np.ndarray, t: float, drift_jac: DynamicsJacobians
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise derivatives (dg_dh, dg_dw) of the diagonal diffusion entries."""
    dfh, dfw = drift_jac.df_dh, drift_jac.df_dw
    s = spec.sigma_at(t)
    if spec.variant == "dropout":
        return s * dfh, s * dfw
    dg_dh = np.zeros_like(dfh)
    dg_dw = np.zeros_like(dfw)
    if spec.variant == "multiplicative":
        eye = np.eye(dfh.shape[-1])
        dg_dh += s * eye  # broadcasts over a leading batch axis if present
    return dg_dh, dg_dw


def dynamics_jacobians(
    drift, spec: DiffusionSpec, h: np.ndarray, t: float
) -> DynamicsJacobians:
    """Drift and diffusion derivatives in one structure."""
    jac = drift_jacobians(drift, h, t)
    jac.dg_dh, jac.dg_dw = diffusion_jacobians(spec, h, t, jac)
    return jac


def lipschitz_estimate(
    drift, sample_states: np.ndarray, t_values=(0.0,), n_iterations: int = 50
) -> float:
    """Max spectral norm of df_dh over sampled states, by power iteration.

    A lower bound on the true Lipschitz constant of the drift in h (it only
    sees the sampled states). 50 iterations on J^T J per sample.
    """
    states = np.asarray(sample_states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if states.size == 0:
        raise ValueError("sample_states must be non-empty")
    best = 0.0
    for t in t_values:
        jac = drift_jacobians(drift, states, float(t))
        for j in jac.df_dh:
            best = max(best, _spectral_norm(j, n_iterations))
    return best


def _spectral_norm(j: np.ndarray, n_iterations: int) -> float:
    n = j.shape[1]
    v = np.ones(n) / np.sqrt(n)
    # deterministic tilt so a symmetric start cannot sit orthogonal to the top direction
    v += 1e-3 * np.cos(np.arange(1, n + 1))
    v /= np.linalg.norm(v)
    for _ in range(n_iterations):
        u = j.T @ (j @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        v = u / norm
    return float(np.linalg.norm(j @ v))


# ---------------------------------------------------------------------------
# parameter serialization: 16-byte header (magic, version, count) + raw f64
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQ")  # magic, version, parameter count


def params_to_bytes(params: np.ndarray) -> bytes:
    """Flat parameter vector as a little-endian blob (header + raw f64)."""
    vec = np.ascontiguousarray(np.asarray(params, dtype="<f8").ravel())
    return _HEADER.pack(PARAM_MAGIC, PARAM_VERSION, vec.size) + vec.tobytes()


def params_from_bytes(blob: bytes, where: str = "blob") -> np.ndarray:
    """Decode a parameter blob; validates magic, version, and length."""
    if len(blob) < _HEADER.size:
        raise ValueError(f"parameter blob too short for header: {where}")
    magic, version, count = _HEADER.unpack(blob[: _HEADER.size])
    if magic != PARAM_MAGIC:
        raise ValueError(f"bad parameter blob magic {magic!r} in {where}")
    if version != PARAM_VERSION:
        raise ValueError(f"unsupported parameter blob version {version}")
    data = blob[_HEADER.size :]
    expected = count * 8
    if len(data) != expected:
        raise ValueError(
            f"parameter blob length mismatch: header says {expected} bytes, got {len(data)}"
        )
    return np.frombuffer(data, dtype="<f8").astype(np.float64, copy=True)


def save_params(path, params: np.ndarray) -> None:
    """Write a flat parameter vector as a little-endian binary blob."""
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> np.ndarray:
    """Read a parameter blob; validates magic, version, and length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return params_from_bytes(blob, where=str(path))


def save_params_text(path, params: np.ndarray) -> None:
    """Debug format: one value per line, 17 significant digits."""
    vec = np.asarray(params, dtype=np.float64).ravel()
    with open(path, "w") as fh:
        for x in vec:
            fh.write(f"{x:.17g}\n")


def load_params_text(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([float(line) for line in fh if line.strip()], dtype=np.float64)
