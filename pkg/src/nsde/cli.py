"""Command line front end: config-file experiments with reproducible outputs.

Usage: ``neural-sde-lab <command> --config <path> [--out <dir>] [--threads N]``.
Commands: run_toy, run_stability, run_gradcheck, run_train, run_attack,
run_corrupt, run_depthprobe. Each parses an INI-style config (``key = value``
under ``[section]`` headers), dispatches to the library, writes the command's
CSV outputs plus a ``manifest.json``, and exits 0. Exit code 2 flags a config
problem (unknown or missing key, bad value, unreadable file) with a message
naming the offender; exit code 1 flags a runtime failure, in which case the
manifest is still written with ``status: failed`` so partial outputs are never
left unexplained.

Every config carries ``[run] schema`` (must be "1") and ``[run] seed``; all
randomness in a run derives from that one seed through documented substream
offsets, so re-running a config reproduces every result file byte for byte
(the manifest differs only in its timestamps). The only environment knob is
``NSDE_OUT``, an output-directory fallback used when ``--out`` is absent;
experiment parameters never come from the environment.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .attacks import AttackConfig, depth_probe, pgd_attack
from .backend import backend_name
from .data import (
    CORRUPTION_KINDS,
    Dataset,
    make_spirals,
    make_two_moons,
    severity_table_version,
)
from .dynamics import DiffusionSpec, DriftNet, LinearDrift
from .model import ClassifierModel, PredictOptions, load_checkpoint, save_checkpoint
from .sensitivity import (
    fd_gradient_oracle,
    gradcheck_rows,
    gradcheck_to_csv,
    mc_gradient,
    quadratic_loss,
)
from .solver import SolveOptions, integrate
from .stability import lyapunov_exponent, stability_sweep, sweep_to_csv
from .streams import (
    RandomStream,
    make_time_grid,
    sample_brownian_increments,
    sample_brownian_path,
)
from .training import (
    OptimizerConfig,
    evaluate,
    evaluate_corruptions,
    severity_echo_rows,
    train,
    write_results_csv,
)

__all__ = ["main", "ConfigError", "load_config", "COMMANDS"]


class ConfigError(Exception):
    """Anything wrong with the experiment config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config schema and parsing
# ---------------------------------------------------------------------------

_REQUIRED = object()


def _parse_int(raw: str) -> int:
    return int(raw.strip())


def _parse_float(raw: str) -> float:
    val = float(raw.strip())
    if not np.isfinite(val):
        raise ValueError("must be finite")
    return val


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _parse_str(raw: str) -> str:
    return raw.strip()


def _parse_floats(raw: str) -> tuple[float, ...]:
    items = [p for p in (s.strip() for s in raw.split(",")) if p]
    if not items:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(_parse_float(p) for p in items)


def _parse_ints(raw: str) -> tuple[int, ...]:
    items = [p for p in (s.strip() for s in raw.split(",")) if p]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in items)


def _parse_strs(raw: str) -> tuple[str, ...]:
    items = [p for p in (s.strip() for s in raw.split(",")) if p]
    if not items:
        raise ValueError("expected a comma-separated list")
    return tuple(items)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        val = raw.strip()
        if val not in options:
            raise ValueError(f"expected one of {options}")
        return val

    return parse


def _parse_clip(raw: str) -> Optional[tuple[float, float]]:
    """Empty string means no clipping; otherwise 'lo, hi'."""
    if not raw.strip():
        return None
    parts = _parse_floats(raw)
    if len(parts) != 2 or parts[0] >= parts[1]:
        raise ValueError("expected 'lo, hi' with lo < hi, or empty for none")
    return (parts[0], parts[1])


_RUN_SECTION = {
    "schema": (_parse_str, _REQUIRED),
    "seed": (_parse_int, _REQUIRED),
}

_DATA_SECTION = {
    "dataset": (_choice("two_moons", "spirals"), "two_moons"),
    "n_train": (_parse_int, 2000),
    "n_test": (_parse_int, 1000),
    "noise_sd": (_parse_float, 0.2),
    "turns": (_parse_float, 2.0),
    # Test split seed = run seed + this offset; large so sweeping the run
    # seed over small integers never aliases one run's test set to
    # another's train set.
    "test_seed_offset": (_parse_int, 1_000_003),
}

_EVAL_DATA_KEYS = {
    "dataset": (_choice("two_moons", "spirals"), "two_moons"),
    "n_samples": (_parse_int, 1000),
    "noise_sd": (_parse_float, 0.2),
    "turns": (_parse_float, 2.0),
    "data_seed_offset": (_parse_int, 1_000_003),
}

SCHEMAS: dict[str, dict[str, dict[str, tuple]]] = {
    "run_toy": {
        "run": _RUN_SECTION,
        "toy": {
            "x0": (_parse_float, 1.0),
            "drift_rate": (_parse_float, 1.0),
            "sigmas": (_parse_floats, (0.0, 2.8)),
            "t_end": (_parse_float, 10.0),
            "n_steps": (_parse_int, 10_000),
            "n_paths": (_parse_int, 64),
            "record_every": (_parse_int, 10),
        },
    },
    "run_stability": {
        "run": _RUN_SECTION,
        "stability": {
            "drift_rate": (_parse_float, 1.0),
            "variant": (_choice("additive", "multiplicative", "dropout"), "multiplicative"),
            "sigmas": (_parse_floats, (0.0, 0.5, 1.0, 1.25, 1.5, 2.0, 2.8)),
            "x0": (_parse_floats, (1.0,)),
            "eps0": (_parse_floats, (1e-3,)),
            "t_end": (_parse_float, 10.0),
            "n_steps": (_parse_int, 10_000),
            "n_paths": (_parse_int, 64),
            "lipschitz": (_parse_float, 1.0),
        },
    },
    "run_gradcheck": {
        "run": _RUN_SECTION,
        "gradcheck": {
            "variants": (_parse_strs, ("zero", "additive", "multiplicative", "dropout")),
            "sigma": (_parse_float, 0.3),
            "state_dim": (_parse_int, 4),
            "hidden_dims": (_parse_ints, (8,)),
            "activation": (_choice("tanh", "relu"), "tanh"),
            "time_scale": (_parse_float, 1.0),
            "n_states": (_parse_int, 4),
            "t_end": (_parse_float, 1.0),
            "n_steps": (_parse_int, 100),
            "k_paths": (_parse_int, 256),
            "delta": (_parse_float, 1e-4),
            "n_coords": (_parse_int, 20),
        },
    },
    "run_train": {
        "run": _RUN_SECTION,
        "data": _DATA_SECTION,
        "model": {
            "state_dim": (_parse_int, 16),
            "hidden_dims": (_parse_ints, (24,)),
            "activation": (_choice("tanh", "relu"), "tanh"),
            "time_scale": (_parse_float, 1.0),
            "variant": (_choice("zero", "additive", "multiplicative", "dropout"), "dropout"),
            "sigma": (_parse_float, 1.0),
            "sigma_schedule": (_choice("constant", "linear_decay"), "constant"),
            "sched_t_ref": (_parse_float, 1.0),
            "t_end": (_parse_float, 1.0),
            "n_steps": (_parse_int, 100),
        },
        "optimizer": {
            "kind": (_choice("sgd_momentum", "adam"), "sgd_momentum"),
            "lr": (_parse_float, 0.05),
            "momentum": (_parse_float, 0.9),
            "beta1": (_parse_float, 0.9),
            "beta2": (_parse_float, 0.999),
            "adam_eps": (_parse_float, 1e-8),
            "epochs": (_parse_int, 200),
            "batch_size": (_parse_int, 64),
            "k_paths": (_parse_int, 4),
        },
        "eval": {
            "ttn_passes": (_parse_int, 10),
        },
    },
    "run_attack": {
        "run": _RUN_SECTION,
        "attack": {
            "checkpoint": (_parse_str, _REQUIRED),
            **_EVAL_DATA_KEYS,
            "norm": (_choice("linf", "l2"), "l2"),
            "epsilons": (_parse_floats, (0.0, 0.1, 0.2, 0.3, 0.4)),
            "steps": (_parse_int, 20),
            "step_size": (_parse_float, 0.05),
            "grad_paths": (_parse_int, 8),
            "clip_range": (_parse_clip, None),
            "ttn_passes": (_parse_int, 10),
        },
    },
    "run_corrupt": {
        "run": _RUN_SECTION,
        "corrupt": {
            "checkpoint": (_parse_str, _REQUIRED),
            **_EVAL_DATA_KEYS,
            "kinds": (_parse_strs, CORRUPTION_KINDS),
            "severities": (_parse_ints, (1, 2, 3, 4, 5)),
            "ttn_passes": (_parse_int, 10),
        },
    },
    "run_depthprobe": {
        "run": _RUN_SECTION,
        "depthprobe": {
            "checkpoint": (_parse_str, _REQUIRED),
            **_EVAL_DATA_KEYS,
            "norm": (_choice("linf", "l2"), "l2"),
            "epsilon": (_parse_float, 0.3),
            "steps": (_parse_int, 20),
            "step_size": (_parse_float, 0.05),
            "grad_paths": (_parse_int, 8),
            "record_every": (_parse_int, 1),
        },
    },
}

COMMANDS = tuple(SCHEMAS)

_SCHEMA_VERSION = "1"


def load_config(path: Path, command: str) -> dict[str, dict]:
    """Parse and validate one config file against the command's schema.

    Returns {section: {key: parsed value}} with defaults filled in. Any
    unknown section or key, missing required key, or unparsable value
    raises ConfigError naming it.
    """
    schema = SCHEMAS[command]
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    if parser.defaults():
        key = next(iter(parser.defaults()))
        raise ConfigError(f"unknown key '{key}' outside any known section")

    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key in parser[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    out: dict[str, dict] = {}
    for section, keys in schema.items():
        out[section] = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    out[section][key] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"invalid value for key '{key}' in section [{section}]: {exc}"
                    ) from exc
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key '{key}' in section [{section}]")
            else:
                out[section][key] = default

    if out["run"]["schema"] != _SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported value for key 'schema': {out['run']['schema']!r}"
            f" (this build reads schema {_SCHEMA_VERSION})"
        )
    return out


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Sidecar record of one run; written atomically as manifest.json.

    Result files are byte-reproducible from the echoed config; the two
    timestamps are the only fields expected to differ between reruns.
    """

    command: str
    config_path: str
    config_text: str
    config: dict
    versions: dict
    started_at: str
    finished_at: str = ""
    status: str = "running"
    outputs: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    error: Optional[str] = None
    thread_cap: Optional[int] = None


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _output_entry(out_dir: Path, path: Path) -> dict:
    data = path.read_bytes()
    return {
        "name": str(path.relative_to(out_dir)),
        "bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    """Serialize to manifest.json via a temp file and atomic rename."""
    dest = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    payload = json.dumps(manifest.__dict__, indent=2, sort_keys=True) + "\n"
    tmp.write_text(payload)
    os.replace(tmp, dest)
    return dest


# ---------------------------------------------------------------------------
# shared run helpers
# ---------------------------------------------------------------------------

# Substream offset convention for CLI runs. Library calls consume ids
# near their own base (training touches base+1 .. base+2+3*epochs), so
# phases are spaced far apart and never collide.
_SUB_INIT = 500_000
_SUB_TRAIN = 600_000
_SUB_EVAL = 700_000
_SUB_ATTACK = 800_000
_SUB_PROBE = 900_000


@dataclass
class RunResult:
    outputs: list[Path]
    counters: dict[str, int] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)


def _write_csv(path: Path, header: str, rows: Sequence[Sequence]) -> None:
    lines = [header]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(f"{v:.17g}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def _eval_dataset(cfg: dict, seed: int) -> Dataset:
    """Held-out split shared by the attack/corrupt/depthprobe commands."""
    kind = cfg["dataset"]
    data_seed = seed + cfg["data_seed_offset"]
    if kind == "two_moons":
        return make_two_moons(cfg["n_samples"], cfg["noise_sd"], data_seed, split="test")
    return make_spirals(
        cfg["n_samples"], cfg["turns"], cfg["noise_sd"], data_seed, split="test"
    )


def _resolve_checkpoint(raw: str, config_path: Path) -> Path:
    """Checkpoint paths are taken relative to the config file's directory."""
    p = Path(raw)
    if not p.is_absolute():
        p = (config_path.parent / p).resolve()
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _run_toy(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Linear-drift demonstration: one mean-trajectory CSV per noise level.

    State x follows dx = rate*x dt + sigma*x dB from x0. The exponent for
    each sigma is estimated with the perturbation-ensemble machinery seeded
    identically to the emitted trajectories: a twin pair started at 0 and
    x0 leaves the difference equal to the x trajectory itself, because 0 is
    a fixed point of both the drift and the state-proportional noise.
    """
    c = cfg["toy"]
    if c["x0"] == 0.0:
        raise ConfigError("invalid value for key 'x0' in section [toy]: must be non-zero")
    if c["n_paths"] < 2:
        raise ConfigError("invalid value for key 'n_paths' in section [toy]: need >= 2")
    grid = make_time_grid(c["t_end"], c["n_steps"])
    drift = LinearDrift(np.array([[c["drift_rate"]]]))
    opts = SolveOptions.every_k(c["record_every"])
    outputs: list[Path] = []
    summary_rows = []
    overflow_total = 0

    for i, sigma in enumerate(c["sigmas"]):
        sub = stream.substream(i)
        spec = (
            DiffusionSpec("zero")
            if sigma == 0.0
            else DiffusionSpec("multiplicative", sigma)
        )
        est = lyapunov_exponent(
            drift, spec, np.array([0.0]), np.array([c["x0"]]), grid,
            c["n_paths"], sub,
        )
        overflow_total += round(est.overflow_fraction * c["n_paths"])

        # Same path keying as the estimator: path i rides sub.bump(i).
        states = []
        times = None
        for p in range(c["n_paths"]):
            path = (
                sample_brownian_path(sub.bump(p), grid, 1)
                if spec.variant != "zero"
                else None
            )
            traj = integrate(np.array([c["x0"]]), grid, path, drift, spec, opts)
            states.append(traj.states[:, 0])
            times = traj.times
        mat = np.abs(np.stack(states))
        mean_abs = mat.mean(axis=0)
        with np.errstate(divide="ignore"):
            mean_log = np.log(mat).mean(axis=0)
        tag = f"{sigma:g}"
        dest = out / f"toy_sigma_{tag}.csv"
        _write_csv(
            dest,
            "t,mean_abs_state,mean_log_abs_state",
            list(zip(times, mean_abs, mean_log)),
        )
        outputs.append(dest)
        summary_rows.append(
            (sigma, est.lambda_hat, est.stderr, float(mean_abs[-1]), est.overflow_fraction)
        )

    dest = out / "toy_summary.csv"
    _write_csv(
        dest, "sigma,exponent,stderr,final_mean_abs,overflow_fraction", summary_rows
    )
    outputs.append(dest)
    return RunResult(outputs, {"overflowed_paths": overflow_total})


def _run_stability(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Exponent-vs-sigma sweep with the certificate bound, one CSV."""
    c = cfg["stability"]
    h0 = np.array(c["x0"])
    eps0 = np.array(c["eps0"])
    if h0.shape != eps0.shape:
        raise ConfigError(
            "invalid value for key 'eps0' in section [stability]:"
            " must have the same length as x0"
        )
    grid = make_time_grid(c["t_end"], c["n_steps"])
    drift = LinearDrift(c["drift_rate"] * np.eye(h0.shape[0]))
    rows = stability_sweep(
        drift, c["sigmas"], h0, eps0, grid, c["n_paths"], stream,
        variant=c["variant"], lipschitz=c["lipschitz"],
    )
    dest = out / "stability_sweep.csv"
    sweep_to_csv(rows, dest)
    overflowed = round(sum(r.overflow_fraction for r in rows) * c["n_paths"])
    return RunResult([dest], {"overflowed_paths": overflowed})


def _run_gradcheck(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Pathwise-vs-finite-difference report per requested noise variant.

    The oracle reuses the estimator's exact increment array (common random
    numbers), so the difference measures discretization and estimator
    consistency rather than Monte Carlo noise.
    """
    c = cfg["gradcheck"]
    for v in c["variants"]:
        if v not in ("zero", "additive", "multiplicative", "dropout"):
            raise ConfigError(
                f"invalid value for key 'variants' in section [gradcheck]:"
                f" unknown variant {v!r}"
            )
    grid = make_time_grid(c["t_end"], c["n_steps"])
    drift = DriftNet.initialize(
        c["state_dim"], tuple(c["hidden_dims"]), c["activation"],
        stream.substream(0), c["time_scale"],
    )
    g_states = stream.substream(1).generator()
    h0 = g_states.normal(0.0, 1.0, size=(c["n_states"], c["state_dim"]))
    d = drift.param_count
    n_coords = min(c["n_coords"], d)
    coords = np.sort(
        stream.substream(2).generator().choice(d, size=n_coords, replace=False)
    )

    outputs: list[Path] = []
    summary = []
    for vi, variant in enumerate(c["variants"]):
        spec = (
            DiffusionSpec("zero")
            if variant == "zero"
            else DiffusionSpec(variant, c["sigma"])
        )
        sub = stream.substream(10 + vi)
        est = mc_gradient(drift, spec, quadratic_loss, h0, grid, c["k_paths"], sub)
        if spec.variant != "zero":
            dW = sample_brownian_increments(
                sub, grid, c["state_dim"], h0.shape[0] * c["k_paths"]
            )
        else:
            dW = None
        rows_h0 = np.repeat(h0, c["k_paths"], axis=0)
        fd = fd_gradient_oracle(
            drift, spec, quadratic_loss, rows_h0, grid, dW, c["delta"], coords
        )
        rows = gradcheck_rows(coords, est.grad_w, fd)
        dest = out / f"gradcheck_{variant}.csv"
        gradcheck_to_csv(rows, dest)
        outputs.append(dest)
        summary.append((variant, max(r[3] for r in rows), n_coords))

    dest = out / "gradcheck_summary.csv"
    _write_csv(dest, "variant,max_rel_err,n_coords", summary)
    outputs.append(dest)
    return RunResult(outputs)


def _run_train(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Fit a classifier; emit checkpoint, per-epoch history, and results."""
    dc, mc, oc = cfg["data"], cfg["model"], cfg["optimizer"]
    seed = cfg["run"]["seed"]
    if mc["variant"] == "zero" and mc["sigma"] != 0.0:
        raise ConfigError(
            "invalid value for key 'sigma' in section [model]:"
            " variant zero requires sigma = 0"
        )
    if dc["dataset"] == "two_moons":
        train_ds = make_two_moons(dc["n_train"], dc["noise_sd"], seed, split="train")
        test_ds = make_two_moons(
            dc["n_test"], dc["noise_sd"], seed + dc["test_seed_offset"], split="test"
        )
    else:
        train_ds = make_spirals(
            dc["n_train"], dc["turns"], dc["noise_sd"], seed, split="train"
        )
        test_ds = make_spirals(
            dc["n_test"], dc["turns"], dc["noise_sd"],
            seed + dc["test_seed_offset"], split="test",
        )

    diffusion = DiffusionSpec(
        mc["variant"],
        0.0 if mc["variant"] == "zero" else mc["sigma"],
        mc["sigma_schedule"],
        mc["sched_t_ref"],
    )
    grid = make_time_grid(mc["t_end"], mc["n_steps"])
    model = ClassifierModel.initialize(
        input_dim=train_ds.input_dim,
        state_dim=mc["state_dim"],
        n_classes=train_ds.n_classes,
        hidden_dims=tuple(mc["hidden_dims"]),
        activation=mc["activation"],
        diffusion=diffusion,
        grid=grid,
        stream=stream.substream(_SUB_INIT),
        time_scale=mc["time_scale"],
    )
    opt = OptimizerConfig(
        kind=oc["kind"], lr=oc["lr"], momentum=oc["momentum"],
        beta1=oc["beta1"], beta2=oc["beta2"], adam_eps=oc["adam_eps"],
        epochs=oc["epochs"], batch_size=oc["batch_size"], k_paths=oc["k_paths"],
    )
    model, history = train(model, train_ds, opt, stream.substream(_SUB_TRAIN))

    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt)
    hist_csv = out / "history.csv"
    _write_csv(
        hist_csv,
        "epoch,loss,accuracy",
        [(e, l, a) for e, (l, a) in
         enumerate(zip(history.epoch_loss, history.epoch_accuracy))],
    )

    ttn = cfg["eval"]["ttn_passes"]
    test_metrics = evaluate(model, test_ds, PredictOptions(stream.substream(_SUB_EVAL), ttn))
    results = out / "results.csv"
    name, variant, sigma = dc["dataset"], mc["variant"], diffusion.sigma
    write_results_csv(
        [
            ("train", name, variant, sigma, seed, "train_accuracy_final",
             history.epoch_accuracy[-1]),
            ("train", name, variant, sigma, seed, "test_accuracy", test_metrics.accuracy_top1),
            ("train", name, variant, sigma, seed, "ttn_passes", ttn),
        ],
        results,
    )
    sidecar = Path(str(ckpt) + ".json")
    return RunResult(
        [ckpt, sidecar, hist_csv, results],
        {"dropped_gradient_rows": history.dropped_rows},
    )


def _run_attack(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Accuracy-vs-epsilon robustness curve for a trained checkpoint.

    One fixed evaluation stream scores every point of the curve, so the
    epsilon = 0 row reproduces the clean accuracy exactly.
    """
    c = cfg["attack"]
    model = load_checkpoint(_resolve_checkpoint(c["checkpoint"], config_path))
    ds = _eval_dataset(c, cfg["run"]["seed"])
    eval_opts = PredictOptions(stream.substream(_SUB_EVAL), c["ttn_passes"])

    rows = []
    skipped_total = 0
    for j, eps in enumerate(c["epsilons"]):
        attack_cfg = AttackConfig(
            norm=c["norm"], epsilon=eps, steps=c["steps"],
            step_size=c["step_size"], grad_paths=c["grad_paths"],
        )
        result = pgd_attack(
            model, ds.features, ds.labels, attack_cfg,
            stream.substream(_SUB_ATTACK + 100 * j), clip_range=c["clip_range"],
        )
        skipped_total += result.skipped_steps
        adv = Dataset(result.x_adv, ds.labels, split="test",
                      feature_range=ds.feature_range)
        acc = evaluate(model, adv, eval_opts).accuracy_top1
        rows.append((eps, acc))

    dest = out / "robustness.csv"
    _write_csv(dest, "epsilon,accuracy", rows)
    return RunResult([dest], {"skipped_attack_steps": skipped_total})


def _run_corrupt(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Per-severity corruption table for a trained checkpoint."""
    c = cfg["corrupt"]
    for kind in c["kinds"]:
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(
                f"invalid value for key 'kinds' in section [corrupt]:"
                f" unknown kind {kind!r}"
            )
    for sev in c["severities"]:
        if not 1 <= sev <= 5:
            raise ConfigError(
                "invalid value for key 'severities' in section [corrupt]:"
                " severities are 1..5"
            )
    model = load_checkpoint(_resolve_checkpoint(c["checkpoint"], config_path))
    ds = _eval_dataset(c, cfg["run"]["seed"])
    opts = PredictOptions(stream.substream(_SUB_EVAL), c["ttn_passes"])
    seed = cfg["run"]["seed"]
    metrics, cells = evaluate_corruptions(
        model, ds, opts, seed, kinds=c["kinds"], severities=c["severities"]
    )

    name = c["dataset"]
    variant, sigma = model.diffusion.variant, model.diffusion.sigma
    rows: list[tuple] = [
        ("corrupt", name, variant, sigma, seed, "clean_accuracy", metrics.accuracy_top1)
    ]
    for (kind, sev), acc in cells.items():
        rows.append(("corrupt", name, variant, sigma, seed, f"accuracy:{kind}@{sev}", acc))
    for sev, acc in metrics.per_severity.items():
        rows.append(("corrupt", name, variant, sigma, seed, f"accuracy@severity={sev}", acc))
    rows.append(("corrupt", name, variant, sigma, seed, "mean_corruption_accuracy", metrics.m_acc))
    rows.extend(severity_echo_rows("corrupt", name, variant, sigma, seed))
    dest = out / "results.csv"
    write_results_csv(rows, dest)

    # Ship the exact parameter table next to the measurements it produced.
    table = resources.files("nsde.assets").joinpath("severity_table_v1.txt").read_bytes()
    table_copy = out / "severity_table_v1.txt"
    table_copy.write_bytes(table)

    return RunResult(
        [dest, table_copy],
        versions={"severity_table": str(severity_table_version())},
    )


def _run_depthprobe(cfg: dict, out: Path, stream: RandomStream, config_path: Path) -> RunResult:
    """Mean state-difference norm along depth for PGD-perturbed inputs."""
    c = cfg["depthprobe"]
    model = load_checkpoint(_resolve_checkpoint(c["checkpoint"], config_path))
    ds = _eval_dataset(c, cfg["run"]["seed"])
    attack_cfg = AttackConfig(
        norm=c["norm"], epsilon=c["epsilon"], steps=c["steps"],
        step_size=c["step_size"], grad_paths=c["grad_paths"],
    )
    result = pgd_attack(
        model, ds.features, ds.labels, attack_cfg, stream.substream(_SUB_ATTACK)
    )
    times, norms = depth_probe(
        model, ds.features, result.x_adv, stream.substream(_SUB_PROBE),
        record_every=c["record_every"],
    )
    dest = out / "depth_probe.csv"
    _write_csv(dest, "t,mean_eps_norm", list(zip(times, norms)))
    return RunResult(
        [dest],
        {
            "skipped_attack_steps": result.skipped_steps,
            "probe_steps_recorded": len(times),
        },
    )


_RUNNERS = {
    "run_toy": _run_toy,
    "run_stability": _run_stability,
    "run_gradcheck": _run_gradcheck,
    "run_train": _run_train,
    "run_attack": _run_attack,
    "run_corrupt": _run_corrupt,
    "run_depthprobe": _run_depthprobe,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _apply_thread_cap(n: int) -> None:
    """Cap BLAS/OpenMP worker pools; results do not depend on the cap."""
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _resolve_out_dir(cli_out: Optional[str], command: str) -> Path:
    if cli_out:
        return Path(cli_out)
    env = os.environ.get("NSDE_OUT")
    if env:
        return Path(env)
    return Path("runs") / command


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="neural-sde-lab",
        description="Config-driven experiments; see README for the config schema.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} experiment")
        p.add_argument("--config", required=True, help="path to the INI config file")
        p.add_argument("--out", default=None, help="output directory (default runs/<command>; NSDE_OUT overrides the default)")
        p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    args = parser.parse_args(argv)

    if args.threads is not None:
        if args.threads < 1:
            print("config error: --threads must be >= 1", file=sys.stderr)
            return 2
        _apply_thread_cap(args.threads)

    config_path = Path(args.config)
    try:
        cfg = load_config(config_path, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = _resolve_out_dir(args.out, args.command)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(
        command=args.command,
        config_path=str(config_path),
        config_text=config_path.read_text(),
        config=cfg,
        versions={"package": __version__, "backend": backend_name(), "schema": _SCHEMA_VERSION},
        started_at=_utc_now(),
        thread_cap=args.threads,
    )
    stream = RandomStream(cfg["run"]["seed"])
    try:
        result = _RUNNERS[args.command](cfg, out_dir, stream, config_path)
    except ConfigError as exc:
        # Cross-field checks surface after parsing; still a config problem.
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: flag, record, exit 1
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.finished_at = _utc_now()
        write_manifest(manifest, out_dir)
        print(f"runtime failure: {manifest.error}", file=sys.stderr)
        return 1

    manifest.status = "complete"
    manifest.outputs = [_output_entry(out_dir, p) for p in result.outputs]
    manifest.counters = result.counters
    manifest.versions.update(result.versions)
    manifest.finished_at = _utc_now()
    write_manifest(manifest, out_dir)
    for entry in manifest.outputs:
        print(f"wrote {out_dir / entry['name']}")
    print(f"wrote {out_dir / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
