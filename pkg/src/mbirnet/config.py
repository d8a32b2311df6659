"""Strict structured-text configuration.

Configs are YAML with an explicit schema version.  Unknown keys are errors,
not warnings: silent config drift is the main reproducibility hazard, so every
key must be declared below.
"""

from __future__ import annotations

from typing import Any, Optional

import yaml

from .imaging import CtGeometry, binomial_kernel, build_blur, build_radon, shepp_logan
from .linops import FeasibleSet
from .solver import MomentumNetConfig
from .training import RefinerArch, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration content."""


_REQUIRED = object()

_PROBLEM_KEYS = {
    "kind": (str, _REQUIRED),
    "n": (int, _REQUIRED),
    "n_views": (int, 23),
    "n_detectors": (int, None),
    "pitch": (float, None),
    "incident": (float, 1e5),
    "sigma2": (float, 25.0),
    "noiseless": (bool, False),
    "kernel_mix": (float, 0.3),
    "noise_sigma": (float, 0.0),
}

_SOLVER_KEYS = {
    "kind": (str, "momentum"),
    "n_iter": (int, 30),
    "rho": (float, 0.999),
    "delta": (float, 1.0 - 1e-9),
    "lam": (float, 1.0),
    "convex": (bool, True),
    "chi": (float, None),
    "gamma": (float, None),
    "inner_iters": (int, 10),
    "feasible": (str, "nonneg"),
    "box_lo": (float, 0.0),
    "box_hi": (float, 1.0),
}

_ARCH_KEYS = {
    "type": (str, "scnn"),
    "n_filters": (int, 25),
    "filter_size": (int, 25),
    "n_layers": (int, 2),
    "residual": (bool, True),
}

_TRAIN_KEYS = {
    "arch": (_ARCH_KEYS, None),
    "epochs": (int, 50),
    "batch_size": (int, 10),
    "lr_filters": (float, 1e-3),
    "lr_thresholds": (float, 1e-1),
    "lr_decay": (float, 0.1),
    "n_iter": (int, 10),
}

_SAMPLE_KEYS = {
    "truth": (str, _REQUIRED),
    "measurements": (str, _REQUIRED),
    "weights": (str, _REQUIRED),
    "operator": (str, _REQUIRED),
}

_CONFIG_KEYS = {
    "schema": (int, _REQUIRED),
    "seed": (int, 0),
    "problem": (_PROBLEM_KEYS, _REQUIRED),
    "solver": (_SOLVER_KEYS, {}),
    "train": (_TRAIN_KEYS, {}),
}

_MANIFEST_KEYS = {
    "schema": (int, _REQUIRED),
    "seed": (int, 0),
    "chi": (float, None),
    "gamma": (float, None),
    "solver": (_SOLVER_KEYS, {}),
    "train": (_TRAIN_KEYS, {}),
    "samples": (list, _REQUIRED),
}


def _coerce(value, expected, where: str):
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if expected is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    raise AssertionError(f"unhandled schema type {expected}")


def _validate(data: Any, keys: dict, where: str) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(data) - set(keys)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    out = {}
    for key, (expected, default) in keys.items():
        if key in data and data[key] is not None:
            value = data[key]
            if isinstance(expected, dict):
                out[key] = _validate(value, expected, f"{where}.{key}")
            else:
                out[key] = _coerce(value, expected, f"{where}.{key}")
        else:
            if default is _REQUIRED:
                raise ConfigError(f"{where}: missing required key {key!r}")
            if isinstance(expected, dict):
                out[key] = _validate(default or {}, expected, f"{where}.{key}")
            else:
                out[key] = default
    return out


def _load_yaml(path) -> Any:
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc


def _check_schema(cfg: dict, path):
    if cfg["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {cfg['schema']}")


def load_config(path) -> dict:
    """Load and validate a problem/solver config file."""
    cfg = _validate(_load_yaml(path), _CONFIG_KEYS, str(path))
    _check_schema(cfg, path)
    if cfg["problem"]["kind"] not in ("ct", "blur"):
        raise ConfigError(f"{path}: problem.kind must be 'ct' or 'blur'")
    return cfg


def load_training_manifest(path) -> dict:
    """Load and validate a training-set manifest; sample paths stay relative."""
    cfg = _validate(_load_yaml(path), _MANIFEST_KEYS, str(path))
    _check_schema(cfg, path)
    cfg["samples"] = [_validate(s, _SAMPLE_KEYS, f"{path}.samples[{i}]")
                      for i, s in enumerate(cfg["samples"])]
    if not cfg["samples"]:
        raise ConfigError(f"{path}: manifest lists no samples")
    return cfg


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_geometry(problem: dict) -> CtGeometry:
    try:
        return CtGeometry(problem["n"], problem["n_views"],
                          problem["n_detectors"], problem["pitch"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_feasible(solver: dict) -> FeasibleSet:
    kind = solver["feasible"]
    if kind == "all":
        return FeasibleSet.all()
    if kind == "nonneg":
        return FeasibleSet.nonneg()
    if kind == "box":
        return FeasibleSet.box(solver["box_lo"], solver["box_hi"])
    raise ConfigError(f"solver.feasible must be all|nonneg|box, got {kind!r}")


SOLVER_KINDS = ("momentum", "momentum-noextrap", "bcd")


def build_solver_config(solver: dict, n_iter: Optional[int] = None) -> MomentumNetConfig:
    kind = solver["kind"]
    if kind not in SOLVER_KINDS:
        raise ConfigError(f"unknown solver {kind!r}; valid choices: {', '.join(SOLVER_KINDS)}")
    chi, gamma = solver["chi"], solver["gamma"]
    if chi is None and gamma is None:
        chi = 30.0
    try:
        return MomentumNetConfig(
            n_iter=solver["n_iter"] if n_iter is None else n_iter,
            rho=solver["rho"],
            gamma=gamma,
            chi=chi,
            delta=solver["delta"],
            lam=solver["lam"],
            convex=solver["convex"],
            extrapolate=(kind != "momentum-noextrap"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_arch(train: dict) -> RefinerArch:
    arch = train["arch"]
    try:
        return RefinerArch(arch["type"], arch["n_filters"], arch["filter_size"],
                           arch["n_layers"], arch["residual"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(train: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(batch_size=train["batch_size"], epochs=train["epochs"],
                           lr_filters=train["lr_filters"],
                           lr_thresholds=train["lr_thresholds"],
                           lr_decay=train["lr_decay"], seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_operator(problem: dict):
    """Forward operator described by the problem block."""
    n = problem["n"]
    if problem["kind"] == "ct":
        return build_radon(build_geometry(problem))
    kernel = binomial_kernel(problem["kernel_mix"])
    return build_blur(kernel, (n, n))


def default_truth(problem: dict):
    return shepp_logan(problem["n"])
