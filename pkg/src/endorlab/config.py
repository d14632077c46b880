"""Project configuration: YAML loading with unit-suffix validation.

Every numeric key carries its unit as a suffix (_mT, _GHz, _MHz, _K, _s,
_deg). A key whose stem matches an expected key but whose unit suffix
differs is rejected outright (a field magnitude given in _GHz is a config
bug, not a conversion request). Referenced data files must exist at load
time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .spincore import FieldVector, SpinSystem

__all__ = ["ProjectConfig", "load_config", "ConfigError"]

UNIT_SUFFIXES = ("_mT", "_GHz", "_MHz", "_K", "_s", "_deg")

# canonical keys per block; None marks optional entries
_BLOCK_KEYS = {
    "spin_system": {"label": False, "nuclear_spin": False, "g_matrix": True,
                    "a_matrix_mhz": False},
    "field": {"magnitude_mT": True, "theta_deg": False, "phi_deg": False},
    "spectrometer": {"f_mw_GHz": True, "window_min_mT": False, "window_max_mT": False,
                     "moment_threshold": False, "linewidth_mT": False,
                     "scan_grid_mT": False},
    "environment": {"temperature_K": False, "t1e_s": False, "t1n_s": False},
    "data": {},
}


class ConfigError(ValueError):
    pass


def _stem(key: str) -> str:
    for suf in UNIT_SUFFIXES:
        if key.endswith(suf):
            return key[: -len(suf)]
    return key


def _check_block(block_name: str, block: dict):
    if not isinstance(block, dict):
        raise ConfigError(f"block {block_name!r} must be a mapping")
    expected = _BLOCK_KEYS.get(block_name)
    if expected is None:
        raise ConfigError(f"unknown config block {block_name!r}")
    if block_name == "data":
        return
    stems = {_stem(k): k for k in expected}
    for key in block:
        if key in expected:
            continue
        st = _stem(key)
        if st in stems:
            raise ConfigError(
                f"{block_name}.{key}: wrong unit suffix, expected {stems[st]!r}")
        raise ConfigError(f"{block_name}.{key}: unknown key")
    for key, required in expected.items():
        if required and key not in block:
            raise ConfigError(f"{block_name}.{key}: required key missing")


@dataclass
class ProjectConfig:
    """Validated batch-run configuration."""

    system: SpinSystem
    field: FieldVector | None
    f_mw_GHz: float
    window_mT: tuple[float, float] | None
    moment_threshold: float | None
    linewidth_mT: float
    scan_grid_mT: float
    temperature_K: float | None
    t1e_s: float | None
    t1n_s: float | None
    data_paths: dict = field(default_factory=dict)
    path: Path | None = None
    raw: dict = field(default_factory=dict)


def load_config(path) -> ProjectConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    for name, block in raw.items():
        _check_block(name, block or {})
    if "spin_system" not in raw:
        raise ConfigError(f"{path}: missing spin_system block")

    ss = raw["spin_system"]
    g = np.asarray(ss["g_matrix"], dtype=float).reshape(3, 3)
    nuclear_spin = float(ss.get("nuclear_spin", 0.0))
    a = ss.get("a_matrix_mhz")
    if a is not None:
        a = np.asarray(a, dtype=float).reshape(3, 3)
    system = SpinSystem(g_tensor=g, a_tensor_mhz=a, nuclear_spin=nuclear_spin,
                        label=str(ss.get("label", "")))

    fb = raw.get("field") or {}
    fvec = None
    if "magnitude_mT" in fb:
        fvec = FieldVector(magnitude_mT=float(fb["magnitude_mT"]),
                           theta_deg=float(fb.get("theta_deg", 0.0)),
                           phi_deg=float(fb.get("phi_deg", 0.0)))

    sp = raw.get("spectrometer") or {}
    if "spectrometer" not in raw:
        raise ConfigError(f"{path}: missing spectrometer block")
    window = None
    if "window_min_mT" in sp or "window_max_mT" in sp:
        if not ("window_min_mT" in sp and "window_max_mT" in sp):
            raise ConfigError("spectrometer: window_min_mT and window_max_mT go together")
        window = (float(sp["window_min_mT"]), float(sp["window_max_mT"]))
        if window[0] >= window[1]:
            raise ConfigError("spectrometer: window_min_mT must be below window_max_mT")

    env = raw.get("environment") or {}

    data = {}
    for key, value in (raw.get("data") or {}).items():
        p = Path(value)
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise ConfigError(f"data.{key}: file not found: {p}")
        data[key] = p

    return ProjectConfig(
        system=system,
        field=fvec,
        f_mw_GHz=float(sp["f_mw_GHz"]),
        window_mT=window,
        moment_threshold=(float(sp["moment_threshold"]) if "moment_threshold" in sp else None),
        linewidth_mT=float(sp.get("linewidth_mT", 2.0)),
        scan_grid_mT=float(sp.get("scan_grid_mT", 0.2)),
        temperature_K=(float(env["temperature_K"]) if "temperature_K" in env else None),
        t1e_s=(float(env["t1e_s"]) if "t1e_s" in env else None),
        t1n_s=(float(env["t1n_s"]) if "t1n_s" in env else None),
        data_paths=data,
        path=path,
        raw=raw,
    )
