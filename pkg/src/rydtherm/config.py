"""Run configuration: a flat ``section.key = value`` text format (or JSON).

Grammar, one entry per line::

    # comment
    geometry.N = 10
    physics.v12_override_MHz = 20      # trailing comments are allowed
    outputs.emit_cm2 = true

Keys are case-sensitive and must appear in :data:`SCHEMA`; a key may be
given once.  Values are parsed by the key's type; ``none`` clears an
optional value.  JSON input may be nested by section or use dotted keys.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

BACKENDS = ("ed", "lindblad", "mps")
OUT_ENV = "RYDTHERM_OUT"


class ConfigParseError(ValueError):
    pass


class ConfigValidationError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        pass
    val = float(text)
    if not val.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(val)


def _window(text: str) -> tuple[float, float]:
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"window needs two comma-separated numbers: {text!r}")
    return float(parts[0]), float(parts[1])


# key -> (parser, default, optional)
SCHEMA: dict[str, tuple] = {
    "geometry.N": (_int, 10, False),
    "geometry.d_um": (float, 4.0, False),
    "geometry.theta_deg": (float, 180.0, False),
    "physics.omega_MHz": (float, 1.0, False),
    "physics.delta_MHz": (float, 0.0, False),
    "physics.C6_GHz_um6": (float, 470.0, False),
    "physics.v12_override_MHz": (float, 20.0, True),
    "physics.interaction_range": (_int, None, True),
    "backend.kind": (str, "ed", False),
    "backend.method": (str, None, True),
    "backend.chi_max": (_int, 64, False),
    "backend.omega_dt": (float, 0.013, False),
    "backend.compress_tol": (float, 1e-10, False),
    "backend.max_step_us": (float, 0.01, False),
    "backend.shots": (_int, 1, False),
    "backend.seed": (_int, 0, False),
    "backend.gamma_kHz": (float, 0.0, False),
    "backend.gamma_c_kHz": (float, 0.0, False),
    "backend.omega0_MHz": (float, None, True),
    "backend.d_omega_MHz": (float, 0.0, False),
    "backend.delta0_MHz": (float, None, True),
    "backend.d_delta_MHz": (float, 0.0, False),
    "schedule.t_max_us": (float, 3.0, False),
    "schedule.dt_out_us": (float, 0.02, False),
    "schedule.t_relax_us": (float, None, True),
    "outputs.directory": (str, None, True),
    "outputs.emit_cm2": (_bool, False, False),
    "analysis.frequency": (_bool, False, False),
    "analysis.frequency_window_us": (_window, (0.0, 3.0), False),
    "analysis.eth": (_bool, False, False),
    "analysis.eth_site": (_int, None, True),
    "pipeline.t_early_us": (float, None, True),
    "pipeline.avg_width_us": (float, 1.0, False),
    "pipeline.restarts": (_int, 5, False),
    "pipeline.max_residual": (float, 0.2, False),
}


def _convert(key: str, raw):
    if key not in SCHEMA:
        raise ConfigParseError(f"unknown key {key!r}")
    parser, _, optional = SCHEMA[key]
    if raw is None or (isinstance(raw, str) and raw.strip().lower() == "none"):
        if not optional:
            raise ConfigParseError(f"{key} may not be none")
        return None
    if isinstance(raw, bool) and parser is not _bool:
        raise ConfigParseError(f"{key}: boolean given for a non-boolean key")
    try:
        if parser is _window and isinstance(raw, (list, tuple)):
            return _window(",".join(str(x) for x in raw))
        if parser is _bool and isinstance(raw, bool):
            return raw
        return parser(str(raw).strip() if parser is not str else str(raw).strip())
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"{key}: {exc}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: spec[1] for k, spec in SCHEMA.items()}
        for k, v in self.values.items():
            full[k] = _convert(k, v) if not _is_parsed(k, v) else v
        self.values = full

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, updates: dict) -> "RunConfig":
        """Copy with ``updates`` (dotted keys; text or typed values)."""
        vals = dict(self.values)
        vals.update(updates)
        return RunConfig(vals)

    def set_text(self, key: str, text: str) -> "RunConfig":
        vals = dict(self.values)
        vals[key] = _convert(key, text)
        return RunConfig(vals)

    # convenience accessors
    @property
    def N(self) -> int:
        return self["geometry.N"]

    @property
    def theta(self) -> float:
        return self["geometry.theta_deg"]

    @property
    def backend(self) -> str:
        return self["backend.kind"]

    def validate(self) -> "RunConfig":
        v = self.values
        errs = []

        def need(cond, msg):
            if not cond:
                errs.append(msg)

        need(v["backend.kind"] in BACKENDS, f"backend.kind must be one of {BACKENDS}")
        need(v["geometry.N"] >= 1, "geometry.N must be >= 1")
        cap = {"ed": 22, "lindblad": 10, "mps": 64}.get(v["backend.kind"], 22)
        need(v["geometry.N"] <= cap, f"geometry.N > {cap} not supported by backend {v['backend.kind']}")
        for key in ("geometry.d_um", "physics.C6_GHz_um6", "schedule.t_max_us", "schedule.dt_out_us",
                    "backend.omega_dt", "backend.max_step_us", "backend.compress_tol",
                    "pipeline.avg_width_us"):
            need(math.isfinite(v[key]) and v[key] > 0, f"{key} must be positive")
        need(0.0 < v["geometry.theta_deg"] <= 180.0, "geometry.theta_deg must be in (0, 180]")
        need(math.isfinite(v["physics.omega_MHz"]) and v["physics.omega_MHz"] >= 0,
             "physics.omega_MHz must be >= 0")
        need(math.isfinite(v["physics.delta_MHz"]), "physics.delta_MHz must be finite")
        if v["physics.v12_override_MHz"] is not None:
            need(v["physics.v12_override_MHz"] > 0, "physics.v12_override_MHz must be positive")
        if v["physics.interaction_range"] is not None:
            need(v["physics.interaction_range"] >= 1, "physics.interaction_range must be >= 1")
        need(v["schedule.dt_out_us"] <= v["schedule.t_max_us"], "schedule.dt_out_us exceeds t_max_us")
        if v["schedule.t_relax_us"] is not None:
            need(0 <= v["schedule.t_relax_us"] < v["schedule.t_max_us"],
                 "schedule.t_relax_us must lie in [0, t_max_us)")
        need(v["backend.chi_max"] >= 1, "backend.chi_max must be >= 1")
        need(v["backend.shots"] >= 1, "backend.shots must be >= 1")
        need(v["backend.seed"] >= 0, "backend.seed must be >= 0")
        for key in ("backend.gamma_kHz", "backend.gamma_c_kHz", "backend.d_omega_MHz",
                    "backend.d_delta_MHz"):
            need(v[key] >= 0, f"{key} must be >= 0")
        methods = {"ed": ("expm-krylov", "dense-eigen"), "lindblad": ("split", "krylov"), "mps": ("tebd",)}
        if v["backend.method"] is not None:
            need(v["backend.method"] in methods.get(v["backend.kind"], ()),
                 f"backend.method {v['backend.method']!r} invalid for {v['backend.kind']}")
        if v["backend.kind"] == "ed" and (v["backend.gamma_kHz"] or v["backend.gamma_c_kHz"]):
            errs.append("dephasing requires backend.kind = lindblad")
        w0, w1 = v["analysis.frequency_window_us"]
        need(0 <= w0 < w1, "analysis.frequency_window_us must be increasing")
        if v["analysis.eth_site"] is not None:
            need(0 <= v["analysis.eth_site"] < v["geometry.N"], "analysis.eth_site outside chain")
        if v["analysis.eth"]:
            need(v["geometry.N"] <= 14, "analysis.eth needs geometry.N <= 14 (full diagonalisation)")
        if v["outputs.emit_cm2"]:
            need(v["backend.kind"] == "ed" and v["geometry.N"] <= 25,
                 "outputs.emit_cm2 needs backend.kind = ed and geometry.N <= 25")
        need(v["pipeline.restarts"] >= 1, "pipeline.restarts must be >= 1")
        if v["pipeline.t_early_us"] is not None:
            need(v["pipeline.t_early_us"] > 0, "pipeline.t_early_us must be positive")
        if errs:
            raise ConfigValidationError("; ".join(errs))
        return self

    def to_flat(self) -> dict:
        out = {}
        for k, v in self.values.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def to_nested(self) -> dict:
        out: dict = {}
        for k, v in self.to_flat().items():
            sec, name = k.split(".", 1)
            out.setdefault(sec, {})[name] = v
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.values.items():
            if v is None:
                text = "none"
            elif isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, tuple):
                text = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{k} = {text}")
        return "\n".join(lines) + "\n"


def _is_parsed(key: str, value) -> bool:
    """True if ``value`` already has the schema's Python type."""
    if key not in SCHEMA:
        return False
    parser, _, optional = SCHEMA[key]
    if value is None:
        return optional
    if parser is _bool:
        return isinstance(value, bool)
    if parser is _int:
        return isinstance(value, int) and not isinstance(value, bool)
    if parser is float:
        return isinstance(value, float)
    if parser is _window:
        return isinstance(value, tuple)
    return isinstance(value, str) and parser is str


def parse_text(text: str) -> RunConfig:
    vals: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not key or "." not in key:
            raise ConfigParseError(f"line {lineno}: key must be 'section.name'")
        if key in vals:
            raise ConfigParseError(f"line {lineno}: duplicate key {key!r}")
        if raw == "":
            raise ConfigParseError(f"line {lineno}: empty value for {key!r}")
        vals[key] = _convert(key, raw)
    return RunConfig(vals)


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_json(text: str) -> RunConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigParseError("JSON config must be an object")
    return RunConfig({k: _convert(k, v) for k, v in _flatten(obj).items()})


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from None
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        return parse_json(text)
    return parse_text(text)


def resolve_out_dir(cfg: RunConfig, override: str | None = None) -> Path:
    """``--out-dir`` beats the config, which beats ``$RYDTHERM_OUT``, then ``./runs``."""
    if override:
        return Path(override)
    if cfg["outputs.directory"]:
        return Path(cfg["outputs.directory"])
    return Path(os.environ.get(OUT_ENV, "runs"))
