"""Run configuration: YAML file -> validated RunConfig."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .dynamics import SCHEMES
from .measures import InitialPressure, SHEAR_PROFILES, make_pressure, parse_scenario
from .ot import MIN_TOL

SCENARIOS = ("zero", "sine", "shear", "grid-file")
VERIFY_KEYS = ("orlicz", "weak", "flow", "appendix")


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and, when known, the line."""


@dataclass(frozen=True)
class VerifyToggles:
    orlicz: bool = True
    weak: bool = False
    flow: bool = False
    appendix: bool = True


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    N: int
    T: float
    epsilon: float = 0.01
    profile: str = "cos1"
    path: str | None = None
    dt: float | None = None
    scheme: str = "heun"
    tol: float | None = None
    snapshot_stride: int = 1
    histogram_bins: int | None = None
    seed: int = 0
    output_dir: str = "sg_run"
    tracer_K: int = 0
    verify: VerifyToggles = field(default_factory=VerifyToggles)

    def pressure(self) -> InitialPressure:
        return make_pressure(self.scenario, self.epsilon, self.profile, self.path)

    def to_dict(self) -> dict:
        return asdict(self)


_REQUIRED = ("scenario", "N", "T")
_KEYS = tuple(f.name for f in fields(RunConfig))


def _key_lines(text: str) -> dict:
    """Line numbers (1-based) of top-level keys, for error messages."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value
            if isinstance(k, yaml.ScalarNode)}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)
            and math.isfinite(float(v)))


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    """Parse and validate; any problem raises ConfigError before anything runs."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}:{where} YAML syntax error: "
                          f"{getattr(exc, 'problem', None) or exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping of keys")
    lines = _key_lines(text)

    def err(key, msg):
        ln = lines.get(key)
        where = f" line {ln}," if ln else ""
        return ConfigError(f"{source}:{where} key {key!r}: {msg}")

    unknown = sorted(set(raw) - set(_KEYS))
    if unknown:
        raise err(unknown[0], f"unknown key (allowed: {', '.join(_KEYS)})")
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(f"{source}: missing required key {key!r}")

    vals = dict(raw)
    scen = vals["scenario"]
    if not isinstance(scen, str):
        raise err("scenario", "must be a string")
    head = scen.split(None, 1)[0] if scen.strip() else ""
    if head not in SCENARIOS:
        raise err("scenario", f"unknown scenario {scen!r} (choose from {', '.join(SCENARIOS)})")
    if head == "grid-file" and " " in scen.strip():
        # path is resolved against the config's directory below
        vals["scenario"] = head
        vals.setdefault("path", scen.split(None, 1)[1].strip())
    elif " " in scen.strip():
        # short form "sine 0.01" / "shear cos2"
        try:
            p0 = parse_scenario(scen)
        except (ValueError, OSError) as exc:
            raise err("scenario", str(exc)) from None
        vals["scenario"] = head
        d = p0.describe()
        if head == "sine":
            vals.setdefault("epsilon", d["epsilon"])
        elif head == "shear":
            vals.setdefault("profile", d["profile"])

    def num(key, lo=None, lo_open=False, integer=False, optional=False):
        if key not in vals or vals[key] is None:
            if optional:
                vals[key] = None
                return
            if key in vals:
                raise err(key, "must not be empty")
            return
        v = vals[key]
        if integer and not _is_int(v):
            raise err(key, f"must be an integer, got {v!r}")
        if not _is_num(v):
            raise err(key, f"must be a finite number, got {v!r}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise err(key, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        vals[key] = int(v) if integer else float(v)

    num("N", lo=2, integer=True)
    num("T", lo=0.0)
    num("epsilon", lo=0.0)
    num("dt", lo=0.0, lo_open=True, optional=True)
    num("tol", lo=MIN_TOL, optional=True)
    num("snapshot_stride", lo=1, integer=True)
    num("histogram_bins", lo=2, integer=True, optional=True)
    num("seed", lo=0, integer=True)
    num("tracer_K", lo=0, integer=True)

    if vals.get("scheme", "heun") not in SCHEMES:
        raise err("scheme", f"must be one of {', '.join(SCHEMES)}")
    if vals.get("profile", "cos1") not in SHEAR_PROFILES:
        raise err("profile", f"must be one of {', '.join(sorted(SHEAR_PROFILES))}")
    if "output_dir" in vals and not isinstance(vals["output_dir"], str):
        raise err("output_dir", "must be a string")
    if vals["scenario"] == "grid-file":
        path = vals.get("path")
        if not isinstance(path, str) or not path:
            raise err("path" if "path" in vals else "scenario", "grid-file scenario needs a path")
        p = Path(path)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.is_file():
            raise err("path" if "path" in lines else "scenario", f"grid file {str(p)!r} not found")
        vals["path"] = str(p)

    ver = vals.get("verify", {})
    if ver is None:
        ver = {}
    if not isinstance(ver, dict):
        raise err("verify", "must be a mapping of toggles")
    bad = sorted(set(ver) - set(VERIFY_KEYS))
    if bad:
        raise err("verify", f"unknown toggle {bad[0]!r} (allowed: {', '.join(VERIFY_KEYS)})")
    for k, v in ver.items():
        if not isinstance(v, bool):
            raise err("verify", f"toggle {k!r} must be true or false")
    vals["verify"] = VerifyToggles(**ver)

    cfg = RunConfig(**vals)
    key = "path" if cfg.scenario == "grid-file" else "epsilon"
    if cfg.scenario != "zero":
        try:
            cfg.pressure().check_convexity()
        except ValueError as exc:
            raise err(key if key in lines else "scenario", str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path), path.parent)
