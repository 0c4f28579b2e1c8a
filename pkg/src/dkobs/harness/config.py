"""Scenario configuration: defaults, a flat ``key = value`` file format, overrides.

Example file::

    # cooperative localization, defaults otherwise
    n_agents = 10
    solver = admm
    steps = 2000

Lines starting with ``#`` or ``;`` are comments. Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError

SOLVERS = ("centralized", "richardson", "admm", "admm_direct")
FORGETTING = ("matrix", "scalar")
INPUTS = ("zero", "random")


@dataclass(frozen=True)
class ScenarioConfig:
    """All knobs of a cooperative-localization run.

    ``r_local`` and ``r_relative`` are the information weights that multiply
    the measurement terms. With ``r_as_inverse`` they are read as inverse
    weights and inverted before use. ``gamma``, ``gamma_p`` and ``gamma_v``
    left at ``None`` default to ``exp(-5 Ts)``, ``exp(-5 Ts)`` and
    ``exp(-50 Ts)``.
    """

    n_agents: int = 10
    n_anchors: int = 3
    Ts: float = 0.05
    steps: int = 6000
    seed: int = 0
    workspace: float = 10.0
    radius: float = 4.0
    edges: str = ""
    bidirectional: bool = True
    forgetting: str = "matrix"
    gamma: float | None = None
    gamma_p: float | None = None
    gamma_v: float | None = None
    eps: float = 1.0
    r_local: float = 0.2
    r_relative: float = 2.0
    r_as_inverse: bool = False
    solver: str = "admm"
    alpha_r: float = 0.05
    rho: float = 1.0
    alpha: float = 0.95
    h_iters: int = 1
    p0: str = "1,1,0.1,0.1"
    velocity_scale: float = 0.5
    input: str = "zero"
    input_scale: float = 0.0
    noise_local: float = 0.0
    noise_relative: float = 0.0
    track_dist: bool = True
    baseline: bool = True
    gramian_window: int = 10
    max_retries: int = 20

    def __post_init__(self):
        _validate(self)

    # -- derived values --------------------------------------------------------

    @property
    def gamma_scalar(self) -> float:
        return math.exp(-5 * self.Ts) if self.gamma is None else float(self.gamma)

    @property
    def gamma_diag(self) -> np.ndarray:
        gp = math.exp(-5 * self.Ts) if self.gamma_p is None else float(self.gamma_p)
        gv = math.exp(-50 * self.Ts) if self.gamma_v is None else float(self.gamma_v)
        return np.array([gp, gp, gv, gv])

    @property
    def forgetting_value(self):
        return self.gamma_scalar if self.forgetting == "scalar" else self.gamma_diag

    @property
    def weight_local(self) -> float:
        return 1.0 / self.r_local if self.r_as_inverse else self.r_local

    @property
    def weight_relative(self) -> float:
        return 1.0 / self.r_relative if self.r_as_inverse else self.r_relative

    @property
    def p0_diag(self) -> np.ndarray:
        return np.array(_parse_floats(self.p0, "p0"))

    @property
    def edge_list(self) -> list[tuple[int, int]] | None:
        """Explicit sensing edges ``"0-1, 1-2"`` or ``None`` for a proximity graph."""
        if not self.edges.strip():
            return None
        out = []
        for tok in self.edges.replace(";", ",").split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                a, b = tok.split("-")
                out.append((int(a), int(b)))
            except ValueError as exc:
                raise ConfigError(f"bad edge '{tok}', expected 'i-j'") from exc
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Stable hash of the configuration (hex, 16 chars)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kwargs) -> "ScenarioConfig":
        clean = {k: v for k, v in kwargs.items() if v is not None}
        unknown = set(clean) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return replace(self, **clean)


def _parse_floats(text: str, key: str) -> list[float]:
    try:
        return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated numbers, got '{text}'") from exc


def _validate(cfg: ScenarioConfig) -> None:
    def positive(name):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")

    for name in ("n_agents", "Ts", "workspace", "eps", "r_local", "r_relative", "alpha_r", "rho", "h_iters"):
        positive(name)
    if cfg.steps < 0:
        raise ConfigError(f"steps must be non-negative, got {cfg.steps}")
    if not 0 <= cfg.n_anchors <= cfg.n_agents:
        raise ConfigError(f"n_anchors must lie in [0, n_agents], got {cfg.n_anchors}")
    if cfg.radius < 0:
        raise ConfigError(f"radius must be non-negative, got {cfg.radius}")
    if cfg.eps > 1:
        raise ConfigError(f"eps must lie in (0, 1], got {cfg.eps}")
    if not 0 < cfg.alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg.alpha}")
    if cfg.solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {SOLVERS}, got '{cfg.solver}'")
    if cfg.forgetting not in FORGETTING:
        raise ConfigError(f"forgetting must be one of {FORGETTING}, got '{cfg.forgetting}'")
    if cfg.input not in INPUTS:
        raise ConfigError(f"input must be one of {INPUTS}, got '{cfg.input}'")
    for name in ("gamma", "gamma_p", "gamma_v"):
        v = getattr(cfg, name)
        if v is not None and not 0 < v < 1:
            raise ConfigError(f"{name} must lie in (0, 1), got {v}")
    for name in ("velocity_scale", "input_scale", "noise_local", "noise_relative"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.gramian_window < 0 or cfg.max_retries < 0:
        raise ConfigError("gramian_window and max_retries must be non-negative")
    p0 = _parse_floats(cfg.p0, "p0")
    if len(p0) != 4 or min(p0) <= 0:
        raise ConfigError(f"p0 must list four positive variances, got '{cfg.p0}'")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    cfg.edge_list  # parse check


_BOOL = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def coerce_value(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(ScenarioConfig)}[name]
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "float | None":
            return None if raw.lower() in ("", "none", "default") else float(raw)
        if ftype == "bool":
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse '{raw}' as {ftype}") from exc
    return raw


def parse_config_text(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str
    try:
        parser.read_string("[scenario]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    known = {f.name for f in fields(ScenarioConfig)}
    values = {}
    for key, raw in parser["scenario"].items():
        if key not in known:
            raise ConfigError(f"unknown configuration key '{key}'")
        values[key] = coerce_value(key, raw)
    return ScenarioConfig(**values)


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file '{path}': {exc.strerror or exc}") from exc
    return parse_config_text(text)


def config_from_dict(data: dict) -> ScenarioConfig:
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    return ScenarioConfig(**data)


def format_config(cfg: ScenarioConfig) -> str:
    """Render a configuration in the file format (round-trips through :func:`parse_config_text`)."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "default"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
