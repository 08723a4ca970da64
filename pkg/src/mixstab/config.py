"""
Run configuration: an INI file with one section per concern, all units SI.

Every key has a default except ``[forcing] Q``, which commands that need a
prescribed surface flux require explicitly.  Unknown sections or keys are
rejected.  :meth:`RunConfig.resolved_text` echoes the effective values, which is
enough to reproduce a run.

Reference (defaults in brackets)::

    [model]        name [R-2-2-4]  preset [PP81]  alpha1 beta1 alpha2 beta2 [from preset]
    [constants]    g [9.81]  rho0 [1025]  rho_a [1.2]
    [forcing]      Vx [0.1]  Vy [0.05]  u_a v_a [unset]  C_D [0.0013]  Q [required, list allowed]
    [boundary]     u_b [0]  v_b [0]  rho_b [1026]  h [50]
    [equilibrium]  R_lo [-10]  R_hi [10]  samples [20000]  extend [true]
    [stability]    models [all four]  sweep [R]  R_lo [-5]  R_hi [10]  R_points [1501]
                   C_lo [-10]  C_hi [10]  C_points [201]
    [column]       N [200]  dt [30]  t_end [864000]  theta [1]  coupling [linearized]
                   initial [perturbed]  profile [unset]  amplitude [0.001]
                   shape [lowest_mode]  seed [0]  root_index [0]  sample_every [100]  R_clamp [1e6]
    [validate]     models [all four]  R_lo [-0.46]  R_hi [0.49]  points [20]
                   steady_steps [10000]  amplitude [0.001]  shape [random]
    [output]       dir [out]

``u_a``/``v_a`` replace ``Vx``/``Vy`` through ``V = C_D*|u_a|**2``; giving
both forms is an error.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path

from .closures import PRESETS, ClosureModel, ModelKind, PhysicalConstants
from .column import Grid, SimConfig
from .equilibrium import Boundary, Forcing
from .errors import ConfigError

__all__ = ["RunConfig", "load_config", "SCHEMA"]

ALL_MODELS = ", ".join(k.value for k in ModelKind)
REQUIRED = object()


def _float(s):
    return float(s)


def _opt_float(s):
    return None if s.strip() == "" else float(s)


def _int(s):
    return int(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s):
    return s.strip()


def _float_list(s):
    items = [x for x in re.split(r"[,\s]+", s.strip()) if x]
    if not items:
        raise ValueError("empty list")
    return [float(x) for x in items]


def _models(s):
    items = [x for x in re.split(r"[,\s]+", s.strip()) if x]
    return [ModelKind.parse(x).value for x in items]


def _choice(*options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


# section -> key -> (parser, default text)
SCHEMA = {
    "model": {
        "name": (lambda s: ModelKind.parse(s.strip()).value, "R-2-2-4"),
        "preset": (_choice(*PRESETS), "PP81"),
        "alpha1": (_opt_float, ""),
        "beta1": (_opt_float, ""),
        "alpha2": (_opt_float, ""),
        "beta2": (_opt_float, ""),
    },
    "constants": {
        "g": (_float, "9.81"),
        "rho0": (_float, "1025"),
        "rho_a": (_float, "1.2"),
    },
    "forcing": {
        "Vx": (_float, "0.1"),
        "Vy": (_float, "0.05"),
        "u_a": (_opt_float, ""),
        "v_a": (_opt_float, ""),
        "C_D": (_float, "0.0013"),
        "Q": (_float_list, REQUIRED),
    },
    "boundary": {
        "u_b": (_float, "0"),
        "v_b": (_float, "0"),
        "rho_b": (_float, "1026"),
        "h": (_float, "50"),
    },
    "equilibrium": {
        "R_lo": (_float, "-10"),
        "R_hi": (_float, "10"),
        "samples": (_int, "20000"),
        "extend": (_bool, "true"),
    },
    "stability": {
        "models": (_models, ALL_MODELS),
        "sweep": (_choice("R", "C"), "R"),
        "R_lo": (_float, "-5"),
        "R_hi": (_float, "10"),
        "R_points": (_int, "1501"),
        "C_lo": (_float, "-10"),
        "C_hi": (_float, "10"),
        "C_points": (_int, "201"),
    },
    "column": {
        "N": (_int, "200"),
        "dt": (_float, "30"),
        "t_end": (_float, "864000"),
        "theta": (_float, "1"),
        "coupling": (_choice("linearized", "lagged"), "linearized"),
        "initial": (_choice("equilibrium", "perturbed", "file"), "perturbed"),
        "profile": (_str, ""),
        "amplitude": (_float, "0.001"),
        "shape": (_choice("lowest_mode", "random"), "lowest_mode"),
        "seed": (_int, "0"),
        "root_index": (_int, "0"),
        "sample_every": (_int, "100"),
        "R_clamp": (_float, "1e6"),
    },
    "validate": {
        "models": (_models, ALL_MODELS),
        "R_lo": (_float, "-0.46"),
        "R_hi": (_float, "0.49"),
        "points": (_int, "20"),
        "steady_steps": (_int, "10000"),
        "amplitude": (_float, "0.001"),
        "shape": (_choice("lowest_mode", "random"), "random"),
    },
    "output": {
        "dir": (_str, "out"),
    },
}


def _line_of(text: str, section: str, key: str | None) -> int | None:
    """1-based line where ``key`` (or the section header) appears in ``text``."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.fullmatch(r"\[(.+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section:
            name = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            if name == key:
                return n
    return None


def _where(path, text, section, key=None):
    line = _line_of(text, section, key) if text else None
    loc = f"{path}:{line}: " if line else (f"{path}: " if path else "")
    return loc + (f"[{section}] {key}" if key else f"[{section}]")


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration: ``values[section][key]`` holds typed values.

    ``raw`` keeps the effective text of every key for the resolved echo.
    """

    values: dict
    raw: dict
    source: str = ""

    def __getitem__(self, section):
        return self.values[section]

    def require(self, section, key):
        v = self.values[section][key]
        if v is REQUIRED:
            raise ConfigError(f"missing required key [{section}] {key}")
        return v

    def model(self, name: str | None = None) -> ClosureModel:
        m = self.values["model"]
        overrides = {k: m[k] for k in ("alpha1", "beta1", "alpha2", "beta2") if m[k] is not None}
        try:
            return ClosureModel.named(name or m["name"], m["preset"], **overrides)
        except ValueError as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def constants(self) -> PhysicalConstants:
        c = self.values["constants"]
        try:
            return PhysicalConstants(c["g"], c["rho0"], c["rho_a"])
        except ValueError as exc:
            raise ConfigError(f"[constants]: {exc}") from None

    def wind(self):
        """(Vx, Vy) after applying the air-velocity form if given."""
        f = self.values["forcing"]
        if f["u_a"] is None and f["v_a"] is None:
            return f["Vx"], f["Vy"]
        C_D = f["C_D"]
        return C_D * (f["u_a"] or 0.0) ** 2, C_D * (f["v_a"] or 0.0) ** 2

    def forcings(self):
        Vx, Vy = self.wind()
        k = self.constants()
        return [Forcing(Vx, Vy, Q, k) for Q in self.require("forcing", "Q")]

    def boundary(self) -> Boundary:
        b = self.values["boundary"]
        if not b["h"] > 0:
            raise ConfigError("[boundary] h must be > 0")
        return Boundary(b["u_b"], b["v_b"], b["rho_b"], b["h"])

    def grid(self) -> Grid:
        try:
            return Grid(self.values["boundary"]["h"], self.values["column"]["N"])
        except ValueError as exc:
            raise ConfigError(f"[column]: {exc}") from None

    def sim_config(self, model: ClosureModel, forcing: Forcing) -> SimConfig:
        c = self.values["column"]
        try:
            return SimConfig(c["dt"], c["t_end"], model, forcing, theta_scheme=c["theta"],
                             coupling=c["coupling"], R_clamp=c["R_clamp"])
        except ValueError as exc:
            raise ConfigError(f"[column]: {exc}") from None

    def solver_options(self):
        e = self.values["equilibrium"]
        if not e["R_lo"] < e["R_hi"]:
            raise ConfigError("[equilibrium] R_lo must be < R_hi")
        if e["samples"] < 1:
            raise ConfigError("[equilibrium] samples must be >= 1")
        return {"window": (e["R_lo"], e["R_hi"]), "samples": e["samples"], "extend": e["extend"]}

    def resolved_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                text = self.raw[section][key]
                lines.append(f"{key} = {'' if text is None else text}")
            lines.append("")
        return "\n".join(lines)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (or only defaults when None) and apply ``overrides``.

    ``overrides`` maps ``(section, key)`` to raw text and is applied after the
    file, e.g. for command-line flags.  Raises :class:`ConfigError` with the
    file line for unknown or malformed entries.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case sensitive (Vx, C_D, ...)
    text = ""
    source = ""
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from None

    raw = {s: {k: (None if d is REQUIRED else d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{_where(source, text, section)}: unknown section")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{_where(source, text, section, key)}: unknown key")
            raw[section][key] = value.strip()
    for (section, key), value in (overrides or {}).items():
        raw[section][key] = value
    if parser.has_section("forcing"):
        given = {k for k, v in parser.items("forcing") if v.strip()}
        if given & {"u_a", "v_a"} and given & {"Vx", "Vy"}:
            raise ConfigError(f"{_where(source, text, 'forcing')}: give either Vx/Vy or u_a/v_a, not both")

    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            text_value = raw[section][key]
            if text_value is None or (default is REQUIRED and text_value == ""):
                values[section][key] = REQUIRED
                continue
            try:
                values[section][key] = parse(text_value)
            except ValueError as exc:
                raise ConfigError(f"{_where(source, text, section, key)}: {exc}") from None
    return RunConfig(values, raw, source)
