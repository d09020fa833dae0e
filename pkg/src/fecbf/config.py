"""Run configuration: a flat INI file with four sections, validated against a schema."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cbf import SafetyParams
from .controllers import ControllerConfig, ControllerKind, Fallback
from .sim import ScenarioKind, ScenarioSpec


class ConfigError(ValueError):
    """Schema violation: unknown section or key, or a malformed value."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _radius(text: str) -> float:
    return np.inf if text.strip().lower() in ("unlimited", "inf", "none") else float(text)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _kinds(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    for name in names:
        ControllerKind(name)
    if not names:
        raise ValueError("no controller kinds given")
    return names


# section -> key -> (parser, default)
SCHEMA = {
    "scenario": {
        "kind": (lambda s: ScenarioKind(s.strip()).value, "DualCircle"),
        "n": (int, "50"),
        "dt": (float, "0.1"),
        "t_max": (float, "600"),
        "delay": (float, "0"),
        "delays": (_floats, "1, 3, 5"),
        "seed": (int, "0"),
        "trials": (int, "20"),
        "snapshot_time": (float, "0"),
    },
    "controller": {
        "kinds": (_kinds, "FECBF"),
        "lambda": (float, "3"),
        "beta": (float, repr(7 * np.pi / 24)),
        "neighbor_radius": (_radius, "unlimited"),
        "fallback": (lambda s: Fallback(s.strip()).value, "brake"),
        "u_tol_fraction": (float, "0.5"),
        "vo_rate": (float, "1.0"),
    },
    "safety": {
        "zeta": (float, "0.5"),
        "kappa": (float, "0.08"),
        "radius": (float, "2.0"),
        "arrival_tol": (float, "5.0"),
    },
    "output": {
        "directory": (str, "results"),
        "trajectory": (_bool, "true"),
        "diagnostics": (_bool, "true"),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    def scenario(self, **overrides) -> ScenarioSpec:
        s, f = self.values["scenario"], self.values["safety"]
        kw = dict(kind=s["kind"], n=s["n"], seed=s["seed"], dt=s["dt"], t_max=s["t_max"],
                  delay=s["delay"], radius=f["radius"], arrival_tol=f["arrival_tol"])
        kw.update(overrides)
        return ScenarioSpec(**kw)

    def controllers(self) -> list[ControllerConfig]:
        c = self.values["controller"]
        return [ControllerConfig(kind=k, lam=c["lambda"], beta=c["beta"],
                                 neighbor_radius=c["neighbor_radius"], fallback=c["fallback"],
                                 u_tol_fraction=c["u_tol_fraction"], vo_rate=c["vo_rate"])
                for k in c["kinds"]]

    def safety(self) -> SafetyParams:
        return SafetyParams(zeta=self.values["safety"]["zeta"], kappa=self.values["safety"]["kappa"])

    def validate(self) -> None:
        """Build every derived object once so that value errors surface as ConfigError."""
        try:
            self.scenario()
            self.controllers()
            self.safety()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self["scenario.trials"] < 1:
            raise ConfigError("scenario.trials must be >= 1")

    def render(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{key} = {self.raw[section][key]}" for key in keys]
            lines.append("")
        return "\n".join(lines)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    raw = {section: {key: default for key, (_, default) in keys.items()}
           for section, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            raw[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        name, value = item.split("=", 1)
        section, key = name.strip().split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        raw[section][key] = value.strip()
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
    cfg = RunConfig(values, raw)
    cfg.validate()
    return cfg
