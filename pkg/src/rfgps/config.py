"""INI run configuration.

Sections mirror the dataclasses: ``[run]`` holds :class:`RunConfig` fields,
``[env]`` holds :class:`EnvSpec` fields and ``[env.init_state_dist]`` the
initial-state distribution.  Values are Python literals (numbers, lists,
``None``, ``true``/``false``); bare words are read as strings.  Unknown
sections or keys are errors.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
from pathlib import Path

from .env_sim import EnvSpec, InitStateDist
from .gps_driver import RunConfig


class ConfigError(ValueError):
    pass


_RUN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)} - {"env"}
_ENV_FIELDS = {f.name for f in dataclasses.fields(EnvSpec)} - {"init_state_dist"}
_INIT_FIELDS = {f.name for f in dataclasses.fields(InitStateDist)}
_SECTIONS = {"run": _RUN_FIELDS, "env": _ENV_FIELDS, "env.init_state_dist": _INIT_FIELDS}


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return tuple(val) if isinstance(val, list) else val


def _section(parser, name):
    if not parser.has_section(name):
        return {}
    out = {}
    allowed = _SECTIONS[name]
    for key, raw in parser.items(name):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        out[key] = _parse_value(raw)
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    run = _section(parser, "run")
    env = _section(parser, "env")
    init = _section(parser, "env.init_state_dist")
    try:
        if init:
            env["init_state_dist"] = InitStateDist(**init)
        if "conditions" in run and run["conditions"] is not None:
            run["conditions"] = [tuple(c) for c in run["conditions"]]
        return RunConfig(env=EnvSpec(**env), **run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return repr([_fmt_item(x) for x in v])
    if isinstance(v, list):
        return repr([list(x) if isinstance(x, tuple) else x for x in v])
    if isinstance(v, str):
        return v
    return repr(v)


def _fmt_item(x):
    return list(x) if isinstance(x, tuple) else x


def dump_config(cfg: RunConfig) -> str:
    """Render a config in the same INI format (round-trips through :func:`parse_config`)."""
    lines = ["[run]"]
    for f in dataclasses.fields(RunConfig):
        if f.name == "env":
            continue
        val = getattr(cfg, f.name)
        if f.name == "conditions" and val is not None:
            val = [list(map(float, c)) for c in val]
        lines.append(f"{f.name} = {_fmt(val)}")
    lines.append("")
    lines.append("[env]")
    for f in dataclasses.fields(EnvSpec):
        if f.name == "init_state_dist":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg.env, f.name))}")
    lines.append("")
    lines.append("[env.init_state_dist]")
    for f in dataclasses.fields(InitStateDist):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.env.init_state_dist, f.name))}")
    return "\n".join(lines) + "\n"
