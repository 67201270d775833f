"""Flat ``key = value`` run configuration files.

Top-level keys are :class:`RunConfig` fields (``lambda`` for the unlabeled
loss weight); nested settings use dotted keys such as ``world.imbalance_ratio``,
``fusion.gamma`` or ``synthesis.beta``. Lines starting with ``#`` are comments.
Unlisted keys keep their defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, is_dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple

from .errors import ConfigError, OssodError
from .training import RunConfig

_SECTION = "run"
_NESTED = ("world", "fusion", "synthesis")
# file key -> dataclass field name
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def _coerce(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None
    return text


def _scalar_fields(obj) -> Dict[str, object]:
    return {f.name: getattr(obj, f.name) for f in fields(obj)
            if not is_dataclass(getattr(obj, f.name))}


def config_keys(cfg: RunConfig = RunConfig()) -> List[Tuple[str, object]]:
    """Every accepted key with its value in ``cfg``, in file order."""
    out = [(_REVERSE.get(name, name), value) for name, value in _scalar_fields(cfg).items()]
    for prefix in _NESTED:
        sub = getattr(cfg, prefix)
        out.extend((f"{prefix}.{name}", value) for name, value in _scalar_fields(sub).items())
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#",), inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    base = RunConfig()
    top: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {p: {} for p in _NESTED}
    top_defaults = _scalar_fields(base)
    for key, raw in parser.items(_SECTION):
        if "." in key:
            prefix, name = key.split(".", 1)
            if prefix not in nested:
                raise ConfigError(f"unknown config section {prefix!r} in key {key!r}")
            defaults = _scalar_fields(getattr(base, prefix))
            if name not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            nested[prefix][name] = _coerce(raw, defaults[name], key)
        else:
            name = _ALIASES.get(key, key)
            if name not in top_defaults:
                raise ConfigError(f"unknown config key {key!r}")
            top[name] = _coerce(raw, top_defaults[name], key)
    try:
        subs = {p: replace(getattr(base, p), **kv) for p, kv in nested.items()}
        return replace(base, **subs, **top)
    except OssodError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    def show(v):
        return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {show(v)}\n" for k, v in config_keys(cfg))
