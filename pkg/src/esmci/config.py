"""Flat ``key = value`` run configuration.

One entry per line, ``#`` starts a comment, keys may be dotted
(``net.widths = 10,128,64,1``).  Overrides use the same ``key=value`` form.
Unknown keys and malformed values raise ConfigError naming the key.
"""

from __future__ import annotations

import os
from dataclasses import replace
from typing import Callable

from esmci.errors import ConfigError, DomainError
from esmci.expfam import FAMILIES, FamilySpec
from esmci.net import NetworkConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _str_list(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise ValueError("must be a 64-bit unsigned integer")
    return v


KEYS: dict[str, Callable[[str], object]] = {
    "family": str,
    "n_trial": int,
    "n": int,
    "p": int,
    "r": int,
    "gamma": float,
    "B": int,
    "reps": int,
    "n_test": int,
    "alpha": float,
    "seed": _u64,
    "signal": str,
    "threads": int,
    "net.widths": _int_list,
    "net.learning_rate": float,
    "net.epochs": int,
    "net.batch_size": int,
    "net.dropout_rate": float,
    "net.weight_decay": float,
    "net.clamp_F": float,
    "net.init_scheme": str,
    "net.dtype": str,
    "data.response": str,
    "data.features": _str_list,
    "data.standardize": _bool,
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", None)
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def parse_overrides(items) -> dict[str, str]:
    raw: dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value", item)
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    return raw


def coerce(raw: dict[str, str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}", key)
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
    return out


def load(path: str | os.PathLike | None, overrides=None) -> dict[str, object]:
    """Typed effective configuration: file entries, then overrides on top."""
    raw: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = parse_text(fh.read(), os.fspath(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {os.fspath(path)!r}: {exc.strerror}", "config") from None
    raw.update(parse_overrides(overrides))
    return coerce(raw)


def family_spec(cfg: dict) -> FamilySpec:
    fam = cfg.get("family")
    if fam is None:
        raise ConfigError("missing required key 'family'", "family")
    if fam not in FAMILIES:
        raise ConfigError(f"family {fam!r} is not supported; choose one of {', '.join(FAMILIES)}", "family")
    try:
        return FamilySpec(fam, cfg.get("n_trial"))
    except DomainError as exc:
        raise ConfigError(str(exc), "n_trial") from None


def net_config(cfg: dict, p: int) -> NetworkConfig:
    base = NetworkConfig(widths=(p, 128, 64, 1))
    fields = {k[4:]: v for k, v in cfg.items() if k.startswith("net.")}
    widths = fields.pop("widths", None)
    if widths is not None:
        if len(widths) < 3 or widths[0] != p:
            raise ConfigError(f"net.widths must start with the input dimension {p}", "net.widths")
        fields["widths"] = widths
    return replace(base, **fields)


def require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing required key {key!r}", key)
    return cfg[key]


def effective(cfg: dict) -> dict[str, object]:
    """JSON-friendly echo of a typed config."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}
