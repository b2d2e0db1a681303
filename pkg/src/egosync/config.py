"""Flat ``section.key = value`` run configuration.

Lines are ``section.key = value``; blank lines and ``#`` comments are
ignored. Every key must appear in :data:`SCHEMA`, which fixes its type and
default. A default of :data:`REQUIRED` means the key has no default and the
commands that need it fail with a :class:`ConfigError` naming it.
"""

import os

from .exceptions import ConfigError

REQUIRED = object()


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _str_list(text):
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def _int_list(text):
    return tuple(int(tok) for tok in _str_list(text))


SCHEMA = {
    "run.seed": (int, 0),
    "run.out": (str, "run"),
    "data.n_people": (int, REQUIRED),
    "data.n_activities": (int, REQUIRED),
    "data.n_frames": (int, REQUIRED),
    "data.image_size": (int, 16),
    "data.noise": (float, 0.02),
    "data.test_fraction": (float, 0.3),
    "flow.provider": (str, "gradient"),
    "flow.clip": (_optional_float, None),
    "train.backbone": (str, "tiny"),
    "train.margin": (float, 0.9),
    "train.lr": (float, 1e-3),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.epochs": (int, 2),
    "train.batch_size": (int, 32),
    "train.frames_per_pair": (int, 512),
    "train.neg_ratio": (float, 1.0),
    "train.normalize": (_bool, False),
    "train.hard_shifts": (_int_list, (25, -25)),
    "transfer.n_poses": (int, 300),
    "transfer.hidden": (int, 64),
    "transfer.epochs": (int, 1000),
    "transfer.lr": (float, 3e-3),
    "transfer.weight_decay": (float, 1e-3),
    "analysis.activities": (_str_list, ("0", "1")),
    "analysis.method": (str, "pca"),
    "analysis.step": (float, 0.1),
    "analysis.cca_eps": (float, 1e-4),
    "analysis.endpoints": (_int_list, (0, 40)),
    "analysis.plots": (_bool, True),
}


class RunConfig:
    """Typed settings with schema defaults filled in.

    ``cfg["train.lr"]`` returns a value; ``cfg.section("train")`` returns a
    dict of that section's keys without the prefix.
    """

    def __init__(self, values=None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        self._values = {}
        for key, (conv, default) in SCHEMA.items():
            if key in values:
                raw = values[key]
                try:
                    self._values[key] = conv(raw) if isinstance(raw, str) else raw
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from exc
            else:
                self._values[key] = default

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        value = self._values[key]
        if value is REQUIRED:
            raise ConfigError(f"missing required config key: {key}")
        return value

    def require(self, *keys):
        for key in keys:
            self[key]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: self[k] for k in SCHEMA
                if k.startswith(prefix) and self._values[k] is not REQUIRED}

    def with_overrides(self, **overrides):
        values = {k: v for k, v in self._values.items() if v is not REQUIRED}
        values.update(overrides)
        return RunConfig(values)

    def as_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self._values.items() if v is not REQUIRED}


def parse_config(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} has no section prefix")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        values[key] = value.strip()
    return RunConfig(values)


def load_config(path=None):
    """Read ``path``; with no path every key takes its default."""
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return parse_config(f.read(), source=path)
