"""Sectioned ``key = value`` run configuration.

Grammar (one statement per line):

    # comment                blank lines and '#'/';' comments ignored
    [section]                section header, lowercase
    key = value              flat key "section.key"

Values are uninterpreted strings; typed getters convert on access.
Unknown keys are rejected against a per-subcommand schema so typos fail
loudly. The original text is preserved for verbatim echoing into run
directories.
"""

from __future__ import annotations

from .errors import UsageError


class Config:
    def __init__(self, values, text=""):
        self.values = dict(values)
        self.text = text

    def __contains__(self, key):
        return key in self.values

    def get_str(self, key, default=None):
        if key not in self.values:
            if default is None:
                raise UsageError(f"missing required config key {key!r}")
            return default
        return self.values[key]

    def _convert(self, key, default, conv, kind):
        if key not in self.values:
            if default is None:
                raise UsageError(f"missing required config key {key!r}")
            return default
        try:
            return conv(self.values[key])
        except ValueError as exc:
            raise UsageError(f"config key {key!r} is not {kind}: "
                             f"{self.values[key]!r}") from exc

    def get_int(self, key, default=None):
        return self._convert(key, default, int, "an integer")

    def get_float(self, key, default=None):
        return self._convert(key, default, float, "a float")

    def get_bool(self, key, default=None):
        def conv(s):
            s = s.strip().lower()
            if s in ("true", "yes", "1", "on"):
                return True
            if s in ("false", "no", "0", "off"):
                return False
            raise ValueError(s)
        return self._convert(key, default, conv, "a boolean")

    def get_floats(self, key, default=None):
        return self._convert(
            key, default, lambda s: [float(v) for v in s.split()],
            "a space-separated float list")


def parse_config(text):
    values = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise UsageError(f"line {lineno}: empty section name")
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise UsageError(f"line {lineno}: empty key")
        full = f"{section}.{key}" if section else key
        if full in values:
            raise UsageError(f"line {lineno}: duplicate key {full!r}")
        values[full] = value.strip()
    return Config(values, text=text)


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def validate_keys(cfg, allowed):
    unknown = sorted(k for k in cfg.values if k not in allowed)
    if unknown:
        raise UsageError("unknown config keys: " + ", ".join(unknown))


def write_kv(path, pairs):
    """Write a flat mapping in the same key = value format."""
    with open(path, "w") as fh:
        for k, v in pairs.items():
            fh.write(f"{k} = {v}\n")


def read_kv(path):
    cfg = load_config(path)
    return dict(cfg.values)
