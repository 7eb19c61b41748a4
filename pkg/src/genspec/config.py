"""Plain-text run configuration.

One `key = value` per line, `#` starts a comment. Values stay strings until a
typed accessor pulls them out; unknown keys are rejected against the active
command's schema so typos fail loudly instead of silently using a default.
Every run echoes its fully resolved config next to its outputs, and that echo
re-parses to reproduce the run.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_REQUIRED = object()


class Config:
    def __init__(self, values: dict[str, str] | None = None, source: str = "<args>"):
        self.values: dict[str, str] = dict(values or {})
        self.source = source

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "Config":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{source}:{lineno}: empty key")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value
        return cls(values, source)

    @classmethod
    def from_file(cls, path: str) -> "Config":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from None
        return cls.from_text(text, source=path)

    def override(self, pairs: list[str]) -> None:
        """Apply `key=value` command-line overrides on top of the file."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            key, value = (part.strip() for part in pair.split("=", 1))
            self.values[key] = value

    def require_known(self, allowed: set[str]) -> None:
        unknown = sorted(set(self.values) - set(allowed))
        if unknown:
            raise ConfigError(
                f"unknown config key(s) {', '.join(map(repr, unknown))} in {self.source}; "
                f"allowed: {', '.join(sorted(allowed))}")

    # -- typed accessors ------------------------------------------------------------

    def _raw(self, key: str, default):
        if key in self.values:
            return self.values[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r} in {self.source}")
        return default

    def get_str(self, key: str, default=_REQUIRED) -> str:
        return str(self._raw(key, default))

    def get_path(self, key: str, default=_REQUIRED) -> str:
        return os.path.expanduser(self.get_str(key, default))

    def get_int(self, key: str, default=_REQUIRED) -> int:
        raw = self._raw(key, default)
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} wants an integer, got {raw!r}") from None

    def get_float(self, key: str, default=_REQUIRED) -> float:
        raw = self._raw(key, default)
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} wants a number, got {raw!r}") from None

    def get_bool(self, key: str, default=_REQUIRED) -> bool:
        raw = self._raw(key, default)
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "yes", "1", "on"):
            return True
        if text in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"config key {key!r} wants true/false, got {raw!r}")

    def get_floats(self, key: str, default=_REQUIRED) -> tuple[float, ...]:
        raw = self._raw(key, default)
        if not isinstance(raw, str):
            return tuple(float(v) for v in raw)
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"config key {key!r} wants comma-separated numbers, got {raw!r}") from None

    def get_strs(self, key: str, default=_REQUIRED) -> tuple[str, ...]:
        raw = self._raw(key, default)
        if not isinstance(raw, str):
            return tuple(raw)
        return tuple(part.strip() for part in raw.split(",") if part.strip())

    # -- the echo -------------------------------------------------------------------

    def set_default(self, key: str, value) -> None:
        """Record a resolved default so the echo reproduces the run exactly."""
        self.values.setdefault(key, str(value))

    def resolved(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, out: str) -> str:
        """Echo next to the output: DIR/resolved-config.txt or FILE.config."""
        path = os.path.join(out, "resolved-config.txt") if os.path.isdir(out) else out + ".config"
        with open(path, "w") as fh:
            fh.write(self.resolved())
        return path
