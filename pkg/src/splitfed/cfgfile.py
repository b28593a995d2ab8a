"""Plain-text hierarchical config files.

Format::

    # comment
    [section]
    key = value

    [layers]
    conv1d in=1 out=32 kernel=16
    relu

Sections named in ``list_sections`` hold ordered entries (a kind followed by
``key=value`` tokens); every other section holds ``key = value`` pairs. Every
value remembers its line number so validation errors can point at it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed or invalid config content."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


@dataclass
class Entry:
    kind: str
    options: dict[str, str]
    line: int


@dataclass
class Section:
    name: str
    line: int
    values: dict[str, str] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)
    entries: list[Entry] = field(default_factory=list)


@dataclass
class ConfigFile:
    path: str
    sections: dict[str, Section]

    def section(self, name: str, required: bool = True) -> Section:
        if name not in self.sections:
            if required:
                raise ConfigError(f"missing section [{name}]", self.path)
            return Section(name, 0)
        return self.sections[name]

    def error(self, message: str, section: str, key: str | None = None) -> ConfigError:
        sec = self.sections.get(section)
        line = None
        if sec is not None:
            line = sec.lines.get(key, sec.line) if key else sec.line
        return ConfigError(message, self.path, line)


def _parse_tokens(tokens, path, lineno):
    opts = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}", path, lineno)
        k, v = tok.split("=", 1)
        if not k or k in opts:
            raise ConfigError(f"bad or duplicate option {k!r}", path, lineno)
        opts[k] = v
    return opts


def parse(text: str, path: str = "<string>", list_sections=("layers",)) -> ConfigFile:
    sections: dict[str, Section] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {line!r}", path, lineno)
            name = line[1:-1].strip()
            if name in sections:
                raise ConfigError(f"duplicate section [{name}]", path, lineno)
            current = sections[name] = Section(name, lineno)
            continue
        if current is None:
            raise ConfigError("content before first section header", path, lineno)
        if current.name in list_sections:
            kind, *rest = line.split()
            current.entries.append(Entry(kind.lower(), _parse_tokens(rest, path, lineno), lineno))
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key in current.values:
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        current.values[key] = value
        current.lines[key] = lineno
    return ConfigFile(path, sections)


def load(path, list_sections=("layers",)) -> ConfigFile:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse(p.read_text(), str(p), list_sections)
