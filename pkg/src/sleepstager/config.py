"""Experiment configuration: INI-style text with a fixed schema.

Every key is declared in ``SCHEMA`` with its type, default and check.
Unknown sections or keys, unparsable values and failed checks raise
:class:`ConfigError` naming ``section.key`` before any work starts.
Environment variables are never consulted.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .network import MODES
from .training import PRECISIONS, TrainingConfig

ARCHS = ("onemax", "deepcnn")
FB_KINDS = ("triangular", "learnable")
VOTING = ("additive", "multiplicative")
PROTOCOLS = ("loso", "kfold")


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int, float, bool, str, path, ints, strs
    default: Any
    check: Callable[[Any], str | None] | None = None
    doc: str = ""


def _positive(v):
    return None if v > 0 else "must be positive"


def _non_negative(v):
    return None if v >= 0 else "must be non-negative"


def _one_of(options):
    def check(v):
        return None if v in options else f"must be one of {', '.join(options)}"
    return check


def _unit_interval(v):
    return None if 0 <= v < 1 else "must lie in [0, 1)"


def _widths(v):
    if not v:
        return "needs at least one width"
    return None if all(w >= 1 for w in v) else "widths must be >= 1"


def _names(v):
    return None if v and len(set(v)) == len(v) else "needs distinct, non-empty names"


SCHEMA: dict[str, list[Key]] = {
    "data": [
        Key("bundle_dir", "path", None, doc="directory holding recording bundles"),
        Key("cache_dir", "path", None, doc="TF-image caches (default: <out_dir>/cache)"),
        Key("out_dir", "path", None, doc="experiment outputs"),
        Key("channels", "strs", ("EEG", "EOG", "EMG"), _names, "channel selection, in order"),
        Key("trim_in_bed", "bool", True, doc="drop epochs outside the in-bed range"),
    ],
    "features": [
        Key("n_filters", "int", 20, _positive, "filter-bank size M"),
        Key("kind", "str", "triangular", _one_of(FB_KINDS)),
    ],
    "model": [
        Key("arch", "str", "onemax", _one_of(ARCHS)),
        Key("mode", "str", "one_to_many", _one_of(MODES)),
        Key("tau", "int", 1, _non_negative),
        Key("filters_per_width", "int", 100, _positive, "Q"),
        Key("filter_widths", "ints", (3, 5, 7), _widths, "R widths"),
        Key("head", "str", "shared", _one_of(("shared", "per_slot"))),
    ],
    "training": [
        Key("epochs", "int", 200, _positive, "training passes"),
        Key("batch_size", "int", 200, _positive),
        Key("learning_rate", "float", 1e-4, _positive),
        Key("lambda_reg", "float", 1e-3, _non_negative),
        Key("dropout", "float", 0.2, _unit_interval),
        Key("balanced_batching", "bool", True),
        Key("precision", "str", "float64", _one_of(tuple(PRECISIONS))),
    ],
    "aggregation": [
        Key("voting", "str", "multiplicative", _one_of(VOTING)),
    ],
    "split": [
        Key("protocol", "str", "loso", _one_of(PROTOCOLS)),
        Key("k", "int", 0, _non_negative, "number of folds for kfold"),
        Key("n_validation", "int", 1, _positive),
    ],
    "run": [
        Key("seed", "int", 0, _non_negative),
        Key("jobs", "int", 1, _positive, "concurrent fold workers"),
    ],
}


def _parse(kind: str, text: str, where: str):
    text = text.strip()
    if kind == "path" and not text:
        return None
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "ints":
            return tuple(int(p) for p in text.split(",") if p.strip())
        if kind == "strs":
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind}", where) from None


def _format(kind: str, value) -> str:
    if value is None:
        return ""
    if kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # {(section, key): value}
    base_dir: Path = Path(".")

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def path(self, key: str) -> Path | None:
        v = self.values[("data", key)]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path("out_dir")

    @property
    def cache_dir(self) -> Path:
        return self.path("cache_dir") or self.out_dir / "cache"

    @property
    def channels(self) -> tuple[str, ...]:
        return self.get("data", "channels")

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    def training(self, seed: int | None = None) -> TrainingConfig:
        t = {k.name: self.get("training", k.name) for k in SCHEMA["training"]}
        return TrainingConfig(seed=self.seed if seed is None else seed, **t)

    def replace(self, **updates) -> "ExperimentConfig":
        """Override values given as ``section__key=value``; re-validated."""
        vals = dict(self.values)
        for name, value in updates.items():
            section, _, key = name.partition("__")
            if (section, key) not in vals:
                raise ConfigError("unknown key", f"{section}.{key}")
            vals[(section, key)] = value
        return _validated(vals, self.base_dir)

    def to_text(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for k in keys:
                out.write(f"{k.name} = {_format(k.kind, self.values[(section, k.name)])}\n")
            out.write("\n")
        return out.getvalue()


def _validated(vals: dict, base_dir: Path) -> ExperimentConfig:
    for section, keys in SCHEMA.items():
        for k in keys:
            v = vals[(section, k.name)]
            if v is None:
                if k.name in ("bundle_dir", "out_dir"):
                    raise ConfigError("required key missing", f"{section}.{k.name}")
                continue
            if k.check is not None:
                problem = k.check(v)
                if problem:
                    raise ConfigError(problem, f"{section}.{k.name}")
    mode, tau = vals[("model", "mode")], vals[("model", "tau")]
    if mode == "one_to_one" and tau != 0:
        raise ConfigError("one_to_one needs tau = 0", "model.tau")
    if vals[("split", "protocol")] == "kfold" and vals[("split", "k")] < 2:
        raise ConfigError("kfold needs k >= 2", "split.k")
    if vals[("training", "batch_size")] % 5 and vals[("training", "balanced_batching")]:
        raise ConfigError("balanced batching needs a batch size divisible by 5",
                          "training.batch_size")
    return ExperimentConfig(vals, base_dir)


def defaults() -> dict:
    return {(s, k.name): k.default for s, keys in SCHEMA.items() for k in keys}


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    vals = defaults()
    known = {s: {k.name: k for k in keys} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in known:
            raise ConfigError("unknown section", section)
        for name, raw in parser.items(section):
            if name not in known[section]:
                raise ConfigError("unknown key", f"{section}.{name}")
            key = known[section][name]
            vals[(section, name)] = _parse(key.kind, raw, f"{section}.{name}")
    return _validated(vals, Path(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, path.parent)


def schema_text() -> str:
    """Human-readable listing of every section and key."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for k in keys:
            default = _format(k.kind, k.default) if k.default is not None else ""
            if not default and k.name in ("bundle_dir", "out_dir"):
                default = "(required)"
            doc = f"  # {k.doc}" if k.doc else ""
            lines.append(f"{k.name} = {default}  ({k.kind}){doc}")
        lines.append("")
    return "\n".join(lines)
