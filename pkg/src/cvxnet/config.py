"""Experiment configuration: a sectioned ``key = value`` text format.

Example::

    [experiment]
    kind = basket
    seed = 0

    [network]
    arch = 2-SL2SE
    n = 32

Every kind has defaults for all keys (the published settings), so a config
file only lists what it changes.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import re
from dataclasses import dataclass, field

from .network import architecture

KINDS = ("toy", "basket", "bermudan", "swing", "rates")


class ConfigError(ValueError):
    """Invalid configuration; the message names the section, key and line when known."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bands(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.split(","):
        if item.strip():
            lo, hi = item.split(":")
            out.append((int(lo), int(hi)))
    return tuple(out)


def _bool(text: str) -> bool:
    key = text.strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(_fmt(v) for v in value)
    return str(value)


_PARSERS = {int: int, float: float, str: str, bool: _bool, "floats": _floats, "ints": _ints,
            "bands": _bands}

# section -> key -> (type, default); kind-specific sections are only read for that kind.
_COMMON = {
    "experiment": {"kind": (str, "toy"), "seed": (int, 0), "out": (str, "out")},
    "network": {"arch": (str, "2-SL2SE"), "n": (int, 32), "c": (float, 20.0), "layers": (int, 0)},
    "train": {
        "iterations": (int, 1000), "batch_size": (int, 64), "lr": (float, 1e-3),
        "lr_floor": (float, 1e-5), "lr_decay": (float, 0.95), "warm_iters": (int, 100),
    },
}

_KIND_SECTIONS = {
    "toy": {"sigma_xi": (float, 2.0), "lo": (float, -7.0), "hi": (float, 7.0), "batches": (int, 100),
            "test_points": (int, 100)},
    "basket": {"d": (int, 2), "rho": (float, 0.0), "M_train": (int, 4096), "M_bench": (int, 10 ** 6),
               "pool_size": (int, 38400), "points": ("ints", (1, 2, 3, 4, 5))},
    "bermudan": {"d": (int, 2), "case": (str, "symmetric"), "s0": ("floats", (90.0, 100.0, 110.0)),
                 "K": (float, 100.0), "T": (float, 3.0), "N": (int, 9), "eval_paths": (int, 10 ** 6),
                 "pilot_paths": (int, 1 << 14)},
    "swing": {"bands": ("bands", ((20, 25), (20, 30), (20, 22))), "dt": (float, 1.0 / 360.0),
              "mode": (str, "per_volume"), "batches": (int, 5), "warm_iterations": (int, 300),
              "eval_paths": (int, 2 * 10 ** 6)},
    "rates": {"n_list": ("ints", (4, 8, 16, 32, 64)), "bound_n": ("ints", (2, 4, 8)),
              "sample_size": (int, 10 ** 6), "quantizer_n": (int, 2)},
}

# Published settings per kind, layered over the common defaults.
_KIND_DEFAULTS = {
    "toy": {"network": {"c": 10.0}, "train": {"iterations": 200, "batch_size": 4096}},
    "basket": {"network": {"c": 20.0},
               "train": {"iterations": 1500, "batch_size": 64, "lr": 1e-2, "warm_iters": 1400}},
    "bermudan": {"network": {"n": 64, "c": 40.0},
                 "train": {"iterations": 5000, "batch_size": 8192, "lr": 1e-4, "lr_floor": 1e-4,
                           "warm_iters": 5000}},
    "swing": {"network": {"n": 32, "c": 20.0},
              "train": {"iterations": 500, "batch_size": 4096, "lr": 1e-2, "lr_floor": 1e-4,
                        "lr_decay": 0.99, "warm_iters": 100}},
    "rates": {},
}


def _schema(kind: str) -> dict:
    out = copy.deepcopy(_COMMON)
    out[kind] = dict(_KIND_SECTIONS[kind])
    return out


@dataclass
class ExperimentConfig:
    """Typed values per section; ``values[section][key]``."""

    kind: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def out(self) -> str:
        return self.values["experiment"]["out"]

    @property
    def layers(self) -> int:
        return architecture(self.values["network"]["arch"])[0]

    def to_text(self) -> str:
        lines = []
        for section in ("experiment", "network", "train", self.kind):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, seed=None, out=None, arch=None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        if seed is not None:
            cfg.values["experiment"]["seed"] = int(seed)
        if out is not None:
            cfg.values["experiment"]["out"] = str(out)
        if arch is not None:
            cfg.values["network"]["arch"] = arch
            cfg.values["network"]["layers"] = 0
        cfg.validate()
        return cfg

    def validate(self, lines: dict | None = None) -> None:
        lines = lines or {}

        def where(section, key):
            ln = lines.get((section, key))
            return f"[{section}] {key}" + (f" (line {ln})" if ln else "")

        net = self.values["network"]
        try:
            layers, _ = architecture(net["arch"])
        except ValueError as exc:
            raise ConfigError(f"{where('network', 'arch')}: {exc}") from None
        if net["layers"] and net["layers"] != layers:
            raise ConfigError(f"{where('network', 'layers')}: {net['layers']} layers contradicts "
                              f"architecture {net['arch']} ({layers} layers)")
        if net["n"] < 1:
            raise ConfigError(f"{where('network', 'n')}: width must be >= 1")
        if not net["c"] > 0:
            raise ConfigError(f"{where('network', 'c')}: must be positive")
        tr = self.values["train"]
        for key in ("iterations", "batch_size"):
            if tr[key] < (0 if key == "iterations" else 1):
                raise ConfigError(f"{where('train', key)}: out of range")
        if not tr["lr"] > 0:
            raise ConfigError(f"{where('train', 'lr')}: must be positive")
        if self.seed < 0 or self.seed >= 1 << 64:
            raise ConfigError(f"{where('experiment', 'seed')}: must be a u64")
        if self.kind == "toy" and self.values["toy"]["sigma_xi"] < 0:
            raise ConfigError(f"{where('toy', 'sigma_xi')}: must be >= 0")
        if self.kind == "swing" and self.values["swing"]["mode"] not in ("shared", "per_volume"):
            raise ConfigError(f"{where('swing', 'mode')}: must be shared or per_volume")
        if self.kind == "bermudan" and self.values["bermudan"]["case"] not in ("symmetric", "asymmetric"):
            raise ConfigError(f"{where('bermudan', 'case')}: must be symmetric or asymmetric")


def default_config(kind: str) -> ExperimentConfig:
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    values = {s: {k: v for k, (_, v) in keys.items()} for s, keys in _schema(kind).items()}
    values["experiment"]["kind"] = kind
    for section, keys in _KIND_DEFAULTS[kind].items():
        values[section].update(keys)
    cfg = ExperimentConfig(kind, values)
    cfg.validate()
    return cfg


def _line_numbers(text: str) -> dict:
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
        elif section and "=" in line and not line.startswith(("#", ";")):
            out[(section, line.split("=", 1)[0].strip())] = i
    return out


def parse_config(text: str, kind: str | None = None) -> ExperimentConfig:
    """Parse config text; ``kind`` (from the subcommand) must agree with ``[experiment] kind`` if both are set."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    lines = _line_numbers(text)
    file_kind = cp.get("experiment", "kind", fallback=None)
    if kind and file_kind and file_kind != kind:
        raise ConfigError(f"[experiment] kind (line {lines.get(('experiment', 'kind'))}): "
                          f"file is for {file_kind!r}, command runs {kind!r}")
    kind = kind or file_kind
    if kind is None:
        raise ConfigError("[experiment] kind: missing")
    cfg = default_config(kind)
    schema = _schema(kind)
    for section in cp.sections():
        if section not in schema:
            raise ConfigError(f"[{section}] (line {lines.get((section, None), '?')}): unknown section for {kind}")
        for key, raw in cp.items(section):
            if key not in schema[section]:
                raise ConfigError(f"[{section}] {key} (line {lines.get((section, key))}): unknown key")
            typ = schema[section][key][0]
            try:
                cfg.values[section][key] = _PARSERS[typ](raw.strip())
            except (ValueError, TypeError):
                raise ConfigError(f"[{section}] {key} (line {lines.get((section, key))}): "
                                  f"cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None
    cfg.validate(lines)
    return cfg


def load_config(path, kind: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, kind)
