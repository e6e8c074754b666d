"""Run configuration: flat dotted keys from a text file, overridden by flags.

A config file holds one ``key = value`` per line (``#`` starts a comment)::

    adapters.N = 8
    train.lambda = 0.1
    output_dir = runs/ref

Flags use the same keys (``--train.lambda 2``); a few short aliases such as
``--lambda`` map onto their dotted key.
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .adapters import AdapterSpec
from .backbone import ModelConfig
from .bench.tasks import BenchSizes
from .errors import ConfigError
from .training import TrainConfig

logger = logging.getLogger(__name__)

_SECTION = "run"


@dataclass
class BenchConfig:
    seed: int = 0
    sizes: BenchSizes = field(default_factory=BenchSizes)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapters: AdapterSpec = field(default_factory=AdapterSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output_dir: str = "runs/default"

    def flat(self) -> Dict[str, object]:
        """Every key with its materialized value, in stable order."""
        return {key: getter(self) for key, (getter, _, _) in _KEYS.items()}

    def with_seed(self, seed: int) -> "RunConfig":
        values = {k: _render(v) for k, v in self.flat().items()}
        values["train.seed"] = str(seed)
        return build_config(values)


# ---------------------------------------------------------------- value parsing
def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean (true/false), got {text!r}")


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("none", "") else float(text)


def _parse_optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("none", "") else int(text)


def _parse_sites(text: str) -> Optional[Tuple[str, ...]]:
    text = text.strip()
    if text.lower() in ("none", "all", "default", ""):
        return None
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _key_table():
    table = {}

    def add(key, section, attr, parse, expect):
        if section == "sizes":
            get = lambda cfg: getattr(cfg.bench.sizes, attr)
        elif section is None:
            get = lambda cfg: getattr(cfg, attr)
        else:
            get = lambda cfg: getattr(getattr(cfg, section), attr)
        table[key] = (get, parse, expect)

    for f in fields(ModelConfig):
        add(f"model.{f.name}", "model", f.name, int, "a positive integer")
    add("adapters.mode", "adapters", "mode", str, "one of none, lora, molora")
    add("adapters.N", "adapters", "N", _parse_optional_int, "an integer N >= 1")
    add("adapters.r", "adapters", "r", _parse_optional_int, "an integer r >= 1")
    add("adapters.alpha_scaling", "adapters", "alpha_scaling", float, "a float")
    add("adapters.dropout_p", "adapters", "dropout_p", float, "a float in [0, 1)")
    add("adapters.router", "adapters", "router", _parse_bool, "true or false")
    add("adapters.sites", "adapters", "sites", _parse_sites, "comma-separated site ids, e.g. layers.0.q")
    for f in fields(TrainConfig):
        key = "lambda" if f.name == "lam" else f.name
        if f.name == "max_grad_norm":
            parse, expect = _parse_optional_float, "a float > 0 or none"
        elif f.type in ("int", int):
            parse, expect = int, "an integer"
        else:
            parse, expect = float, "a float"
        add(f"train.{key}", "train", f.name, parse, expect)
    add("bench.seed", "bench", "seed", int, "an integer")
    for f in fields(BenchSizes):
        add(f"bench.{f.name}", "sizes", f.name, int, "an integer >= 1")
    add("output_dir", None, "output_dir", str, "a directory path")
    return table


_KEYS = _key_table()
VALID_KEYS: Tuple[str, ...] = tuple(_KEYS)
ALIASES: Dict[str, str] = {
    "lambda": "train.lambda",
    "lam": "train.lambda",
    "lr": "train.lr",
    "epochs": "train.epochs",
    "seed": "train.seed",
    "N": "adapters.N",
    "r": "adapters.r",
}


def canonical_key(key: str) -> str:
    key = key.strip()
    if key.startswith("--"):
        key = key[2:].replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in _KEYS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
    return key


# ---------------------------------------------------------------- building
def build_config(values: Mapping[str, str]) -> RunConfig:
    """Validate raw string values (keys already canonical) into a RunConfig."""
    parsed: Dict[str, object] = {}
    for key, raw in values.items():
        key = canonical_key(key)
        _, parse, expect = _KEYS[key]
        try:
            parsed[key] = parse(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError):
            raise ConfigError(f"invalid value for {key}: {raw!r} (expected {expect})") from None

    def section(prefix: str) -> Dict[str, object]:
        out = {}
        for key, value in parsed.items():
            if key.startswith(prefix + "."):
                name = key[len(prefix) + 1 :]
                out["lam" if name == "lambda" else name] = value
        return out

    model = ModelConfig(**section("model"))
    adapters = AdapterSpec(**section("adapters"))
    train = TrainConfig(**section("train"))
    bench_values = section("bench")
    bench_seed = bench_values.pop("seed", 0)
    bench = BenchConfig(seed=int(bench_seed), sizes=BenchSizes(**bench_values))
    output_dir = str(parsed.get("output_dir", RunConfig.output_dir))
    if not output_dir:
        raise ConfigError("output_dir must be a non-empty path")
    return RunConfig(model=model, adapters=adapters, train=train, bench=bench, output_dir=output_dir)


def read_config_file(path: str) -> Dict[str, str]:
    """Raw ``key -> value`` strings from a flat dotted-key file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    with open(path) as fh:
        text = fh.read()
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None
    return {canonical_key(k): v for k, v in parser.items(_SECTION)}


def parse_overrides(tokens: Iterable[str]) -> Dict[str, str]:
    """``['--train.lr', '1e-3', '--lambda=2']`` -> canonical key/value strings."""
    tokens = list(tokens)
    out: Dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; config overrides look like --key value")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            key, value = tok[2:], tokens[i + 1]
            i += 2
        out[canonical_key(key)] = value
    return out


def parse_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """File values first, then flag overrides; everything validated before returning."""
    values: Dict[str, str] = {}
    if path:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        values[canonical_key(key)] = value
    return build_config(values)


def render_config(cfg: RunConfig) -> str:
    """The config as a flat dotted-key file that parses back to itself."""
    return "".join(f"{key} = {_render(value)}\n" for key, value in cfg.flat().items())


def config_dict(cfg: RunConfig) -> Dict[str, object]:
    return {key: (list(v) if isinstance(v, tuple) else v) for key, v in cfg.flat().items()}
