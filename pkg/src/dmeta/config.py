"""Run configuration: line-oriented ``key=value`` text with dotted sections.

Example::

    seed = 3
    dataset.name = omniglot
    dataset.root = /data/omniglot
    meta.mode = divergent-qd
    meta.meta_iterations = 2000
    inner.joint_steps = 20
    eval.num_tasks = 600

Blank lines and ``#`` comments are ignored. Later assignments win, so
command-line overrides are simply appended.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from dmeta.errors import InvalidArgumentError
from dmeta.inner import InnerLoopConfig
from dmeta.model import NetworkSpec
from dmeta.outer import MetaConfig

DATA_ROOT_ENV = "DMETA_DATA_ROOT"


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    root: str = ""
    synthetic_pretraining_classes: int = 200
    synthetic_evaluation_classes: int = 100
    synthetic_per_class: int = 20
    synthetic_seed: int = 0
    synthetic_jitter: float = 1.6


@dataclass
class NetworkConfig:
    channels: int = 0  # 0 = dataset default (64 Omniglot-like, 32 Mini-ImageNet)


@dataclass
class EvalConfig:
    way: int = 5
    shot: int = 5
    queries: int = 1
    num_tasks: int = 100
    steps: int = 50
    lr: float = 1e-3
    transductive: bool = True


# meta fields that are driven by top-level keys
_META_TOP_LEVEL = ("seed", "workers", "checkpoint_every")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    workers: int = 1
    checkpoint_every: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = ("dataset", "network", "meta", "inner", "eval")

    def resolved_meta(self):
        workers = self.workers if self.workers > 0 else (os.cpu_count() or 1)
        return replace(self.meta, seed=self.seed, workers=workers, checkpoint_every=self.checkpoint_every)

    def effective_workers(self):
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def network_spec(self):
        name = self.dataset.name
        if name == "mini-imagenet":
            spec = NetworkSpec.mini_imagenet(self.meta.way)
        elif name in ("omniglot", "synthetic"):
            spec = NetworkSpec.omniglot(self.meta.way)
        else:
            raise InvalidArgumentError(f"unknown dataset {name!r}")
        if self.network.channels:
            spec = replace(spec, channels=self.network.channels)
        return spec

    def data_root(self):
        return self.dataset.root or os.environ.get(DATA_ROOT_ENV, "")


def _coerce(value, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _assign(values, key, raw):
    if "." in key:
        section, _, name = key.partition(".")
        if section not in RunConfig._SECTIONS:
            raise InvalidArgumentError(f"unknown config section {section!r}")
        values.setdefault(section, {})[name] = raw
    else:
        values[key] = raw


def parse_lines(lines, values=None):
    """Collect raw ``key=value`` strings; returns a nested dict."""
    values = {} if values is None else values
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        _assign(values, key.strip(), raw.strip())
    return values


def build(values):
    """Turn raw strings into a typed :class:`RunConfig`."""
    base = RunConfig()
    top = {}
    sections = {}
    try:
        for key, raw in values.items():
            if key in RunConfig._SECTIONS:
                section = getattr(base, key)
                known = {f.name: getattr(section, f.name) for f in fields(section)}
                parsed = {}
                for name, v in raw.items():
                    if name not in known or (key == "meta" and name in _META_TOP_LEVEL):
                        raise InvalidArgumentError(f"unknown config key {key}.{name}")
                    parsed[name] = _coerce(v, known[name])
                sections[key] = replace(section, **parsed)
            else:
                if key not in ("seed", "output_dir", "workers", "checkpoint_every"):
                    raise InvalidArgumentError(f"unknown config key {key!r}")
                top[key] = _coerce(raw, getattr(base, key))
    except ValueError as exc:
        if isinstance(exc, InvalidArgumentError):
            raise
        raise InvalidArgumentError(str(exc)) from exc
    return replace(base, **top, **sections)


def load(path=None, overrides=()):
    values = {}
    if path:
        with open(path) as fh:
            parse_lines(fh, values)
    parse_lines(overrides, values)
    return build(values)


def dump(config):
    """Serialize every field, one ``key = value`` line each."""
    lines = [f"{k} = {getattr(config, k)}" for k in ("seed", "output_dir", "workers", "checkpoint_every")]
    for section in RunConfig._SECTIONS:
        obj = getattr(config, section)
        for f in fields(obj):
            if section == "meta" and f.name in _META_TOP_LEVEL:
                continue
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
