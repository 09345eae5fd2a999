"""Experiment configuration files.

An experiment is a JSON document with a ``schema`` version. It is validated
completely before any compute starts; every error names the offending field
path (``train.st-a.base_lr``) and unknown keys are rejected at every level.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .adapters import AdapterConfig
from .backbone import BackboneConfig, PretrainConfig
from .errors import AdapterFusionError, ConfigError
from .tasks import TaskSpec, default_suite_specs
from .training import TrainConfig

SCHEMA_VERSION = 1

# Summary columns in dependency order: stage 1, then stage 2.
MODES = ("head", "full", "st-a", "mt-a", "fusion-st-a", "fusion-mt-a")
MODE_LABELS = {
    "head": "Head",
    "full": "Full",
    "st-a": "ST-A",
    "mt-a": "MT-A",
    "fusion-st-a": "F.w/ST-A",
    "fusion-mt-a": "F.w/MT-A",
}
REQUIRES = {"fusion-st-a": "st-a", "fusion-mt-a": "mt-a"}
TRAIN_KEYS = ("default",) + MODES + ("grid",)

# Settings that let the default suite train in minutes on one CPU core. They
# sit between the built-in TrainConfig defaults and the config's own "train"
# section; train_scale "builtin" drops them.
TRAIN_SCALES = ("toy", "builtin")
TOY_TRAIN = {
    "stage1": {"base_lr": 3e-3, "max_epochs": 6, "batch_size": 32},
    "mt-a": {"base_lr": 1e-3, "max_epochs": 6, "batch_size": 32},
    "fusion": {"base_lr": 2e-3, "max_epochs": 5, "batch_size": 32},
}

_TOP_KEYS = {"schema", "backbone", "pretrain", "suite", "modes", "train", "train_scale", "adapter", "fusion_members",
             "output_dir", "seeds", "grid"}
_SUITE_KEYS = {"tasks", "vocab_size", "seed", "corpus_size", "include_task_text"}


def _fail(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}: {msg}" if path else msg)


def _check_types(path: str, cls, payload: Mapping) -> None:
    """Compare each value with the type of the dataclass default for that field."""
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in payload.items():
        default = defaults.get(key)
        if key not in defaults or default is None or not isinstance(default, (bool, int, float, str)):
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise _fail(f"{path}.{key}", f"expected {type(default).__name__}, got {json.dumps(value)}")


def _build(path: str, factory, payload: Any, cls=None):
    """Run a from_dict style constructor and prefix any failure with ``path``."""
    if not isinstance(payload, Mapping):
        raise _fail(path, f"expected an object, got {type(payload).__name__}")
    if cls is not None:
        _check_types(path, cls, payload)
    try:
        return factory(payload)
    except AdapterFusionError as exc:
        raise _fail(path, str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise _fail(path, f"invalid value ({exc})") from None


def _pretrain_from_dict(d: Mapping) -> PretrainConfig:
    known = {f.name for f in fields(PretrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown pretrain keys: {sorted(unknown)}")
    cfg = PretrainConfig(**d)
    if not isinstance(cfg.steps, int) or cfg.steps < 0:
        raise ConfigError("steps must be a non-negative integer")
    if not isinstance(cfg.batch_size, int) or cfg.batch_size < 1:
        raise ConfigError("batch_size must be a positive integer")
    if not 0.0 < cfg.mask_prob < 1.0:
        raise ConfigError("mask_prob must lie in (0, 1)")
    if cfg.lr <= 0 or cfg.weight_decay < 0:
        raise ConfigError("lr must be positive and weight_decay non-negative")
    return cfg


@dataclass(frozen=True)
class GridConfig:
    """Axes of the adapter architecture grid plus its probe tasks."""

    placement: tuple = ("top", "bottom", "both")
    pretrained_ln: tuple = ("before", "after", "before_and_after", "none")
    new_ln: tuple = ("none", "before", "after", "inside")
    reduction_factor: tuple = (2, 8, 16, 64)
    nonlinearity: tuple = ("relu", "leakyrelu", "swish")
    probe_tasks: tuple = ()
    max_cells: int = 600

    AXES = ("placement", "pretrained_ln", "new_ln", "reduction_factor", "nonlinearity")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k == "max_cells":
                if not isinstance(v, int) or v < 1:
                    raise ConfigError("max_cells must be a positive integer")
                kw[k] = v
            else:
                if not isinstance(v, list) or (k != "probe_tasks" and not v):
                    raise ConfigError(f"{k} must be a non-empty list")
                kw[k] = tuple(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tasks: list = field(default_factory=default_suite_specs)
    vocab_size: int | None = None
    suite_seed: int = 0
    corpus_size: int = 2000
    include_task_text: bool = False
    modes: tuple = MODES
    train: dict = field(default_factory=dict)
    train_scale: str = "toy"
    adapter: AdapterConfig = field(default_factory=AdapterConfig.pfeiffer)
    fusion_members: list | None = None
    output_dir: str | None = None
    seeds: tuple = (0, 1, 2)
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.vocab_size is None:
            self.vocab_size = self.backbone.vocab_size
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        if self.vocab_size != self.backbone.vocab_size:
            raise _fail("suite.vocab_size", f"{self.vocab_size} differs from backbone.vocab_size {self.backbone.vocab_size}")
        names = [t.name for t in self.tasks]
        if not names:
            raise _fail("suite.tasks", "at least one task is required")
        if len(set(names)) != len(names):
            raise _fail("suite.tasks", f"duplicate task names {names}")
        for i, t in enumerate(self.tasks):
            if t.max_len + 1 > self.backbone.max_seq_len:
                raise _fail(f"suite.tasks[{i}].max_len", f"{t.max_len} + CLS exceeds backbone.max_seq_len {self.backbone.max_seq_len}")
        for i, m in enumerate(self.modes):
            if m not in MODES:
                raise _fail(f"modes[{i}]", f"unknown mode {m!r}; choose from {list(MODES)}")
        for m in self.modes:
            need = REQUIRES.get(m)
            if need and need not in self.modes:
                raise _fail("modes", f"{m} needs {need} in the same experiment")
        if "mt-a" in self.modes and len(self.tasks) < 2:
            raise _fail("modes", "mt-a needs at least two tasks")
        if self.fusion_members is not None:
            for i, n in enumerate(self.fusion_members):
                if n not in names:
                    raise _fail(f"fusion_members[{i}]", f"unknown task {n!r}")
        for i, n in enumerate(self.grid.probe_tasks):
            if n not in names:
                raise _fail(f"grid.probe_tasks[{i}]", f"unknown task {n!r}")
        if not self.seeds:
            raise _fail("seeds", "at least one seed is required")
        for i, s in enumerate(self.seeds):
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                raise _fail(f"seeds[{i}]", "seeds must be non-negative integers")
        if self.train_scale not in TRAIN_SCALES:
            raise _fail("train_scale", f"choose from {list(TRAIN_SCALES)}")
        for k in self.train:
            if k not in TRAIN_KEYS:
                raise _fail(f"train.{k}", f"unknown mode; choose from {list(TRAIN_KEYS)}")
        if self.adapter.placement != ("top",) and any(m.startswith("fusion") for m in self.modes):
            raise _fail("adapter.placement", "fusion modes compose top-placed adapters only")

    # -- derived ------------------------------------------------------------

    def members(self) -> list[str]:
        return list(self.fusion_members) if self.fusion_members is not None else [t.name for t in self.tasks]

    def probe_tasks(self) -> list[str]:
        return list(self.grid.probe_tasks) or [t.name for t in self.tasks[:3]]

    def train_config(self, mode: str, seed: int | None = None) -> TrainConfig:
        """Mode defaults, the toy-scale layer, ``train.default``, then ``train.<mode>``."""
        if mode.startswith("fusion"):
            base, toy = TrainConfig.fusion_defaults(), TOY_TRAIN["fusion"]
        else:
            base, toy = TrainConfig.adapter_defaults(), TOY_TRAIN.get(mode, TOY_TRAIN["stage1"])
        if self.train_scale == "toy":
            base = replace(base, **toy)
        cfg = TrainConfig.from_dict(self.train.get("default", {}), base)
        cfg = TrainConfig.from_dict(self.train.get(mode, {}), cfg)
        return replace(cfg, seed=seed) if seed is not None else cfg

    def suite_fingerprint(self) -> str:
        payload = {"tasks": [t.to_dict() for t in self.tasks], "vocab_size": self.vocab_size, "seed": self.suite_seed,
                   "corpus_size": self.corpus_size, "include_task_text": self.include_task_text}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "backbone": self.backbone.to_dict(),
            "pretrain": {f.name: getattr(self.pretrain, f.name) for f in fields(self.pretrain)},
            "suite": {
                "tasks": [t.to_dict() for t in self.tasks],
                "vocab_size": self.vocab_size,
                "seed": self.suite_seed,
                "corpus_size": self.corpus_size,
                "include_task_text": self.include_task_text,
            },
            "modes": list(self.modes),
            "train": {k: dict(v) for k, v in self.train.items()},
            "train_scale": self.train_scale,
            "adapter": self.adapter.to_dict(),
            "fusion_members": self.fusion_members,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "grid": self.grid.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise _fail("", "config root must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise _fail(sorted(unknown)[0], "unknown key")
        if "schema" not in d:
            raise _fail("schema", "missing schema version")
        if d["schema"] != SCHEMA_VERSION:
            raise _fail("schema", f"unsupported version {d['schema']!r} (expected {SCHEMA_VERSION})")
        kw: dict[str, Any] = {}
        if "backbone" in d:
            kw["backbone"] = _build("backbone", BackboneConfig.from_dict, d["backbone"], BackboneConfig)
        if "pretrain" in d:
            kw["pretrain"] = _build("pretrain", _pretrain_from_dict, d["pretrain"], PretrainConfig)
        if "suite" in d:
            suite = d["suite"]
            if not isinstance(suite, Mapping):
                raise _fail("suite", "expected an object")
            bad = set(suite) - _SUITE_KEYS
            if bad:
                raise _fail(f"suite.{sorted(bad)[0]}", "unknown key")
            if "tasks" in suite:
                if not isinstance(suite["tasks"], list):
                    raise _fail("suite.tasks", "expected a list")
                kw["tasks"] = [_build(f"suite.tasks[{i}]", TaskSpec.from_dict, t, TaskSpec) for i, t in enumerate(suite["tasks"])]
            for src, dst in (("vocab_size", "vocab_size"), ("seed", "suite_seed"), ("corpus_size", "corpus_size"),
                             ("include_task_text", "include_task_text")):
                if src in suite:
                    kw[dst] = suite[src]
            if "corpus_size" in kw and (not isinstance(kw["corpus_size"], int) or kw["corpus_size"] < 1):
                raise _fail("suite.corpus_size", "must be a positive integer")
            if "include_task_text" in kw and not isinstance(kw["include_task_text"], bool):
                raise _fail("suite.include_task_text", "must be a boolean")
        if "modes" in d:
            if not isinstance(d["modes"], list):
                raise _fail("modes", "expected a list")
            kw["modes"] = tuple(d["modes"])
        if "train" in d:
            train = d["train"]
            if not isinstance(train, Mapping):
                raise _fail("train", "expected an object")
            for k, v in train.items():
                if k not in TRAIN_KEYS:
                    raise _fail(f"train.{k}", f"unknown mode; choose from {list(TRAIN_KEYS)}")
                _build(f"train.{k}", TrainConfig.from_dict, v, TrainConfig)
            kw["train"] = {k: dict(v) for k, v in train.items()}
        if "train_scale" in d:
            kw["train_scale"] = d["train_scale"]
        if "adapter" in d:
            kw["adapter"] = _build("adapter", AdapterConfig.from_dict, d["adapter"], AdapterConfig)
        if d.get("fusion_members") is not None:
            if not isinstance(d["fusion_members"], list):
                raise _fail("fusion_members", "expected a list of task names")
            kw["fusion_members"] = list(d["fusion_members"])
        if d.get("output_dir") is not None:
            kw["output_dir"] = str(d["output_dir"])
        if "seeds" in d:
            if not isinstance(d["seeds"], list):
                raise _fail("seeds", "expected a list")
            kw["seeds"] = tuple(d["seeds"])
        if "grid" in d:
            kw["grid"] = _build("grid", GridConfig.from_dict, d["grid"])
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise _fail("", f"invalid value ({exc})") from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return ExperimentConfig.from_dict(data)
