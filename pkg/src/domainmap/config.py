"""Strict YAML run configuration and the built-in desk-scale presets.

A config has up to six top-level sections, all optional::

    corpus:            {synth: {n, size, seed} | dir: PATH, pattern: "*.png", n_test: 8}
    transfer_corpus:   same shape as corpus (SR cross-dataset test set)
    degradations:      {name: [step, ...]}
    models:            {name: {n_groups, n_blocks_per_group, channels, reduction, ...}}
    training:          {defaults: {TrainConfig fields}, roles: {role or family: {fields}}}
    experiment:        {kind, branches, model, unknown, transfer_unknown, blur_to,
                        blur_from, noise_db, sigmas, warm_start_specialized, seed, output_dir}

Degradation steps are one-key mappings::

    - blur: {size: 9, sigma: 2.0}     # or just `blur: 9`
    - bicubic_down: 4
    - bicubic_up: 2
    - noise: {target_psnr_db: 40, seed: 1}   # or just `noise: 40`

Any key not listed above is rejected.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import yaml

from . import datasets as ds
from .degradation import BicubicDown, BicubicUp, Blur, DegradationSpec, Noise
from .models import ModelConfig
from .pipeline import BRANCHES, RESTORE_BRANCHES, SR_BRANCHES
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _check_keys(d: Any, allowed, where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    return d


@dataclass
class CorpusConfig:
    synth: Optional[Dict[str, int]] = None
    dir: Optional[str] = None
    pattern: str = "*.png"
    n_test: int = 8

    def load(self) -> List[ds.ImageRecord]:
        if self.dir:
            return ds.load_dir(self.dir, self.pattern)
        s = self.synth or {}
        return ds.synth_corpus(int(s.get("n", 40)), int(s.get("size", 64)), int(s.get("seed", 0)))

    def split(self) -> Tuple[List[ds.ImageRecord], List[ds.ImageRecord]]:
        return ds.split(self.load(), self.n_test)


def parse_corpus(d: Any, where: str) -> CorpusConfig:
    d = _check_keys(d, {"synth", "dir", "pattern", "n_test"}, where)
    if d.get("synth") is not None and d.get("dir") is not None:
        raise ConfigError(f"{where}: give either 'synth' or 'dir', not both")
    synth = _check_keys(d.get("synth"), {"n", "size", "seed"}, f"{where}.synth") or None
    return CorpusConfig(synth=synth, dir=d.get("dir"), pattern=d.get("pattern", "*.png"),
                        n_test=int(d.get("n_test", 8)))


def parse_step(item: Any, where: str):
    if not isinstance(item, dict) or len(item) != 1:
        raise ConfigError(f"{where}: each step must be a one-key mapping, got {item!r}")
    (kind, arg), = item.items()
    try:
        if kind == "blur":
            if isinstance(arg, dict):
                _check_keys(arg, {"size", "sigma"}, f"{where}.blur")
                return Blur(int(arg["size"]), arg.get("sigma"))
            return Blur(int(arg))
        if kind == "bicubic_down":
            return BicubicDown(int(arg))
        if kind == "bicubic_up":
            return BicubicUp(int(arg))
        if kind == "noise":
            if isinstance(arg, dict):
                _check_keys(arg, {"target_psnr_db", "seed"}, f"{where}.noise")
                return Noise(float(arg["target_psnr_db"]), int(arg.get("seed", 0)))
            return Noise(float(arg))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{where}: invalid {kind} step: {e}") from None
    raise ConfigError(f"{where}: unknown step kind {kind!r}; use blur, bicubic_down, bicubic_up or noise")


def parse_spec(steps: Any, where: str) -> DegradationSpec:
    if steps is None:
        return DegradationSpec()
    if not isinstance(steps, list):
        raise ConfigError(f"{where}: expected a list of steps")
    return DegradationSpec([parse_step(s, f"{where}[{i}]") for i, s in enumerate(steps)])


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _train_overrides(d: Any, where: str) -> dict:
    d = dict(_check_keys(d, _TRAIN_KEYS, where))
    return d


@dataclass
class ExperimentConfig:
    kind: str = "sr"
    branches: Optional[List[str]] = None
    model: str = "desk"
    unknown: str = "unknown"
    transfer_unknown: Optional[str] = None
    blur_to: int = 9
    blur_from: List[int] = field(default_factory=lambda: [7, 11])
    noise_db: float = 40.0
    sigmas: Dict[int, float] = field(default_factory=dict)
    warm_start_specialized: Optional[bool] = None
    seed: int = 0
    output_dir: Optional[str] = None

    @property
    def branch_list(self) -> List[str]:
        if self.branches:
            return list(self.branches)
        return list(SR_BRANCHES if self.kind == "sr" else RESTORE_BRANCHES)


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    transfer_corpus: Optional[CorpusConfig] = None
    degradations: Dict[str, DegradationSpec] = field(default_factory=dict)
    models: Dict[str, dict] = field(default_factory=lambda: {"desk": {}})
    training_defaults: dict = field(default_factory=dict)
    training_roles: Dict[str, dict] = field(default_factory=dict)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def spec(self, name: str) -> DegradationSpec:
        if name not in self.degradations:
            avail = ", ".join(sorted(self.degradations)) or "(none)"
            raise ConfigError(f"unknown degradation {name!r}; available: {avail}")
        return self.degradations[name]

    def model_config(self, name: Optional[str] = None, scale: int = 1) -> ModelConfig:
        name = name or self.experiment.model
        if name not in self.models:
            avail = ", ".join(sorted(self.models)) or "(none)"
            raise ConfigError(f"unknown model {name!r}; available: {avail}")
        kw = dict(self.models[name])
        kw.setdefault("scale", scale)
        try:
            return ModelConfig(**kw)
        except ValueError as e:
            raise ConfigError(f"models.{name}: {e}") from None

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        kw = dict(self.training_defaults)
        kw["seed"] = self.experiment.seed if seed is None else seed
        total = int(kw.pop("total_iters", 2000))
        patch = int(kw.pop("patch_size", 16))
        try:
            return TrainConfig.desk(total_iters=total, patch_size=patch, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"training.defaults: {e}") from None


def parse_run_config(doc: Any) -> RunConfig:
    doc = _check_keys(doc, {"corpus", "transfer_corpus", "degradations", "models", "training", "experiment"},
                      "config")
    cfg = RunConfig()
    if "corpus" in doc:
        cfg.corpus = parse_corpus(doc["corpus"], "corpus")
    if doc.get("transfer_corpus") is not None:
        cfg.transfer_corpus = parse_corpus(doc["transfer_corpus"], "transfer_corpus")
    degs = _check_keys(doc.get("degradations"), set(doc.get("degradations") or {}), "degradations")
    cfg.degradations = {str(k): parse_spec(v, f"degradations.{k}") for k, v in degs.items()}
    if "models" in doc:
        models = _check_keys(doc["models"], set(doc["models"] or {}), "models")
        cfg.models = {str(k): dict(_check_keys(v, _MODEL_KEYS, f"models.{k}")) for k, v in models.items()}
    tr = _check_keys(doc.get("training"), {"defaults", "roles"}, "training")
    cfg.training_defaults = _train_overrides(tr.get("defaults"), "training.defaults")
    roles = tr.get("roles") or {}
    if not isinstance(roles, dict):
        raise ConfigError("training.roles: expected a mapping")
    cfg.training_roles = {str(k): _train_overrides(v, f"training.roles.{k}") for k, v in roles.items()}
    ex = _check_keys(doc.get("experiment"), {f.name for f in fields(ExperimentConfig)}, "experiment")
    e = ExperimentConfig(**ex)
    if e.kind not in ("sr", "restore"):
        raise ConfigError(f"experiment.kind must be 'sr' or 'restore', got {e.kind!r}")
    allowed = SR_BRANCHES if e.kind == "sr" else RESTORE_BRANCHES
    for b in e.branches or []:
        if b not in allowed:
            raise ConfigError(f"experiment.branches: {b!r} is not a {e.kind} branch; choose from {', '.join(allowed)}")
    e.sigmas = {int(k): float(v) for k, v in (e.sigmas or {}).items()}
    e.blur_from = [int(b) for b in e.blur_from]
    cfg.experiment = e
    _resolve(cfg, explicit="experiment" in doc)
    return cfg


def _resolve(cfg: RunConfig, explicit: bool) -> None:
    """Check that every name the experiment section references exists."""
    e = cfg.experiment
    if e.model not in cfg.models:
        raise ConfigError(f"experiment.model {e.model!r} is not defined under models")
    cfg.model_config(e.model)
    if e.kind == "sr" and explicit:
        cfg.spec(e.unknown)
        if e.transfer_unknown:
            cfg.spec(e.transfer_unknown)
    if e.kind == "restore":
        for b in [e.blur_to, *e.blur_from]:
            try:
                Blur(b)
            except ValueError as err:
                raise ConfigError(f"experiment: {err}") from None


def load_run_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    doc: dict = {}
    if path:
        try:
            with open(path) as f:
                doc = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if overrides:
        doc = deep_merge(overrides, doc)
    return parse_run_config(doc)


def deep_merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (top or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


DESK_MODEL = {"n_groups": 2, "n_blocks_per_group": 2, "channels": 16, "reduction": 4}

PRESETS: Dict[str, dict] = {
    "sr-desk": {
        "corpus": {"synth": {"n": 40, "size": 64, "seed": 0}, "n_test": 8},
        "transfer_corpus": {"synth": {"n": 8, "size": 64, "seed": 1}, "n_test": 1},
        "degradations": {
            "unknown": [{"blur": {"size": 7, "sigma": 1.2}}, {"bicubic_down": 4},
                        {"noise": {"target_psnr_db": 45, "seed": 11}}],
            "unknown_b": [{"blur": {"size": 9, "sigma": 1.8}}, {"bicubic_down": 4},
                          {"noise": {"target_psnr_db": 40, "seed": 12}}],
        },
        "models": {"desk": DESK_MODEL},
        "training": {"defaults": {"total_iters": 4000, "patch_size": 16, "batch_size": 8, "lr0": 1e-3}},
        "experiment": {"kind": "sr", "unknown": "unknown", "transfer_unknown": "unknown_b",
                       "warm_start_specialized": False},
    },
    "restore-desk": {
        "corpus": {"synth": {"n": 40, "size": 64, "seed": 0}, "n_test": 8},
        "models": {"desk": DESK_MODEL},
        "training": {
            "defaults": {"total_iters": 5000, "patch_size": 32, "batch_size": 8, "lr0": 1e-3},
            "roles": {"map": {"total_iters": 600}, "specialized": {"total_iters": 400}},
        },
        "experiment": {"kind": "restore", "blur_to": 9, "blur_from": [7, 11], "noise_db": 40,
                       "warm_start_specialized": True},
    },
}
