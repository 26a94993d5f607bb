"""Branch planning, training and evaluation for the two-stage experiments.

Super-resolution (x4) branches::

    Direct4                    unknown_x4 --[x4 trained on unknown->GT]--> GT
    MappingSame_OffShelf2x2    unknown_x4 --map(1)--> bicubic_down4 --offshelf x2--> bicubic_down2 --offshelf x2--> GT
    MappingSame_OffShelf4      unknown_x4 --map(1)--> bicubic_down4 --offshelf x4--> GT
    MappingSame_Specialized4   unknown_x4 --map(1)--> bicubic_down4* --specialized x4--> GT
    Mapping2x_OffShelf2        unknown_x4 --map(2)--> bicubic_down2 --offshelf x2--> GT
    Mapping2x_Specialized2     unknown_x4 --map(2)--> bicubic_down2* --specialized x2--> GT

Restoration branches (scale 1), for a source blur ``f`` and intermediate blur ``t``::

    Restore_Direct(f)                 blur_f --restorer trained on blur_t--> GT
    Restore_Mapped(f, t)              blur_f --map--> blur_t --restorer_t--> GT
    Restore_MappedSpecialized(f, t)   blur_f --map--> blur_t* --specialized--> GT

A ``*`` marks a mapped domain, i.e. the output of a trained mapping network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import datasets as ds
from . import degradation as deg
from . import metrics
from .datasets import ImageRecord, PairedDataset
from .degradation import BicubicDown, Blur, DegradationSpec, Noise
from .models import Model, ModelConfig
from .tensor_core import Tensor
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

SR_BRANCHES = (
    "Direct4",
    "MappingSame_OffShelf2x2",
    "MappingSame_OffShelf4",
    "MappingSame_Specialized4",
    "Mapping2x_OffShelf2",
    "Mapping2x_Specialized2",
)
RESTORE_BRANCHES = ("Restore_Direct", "Restore_Mapped", "Restore_MappedSpecialized")
BRANCHES = SR_BRANCHES + RESTORE_BRANCHES

# column labels used in the summary tables
SR_COLUMN = {
    "Direct4": "Direct x4 SR",
    "MappingSame_OffShelf2x2": "Mapping + off-the-shelf x2x2 SR",
    "MappingSame_OffShelf4": "Mapping + off-the-shelf x4 SR",
    "MappingSame_Specialized4": "Mapping + specialized x4 SR",
    "Mapping2x_OffShelf2": "Mapping x2 + off-the-shelf x2 SR",
    "Mapping2x_Specialized2": "Mapping x2 + specialized x2 SR",
}


class ChainError(ValueError):
    """A composition whose domains or scales do not line up."""


# --------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class StageSpec:
    role: str
    scale: int
    in_domain: str
    out_domain: str


@dataclass(frozen=True)
class PipelineSpec:
    branch: str
    stages: Tuple[StageSpec, ...]
    task_scale: int
    blur_from: Optional[int] = None
    blur_to: Optional[int] = None

    @property
    def name(self) -> str:
        return branch_label(self.branch, self.blur_from, self.blur_to)


def branch_label(branch: str, blur_from: Optional[int] = None, blur_to: Optional[int] = None) -> str:
    """Short column label; restoration branches use source-mapped-target labels such as 7Mapped9."""
    if branch == "Restore_Direct":
        return f"{blur_from}x{blur_from}"
    if branch == "Restore_Mapped":
        return f"{blur_from}Mapped{blur_to}"
    if branch == "Restore_MappedSpecialized":
        return f"{blur_from}Mapped{blur_to}*"
    return branch


def validate_chain(stages: Sequence[StageSpec], task_scale: int) -> None:
    """Reject compositions whose domains do not chain or whose scales miss the task."""
    if not stages:
        raise ChainError("empty pipeline")
    for a, b in zip(stages, stages[1:]):
        if a.out_domain != b.in_domain:
            raise ChainError(f"stage {a.role!r} outputs {a.out_domain!r} but {b.role!r} expects {b.in_domain!r}")
    net = math.prod(s.scale for s in stages)
    if net != task_scale:
        raise ChainError(
            f"net scale {net} of chain {[s.role for s in stages]} does not match task scale {task_scale}"
        )


def plan_branch(branch: str, blur_from: Optional[int] = None, blur_to: Optional[int] = None) -> PipelineSpec:
    """Static stage layout (roles, scales, domains) for one branch, validated."""
    U, B4, B2, GT = "unknown_x4", "bicubic_down4", "bicubic_down2", "GT"
    S = StageSpec
    if branch == "Direct4":
        stages = (S("direct_x4", 4, U, GT),)
    elif branch == "MappingSame_OffShelf2x2":
        stages = (S("map_same", 1, U, B4), S("offshelf_x2", 2, B4, B2), S("offshelf_x2", 2, B2, GT))
    elif branch == "MappingSame_OffShelf4":
        stages = (S("map_same", 1, U, B4), S("offshelf_x4", 4, B4, GT))
    elif branch == "MappingSame_Specialized4":
        stages = (S("map_same", 1, U, B4 + "*"), S("specialized_x4", 4, B4 + "*", GT))
    elif branch == "Mapping2x_OffShelf2":
        stages = (S("map_x2", 2, U, B2), S("offshelf_x2", 2, B2, GT))
    elif branch == "Mapping2x_Specialized2":
        stages = (S("map_x2", 2, U, B2 + "*"), S("specialized_x2", 2, B2 + "*", GT))
    elif branch in RESTORE_BRANCHES:
        if blur_from is None or blur_to is None:
            raise ValueError(f"{branch} needs blur_from and blur_to")
        f, t = f"blur{blur_from}", f"blur{blur_to}"
        if branch == "Restore_Direct":
            stages = (S(f"restorer_{t}", 1, f, GT),)
        elif branch == "Restore_Mapped":
            stages = (S(f"map_{f}_to_{t}", 1, f, t), S(f"restorer_{t}", 1, t, GT))
        else:
            stages = (S(f"map_{f}_to_{t}", 1, f, t + "*"), S(f"specialized_{f}_to_{t}", 1, t + "*", GT))
    else:
        raise ValueError(f"unknown branch {branch!r}; choose from {', '.join(BRANCHES)}")
    spec = PipelineSpec(branch, stages, 4 if branch in SR_BRANCHES else 1, blur_from, blur_to)
    validate_chain(spec.stages, spec.task_scale)
    return spec


# --------------------------------------------------------------------------
# composition


class IdentityStage:
    """Scale-1 pass-through, handy for composition checks."""

    scale = 1

    def predict(self, x: Tensor) -> Tensor:
        return Tensor(np.clip(x.data, 0.0, 1.0))


@dataclass
class Stage:
    model: object  # Model or anything with .scale and .predict
    in_domain: str
    out_domain: str
    role: str = ""

    @property
    def scale(self) -> int:
        return int(self.model.scale)

    @property
    def spec(self) -> StageSpec:
        return StageSpec(self.role, self.scale, self.in_domain, self.out_domain)


class Pipeline:
    """Callable chain of stages; every intermediate is clipped to [0, 1]."""

    def __init__(self, stages: Sequence[Stage], task_scale: Optional[int] = None):
        self.stages = list(stages)
        validate_chain([s.spec for s in self.stages],
                       task_scale if task_scale is not None else math.prod(s.scale for s in self.stages))
        self.scale = math.prod(s.scale for s in self.stages)

    def predict(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        for s in self.stages:
            x = s.model.predict(x)
        return x

    __call__ = predict


def compose(stages: Sequence, task_scale: Optional[int] = None) -> Pipeline:
    """Chain models or :class:`Stage` objects.

    Bare models get generic domains so only the scale chain is checked.
    """
    wrapped = []
    for i, s in enumerate(stages):
        if isinstance(s, Stage):
            wrapped.append(s)
        else:
            wrapped.append(Stage(s, f"d{i}", f"d{i + 1}", role=f"stage{i}"))
    return Pipeline(wrapped, task_scale)


# --------------------------------------------------------------------------
# model store


def corpus_digest(records: Sequence[ImageRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.id.encode())
        h.update(np.ascontiguousarray(r.pixels.data, dtype="<f4").tobytes())
    return h.hexdigest()


def config_digest(*parts) -> str:
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if hasattr(x, "to_dict"):
        return x.to_dict()
    if isinstance(x, DegradationSpec):
        return [type(s).__name__ + json.dumps(asdict(s), sort_keys=True) for s in x.steps]
    if hasattr(x, "__dataclass_fields__"):
        return asdict(x)
    return x


class ModelStore:
    """Named trained models, optionally mirrored to a checkpoint directory.

    The directory holds ``<key>.ckpt`` files and ``manifest.json`` mapping
    each key to its task, scale and digests. A model already on disk under
    the same key is loaded instead of retrained.
    """

    def __init__(self, root: Optional[str] = None):
        self.root = root
        self.models: Dict[str, Model] = {}
        self.histories: Dict[str, List[float]] = {}
        self.manifest: Dict[str, dict] = {}
        if root:
            os.makedirs(root, exist_ok=True)
            mpath = os.path.join(root, "manifest.json")
            if os.path.exists(mpath):
                with open(mpath) as f:
                    self.manifest = json.load(f)

    @staticmethod
    def key(task: str, scale: int, corpus: str, cfg: str) -> str:
        return f"{task}_x{scale}_{corpus[:12]}_{cfg[:8]}"

    def get(self, key: str) -> Optional[Model]:
        if key in self.models:
            return self.models[key]
        if self.root and key in self.manifest:
            path = os.path.join(self.root, f"{key}.ckpt")
            if os.path.exists(path):
                model = load_checkpoint(path).build_model()
                self.models[key] = model
                return model
        return None

    def put(self, key: str, model: Model, ckpt: Checkpoint, history: List[float], info: dict) -> None:
        self.models[key] = model
        self.histories[key] = history
        if self.root:
            save_checkpoint(ckpt, os.path.join(self.root, f"{key}.ckpt"))
            self.manifest[key] = dict(info, file=f"{key}.ckpt", digest=ckpt.digest())
            from .trainer import atomic_write

            atomic_write(os.path.join(self.root, "manifest.json"),
                         (json.dumps(self.manifest, indent=2, sort_keys=True) + "\n").encode())

    def train_or_load(self, task: str, dataset: PairedDataset, model_cfg: ModelConfig,
                      train_cfg: TrainConfig, corpus: str, init: Optional[Model] = None) -> Model:
        cfg = config_digest(model_cfg, train_cfg, dataset.input_domain, dataset.target_domain,
                            _init_digest(init))
        key = self.key(task, model_cfg.scale, corpus, cfg)
        cached = self.get(key)
        if cached is not None:
            log.info("reusing %s", key)
            return cached
        model = Model(model_cfg, seed=train_cfg.seed)
        if init is not None:
            model.load_state_dict(init.state_dict())
        log.info("training %s (%d iters, %d pairs)", key, train_cfg.total_iters, len(dataset))
        ckpt, history = train(model, dataset, train_cfg)
        self.put(key, model, ckpt, history,
                 {"task": task, "scale": model_cfg.scale, "corpus": corpus, "config": cfg,
                  "input_domain": dataset.input_domain, "target_domain": dataset.target_domain})
        return model


def _init_digest(model: Optional[Model]) -> Optional[str]:
    if model is None:
        return None
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# stage training


def train_offshelf(scale: int, gt: Sequence[ImageRecord], model_cfg: ModelConfig, train_cfg: TrainConfig,
                   store: Optional[ModelStore] = None) -> Model:
    """SR model on (bicubic-down GT -> GT) pairs, stored as ``offshelf_x{scale}``."""
    store = store or ModelStore()
    pairs = ds.make_pairs(gt, DegradationSpec([BicubicDown(scale)]), scale)
    return store.train_or_load(f"offshelf_x{scale}", pairs, replace(model_cfg, scale=scale), train_cfg,
                               corpus_digest(gt))


def train_mapping(from_spec: DegradationSpec, to_spec: DegradationSpec, gt: Sequence[ImageRecord],
                  model_cfg: ModelConfig, train_cfg: TrainConfig, store: Optional[ModelStore] = None,
                  task: Optional[str] = None) -> Model:
    """Mapping network from ``apply(from_spec, gt)`` to ``apply(to_spec, gt)``."""
    ratio = to_spec.net_scale / from_spec.net_scale
    if ratio not in (1, 2):
        raise ChainError(f"mapping {from_spec.label} -> {to_spec.label} has scale ratio {ratio}; need 1 or 2")
    scale = int(ratio)
    store = store or ModelStore()
    pairs = ds.make_pairs(gt, from_spec, scale, target_spec=to_spec)
    return store.train_or_load(task or f"map_x{scale}", pairs, replace(model_cfg, scale=scale), train_cfg,
                               corpus_digest(gt))


def specialized_pairs(stage1, gt: Sequence[ImageRecord], from_spec: DegradationSpec) -> PairedDataset:
    """(clipped stage1 output on apply(from_spec, gt)) -> GT pairs, regenerated on every call."""
    inputs = []
    for r in ds.degrade_records(gt, from_spec):
        out = stage1.predict(r.pixels)
        inputs.append(ImageRecord(r.id, out, r.provenance + "|stage1"))
    in_scale = Fraction(inputs[0].shape[0], gt[0].shape[0])
    scale = 1 / in_scale
    if scale.denominator != 1:
        raise ChainError(f"stage-1 output is not an integer fraction of GT size ({in_scale})")
    return PairedDataset(inputs, list(gt), int(scale), f"{from_spec.label}*", "GT")


def train_specialized(stage1, gt: Sequence[ImageRecord], from_spec: DegradationSpec, model_cfg: ModelConfig,
                      train_cfg: TrainConfig, store: Optional[ModelStore] = None, task: Optional[str] = None,
                      init: Optional[Model] = None) -> Model:
    """Second stage trained on the frozen first stage's outputs.

    ``init`` optionally warm-starts from an existing model of the same shape.
    """
    store = store or ModelStore()
    pairs = specialized_pairs(stage1, gt, from_spec)
    cfg = replace(model_cfg, scale=pairs.scale)
    corpus = config_digest(corpus_digest(gt), _init_digest(stage1) if isinstance(stage1, Model) else "identity")
    return store.train_or_load(task or f"specialized_x{pairs.scale}", pairs, cfg, train_cfg, corpus, init=init)


# --------------------------------------------------------------------------
# reports


@dataclass
class ImageScore:
    image_id: str
    psnr: float
    ssim: float
    mse: float


@dataclass
class MetricsReport:
    branch: str
    test_set: str
    rows: List[ImageScore]
    config_digest: str = ""
    runtime_s: float = 0.0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def pooled_psnr(self) -> float:
        return metrics.psnr_from_mse(float(np.mean([r.mse for r in self.rows])))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def summary(self) -> dict:
        return {
            "branch": self.branch,
            "test_set": self.test_set,
            "n_images": len(self.rows),
            "psnr_mean_db": self.mean_psnr,
            "psnr_pooled_db": self.pooled_psnr,
            "ssim_mean": self.mean_ssim,
            "config_digest": self.config_digest,
        }


def evaluate(pipeline, inputs: Sequence[ImageRecord], gt: Sequence[ImageRecord], branch: str, test_set: str,
             digest: str = "") -> MetricsReport:
    t0 = time.perf_counter()
    rows = []
    for a, b in zip(inputs, gt):
        pred = pipeline.predict(a.pixels)
        if pred.shape != b.pixels.shape:
            raise ChainError(f"{branch}: output {pred.shape} does not match GT {b.pixels.shape}")
        err = metrics.mse(pred, b.pixels)
        rows.append(ImageScore(b.id, metrics.psnr_from_mse(err), metrics.ssim(pred, b.pixels), err))
    return MetricsReport(branch, test_set, rows, digest, time.perf_counter() - t0)


class BicubicUpsampler:
    def __init__(self, scale: int):
        self.scale = scale

    def predict(self, x: Tensor) -> Tensor:
        return deg.resample_bicubic(x, float(self.scale))


# --------------------------------------------------------------------------
# experiments


@dataclass
class RoleConfigs:
    """Model architecture and per-role training settings for one experiment."""

    model: ModelConfig = field(default_factory=ModelConfig)
    default: TrainConfig = field(default_factory=TrainConfig.desk)
    overrides: Dict[str, dict] = field(default_factory=dict)

    def train(self, role: str) -> TrainConfig:
        """Settings for ``role``; overrides are looked up by role family."""
        family = role.split("_")[0]
        kw = dict(self.overrides.get(family, {}))
        kw.update(self.overrides.get(role, {}))
        if not kw:
            return self.default
        if "total_iters" in kw and "halve_every" not in kw:
            kw["halve_every"] = max(1, kw["total_iters"] // 3)
        return replace(self.default, **kw)


@dataclass
class SRSetup:
    train_gt: List[ImageRecord]
    test_gt: List[ImageRecord]
    unknown: DegradationSpec
    transfer_gt: Optional[List[ImageRecord]] = None
    transfer_unknown: Optional[DegradationSpec] = None
    warm_start_specialized: bool = False


@dataclass
class RestoreSetup:
    train_gt: List[ImageRecord]
    test_gt: List[ImageRecord]
    blur_to: int = 9
    blur_from: Tuple[int, ...] = (7, 11)
    noise_db: float = 40.0
    seed: int = 0
    sigmas: Dict[int, float] = field(default_factory=dict)
    warm_start_specialized: bool = True

    def spec(self, size: int) -> DegradationSpec:
        """Blur of ``size`` then calibrated noise; each blur gets its own noise stream."""
        sigma = self.sigmas.get(size)
        return DegradationSpec([Blur(size, sigma), Noise(self.noise_db, seed=self.seed * 1000 + size)])


@dataclass
class ExperimentResult:
    reports: List[MetricsReport]
    baselines: List[MetricsReport]
    failures: Dict[str, str]
    histories: Dict[str, List[float]]
    pipelines: Dict[str, Pipeline] = field(default_factory=dict)

    def report(self, branch: str, test_set: Optional[str] = None) -> MetricsReport:
        for r in self.reports:
            if r.branch == branch and (test_set is None or r.test_set == test_set):
                return r
        raise KeyError(branch)


def run_sr_experiment(branches: Sequence[str], setup: SRSetup, roles: RoleConfigs,
                      store: Optional[ModelStore] = None) -> ExperimentResult:
    """Train and evaluate each requested x4 SR branch.

    Stages shared between branches (mapping networks, off-the-shelf models)
    are trained once. Failures in one branch are recorded and the remaining
    branches still run.
    """
    store = store or ModelStore()
    gt = setup.train_gt
    cdig = corpus_digest(gt)
    unknown = setup.unknown
    if unknown.net_scale != Fraction(1, 4):
        raise ChainError(f"unknown degradation {unknown.label!r} must reduce size by 4, got {unknown.net_scale}")
    arch = roles.model
    b4 = DegradationSpec([BicubicDown(4)])
    b2 = DegradationSpec([BicubicDown(2)])
    cache: Dict[str, Model] = {}

    def stage_model(role: str) -> Model:
        if role in cache:
            return cache[role]
        cfg = roles.train(role)
        if role == "direct_x4":
            m = store.train_or_load("direct_x4", ds.make_pairs(gt, unknown, 4), replace(arch, scale=4), cfg, cdig)
        elif role.startswith("offshelf_x"):
            m = train_offshelf(int(role[-1]), gt, arch, cfg, store)
        elif role == "map_same":
            m = train_mapping(unknown, b4, gt, arch, cfg, store, task="map_same")
        elif role == "map_x2":
            m = train_mapping(unknown, b2, gt, arch, cfg, store, task="map_x2")
        elif role == "specialized_x4":
            init = stage_model("offshelf_x4") if setup.warm_start_specialized else None
            m = train_specialized(stage_model("map_same"), gt, unknown, arch, cfg, store, "specialized_x4", init)
        elif role == "specialized_x2":
            init = stage_model("offshelf_x2") if setup.warm_start_specialized else None
            m = train_specialized(stage_model("map_x2"), gt, unknown, arch, cfg, store, "specialized_x2", init)
        else:
            raise ValueError(f"unknown stage role {role!r}")
        cache[role] = m
        return m

    test_sets = [("A", setup.test_gt, unknown)]
    if setup.transfer_gt is not None and setup.transfer_unknown is not None:
        test_sets.append(("B-transfer", setup.transfer_gt, setup.transfer_unknown))
    test_inputs = {name: ds.degrade_records(g, spec) for name, g, spec in test_sets}

    reports, baselines, failures = [], [], {}
    for name, g, _ in test_sets:
        baselines.append(evaluate(BicubicUpsampler(4), test_inputs[name], g, "Bicubic4", name))

    pipelines = {}
    for branch in branches:
        plan = plan_branch(branch)
        try:
            t0 = time.perf_counter()
            stages = [Stage(stage_model(s.role), s.in_domain, s.out_domain, s.role) for s in plan.stages]
            pipe = Pipeline(stages, plan.task_scale)
            train_s = time.perf_counter() - t0
        except Exception as e:  # one broken branch must not sink the others
            log.exception("branch %s failed", branch)
            failures[branch] = f"{type(e).__name__}: {e}"
            continue
        pipelines[branch] = pipe
        digest = config_digest(branch, arch, [roles.train(s.role) for s in plan.stages], unknown)
        for name, g, _ in test_sets:
            rep = evaluate(pipe, test_inputs[name], g, branch, name, digest)
            rep.runtime_s += train_s
            reports.append(rep)
    histories = {k: v for k, v in store.histories.items()}
    return ExperimentResult(reports, baselines, failures, histories, pipelines)


def run_restore_experiment(branches: Sequence[str], setup: RestoreSetup, roles: RoleConfigs,
                           store: Optional[ModelStore] = None) -> ExperimentResult:
    """Blur-domain mapping experiment (restorer trained on ``blur_to``).

    For every source blur in ``setup.blur_from`` each requested restoration
    branch yields one report; ``Restore_Direct`` is also evaluated on the
    matched blur itself.
    """
    store = store or ModelStore()
    gt = setup.train_gt
    cdig = corpus_digest(gt)
    arch = replace(roles.model, scale=1)
    to_spec = setup.spec(setup.blur_to)
    cache: Dict[str, Model] = {}

    def stage_model(role: str) -> Model:
        if role in cache:
            return cache[role]
        cfg = roles.train(role)
        t = f"blur{setup.blur_to}"
        if role == f"restorer_{t}":
            m = store.train_or_load(role, ds.make_pairs(gt, to_spec, 1), arch, cfg, cdig)
        elif role.startswith("map_"):
            src = int(role.split("_")[1][4:])
            m = train_mapping(setup.spec(src), to_spec, gt, arch, cfg, store, task=role)
        elif role.startswith("specialized_"):
            src = int(role.split("_")[1][4:])
            init = stage_model(f"restorer_{t}") if setup.warm_start_specialized else None
            m = train_specialized(stage_model(f"map_blur{src}_to_{t}"), gt, setup.spec(src), arch, cfg,
                                  store, role, init)
        else:
            raise ValueError(f"unknown stage role {role!r}")
        cache[role] = m
        return m

    conditions: List[Tuple[str, int]] = []
    for src in setup.blur_from:
        for b in branches:
            conditions.append((b, src))
    if "Restore_Direct" in branches:
        conditions.append(("Restore_Direct", setup.blur_to))

    reports, baselines, failures = [], [], {}
    inputs_by_blur: Dict[int, List[ImageRecord]] = {}
    for size in sorted({src for _, src in conditions}):
        inputs_by_blur[size] = ds.degrade_records(setup.test_gt, setup.spec(size))
        baselines.append(evaluate(IdentityStage(), inputs_by_blur[size], setup.test_gt,
                                  f"input_blur{size}", "held-out"))
    pipelines = {}
    for branch, src in conditions:
        if branch != "Restore_Direct" and src == setup.blur_to:
            continue
        plan = plan_branch(branch, src, setup.blur_to)
        label = plan.name
        try:
            t0 = time.perf_counter()
            stages = [Stage(stage_model(s.role), s.in_domain, s.out_domain, s.role) for s in plan.stages]
            pipe = Pipeline(stages, 1)
            train_s = time.perf_counter() - t0
        except Exception as e:
            log.exception("branch %s failed", label)
            failures[label] = f"{type(e).__name__}: {e}"
            continue
        pipelines[label] = pipe
        digest = config_digest(label, arch, [roles.train(s.role) for s in plan.stages], setup.spec(src), to_spec)
        rep = evaluate(pipe, inputs_by_blur[src], setup.test_gt, label, "held-out", digest)
        rep.runtime_s += train_s
        reports.append(rep)
    histories = {k: v for k, v in store.histories.items()}
    return ExperimentResult(reports, baselines, failures, histories, pipelines)
