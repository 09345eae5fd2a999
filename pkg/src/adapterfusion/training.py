"""Training pipelines: ST-A, MT-A, fusion and the fine-tuning baselines.

Every trainer sets trainable flags for exactly the tensors its mode may
change, records SHA-256 digests of each tensor group before and after, and
leaves all tensors frozen when it returns.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, AdapterParams, make_adapter
from .autodiff import Tensor
from .backbone import BackboneParams
from .errors import ConfigError, DataError, UsageError
from .fusion import FusionActivationTrace, FusionParams, fusion_init, fusion_regularizer
from .model import Assembly, ClassifierHead, evaluate, group_digests, init_head, trace_activations
from .optim import SCHEDULES, OptimizerState, adamw_step
from .rng import derive_seed, generator
from .tasks import Split, TaskDataset, batches, num_batches

log = logging.getLogger(__name__)

SAMPLING = ("proportional", "sqrt", "uniform")
FUSION_LR_GRID = (6e-6, 5e-5, 1e-4, 2e-4)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 30
    early_stop_patience: int = 3
    eval_every: str = "epoch"
    seed: int = 0
    weight_decay: float = 0.0
    schedule: str = "linear_decay"
    mt_sampling: str = "sqrt"
    fusion_lambda: float = 0.01
    fusion_reg_target: str = "identity"
    reuse_head: bool = False
    drop_last_layer: bool = False
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {tuple(SCHEDULES)}")
        if self.mt_sampling not in SAMPLING:
            raise ConfigError(f"mt_sampling must be one of {SAMPLING}")
        if self.eval_every != "epoch":
            raise ConfigError("only per-epoch evaluation is supported")
        if self.fusion_lambda < 0:
            raise ConfigError("fusion_lambda must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")

    @classmethod
    def adapter_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"base_lr": 1e-4, "max_epochs": 30, **kw})

    @classmethod
    def fusion_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"base_lr": 5e-5, "max_epochs": 10, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping, base: "TrainConfig | None" = None) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return replace(base or cls(), **d)


@dataclass
class RunRecord:
    mode: str
    tasks: list
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev_accuracy: float = float("nan")
    test_accuracy: dict = field(default_factory=dict)
    dev_accuracy: dict = field(default_factory=dict)
    wall_time: float = 0.0
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    digests_before: dict = field(default_factory=dict)
    digests_after: dict = field(default_factory=dict)
    tags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def changed_groups(self) -> set:
        return {k for k, v in self.digests_after.items() if self.digests_before.get(k) != v}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["changed_groups"] = sorted(self.changed_groups)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def metrics(self) -> dict:
        """Everything except wall time, for determinism comparisons."""
        d = self.to_dict()
        d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        d = dict(d)
        d.pop("changed_groups", None)
        return cls(**d)


@dataclass
class STAResult:
    adapter: AdapterParams
    head: ClassifierHead
    record: RunRecord


@dataclass
class MTAResult:
    theta: BackboneParams
    adapters: dict
    heads: dict
    record: RunRecord


@dataclass
class FusionResult:
    fusion: FusionParams
    head: ClassifierHead
    record: RunRecord
    trace: FusionActivationTrace


@dataclass
class BaselineResult:
    theta: BackboneParams
    heads: dict
    record: RunRecord


# ---------------------------------------------------------------------------
# helpers


def _freeze_all(assembly: Assembly) -> None:
    for group in assembly.named_groups().values():
        for _, t in group:
            t.set_trainable(False)


def _set_trainable_groups(assembly: Assembly, prefixes: Sequence[str]) -> list[Tensor]:
    """Freeze everything, then unfreeze groups whose key is listed. Returns the trainables."""
    _freeze_all(assembly)
    out = []
    for key, group in assembly.named_groups().items():
        if key in prefixes:
            for _, t in group:
                t.set_trainable(True)
                out.append(t)
    return out


def _require_nonempty(task: TaskDataset) -> None:
    for kind in ("train", "dev"):
        if len(task.split(kind)) == 0:
            raise DataError(f"task {task.name!r} has an empty {kind} split")


def _check_split(split: Split, kind: str) -> None:
    if split.kind != kind:
        raise UsageError(f"expected the {kind} split, got {split.kind}")


def sampling_probs(sizes: Sequence[int], strategy: str) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    if strategy == "proportional":
        w = sizes
    elif strategy == "sqrt":
        w = np.sqrt(sizes)
    elif strategy == "uniform":
        w = np.ones_like(sizes)
    else:
        raise ConfigError(f"unknown sampling strategy {strategy!r}")
    return w / w.sum()


def sample_tasks(sizes: Sequence[int], strategy: str, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(sizes), size=n, p=sampling_probs(sizes, strategy))


StepSource = Callable[[int], Iterator[tuple[str, np.ndarray, np.ndarray, list]]]


def _fit(
    assembly: Assembly,
    trainables: list[Tensor],
    steps: StepSource,
    steps_per_epoch: int,
    dev_score: Callable[[], tuple[float, float, dict]],
    cfg: TrainConfig,
    record: RunRecord,
    extra_loss: Callable[[], Tensor] | None = None,
) -> None:
    """Run epochs with early stopping on the dev score and restore the best weights.

    Epochs are ranked by dev accuracy; equal accuracies are ranked by lower
    dev loss, so a saturated small dev set still prefers the better fit.
    """
    state = OptimizerState(lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    schedule = SCHEDULES[cfg.schedule]
    total = cfg.max_epochs * steps_per_epoch
    step = 0
    best = (-math.inf, -math.inf)
    best_snapshot: list[np.ndarray] | None = None
    since_best = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for task, tokens, labels, params in steps(epoch):
            loss = ad.cross_entropy(assembly.logits(tokens, task), labels)
            if extra_loss is not None:
                loss = loss + extra_loss()
            ad.zero_grad(params)
            ad.backward(loss)
            adamw_step(params, state, schedule(min(step, total), total, cfg.base_lr))
            step += 1
            losses.append(loss.item())
        score, dev_loss, detail = dev_score()
        record.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                              "dev_accuracy": score, "dev_loss": dev_loss, "dev_detail": detail})
        log.debug("%s epoch %d loss %.4f dev %.4f", record.mode, epoch, record.epochs[-1]["train_loss"], score)
        if (score, -dev_loss) > best:
            best = (score, -dev_loss)
            best_snapshot = [t.data.copy() for t in trainables]
            record.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    if best_snapshot is not None:
        for t, data in zip(trainables, best_snapshot):
            t.data = data
    ad.zero_grad(trainables)
    record.best_dev_accuracy = best[0]


def _single_task_steps(task: TaskDataset, cfg: TrainConfig, params: list[Tensor], seed: int) -> StepSource:
    def steps(epoch: int):
        for tokens, labels in batches(task.train, cfg.batch_size, seed, epoch):
            yield task.name, tokens, labels, params

    return steps


def _dev_scorer(assembly: Assembly, task: TaskDataset, cfg: TrainConfig):
    _check_split(task.dev, "dev")

    def score():
        res = evaluate(assembly, task.dev, task.name, task.num_classes, cfg.eval_batch_size)
        return res.accuracy, res.loss, {task.name: res.accuracy}

    return score


def _finish(record: RunRecord, assembly: Assembly, tasks: Sequence[TaskDataset], cfg: TrainConfig, t0: float) -> None:
    for task in tasks:
        _check_split(task.test, "test")
        record.test_accuracy[task.name] = evaluate(assembly, task.test, task.name, task.num_classes, cfg.eval_batch_size).accuracy
        record.dev_accuracy[task.name] = evaluate(assembly, task.dev, task.name, task.num_classes, cfg.eval_batch_size).accuracy
    record.digests_after = group_digests(assembly)
    _freeze_all(assembly)
    record.wall_time = time.perf_counter() - t0


# ---------------------------------------------------------------------------
# stage 1


def train_st_adapter(theta0: BackboneParams, task: TaskDataset, acfg: AdapterConfig, cfg: TrainConfig | None = None,
                     pretrained: bool = True) -> STAResult:
    """Train one adapter and head on a frozen backbone."""
    cfg = cfg or TrainConfig.adapter_defaults()
    _require_nonempty(task)
    t0 = time.perf_counter()
    bcfg = theta0.config
    seed_adapter = derive_seed(cfg.seed, "sta", task.name)
    phi = make_adapter(bcfg, acfg, seed_adapter, task.name)
    head = init_head(bcfg.hidden_dim, task.num_classes, cfg.seed, task.name)
    asm = Assembly(theta0, heads={task.name: head}, adapters={task.name: phi}, drop_last_layer=cfg.drop_last_layer)
    record = RunRecord("st-a", [task.name], seeds={"train": cfg.seed, "adapter": seed_adapter},
                       config={"train": cfg.to_dict(), "adapter": acfg.to_dict(), "optimizer": "adamw"})
    if not pretrained:
        record.tags.append("random_backbone")
    record.digests_before = group_digests(asm)
    trainables = _set_trainable_groups(asm, [f"phi:{task.name}", f"head:{task.name}"])
    steps = _single_task_steps(task, cfg, trainables, derive_seed(cfg.seed, "data", task.name))
    _fit(asm, trainables, steps, num_batches(len(task.train), cfg.batch_size), _dev_scorer(asm, task, cfg), cfg, record)
    _finish(record, asm, [task], cfg, t0)
    return STAResult(phi, head, record)


def train_mt_adapters(theta0: BackboneParams, tasks: Sequence[TaskDataset], acfg: AdapterConfig,
                      cfg: TrainConfig | None = None) -> MTAResult:
    """Jointly train per-task adapters with a trainable copy of the backbone."""
    cfg = cfg or TrainConfig.adapter_defaults()
    if len(tasks) < 2:
        raise UsageError("multi-task training needs at least two tasks")
    bcfg = theta0.config
    for task in tasks:
        _require_nonempty(task)
        top = max(max(s) for s in task.train.sequences)
        if top >= bcfg.vocab_size:
            raise ConfigError(f"task {task.name!r} uses token {top} beyond vocab_size {bcfg.vocab_size}")
    t0 = time.perf_counter()
    theta = theta0.copy()
    adapters = {t.name: make_adapter(bcfg, acfg, derive_seed(cfg.seed, "mta", t.name), t.name) for t in tasks}
    heads = {t.name: init_head(bcfg.hidden_dim, t.num_classes, cfg.seed, t.name) for t in tasks}
    asm = Assembly(theta, heads=heads, adapters=adapters, drop_last_layer=cfg.drop_last_layer)
    record = RunRecord("mt-a", [t.name for t in tasks], seeds={"train": cfg.seed},
                       config={"train": cfg.to_dict(), "adapter": acfg.to_dict(), "optimizer": "adamw"})
    record.digests_before = group_digests(asm)
    record.digests_before["theta"] = group_digests(Assembly(theta0))["theta"]
    groups = ["theta"] + [f"phi:{t.name}" for t in tasks] + [f"head:{t.name}" for t in tasks]
    trainables = _set_trainable_groups(asm, groups)
    theta_params = list(theta)
    per_task = {t.name: theta_params + list(adapters[t.name]) + list(heads[t.name]) for t in tasks}
    sizes = [len(t.train) for t in tasks]
    steps_per_epoch = sum(num_batches(n, cfg.batch_size) for n in sizes)
    sample_rng = generator(cfg.seed, "mt-sampling")
    data_seeds = {t.name: derive_seed(cfg.seed, "data", t.name) for t in tasks}

    iters: dict[str, Iterator] = {}
    passes = {t.name: 0 for t in tasks}

    def next_batch(task: TaskDataset):
        while True:
            it = iters.get(task.name)
            if it is not None:
                try:
                    return next(it)
                except StopIteration:
                    passes[task.name] += 1
            iters[task.name] = batches(task.train, cfg.batch_size, data_seeds[task.name], passes[task.name])

    def steps(epoch: int):
        for idx in sample_tasks(sizes, cfg.mt_sampling, steps_per_epoch, sample_rng):
            task = tasks[int(idx)]
            tokens, labels = next_batch(task)
            yield task.name, tokens, labels, per_task[task.name]

    def dev_score():
        res = {t.name: evaluate(asm, t.dev, t.name, t.num_classes, cfg.eval_batch_size) for t in tasks}
        accs = {k: r.accuracy for k, r in res.items()}
        return float(np.mean(list(accs.values()))), float(np.mean([r.loss for r in res.values()])), accs

    _fit(asm, trainables, steps, steps_per_epoch, dev_score, cfg, record)
    _finish(record, asm, tasks, cfg, t0)
    return MTAResult(theta, adapters, heads, record)


# ---------------------------------------------------------------------------
# stage 2


def train_fusion(theta: BackboneParams, adapters: Sequence[AdapterParams], target: TaskDataset,
                 cfg: TrainConfig | None = None, head: ClassifierHead | None = None) -> FusionResult:
    """Learn Psi (and a head) that mix frozen adapters for ``target``.

    The backbone and every adapter are frozen; only the fusion matrices and the
    target head change. The head is re-initialised unless ``cfg.reuse_head``
    is set and ``head`` is given.
    """
    cfg = cfg or TrainConfig.fusion_defaults()
    _require_nonempty(target)
    t0 = time.perf_counter()
    bcfg = theta.config
    seed_fusion = derive_seed(cfg.seed, "fusion", target.name)
    psi = fusion_init(bcfg, adapters, seed_fusion, target.name)
    if cfg.reuse_head and head is not None:
        fhead = head.copy()
    else:
        fhead = init_head(bcfg.hidden_dim, target.num_classes, derive_seed(cfg.seed, "fusion-head"), target.name)
    asm = Assembly(theta, heads={target.name: fhead}, adapters={a.task: a for a in adapters}, fusion=psi,
                   drop_last_layer=cfg.drop_last_layer)
    record = RunRecord("fusion", [target.name], seeds={"train": cfg.seed, "fusion": seed_fusion},
                       config={"train": cfg.to_dict(), "members": list(psi.members), "optimizer": "adamw"})
    record.digests_before = group_digests(asm)
    trainables = _set_trainable_groups(asm, ["psi", f"head:{target.name}"])
    steps = _single_task_steps(target, cfg, trainables, derive_seed(cfg.seed, "data", target.name))
    reg = (lambda: fusion_regularizer(psi, cfg.fusion_lambda, cfg.fusion_reg_target)) if cfg.fusion_lambda > 0 else None
    _fit(asm, trainables, steps, num_batches(len(target.train), cfg.batch_size), _dev_scorer(asm, target, cfg), cfg,
         record, extra_loss=reg)
    _finish(record, asm, [target], cfg, t0)
    trace = trace_activations(asm, target.dev, target.name, cfg.eval_batch_size)
    record.extra["trace"] = trace.to_dict()
    return FusionResult(psi, fhead, record, trace)


# ---------------------------------------------------------------------------
# baselines


BASELINE_MODES = ("head_only", "full", "sequential")


def train_baseline(theta0: BackboneParams, tasks: TaskDataset | Sequence[TaskDataset], mode: str,
                   cfg: TrainConfig | None = None) -> BaselineResult:
    """Head-only, full fine-tuning, or sequential full fine-tuning over ``tasks``."""
    cfg = cfg or TrainConfig.adapter_defaults()
    if mode not in BASELINE_MODES:
        raise ConfigError(f"unknown baseline mode {mode!r}")
    task_list = [tasks] if isinstance(tasks, TaskDataset) else list(tasks)
    if not task_list:
        raise UsageError("baseline needs at least one task")
    if mode != "sequential" and len(task_list) != 1:
        raise UsageError(f"{mode} baseline trains a single task")
    for t in task_list:
        _require_nonempty(t)
    t0 = time.perf_counter()
    bcfg = theta0.config
    theta = theta0 if mode == "head_only" else theta0.copy()
    heads = {t.name: init_head(bcfg.hidden_dim, t.num_classes, cfg.seed, t.name) for t in task_list}
    asm = Assembly(theta, heads=heads, drop_last_layer=cfg.drop_last_layer)
    record = RunRecord(mode, [t.name for t in task_list], seeds={"train": cfg.seed},
                       config={"train": cfg.to_dict(), "optimizer": "adamw"})
    record.digests_before = group_digests(asm)
    record.digests_before["theta"] = group_digests(Assembly(theta0))["theta"]
    if mode == "head_only":
        task = task_list[0]
        trainables = _set_trainable_groups(asm, [f"head:{task.name}"])
        steps = _single_task_steps(task, cfg, trainables, derive_seed(cfg.seed, "data", task.name))
        _fit(asm, trainables, steps, num_batches(len(task.train), cfg.batch_size), _dev_scorer(asm, task, cfg), cfg, record)
    else:
        stages = []
        for i, task in enumerate(task_list):
            trainables = _set_trainable_groups(asm, ["theta", f"head:{task.name}"])
            steps = _single_task_steps(task, cfg, trainables, derive_seed(cfg.seed, "data", task.name, i))
            stage_record = RunRecord(mode, [task.name])
            _fit(asm, trainables, steps, num_batches(len(task.train), cfg.batch_size), _dev_scorer(asm, task, cfg), cfg,
                 stage_record)
            record.epochs.extend({**e, "stage": i} for e in stage_record.epochs)
            stages.append({
                "stage": i,
                "task": task.name,
                "best_epoch": stage_record.best_epoch,
                "dev_accuracy": {t.name: evaluate(asm, t.dev, t.name, t.num_classes, cfg.eval_batch_size).accuracy
                                 for t in task_list},
            })
            record.best_epoch = stage_record.best_epoch
            record.best_dev_accuracy = stage_record.best_dev_accuracy
        record.extra["stages"] = stages
    _finish(record, asm, task_list, cfg, t0)
    return BaselineResult(theta, heads, record)
