"""Model assembly: backbone + optional adapters or fusion + per-task heads."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterParams, adapter_hooks
from .autodiff import Tensor
from .backbone import BackboneParams, encoder_forward
from .errors import DataError, UsageError
from .fusion import ActivationRecorder, FusionActivationTrace, FusionHook, FusionParams
from .rng import generator
from .tasks import Split, batches


@dataclass
class ClassifierHead:
    """Linear map from the first-token representation to class logits."""

    task: str
    weight: Tensor
    bias: Tensor

    def __iter__(self):
        return iter((self.weight, self.bias))

    def named(self):
        return (("weight", self.weight), ("bias", self.bias))

    def __call__(self, pooled: Tensor) -> Tensor:
        return ad.linear(pooled, self.weight, self.bias)

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.task, Tensor(self.weight.data.copy(), self.weight.trainable, self.weight.name),
                              Tensor(self.bias.data.copy(), self.bias.trainable, self.bias.name))


def init_head(hidden_dim: int, num_classes: int, seed: int, task: str) -> ClassifierHead:
    rng = generator(seed, "head", task)
    w = Tensor(rng.normal(0.0, 0.02, size=(hidden_dim, num_classes)), trainable=True, name=f"head.{task}/weight")
    b = Tensor(np.zeros(num_classes), trainable=True, name=f"head.{task}/bias")
    return ClassifierHead(task, w, b)


@dataclass
class Assembly:
    """Everything needed to produce logits for a task.

    With ``fusion`` set, every forward pass runs the fused member adapters.
    Otherwise ``adapters[task]`` is applied when present (ST-A and MT-A), and
    the plain backbone is used for tasks without an adapter.
    """

    backbone: BackboneParams
    heads: dict = field(default_factory=dict)
    adapters: dict = field(default_factory=dict)
    fusion: FusionParams | None = None
    drop_last_layer: bool = False

    @property
    def skip_layers(self) -> frozenset:
        return frozenset({self.backbone.config.num_layers - 1}) if self.drop_last_layer else frozenset()

    def hooks(self, task: str, recorder: ActivationRecorder | None = None) -> dict:
        if self.fusion is not None:
            members = [self.adapters[name] for name in self.fusion.members]
            return {"top": FusionHook(self.fusion, members, recorder, self.skip_layers)}
        phi = self.adapters.get(task)
        return adapter_hooks(phi, self.skip_layers) if phi is not None else {}

    def logits(self, tokens: np.ndarray, task: str, recorder: ActivationRecorder | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        if task not in self.heads:
            raise UsageError(f"no classifier head for task {task!r}")
        h = encoder_forward(self.backbone, tokens, self.hooks(task, recorder), rng=rng)
        return self.heads[task](ad.take(h, (slice(None), 0)))

    def named_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Every tensor grouped as theta / phi:<task> / psi / head:<task>."""
        groups = {"theta": list(self.backbone.named())}
        for name, phi in self.adapters.items():
            groups[f"phi:{name}"] = list(phi.named())
        if self.fusion is not None:
            groups["psi"] = list(self.fusion.named())
        for name, head in self.heads.items():
            groups[f"head:{name}"] = list(head.named())
        return groups


def digest(named: Iterable[tuple[str, Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def group_digests(assembly: Assembly) -> dict[str, str]:
    return {k: digest(v) for k, v in assembly.named_groups().items()}


@dataclass
class EvalResult:
    accuracy: float
    correct: list
    total: list
    loss: float = float("nan")

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "total": self.total, "loss": self.loss}


def all_logits(assembly: Assembly, split: Split, task: str, batch_size: int = 64,
               recorder: ActivationRecorder | None = None) -> np.ndarray:
    out = [assembly.logits(tokens, task, recorder=recorder).data for tokens, _ in batches(split, batch_size, shuffle=False)]
    return np.concatenate(out) if out else np.zeros((0, assembly.heads[task].bias.size))


def predict(assembly: Assembly, split: Split, task: str, batch_size: int = 64,
            recorder: ActivationRecorder | None = None) -> np.ndarray:
    return np.argmax(all_logits(assembly, split, task, batch_size, recorder), axis=1)


def evaluate(assembly: Assembly, split: Split, task: str, num_classes: int | None = None,
             batch_size: int = 64) -> EvalResult:
    """Argmax accuracy (ties go to the lowest class index) with per-class
    counts and the mean cross-entropy."""
    labels = split.labels
    c = num_classes or assembly.heads[task].bias.size
    if len(split) == 0:
        return EvalResult(0.0, [0] * c, [0] * c)
    logits = all_logits(assembly, split, task, batch_size)
    hit = np.argmax(logits, axis=1) == labels
    correct = np.bincount(labels[hit], minlength=c).tolist()
    total = np.bincount(labels, minlength=c).tolist()
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return EvalResult(float(hit.mean()), correct, total, loss)


def trace_activations(assembly: Assembly, split: Split, task: str, batch_size: int = 64) -> FusionActivationTrace:
    """Average fusion weights per layer and member over all non-pad positions."""
    psi = assembly.fusion
    if psi is None:
        raise UsageError("assembly has no fusion layer")
    if len(split) == 0:
        raise DataError("cannot trace activations on an empty split")
    recorder = ActivationRecorder(psi.num_layers, len(psi.members))
    predict(assembly, split, task, batch_size, recorder=recorder)
    return FusionActivationTrace(psi.target, list(psi.members), recorder.means(), len(split), recorder.positions)
