"""AdapterFusion: attention over the outputs of N frozen adapters.

At every layer the top-tap feed-forward output ``h`` queries the member
adapter outputs ``z_n``:

    s   = softmax_n( (h Q) . (z_n K) )
    z'_n = z_n V
    o   = sum_n s_n z'_n

``o`` then goes through the same pretrained-norm completion a single adapter
output would.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterParams, adapter_value, finish_output, prepare_input
from .autodiff import Tensor
from .backbone import BackboneConfig, TapContext
from .errors import CompatibilityError, ConfigError, UsageError
from .rng import generator

V_NOISE_NORM = 1e-6
QK_INIT_STD = 0.02


@dataclass
class FusionParams:
    """Per-layer Query, Key and Value matrices (Psi_m) for one target task."""

    target: str
    members: list[str]
    backbone_fingerprint: str
    num_layers: int
    hidden_dim: int
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def query(self, layer: int) -> Tensor:
        return self.tensors[f"layer{layer}.query"]

    def key(self, layer: int) -> Tensor:
        return self.tensors[f"layer{layer}.key"]

    def value(self, layer: int) -> Tensor:
        return self.tensors[f"layer{layer}.value"]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.set_trainable(flag)


def fusion_shapes(num_layers: int, d: int) -> "OrderedDict[str, tuple]":
    shapes: OrderedDict[str, tuple] = OrderedDict()
    for l in range(num_layers):
        for m in ("query", "key", "value"):
            shapes[f"layer{l}.{m}"] = (d, d)
    return shapes


def check_members(bcfg: BackboneConfig, members: Sequence[AdapterParams]) -> None:
    if not members:
        raise UsageError("fusion needs at least one member adapter")
    fp = bcfg.fingerprint()
    for phi in members:
        if phi.backbone_fingerprint != fp:
            raise CompatibilityError(f"adapter {phi.task!r} belongs to backbone {phi.backbone_fingerprint}, not {fp}")
    first = members[0].config
    for phi in members[1:]:
        if phi.config.placement != first.placement or phi.config.pretrained_ln != first.pretrained_ln:
            raise CompatibilityError("member adapters must share placement and pretrained layer-norm wiring")
    if first.placement != ("top",):
        raise ConfigError("fusion composes top-placed adapters only")
    names = [phi.task for phi in members]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate member names in {names}")


def fusion_init(bcfg: BackboneConfig, members: Sequence[AdapterParams], seed: int, target: str) -> FusionParams:
    """Q, K ~ N(0, 0.02^2); V = I plus off-diagonal noise of Frobenius norm 1e-6."""
    check_members(bcfg, members)
    d = bcfg.hidden_dim
    rng = generator(seed, "fusion", target)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    off_diag = ~np.eye(d, dtype=bool)
    for l in range(bcfg.num_layers):
        q = rng.normal(0.0, QK_INIT_STD, size=(d, d))
        k = rng.normal(0.0, QK_INIT_STD, size=(d, d))
        noise = rng.normal(size=(d, d)) * off_diag
        norm = np.linalg.norm(noise)
        if norm > 0:
            noise *= V_NOISE_NORM / norm
        v = np.eye(d) + noise
        for name, data in (("query", q), ("key", k), ("value", v)):
            key = f"layer{l}.{name}"
            tensors[key] = Tensor(data, trainable=True, name=f"fusion.{target}/{key}")
    return FusionParams(target, [m.task for m in members], bcfg.fingerprint(), bcfg.num_layers, d, tensors)


def fusion_forward(psi: FusionParams, h: Tensor, z: Sequence[Tensor], layer: int) -> tuple[Tensor, Tensor]:
    """Mix member outputs ``z`` (each ``[b, t, d]``) with query states ``h``.

    Returns the fused output ``[b, t, d]`` and the weights ``[b, t, N]``.
    """
    n = len(z)
    if n == 0:
        raise UsageError("fusion_forward needs at least one member output")
    for zn in z:
        if zn.shape != h.shape:
            raise UsageError(f"member output shape {zn.shape} != query shape {h.shape}")
    b, t, d = h.shape
    zs = ad.stack(list(z), axis=2)  # [b, t, N, d]
    q = ad.matmul(h, psi.query(layer))  # [b, t, d]
    keys = ad.matmul(zs, psi.key(layer))  # [b, t, N, d]
    scores = ad.reshape(ad.matmul(keys, ad.reshape(q, (b, t, d, 1))), (b, t, n))
    s = ad.softmax(scores, axis=-1)
    values = ad.matmul(zs, psi.value(layer))  # [b, t, N, d]
    o = ad.reshape(ad.matmul(ad.reshape(s, (b, t, 1, n)), values), (b, t, d))
    return o, s


def fusion_regularizer(psi: FusionParams, lam: float, target: str = "identity") -> Tensor:
    """``lam * sum_l ||V_l - I||_F^2`` (or ``||V_l||^2`` with ``target="zero"``)."""
    if lam < 0:
        raise ConfigError("fusion regulariser weight must be non-negative")
    if target not in ("identity", "zero"):
        raise ConfigError(f"unknown regulariser target {target!r}")
    eye = np.eye(psi.hidden_dim)
    total = None
    for l in range(psi.num_layers):
        v = psi.value(l)
        diff = ad.add_constant(v, -eye) if target == "identity" else v
        term = ad.tsum(diff * diff)
        total = term if total is None else total + term
    return ad.scale(total, lam)


class ActivationRecorder:
    """Collects per-position fusion weights during forward passes."""

    def __init__(self, num_layers: int, num_members: int):
        self.sums = np.zeros((num_layers, num_members))
        self.positions = 0
        self._layer_seen = np.zeros(num_layers, dtype=np.int64)
        self.max_sum_error = 0.0

    def record(self, layer: int, s: np.ndarray, key_mask: np.ndarray) -> None:
        m = key_mask.astype(bool)
        picked = s[m]  # [positions, N]
        self.max_sum_error = max(self.max_sum_error, float(np.max(np.abs(picked.sum(axis=-1) - 1.0), initial=0.0)))
        self.sums[layer] += picked.sum(axis=0)
        self._layer_seen[layer] += picked.shape[0]
        if layer == 0:
            self.positions += picked.shape[0]

    def means(self) -> np.ndarray:
        """Mean weight per (layer, member); NaN rows for layers fusion skipped."""
        seen = self._layer_seen[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(seen > 0, self.sums / np.maximum(seen, 1), np.nan)


class FusionHook:
    """Top-tap hook that runs every member adapter and fuses their outputs."""

    def __init__(self, psi: FusionParams, members: Sequence[AdapterParams], recorder: ActivationRecorder | None = None,
                 skip_layers: frozenset = frozenset()):
        if [m.task for m in members] != psi.members:
            raise UsageError(f"member order {[m.task for m in members]} != fusion members {psi.members}")
        self.psi = psi
        self.members = list(members)
        self.recorder = recorder
        self.hidden_dim = psi.hidden_dim
        self.skip_layers = skip_layers
        self.cfg = members[0].config

    def __call__(self, ctx: TapContext) -> Tensor:
        if ctx.layer in self.skip_layers:
            return ctx.finish(ctx.sublayer_out)
        u, r = prepare_input(self.cfg, ctx)
        z = [adapter_value(phi, u, r, ctx.layer, "top") for phi in self.members]
        o, s = fusion_forward(self.psi, ctx.sublayer_out, z, ctx.layer)
        if self.recorder is not None:
            self.recorder.record(ctx.layer, s.data, ctx.key_mask)
        return finish_output(self.cfg, o, ctx)


@dataclass
class FusionActivationTrace:
    target: str
    members: list[str]
    mean_activation: np.ndarray  # [layers, members]
    instances: int
    positions: int

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "members": list(self.members),
            "mean_activation": self.mean_activation.tolist(),
            "instances": self.instances,
            "positions": self.positions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionActivationTrace":
        return cls(d["target"], list(d["members"]), np.asarray(d["mean_activation"], dtype=float), d["instances"], d["positions"])
