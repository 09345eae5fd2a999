"""Bottleneck adapters and their placement inside the encoder."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import NONLINEARITIES, Tensor
from .backbone import PLACEMENTS, BackboneConfig, TapContext
from .errors import ConfigError, UsageError
from .rng import generator

PRETRAINED_LN = ("before", "after", "before_and_after", "none")
NEW_LN = ("none", "before", "after", "inside")
INIT_STYLES = ("identity_zero", "full_random")
_NEW_LN_ALIASES = {"before_adapter": "before", "after_adapter": "after"}
ADAPTER_NL_CHOICES = ("relu", "leakyrelu", "swish", "gelu")


@dataclass(frozen=True)
class AdapterConfig:
    placement: tuple = ("top",)
    reduction_factor: int = 16
    nonlinearity: str = "relu"
    residual: bool = True
    pretrained_ln: str = "before_and_after"
    new_ln: str = "none"
    init_style: str = "identity_zero"
    leaky_slope: float = 0.01

    def __post_init__(self):
        raw = self.placement
        if isinstance(raw, str):
            raw = ("top", "bottom") if raw == "both" else (raw,)
        if not raw or any(p not in PLACEMENTS for p in raw):
            raise ConfigError(f"placement must be a non-empty subset of {PLACEMENTS}, got {self.placement!r}")
        placement = tuple(p for p in PLACEMENTS if p in raw)
        object.__setattr__(self, "placement", placement)
        object.__setattr__(self, "new_ln", _NEW_LN_ALIASES.get(self.new_ln, self.new_ln))
        if self.reduction_factor < 1:
            raise ConfigError("reduction_factor must be a positive integer")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.pretrained_ln not in PRETRAINED_LN:
            raise ConfigError(f"pretrained_ln must be one of {PRETRAINED_LN}")
        if self.new_ln not in NEW_LN:
            raise ConfigError(f"new_ln must be one of {NEW_LN}")
        if self.init_style not in INIT_STYLES:
            raise ConfigError(f"init_style must be one of {INIT_STYLES}")

    @classmethod
    def pfeiffer(cls, reduction_factor: int = 16, nonlinearity: str = "relu", **kw) -> "AdapterConfig":
        """Single top adapter wrapped by the pretrained layer norm before and after."""
        return cls(("top",), reduction_factor, nonlinearity, pretrained_ln="before_and_after", new_ln="none", **kw)

    @classmethod
    def houlsby(cls, reduction_factor: int = 16, nonlinearity: str = "relu", **kw) -> "AdapterConfig":
        """Adapters after both attention and feed-forward sub-layers."""
        return cls(("top", "bottom"), reduction_factor, nonlinearity, pretrained_ln="after", new_ln="none", **kw)

    @property
    def preset(self) -> str:
        if self.placement == ("top",) and self.pretrained_ln == "before_and_after" and self.new_ln == "none":
            return "pfeiffer"
        if self.placement == ("bottom", "top") and self.pretrained_ln == "after" and self.new_ln == "none":
            return "houlsby"
        return "custom"

    def bottleneck_dim(self, hidden_dim: int) -> int:
        if hidden_dim % self.reduction_factor:
            raise ConfigError(f"hidden_dim {hidden_dim} not divisible by reduction factor {self.reduction_factor}")
        return hidden_dim // self.reduction_factor

    def to_dict(self) -> dict:
        return {
            "placement": list(self.placement),
            "reduction_factor": self.reduction_factor,
            "nonlinearity": self.nonlinearity,
            "residual": self.residual,
            "pretrained_ln": self.pretrained_ln,
            "new_ln": self.new_ln,
            "init_style": self.init_style,
            "leaky_slope": self.leaky_slope,
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown adapter config keys: {sorted(unknown)}")
        if preset in ("pfeiffer", "houlsby") and "placement" not in d:
            base = getattr(cls, preset)()
            return replace(base, **d)
        if "placement" in d and isinstance(d["placement"], list):
            d["placement"] = tuple(d["placement"])
        return cls(**d)


def adapter_shapes(acfg: AdapterConfig, bcfg: BackboneConfig) -> "OrderedDict[str, tuple]":
    d = bcfg.hidden_dim
    b = acfg.bottleneck_dim(d)
    shapes: OrderedDict[str, tuple] = OrderedDict()
    for l in range(bcfg.num_layers):
        for pl in acfg.placement:
            p = f"layer{l}.{pl}."
            if acfg.new_ln != "none":
                n = b if acfg.new_ln == "inside" else d
                shapes[p + "ln.gain"] = (n,)
                shapes[p + "ln.bias"] = (n,)
            shapes[p + "down.w"] = (d, b)
            shapes[p + "down.b"] = (b,)
            shapes[p + "up.w"] = (b, d)
            shapes[p + "up.b"] = (d,)
    return shapes


def param_count(acfg: AdapterConfig, bcfg: BackboneConfig) -> int:
    """Closed-form scalar count of an adapter set.

    Per layer and placement: ``d*b + b + b*d + d`` with ``b = d / r``, plus the
    new layer norm's gain and bias (width ``d``, or ``b`` when it sits inside
    the bottleneck).
    """
    d = bcfg.hidden_dim
    b = acfg.bottleneck_dim(d)
    per = d * b + b + b * d + d
    if acfg.new_ln in ("before", "after"):
        per += 2 * d
    elif acfg.new_ln == "inside":
        per += 2 * b
    return per * bcfg.num_layers * len(acfg.placement)


@dataclass
class AdapterParams:
    """Per-task adapter weights (Phi_n) for every layer and placement."""

    task: str
    config: AdapterConfig
    backbone_fingerprint: str
    num_layers: int
    hidden_dim: int
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __iter__(self):
        return iter(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.set_trainable(flag)

    def copy(self) -> "AdapterParams":
        t = OrderedDict((k, Tensor(v.data.copy(), trainable=v.trainable, name=v.name)) for k, v in self.tensors.items())
        return replace(self, tensors=t)


def make_adapter(bcfg: BackboneConfig, acfg: AdapterConfig, seed: int, task: str = "task") -> AdapterParams:
    """Fresh adapter set. With ``identity_zero`` init the up-projection is zero."""
    rng = generator(seed, "adapter", task)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in adapter_shapes(acfg, bcfg).items():
        if name.endswith("ln.gain"):
            data = np.ones(shape)
        elif name.endswith("down.w") or (name.endswith("up.w") and acfg.init_style == "full_random"):
            data = rng.normal(0.0, 0.01, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, trainable=True, name=f"{task}/{name}")
    return AdapterParams(task, acfg, bcfg.fingerprint(), bcfg.num_layers, bcfg.hidden_dim, tensors)


# ---------------------------------------------------------------------------
# forward


def _new_ln(phi: AdapterParams, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, phi[prefix + "ln.gain"], phi[prefix + "ln.bias"])


def adapter_core(phi: AdapterParams, x: Tensor, layer: int, placement: str) -> Tensor:
    """The bottleneck branch without any residual."""
    cfg = phi.config
    if placement not in cfg.placement:
        raise UsageError(f"adapter {phi.task!r} has no {placement} placement")
    if not 0 <= layer < phi.num_layers:
        raise UsageError(f"layer {layer} out of range for a {phi.num_layers}-layer adapter")
    p = f"layer{layer}.{placement}."
    if cfg.new_ln == "before":
        x = _new_ln(phi, p, x)
    y = ad.nonlinearity(ad.linear(x, phi[p + "down.w"], phi[p + "down.b"]), cfg.nonlinearity, cfg.leaky_slope)
    if cfg.new_ln == "inside":
        y = _new_ln(phi, p, y)
    y = ad.linear(y, phi[p + "up.w"], phi[p + "up.b"])
    if cfg.new_ln == "after":
        y = _new_ln(phi, p, y)
    return y


def prepare_input(cfg: AdapterConfig, ctx: TapContext) -> tuple[Tensor, Tensor]:
    """Adapter input and residual base at a tap, per the pretrained-norm wiring.

    ``before`` variants feed the adapter the pretrained block output
    ``norm(f + x)``; otherwise the adapter sees the raw sub-layer output ``f``.
    The residual base is ``f`` except in the ``before``-only layout, where the
    normalised stream is carried forward instead.
    """
    f = ctx.sublayer_out
    if cfg.pretrained_ln in ("before", "before_and_after"):
        u = ctx.finish(f)
    else:
        u = f
    r = u if cfg.pretrained_ln == "before" else f
    return u, r


def finish_output(cfg: AdapterConfig, value: Tensor, ctx: TapContext) -> Tensor:
    if cfg.pretrained_ln in ("after", "before_and_after"):
        return ctx.finish(value)
    if cfg.pretrained_ln == "before":
        return value
    return value + ctx.residual


def adapter_value(phi: AdapterParams, u: Tensor, r: Tensor, layer: int, placement: str) -> Tensor:
    core = adapter_core(phi, u, layer, placement)
    return core + r if phi.config.residual else core


def adapter_forward(phi: AdapterParams, x: Tensor, layer: int, placement: str, ctx: TapContext | None = None) -> Tensor:
    """Apply the adapter at one tap.

    Without ``ctx`` this is the bare module ``core(x) (+ x)``. With a tap
    context, ``x`` is ignored in favour of ``ctx.sublayer_out`` and the result
    is the full block output including the pretrained layer norm wiring.
    """
    if ctx is None:
        return adapter_value(phi, x, x, layer, placement)
    u, r = prepare_input(phi.config, ctx)
    return finish_output(phi.config, adapter_value(phi, u, r, layer, placement), ctx)


class AdapterHook:
    def __init__(self, phi: AdapterParams, placement: str, skip_layers: frozenset = frozenset()):
        self.phi = phi
        self.placement = placement
        self.hidden_dim = phi.hidden_dim
        self.skip_layers = skip_layers

    def __call__(self, ctx: TapContext) -> Tensor:
        if ctx.layer in self.skip_layers:
            return ctx.finish(ctx.sublayer_out)
        return adapter_forward(self.phi, ctx.sublayer_out, ctx.layer, self.placement, ctx)


def adapter_hooks(phi: AdapterParams, skip_layers: frozenset = frozenset()) -> dict:
    return {pl: AdapterHook(phi, pl, skip_layers) for pl in phi.config.placement}
