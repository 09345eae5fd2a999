"""Miniature post-layer-norm transformer encoder with adapter tap points.

Each encoder layer has two taps. The *bottom* tap sits on the output of the
multi-head attention sub-layer, the *top* tap on the output of the
feed-forward sub-layer. Without a hook a tap finishes the block the usual
post-norm way, ``norm(sublayer_out + residual)``. A hook receives a
:class:`TapContext` and returns the block output itself, so it may rewire the
pretrained layer norm however it likes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, UsageError
from .optim import OptimizerState, adamw_step, linear_decay_schedule
from .rng import generator

log = logging.getLogger(__name__)

PAD, MASK, CLS, SEP = 0, 1, 2, 3
NUM_RESERVED = 4
RESERVED_TOKENS = (PAD, MASK, CLS, SEP)
PLACEMENTS = ("bottom", "top")
_MASK_FILL = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    max_seq_len: int = 16
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    dropout_rate: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.vocab_size <= NUM_RESERVED:
            raise ConfigError(f"vocab_size must exceed the {NUM_RESERVED} reserved tokens")
        if self.num_layers < 1 or self.ffn_dim < 1:
            raise ConfigError("num_layers and ffn_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        dims = {k: getattr(self, k) for k in ("vocab_size", "max_seq_len", "hidden_dim", "num_layers", "num_heads", "ffn_dim")}
        return hashlib.sha256(json.dumps(dims, sort_keys=True).encode()).hexdigest()[:16]


def backbone_param_shapes(cfg: BackboneConfig) -> "OrderedDict[str, tuple]":
    """Parameter names and shapes in their canonical (checkpoint) order."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    shapes: OrderedDict[str, tuple] = OrderedDict()
    shapes["embed.tokens"] = (cfg.vocab_size, d)
    shapes["embed.positions"] = (cfg.max_seq_len, d)
    shapes["embed.ln.gain"] = (d,)
    shapes["embed.ln.bias"] = (d,)
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{m}"] = (d, d)
            shapes[p + f"attn.b{m}"] = (d,)
        shapes[p + "attn_ln.gain"] = (d,)
        shapes[p + "attn_ln.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ffn_ln.gain"] = (d,)
        shapes[p + "ffn_ln.bias"] = (d,)
    return shapes


class BackboneParams:
    """Named, ordered collection of encoder weights (Theta)."""

    def __init__(self, config: BackboneConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def named(self):
        return self.tensors.items()

    def copy(self) -> "BackboneParams":
        t = OrderedDict((k, Tensor(v.data.copy(), trainable=v.trainable, name=k)) for k, v in self.tensors.items())
        return BackboneParams(self.config, t)

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_backbone(cfg: BackboneConfig, seed: int) -> BackboneParams:
    rng = generator(seed, "backbone")
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in backbone_param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        elif name.startswith("embed."):
            data = rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden_dim), size=shape)
        else:
            data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        tensors[name] = Tensor(data, trainable=False, name=name)
    return BackboneParams(cfg, tensors)


def set_trainable(
    params: BackboneParams | Mapping[str, Tensor] | Iterable[Tensor],
    flag: bool | Iterable[str] | Callable[[str], bool],
) -> None:
    """Update trainable flags.

    ``flag`` is a bool applied to everything, an iterable of names to enable
    (all others disabled), or a predicate over names.
    """
    if isinstance(params, BackboneParams):
        named = params.tensors
    elif isinstance(params, Mapping):
        named = params
    else:
        named = OrderedDict((t.name, t) for t in params)
    if isinstance(flag, bool):
        for t in named.values():
            t.set_trainable(flag)
        return
    if callable(flag):
        for k, t in named.items():
            t.set_trainable(bool(flag(k)))
        return
    wanted = set(flag)
    unknown = wanted - set(named)
    if unknown:
        raise UsageError(f"unknown parameter names: {sorted(unknown)}")
    for k, t in named.items():
        t.set_trainable(k in wanted)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class TapContext:
    layer: int
    placement: str
    sublayer_out: Tensor
    residual: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    eps: float
    key_mask: np.ndarray

    def norm(self, x: Tensor) -> Tensor:
        """The layer's pretrained layer norm at this tap."""
        return ad.layer_norm(x, self.ln_gain, self.ln_bias, self.eps)

    def finish(self, value: Tensor) -> Tensor:
        """Default block completion: residual add then pretrained norm."""
        return self.norm(value + self.residual)


class TransformHook:
    """Hook that replaces the sub-layer output with ``fn(sublayer_out)``."""

    def __init__(self, fn: Callable[[Tensor], Tensor], hidden_dim: int | None = None):
        self.fn = fn
        self.hidden_dim = hidden_dim

    def __call__(self, ctx: TapContext) -> Tensor:
        return ctx.finish(self.fn(ctx.sublayer_out))


@dataclass
class LayerTap:
    bottom: list[Tensor] = field(default_factory=list)
    top: list[Tensor] = field(default_factory=list)


Hook = Callable[[TapContext], Tensor]
Hooks = Mapping[str, Hook]


def key_mask_for(tokens: np.ndarray) -> np.ndarray:
    return (np.asarray(tokens) != PAD).astype(np.float64)


def attention_sublayer(params: BackboneParams, x: Tensor, layer: int, key_mask: np.ndarray,
                       rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head scaled dot-product attention, output-projected, no residual."""
    cfg = params.config
    b, t, d = x.shape
    h = cfg.num_heads
    dh = d // h
    p = f"layer{layer}.attn."

    def heads(m: str) -> Tensor:
        y = ad.linear(x, params[p + f"w{m}"], params[p + f"b{m}"])
        return ad.transpose(ad.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    bias = ((1.0 - key_mask) * _MASK_FILL)[:, None, None, :]
    weights = ad.softmax(ad.add_constant(scores, bias), axis=-1)
    weights = ad.dropout(weights, cfg.dropout_rate, rng)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    return ad.linear(ctx, params[p + "wo"], params[p + "bo"])


def ffn_sublayer(params: BackboneParams, x: Tensor, layer: int, rng: np.random.Generator | None = None) -> Tensor:
    p = f"layer{layer}.ffn."
    hid = ad.nonlinearity(ad.linear(x, params[p + "w1"], params[p + "b1"]), "gelu")
    return ad.dropout(ad.linear(hid, params[p + "w2"], params[p + "b2"]), params.config.dropout_rate, rng)


def mha_forward(params: BackboneParams, x: Tensor, layer: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Attention sub-layer followed by the post-norm residual."""
    if key_mask is None:
        key_mask = np.ones(x.shape[:2])
    f = attention_sublayer(params, x, layer, key_mask)
    p = f"layer{layer}.attn_ln."
    return ad.layer_norm(f + x, params[p + "gain"], params[p + "bias"], params.config.ln_eps)


def embed(params: BackboneParams, tokens: np.ndarray) -> Tensor:
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DataError(f"tokens must be a [batch, seq] matrix, got shape {tokens.shape}")
    t = tokens.shape[1]
    if t > cfg.max_seq_len:
        raise DataError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DataError(f"token id out of range [0, {cfg.vocab_size})")
    x = ad.embedding(params["embed.tokens"], tokens)
    pos = ad.take(params["embed.positions"], slice(0, t))
    return ad.layer_norm(x + pos, params["embed.ln.gain"], params["embed.ln.bias"], cfg.ln_eps)


def _check_hooks(hooks: Hooks, cfg: BackboneConfig) -> None:
    for placement, hook in hooks.items():
        if placement not in PLACEMENTS:
            raise ConfigError(f"unknown tap placement {placement!r}")
        dim = getattr(hook, "hidden_dim", None)
        if dim is not None and dim != cfg.hidden_dim:
            raise ConfigError(f"hook for {placement} expects hidden_dim {dim}, backbone has {cfg.hidden_dim}")


def encoder_forward(
    params: BackboneParams,
    tokens: np.ndarray,
    hooks: Hooks | None = None,
    rng: np.random.Generator | None = None,
    return_taps: bool = False,
):
    """Run the encoder over a padded token matrix.

    Returns the final hidden states ``[b, t, d]`` and, if ``return_taps``, a
    :class:`LayerTap` with the raw sub-layer outputs at every tap.
    """
    cfg = params.config
    hooks = hooks or {}
    _check_hooks(hooks, cfg)
    tokens = np.asarray(tokens, dtype=np.int64)
    key_mask = key_mask_for(tokens)
    x = ad.dropout(embed(params, tokens), cfg.dropout_rate, rng)
    taps = LayerTap()
    for l in range(cfg.num_layers):
        f_attn = f = attention_sublayer(params, x, l, key_mask, rng)
        ctx = TapContext(l, "bottom", f, x, params[f"layer{l}.attn_ln.gain"], params[f"layer{l}.attn_ln.bias"], cfg.ln_eps, key_mask)
        hook = hooks.get("bottom")
        x = hook(ctx) if hook is not None else ctx.finish(f)
        f = ffn_sublayer(params, x, l, rng)
        ctx = TapContext(l, "top", f, x, params[f"layer{l}.ffn_ln.gain"], params[f"layer{l}.ffn_ln.bias"], cfg.ln_eps, key_mask)
        hook = hooks.get("top")
        x = hook(ctx) if hook is not None else ctx.finish(f)
        if return_taps:
            taps.bottom.append(f_attn)
            taps.top.append(f)
        if x.shape != f.shape:
            raise ConfigError(f"hook at layer {l} returned shape {x.shape}, expected {f.shape}")
    return (x, taps) if return_taps else x


# ---------------------------------------------------------------------------
# masked-token pretraining


@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    mask_prob: float = 0.15
    seed: int = 0


@dataclass
class PretrainResult:
    params: BackboneParams
    mlm_bias: Tensor
    final_loss: float
    losses: list[float]


def mask_tokens(tokens: np.ndarray, mask_prob: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace ``mask_prob`` of the content positions by MASK.

    Every row with content gets at least one masked position. Returns the
    corrupted matrix and a boolean matrix of masked positions.
    """
    content = tokens >= NUM_RESERVED
    chosen = (rng.random(tokens.shape) < mask_prob) & content
    for i in np.flatnonzero(content.any(axis=1) & ~chosen.any(axis=1)):
        cand = np.flatnonzero(content[i])
        chosen[i, cand[rng.integers(len(cand))]] = True
    corrupted = np.where(chosen, MASK, tokens)
    return corrupted, chosen


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def mlm_logits(params: BackboneParams, mlm_bias: Tensor, tokens: np.ndarray, chosen: np.ndarray) -> Tensor:
    h = encoder_forward(params, tokens)
    rows, cols = np.nonzero(chosen)
    picked = ad.take(h, (rows, cols))
    return ad.add(ad.matmul(picked, ad.transpose(params["embed.tokens"], (1, 0))), mlm_bias)


def pretrain_mlm(cfg: BackboneConfig, corpus: Sequence[Sequence[int]], train: PretrainConfig) -> PretrainResult:
    """Fit Theta0 by masked-token prediction with output weights tied to the embeddings."""
    if not corpus:
        raise DataError("pretraining corpus is empty")
    params = init_backbone(cfg, train.seed)
    mlm_bias = Tensor(np.zeros(cfg.vocab_size), trainable=True, name="mlm.bias")
    set_trainable(params, True)
    trainables = list(params) + [mlm_bias]
    state = OptimizerState(lr=train.lr, weight_decay=train.weight_decay)
    rng = generator(train.seed, "pretrain")
    losses: list[float] = []
    n = len(corpus)
    for step in range(train.steps):
        idx = rng.integers(0, n, size=min(train.batch_size, n))
        tokens = pad_batch([corpus[i] for i in idx])
        corrupted, chosen = mask_tokens(tokens, train.mask_prob, rng)
        if not chosen.any():
            continue
        loss = ad.cross_entropy(mlm_logits(params, mlm_bias, corrupted, chosen), tokens[chosen])
        ad.zero_grad(trainables)
        ad.backward(loss)
        adamw_step(trainables, state, linear_decay_schedule(step, train.steps, train.lr))
        losses.append(loss.item())
        if step % 100 == 0:
            log.debug("mlm step %d loss %.4f", step, losses[-1])
    set_trainable(params, False)
    mlm_bias.set_trainable(False)
    final = float(np.mean(losses[-20:])) if losses else float("nan")
    return PretrainResult(params, mlm_bias, final, losses)


def mlm_accuracy(params: BackboneParams, mlm_bias: Tensor, corpus: Sequence[Sequence[int]], mask_prob: float = 0.15,
                 seed: int = 0, batch_size: int = 64) -> float:
    rng = generator(seed, "mlm-eval")
    hits = total = 0
    for start in range(0, len(corpus), batch_size):
        tokens = pad_batch(corpus[start : start + batch_size])
        corrupted, chosen = mask_tokens(tokens, mask_prob, rng)
        logits = mlm_logits(params, mlm_bias, corrupted, chosen).data
        hits += int((logits.argmax(axis=1) == tokens[chosen]).sum())
        total += int(chosen.sum())
    return hits / max(total, 1)
