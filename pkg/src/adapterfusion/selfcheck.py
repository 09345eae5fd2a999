"""A tiny fused model whose every tensor is gradient-checked end to end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, make_adapter
from .autodiff import Tensor
from .backbone import BackboneConfig, init_backbone
from .fusion import fusion_init, fusion_regularizer
from .gradcheck import GradCheckReport, grad_check
from .model import Assembly, init_head
from .rng import generator
from .tasks import PAD


@dataclass
class TinyFusionModel:
    assembly: Assembly
    tokens: np.ndarray
    labels: np.ndarray
    target: str
    lam: float

    def loss(self) -> Tensor:
        logits = self.assembly.logits(self.tokens, self.target)
        return ad.cross_entropy(logits, self.labels) + fusion_regularizer(self.assembly.fusion, self.lam)

    def params(self) -> list[Tensor]:
        return [t for group in self.assembly.named_groups().values() for _, t in group]


def tiny_fusion_model(seed: int = 0, members: int = 3, d: int = 8, layers: int = 2, heads: int = 2,
                      lam: float = 0.01) -> TinyFusionModel:
    """Random backbone, randomly initialised adapters and a perturbed fusion layer.

    Adapters use ``full_random`` init and V is moved away from identity so
    that every path carries a nonzero gradient.
    """
    bcfg = BackboneConfig(vocab_size=16, max_seq_len=6, hidden_dim=d, num_layers=layers, num_heads=heads, ffn_dim=2 * d)
    theta = init_backbone(bcfg, seed)
    acfg = AdapterConfig.pfeiffer(reduction_factor=2, init_style="full_random")
    names = [f"task{i}" for i in range(members)]
    adapters = {n: make_adapter(bcfg, acfg, seed, n) for n in names}
    target = names[0]
    psi = fusion_init(bcfg, list(adapters.values()), seed, target)
    rng = generator(seed, "selfcheck")
    for l in range(layers):
        psi.query(l).data = rng.normal(0.0, 0.5, size=(d, d))
        psi.key(l).data = rng.normal(0.0, 0.5, size=(d, d))
        psi.value(l).data = psi.value(l).data + rng.normal(0.0, 0.1, size=(d, d))
    head = init_head(d, 3, seed, target)
    head.weight.data = rng.normal(0.0, 0.5, size=head.weight.shape)
    asm = Assembly(theta, heads={target: head}, adapters=adapters, fusion=psi)
    tokens = rng.integers(4, bcfg.vocab_size, size=(3, 5))
    tokens[:, 0] = 2
    tokens[1, 4] = PAD
    tokens[2, 3:] = PAD
    labels = np.array([0, 2, 1])
    model = TinyFusionModel(asm, tokens, labels, target, lam)
    for p in model.params():
        p.set_trainable(True)
    return model


def fusion_grad_check(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    model = tiny_fusion_model(seed)
    return grad_check(model.loss, model.params(), h=h, tol=tol, floor=floor)
