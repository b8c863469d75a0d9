"""L-infinity PGD and gradient-mean EOT attacks, plus accuracy evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

FAMILIES = ("none", "pgd", "eot")

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class AttackConfig:
    """White-box attack settings. ``epsilon`` and ``step_size`` are fractions of the [0, 1] pixel range.

    ``step_size=None`` means epsilon / 4. ``eot_sample_size`` draws that many
    members per EOT step instead of using all of them.
    """

    family: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float | None = None
    random_start: bool = True
    norm: str = "linf"
    rng_seed: int = 0
    eot_sample_size: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.norm != "linf":
            raise ValueError("only the L-infinity norm is supported")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.family != "none" and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "AttackConfig":
        return cls(**data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def cross_entropy_sum(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, y, reduction="sum")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFF_FFFF for p in parts]).generate_state(1)[0])


def input_gradient(model, x: torch.Tensor, y: torch.Tensor, loss_fn: LossFn | None = None) -> torch.Tensor:
    """d(loss)/dx for one model; model parameters receive no gradient."""
    loss_fn = loss_fn or cross_entropy_sum
    x = x.detach().requires_grad_(True)
    loss = loss_fn(model(x), y)
    (grad,) = torch.autograd.grad(loss, x)
    return grad.detach()


def pairwise_sum(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Tree summation; a fixed reduction order for any member count."""
    items = list(tensors)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def eot_gradient(models: Sequence, x: torch.Tensor, y: torch.Tensor, loss_fn: LossFn | None = None) -> torch.Tensor:
    """Arithmetic mean of the members' input gradients."""
    if not models:
        raise ValueError("EOT needs at least one model")
    grads = [input_gradient(m, x, y, loss_fn) for m in models]
    return pairwise_sum(grads) / len(grads)


def project(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Projection onto the epsilon ball around ``x`` intersected with [0, 1]."""
    x_adv = torch.maximum(torch.minimum(x_adv, x + epsilon), x - epsilon)
    return x_adv.clamp(0.0, 1.0)


def _signed_ascent(grad_fn: Callable[[torch.Tensor, int, torch.Generator], torch.Tensor],
                   x: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    x = x.detach()
    if cfg.epsilon == 0:
        return x.clone()
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    if cfg.random_start:
        noise = torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1
        x_adv = project(x + cfg.epsilon * noise, x, cfg.epsilon)
    else:
        x_adv = x.clone()
    for step in range(cfg.steps):
        grad = grad_fn(x_adv, step, gen)
        x_adv = project(x_adv + cfg.alpha * grad.sign(), x, cfg.epsilon).detach()
    return x_adv


def _check_input(x: torch.Tensor, cfg: AttackConfig, family: str) -> None:
    if cfg.family != family:
        raise ValueError(f"attack config family is {cfg.family!r}, expected {family!r}")


def pgd_attack(model, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
               loss_fn: LossFn | None = None) -> torch.Tensor:
    """Projected signed-gradient ascent on the loss inside the L-inf ball."""
    _check_input(x, cfg, "pgd")
    return _signed_ascent(lambda xa, step, gen: input_gradient(model, xa, y, loss_fn), x, cfg)


def eot_attack(models: Sequence, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
               loss_fn: LossFn | None = None) -> torch.Tensor:
    """PGD stepping along the mean gradient of ``models``.

    With ``cfg.eot_sample_size`` set, each step averages over a random subset
    of that size instead of every member.
    """
    _check_input(x, cfg, "eot")
    models = list(models)
    if not models:
        raise ValueError("EOT needs at least one model")

    def grad_fn(xa, step, gen):
        members = models
        if cfg.eot_sample_size is not None and cfg.eot_sample_size < len(models):
            idx = torch.randperm(len(models), generator=gen)[: cfg.eot_sample_size].sort().values
            members = [models[i] for i in idx.tolist()]
        return eot_gradient(members, xa, y, loss_fn)

    return _signed_ascent(grad_fn, x, cfg)


def run_attack(predictor, x, y, cfg: AttackConfig, attack_models: Sequence | None = None) -> torch.Tensor:
    if cfg.family == "none":
        return x.detach().clone()
    if cfg.family == "pgd":
        return pgd_attack(predictor, x, y, cfg)
    return eot_attack(attack_models if attack_models is not None else [predictor], x, y, cfg)


def iter_batches(dataset, batch_size: int):
    x, y = dataset
    for start in range(0, len(y), batch_size):
        yield start // batch_size, x[start:start + batch_size], y[start:start + batch_size]


def attack_dataset(predictor, dataset, cfg: AttackConfig, attack_models: Sequence | None = None,
                   batch_size: int = 256) -> torch.Tensor:
    """Adversarial version of a whole dataset; batch ``b`` uses seed ``derive_seed(cfg.rng_seed, b)``."""
    out = [run_attack(predictor, xb, yb, cfg.replace(rng_seed=derive_seed(cfg.rng_seed, b)), attack_models)
           for b, xb, yb in iter_batches(dataset, batch_size)]
    return torch.cat(out) if out else dataset[0][:0].clone()


@torch.no_grad()
def predict(predictor, x: torch.Tensor) -> torch.Tensor:
    return predictor(x).argmax(dim=1)


def evaluate_accuracy(predictor, dataset, attack: AttackConfig | None = None,
                      attack_models: Sequence | None = None, batch_size: int = 256) -> float:
    """Fraction of ``dataset`` classified correctly after ``attack``.

    ``dataset`` is an ``(x, y)`` pair. Batch ``b`` is attacked with seed
    ``derive_seed(attack.rng_seed, b)``. EOT attacks use ``attack_models``
    (default: the predictor alone) while accuracy is measured on ``predictor``.
    """
    attack = attack or AttackConfig(family="none")
    x, y = dataset
    if len(y) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    correct = 0
    for b, xb, yb in iter_batches(dataset, batch_size):
        xa = run_attack(predictor, xb, yb, attack.replace(rng_seed=derive_seed(attack.rng_seed, b)), attack_models)
        correct += int((predict(predictor, xa) == yb).sum())
    return correct / len(y)
