"""Adversarial score training: robust tickets from frozen random weights.

Each optimizer step solves the inner maximization with PGD, back-propagates the
loss on the perturbed batch to the scores through the straight-through
estimator, takes an SGD step on the scores and refreshes the top-k mask. The
weights themselves never change.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, derive_seed, evaluate_accuracy, pgd_attack
from .data import Splits, dataset_digest
from .errors import TrainingError
from .masked import MaskedModel, build_model

log = logging.getLogger(__name__)

LOSSES = {"cross_entropy": F.cross_entropy}


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one adversarial pruning run (all serialized into provenance).

    ``inner_step_size=None`` means epsilon / 4. ``weight_learning_rate`` is
    used only by the dense adversarial-training baseline.
    """

    loss: str = "cross_entropy"
    epsilon: float = 8 / 255
    inner_steps: int = 7
    inner_step_size: float | None = None
    inner_random_start: bool = True
    epochs: int = 10
    batch_size: int = 32
    score_learning_rate: float = 0.3
    momentum: float = 0.9
    mask_scope: str = "per-layer"
    weight_learning_rate: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TrainingConfig":
        return cls(**data)

    def inner_attack(self, seed: int) -> AttackConfig:
        return AttackConfig(family="pgd", epsilon=self.epsilon, steps=self.inner_steps,
                            step_size=self.inner_step_size, random_start=self.inner_random_start,
                            rng_seed=seed)


@dataclass(eq=False)
class RobustTicket:
    arch_id: str
    remaining_ratio: float
    omega_seed: int
    mask: list[np.ndarray]
    metrics: dict
    training_config: TrainingConfig
    input_shape: tuple[int, ...]
    num_classes: int
    dataset_digest: str = ""
    model: MaskedModel | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, RobustTicket):
            return NotImplemented
        return (
            self.arch_id == other.arch_id
            and self.remaining_ratio == other.remaining_ratio
            and self.omega_seed == other.omega_seed
            and self.metrics == other.metrics
            and self.training_config == other.training_config
            and tuple(self.input_shape) == tuple(other.input_shape)
            and self.num_classes == other.num_classes
            and self.dataset_digest == other.dataset_digest
            and len(self.mask) == len(other.mask)
            and all(np.array_equal(a, b) for a, b in zip(self.mask, other.mask))
        )

    @property
    def mask_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.mask))


def inner_maximize(model, x: torch.Tensor, y: torch.Tensor, cfg: TrainingConfig, seed: int | None = None,
                   loss_fn=None) -> torch.Tensor:
    """Worst-case perturbation of ``x`` within the training epsilon ball (PGD)."""
    attack = cfg.inner_attack(cfg.rng_seed if seed is None else seed)
    return pgd_attack(model, x, y, attack, loss_fn=loss_fn)


def straight_through_score_grad(model: MaskedModel, x_adv: torch.Tensor, y: torch.Tensor,
                                loss_fn=None) -> list[torch.Tensor]:
    """Gradient of the loss w.r.t. every layer's scores, binarization treated as identity."""
    return _score_grads(model, x_adv, y, loss_fn or F.cross_entropy)[0]


def _score_grads(model, x_adv, y, loss_fn):
    with torch.enable_grad():
        loss = loss_fn(model(x_adv), y)
        grads = torch.autograd.grad(loss, model.score_parameters())
    return list(grads), float(loss.detach())


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for b, start in enumerate(range(0, n, batch_size)):
        yield b, perm[start:start + batch_size]


def _adversarial_loop(model: MaskedModel, params: list[torch.nn.Parameter], lr: float, dataset: Splits,
                      cfg: TrainingConfig, grad_fn, after_step: Callable[[], None],
                      on_epoch: Callable[[int, float], None] | None = None) -> None:
    x_train, y_train = dataset.train
    n = len(y_train)
    if n == 0:
        raise ValueError("training split is empty")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs * steps_per_epoch))
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    loss_fn = LOSSES[cfg.loss]
    for epoch in range(cfg.epochs):
        total = 0.0
        for b, idx in _batches(n, cfg.batch_size, gen):
            xb, yb = x_train[idx], y_train[idx]
            x_adv = inner_maximize(model, xb, yb, cfg, seed=derive_seed(cfg.rng_seed, epoch, b))
            grads, loss = grad_fn(x_adv, yb, loss_fn)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {b} "
                    f"(arch={model.arch_id}, lr={sched.get_last_lr()[0]:.4g}, "
                    f"max|x_adv-x|={float((x_adv - xb).abs().max()):.4g})"
                )
            opt.zero_grad(set_to_none=True)
            for p, g in zip(params, grads):
                p.grad = g
            opt.step()
            sched.step()
            after_step()
            total += loss * len(yb)
        if on_epoch is not None:
            on_epoch(epoch + 1, total / n)


def _metrics(model, dataset: Splits, eval_attack: AttackConfig) -> dict:
    return {
        "clean_accuracy": evaluate_accuracy(model, dataset.val),
        "robust_accuracy": evaluate_accuracy(model, dataset.val, eval_attack),
    }


def default_eval_attack(cfg: TrainingConfig) -> AttackConfig:
    return AttackConfig(family="pgd", epsilon=cfg.epsilon, steps=20, rng_seed=cfg.rng_seed)


def train_ticket(arch: str | MaskedModel, remaining_ratio: float, dataset: Splits, cfg: TrainingConfig,
                 *, omega_seed: int = 0, eval_attack: AttackConfig | None = None,
                 event_log: Callable[[dict], None] | None = None,
                 on_step: Callable[[MaskedModel], None] | None = None) -> RobustTicket:
    """Train scores for ``remaining_ratio`` of an architecture's weights.

    ``arch`` is a registered arch id or a prebuilt :class:`MaskedModel`.
    ``event_log`` receives one dict per epoch (epoch, loss, clean/robust
    validation accuracy); ``on_step`` is called after each mask refresh.
    """
    if len(dataset.train[1]) == 0:
        raise ValueError("training split is empty")
    if isinstance(arch, MaskedModel):
        model = arch
    else:
        model = build_model(arch, omega_seed, dataset.input_shape, dataset.num_classes)
    eval_attack = eval_attack or default_eval_attack(cfg)
    omega_before = model.omega_digest()
    model.set_remaining_ratio(remaining_ratio, cfg.mask_scope)

    def after_step():
        model.refresh_mask()
        if model.mask_count() != model.sparsity_budget:
            raise TrainingError(f"mask has {model.mask_count()} ones, budget is {model.sparsity_budget}")
        if on_step is not None:
            on_step(model)

    def on_epoch(epoch, loss):
        if event_log is not None:
            event_log({"event": "epoch", "arch_id": model.arch_id, "remaining_ratio": remaining_ratio,
                       "epoch": epoch, "loss": loss, **_metrics(model, dataset, eval_attack)})

    _adversarial_loop(model, model.score_parameters(), cfg.score_learning_rate, dataset, cfg,
                      lambda xa, y, fn: _score_grads(model, xa, y, fn), after_step, on_epoch)
    if model.omega_digest() != omega_before:
        raise TrainingError("omega changed during score training")
    metrics = _metrics(model, dataset, eval_attack)
    log.info("ticket %s@%.2f clean=%.3f robust=%.3f", model.arch_id, remaining_ratio,
             metrics["clean_accuracy"], metrics["robust_accuracy"])
    return RobustTicket(
        arch_id=model.arch_id,
        remaining_ratio=remaining_ratio,
        omega_seed=omega_seed if model.seed is None else model.seed,
        mask=[m.numpy() for m in model.masks()],
        metrics=metrics,
        training_config=cfg,
        input_shape=tuple(model.input_shape),
        num_classes=model.num_classes,
        dataset_digest=dataset_digest(dataset.train),
        model=model,
    )


def train_dense(arch_id: str, dataset: Splits, cfg: TrainingConfig, omega_seed: int = 0) -> MaskedModel:
    """Adversarially train all weights of an unpruned model (baseline only)."""
    model = build_model(arch_id, omega_seed, dataset.input_shape, dataset.num_classes)
    layers = model.masked_layers()
    weights = [layer.omega for layer in layers]
    for layer in layers:
        layer.omega.requires_grad_(True)
        layer.scores.requires_grad_(False)

    def grad_fn(x_adv, y, loss_fn):
        with torch.enable_grad():
            loss = loss_fn(model(x_adv), y)
            grads = torch.autograd.grad(loss, weights)
        return grads, float(loss.detach())

    _adversarial_loop(model, weights, cfg.weight_learning_rate, dataset, cfg, grad_fn, lambda: None)
    for layer in layers:
        layer.omega.requires_grad_(False)
    return model


def jsonl_writer(path):
    """Event sink appending one JSON object per line to ``path``."""
    def write(event: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    return write
