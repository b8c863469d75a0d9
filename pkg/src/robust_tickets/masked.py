"""Masked layers, top-k binarization and the desk-scale architecture registry.

Every prunable layer carries three tensors of one shape:

* ``omega``  -- random weights, frozen once drawn
* ``scores`` -- learnable real-valued importance scores
* ``mask``   -- binary buffer holding the top-k binarization of ``scores``

The layer computes with ``mask * omega``. Gradients reach the scores through a
straight-through estimator, so d(loss)/d(score_j) = d(loss)/d(w_eff_j) * omega_j
for every entry, kept or not.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

REMAINING_RATIOS = (0.07, 0.10, 0.12, 0.15, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70)
SCOPES = ("per-layer", "global")


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def budget_for(ratio: float, count: int) -> int:
    """Number of active weights for ``ratio`` of ``count`` prunable entries."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"remaining ratio must lie in (0, 1], got {ratio}")
    return round_half_up(ratio * count)


def apportion(k: int, sizes: Sequence[int]) -> list[int]:
    """Split ``k`` over layers proportionally to ``sizes`` (largest remainder).

    Integer arithmetic throughout, so the parts always sum to ``k`` exactly.
    Remainder ties go to the lower layer index.
    """
    total = sum(sizes)
    if not 0 <= k <= total:
        raise ValueError(f"k={k} outside [0, {total}]")
    parts = [k * n // total for n in sizes]
    remainders = [k * n % total for n in sizes]
    short = k - sum(parts)
    order = sorted(range(len(sizes)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        parts[i] += 1
    return parts


def _topk_flat(flat: torch.Tensor, k: int) -> torch.Tensor:
    # ascending stable sort of -|s| keeps equal magnitudes in index order
    order = torch.sort(-flat.detach().abs(), stable=True).indices
    mask = torch.zeros(flat.numel(), dtype=torch.bool, device=flat.device)
    mask[order[:k]] = True
    return mask


def topk_binarize(scores, k: int, scope: str = "per-layer"):
    """Binary mask with exactly ``k`` ones at the largest-magnitude scores.

    ``scores`` is a tensor or a sequence of per-layer tensors; the result has
    the same structure with ``torch.bool`` entries. With ``scope="per-layer"``
    the budget is apportioned over layers by size before ranking inside each
    layer; with ``scope="global"`` all entries compete. Ties go to the lowest
    flattened index.
    """
    single = isinstance(scores, torch.Tensor)
    layers = [scores] if single else list(scores)
    sizes = [s.numel() for s in layers]
    total = sum(sizes)
    if k < 0 or k > total:
        raise ValueError(f"k={k} must lie in [0, {total}] (number of score entries)")
    if scope == "global":
        flat = torch.cat([s.detach().reshape(-1) for s in layers])
        mask = _topk_flat(flat, k)
        out, start = [], 0
        for s, n in zip(layers, sizes):
            out.append(mask[start:start + n].reshape(s.shape))
            start += n
    elif scope == "per-layer":
        ks = apportion(k, sizes)
        out = [_topk_flat(s.reshape(-1), kl).reshape(s.shape) for s, kl in zip(layers, ks)]
    else:
        raise ValueError(f"unknown mask scope {scope!r}; expected one of {SCOPES}")
    return out[0] if single else out


class _StraightThrough(torch.autograd.Function):
    """Returns the mask forward; passes the gradient to the scores unchanged."""

    @staticmethod
    def forward(ctx, scores, mask):
        return mask.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


class MaskedLayer(nn.Module):
    """Base for layers whose weight is ``mask * omega``."""

    kind = "masked"

    def _register_masked(self, shape: tuple[int, ...], fan_in: int, bias_size: int | None):
        self.fan_in = fan_in
        self.omega = nn.Parameter(torch.zeros(shape), requires_grad=False)
        self.scores = nn.Parameter(torch.zeros(shape))
        self.register_buffer("mask", torch.ones(shape))
        if bias_size is None:
            self.register_parameter("bias", None)
        else:
            self.bias = nn.Parameter(torch.zeros(bias_size), requires_grad=False)

    def reset_omega(self, generator: torch.Generator) -> None:
        # Kaiming-uniform for ReLU: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))
        bound = math.sqrt(6.0 / self.fan_in)
        with torch.no_grad():
            u = torch.rand(self.omega.shape, generator=generator, dtype=self.omega.dtype)
            self.omega.copy_((2.0 * u - 1.0) * bound)
            if self.bias is not None:
                b = torch.rand(self.bias.shape, generator=generator, dtype=self.bias.dtype)
                self.bias.copy_((2.0 * b - 1.0) / math.sqrt(self.fan_in))

    def init_scores(self) -> None:
        """Scores proportional to |omega|, scaled into (0, 1]."""
        with torch.no_grad():
            mag = self.omega.abs()
            peak = mag.max()
            self.scores.copy_(mag / peak if peak > 0 else torch.ones_like(mag))

    def set_mask(self, mask: torch.Tensor) -> None:
        if tuple(mask.shape) != tuple(self.mask.shape):
            raise ValueError(f"mask shape {tuple(mask.shape)} != weight shape {tuple(self.mask.shape)}")
        with torch.no_grad():
            self.mask.copy_(mask.to(self.mask.dtype))

    def effective_weight(self) -> torch.Tensor:
        if self.scores.requires_grad and torch.is_grad_enabled():
            return self.omega * _StraightThrough.apply(self.scores, self.mask)
        return self.omega * self.mask


class MaskedLinear(MaskedLayer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self._register_masked((out_features, in_features), in_features, out_features if bias else None)

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.bias)


class MaskedConv2d(MaskedLayer):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 bias: bool = False):
        super().__init__()
        self.stride, self.padding = stride, kernel_size // 2
        self._register_masked((out_channels, in_channels, kernel_size, kernel_size),
                              in_channels * kernel_size * kernel_size,
                              out_channels if bias else None)

    def forward(self, x):
        return F.conv2d(x, self.effective_weight(), self.bias, stride=self.stride, padding=self.padding)


# --------------------------------------------------------------------------
# architecture registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Family:
    widths: tuple[int, int]
    blocks_per_stage: int
    role: str


# Two narrow and two wide residual families, each in a shallow and a deeper cut.
FAMILIES: dict[str, _Family] = {
    "rn-small": _Family((16, 32), 1, "narrow, shallow"),
    "rn-deep": _Family((16, 32), 2, "narrow, deeper"),
    "wrn-small": _Family((32, 64), 1, "wide, shallow"),
    "wrn-deep": _Family((32, 64), 2, "wide, deeper"),
}
ARCH_IDS = tuple(FAMILIES)


@dataclass(frozen=True)
class LayerDescriptor:
    kind: str
    fan_in: int
    fan_out: int
    prunable: bool = True
    bias: bool = False

    @property
    def param_count(self) -> int:
        return self.fan_in * self.fan_out + (self.fan_out if self.bias else 0)


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: str
    input_shape: tuple[int, ...]
    num_classes: int
    layer_descriptors: tuple[LayerDescriptor, ...]

    @property
    def param_count(self) -> int:
        return sum(d.param_count for d in self.layer_descriptors)

    @property
    def prunable_count(self) -> int:
        return sum(d.fan_in * d.fan_out for d in self.layer_descriptors if d.prunable)

    def to_json(self) -> dict:
        out = asdict(self)
        out["input_shape"] = list(self.input_shape)
        out["param_count"] = self.param_count
        out["prunable_count"] = self.prunable_count
        return out


def _blueprint(family: _Family, in_channels: int, num_classes: int):
    """(kind, in, out, kernel, stride) for every masked layer, in module order."""
    w0, w1 = family.widths
    plan = [("conv", in_channels, w0, 3, 1)]
    plan += [("conv", w0, w0, 3, 1)] * (2 * family.blocks_per_stage)
    plan += [("conv", w0, w1, 3, 2)]
    plan += [("conv", w1, w1, 3, 1)] * (2 * family.blocks_per_stage)
    plan += [("linear", w1, num_classes, 1, 1)]
    return plan


def architecture_spec(arch_id: str, input_shape=(1, 8, 8), num_classes: int = 10) -> ArchitectureSpec:
    if arch_id not in FAMILIES:
        raise ConfigurationError(f"unknown arch_id {arch_id!r}; registered: {', '.join(ARCH_IDS)}")
    descriptors = tuple(
        LayerDescriptor(kind, c_in * k * k, c_out)
        for kind, c_in, c_out, k, _ in _blueprint(FAMILIES[arch_id], input_shape[0], num_classes)
    )
    return ArchitectureSpec(arch_id, tuple(input_shape), num_classes, descriptors)


class _ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = MaskedConv2d(width, width)
        self.conv2 = MaskedConv2d(width, width)
        # parameter-free per-sample normalization: no running statistics to store
        self.norm = nn.GroupNorm(1, width, affine=False)

    def forward(self, x):
        out = F.relu(self.norm(self.conv1(x)))
        return F.relu(self.norm(self.conv2(out)) + x)


class TicketNet(nn.Module):
    """Two-stage residual convnet: stem, blocks, strided transition, blocks, linear head."""

    def __init__(self, family: _Family, in_channels: int, num_classes: int):
        super().__init__()
        w0, w1 = family.widths
        self.stem = MaskedConv2d(in_channels, w0)
        self.norm0 = nn.GroupNorm(1, w0, affine=False)
        self.stage0 = nn.Sequential(*[_ResidualBlock(w0) for _ in range(family.blocks_per_stage)])
        self.down = MaskedConv2d(w0, w1, stride=2)
        self.norm1 = nn.GroupNorm(1, w1, affine=False)
        self.stage1 = nn.Sequential(*[_ResidualBlock(w1) for _ in range(family.blocks_per_stage)])
        self.head = MaskedLinear(w1, num_classes)

    def forward(self, x):
        x = F.relu(self.norm0(self.stem(x)))
        x = self.stage0(x)
        x = F.relu(self.norm1(self.down(x)))
        x = self.stage1(x)
        return self.head(x.mean(dim=(2, 3)))


@dataclass
class MaskedParameterSet:
    """Snapshot view of (omega, scores, mask, k) across the prunable layers."""

    omega: list[torch.Tensor]
    scores: list[torch.Tensor]
    mask: list[torch.Tensor]
    sparsity_budget: int


class MaskedModel(nn.Module):
    """A network whose prunable layers are :class:`MaskedLayer` instances.

    ``sparsity_budget`` is the total number of active weights k; ``scope``
    selects per-layer or global top-k when the mask is refreshed.
    """

    def __init__(self, net: nn.Module, input_shape, num_classes: int, arch_id: str | None = None,
                 seed: int | None = None, spec: ArchitectureSpec | None = None):
        super().__init__()
        self.net = net
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch_id = arch_id
        self.seed = seed
        self.spec = spec
        self.scope = "per-layer"
        self.sparsity_budget = self.prunable_count
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape)} does not match (batch, {self.input_shape})")
        return self.net(x)

    def masked_layers(self) -> list[MaskedLayer]:
        return [m for m in self.net.modules() if isinstance(m, MaskedLayer)]

    @property
    def prunable_count(self) -> int:
        return sum(layer.omega.numel() for layer in self.masked_layers())

    def init_scores(self) -> None:
        for layer in self.masked_layers():
            layer.init_scores()

    def set_remaining_ratio(self, ratio: float, scope: str = "per-layer") -> None:
        if scope not in SCOPES:
            raise ValueError(f"unknown mask scope {scope!r}")
        self.scope = scope
        self.sparsity_budget = budget_for(ratio, self.prunable_count)
        self.refresh_mask()

    def refresh_mask(self) -> None:
        layers = self.masked_layers()
        masks = topk_binarize([layer.scores for layer in layers], self.sparsity_budget, self.scope)
        for layer, m in zip(layers, masks):
            layer.set_mask(m)

    def set_masks(self, masks: Sequence[torch.Tensor]) -> None:
        layers = self.masked_layers()
        if len(masks) != len(layers):
            raise ValueError(f"expected {len(layers)} masks, got {len(masks)}")
        for layer, m in zip(layers, masks):
            layer.set_mask(torch.as_tensor(m))

    def masks(self) -> list[torch.Tensor]:
        return [layer.mask.detach().bool().clone() for layer in self.masked_layers()]

    def mask_count(self) -> int:
        return int(sum(layer.mask.sum().item() for layer in self.masked_layers()))

    def score_parameters(self) -> list[nn.Parameter]:
        return [layer.scores for layer in self.masked_layers()]

    def omega_digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.masked_layers():
            h.update(layer.omega.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def parameter_set(self) -> MaskedParameterSet:
        layers = self.masked_layers()
        return MaskedParameterSet(
            omega=[layer.omega.detach().clone() for layer in layers],
            scores=[layer.scores.detach().clone() for layer in layers],
            mask=self.masks(),
            sparsity_budget=self.sparsity_budget,
        )


def build_model(arch_id: str, seed: int, input_shape=(1, 8, 8), num_classes: int = 10) -> MaskedModel:
    """Instantiate a registered architecture with omega drawn from ``seed``.

    Scores start proportional to |omega| and the mask starts all-ones.
    """
    spec = architecture_spec(arch_id, input_shape, num_classes)
    net = TicketNet(FAMILIES[arch_id], input_shape[0], num_classes)
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    model = MaskedModel(net, input_shape, num_classes, arch_id=arch_id, seed=seed, spec=spec)
    for layer in model.masked_layers():
        layer.reset_omega(gen)
    model.init_scores()
    return model


def masked_forward(model: MaskedModel, x: torch.Tensor) -> torch.Tensor:
    """Logits of ``model`` computed with effective weights mask * omega."""
    return model(x)
