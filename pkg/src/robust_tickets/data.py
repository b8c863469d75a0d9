"""Dataset loading and seeded splits.

Datasets are plain ``(x, y)`` tensor pairs with pixels in [0, 1]. ``digits``
(scikit-learn's bundled 8x8 handwritten digits) needs no download and is the
desk-scale default; ``cifar10`` reads an existing torchvision copy from disk.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError


@dataclass
class Splits:
    train: tuple[torch.Tensor, torch.Tensor]
    val: tuple[torch.Tensor, torch.Tensor]
    test: tuple[torch.Tensor, torch.Tensor]
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train[0].shape[1:])


def dataset_digest(dataset) -> str:
    x, y = dataset
    h = hashlib.sha256()
    h.update(str(tuple(x.shape)).encode())
    h.update(x.detach().cpu().contiguous().numpy().tobytes())
    h.update(y.detach().cpu().contiguous().numpy().astype(np.int64).tobytes())
    return h.hexdigest()


def subset(dataset, n: int, seed: int):
    """Seeded random subset of at most ``n`` samples, kept in a fixed order."""
    x, y = dataset
    if n >= len(y):
        return x, y
    idx = np.sort(np.random.default_rng(seed).permutation(len(y))[:n])
    idx = torch.as_tensor(idx)
    return x[idx], y[idx]


def _load_digits():
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.tensor(d.data / 16.0, dtype=torch.float32).reshape(-1, 1, 8, 8)
    return x, torch.tensor(d.target, dtype=torch.long)


def _load_cifar10(root: str):
    import torchvision

    try:
        parts = [torchvision.datasets.CIFAR10(root, train=t, download=False) for t in (True, False)]
    except RuntimeError as exc:
        raise ConfigurationError(f"CIFAR-10 not found under {root!r}: {exc}") from exc
    x = np.concatenate([p.data for p in parts]).astype(np.float32) / 255.0
    y = np.concatenate([np.asarray(p.targets) for p in parts])
    return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous(), torch.from_numpy(y).long()


def synthetic_blobs(n: int, num_classes: int = 3, shape=(1, 4, 4), seed: int = 0, spread: float = 0.12):
    """Class-conditional Gaussian images clipped to [0, 1]; cheap test data."""
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centres = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    y = rng.integers(0, num_classes, size=n)
    x = np.clip(centres[y] + spread * rng.standard_normal((n, dim)), 0.0, 1.0)
    return torch.tensor(x, dtype=torch.float32).reshape(n, *shape), torch.tensor(y, dtype=torch.long)


def load_splits(name: str = "digits", train: int = 1200, val: int = 300, test: int = 297,
                subset_seed: int = 0, root: str | None = None) -> Splits:
    """Shuffle the pooled data with ``subset_seed`` and carve disjoint splits."""
    num_classes = 10
    if name == "digits":
        x, y = _load_digits()
    elif name == "cifar10":
        x, y = _load_cifar10(root or "data")
    elif name == "synthetic":
        num_classes = 3
        x, y = synthetic_blobs(train + val + test, num_classes=num_classes, seed=subset_seed)
    else:
        raise ConfigurationError(f"unknown dataset {name!r}")
    need = train + val + test
    if need > len(y):
        raise ConfigurationError(f"{name} has {len(y)} samples, splits need {need}")
    if min(train, val, test) <= 0:
        raise ConfigurationError("split sizes must be positive")
    perm = torch.as_tensor(np.random.default_rng(subset_seed).permutation(len(y))[:need])
    x, y = x[perm], y[perm]
    return Splits(
        train=(x[:train], y[:train]),
        val=(x[train:train + val], y[train:train + val]),
        test=(x[train + val:], y[train + val:]),
        num_classes=num_classes,
    )
