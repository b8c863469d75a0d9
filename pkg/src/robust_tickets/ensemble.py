"""Dynamic stochastic ensemble over a ticket library.

An ensemble state theta = (alpha, n, s) is drawn in three stages:

1. ``alpha``: each structure is included independently with probability
   ``structure_inclusion_prob``; the all-excluded draw is rejected and redrawn.
2. ``counts``: every included structure draws n_i from ``count_distribution``
   (probabilities of n_i = 1, 2, ...).
3. ``picks``: n_i distinct remaining ratios per included structure, uniformly
   without replacement from that structure's pool.

The ensemble output is the mean of the selected members' logits.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError
from .masked import ARCH_IDS


def _rk(ratio: float) -> float:
    return round(float(ratio), 6)


@dataclass
class Member:
    arch_id: str
    ratio: float
    model: torch.nn.Module
    ticket_id: str | None = None
    metrics: dict = field(default_factory=dict)


class TicketLibrary:
    """Loaded tickets addressable by (arch_id, remaining_ratio)."""

    def __init__(self):
        self._members: dict[tuple[str, float], Member] = {}

    def add(self, arch_id: str, ratio: float, model, ticket_id: str | None = None, metrics=None) -> None:
        self._members[(arch_id, _rk(ratio))] = Member(arch_id, _rk(ratio), model, ticket_id, dict(metrics or {}))

    def __len__(self) -> int:
        return len(self._members)

    def __contains__(self, key) -> bool:
        return (key[0], _rk(key[1])) in self._members

    def keys(self) -> list[tuple[str, float]]:
        return sorted(self._members, key=_key_order)

    def member(self, arch_id: str, ratio: float) -> Member:
        try:
            return self._members[(arch_id, _rk(ratio))]
        except KeyError:
            raise ConfigurationError(f"library has no ticket for ({arch_id}, {ratio})") from None

    def model(self, arch_id: str, ratio: float):
        return self.member(arch_id, ratio).model

    def members(self) -> list[Member]:
        return [self._members[k] for k in self.keys()]

    def models(self) -> list:
        return [m.model for m in self.members()]

    def structures(self) -> list[str]:
        return sorted({a for a, _ in self._members}, key=_arch_order)

    def pool(self, arch_id: str) -> tuple[float, ...]:
        return tuple(sorted(r for a, r in self._members if a == arch_id))

    def restrict(self, arch_id: str) -> "TicketLibrary":
        sub = TicketLibrary()
        for m in self.members():
            if m.arch_id == arch_id:
                sub._members[(m.arch_id, m.ratio)] = m
        return sub


def _arch_order(arch_id: str):
    return (ARCH_IDS.index(arch_id), "") if arch_id in ARCH_IDS else (len(ARCH_IDS), arch_id)


def _key_order(key):
    return (_arch_order(key[0]), key[1])


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    Empty ``structures`` / ``sparsity_pool`` mean "whatever the library holds".
    ``structure_inclusion_prob`` is a single probability or one per structure.
    ``combine`` is ``"mean"`` (mean logits) or ``"softmax"`` (log of mean
    probabilities). ``resample`` picks when a dynamic ensemble redraws theta:
    every ``"call"``, every ``"input"`` or once per ``"session"``.
    """

    structures: tuple[str, ...] = ()
    sparsity_pool: dict = field(default_factory=dict)
    structure_inclusion_prob: float | tuple[float, ...] = 0.5
    count_distribution: tuple[float, ...] = (0.65, 0.35)
    rng_seed: int = 0
    combine: str = "mean"
    resample: str = "call"

    def __post_init__(self):
        dist = np.asarray(self.count_distribution, dtype=float)
        if dist.ndim != 1 or len(dist) == 0 or (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"count_distribution must be a probability vector, got {self.count_distribution}")
        probs = np.atleast_1d(np.asarray(self.structure_inclusion_prob, dtype=float))
        if ((probs < 0) | (probs > 1)).any() or not (probs > 0).any():
            raise ConfigurationError("structure_inclusion_prob must lie in [0, 1] with at least one positive")
        if self.combine not in ("mean", "softmax"):
            raise ConfigurationError(f"unknown combine rule {self.combine!r}")
        if self.resample not in ("call", "input", "session"):
            raise ConfigurationError(f"unknown resample mode {self.resample!r}")

    def to_json(self) -> dict:
        return {
            "structures": list(self.structures),
            "sparsity_pool": {k: list(v) for k, v in self.sparsity_pool.items()},
            "structure_inclusion_prob": self.structure_inclusion_prob if np.isscalar(self.structure_inclusion_prob)
            else list(self.structure_inclusion_prob),
            "count_distribution": list(self.count_distribution),
            "rng_seed": self.rng_seed,
            "combine": self.combine,
            "resample": self.resample,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SamplerConfig":
        data = dict(data)
        if "structures" in data:
            data["structures"] = tuple(data["structures"])
        if "sparsity_pool" in data:
            data["sparsity_pool"] = {k: tuple(v) for k, v in data["sparsity_pool"].items()}
        if "count_distribution" in data:
            data["count_distribution"] = tuple(data["count_distribution"])
        if isinstance(data.get("structure_inclusion_prob"), list):
            data["structure_inclusion_prob"] = tuple(data["structure_inclusion_prob"])
        return cls(**data)


@dataclass(frozen=True)
class ThetaSample:
    """One ensemble state: inclusion flags, per-structure counts and chosen ratios."""

    structures: tuple[str, ...]
    alpha: tuple[bool, ...]
    counts: tuple[int, ...]
    picks: tuple[tuple[float, ...], ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def members(self) -> list[tuple[str, float]]:
        return [(s, r) for s, p in zip(self.structures, self.picks) for r in p]

    def check(self, max_count: int = 2) -> None:
        """Raise AssertionError if any structural invariant is violated."""
        n = len(self.structures)
        assert len(self.alpha) == len(self.counts) == len(self.picks) == n
        assert any(self.alpha), "no structure selected"
        for a, c, p in zip(self.alpha, self.counts, self.picks):
            if a:
                assert 1 <= c <= max_count, f"count {c} outside [1, {max_count}]"
            else:
                assert c == 0 and not p
            assert len(p) == c and len(set(p)) == c, "picks must be c distinct ratios"
        assert 1 <= self.total <= max_count * n

    def to_json(self) -> dict:
        return {"structures": list(self.structures), "alpha": [int(a) for a in self.alpha],
                "counts": list(self.counts), "picks": [list(p) for p in self.picks], "total": self.total}


def _available(manifest) -> set[tuple[str, float]] | None:
    if manifest is None:
        return None
    keys = manifest.keys() if hasattr(manifest, "keys") else manifest
    return {(a, _rk(r)) for a, r in keys}


def resolve_pools(manifest, cfg: SamplerConfig, structures: Sequence[str] | None = None):
    """Structures and ratio pools the sampler will use, checked against ``manifest``."""
    available = _available(manifest)
    if structures is None:
        structures = cfg.structures or (
            sorted({a for a, _ in available}, key=_arch_order) if available else tuple(cfg.sparsity_pool))
    if not structures:
        raise ConfigurationError("sampler has no structures")
    pools = []
    for s in structures:
        pool = cfg.sparsity_pool.get(s)
        if pool is None:
            if available is None:
                raise ConfigurationError(f"no sparsity pool for structure {s!r}")
            pool = sorted(r for a, r in available if a == s)
        pool = tuple(sorted(_rk(r) for r in pool))
        if not pool:
            raise ConfigurationError(f"empty sparsity pool for structure {s!r}")
        if available is not None:
            missing = [r for r in pool if (s, r) not in available]
            if missing:
                raise ConfigurationError(f"library lacks tickets for {s!r} at ratios {missing}")
        pools.append(pool)
    return tuple(structures), tuple(pools)


def _inclusion_probs(cfg: SamplerConfig, n: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(cfg.structure_inclusion_prob, dtype=float))
    if p.size == 1:
        return np.full(n, float(p[0]))
    if p.size != n:
        raise ConfigurationError(f"{p.size} inclusion probabilities for {n} structures")
    return p


def _draw_count(rng: np.random.Generator, dist: Sequence[float], pool_size: int) -> int:
    """Draw n_i from ``dist``; counts beyond the pool size are capped at the pool size."""
    p = np.asarray(dist, dtype=float)
    return min(int(rng.choice(len(p), p=p)) + 1, pool_size)


def _draw(structures, pools, alpha, cfg: SamplerConfig, rng: np.random.Generator) -> ThetaSample:
    counts = [_draw_count(rng, cfg.count_distribution, len(pool)) if a else 0 for a, pool in zip(alpha, pools)]
    picks = []
    for c, pool in zip(counts, pools):
        idx = rng.choice(len(pool), size=c, replace=False) if c else []
        picks.append(tuple(sorted(pool[i] for i in idx)))
    return ThetaSample(tuple(structures), tuple(bool(a) for a in alpha), tuple(counts), tuple(picks))


def sample_theta(library_manifest, cfg: SamplerConfig, rng: np.random.Generator) -> ThetaSample:
    """Draw one ensemble state (see module docstring for the three stages)."""
    structures, pools = resolve_pools(library_manifest, cfg)
    probs = _inclusion_probs(cfg, len(structures))
    while True:
        alpha = rng.random(len(structures)) < probs
        if alpha.any():
            break
    return _draw(structures, pools, alpha, cfg, rng)


def sample_r2s(structure: str, cfg: SamplerConfig, rng: np.random.Generator, library_manifest=None) -> ThetaSample:
    """Single-structure baseline state: only ``structure`` is included."""
    structures, pools = resolve_pools(library_manifest, cfg, [structure])
    return _draw(structures, pools, [True], cfg, rng)


def combine_logits(logits: Sequence[torch.Tensor], rule: str = "mean") -> torch.Tensor:
    stacked = torch.stack(list(logits))
    if rule == "mean":
        return stacked.mean(dim=0)
    return torch.log(torch.softmax(stacked, dim=-1).mean(dim=0))


def ensemble_forward(theta: ThetaSample, library: TicketLibrary, x: torch.Tensor,
                     combine: str = "mean") -> torch.Tensor:
    """Mean of member logits over the members selected by ``theta``."""
    members = sorted(theta.members(), key=_key_order)
    if not members:
        raise ConfigurationError("theta selects no members")
    return combine_logits([library.model(a, r)(x) for a, r in members], combine)


def prediction_digest(labels: torch.Tensor) -> str:
    return hashlib.sha256(labels.cpu().numpy().astype(np.int64).tobytes()).hexdigest()[:16]


class ThetaAuditLog:
    """JSON-lines record of every ensemble state used for a prediction."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()

    def write(self, theta: ThetaSample, labels: torch.Tensor) -> None:
        record = {"timestamp": time.time(), **theta.to_json(), "prediction_digest": prediction_digest(labels)}
        with self._lock, open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def dynamic_predict(library: TicketLibrary, cfg: SamplerConfig, x: torch.Tensor, rng: np.random.Generator,
                    audit_log: ThetaAuditLog | None = None):
    """Draw a fresh theta, classify ``x`` with it, return (labels, theta)."""
    theta = sample_theta(library, cfg, rng)
    with torch.no_grad():
        labels = ensemble_forward(theta, library, x, cfg.combine).argmax(dim=1)
    if audit_log is not None:
        audit_log.write(theta, labels)
    return labels, theta


class DynamicEnsemble:
    """Stateful defender owning a seeded stream of ensemble states.

    Concurrent callers either share this object (draws are serialized by a
    lock) or take independent streams from :meth:`spawn`.
    """

    def __init__(self, library: TicketLibrary, cfg: SamplerConfig, rng: np.random.Generator | None = None,
                 audit_log: ThetaAuditLog | None = None):
        self.library = library
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
        self.audit_log = audit_log
        self._lock = threading.Lock()
        self._session_theta: ThetaSample | None = None
        resolve_pools(library, cfg)

    def _next_theta(self) -> ThetaSample:
        with self._lock:
            if self.cfg.resample == "session":
                if self._session_theta is None:
                    self._session_theta = sample_theta(self.library, self.cfg, self.rng)
                return self._session_theta
            return sample_theta(self.library, self.cfg, self.rng)

    def predict(self, x: torch.Tensor):
        """Labels for ``x`` and the list of thetas used (one, or one per input)."""
        if self.cfg.resample == "input":
            thetas = [self._next_theta() for _ in range(len(x))]
            with torch.no_grad():
                labels = torch.cat([ensemble_forward(t, self.library, x[i:i + 1], self.cfg.combine).argmax(1)
                                    for i, t in enumerate(thetas)])
        else:
            thetas = [self._next_theta()]
            with torch.no_grad():
                labels = ensemble_forward(thetas[0], self.library, x, self.cfg.combine).argmax(1)
        if self.audit_log is not None:
            for t in thetas:
                self.audit_log.write(t, labels)
        return labels, thetas

    def spawn(self, n: int) -> list["DynamicEnsemble"]:
        return [DynamicEnsemble(self.library, self.cfg, child, self.audit_log) for child in self.rng.spawn(n)]


@dataclass
class ExpectedAccuracy:
    mean: float
    std_error: float
    per_draw: list[float]


def expected_accuracy(library: TicketLibrary, cfg: SamplerConfig, batches: Iterable[tuple[torch.Tensor, torch.Tensor]],
                      draws: int, rng: np.random.Generator, structure: str | None = None) -> ExpectedAccuracy:
    """Accuracy of the randomized defense averaged over ``draws`` ensemble states.

    Every batch gets ``draws`` fresh states (dynamic or, with ``structure``,
    single-structure). Draw k's accuracy pools its correct counts over all
    batches; the reported error is the standard error across draws.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    correct = np.zeros(draws)
    total = 0
    for x, y in batches:
        with torch.no_grad():
            cache = {k: m.model(x) for k, m in zip(library.keys(), library.members())}
        for d in range(draws):
            theta = sample_theta(library, cfg, rng) if structure is None else sample_r2s(structure, cfg, rng, library)
            logits = combine_logits([cache[(a, r)] for a, r in sorted(theta.members(), key=_key_order)], cfg.combine)
            correct[d] += int((logits.argmax(1) == y).sum())
        total += len(y)
    if total == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    acc = correct / total
    se = float(acc.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
    return ExpectedAccuracy(float(acc.mean()), se, acc.tolist())
