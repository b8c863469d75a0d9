"""Pairwise adversarial transferability between library tickets."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .attacks import AttackConfig, attack_dataset, evaluate_accuracy
from .data import dataset_digest

log = logging.getLogger(__name__)


@dataclass
class TransferMatrix:
    """``values[i, j]``: accuracy of target j on adversarial examples crafted on source i."""

    sources: list[str]
    targets: list[str]
    values: np.ndarray
    attack: AttackConfig
    dataset_digest: str

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source\\target", *self.targets])
        for s, row in zip(self.sources, self.values):
            w.writerow([s, *(f"{v:.6f}" for v in row)])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "sources": self.sources,
            "targets": self.targets,
            "attack": self.attack.to_json(),
            "attack_digest": self.attack.digest(),
            "dataset_digest": self.dataset_digest,
        }

    def save(self, csv_path, header_comment: str | None = None) -> None:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv(header_comment))
        csv_path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path) -> "TransferMatrix":
        csv_path = Path(csv_path)
        rows = [r for r in csv.reader(line for line in csv_path.read_text().splitlines() if not line.startswith("#"))]
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls([r[0] for r in rows[1:]], rows[0][1:], values, AttackConfig.from_json(meta["attack"]),
                   meta["dataset_digest"])


class AdversarialCache:
    """Adversarial sets on disk keyed by (source id, dataset digest, attack digest)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(source_id: str, data_digest: str, attack: AttackConfig) -> str:
        return hashlib.sha256(f"{source_id}|{data_digest}|{attack.digest()}".encode()).hexdigest()[:24]

    def get(self, key: str) -> torch.Tensor | None:
        path = self.root / f"{key}.npz"
        if not path.exists():
            return None
        try:
            with np.load(path) as f:
                stored_key = str(f["key"])
                x = f["x"]
                digest = str(f["digest"])
        except Exception as exc:  # unreadable file: regenerate
            warnings.warn(f"adversarial cache {path} unreadable ({exc}); regenerating")
            return None
        if stored_key != key or hashlib.sha256(x.tobytes()).hexdigest() != digest:
            warnings.warn(f"adversarial cache {path} digest mismatch; regenerating")
            return None
        return torch.from_numpy(x)

    def put(self, key: str, x: torch.Tensor) -> None:
        arr = x.detach().cpu().numpy()
        path = self.root / f"{key}.npz"
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, key=np.array(key), x=arr, digest=np.array(hashlib.sha256(arr.tobytes()).hexdigest()))
        tmp.replace(path)


def transfer_matrix(sources: Mapping[str, object], targets: Mapping[str, object], dataset,
                    attack: AttackConfig, cache: AdversarialCache | None = None) -> TransferMatrix:
    """Accuracy of every target on every source's adversarial version of ``dataset``.

    ``sources`` and ``targets`` map ticket ids to models (insertion order is
    the matrix order). One adversarial set is built per source and reused for
    all targets.
    """
    if attack.family != "pgd":
        raise ValueError("transfer matrices use PGD attacks")
    digest = dataset_digest(dataset)
    _, y = dataset
    values = np.zeros((len(sources), len(targets)))
    for i, (sid, smodel) in enumerate(sources.items()):
        x_adv = None
        key = AdversarialCache.key(sid, digest, attack)
        if cache is not None:
            x_adv = cache.get(key)
        if x_adv is None:
            x_adv = attack_dataset(smodel, dataset, attack)
            if cache is not None:
                cache.put(key, x_adv)
        for j, tmodel in enumerate(targets.values()):
            values[i, j] = evaluate_accuracy(tmodel, (x_adv, y))
        log.info("transfer row %s done", sid)
    return TransferMatrix(list(sources), list(targets), values, attack, digest)


@dataclass
class TransferGap:
    same_structure: float
    cross_structure: float
    gap: float
    same_pairs: int
    cross_pairs: int

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in self.__dict__.items()}


def transfer_gap_stats(matrix: TransferMatrix, structure_of: Mapping[str, str]) -> TransferGap:
    """Mean same-structure vs cross-structure transfer accuracy.

    Same-structure pairs exclude a ticket attacking itself. A positive gap
    means adversarial examples transfer worse across structures.
    """
    if len({structure_of[t] for t in [*matrix.sources, *matrix.targets]}) < 2:
        raise ValueError("transfer gap needs at least two structures")
    same, cross = [], []
    for i, s in enumerate(matrix.sources):
        for j, t in enumerate(matrix.targets):
            if s == t:
                continue
            (same if structure_of[s] == structure_of[t] else cross).append(matrix.values[i, j])
    same_mean = float(np.mean(same)) if same else float("nan")
    cross_mean = float(np.mean(cross)) if cross else float("nan")
    return TransferGap(same_mean, cross_mean, cross_mean - same_mean, len(same), len(cross))
