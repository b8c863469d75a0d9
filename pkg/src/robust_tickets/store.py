"""Checksummed on-disk ticket library.

Layout under a library root::

    manifest.json            # {"format_version": 1, "entries": [...]}
    masks/<ticket_id>.mask   # bit-packed mask blob
    manifest.lock            # advisory writer lock

Weights are never stored: a ticket is rebuilt from ``omega_seed`` and its mask.

Mask blob layout (all integers little-endian)::

    magic    4 bytes  b"RLTM"
    version  uint16   (1)
    layers   uint32
    per layer: ndim uint8, then ndim x uint32 dims
    payload  bit-packed mask bits, little bit order, layers concatenated
    sha256   32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .errors import IntegrityError, TicketNotFoundError, TicketValidationError
from .masked import MaskedModel, budget_for, build_model
from .pruning import RobustTicket, TrainingConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"RLTM"
BLOB_VERSION = 1
MANIFEST = "manifest.json"


def ratio_key(ratio: float) -> float:
    return round(float(ratio), 6)


def encode_mask(masks: list[np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", BLOB_VERSION, len(masks))
    for m in masks:
        out += struct.pack("<B", m.ndim)
        out += struct.pack(f"<{m.ndim}I", *m.shape)
    bits = np.concatenate([np.asarray(m, dtype=bool).reshape(-1) for m in masks]) if masks else np.zeros(0, bool)
    out += np.packbits(bits, bitorder="little").tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def decode_mask(blob: bytes, name: str = "<blob>") -> list[np.ndarray]:
    if len(blob) < 4 + 6 + 32:
        raise IntegrityError(f"mask blob {name} is truncated ({len(blob)} bytes)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"mask blob {name} fails its trailing sha256 check")
    if body[:4] != MAGIC:
        raise IntegrityError(f"mask blob {name} has bad magic {body[:4]!r}")
    version, n_layers = struct.unpack_from("<HI", body, 4)
    if version != BLOB_VERSION:
        raise IntegrityError(f"mask blob {name} has unsupported version {version}")
    pos, shapes = 10, []
    for _ in range(n_layers):
        (ndim,) = struct.unpack_from("<B", body, pos)
        shapes.append(struct.unpack_from(f"<{ndim}I", body, pos + 1))
        pos += 1 + 4 * ndim
    total = sum(int(np.prod(s)) for s in shapes)
    payload = np.frombuffer(body[pos:], dtype=np.uint8)
    if len(payload) != (total + 7) // 8:
        raise IntegrityError(f"mask blob {name} payload has {len(payload)} bytes, expected {(total + 7) // 8}")
    bits = np.unpackbits(payload, bitorder="little", count=total).astype(bool)
    out, start = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(bits[start:start + n].reshape(s))
        start += n
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def recipe_id(arch_id: str, remaining_ratio: float, omega_seed: int, input_shape, num_classes: int,
              training_config: TrainingConfig, dataset_digest: str) -> str:
    """Content address of a ticket: hash of everything that determines its mask."""
    recipe = {
        "arch_id": arch_id,
        "remaining_ratio": ratio_key(remaining_ratio),
        "omega_seed": int(omega_seed),
        "input_shape": list(input_shape),
        "num_classes": int(num_classes),
        "training_config": training_config.to_json(),
        "dataset_digest": dataset_digest,
    }
    return hashlib.sha256(canonical_json(recipe).encode()).hexdigest()[:20]


def ticket_recipe_id(ticket: RobustTicket) -> str:
    return recipe_id(ticket.arch_id, ticket.remaining_ratio, ticket.omega_seed, ticket.input_shape,
                     ticket.num_classes, ticket.training_config, ticket.dataset_digest)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class EntryReport:
    ticket_id: str
    ok: bool
    problems: list[str] = field(default_factory=list)


@dataclass
class ValidationReport:
    entries: list[EntryReport]
    manifest_problems: list[str]

    @property
    def ok(self) -> bool:
        return not self.manifest_problems and all(e.ok for e in self.entries)

    def lines(self) -> list[str]:
        out = [f"manifest: FAIL {p}" for p in self.manifest_problems]
        if not self.manifest_problems:
            out.append("manifest: ok")
        for e in self.entries:
            out.append(f"{e.ticket_id}: " + ("ok" if e.ok else "FAIL " + "; ".join(e.problems)))
        return out


class LibraryStore:
    """Many readers, one writer (serialized by a file lock on the manifest)."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest_path = self.root / MANIFEST
        self.lock = FileLock(str(self.root / "manifest.lock"))

    # -- manifest ---------------------------------------------------------
    def read_manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"format_version": FORMAT_VERSION, "entries": []}
        try:
            data = json.loads(self.manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"unreadable manifest {self.manifest_path}: {exc}") from exc
        if "format_version" not in data or "entries" not in data:
            raise IntegrityError(f"manifest {self.manifest_path} lacks format_version/entries")
        if data["format_version"] != FORMAT_VERSION:
            raise IntegrityError(f"unsupported manifest format_version {data['format_version']}")
        return data

    def _write_manifest(self, data: dict) -> None:
        _atomic_write(self.manifest_path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())

    def entries(self) -> list[dict]:
        return self.read_manifest()["entries"]

    def find(self, ticket_id: str) -> dict:
        for e in self.entries():
            if e["ticket_id"] == ticket_id:
                return e
        raise TicketNotFoundError(f"ticket {ticket_id} not in {self.manifest_path}")

    def has(self, ticket_id: str) -> bool:
        return any(e["ticket_id"] == ticket_id for e in self.entries())

    def lookup(self, arch_id: str, ratio: float) -> dict:
        for e in self.entries():
            if e["arch_id"] == arch_id and ratio_key(e["remaining_ratio"]) == ratio_key(ratio):
                return e
        raise TicketNotFoundError(f"no ticket for ({arch_id}, {ratio}) in {self.root}")

    def blob_path(self, entry: dict) -> Path:
        return self.root / entry["mask_blob_path"]

    # -- writes -----------------------------------------------------------
    def save(self, ticket: RobustTicket) -> str:
        """Store ``ticket``; returns its content-derived id.

        Re-saving identical content is a no-op. A different ticket under an
        existing id or an existing (arch, ratio) pair is an integrity error.
        """
        expected = budget_for(ticket.remaining_ratio, sum(m.size for m in ticket.mask))
        if ticket.mask_count != expected:
            raise TicketValidationError(f"mask has {ticket.mask_count} ones, ratio implies {expected}")
        ticket_id = ticket_recipe_id(ticket)
        blob = encode_mask(ticket.mask)
        sha = hashlib.sha256(blob).hexdigest()
        entry = {
            "ticket_id": ticket_id,
            "arch_id": ticket.arch_id,
            "remaining_ratio": ratio_key(ticket.remaining_ratio),
            "omega_seed": int(ticket.omega_seed),
            "input_shape": list(ticket.input_shape),
            "num_classes": int(ticket.num_classes),
            "dataset_digest": ticket.dataset_digest,
            "mask_blob_path": f"masks/{ticket_id}.mask",
            "mask_sha256": sha,
            "metrics": dict(ticket.metrics),
            "training_config": ticket.training_config.to_json(),
        }
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "masks").mkdir(exist_ok=True)
        with self.lock:
            data = self.read_manifest()
            for e in data["entries"]:
                if e["ticket_id"] == ticket_id:
                    if e != entry:
                        raise IntegrityError(f"ticket id {ticket_id} already stored with different content")
                    return ticket_id
                if e["arch_id"] == entry["arch_id"] and e["remaining_ratio"] == entry["remaining_ratio"]:
                    raise IntegrityError(
                        f"library already holds ({e['arch_id']}, {e['remaining_ratio']}) as {e['ticket_id']}")
            # blob first: the manifest must never point at a missing file
            _atomic_write(self.blob_path(entry), blob)
            data["entries"].append(entry)
            self._write_manifest(data)
        return ticket_id

    # -- reads ------------------------------------------------------------
    def _read_blob(self, entry: dict) -> list[np.ndarray]:
        path = self.blob_path(entry)
        if not path.exists():
            raise IntegrityError(f"mask blob {path} is missing")
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["mask_sha256"]:
            raise IntegrityError(f"checksum mismatch for mask blob {path}")
        return decode_mask(blob, str(path))

    def load(self, ticket_id: str) -> RobustTicket:
        entry = self.find(ticket_id)
        return self._load_entry(entry)

    def _load_entry(self, entry: dict) -> RobustTicket:
        masks = self._read_blob(entry)
        model = build_model(entry["arch_id"], entry["omega_seed"], tuple(entry["input_shape"]),
                            entry["num_classes"])
        layers = model.masked_layers()
        if [m.shape for m in masks] != [tuple(layer.mask.shape) for layer in layers]:
            raise TicketValidationError(f"ticket {entry['ticket_id']}: mask shapes do not fit {entry['arch_id']}")
        count = int(sum(int(m.sum()) for m in masks))
        expected = budget_for(entry["remaining_ratio"], model.prunable_count)
        if count != expected:
            raise TicketValidationError(
                f"ticket {entry['ticket_id']}: mask has {count} ones but ratio "
                f"{entry['remaining_ratio']} implies {expected}")
        _install_mask(model, masks, expected)
        return RobustTicket(
            arch_id=entry["arch_id"],
            remaining_ratio=entry["remaining_ratio"],
            omega_seed=entry["omega_seed"],
            mask=masks,
            metrics=entry["metrics"],
            training_config=TrainingConfig.from_json(entry["training_config"]),
            input_shape=tuple(entry["input_shape"]),
            num_classes=entry["num_classes"],
            dataset_digest=entry["dataset_digest"],
            model=model,
        )

    def load_library(self):
        """All tickets as an addressable :class:`~robust_tickets.ensemble.TicketLibrary`."""
        from .ensemble import TicketLibrary

        lib = TicketLibrary()
        for entry in self.entries():
            t = self._load_entry(entry)
            lib.add(t.arch_id, t.remaining_ratio, t.model, ticket_id=entry["ticket_id"], metrics=t.metrics)
        return lib

    def validate(self) -> ValidationReport:
        data = self.read_manifest()
        manifest_problems = []
        ids = [e.get("ticket_id") for e in data["entries"]]
        if len(set(ids)) != len(ids):
            manifest_problems.append("duplicate ticket_id")
        pairs = [(e.get("arch_id"), ratio_key(e.get("remaining_ratio", -1))) for e in data["entries"]]
        seen = set()
        for p in pairs:
            if p in seen:
                manifest_problems.append(f"duplicate (arch, ratio) {p}")
            seen.add(p)
        reports = []
        for entry in data["entries"]:
            problems = []
            try:
                self._load_entry(entry)
            except (IntegrityError, TicketValidationError, KeyError, ValueError) as exc:
                problems.append(str(exc))
            reports.append(EntryReport(entry.get("ticket_id", "?"), not problems, problems))
        return ValidationReport(reports, manifest_problems)


def _install_mask(model: MaskedModel, masks: list[np.ndarray], budget: int) -> None:
    import torch

    tensors = [torch.from_numpy(np.ascontiguousarray(m)) for m in masks]
    model.set_masks(tensors)
    for layer, m in zip(model.masked_layers(), tensors):
        with torch.no_grad():
            layer.scores.copy_(m.to(layer.scores.dtype))
    model.sparsity_budget = budget


def save_ticket(ticket: RobustTicket, root) -> str:
    return LibraryStore(root).save(ticket)


def load_ticket(ticket_id: str, root) -> RobustTicket:
    return LibraryStore(root).load(ticket_id)


def validate_library(root) -> ValidationReport:
    return LibraryStore(root).validate()
