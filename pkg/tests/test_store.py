import json
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import robust_tickets.store as store_mod
from robust_tickets.errors import IntegrityError, TicketNotFoundError, TicketValidationError
from robust_tickets.masked import build_model, masked_forward
from robust_tickets.pruning import TrainingConfig
from robust_tickets.store import (
    LibraryStore,
    decode_mask,
    encode_mask,
    load_ticket,
    save_ticket,
    ticket_recipe_id,
    validate_library,
)

from conftest import random_ticket


@pytest.fixture
def store(tmp_path):
    return LibraryStore(tmp_path / "lib")


class TestBlob:
    def test_roundtrip(self):
        masks = [np.array([[True, False, True]]), np.zeros((2, 3, 1, 1), dtype=bool), np.ones(5, dtype=bool)]
        out = decode_mask(encode_mask(masks))
        assert all(a.dtype == bool and np.array_equal(a, b) for a, b in zip(out, masks))

    @settings(max_examples=150, deadline=None)
    @given(st.lists(hnp.arrays(bool, hnp.array_shapes(min_dims=1, max_dims=4, max_side=7)), min_size=1, max_size=5))
    def test_roundtrip_property(self, masks):
        out = decode_mask(encode_mask(masks))
        assert len(out) == len(masks)
        assert all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(out, masks))

    @pytest.mark.parametrize("cut", [0, 10, 40, -1])
    def test_truncated(self, cut):
        blob = encode_mask([np.ones((4, 4), dtype=bool)])
        with pytest.raises(IntegrityError, match="blob-x"):
            decode_mask(blob[:cut], "blob-x")

    def test_bit_flip(self):
        blob = bytearray(encode_mask([np.ones((4, 4), dtype=bool)]))
        blob[12] ^= 1
        with pytest.raises(IntegrityError):
            decode_mask(bytes(blob))


class TestStore:
    def test_save_load_identity(self, store):
        ticket = random_ticket("wrn-small", 0.3, seed=5, mask_seed=2)
        tid = store.save(ticket)
        loaded = store.load(tid)
        assert loaded == ticket
        x = torch.rand(6, 1, 8, 8, generator=torch.Generator().manual_seed(0))
        assert torch.equal(masked_forward(loaded.model, x), masked_forward(ticket.model, x))
        assert loaded.model.mask_count() == ticket.mask_count

    def test_same_recipe_single_entry(self, store):
        ticket = random_ticket()
        assert store.save(ticket) == store.save(ticket)
        assert len(store.entries()) == 1

    def test_id_tracks_recipe(self):
        a = random_ticket(seed=1)
        assert ticket_recipe_id(a) == ticket_recipe_id(random_ticket(seed=1))
        assert ticket_recipe_id(a) != ticket_recipe_id(random_ticket(seed=2))
        assert ticket_recipe_id(a) != ticket_recipe_id(random_ticket(seed=1, cfg=TrainingConfig(epochs=3)))

    def test_same_pair_different_recipe_rejected(self, store):
        store.save(random_ticket(mask_seed=0))
        with pytest.raises(IntegrityError, match="already holds"):
            store.save(random_ticket(mask_seed=1))

    def test_same_id_different_content_rejected(self, store):
        store.save(random_ticket(metrics={"clean_accuracy": 0.1}))
        with pytest.raises(IntegrityError, match="different content"):
            store.save(random_ticket(metrics={"clean_accuracy": 0.2}))

    def test_wrong_budget_refused(self, store):
        ticket = random_ticket(ratio=0.3)
        ticket.mask[0] = ~ticket.mask[0]
        with pytest.raises(TicketValidationError):
            store.save(ticket)

    def test_enumerates_all(self, store):
        ids = {store.save(random_ticket(a, r)) for a in ("rn-small", "wrn-small") for r in (0.1, 0.3, 0.5, 0.7)}
        assert len(ids) == 8 and {e["ticket_id"] for e in store.entries()} == ids
        lib = store.load_library()
        assert len(lib) == 8 and lib.pool("rn-small") == (0.1, 0.3, 0.5, 0.7)
        assert store.lookup("wrn-small", 0.5)["arch_id"] == "wrn-small"

    def test_not_found(self, store):
        with pytest.raises(TicketNotFoundError):
            store.load("deadbeef")
        with pytest.raises(TicketNotFoundError):
            store.lookup("rn-small", 0.3)

    def test_wrappers(self, tmp_path):
        tid = save_ticket(random_ticket(), tmp_path)
        assert load_ticket(tid, tmp_path).arch_id == "rn-small"
        assert validate_library(tmp_path).ok


class TestCorruption:
    def test_truncated_blob_names_file(self, store):
        tid = store.save(random_ticket())
        path = store.blob_path(store.find(tid))
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(IntegrityError, match=tid):
            store.load(tid)

    def test_missing_blob(self, store):
        tid = store.save(random_ticket())
        store.blob_path(store.find(tid)).unlink()
        with pytest.raises(IntegrityError, match="missing"):
            store.load(tid)

    def test_manifest_ratio_edited(self, store):
        tid = store.save(random_ticket(ratio=0.3))
        data = json.loads(store.manifest_path.read_text())
        data["entries"][0]["remaining_ratio"] = 0.5
        store.manifest_path.write_text(json.dumps(data))
        with pytest.raises(TicketValidationError, match="implies"):
            store.load(tid)

    def test_unreadable_manifest(self, store):
        store.save(random_ticket())
        store.manifest_path.write_text("{not json")
        with pytest.raises(IntegrityError):
            store.entries()

    def test_validate_reports(self, store):
        ids = [store.save(random_ticket(a, 0.5)) for a in ("rn-small", "wrn-small")]
        assert store.validate().ok
        path = store.blob_path(store.find(ids[1]))
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        report = store.validate()
        assert not report.ok
        assert [e.ok for e in report.entries] == [True, False]
        assert any(ids[1] in line and "FAIL" in line for line in report.lines())

    def test_validate_duplicate_entry(self, store):
        store.save(random_ticket())
        data = json.loads(store.manifest_path.read_text())
        data["entries"].append(dict(data["entries"][0]))
        store.manifest_path.write_text(json.dumps(data))
        report = store.validate()
        assert not report.ok and "duplicate ticket_id" in report.manifest_problems

    def test_failed_write_leaves_store_unchanged(self, store, monkeypatch):
        store.save(random_ticket("rn-small"))
        before = store.manifest_path.read_bytes()

        def boom(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(store_mod.os, "replace", boom)
        with pytest.raises(OSError):
            store.save(random_ticket("wrn-small"))
        monkeypatch.undo()
        assert store.manifest_path.read_bytes() == before
        assert not [p for p in os.listdir(store.root / "masks") if not p.endswith(".mask")]
        assert store.validate().ok


def test_loaded_mask_is_stable_under_refresh(tmp_path):
    ticket = random_ticket("rn-deep", 0.2, mask_seed=4)
    loaded = load_ticket(save_ticket(ticket, tmp_path), tmp_path)
    loaded.model.refresh_mask()
    assert all(np.array_equal(m.numpy(), t) for m, t in zip(loaded.model.masks(), ticket.mask))


def test_loaded_omega_matches_seed(tmp_path):
    ticket = random_ticket("wrn-deep", 0.5, seed=9)
    loaded = load_ticket(save_ticket(ticket, tmp_path), tmp_path)
    assert loaded.model.omega_digest() == build_model("wrn-deep", 9).omega_digest()
