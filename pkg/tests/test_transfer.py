import numpy as np
import pytest
import torch

from robust_tickets.attacks import AttackConfig, evaluate_accuracy
from robust_tickets.transfer import (
    AdversarialCache,
    TransferMatrix,
    transfer_gap_stats,
    transfer_matrix,
)

from conftest import linear_model


def _models(n=3, dim=6, classes=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return {f"m{i}": linear_model(torch.randn(classes, dim, generator=gen)) for i in range(n)}


def _data(n=60, dim=6, classes=3, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, dim, generator=gen), torch.randint(0, classes, (n,), generator=gen)


ATTACK = AttackConfig(epsilon=0.1, steps=5, rng_seed=3)


def _matrix(values, names, attack=ATTACK):
    return TransferMatrix(list(names), list(names), np.asarray(values, dtype=float), attack, "digest")


class TestMatrix:
    def test_zero_epsilon_columns_are_clean_accuracy(self):
        models, data = _models(), _data()
        m = transfer_matrix(models, models, data, ATTACK.replace(epsilon=0.0))
        clean = [evaluate_accuracy(t, data) for t in models.values()]
        assert np.allclose(m.values, np.tile(clean, (3, 1)))

    def test_diagonal_is_white_box_accuracy(self):
        models, data = _models(), _data()
        m = transfer_matrix(models, models, data, ATTACK)
        for i, model in enumerate(models.values()):
            assert m.values[i, i] == evaluate_accuracy(model, data, ATTACK)

    def test_rectangular(self):
        models, data = _models(4), _data()
        sources = {k: models[k] for k in ("m0", "m1")}
        m = transfer_matrix(sources, models, data, ATTACK)
        assert m.values.shape == (2, 4) and m.sources == ["m0", "m1"]

    def test_rejects_eot(self):
        models = _models(1)
        with pytest.raises(ValueError):
            transfer_matrix(models, models, _data(), AttackConfig(family="eot"))

    def test_csv_roundtrip_and_recomputation(self, tmp_path):
        models, data = _models(), _data()
        m = transfer_matrix(models, models, data, ATTACK)
        m.save(tmp_path / "t.csv", "config_digest=abc")
        text = (tmp_path / "t.csv").read_text()
        assert text.startswith("# config_digest=abc\n")
        loaded = TransferMatrix.load(tmp_path / "t.csv")
        assert loaded.sources == m.sources and loaded.attack == ATTACK
        assert np.allclose(loaded.values, m.values, atol=5e-7)
        # recompute one cell from the sidecar's attack alone
        x_adv_acc = transfer_matrix({"m1": models["m1"]}, {"m2": models["m2"]}, data, loaded.attack).values[0, 0]
        assert abs(x_adv_acc - loaded.values[1, 2]) < 1e-6


class TestCache:
    def test_cached_equals_fresh(self, tmp_path):
        models, data = _models(), _data()
        cache = AdversarialCache(tmp_path / "cache")
        fresh = transfer_matrix(models, models, data, ATTACK)
        first = transfer_matrix(models, models, data, ATTACK, cache)
        second = transfer_matrix(models, models, data, ATTACK, cache)
        assert len(list((tmp_path / "cache").glob("*.npz"))) == 3
        assert np.array_equal(fresh.values, first.values) and np.array_equal(first.values, second.values)

    def test_key_depends_on_attack_and_data(self):
        k = AdversarialCache.key("m0", "d1", ATTACK)
        assert k != AdversarialCache.key("m0", "d2", ATTACK)
        assert k != AdversarialCache.key("m0", "d1", ATTACK.replace(steps=6))

    def test_corrupt_entry_regenerated(self, tmp_path):
        models, data = _models(1), _data()
        cache = AdversarialCache(tmp_path)
        expected = transfer_matrix(models, models, data, ATTACK, cache).values
        (path,) = tmp_path.glob("*.npz")
        path.write_bytes(b"garbage")
        with pytest.warns(UserWarning, match="regenerating"):
            again = transfer_matrix(models, models, data, ATTACK, cache).values
        assert np.array_equal(expected, again)

    def test_tampered_array_detected(self, tmp_path):
        cache = AdversarialCache(tmp_path)
        cache.put("k", torch.zeros(2, 3))
        path = tmp_path / "k.npz"
        with np.load(path) as f:
            np.savez(path, key=f["key"], x=np.ones((2, 3), dtype=np.float32), digest=f["digest"])
        with pytest.warns(UserWarning, match="digest mismatch"):
            assert cache.get("k") is None


class TestGap:
    def test_uniform_matrix_has_zero_gap(self):
        names = ["a1", "a2", "b1", "b2"]
        gap = transfer_gap_stats(_matrix(np.full((4, 4), 0.4), names), {n: n[0] for n in names})
        assert gap.gap == 0.0 and gap.same_pairs == 4 and gap.cross_pairs == 8

    def test_block_example(self):
        names = ["a1", "a2", "b1", "b2"]
        values = [[0.1, 0.5, 0.6, 0.6],
                  [0.5, 0.1, 0.6, 0.6],
                  [0.6, 0.6, 0.1, 0.5],
                  [0.6, 0.6, 0.5, 0.1]]
        gap = transfer_gap_stats(_matrix(values, names), {n: n[0] for n in names})
        assert gap.same_structure == pytest.approx(0.5)
        assert gap.cross_structure == pytest.approx(0.6)
        assert gap.gap == pytest.approx(0.1)

    def test_needs_two_structures(self):
        names = ["a1", "a2"]
        with pytest.raises(ValueError):
            transfer_gap_stats(_matrix(np.eye(2), names), {"a1": "a", "a2": "a"})

    def test_no_same_structure_pairs(self):
        names = ["a1", "b1"]
        gap = transfer_gap_stats(_matrix([[0.0, 0.3], [0.4, 0.0]], names), {"a1": "a", "b1": "b"})
        assert np.isnan(gap.same_structure) and gap.cross_structure == pytest.approx(0.35)
        assert gap.to_json()["same_structure"] is None
