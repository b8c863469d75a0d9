import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from robust_tickets.masked import MaskedLinear, MaskedModel, build_model
from robust_tickets.pruning import RobustTicket, TrainingConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class LinearNet(nn.Module):
    """Bias-free masked linear map, optionally with a fixed input offset."""

    def __init__(self, weight, offset=0.0):
        super().__init__()
        weight = torch.as_tensor(weight, dtype=torch.float32)
        self.lin = MaskedLinear(weight.shape[1], weight.shape[0])
        self.offset = offset
        with torch.no_grad():
            self.lin.omega.copy_(weight)

    def forward(self, x):
        return self.lin(x - self.offset)


class TwoClassFromScalar(nn.Module):
    """Logits (-z, z) from one masked linear score z = w.(x - 0.5)."""

    def __init__(self, weight):
        super().__init__()
        self.lin = MaskedLinear(len(weight), 1)
        with torch.no_grad():
            self.lin.omega.copy_(torch.tensor([weight], dtype=torch.float32))

    def forward(self, x):
        z = self.lin(x - 0.5)
        return torch.cat([-z, z], dim=1)


def linear_model(weight, offset=0.0, num_classes=None) -> MaskedModel:
    net = LinearNet(weight, offset)
    w = torch.as_tensor(weight)
    model = MaskedModel(net, (w.shape[1],), num_classes or w.shape[0], arch_id="linear")
    model.init_scores()
    return model


def two_class_model(weight) -> MaskedModel:
    model = MaskedModel(TwoClassFromScalar(weight), (len(weight),), 2, arch_id="toy")
    model.init_scores()
    return model


def random_ticket(arch="rn-small", ratio=0.3, seed=0, mask_seed=0, input_shape=(1, 8, 8), num_classes=10,
                  metrics=None, cfg=None) -> RobustTicket:
    model = build_model(arch, seed, input_shape, num_classes)
    gen = torch.Generator().manual_seed(mask_seed)
    for layer in model.masked_layers():
        with torch.no_grad():
            layer.scores.copy_(torch.rand(layer.scores.shape, generator=gen))
    model.set_remaining_ratio(ratio)
    return RobustTicket(
        arch_id=arch, remaining_ratio=ratio, omega_seed=seed, mask=[m.numpy() for m in model.masks()],
        metrics=metrics or {"clean_accuracy": 0.5, "robust_accuracy": 0.25},
        training_config=cfg or TrainingConfig(rng_seed=mask_seed), input_shape=input_shape,
        num_classes=num_classes, dataset_digest="d" * 8, model=model,
    )


@pytest.fixture
def digits_batch():
    from robust_tickets.data import load_splits

    splits = load_splits(train=64, val=32, test=64, subset_seed=3)
    return splits.test


@pytest.fixture(scope="session")
def tiny_config_data():
    return {
        "dataset": {"name": "digits", "train": 240, "val": 80, "test": 96, "subset_seed": 0},
        "architectures": ["rn-small", "wrn-small"],
        "ratios": [0.3, 0.5],
        "training": {"epochs": 1, "inner_steps": 2, "batch_size": 120},
        "attack": {"steps": 3},
        "sweep": [0.0, 8 / 255],
        "theta_draws": 4,
        "eval_subset": 96,
        "transfer": {"eval_subset": 96},
    }


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_config_data):
    """One pruned library plus transfer and ensemble outputs, shared across CLI tests."""
    from robust_tickets.config import ExperimentConfig
    from robust_tickets.experiments import cmd_ensemble_eval, cmd_prune, cmd_transfer

    root = tmp_path_factory.mktemp("tiny_run")
    data = dict(tiny_config_data, library_root=str(root / "library"), output_dir=str(root / "out"))
    path = root / "config.json"
    path.write_text(json.dumps(data))
    cfg = ExperimentConfig.from_file(path)
    prune = cmd_prune(cfg)
    summary = cmd_transfer(cfg)
    ensemble = cmd_ensemble_eval(cfg)
    return {"root": root, "config_path": path, "cfg": cfg, "prune": prune, "summary": summary,
            "ensemble": ensemble}


def seeded(seed=0):
    return np.random.default_rng(seed)
