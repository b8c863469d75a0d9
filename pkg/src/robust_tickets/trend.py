"""Multi-seed desk-scale trend checks.

Each seed builds its own library, transfer matrix and ensemble evaluation;
three directional findings are then checked per seed:

* ``cross_structure_transfer``: cross-structure transfer accuracy is at least
  the same-structure (off-diagonal) transfer accuracy.
* ``ensemble_beats_r2s``: dynamic-ensemble robust accuracy is at least the best
  single-structure ensemble's robust accuracy.
* ``ensemble_clean``: dynamic-ensemble clean accuracy is at least the mean
  clean accuracy of its members.

A finding holds when it is true for at least ``min_passes`` seeds. These are
reported, not enforced. The findings only need clean and evaluation-epsilon
accuracy, so each seed evaluates the ensemble at those two points instead of
the full sweep.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .experiments import cmd_ensemble_eval, cmd_prune, cmd_transfer, header_lines, write_csv

log = logging.getLogger(__name__)

FINDINGS = ("cross_structure_transfer", "ensemble_beats_r2s", "ensemble_clean")


def seed_findings(transfer_summary: dict, ensemble) -> dict:
    table = {(row[0], row[1]): row for row in ensemble.table}
    ours = table[("ours", "all")]
    r2s_best = max(row[4] for key, row in table.items() if key[0] == "r2s")
    member_clean = float(np.mean([m[2] for m in ensemble.members]))
    same, cross = transfer_summary.get("same_structure"), transfer_summary.get("cross_structure")
    return {
        "same_structure_transfer": same,
        "cross_structure_transfer_acc": cross,
        "ours_robust": ours[4],
        "best_r2s_robust": r2s_best,
        "ours_clean": ours[2],
        "mean_member_clean": member_clean,
        "cross_structure_transfer": bool(same is not None and cross is not None and cross >= same),
        "ensemble_beats_r2s": bool(ours[4] >= r2s_best),
        "ensemble_clean": bool(ours[2] >= member_clean),
    }


def run_trend_suite(base: ExperimentConfig, out_root, seeds: int = 5, min_passes: int = 4, jobs: int = 1) -> dict:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    per_seed = []
    started = time.perf_counter()
    for s in range(seeds):
        seed_dir = out_root / f"seed{s}"
        cfg = base.with_seed(s, library_root=str(seed_dir / "library"), output_dir=str(seed_dir))
        cfg = dataclasses.replace(cfg, sweep=(0.0, cfg.attack.epsilon))
        log.info("trend seed %d -> %s", s, seed_dir)
        result = cmd_prune(cfg, jobs=jobs)
        if result.failures:
            raise RuntimeError(f"seed {s}: {len(result.failures)} ticket(s) failed to train")
        summary = cmd_transfer(cfg)
        ensemble = cmd_ensemble_eval(cfg)
        per_seed.append({"seed": s, **seed_findings(summary, ensemble)})
    verdict = {}
    for name in FINDINGS:
        passes = sum(r[name] for r in per_seed)
        verdict[name] = {"passes": passes, "seeds": seeds, "holds": passes >= min_passes}
    summary = {"config_digest": base.digest(), "min_passes": min_passes, "per_seed": per_seed,
               "verdict": verdict}
    (out_root / "trend_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_root / "trend_runtime.txt").write_text(f"{time.perf_counter() - started:.1f} s\n")
    cols = ["seed", "same_structure_transfer", "cross_structure_transfer_acc", "ours_robust", "best_r2s_robust",
            "ours_clean", "mean_member_clean", *FINDINGS]
    write_csv(out_root / "trend.csv", header_lines(base, [f"min_passes={min_passes} of {seeds}"]), cols,
              [[r[c] if r[c] is not None else float("nan") for c in cols] for r in per_seed])
    return summary
