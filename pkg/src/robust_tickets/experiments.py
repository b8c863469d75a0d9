"""Experiment drivers behind the CLI subcommands.

Every CSV starts with ``#`` comment lines carrying the config digest and the
seeds, and every number is written with fixed precision, so a rerun of the same
config with one job reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import references
from .attacks import attack_dataset, derive_seed, evaluate_accuracy, iter_batches
from .config import ExperimentConfig
from .data import Splits, dataset_digest, load_splits, subset
from .ensemble import TicketLibrary, expected_accuracy
from .errors import ConfigurationError, TicketNotFoundError
from .pruning import train_dense, train_ticket
from .store import LibraryStore, recipe_id
from .transfer import AdversarialCache, transfer_gap_stats, transfer_matrix

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def header_lines(cfg: ExperimentConfig, extra: list[str] = ()) -> list[str]:
    seeds = " ".join(f"{k}={v}" for k, v in cfg.seeds().items())
    return [f"config_digest={cfg.digest()}", f"seeds: {seeds}", *extra]


def write_csv(path: Path, header: list[str], columns: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    lines = [line for line in Path(path).read_text().splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {"config_digest": cfg.digest(), "config": cfg.to_json()})
    return out


def load_data(cfg: ExperimentConfig) -> Splits:
    d = cfg.dataset
    return load_splits(d.name, d.train, d.val, d.test, d.subset_seed, d.root)


def label(arch: str, ratio: float) -> str:
    return f"{arch}@{ratio:.2f}"


# --------------------------------------------------------------------------
# prune
# --------------------------------------------------------------------------


@dataclass
class PruneResult:
    rows: list[dict]
    failures: list[dict] = field(default_factory=list)
    trained: int = 0
    skipped: int = 0


def _train_job(args):
    arch, ratio, splits, tcfg, omega_seed, eval_attack = args
    events = []
    try:
        ticket = train_ticket(arch, ratio, splits, tcfg, omega_seed=omega_seed, eval_attack=eval_attack,
                              event_log=events.append)
    except Exception as exc:  # isolated per ticket; reported by the driver
        return arch, ratio, None, events, f"{type(exc).__name__}: {exc}"
    ticket.model = None
    return arch, ratio, ticket, events, None


def cmd_prune(cfg: ExperimentConfig, jobs: int = 1) -> PruneResult:
    """Train and store every configured (architecture, ratio) ticket not already in the library."""
    out = _prepare_output(cfg)
    splits = load_data(cfg)
    store = LibraryStore(cfg.resolved_library_root())
    digest = dataset_digest(splits.train)
    eval_attack = cfg.attack.replace(epsilon=cfg.training.epsilon)
    result = PruneResult(rows=[])
    todo, ids = [], {}
    for arch, ratio in cfg.pairs():
        tcfg = cfg.training_for(arch, ratio)
        tid = recipe_id(arch, ratio, cfg.omega_seed, splits.input_shape, splits.num_classes, tcfg, digest)
        ids[(arch, ratio)] = tid
        if store.has(tid):
            result.skipped += 1
        else:
            todo.append((arch, ratio, splits, tcfg, cfg.omega_seed, eval_attack))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_train_job, todo))
    else:
        outcomes = [_train_job(job) for job in todo]
    events_path = out / "prune_events.jsonl"
    with open(events_path, "a") as fh:
        for arch, ratio, ticket, events, error in outcomes:
            for e in events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
            if error is not None:
                log.error("ticket %s failed: %s", label(arch, ratio), error)
                result.failures.append({"arch_id": arch, "remaining_ratio": ratio, "error": error})
                continue
            store.save(ticket)
            result.trained += 1
    for arch, ratio in cfg.pairs():
        if any(f["arch_id"] == arch and f["remaining_ratio"] == ratio for f in result.failures):
            continue
        entry = store.find(ids[(arch, ratio)])
        result.rows.append({"structure": arch, "ratio": ratio, "ticket_id": entry["ticket_id"],
                            "clean_accuracy": entry["metrics"]["clean_accuracy"],
                            "robust_accuracy": entry["metrics"]["robust_accuracy"]})
    _write_prune_tables(cfg, out, result)
    return result


def _write_prune_tables(cfg: ExperimentConfig, out: Path, result: PruneResult) -> None:
    eps = cfg.training.epsilon
    head = header_lines(cfg, [f"metrics on validation split; robust = PGD-{cfg.attack.steps} eps={eps:.6f}"])
    write_csv(out / "tickets.csv", head, ["structure", "ratio", "ticket_id", "clean_accuracy", "robust_accuracy"],
              [[r["structure"], r["ratio"], r["ticket_id"], r["clean_accuracy"], r["robust_accuracy"]]
               for r in result.rows])
    table = []
    for arch in cfg.architectures:
        rows = [r for r in result.rows if r["structure"] == arch]
        if not rows:
            continue
        clean = [r["clean_accuracy"] for r in rows]
        robust = [r["robust_accuracy"] for r in rows]
        table.append([arch, " ".join(f"{r['ratio']:.2f}" for r in rows), len(rows),
                      f"{min(clean):.4f}-{max(clean):.4f}", float(np.mean(clean)),
                      f"{min(robust):.4f}-{max(robust):.4f}", float(np.mean(robust))])
    write_csv(out / "table1.csv", head + references.library_reference_lines(),
              ["structure", "sparsity", "num", "clean_acc_range", "avg_clean_acc", "robust_acc_range",
               "avg_robust_acc"], table)
    if result.failures:
        _write_json(out / "prune_failures.json", result.failures)


# --------------------------------------------------------------------------
# library access
# --------------------------------------------------------------------------


def load_configured_library(cfg: ExperimentConfig, pairs=None) -> TicketLibrary:
    """Tickets for ``pairs`` (default: all configured pairs); missing ones raise naming (arch, ratio)."""
    store = LibraryStore(cfg.resolved_library_root())
    pairs = list(pairs) if pairs is not None else cfg.pairs()
    missing = []
    lib = TicketLibrary()
    for arch, ratio in pairs:
        try:
            entry = store.lookup(arch, ratio)
        except TicketNotFoundError:
            missing.append(f"({arch}, {ratio})")
            continue
        ticket = store.load(entry["ticket_id"])
        lib.add(arch, ratio, ticket.model, ticket_id=entry["ticket_id"], metrics=ticket.metrics)
    if missing:
        raise ConfigurationError(
            f"library {store.root} lacks tickets for {', '.join(missing)}; run `robust-tickets prune` first")
    return lib


def cmd_validate(cfg: ExperimentConfig):
    return LibraryStore(cfg.resolved_library_root()).validate()


# --------------------------------------------------------------------------
# transfer matrix
# --------------------------------------------------------------------------


def cmd_transfer(cfg: ExperimentConfig) -> dict:
    """Pairwise transfer matrix, gap summary and heatmap."""
    out = _prepare_output(cfg)
    splits = load_data(cfg)
    sources = cfg.transfer.sources or cfg.pairs()
    targets = cfg.transfer.targets or cfg.pairs()
    lib = load_configured_library(cfg, dict.fromkeys([*sources, *targets]))
    data = subset(splits.test, cfg.transfer.eval_subset, cfg.dataset.subset_seed)
    src = {label(a, r): lib.model(a, r) for a, r in sources}
    tgt = {label(a, r): lib.model(a, r) for a, r in targets}
    matrix = transfer_matrix(src, tgt, data, cfg.attack, AdversarialCache(out / "adv_cache"))
    header = header_lines(cfg, [f"attack_digest={cfg.attack.digest()}", f"dataset_digest={matrix.dataset_digest}",
                                "rows: source tickets; columns: target tickets; values: target accuracy",
                                *references.transfer_reference_lines()])
    matrix.save(out / "transfer_matrix.csv", "\n".join(header))
    structure_of = {label(a, r): a for a, r in [*sources, *targets]}
    summary = {"config_digest": cfg.digest(), "epsilon": cfg.attack.epsilon,
               "ticket_ids": {label(a, r): lib.member(a, r).ticket_id for a, r in dict.fromkeys([*sources, *targets])}}
    try:
        summary.update(transfer_gap_stats(matrix, structure_of).to_json())
    except ValueError as exc:
        summary["gap_error"] = str(exc)
    _write_json(out / "transfer_summary.json", summary)
    from .plots import transfer_heatmap

    transfer_heatmap(matrix, out / "transfer_heatmap.png")
    return summary


# --------------------------------------------------------------------------
# ensemble evaluation
# --------------------------------------------------------------------------


@dataclass
class EnsembleResult:
    table: list[list]
    sweep: list[list]
    members: list[list]


def _batches_of(x: torch.Tensor, y: torch.Tensor, size: int = 256):
    return [(xb, yb) for _, xb, yb in iter_batches((x, y), size)]


def cmd_ensemble_eval(cfg: ExperimentConfig) -> EnsembleResult:
    """Dense, single-structure and dynamic-ensemble accuracy over the epsilon sweep.

    Randomized defenses are scored by the expected accuracy over
    ``theta_draws`` ensemble states per batch, with its standard error. The
    attacker runs EOT over every member the defense could use.
    """
    out = _prepare_output(cfg)
    splits = load_data(cfg)
    lib = load_configured_library(cfg)
    x, y = subset(splits.test, cfg.eval_subset, cfg.dataset.subset_seed)
    structures = list(cfg.architectures)
    dense_structures = list(cfg.dense_structures or cfg.architectures)
    k = cfg.theta_draws

    members = [[m.arch_id, m.ratio, evaluate_accuracy(m.model, (x, y))] for m in lib.members()]

    dense = {}
    for s in dense_structures:
        tcfg = dataclasses.replace(cfg.training, rng_seed=derive_seed(cfg.training.rng_seed, 99))
        dense[s] = train_dense(s, splits, tcfg, omega_seed=cfg.omega_seed)

    def draws_rng(*parts):
        return np.random.default_rng(derive_seed(cfg.sampler.rng_seed, *parts))

    sweep_rows = []
    by_eps = {}
    for ei, eps in enumerate(cfg.sweep):
        pgd = cfg.attack.replace(epsilon=eps)
        eot = pgd.replace(family="eot")
        rows = {}
        for s in dense_structures:
            rows[("dense", s)] = (evaluate_accuracy(dense[s], (x, y), pgd), 0.0)
        r2s_sets = {}
        for si, s in enumerate(structures):
            sub = lib.restrict(s)
            xa = attack_dataset(None, (x, y), eot, attack_models=sub.models())
            r2s_sets[s] = xa
            ea = expected_accuracy(sub, cfg.sampler, _batches_of(xa, y), k, draws_rng(ei, 1, si), structure=s)
            rows[("r2s", s)] = (ea.mean, ea.std_error)
        xa = attack_dataset(None, (x, y), eot, attack_models=lib.models())
        ea = expected_accuracy(lib, cfg.sampler, _batches_of(xa, y), k, draws_rng(ei, 2))
        rows[("ours", "all")] = (ea.mean, ea.std_error)
        # second estimator: attacker commits to one structure's members; average over those attacks
        per_source = []
        for si, s in enumerate(structures):
            ea = expected_accuracy(lib, cfg.sampler, _batches_of(r2s_sets[s], y), k, draws_rng(ei, 3, si))
            rows[("ours", f"eot:{s}")] = (ea.mean, ea.std_error)
            per_source.append(ea.mean)
        rows[("ours", "eot:mean-over-structures")] = (float(np.mean(per_source)), float("nan"))
        by_eps[eps] = rows
        for (method, s), (acc, se) in rows.items():
            sweep_rows.append([method, s, eps, eps * 255, acc, se])
        log.info("eps=%.4f done", eps)

    clean_rows = by_eps.get(0.0)
    if clean_rows is None:
        clean_rows = _clean_rows(cfg, lib, dense, structures, (x, y), draws_rng)
    main_eps = cfg.attack.epsilon
    robust_rows = by_eps.get(main_eps)
    if robust_rows is None:
        raise ConfigurationError(f"evaluation epsilon {main_eps} must be part of the sweep")
    table = []
    for key, (clean, clean_se) in clean_rows.items():
        if key not in robust_rows:
            continue
        robust, robust_se = robust_rows[key]
        table.append([key[0], key[1], clean, clean_se, robust, robust_se])

    head = header_lines(cfg, [f"attack: EOT/PGD-{cfg.attack.steps} linf; robust columns at eps={main_eps:.6f}",
                              f"randomized defenses: mean over {k} theta draws per batch, std_error across draws",
                              *references.ensemble_reference_lines()])
    write_csv(out / "table2.csv", head,
              ["method", "structure", "clean_acc", "clean_std_error", "robust_acc", "robust_std_error"], table)
    write_csv(out / "sweep.csv", header_lines(cfg, [f"theta draws per batch: {k}"]),
              ["method", "structure", "epsilon", "epsilon_255", "accuracy", "std_error"], sweep_rows)
    write_csv(out / "members.csv", header_lines(cfg, ["clean accuracy of each library ticket on the test subset"]),
              ["structure", "ratio", "clean_acc"], members)
    from .plots import sweep_curves

    sweep_curves(sweep_rows, out / "ensemble_sweep.png")
    return EnsembleResult(table, sweep_rows, members)


def _clean_rows(cfg, lib, dense, structures, data, draws_rng):
    x, y = data
    rows = {(("dense", s)): (evaluate_accuracy(m, data), 0.0) for s, m in dense.items()}
    for si, s in enumerate(structures):
        ea = expected_accuracy(lib.restrict(s), cfg.sampler, _batches_of(x, y), cfg.theta_draws,
                               draws_rng(-1, 1, si), structure=s)
        rows[("r2s", s)] = (ea.mean, ea.std_error)
    ea = expected_accuracy(lib, cfg.sampler, _batches_of(x, y), cfg.theta_draws, draws_rng(-1, 2))
    rows[("ours", "all")] = (ea.mean, ea.std_error)
    return rows


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

SECTIONS = [
    ("Ticket library", ["table1.csv", "tickets.csv"], []),
    ("Pairwise transferability", ["transfer_matrix.csv", "transfer_summary.json"], ["transfer_heatmap.png"]),
    ("Ensemble robustness", ["table2.csv", "sweep.csv", "members.csv"], ["ensemble_sweep.png"]),
]


def _md_table(path: Path) -> list[str]:
    text = path.read_text().splitlines()
    comments = [line[2:] for line in text if line.startswith("# ")]
    rows = list(csv.reader(line for line in text if not line.startswith("#")))
    if not rows:
        return ["_(empty)_"]
    out = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    if comments:
        out += [""] + [f"> {c}" for c in comments]
    return out


def cmd_report(run_dir) -> tuple[str, list[str]]:
    """Collate a run directory into ``report.md``; returns (text, missing artifacts)."""
    run = Path(run_dir)
    lines = ["# Robust ticket ensemble report", ""]
    cfg_path = run / "run_config.json"
    if cfg_path.exists():
        lines.append(f"Config digest: `{json.loads(cfg_path.read_text())['config_digest']}`")
    else:
        lines.append("Config digest: _missing run_config.json_")
    missing = []
    for title, tables, images in SECTIONS:
        lines += ["", f"## {title}", ""]
        present = False
        for name in tables:
            p = run / name
            if not p.exists():
                missing.append(name)
                continue
            present = True
            lines += [f"### {name}", ""]
            if name.endswith(".json"):
                lines += ["```json", p.read_text().rstrip(), "```"]
            else:
                lines += _md_table(p)
            lines.append("")
        for name in images:
            if (run / name).exists():
                lines += [f"![{name}]({name})", ""]
            else:
                missing.append(name)
        if not present:
            lines.append(f"_Section missing: none of {', '.join(tables)} found in this run._")
    if missing:
        lines += ["", "## Missing artifacts", ""] + [f"- {m}" for m in missing]
    text = "\n".join(lines).rstrip() + "\n"
    run.mkdir(parents=True, exist_ok=True)
    (run / "report.md").write_text(text)
    return text, missing
