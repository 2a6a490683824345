"""Drive experiments per seed and write CSV/JSON artifacts."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import data as fdata
from ..errors import FormatError, ValidationError
from ..fl import ExperimentLog, RoundRecord, Strategy, run_experiment
from ..metrics import bwt_forgetting, consistency, find_recovery_intervals
from .config import ExperimentConfig

log = logging.getLogger(__name__)

SPLIT_STREAM = 0x6E57

REPORT_COLUMNS = (
    ("global_acc", "Global Acc"),
    ("bwt", "Global BwT"),
    ("consistency", "Global Consistency"),
    ("local_acc", "Local Acc"),
    ("worst_client_acc", "Worst Client Acc"),
    ("local_consistency", "Local Consistency"),
    ("balance", "Balance"),
)


def fmt(x) -> str:
    """17 significant digits so CSV output is byte-comparable."""
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".17g")


def build_data(cfg: ExperimentConfig, seed: int):
    """Client datasets and global test set; depends on the seed only, never the strategy."""
    if cfg.dataset == "synthetic":
        ds = fdata.generate_synthetic(cfg.classes, cfg.dim, cfg.per_class, cfg.spread, seed)
    else:
        ds = fdata.load_any(cfg.dataset)
    pool, global_test = fdata.split_local(ds, cfg.global_test_frac, seed=_derive(seed, SPLIT_STREAM))
    clients = fdata.dirichlet_partition(
        pool, cfg.clients, cfg.alpha, cfg.min_per_client, seed=seed, test_frac=cfg.local_test_frac
    )
    return clients, global_test


def _derive(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


class SeedWriter:
    """Streams one seed's rounds.csv, weights.csv, lambdas.csv and timing.csv."""

    def __init__(self, outdir: Path, client_ids: Sequence[int]):
        outdir.mkdir(parents=True, exist_ok=True)
        self.outdir = outdir
        self.client_ids = list(client_ids)
        self._files = {}
        self._writers = {}
        self._elapsed = 0.0
        self._open("rounds", ["round", "global_acc", "mean_local_acc", "sampled"]
                   + [f"local_{k}" for k in self.client_ids]
                   + [f"gk_{k}" for k in self.client_ids])
        self._open("weights", ["round", "client", "n_k", "A_k", "d_k", "score", "p_k"])
        self._open("lambdas", ["round", "client", "step", "lambda"])
        self._open("timing", ["round", "duration_s", "elapsed_s", "global_acc"])

    def _open(self, name, header):
        fh = open(self.outdir / f"{name}.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        self._files[name] = fh
        self._writers[name] = writer

    def _round_row(self, t, global_acc, local, on_client, sampled):
        mean_local = math.fsum(local.values()) / len(local)
        row = [t, fmt(global_acc), fmt(mean_local), ";".join(str(k) for k in sampled)]
        row += [fmt(local[k]) for k in self.client_ids]
        row += [fmt(on_client[k]) for k in self.client_ids]
        self._writers["rounds"].writerow(row)

    def start(self, result: ExperimentLog) -> None:
        self._round_row(0, result.initial_global_accuracy, result.initial_local_accuracy,
                        result.initial_global_on_client, ())
        self._files["rounds"].flush()

    def record(self, rec: RoundRecord) -> None:
        self._round_row(rec.round, rec.global_test_accuracy, rec.local_test_accuracy,
                        rec.global_on_client, rec.sampled)
        w = rec.weights
        for i, k in enumerate(w.client_ids):
            self._writers["weights"].writerow(
                [rec.round, k, int(w.sizes[i]), fmt(w.accuracy[i]), fmt(w.diversity[i]),
                 fmt(w.scores[i]), fmt(w.weights[i])]
            )
        for k in sorted(rec.lambdas):
            for step, lam in enumerate(rec.lambdas[k]):
                self._writers["lambdas"].writerow([rec.round, k, step, fmt(lam)])
        self._elapsed += rec.duration
        self._writers["timing"].writerow(
            [rec.round, fmt(rec.duration), fmt(self._elapsed), fmt(rec.global_test_accuracy)]
        )
        for fh in self._files.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()


def run_seed(cfg: ExperimentConfig, strategy: Strategy, seed: int, outdir: Path) -> ExperimentLog:
    clients, global_test = build_data(cfg, seed)
    writer = SeedWriter(outdir, [c.client_id for c in clients])
    try:
        result = run_experiment(
            clients,
            global_test,
            strategy,
            rounds=cfg.rounds,
            seed=seed,
            training=cfg.training(),
            hidden=cfg.hidden,
            on_start=writer.start,
            on_round=writer.record,
        )
    except Exception as exc:
        log.error("seed %d failed: %s (partial logs in %s)", seed, exc, outdir)
        raise
    finally:
        writer.close()
    summary = {"seed": seed, "strategy": strategy.label, "rounds": cfg.rounds}
    summary.update(result.summary.to_dict())
    _write_json(outdir / "summary.json", summary)
    return result


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def aggregate_summaries(per_seed: Sequence[dict]) -> dict:
    """Mean and sample std across seeds for every numeric summary field."""
    keys = [k for k, v in per_seed[0].items() if k not in ("seed", "strategy", "rounds")]
    mean, std = {}, {}
    for key in keys:
        values = [s[key] for s in per_seed if s[key] is not None]
        if not values:
            mean[key] = std[key] = None
            continue
        mean[key] = math.fsum(values) / len(values)
        std[key] = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std}


def run(cfg: ExperimentConfig, outdir: Path | None = None, strategy: Strategy | None = None) -> dict:
    """Run every seed for one strategy; returns the aggregate summary."""
    outdir = Path(cfg.output_dir if outdir is None else outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    strategy = strategy or cfg.strategy_obj()
    (outdir / "config.txt").write_text(cfg.replace(strategy=strategy.label).to_text())
    per_seed = []
    for seed in cfg.seeds:
        run_seed(cfg, strategy, seed, outdir / f"seed_{seed}")
        per_seed.append(json.loads((outdir / f"seed_{seed}" / "summary.json").read_text()))
    top = {"strategy": strategy.label, "seeds": list(cfg.seeds), "per_seed": per_seed}
    top.update(aggregate_summaries(per_seed))
    _write_json(outdir / "summary.json", top)
    return top


def compare(cfg: ExperimentConfig, strategies: Sequence[Strategy], outdir: Path | None = None) -> list[dict]:
    """Run each strategy on identical partitions and seeds; write a side-by-side report."""
    if len(strategies) < 2:
        raise ValidationError("compare needs at least two strategies")
    labels = [s.label for s in strategies]
    if len(set(labels)) != len(labels):
        raise ValidationError("strategies must be distinct")
    outdir = Path(cfg.output_dir if outdir is None else outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for strat in strategies:
        top = run(cfg, outdir / strat.label.replace(":", "_"), strategy=strat)
        rows.append(top)
    write_report(rows, outdir)
    return rows


def write_report(rows: Sequence[dict], outdir: Path) -> None:
    with open(outdir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["strategy"]
        for key, _ in REPORT_COLUMNS:
            header += [f"{key}_mean", f"{key}_std"]
        writer.writerow(header)
        for row in rows:
            line = [row["strategy"]]
            for key, _ in REPORT_COLUMNS:
                line += [fmt(row["mean"][key]), fmt(row["std"][key])]
            writer.writerow(line)
    (outdir / "report.txt").write_text(format_report(rows))


def format_report(rows: Sequence[dict]) -> str:
    width = max(12, max(len(r["strategy"]) for r in rows) + 2)
    titles = [t for _, t in REPORT_COLUMNS]
    cells = [[f"{'Strategy':<{width}}"] + [f"{t:>20}" for t in titles]]
    for row in rows:
        line = [f"{row['strategy']:<{width}}"]
        for key, _ in REPORT_COLUMNS:
            m, s = row["mean"][key], row["std"][key]
            if key == "balance":
                text = "n/a" if m is None else f"{m:.3f}"
            else:
                text = "n/a" if m is None else f"{m:.3f} ± {s:.3f}"
            line.append(f"{text:>20}")
        cells.append(line)
    return "\n".join("".join(c) for c in cells) + "\n"


def score(path) -> dict:
    """Consistency metrics for a trajectory CSV, plus BwT when history columns exist.

    Needs an ``accuracy`` (or ``global_acc``) column; rows are ordered by
    ``round`` when present. BwT is computed when the file also has a
    ``sampled`` column (``;``-separated ids) and ``gk_<id>`` columns, as in
    rounds.csv.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError("empty trajectory file", line=1)
        names = [n.strip() for n in reader.fieldnames]
        reader.fieldnames = names
        acc_col = "accuracy" if "accuracy" in names else "global_acc" if "global_acc" in names else None
        if acc_col is None:
            raise FormatError("missing 'accuracy' column", line=1)
        gk_cols = {int(n[3:]): n for n in names if n.startswith("gk_") and n[3:].isdigit()}
        with_history = "sampled" in names and gk_cols
        rows = []
        for row in reader:
            lineno = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise FormatError("wrong number of fields", line=lineno)
            try:
                acc = float(row[acc_col])
                rnd = int(row["round"]) if "round" in row else len(rows)
                sampled = [int(k) for k in row["sampled"].split(";") if k.strip()] if with_history else []
                gk = {k: float(row[c]) for k, c in gk_cols.items()} if with_history else {}
            except ValueError as exc:
                raise FormatError(str(exc), line=lineno) from None
            if not math.isfinite(acc):
                raise FormatError("non-finite accuracy", line=lineno)
            rows.append((rnd, acc, sampled, gk))
    if not rows:
        raise FormatError("trajectory has no rows", line=2)
    rows.sort(key=lambda r: r[0])
    traj = [r[1] for r in rows]
    aipfr, cons = consistency(traj)
    out = {
        "rounds": len(traj),
        "aipfr": aipfr,
        "consistency": cons,
        "interval_count": len(find_recovery_intervals(traj)),
    }
    if with_history:
        history = {r[0]: {k: r[3][k] for k in r[2]} for r in rows if r[2]}
        final_round, final_gk = rows[-1][0], rows[-1][3]
        try:
            out["bwt"] = bwt_forgetting(history, final_gk, final_round)
        except ValidationError:
            out["bwt"] = None
    return out
