"""Summary table from the persisted per-image rows and timing log."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Dict, List

import numpy as np

METHODS = ["zero-shot", "ensemble-noise", "ensemble-timestep", "noop", "prompt", "noop+prompt", "transfer"]

# timing units whose per-seed mean becomes the eval / train columns
EVAL_UNIT = {"zero-shot": "zero-shot", "ensemble-noise": "ensemble-noise", "ensemble-timestep": "ensemble-timestep",
             "noop": "noop", "prompt": "prompt", "noop+prompt": "noop+prompt", "transfer": "transfer"}
TRAIN_UNIT = {"noop": "noop-train", "prompt": "prompt-train", "noop+prompt": "noop+prompt-train"}

HEADER = ["method", "n_seeds", "acc_mean", "acc_std", "eval_seconds", "train_seconds"]


class MissingArtifactError(RuntimeError):
    pass


def seed_accuracies(metrics_csv) -> Dict[str, Dict[int, float]]:
    """method -> seed -> accuracy, recomputed from the per-image rows."""
    hits: Dict[str, Dict[int, List[int]]] = defaultdict(lambda: defaultdict(list))
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            hits[row["method"]][int(row["seed"])].append(row["pred_label"] == row["true_label"])
    return {m: {s: float(np.mean(v)) for s, v in by.items()} for m, by in hits.items()}


def unit_seconds(timing_csv) -> Dict[str, List[float]]:
    """Timing unit prefix (before '/') -> list of per-seed seconds."""
    out: Dict[str, List[float]] = defaultdict(list)
    with open(timing_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if "/" in row["unit"]:
                out[row["unit"].split("/")[0]].append(float(row["seconds"]))
    return out


def summary_rows(run_dir) -> List[list]:
    run_dir = Path(run_dir)
    metrics, timing = run_dir / "metrics.csv", run_dir / "timing.csv"
    for f in (metrics, timing):
        if not f.is_file():
            raise MissingArtifactError(f"missing artifact {f}; run the pipeline stages first")
    accs = seed_accuracies(metrics)
    secs = unit_seconds(timing)
    rows = []
    for m in METHODS:
        if m not in accs:
            continue
        a = np.array(list(accs[m].values()))
        ev = secs.get(EVAL_UNIT[m])
        tr = secs.get(TRAIN_UNIT.get(m, ""))
        rows.append([m, len(a), float(a.mean()), float(a.std()), float(np.mean(ev)) if ev else "",
                     float(np.mean(tr)) if tr else ""])
    if not rows:
        raise MissingArtifactError(f"no method rows in {metrics}")
    return rows


def _text(rows: List[list]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [HEADER] + [[cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(HEADER))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table) + "\n"


def emit_report(run_dir) -> List[list]:
    """Write summary.csv and summary.txt into ``run_dir`` and return the rows."""
    run_dir = Path(run_dir)
    rows = summary_rows(run_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    (run_dir / "summary.csv").write_text(buf.getvalue())
    (run_dir / "summary.txt").write_text(_text(rows))
    return rows
