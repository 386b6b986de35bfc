"""Report emission: accuracy curves, bias-gap and downstream tables.

Plots are derived artifacts; every figure is written next to the CSV of
exactly the numbers it draws, and the CSV is the contract.
"""
from __future__ import annotations

import csv
import os
from collections import defaultdict
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigurationError


def _read_metrics(run_dir: str) -> List[dict]:
    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise ConfigurationError(f"{run_dir} has no metrics.csv")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigurationError(f"{path} holds no completed tasks")
    return rows


def _scenario_of(rows: List[dict], run_dir: str) -> Tuple[str, str]:
    import json

    with open(os.path.join(run_dir, "config.json")) as f:
        cfg = json.load(f)
    mode = cfg["scenario"]["mode"]
    dataset = cfg["dataset"]["name"]
    scenarios = {r["mode"] for r in rows}
    if scenarios != {mode}:
        raise ConfigurationError(f"{run_dir} mixes scenarios: {sorted(scenarios)}")
    label = f"{rows[0]['algorithm']}"
    mem = cfg.get("memory_size", 0)
    if mem:
        label += f"_m{mem}"
    label += f"_s{cfg.get('seed', 0)}"
    return f"{dataset}/{mode}", label


def emit_report(run_dirs: Sequence[str], out_dir: str) -> List[str]:
    """Aggregate completed runs into per-scenario plots and tables.

    One accuracy-vs-task figure per scenario with separate raw and
    retrained-head series per run, a bias-gap table, and a downstream
    table. Returns the paths written.
    """
    if not run_dirs:
        raise ValueError("no runs given")
    grouped: Dict[str, List[Tuple[str, List[dict]]]] = defaultdict(list)
    for run_dir in run_dirs:
        rows = _read_metrics(run_dir)
        scenario, label = _scenario_of(rows, run_dir)
        grouped[scenario].append((label, rows))

    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []
    for scenario, runs in sorted(grouped.items()):
        safe = scenario.replace("/", "_")
        written += _accuracy_plot(runs, out_dir, safe)
        written.append(_bias_gap_table(runs, out_dir, safe))
        downstream = _downstream_table(runs, out_dir, safe)
        if downstream:
            written.append(downstream)
    return written


def _accuracy_plot(runs, out_dir: str, scenario: str) -> List[str]:
    csv_path = os.path.join(out_dir, f"accuracy_{scenario}.csv")
    fig_path = os.path.join(out_dir, f"accuracy_{scenario}.svg")
    fig, ax = plt.subplots(figsize=(6, 4))
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series", "t", "accuracy"])
        for label, rows in sorted(runs):
            ts = [int(r["t"]) for r in rows]
            gd = [float(r["gd_acc"]) for r in rows]
            ax.plot(ts, gd, marker="o", label=f"{label} (gd)")
            for t, v in zip(ts, gd):
                writer.writerow([f"{label} (gd)", t, f"{v:.6f}"])
            if any(r["raw_acc"] for r in rows):
                raw = [float(r["raw_acc"]) for r in rows if r["raw_acc"]]
                traw = [int(r["t"]) for r in rows if r["raw_acc"]]
                ax.plot(traw, raw, marker="s", linestyle="--", label=label)
                for t, v in zip(traw, raw):
                    writer.writerow([label, t, f"{v:.6f}"])
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy over classes seen so far")
    ax.set_title(scenario)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(fig_path)
    plt.close(fig)
    return [csv_path, fig_path]


def _bias_gap_table(runs, out_dir: str, scenario: str) -> str:
    path = os.path.join(out_dir, f"bias_gap_{scenario}.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series", "final_t", "raw_acc", "gd_acc", "bias_gap"])
        for label, rows in sorted(runs):
            last = rows[-1]
            writer.writerow([label, last["t"], last["raw_acc"],
                             last["gd_acc"], last["bias_gap"]])
    return path


def _downstream_table(runs, out_dir: str, scenario: str) -> str:
    cols = sorted({k for _, rows in runs for k in rows[0]
                   if k.startswith("downstream_")})
    if not cols:
        return ""
    path = os.path.join(out_dir, f"downstream_{scenario}.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series", "t"] + cols)
        for label, rows in sorted(runs):
            for r in rows:
                if any(r.get(c) for c in cols):
                    writer.writerow([label, r["t"]] + [r.get(c, "") for c in cols])
    return path
