"""Scenario artifacts: JSON report, per-minion CSV, transcript and figures."""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .master import PrimePool, selection_index  # noqa: E402
from .scenario import ScenarioResult  # noqa: E402

MINION_FIELDS = ("minion_id", "status", "master_view", "outcome", "reason", "qsp_digest")

_STYLE = {
    "figure.figsize": (6.4, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def minion_rows(report: dict) -> List[Dict[str, str]]:
    rows = []
    for mid, info in sorted(report["minions"].items()):
        outcome = report["phases"]["unlock"][mid]
        rows.append({
            "minion_id": mid,
            "status": info["status"],
            "master_view": info["master_view"],
            "outcome": outcome["outcome"],
            "reason": outcome["reason"],
            "qsp_digest": outcome["qsp_digest"] or "",
        })
    return rows


def write_minion_csv(report: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MINION_FIELDS)
        writer.writeheader()
        writer.writerows(minion_rows(report))


def selection_reach(pool: PrimePool, q_fn: int) -> Counter:
    """How often each index is chosen across all 100 (last, second-last) digit pairs."""
    counts = Counter()
    for tau in range(100):
        counts[selection_index(pool, tau, q_fn)] += 1
    return counts


def plot_selection_reach(report: dict, path: Path) -> None:
    sel = report["phases"]["selection"]
    pool = PrimePool(tuple(report["prime_pool"]))
    counts = selection_reach(pool, sel["q_fn"])
    xs = list(range(sel["q_fn"]))
    colors = ["tab:red" if x == sel["selected_index"] else "tab:blue" for x in xs]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar(xs, [counts.get(x, 0) for x in xs], color=colors, width=0.8)
        ax.set_xlabel("index among filtered papers")
        ax.set_ylabel("digit pairs selecting it (of 100)")
        ax.set_title(f"Selection reach, {sel['q_fn']} eligible papers (red = chosen)")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def plot_traffic(result: ScenarioResult, path: Path) -> None:
    records = [r for r in result.network.transcript if "kind" in r]
    kinds = sorted({r["kind"] for r in records})
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for row, kind in enumerate(kinds):
            ticks = [r["sent_at"] for r in records if r["kind"] == kind]
            ax.scatter(ticks, [row] * len(ticks), s=8)
        ax.set_yticks(range(len(kinds)))
        ax.set_yticklabels(kinds)
        ax.set_xlabel("virtual tick")
        ax.set_title("Messages on the simulated network")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def write_artifacts(result: ScenarioResult, out_dir: Path, figures: bool = True) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out_dir / "report.json",
        "minions": out_dir / "minions.csv",
        "transcript": out_dir / "transcript.jsonl",
    }
    paths["report"].write_text(report_json(result.report), encoding="utf-8")
    write_minion_csv(result.report, paths["minions"])
    paths["transcript"].write_text(result.network.transcript_jsonl(), encoding="utf-8")
    for m in result.minions:
        p = out_dir / f"audit-{m.node_id}.jsonl"
        p.write_text(m.audit_jsonl(), encoding="utf-8")
        paths[f"audit-{m.node_id}"] = p
    if figures:
        paths["selection_figure"] = out_dir / "selection_reach.png"
        paths["traffic_figure"] = out_dir / "traffic.png"
        plot_selection_reach(result.report, paths["selection_figure"])
        plot_traffic(result, paths["traffic_figure"])
    return paths
