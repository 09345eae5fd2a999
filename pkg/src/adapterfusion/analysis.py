"""Fusion activation heatmaps and run-to-run comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArtifactError, UsageError
from .fusion import FusionActivationTrace

HEATMAP_COLUMNS = ("layer", "target_task", "adapter", "mean_activation")
ROW_SUM_TOL = 1e-6
ARROW_THRESHOLD = 0.3  # accuracy points
ARROWS = {"up": "↗", "down": "↘", "same": "→", "absent": "absent"}


def default_layers(num_layers: int) -> list[int]:
    """1-based layers {1, ceil(7L/12), ceil(9L/12), L}, deduplicated and sorted."""
    L = num_layers
    return sorted({1, math.ceil(7 * L / 12), math.ceil(9 * L / 12), L})


def heatmap_rows(traces: Sequence[FusionActivationTrace], layers: Sequence[int] | None = None) -> list[dict]:
    if not traces:
        raise UsageError("heatmap needs at least one trace")
    members = list(traces[0].members)
    num_layers = traces[0].mean_activation.shape[0]
    for tr in traces[1:]:
        if list(tr.members) != members:
            raise UsageError(f"trace for {tr.target!r} has members {list(tr.members)}, expected {members}")
        if tr.mean_activation.shape[0] != num_layers:
            raise UsageError("traces disagree on the number of layers")
    chosen = default_layers(num_layers) if layers is None else sorted(set(layers))
    for l in chosen:
        if not 1 <= l <= num_layers:
            raise UsageError(f"layer {l} outside 1..{num_layers}")
    rows = []
    for l in chosen:
        for tr in traces:
            act = tr.mean_activation[l - 1]
            if np.isnan(act).any():
                continue  # fusion did not run at this layer
            total = float(act.sum())
            if abs(total - 1.0) > ROW_SUM_TOL:
                raise UsageError(f"activations for {tr.target!r} at layer {l} sum to {total}")
            for name, a in zip(members, act):
                rows.append({"layer": l, "target_task": tr.target, "adapter": name, "mean_activation": float(a)})
    return rows


def export_heatmap(traces: Sequence[FusionActivationTrace], layers: Sequence[int] | None = None) -> str:
    """CSV text with one row per (layer, target, member); raw means, no rescaling."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(HEATMAP_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in heatmap_rows(traces, layers):
        writer.writerow({**row, "mean_activation": repr(row["mean_activation"])})
    return buf.getvalue()


def read_heatmap(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["layer"] = int(r["layer"])
        r["mean_activation"] = float(r["mean_activation"])
    return rows


def row_sums(rows: Sequence[dict]) -> dict[tuple[int, str], float]:
    sums: dict[tuple[int, str], float] = {}
    for r in rows:
        key = (r["layer"], r["target_task"])
        sums[key] = sums.get(key, 0.0) + r["mean_activation"]
    return sums


def self_reliance(trace: FusionActivationTrace) -> float:
    """Fraction of fused layers where the target's own adapter has the row max."""
    if trace.target not in trace.members:
        raise UsageError(f"{trace.target!r} is not among the fusion members")
    own = trace.members.index(trace.target)
    act = trace.mean_activation[~np.isnan(trace.mean_activation).any(axis=1)]
    return float(np.mean(np.argmax(act, axis=1) == own)) if len(act) else 0.0


# ---------------------------------------------------------------------------
# comparison


def arrow(delta: float | None) -> str:
    if delta is None:
        return ARROWS["absent"]
    d = round(delta, 9)  # keep 0.3 exactly on the "same" side despite float noise
    if d > ARROW_THRESHOLD:
        return ARROWS["up"]
    if d < -ARROW_THRESHOLD:
        return ARROWS["down"]
    return ARROWS["same"]


def load_summary(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise ArtifactError(f"no summary.json in {run_dir}")
    return json.loads(path.read_text())


@dataclass
class Comparison:
    rows: list
    absent: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["task", "column", "base", "other", "delta", "arrow"], lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| task | column | base | other | delta | |", "|---|---|---|---|---|---|"]
        for r in self.rows:
            fmt = lambda v: "-" if v is None else f"{v:.2f}"  # noqa: E731
            lines.append(f"| {r['task']} | {r['column']} | {fmt(r['base'])} | {fmt(r['other'])} | {fmt(r['delta'])} | {r['arrow']} |")
        return "\n".join(lines) + "\n"


def compare_summaries(base: dict, other: dict) -> Comparison:
    """Per-task, per-column deltas of ``other`` against ``base`` in accuracy points."""
    if base.get("suite_fingerprint") != other.get("suite_fingerprint"):
        raise UsageError("runs were made on different task suites")
    columns = [c for c in base["columns"] if c in other["columns"]] + [c for c in other["columns"] if c not in base["columns"]]
    tasks = list(base["tasks"]) + [t for t in other["tasks"] if t not in base["tasks"]]
    rows = []
    absent = 0
    for task in tasks:
        for col in columns:
            a = base["mean"].get(task, {}).get(col)
            b = other["mean"].get(task, {}).get(col)
            delta = None if a is None or b is None else b - a
            absent += delta is None
            rows.append({"task": task, "column": col, "base": a, "other": b, "delta": delta, "arrow": arrow(delta)})
    return Comparison(rows, absent)


def compare_report(base_dir: str | Path, other_dir: str | Path) -> Comparison:
    return compare_summaries(load_summary(base_dir), load_summary(other_dir))


def fusion_vs_stage1(summary: dict) -> Comparison:
    """Within one run: Fusion w/ ST-A against ST-A and Fusion w/ MT-A against MT-A."""
    rows = []
    absent = 0
    for task in summary["tasks"]:
        m = summary["mean"].get(task, {})
        for fused, plain in (("F.w/ST-A", "ST-A"), ("F.w/MT-A", "MT-A")):
            if fused not in summary["columns"] and plain not in summary["columns"]:
                continue
            a, b = m.get(plain), m.get(fused)
            delta = None if a is None or b is None else b - a
            absent += delta is None
            rows.append({"task": task, "column": f"{fused} vs {plain}", "base": a, "other": b, "delta": delta,
                         "arrow": arrow(delta)})
    return Comparison(rows, absent)
