"""End-to-end experiments: pretrain, stage 1, stage 2, summary.

A run directory holds everything an experiment produced::

    config.json            resolved experiment config
    backbone.ckpt          pretrained backbone (plus the MLM output bias)
    pretrain.json          pretraining loss curve
    tasks/                 the generated suite as JSON lines
    seed<k>/records/...    one RunRecord per (mode, task)
    seed<k>/adapters/...   adapter, head and fusion checkpoints
    summary.{json,md,csv}  dev accuracy per task and mode, mean ± std over seeds

The backbone and the suite are shared by all seeds; seeds vary the
adapter, head and fusion initialisation and the data order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping

import numpy as np

from .analysis import export_heatmap
from .backbone import BackboneParams, PretrainResult, init_backbone, pretrain_mlm
from .checkpoint import (
    atomic_write_bytes,
    deserialize_backbone,
    serialize_adapter,
    serialize_backbone,
    serialize_fusion,
    serialize_head,
)
from .config import MODE_LABELS, MODES, ExperimentConfig
from .errors import ArtifactError
from .tasks import Suite, export_jsonl, generate_suite
from .training import RunRecord, train_baseline, train_fusion, train_mt_adapters, train_st_adapter

log = logging.getLogger(__name__)


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_record(path: Path, record: RunRecord) -> None:
    write_text(path, record.to_json() + "\n")


def claim_output(out: Path, force: bool) -> None:
    """Refuse to reuse a non-empty output directory unless ``force`` is set."""
    if out.exists() and not out.is_dir():
        raise ArtifactError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ArtifactError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def build_suite(cfg: ExperimentConfig) -> Suite:
    return generate_suite(cfg.tasks, cfg.vocab_size, cfg.suite_seed, cfg.corpus_size, cfg.include_task_text)


def pretrain_backbone(cfg: ExperimentConfig, suite: Suite) -> tuple[BackboneParams, PretrainResult | None]:
    """Masked-token pretraining; zero steps means an explicitly random backbone."""
    if cfg.pretrain.steps == 0:
        return init_backbone(cfg.backbone, cfg.pretrain.seed), None
    res = pretrain_mlm(cfg.backbone, suite.corpus, cfg.pretrain)
    return res.params, res


def save_backbone(out: Path, theta: BackboneParams, res: PretrainResult | None) -> None:
    extra = {"mlm.bias": res.mlm_bias.data} if res is not None else {}
    serialize_backbone(theta, {"pretrained": res is not None}, out / "backbone.ckpt", extra)
    info = {"pretrained": res is not None}
    if res is not None:
        info.update(final_loss=res.final_loss, losses=res.losses)
    write_json(out / "pretrain.json", info)


def load_backbone(path: Path, cfg: ExperimentConfig | None = None) -> tuple[BackboneParams, bool]:
    if not path.exists():
        raise ArtifactError(f"missing backbone checkpoint {path}")
    theta, _ = deserialize_backbone(path, cfg.backbone if cfg is not None else None)
    pretrained = json.loads((path.parent / "pretrain.json").read_text()).get("pretrained", True) \
        if (path.parent / "pretrain.json").exists() else True
    return theta, pretrained


# ---------------------------------------------------------------------------
# per-seed pipeline


def run_seed(cfg: ExperimentConfig, theta: BackboneParams, pretrained: bool, suite: Suite, seed: int,
             out: Path) -> dict[str, dict[str, float]]:
    """All requested modes for one seed. Returns dev accuracy per task and mode."""
    modes = set(cfg.modes)
    scores: dict[str, dict[str, float]] = {t.name: {} for t in suite.tasks}
    rec_dir = out / "records"
    st_adapters: dict = {}
    mt = None

    for mode, baseline in (("head", "head_only"), ("full", "full")):
        if mode in modes:
            tcfg = cfg.train_config(mode, seed)
            for task in suite.tasks:
                res = train_baseline(theta, task, baseline, tcfg)
                write_record(rec_dir / mode / f"{task.name}.json", res.record)
                scores[task.name][mode] = res.record.dev_accuracy[task.name]

    if "st-a" in modes:
        tcfg = cfg.train_config("st-a", seed)
        for task in suite.tasks:
            res = train_st_adapter(theta, task, cfg.adapter, tcfg, pretrained=pretrained)
            st_adapters[task.name] = res.adapter
            serialize_adapter(res.adapter, {"mode": "st-a", "seed": seed}, out / "adapters" / "st-a" / f"{task.name}.ckpt")
            serialize_head(res.head, {"mode": "st-a", "seed": seed}, out / "heads" / "st-a" / f"{task.name}.ckpt")
            write_record(rec_dir / "st-a" / f"{task.name}.json", res.record)
            scores[task.name]["st-a"] = res.record.dev_accuracy[task.name]

    if "mt-a" in modes:
        tcfg = cfg.train_config("mt-a", seed)
        mt = train_mt_adapters(theta, suite.tasks, cfg.adapter, tcfg)
        serialize_backbone(mt.theta, {"mode": "mt-a", "seed": seed}, out / "mt-a" / "backbone.ckpt")
        for name, phi in mt.adapters.items():
            serialize_adapter(phi, {"mode": "mt-a", "seed": seed}, out / "adapters" / "mt-a" / f"{name}.ckpt")
            serialize_head(mt.heads[name], {"mode": "mt-a", "seed": seed}, out / "heads" / "mt-a" / f"{name}.ckpt")
        write_record(rec_dir / "mt-a" / "all.json", mt.record)
        for name, acc in mt.record.dev_accuracy.items():
            scores[name]["mt-a"] = acc

    members = cfg.members()
    for mode, source in (("fusion-st-a", "st-a"), ("fusion-mt-a", "mt-a")):
        if mode not in modes:
            continue
        tcfg = cfg.train_config(mode, seed)
        if source == "st-a":
            base, pool, heads = theta, st_adapters, {}
        else:
            base, pool, heads = mt.theta, mt.adapters, mt.heads
        traces = []
        for task in suite.tasks:
            res = train_fusion(base, [pool[m] for m in members], task, tcfg, head=heads.get(task.name))
            serialize_fusion(res.fusion, {"mode": mode, "seed": seed}, out / "fusion" / mode / f"{task.name}.ckpt")
            serialize_head(res.head, {"mode": mode, "seed": seed}, out / "heads" / mode / f"{task.name}.ckpt")
            write_record(rec_dir / mode / f"{task.name}.json", res.record)
            scores[task.name][mode] = res.record.dev_accuracy[task.name]
            traces.append(res.trace)
        write_text(out / f"heatmap-{mode}.csv", export_heatmap(traces))
    write_json(out / "scores.json", scores)
    return scores


def _seed_worker(args: tuple) -> tuple[int, dict]:
    cfg_dict, run_dir, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    run_dir = Path(run_dir)
    theta, pretrained = load_backbone(run_dir / "backbone.ckpt", cfg)
    return seed, run_seed(cfg, theta, pretrained, build_suite(cfg), seed, run_dir / f"seed{seed}")


# ---------------------------------------------------------------------------
# summary


def summarize(cfg: ExperimentConfig, per_seed: Mapping[int, Mapping[str, Mapping[str, float]]]) -> dict:
    """Dev accuracy in points, mean and population std over seeds."""
    modes = [m for m in MODES if m in cfg.modes]
    columns = [MODE_LABELS[m] for m in modes]
    tasks = [t.name for t in cfg.tasks]
    mean: dict = {}
    std: dict = {}
    for task in tasks:
        mean[task], std[task] = {}, {}
        for m, col in zip(modes, columns):
            vals = [100.0 * per_seed[s][task][m] for s in sorted(per_seed) if m in per_seed[s].get(task, {})]
            if vals:
                mean[task][col] = float(np.mean(vals))
                std[task][col] = float(np.std(vals))
    return {
        "suite_fingerprint": cfg.suite_fingerprint(),
        "seeds": sorted(per_seed),
        "tasks": tasks,
        "columns": columns,
        "mean": mean,
        "std": std,
    }


def summary_markdown(summary: Mapping) -> str:
    cols = summary["columns"]
    lines = ["| Task | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for task in summary["tasks"]:
        cells = []
        for c in cols:
            m = summary["mean"][task].get(c)
            cells.append("-" if m is None else f"{m:.2f} ± {summary['std'][task][c]:.2f}")
        lines.append(f"| {task} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def summary_csv(summary: Mapping) -> str:
    lines = ["task,column,mean,std"]
    for task in summary["tasks"]:
        for c in summary["columns"]:
            if c in summary["mean"][task]:
                lines.append(f"{task},{c},{summary['mean'][task][c]!r},{summary['std'][task][c]!r}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, force: bool = False,
                   workers: int = 1) -> dict:
    out = Path(out or cfg.output_dir or "run")
    claim_output(out, force)
    write_json(out / "config.json", cfg.to_dict())
    suite = build_suite(cfg)
    for task in suite.tasks:
        export_jsonl(task, out / "tasks")
    theta, res = pretrain_backbone(cfg, suite)
    save_backbone(out, theta, res)
    if workers > 1 and len(cfg.seeds) > 1:
        jobs = [(cfg.to_dict(), str(out), s) for s in cfg.seeds]
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            per_seed = dict(pool.map(_seed_worker, jobs))
    else:
        per_seed = {s: run_seed(cfg, theta, res is not None, suite, s, out / f"seed{s}") for s in cfg.seeds}
    summary = summarize(cfg, per_seed)
    write_json(out / "summary.json", summary)
    write_text(out / "summary.md", summary_markdown(summary))
    write_text(out / "summary.csv", summary_csv(summary))
    return summary
