"""Command-line entry point.

Exit codes: 0 ok, 1 failed check or absent comparison rows, 2 config or
usage error, 3 missing or incompatible artifact, 4 budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import compare_report, export_heatmap, fusion_vs_stage1, load_summary
from .checkpoint import (
    deserialize_adapter,
    deserialize_backbone,
    deserialize_fusion,
    deserialize_head,
    serialize_adapter,
    serialize_backbone,
    serialize_fusion,
    serialize_head,
)
from .config import ExperimentConfig, load_config
from .errors import (
    AdapterFusionError,
    ArtifactError,
    BudgetError,
    CompatibilityError,
    ConfigError,
    DataError,
    FormatError,
    UsageError,
)
from .experiment import (
    build_suite,
    load_backbone,
    pretrain_backbone,
    run_experiment,
    save_backbone,
    summary_markdown,
    write_json,
    write_record,
    write_text,
)
from .fusion import FusionActivationTrace
from .grid import grid_search, rows_to_csv
from .model import Assembly, evaluate
from .selfcheck import fusion_grad_check
from .tasks import export_jsonl
from .training import train_baseline, train_fusion, train_mt_adapters, train_st_adapter

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_BUDGET = 0, 1, 2, 3, 4


def exit_code_for(exc: AdapterFusionError) -> int:
    if isinstance(exc, BudgetError):
        return EXIT_BUDGET
    if isinstance(exc, (ArtifactError, FormatError, CompatibilityError)):
        return EXIT_ARTIFACT
    if isinstance(exc, (ConfigError, UsageError, DataError)):
        return EXIT_CONFIG
    return EXIT_FAIL


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    return cfg


def _out(args, cfg: ExperimentConfig | None = None) -> Path:
    return Path(args.out or (cfg.output_dir if cfg and cfg.output_dir else "."))


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _guard(paths, force: bool) -> None:
    """Refuse to overwrite existing artifacts without --force."""
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ArtifactError(f"{existing[0]} exists; pass --force to overwrite")


def _backbone(args, cfg: ExperimentConfig, out: Path):
    path = Path(args.backbone) if args.backbone else out / "backbone.ckpt"
    return load_backbone(path, cfg)


def _task(suite, name: str):
    if name not in suite.names:
        raise UsageError(f"unknown task {name!r}; suite has {suite.names}")
    return suite[name]


def _split_names(text: str | None) -> list[str] | None:
    return [s for s in text.split(",") if s] if text else None


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = _config(args)
    summary = run_experiment(cfg, args.out, args.force, args.workers)
    print(summary_markdown(summary), end="")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    _guard([out / "backbone.ckpt"], args.force)
    suite = build_suite(cfg)
    theta, res = pretrain_backbone(cfg, suite)
    save_backbone(out, theta, res)
    print(json.dumps({"backbone": str(out / "backbone.ckpt"), "fingerprint": cfg.backbone.fingerprint(),
                      "final_loss": res.final_loss if res else None}))
    return EXIT_OK


def cmd_gen_tasks(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg) / "tasks"
    suite = build_suite(cfg)
    _guard([out / f"{t.name}.train.jsonl" for t in suite.tasks], args.force)
    for task in suite.tasks:
        export_jsonl(task, out)
    write_json(out / "suite.json", {"fingerprint": cfg.suite_fingerprint(), "tasks": [t.spec.to_dict() for t in suite.tasks],
                                    "markers": {t.name: [list(g) for g in t.markers] for t in suite.tasks}})
    print(json.dumps({t.name: [len(t.train), len(t.dev), len(t.test)] for t in suite.tasks}))
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = _seed(args, cfg)
    theta, pretrained = _backbone(args, cfg, out)
    suite = build_suite(cfg)
    names = _split_names(args.task) or suite.names
    targets = [out / "adapters" / "st-a" / f"{n}.ckpt" for n in names]
    _guard(targets, args.force)
    tcfg = cfg.train_config("st-a", seed)
    for name in names:
        res = train_st_adapter(theta, _task(suite, name), cfg.adapter, tcfg, pretrained=pretrained)
        serialize_adapter(res.adapter, {"mode": "st-a", "seed": seed}, out / "adapters" / "st-a" / f"{name}.ckpt")
        serialize_head(res.head, {"mode": "st-a", "seed": seed}, out / "heads" / "st-a" / f"{name}.ckpt")
        write_record(out / "records" / "st-a" / f"{name}.json", res.record)
        print(json.dumps({"task": name, "dev_accuracy": res.record.dev_accuracy[name]}))
    return EXIT_OK


def cmd_train_mta(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = _seed(args, cfg)
    theta, _ = _backbone(args, cfg, out)
    suite = build_suite(cfg)
    names = _split_names(args.tasks) or suite.names
    _guard([out / "mt-a" / "backbone.ckpt"], args.force)
    res = train_mt_adapters(theta, [_task(suite, n) for n in names], cfg.adapter, cfg.train_config("mt-a", seed))
    serialize_backbone(res.theta, {"mode": "mt-a", "seed": seed}, out / "mt-a" / "backbone.ckpt")
    for name, phi in res.adapters.items():
        serialize_adapter(phi, {"mode": "mt-a", "seed": seed}, out / "adapters" / "mt-a" / f"{name}.ckpt")
        serialize_head(res.heads[name], {"mode": "mt-a", "seed": seed}, out / "heads" / "mt-a" / f"{name}.ckpt")
    write_record(out / "records" / "mt-a" / "all.json", res.record)
    print(json.dumps(res.record.dev_accuracy))
    return EXIT_OK


def cmd_train_fusion(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = _seed(args, cfg)
    source = args.source
    if source == "mt-a":
        path = Path(args.backbone) if args.backbone else out / "mt-a" / "backbone.ckpt"
        if not path.exists():
            raise ArtifactError(f"missing multi-task backbone {path}")
        theta, _ = deserialize_backbone(path, cfg.backbone)
    else:
        theta, _ = _backbone(args, cfg, out)
    adapter_dir = Path(args.adapters) if args.adapters else out / "adapters" / source
    members = _split_names(args.members) or cfg.members()
    adapters = []
    for m in members:
        p = adapter_dir / f"{m}.ckpt"
        if not p.exists():
            raise ArtifactError(f"missing member adapter {p}")
        adapters.append(deserialize_adapter(p, theta.config))
    suite = build_suite(cfg)
    mode = f"fusion-{source}"
    names = _split_names(args.target) or suite.names
    _guard([out / "fusion" / mode / f"{n}.ckpt" for n in names], args.force)
    tcfg = cfg.train_config(mode, seed)
    traces = []
    for name in names:
        head = None
        head_path = out / "heads" / source / f"{name}.ckpt"
        if tcfg.reuse_head and head_path.exists():
            head = deserialize_head(head_path)
        res = train_fusion(theta, adapters, _task(suite, name), tcfg, head=head)
        serialize_fusion(res.fusion, {"mode": mode, "seed": seed}, out / "fusion" / mode / f"{name}.ckpt")
        serialize_head(res.head, {"mode": mode, "seed": seed}, out / "heads" / mode / f"{name}.ckpt")
        write_record(out / "records" / mode / f"{name}.json", res.record)
        traces.append(res.trace)
        print(json.dumps({"task": name, "dev_accuracy": res.record.dev_accuracy[name]}))
    write_text(out / f"heatmap-{mode}.csv", export_heatmap(traces))
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = _seed(args, cfg)
    theta, _ = _backbone(args, cfg, out)
    suite = build_suite(cfg)
    names = _split_names(args.tasks) or suite.names
    label = {"head_only": "head", "full": "full", "sequential": "sequential"}[args.mode]
    tcfg = cfg.train_config(label if label != "sequential" else "full", seed)
    if args.mode == "sequential":
        path = out / "records" / "sequential" / ("-".join(names) + ".json")
        _guard([path], args.force)
        res = train_baseline(theta, [_task(suite, n) for n in names], "sequential", tcfg)
        write_record(path, res.record)
        print(json.dumps(res.record.extra["stages"]))
        return EXIT_OK
    _guard([out / "records" / label / f"{n}.json" for n in names], args.force)
    for name in names:
        res = train_baseline(theta, _task(suite, name), args.mode, tcfg)
        write_record(out / "records" / label / f"{name}.json", res.record)
        print(json.dumps({"task": name, "dev_accuracy": res.record.dev_accuracy[name]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    suite = build_suite(cfg)
    task = _task(suite, args.task)
    theta = _backbone(args, cfg, out)[0]
    if not Path(args.head).exists():
        raise ArtifactError(f"missing head {args.head}")
    head = deserialize_head(args.head)
    asm = Assembly(theta, heads={task.name: head})
    if args.fusion:
        psi = deserialize_fusion(args.fusion, theta.config)
        adapter_dir = Path(args.adapters or out / "adapters" / "st-a")
        asm.adapters = {m: deserialize_adapter(adapter_dir / f"{m}.ckpt", theta.config) for m in psi.members}
        asm.fusion = psi
    elif args.adapter:
        asm.adapters = {task.name: deserialize_adapter(args.adapter, theta.config)}
    res = evaluate(asm, task.split(args.split), task.name, task.num_classes)
    print(json.dumps({"task": task.name, "split": args.split, **res.to_dict()}))
    return EXIT_OK


def cmd_grid_search(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg) / "grid"
    _guard([out / "ranked.csv"], args.force)
    theta, _ = _backbone(args, cfg, _out(args, cfg))
    suite = build_suite(cfg)
    res = grid_search(cfg.grid, theta, suite, cfg.probe_tasks(), cfg.train_config("grid" if "grid" in cfg.train else "st-a"),
                      list(cfg.seeds), workers=args.workers, max_cells=args.max_cells)
    write_text(out / "ranked.csv", rows_to_csv(res.ranked()))
    for name, rows in res.marginals().items():
        write_text(out / f"marginal-{name}.csv", rows_to_csv(rows))
    write_json(out / "grid.json", res.to_dict())
    best = res.ranked()[0]
    print(json.dumps({"best": best, "preset": res.best_config().preset}))
    return EXIT_OK


def _load_trace(path: Path) -> FusionActivationTrace:
    if not path.exists():
        raise ArtifactError(f"missing trace {path}")
    data = json.loads(path.read_text())
    if "extra" in data and "trace" in data["extra"]:
        data = data["extra"]["trace"]
    try:
        return FusionActivationTrace.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ArtifactError(f"{path} holds no fusion trace ({exc})") from None


def cmd_heatmap(args) -> int:
    traces = [_load_trace(Path(p)) for p in args.traces]
    layers = [int(x) for x in args.layers.split(",")] if args.layers else None
    text = export_heatmap(traces, layers)
    if args.out:
        path = Path(args.out)
        path = path / "heatmap.csv" if path.is_dir() or not path.suffix else path
        _guard([path], args.force)
        write_text(path, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.runs) == 1:
        comp = fusion_vs_stage1(load_summary(args.runs[0]))
    elif len(args.runs) == 2:
        comp = compare_report(*args.runs)
    else:
        raise UsageError("compare takes one run (fusion vs stage 1) or two runs (other vs base)")
    sys.stdout.write(comp.to_markdown())
    if args.out:
        out = Path(args.out)
        _guard([out / "compare.csv"], args.force)
        write_text(out / "compare.csv", comp.to_csv())
        write_text(out / "compare.md", comp.to_markdown())
    return EXIT_FAIL if comp.absent else EXIT_OK


def cmd_grad_check(args) -> int:
    report = fusion_grad_check(seed=args.seed or 0)
    print(report.summary())
    print(f"{'PASS' if report.passed else 'FAIL'}: {len(report.max_rel_err)} tensors, tol {report.tol:g}")
    return EXIT_OK if report.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed set with one seed")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adapterfusion", description="Adapters and AdapterFusion on a toy transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    add("run", cmd_run, "run a full experiment and write the summary table")
    add("pretrain", cmd_pretrain, "masked-token pretraining of the backbone")
    add("gen-tasks", cmd_gen_tasks, "generate the synthetic suite as JSON lines")
    p = add("train-adapter", cmd_train_adapter, "train single-task adapters")
    p.add_argument("--task", help="comma-separated task names (default: all)")
    p.add_argument("--backbone", help="backbone checkpoint (default: OUT/backbone.ckpt)")
    p = add("train-mta", cmd_train_mta, "train multi-task adapters with the backbone")
    p.add_argument("--tasks", help="comma-separated task names (default: all)")
    p.add_argument("--backbone")
    p = add("train-fusion", cmd_train_fusion, "train fusion layers over frozen adapters")
    p.add_argument("--target", help="comma-separated target tasks (default: all)")
    p.add_argument("--members", help="comma-separated member adapters (default: config)")
    p.add_argument("--source", choices=("st-a", "mt-a"), default="st-a")
    p.add_argument("--adapters", help="directory with member adapter checkpoints")
    p.add_argument("--backbone")
    p = add("train-baseline", cmd_train_baseline, "head-only, full or sequential fine-tuning")
    p.add_argument("--mode", choices=("head_only", "full", "sequential"), required=True)
    p.add_argument("--tasks", help="comma-separated tasks; order matters for sequential")
    p.add_argument("--backbone")
    p = add("eval", cmd_eval, "evaluate saved checkpoints on a split")
    p.add_argument("--task", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--adapter")
    p.add_argument("--fusion")
    p.add_argument("--adapters")
    p.add_argument("--backbone")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p = add("grid-search", cmd_grid_search, "exhaustive adapter architecture search")
    p.add_argument("--max-cells", type=int, help="override the cell budget")
    p.add_argument("--backbone")
    p = add("heatmap", cmd_heatmap, "export fusion activations as CSV")
    p.add_argument("traces", nargs="+", help="fusion RunRecord or trace JSON files")
    p.add_argument("--layers", help="comma-separated 1-based layers")
    p = add("compare", cmd_compare, "delta table between runs")
    p.add_argument("runs", nargs="+", help="one or two run directories")
    add("grad-check", cmd_grad_check, "finite-difference check of a tiny fused model")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except AdapterFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
