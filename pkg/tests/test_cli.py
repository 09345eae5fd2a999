import json
import re

import pytest

from adapterfusion.cli import main


def tiny_config(modes=("head",), tasks=("a",), **over):
    cfg = {
        "schema": 1,
        "backbone": {"vocab_size": 48, "max_seq_len": 12, "hidden_dim": 16, "num_layers": 2, "num_heads": 2, "ffn_dim": 32},
        "pretrain": {"steps": 20},
        "suite": {"tasks": [{"name": n, "kind": "keyword", "num_classes": 2, "markers_per_class": 3, "markers_per_seq": 2,
                             "size": 120, "max_len": 8} for n in tasks], "corpus_size": 100},
        "modes": list(modes),
        "train": {"default": {"max_epochs": 1, "base_lr": 0.003}},
        "adapter": {"preset": "pfeiffer", "reduction_factor": 4},
        "seeds": [0],
    }
    cfg.update(over)
    return cfg


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def snapshot(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def strip_wall(files):
    out = {}
    for k, v in files.items():
        if k.parts[-2:-1] and "records" in k.parts:
            v = json.dumps({a: b for a, b in json.loads(v).items() if a != "wall_time"}).encode()
        out[k] = v
    return out


def test_minimal_run_and_rerun_guard(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny_config())
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["tasks"] == ["a"] and summary["columns"] == ["Head"]
    assert set(summary["mean"]["a"]) == {"Head"}
    assert (out / "summary.md").read_text().count("\n") == 3
    assert (out / "seed0" / "records" / "head" / "a.json").exists()

    before = snapshot(out)
    assert main(["run", "--config", cfg, "--out", str(out)]) == 3
    assert "--force" in capsys.readouterr().err
    assert snapshot(out) == before

    assert main(["run", "--config", cfg, "--out", str(out), "--force"]) == 0
    after = snapshot(out)
    assert after.keys() == before.keys()
    assert strip_wall(after) == strip_wall(before)


def test_staged_commands_match_run(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny_config(modes=("st-a", "fusion-st-a"), tasks=("a", "b")))
    out = str(tmp_path / "st")
    assert main(["pretrain", "--config", cfg, "--out", out]) == 0
    assert main(["pretrain", "--config", cfg, "--out", out]) == 3
    assert main(["gen-tasks", "--config", cfg, "--out", out]) == 0
    assert main(["train-adapter", "--config", cfg, "--out", out]) == 0
    assert main(["train-fusion", "--config", cfg, "--out", out, "--target", "a"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--out", out, "--task", "a", "--head", f"{out}/heads/fusion-st-a/a.ckpt",
                 "--fusion", f"{out}/fusion/fusion-st-a/a.ckpt"]) == 0
    res = json.loads(capsys.readouterr().out)
    rec = json.loads((tmp_path / "st" / "records" / "fusion-st-a" / "a.json").read_text())
    assert res["accuracy"] == rec["dev_accuracy"]["a"]
    assert main(["heatmap", f"{out}/records/fusion-st-a/a.json", "--layers", "1,2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "layer,target_task,adapter,mean_activation" and len(lines) == 5


def test_baseline_commands(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny_config(tasks=("a", "b")))
    out = str(tmp_path / "b")
    assert main(["pretrain", "--config", cfg, "--out", out]) == 0
    assert main(["train-baseline", "--config", cfg, "--out", out, "--mode", "sequential", "--tasks", "a,b"]) == 0
    assert (tmp_path / "b" / "records" / "sequential" / "a-b.json").exists()
    assert main(["train-mta", "--config", cfg, "--out", out]) == 0
    assert main(["train-fusion", "--config", cfg, "--out", out, "--source", "mt-a", "--target", "b"]) == 0


@pytest.mark.parametrize("text, code", [
    ('{"schema": 1, "colour": 1}', 2),
    ("{broken", 2),
])
def test_bad_config_exits_2(tmp_path, capsys, text, code):
    p = tmp_path / "c.json"
    p.write_text(text)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == code
    assert capsys.readouterr().err.startswith("error:")


def test_missing_artifacts_exit_3(tmp_path):
    cfg = write_cfg(tmp_path, tiny_config())
    out = str(tmp_path / "none")
    assert main(["train-adapter", "--config", cfg, "--out", out]) == 3
    assert main(["heatmap", str(tmp_path / "nope.json")]) == 3
    assert main(["compare", str(tmp_path / "x"), str(tmp_path / "y")]) == 3


def test_unknown_task_exits_2(tmp_path):
    cfg = write_cfg(tmp_path, tiny_config())
    out = str(tmp_path / "u")
    assert main(["pretrain", "--config", cfg, "--out", out]) == 0
    assert main(["train-adapter", "--config", cfg, "--out", out, "--task", "zzz"]) == 2


def test_grid_budget_exits_4(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tiny_config())
    out = str(tmp_path / "g")
    assert main(["pretrain", "--config", cfg, "--out", out]) == 0
    capsys.readouterr()
    assert main(["grid-search", "--config", cfg, "--out", out, "--max-cells", "10"]) == 4
    assert re.search(r"576 cells", capsys.readouterr().err)


def test_compare_codes(tmp_path, capsys):
    def summary(mean):
        return {"suite_fingerprint": "f", "tasks": list(mean), "columns": ["ST-A", "F.w/ST-A"], "mean": mean,
                "std": {}}

    for name, mean in (("x", {"a": {"ST-A": 80.0, "F.w/ST-A": 82.0}}),
                       ("y", {"a": {"ST-A": 80.1, "F.w/ST-A": 81.0}}),
                       ("z", {"a": {"ST-A": 80.0}})):
        (tmp_path / name).mkdir()
        (tmp_path / name / "summary.json").write_text(json.dumps(summary(mean)))
    assert main(["compare", str(tmp_path / "x")]) == 0
    assert "↗" in capsys.readouterr().out
    assert main(["compare", str(tmp_path / "x"), str(tmp_path / "y")]) == 0
    out = capsys.readouterr().out
    assert "→" in out and "↘" in out
    assert main(["compare", str(tmp_path / "x"), str(tmp_path / "z")]) == 1
    assert main(["compare", str(tmp_path / "x"), str(tmp_path / "y"), str(tmp_path / "z")]) == 2


def test_grad_check_passes(capsys):
    assert main(["grad-check"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_workers_must_be_positive(tmp_path):
    assert main(["grad-check", "--workers", "0"]) == 2


@pytest.mark.slow
def test_default_suite_runs_under_ten_minutes(tmp_path):
    import time

    cfg = write_cfg(tmp_path, {"schema": 1})
    t0 = time.perf_counter()
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    elapsed = time.perf_counter() - t0
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert len(summary["tasks"]) == 6 and len(summary["columns"]) == 6
    assert elapsed < 600, f"default suite took {elapsed:.0f}s"
