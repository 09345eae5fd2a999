"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 to 9 train real models on a d=32, L=3 backbone and take several
minutes each. Run only this file with ``pytest tests/test_acceptance.py -v``.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from adapterfusion.adapters import AdapterConfig, make_adapter, param_count
from adapterfusion.analysis import export_heatmap, read_heatmap, row_sums, self_reliance
from adapterfusion.backbone import BackboneConfig, PretrainConfig, init_backbone, pretrain_mlm
from adapterfusion.checkpoint import (
    deserialize_adapter,
    deserialize_backbone,
    deserialize_fusion,
    deserialize_head,
    serialize_adapter,
    serialize_backbone,
    serialize_fusion,
    serialize_head,
)
from adapterfusion.config import GridConfig
from adapterfusion.errors import CompatibilityError
from adapterfusion.fusion import ActivationRecorder, fusion_init
from adapterfusion.grid import enumerate_cells
from adapterfusion.model import Assembly, all_logits, init_head, predict
from adapterfusion.selfcheck import fusion_grad_check, tiny_fusion_model
from adapterfusion.tasks import PAD, TaskSpec, generate_suite
from adapterfusion.training import (
    TrainConfig,
    train_baseline,
    train_fusion,
    train_mt_adapters,
    train_st_adapter,
)

SEEDS = (0, 1, 2)
VOCAB = 128
BCFG = BackboneConfig(vocab_size=VOCAB, max_seq_len=16, hidden_dim=32, num_layers=3, num_heads=4, ffn_dim=64)
PRETRAIN = PretrainConfig(steps=1000, batch_size=32, lr=2e-3)
ACFG = AdapterConfig.pfeiffer(2)
STAGE1 = TrainConfig(base_lr=3e-3, max_epochs=10, batch_size=16, early_stop_patience=3)
FUSION = TrainConfig(base_lr=2e-3, max_epochs=20, batch_size=16, early_stop_patience=3)


def keyword(name, size, markers_per_seq=3):
    return TaskSpec(name, "keyword", num_classes=4, markers_per_class=6, markers_per_seq=markers_per_seq, size=size)


TRANSFER_SPECS = [
    keyword("src", 4000),
    TaskSpec("tgt", "clone", size=200, fractions=(0.5, 0.25, 0.25), links=(("src", 1.0),)),
    keyword("a", 1000),
    keyword("b", 1000),
]
MEMBERS = ["src", "tgt", "a", "b"]


def count(flags):
    return sum(bool(f) for f in flags)


@pytest.fixture(scope="module")
def backbone():
    t0 = time.perf_counter()
    suite = generate_suite(TRANSFER_SPECS, VOCAB, 0)
    theta = pretrain_mlm(BCFG, suite.corpus, PRETRAIN).params
    return theta, time.perf_counter() - t0


@pytest.fixture(scope="module")
def transfer(backbone):
    """Stage 1 of the transfer suite per seed, shared by criteria 7 and 8."""
    theta, _ = backbone
    cache = {}

    def run(seed):
        if seed not in cache:
            t0 = time.perf_counter()
            suite = generate_suite(TRANSFER_SPECS, VOCAB, seed)
            cfg = replace(STAGE1, seed=seed)
            sta = {n: train_st_adapter(theta, suite[n], ACFG, cfg) for n in MEMBERS}
            cache[seed] = (suite, sta, time.perf_counter() - t0)
        return cache[seed]

    return run


# 1 ---------------------------------------------------------------------------


def test_c1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    report = fusion_grad_check(seed=0, h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    model = tiny_fusion_model(0)
    groups = model.assembly.named_groups()
    want = {"theta", "psi", "phi:task0", "phi:task1", "phi:task2", "head:task0"}
    covered = {g for g, named in groups.items() if named and all(t.name in report.max_rel_err for _, t in named)}
    total = sum(len(named) for named in groups.values())
    ok = report.passed and covered == want and len(report.max_rel_err) == total and elapsed < 60
    worst = max(report.max_rel_err.values())
    verdict("C1 gradient correctness", ok,
            f"{total} tensors in {sorted(covered)}, worst rel err {worst:.2e}, {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


def test_c2_freeze_ledger(verdict):
    t0 = time.perf_counter()
    bcfg = BackboneConfig(vocab_size=48, max_seq_len=12, hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=32)
    specs = [TaskSpec(n, "keyword", num_classes=2, markers_per_class=3, markers_per_seq=2, size=120, max_len=8)
             for n in ("a", "b")]
    suite = generate_suite(specs, 48, 0)
    theta = init_backbone(bcfg, 0)
    cfg = TrainConfig(base_lr=3e-3, max_epochs=2, batch_size=16)
    acfg = AdapterConfig.pfeiffer(4)
    theta_bytes = [t.data.tobytes() for t in theta]

    got, want = {}, {}
    sta = {n: train_st_adapter(theta, suite[n], acfg, cfg) for n in ("a", "b")}
    got["st-a"], want["st-a"] = sta["a"].record, {"phi:a", "head:a"}
    mt = train_mt_adapters(theta, suite.tasks, acfg, cfg)
    got["mt-a"], want["mt-a"] = mt.record, {"theta", "phi:a", "phi:b", "head:a", "head:b"}
    phi_bytes = {n: [t.data.tobytes() for t in sta[n].adapter] for n in sta}
    fus = train_fusion(theta, [sta["a"].adapter, sta["b"].adapter], suite["a"], cfg)
    got["fusion-st-a"], want["fusion-st-a"] = fus.record, {"psi", "head:a"}
    fmt = train_fusion(mt.theta, [mt.adapters["a"], mt.adapters["b"]], suite["b"], cfg, head=mt.heads["b"])
    got["fusion-mt-a"], want["fusion-mt-a"] = fmt.record, {"psi", "head:b"}
    got["head"], want["head"] = train_baseline(theta, suite["a"], "head_only", cfg).record, {"head:a"}
    got["full"], want["full"] = train_baseline(theta, suite["a"], "full", cfg).record, {"theta", "head:a"}
    got["sequential"] = train_baseline(theta, suite.tasks, "sequential", cfg).record
    want["sequential"] = {"theta", "head:a", "head:b"}

    bad = [m for m in want if got[m].changed_groups != want[m]]
    for m in ("fusion-st-a", "fusion-mt-a"):
        rec = got[m]
        frozen = [k for k in rec.digests_before if k not in want[m]]
        if any(rec.digests_before[k] != rec.digests_after[k] for k in frozen) or "theta" not in frozen:
            bad.append(m + " digests")
    inputs_intact = (theta_bytes == [t.data.tobytes() for t in theta]
                     and all(phi_bytes[n] == [t.data.tobytes() for t in sta[n].adapter] for n in sta))
    elapsed = time.perf_counter() - t0
    ok = not bad and inputs_intact and elapsed < 120
    verdict("C2 freeze ledger", ok, f"{len(want)} modes, mismatches {bad}, inputs intact {inputs_intact}, {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------


def test_c3_fusion_identity_embedding(verdict):
    t0 = time.perf_counter()
    bcfg = BackboneConfig(vocab_size=32, max_seq_len=12, hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=32)
    theta = init_backbone(bcfg, 0)
    phi = make_adapter(bcfg, AdapterConfig.pfeiffer(4, init_style="full_random"), 0, "t")
    head = init_head(16, 3, 0, "t")
    psi = fusion_init(bcfg, [phi], 0, "t")
    rng = np.random.default_rng(0)
    for l in range(bcfg.num_layers):
        psi.query(l).data = rng.normal(size=(16, 16))
        psi.key(l).data = rng.normal(size=(16, 16))
        psi.value(l).data = np.eye(16)
    tokens = rng.integers(4, 32, size=(1000, 12))
    tokens[:, 0] = 2
    lengths = rng.integers(2, 13, size=1000)
    tokens[np.arange(12)[None, :] >= lengths[:, None]] = PAD
    plain = Assembly(theta, heads={"t": head}, adapters={"t": phi})
    fused = Assembly(theta, heads={"t": head}, adapters={"t": phi}, fusion=psi)
    diff = max(float(np.max(np.abs(plain.logits(tokens[i:i + 100], "t").data - fused.logits(tokens[i:i + 100], "t").data)))
               for i in range(0, 1000, 100))
    elapsed = time.perf_counter() - t0
    verdict("C3 fusion identity embedding", diff == 0.0 and elapsed < 30,
            f"max abs logit difference {diff!r} over 1000 inputs, {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------


def test_c4_normalization(verdict):
    bcfg = BackboneConfig(vocab_size=48, max_seq_len=12, hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=32)
    specs = [TaskSpec(n, "keyword", num_classes=2, markers_per_class=3, markers_per_seq=2, size=200, max_len=10)
             for n in ("a", "b", "c")]
    suite = generate_suite(specs, 48, 0)
    theta = init_backbone(bcfg, 0)
    cfg = TrainConfig(base_lr=3e-3, max_epochs=2, batch_size=16)
    adapters = [train_st_adapter(theta, t, AdapterConfig.pfeiffer(4), cfg).adapter for t in suite.tasks]
    traces, worst = [], 0.0
    for task in suite.tasks:
        res = train_fusion(theta, adapters, task, cfg)
        asm = Assembly(theta, heads={task.name: res.head}, adapters={a.task: a for a in adapters}, fusion=res.fusion)
        rec = ActivationRecorder(bcfg.num_layers, len(adapters))
        predict(asm, task.dev, task.name, recorder=rec)
        worst = max(worst, rec.max_sum_error)
        traces.append(res.trace)
    sums = row_sums(read_heatmap(export_heatmap(traces, layers=[1, 2])))
    heat = max(abs(s - 1.0) for s in sums.values())
    verdict("C4 normalization", worst <= 1e-12 and heat <= 1e-6,
            f"per-position weight sum error {worst:.1e}, heatmap row sum error {heat:.1e} over {len(sums)} rows")


# 5 ---------------------------------------------------------------------------


def test_c5_parameter_accounting(verdict):
    t0 = time.perf_counter()
    bcfg = BackboneConfig(vocab_size=16, max_seq_len=8, hidden_dim=64, num_layers=2, num_heads=2, ffn_dim=64)
    cells = enumerate_cells(GridConfig())
    mismatched = [c.index for c in cells
                  if param_count(c.adapter_config(), bcfg) != sum(t.data.size for t in make_adapter(bcfg, c.adapter_config(), 0))]
    base = BackboneConfig(vocab_size=16, max_seq_len=8, hidden_dim=768, num_layers=12, num_heads=12, ffn_dim=3072)
    ratios = {r: param_count(AdapterConfig.houlsby(r), base) / param_count(AdapterConfig.pfeiffer(r), base)
              for r in (2, 8, 16, 64)}
    width = AdapterConfig(reduction_factor=64).bottleneck_dim(768)
    elapsed = time.perf_counter() - t0
    ok = len(cells) == 576 and not mismatched and set(ratios.values()) == {2.0} and width == 12 and elapsed < 10
    verdict("C5 parameter accounting", ok,
            f"{len(cells)} cells, {len(mismatched)} mismatches, houlsby/pfeiffer {sorted(set(ratios.values()))}, "
            f"d=768 r=64 bottleneck {width}, {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------


def test_c6_catastrophic_forgetting(backbone, verdict):
    theta, _ = backbone
    t0 = time.perf_counter()
    specs = [keyword("A", 1000, markers_per_seq=1), keyword("B", 1000, markers_per_seq=1)]
    drops, unchanged, disjoint = [], [], []
    for seed in SEEDS:
        suite = generate_suite(specs, VOCAB, seed)
        disjoint.append(not set(suite["A"].all_markers()) & set(suite["B"].all_markers()))
        cfg = replace(STAGE1, batch_size=32, seed=seed)
        stages = train_baseline(theta, suite.tasks, "sequential", cfg).record.extra["stages"]
        drops.append(100 * (stages[0]["dev_accuracy"]["A"] - stages[1]["dev_accuracy"]["A"]))

        a = train_st_adapter(theta, suite["A"], ACFG, cfg)
        asm = Assembly(theta, heads={"A": a.head}, adapters={"A": a.adapter})
        before = all_logits(asm, suite["A"].dev, "A")
        train_st_adapter(theta, suite["B"], ACFG, cfg)
        after = all_logits(asm, suite["A"].dev, "A")
        unchanged.append(before.tobytes() == after.tobytes())
    elapsed = time.perf_counter() - t0
    ok = count(d >= 5.0 for d in drops) >= 2 and all(unchanged) and all(disjoint) and elapsed < 300
    verdict("C6 catastrophic forgetting", ok,
            f"sequential drop on A {[round(d, 1) for d in drops]} points, ST-A logits bit-identical {unchanged}, "
            f"{elapsed:.0f}s")


# 7 ---------------------------------------------------------------------------


def test_c7_transfer_recovery(backbone, transfer, verdict):
    theta, pre_time = backbone
    t0 = time.perf_counter()
    gains, dominant, overlap = [], [], []
    for seed in SEEDS:
        suite, sta, _ = transfer(seed)  # stage 1 runs here and is inside the timer
        overlap.append(suite["tgt"].all_markers() == suite["src"].all_markers())
        res = train_fusion(theta, [sta[n].adapter for n in MEMBERS], suite["tgt"], replace(FUSION, seed=seed))
        gains.append(100 * (res.record.dev_accuracy["tgt"] - sta["tgt"].record.dev_accuracy["tgt"]))
        src = res.trace.mean_activation[:, MEMBERS.index("src")]
        dominant.append(count(src > 1 / len(MEMBERS) + 0.15) > len(src) / 2)
    elapsed = time.perf_counter() - t0 + pre_time
    ok = count(g >= 3.0 for g in gains) >= 2 and all(dominant) and all(overlap) and elapsed < 600
    verdict("C7 transfer recovery", ok,
            f"fusion minus own ST-A {[round(g, 1) for g in gains]} points, source adapter dominant {dominant}, "
            f"{elapsed:.0f}s with pretraining")


# 8 ---------------------------------------------------------------------------


def test_c8_no_op_safety(backbone, transfer, verdict):
    theta, pre_time = backbone
    deltas, own, disjoint, elapsed = [], [], [], pre_time
    for seed in SEEDS:
        suite, sta, stage1_time = transfer(seed)
        elapsed += stage1_time  # shared with criterion 7, counted in both
        t0 = time.perf_counter()
        mine = set(suite["a"].all_markers())
        disjoint.append(all(not mine & set(suite[n].all_markers()) for n in MEMBERS if n != "a"))
        res = train_fusion(theta, [sta[n].adapter for n in MEMBERS], suite["a"], replace(FUSION, seed=seed))
        deltas.append(100 * (res.record.dev_accuracy["a"] - sta["a"].record.dev_accuracy["a"]))
        own.append(self_reliance(res.trace) > 0.5)
        elapsed += time.perf_counter() - t0
    ok = all(d >= -2.0 for d in deltas) and all(own) and all(disjoint) and elapsed < 600
    verdict("C8 no-op safety", ok,
            f"fusion minus own ST-A {[round(d, 1) for d in deltas]} points, own adapter row max {own}, "
            f"{elapsed:.0f}s with pretraining")


# 9 ---------------------------------------------------------------------------


def test_c9_mt_a_pipeline(backbone, verdict):
    theta, _ = backbone
    t0 = time.perf_counter()
    specs = [keyword("t1", 1000), keyword("t2", 1000), keyword("t3", 500), keyword("t4", 500)]
    deltas, ledgers = [], []
    for seed in SEEDS:
        suite = generate_suite(specs, VOCAB, seed)
        mt = train_mt_adapters(theta, suite.tasks, ACFG, TrainConfig(base_lr=1e-3, max_epochs=10, seed=seed))
        for task in suite.tasks:
            res = train_fusion(mt.theta, [mt.adapters[n] for n in suite.names], task, replace(FUSION, seed=seed),
                               head=mt.heads[task.name])
            rec = res.record
            ledgers.append(rec.changed_groups == {"psi", f"head:{task.name}"}
                           and all(rec.digests_before[k] == rec.digests_after[k]
                                   for k in rec.digests_before if k == "theta" or k.startswith("phi:")))
            deltas.append(100 * (rec.dev_accuracy[task.name] - mt.record.dev_accuracy[task.name]))
    elapsed = time.perf_counter() - t0
    ok = all(d >= -2.0 for d in deltas) and all(ledgers) and elapsed < 900
    verdict("C9 MT-A pipeline", ok,
            f"fusion minus MT-A min {min(deltas):.1f} points over {len(deltas)} task-seeds, ledgers ok {all(ledgers)}, "
            f"{elapsed:.0f}s")


# 10 --------------------------------------------------------------------------


def test_c10_determinism_and_serialization(tmp_path, verdict):
    bcfg = BackboneConfig(vocab_size=48, max_seq_len=12, hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=32)
    specs = [TaskSpec(n, "keyword", num_classes=2, markers_per_class=3, markers_per_seq=2, size=120, max_len=8)
             for n in ("a", "b")]
    cfg = TrainConfig(base_lr=3e-3, max_epochs=2, batch_size=16, seed=3)
    acfg = AdapterConfig.pfeiffer(4)

    def pipeline():
        suite = generate_suite(specs, 48, 0)
        theta = pretrain_mlm(bcfg, suite.corpus, PretrainConfig(steps=20)).params
        sta = [train_st_adapter(theta, t, acfg, cfg) for t in suite.tasks]
        fus = train_fusion(theta, [s.adapter for s in sta], suite["a"], cfg)
        mt = train_mt_adapters(theta, suite.tasks, acfg, cfg)
        full = train_baseline(theta, suite["b"], "full", cfg)
        return theta, sta, fus, [s.record for s in sta] + [fus.record, mt.record, full.record]

    theta, sta, fus, first = pipeline()
    _, _, _, second = pipeline()
    deterministic = [a.metrics() for a in first] == [b.metrics() for b in second]

    exact = []
    serialize_backbone(theta, {}, tmp_path / "b.ckpt")
    back, _ = deserialize_backbone(tmp_path / "b.ckpt", bcfg)
    exact.append(all(x.data.tobytes() == y.data.tobytes() for x, y in zip(theta, back)))
    serialize_adapter(sta[0].adapter, {}, tmp_path / "a.ckpt")
    phi = deserialize_adapter(tmp_path / "a.ckpt", bcfg)
    exact.append(all(x.data.tobytes() == y.data.tobytes() for x, y in zip(sta[0].adapter, phi)))
    serialize_fusion(fus.fusion, {}, tmp_path / "f.ckpt")
    psi = deserialize_fusion(tmp_path / "f.ckpt", bcfg)
    exact.append(all(x.data.tobytes() == y.data.tobytes() for x, y in zip(fus.fusion, psi)) and psi.members == ["a", "b"])
    serialize_head(fus.head, {}, tmp_path / "h.ckpt")
    head = deserialize_head(tmp_path / "h.ckpt")
    exact.append(all(x.data.tobytes() == y.data.tobytes() for x, y in zip(fus.head, head)))
    serialize_adapter(phi, {}, tmp_path / "a2.ckpt")
    exact.append((tmp_path / "a.ckpt").read_bytes() == (tmp_path / "a2.ckpt").read_bytes())

    other = replace(bcfg, num_layers=3)
    rejected = []
    for load in (lambda: deserialize_adapter(tmp_path / "a.ckpt", other),
                 lambda: deserialize_fusion(tmp_path / "f.ckpt", other),
                 lambda: deserialize_backbone(tmp_path / "b.ckpt", other)):
        try:
            load()
            rejected.append(False)
        except CompatibilityError:
            rejected.append(True)
    ok = deterministic and all(exact) and all(rejected)
    verdict("C10 determinism and serialization", ok,
            f"repeat metrics identical {deterministic}, round trips exact {exact}, foreign fingerprints rejected {rejected}")
