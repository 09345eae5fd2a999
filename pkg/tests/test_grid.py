import itertools

import numpy as np
import pytest

from adapterfusion.adapters import AdapterConfig
from adapterfusion.backbone import BackboneConfig, init_backbone
from adapterfusion.config import GridConfig
from adapterfusion.errors import BudgetError, ConfigError, UsageError
from adapterfusion.grid import (
    LEVELS,
    GridResult,
    cell_count,
    check_budget,
    enumerate_cells,
    grid_search,
    rows_to_csv,
    validate_cells,
)
from adapterfusion.tasks import TaskSpec, generate_suite
from adapterfusion.training import TrainConfig, train_st_adapter

BCFG = BackboneConfig(vocab_size=32, max_seq_len=10, hidden_dim=8, num_layers=1, num_heads=2, ffn_dim=16)
CFG = TrainConfig(base_lr=3e-3, max_epochs=1)


@pytest.fixture(scope="module")
def setup():
    specs = [TaskSpec(n, size=60, min_len=3, max_len=8) for n in ("p", "q")]
    return init_backbone(BCFG, 0), generate_suite(specs, 32, 0, corpus_size=5)


def test_default_cell_count():
    assert cell_count(GridConfig()) == 3 * 4 * 4 * 4 * 3 == 576
    assert check_budget(GridConfig()) == 576


def test_cells_cover_exact_product():
    g = GridConfig()
    cells = enumerate_cells(g)
    got = {tuple(c.axes().values()) for c in cells}
    want = set(itertools.product(*(getattr(g, a) for a in GridConfig.AXES)))
    assert got == want and len(cells) == len(want)
    assert [c.index for c in cells] == list(range(len(cells)))


def test_budget_error_lists_cells():
    with pytest.raises(BudgetError, match="576"):
        check_budget(GridConfig(), max_cells=100)
    with pytest.raises(BudgetError):
        check_budget(GridConfig(max_cells=10))


def test_invalid_cells_fail_up_front():
    with pytest.raises(ConfigError):
        validate_cells(enumerate_cells(GridConfig(reduction_factor=(3,))), BCFG)


def test_pfeiffer_cell_is_representable():
    cells = enumerate_cells(GridConfig())
    winner = [c for c in cells if (c.placement, c.pretrained_ln, c.new_ln) == ("top", "before_and_after", "none")]
    assert len(winner) == 12
    for c in winner:
        assert c.adapter_config() == AdapterConfig.pfeiffer(c.reduction_factor, c.nonlinearity)
        assert c.adapter_config().preset == "pfeiffer"


def test_both_placement_expands():
    c = enumerate_cells(GridConfig(placement=("both",), pretrained_ln=("after",), new_ln=("none",),
                                   reduction_factor=(2,), nonlinearity=("relu",)))[0]
    assert c.adapter_config() == AdapterConfig.houlsby(2)


def test_single_cell_equals_direct_run(setup):
    theta, suite = setup
    g = GridConfig(placement=("top",), pretrained_ln=("before_and_after",), new_ln=("none",), reduction_factor=(2,),
                   nonlinearity=("relu",))
    res = grid_search(g, theta, suite, ["p"], CFG, [0])
    direct = train_st_adapter(theta, suite["p"], AdapterConfig.pfeiffer(2), CFG)
    assert res.scores[0, 0, 0] == direct.record.best_dev_accuracy
    assert res.best == 0 and res.ranked()[0]["best"]


def test_parallel_matches_serial_and_marginals(setup):
    theta, suite = setup
    g = GridConfig(placement=("top", "bottom"), pretrained_ln=("after", "none"), new_ln=("none",),
                   reduction_factor=(2, 4), nonlinearity=("relu",))
    a = grid_search(g, theta, suite, ["p", "q"], CFG, [0, 1])
    b = grid_search(g, theta, suite, ["p", "q"], CFG, [0, 1], workers=2)
    assert np.array_equal(a.scores, b.scores)
    assert a.scores.shape == (8, 2, 2) and not np.isnan(a.scores).any()
    m = a.marginals()
    assert set(m) == set(LEVELS)
    assert sum(r["cells"] for r in m["a"]) == 8 and len(m["b"]) == 4 and len(m["r"]) == 2
    text = rows_to_csv(a.ranked())
    assert text.splitlines()[0].startswith("index,placement")
    assert len(text.splitlines()) == 9


def test_probe_tasks_must_exist(setup):
    theta, suite = setup
    g = GridConfig(placement=("top",), pretrained_ln=("after",), new_ln=("none",), reduction_factor=(2,),
                   nonlinearity=("relu",))
    with pytest.raises(UsageError):
        grid_search(g, theta, suite, ["zzz"], CFG, [0])


def test_average_ranks_and_tie_break():
    cells = enumerate_cells(GridConfig(placement=("top", "bottom", "both"), pretrained_ln=("after",), new_ln=("none",),
                                       reduction_factor=(2,), nonlinearity=("relu",)))
    scores = np.array([[[0.8], [0.6]], [[0.8], [0.6]], [[0.5], [0.9]]])
    res = GridResult(cells, ["x", "y"], [0], scores)
    # task x ranks: 1.5, 1.5, 3; task y ranks: 2.5, 2.5, 1
    np.testing.assert_allclose(res.rank, [2.0, 2.0, 2.0])
    assert res.best == 0
