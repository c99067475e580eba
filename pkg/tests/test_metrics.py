import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from dynamic_flow.errors import ContractError, EmptyMaskError
from dynamic_flow.flops import FlopsLedger
from dynamic_flow.metrics import (
    REPORT_COLUMNS,
    SAMPLE_COLUMNS,
    EvalReport,
    bottleneck_histogram,
    bottleneck_step,
    epe,
    evaluate,
    f1_all,
    iteration_allocation,
    rank_difficulty,
    sweep_report,
    upsample_flow,
)
from dynamic_flow.models import DynamicFlowModel
from dynamic_flow.synthdata import make_sample


def constant_flow(u, v, size=3):
    flow = np.empty((2, size, size))
    flow[0], flow[1] = u, v
    return flow


ALL_VALID = np.ones((3, 3), dtype=bool)


def test_epe_examples():
    assert epe(constant_flow(3, 4), constant_flow(0, 0), ALL_VALID) == pytest.approx(5.0)
    assert epe(constant_flow(1, 2), constant_flow(1, 2), ALL_VALID) == 0.0

    prediction = np.zeros((2, 1, 2))
    prediction[:, 0, 0] = (3, 4)
    assert epe(prediction, np.zeros((2, 1, 2)), np.ones((1, 2), dtype=bool)) == pytest.approx(2.5)


def test_metrics_reject_empty_masks():
    with pytest.raises(EmptyMaskError):
        epe(constant_flow(1, 1), constant_flow(0, 0), np.zeros((3, 3), dtype=bool))
    with pytest.raises(EmptyMaskError):
        f1_all(constant_flow(1, 1), constant_flow(0, 0), np.zeros((3, 3), dtype=bool))


def test_f1_examples():
    assert f1_all(constant_flow(10 + 5, 0), constant_flow(10, 0), ALL_VALID) == 1.0
    assert f1_all(constant_flow(104, 0), constant_flow(100, 0), ALL_VALID) == 0.0
    assert f1_all(constant_flow(2.9, 0), constant_flow(0, 0), ALL_VALID) == 0.0


def test_epe_ignores_invalid_pixels():
    prediction = constant_flow(0, 0)
    prediction[:, 1, 1] = 100.0
    valid = ALL_VALID.copy()
    valid[1, 1] = False
    assert epe(prediction, constant_flow(0, 0), valid) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_epe_and_f1_ignore_pixel_order(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(0, 5, size=(2, 4, 6))
    f_gt = rng.normal(0, 5, size=(2, 4, 6))
    valid = rng.random((4, 6)) < 0.8
    valid[0, 0] = True
    order = rng.permutation(24)

    def shuffle(array):
        return array.reshape(*array.shape[:-2], 24)[..., order].reshape(array.shape)

    assert epe(shuffle(f), shuffle(f_gt), shuffle(valid)) == pytest.approx(epe(f, f_gt, valid), rel=1e-12)
    assert f1_all(shuffle(f), shuffle(f_gt), shuffle(valid)) == f1_all(f, f_gt, valid)


def test_bottleneck_examples():
    assert bottleneck_step([5, 3, 2, 2.005, 2.001, 2.0005], 0.01) == 3
    assert bottleneck_step([10, 8, 6, 4, 2, 0], 0.01) == 6
    assert bottleneck_step([1.0, 1.0, 1.0]) == 1


def test_bottleneck_histogram_sums_to_one_hundred():
    histogram = bottleneck_histogram([[5, 3, 2], [4, 4, 4], [9, 1, 0.5], [3, 2, 1]], 0.01)

    assert histogram.min_steps == [3, 1, 3, 3]
    assert histogram.percent.sum() == pytest.approx(100.0)
    frame = histogram.frame()
    assert list(frame.columns) == ["t", "percent"]
    assert frame["t"].tolist() == [1, 2, 3]


def test_bottleneck_histogram_needs_aligned_sequences():
    with pytest.raises(ContractError):
        bottleneck_histogram([])
    with pytest.raises(ContractError):
        bottleneck_histogram([[1, 2], [1, 2, 3]])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.floats(0, 50), min_size=5, max_size=5), min_size=1, max_size=8),
    st.floats(-20, 20),
    st.randoms(use_true_random=False),
)
def test_bottleneck_histogram_invariances(sequences, shift, random):
    base = bottleneck_histogram(sequences, 0.01)
    shuffled = list(sequences)
    random.shuffle(shuffled)
    np.testing.assert_allclose(bottleneck_histogram(shuffled, 0.01).percent, base.percent)

    # shifting adds rounding noise, so only compare sequences whose gaps are well away from tol
    steps = [bottleneck_step([value + shift for value in sequence], 0.01) for sequence in sequences]
    for sequence, step in zip(sequences, steps):
        gaps = np.abs(np.asarray(sequence) - min(sequence))
        if np.all(np.abs(gaps - 0.01) > 1e-6):
            assert step == bottleneck_step(sequence, 0.01)


def test_rank_difficulty_splits_at_the_median():
    assert rank_difficulty([0.5, 3.0, 0.1, 2.0]) == ["easy", "hard", "easy", "hard"]
    assert rank_difficulty([1.0, 1.0, 1.0]) == ["easy", "hard", "hard"]


def test_upsample_scales_values_and_grid():
    flow = np.stack([np.full((2, 3), 1.5), np.full((2, 3), -0.5)])
    upsampled = upsample_flow(flow, 2)

    assert upsampled.shape == (2, 4, 6)
    np.testing.assert_allclose(upsampled[0], 3.0)
    np.testing.assert_allclose(upsampled[1], -1.0)


@pytest.fixture(scope="module")
def eval_set():
    return [
        make_sample(1, "easy", height=16, width=16, magnitude=2.0),
        make_sample(2, "hard", height=16, width=16, magnitude=3.0, kind="rotation"),
        make_sample(3, "easy", height=16, width=16, magnitude=1.0),
    ]


@pytest.fixture(scope="module")
def model():
    return DynamicFlowModel(seed=4)


def test_evaluate_keeps_order_across_workers(model, eval_set):
    serial = evaluate(model, eval_set, 0.5, t_test=4)
    threaded = evaluate(model, eval_set, 0.5, workers=3, t_test=4)

    assert [result.sample_id for result in threaded] == [0, 1, 2]
    assert [result.epe for result in threaded] == [result.epe for result in serial]
    assert [result.flops_total for result in threaded] == [result.flops_total for result in serial]


def test_full_resolution_error_uses_the_upsampled_flow(eval_set):
    still = DynamicFlowModel(seed=4)
    still.backbone.update_block.head2.weight.data[:] = 0.0
    still.backbone.update_block.head2.bias.data[:] = 0.0
    sample = eval_set[0]

    result = evaluate(still, [sample], 0.5, mode="fixed", t_fixed=2, t_test=2)[0]

    assert result.epe_full == pytest.approx(epe(np.zeros_like(sample.flow_gt), sample.flow_gt, sample.valid))
    report = EvalReport.from_results([result])
    assert list(report.per_sample.columns) == SAMPLE_COLUMNS


def test_step_errors_are_recorded_per_step(model, eval_set):
    results = evaluate(model, eval_set, 0.5, t_test=5, record_steps=True)
    for result in results:
        assert len(result.step_epe) == 5
        assert result.step_epe[-1] == pytest.approx(result.epe)


def test_summary_means_per_group(model, eval_set):
    report = EvalReport.from_results(evaluate(model, eval_set, 0.5, mode="fixed", t_fixed=3))
    summary = report.summary()

    assert list(summary.columns) == REPORT_COLUMNS
    assert summary["group"].tolist() == ["all", "easy", "hard"]
    assert summary["n"].tolist() == [3, 2, 1]
    assert summary.iloc[0]["epe_mean"] == pytest.approx(report.per_sample["epe"].mean())
    assert (summary["updates_mean"] == 3.0).all()


def test_sweep_rows_ascend_and_duplicates_repeat(model, eval_set):
    table = sweep_report(model, eval_set, [1.0, 0.3, 0.3], t_test=4)

    assert table["r"].tolist() == [0.3, 0.3, 1.0]
    pd.testing.assert_series_equal(
        table.iloc[0].drop("r"), table.iloc[1].drop("r"), check_names=False
    )


def test_sweep_at_full_budget_costs_no_more_than_fixed(model, eval_set):
    ledger = FlopsLedger.for_model(model, 16, 16)
    fixed = ledger.encoder + 4 * ledger.update
    table = sweep_report(model, eval_set, [1.0], t_test=4)
    policy_cost = 3 * ledger.policy
    assert table.iloc[0]["flops_mean"] <= fixed + policy_cost


def test_sweep_rejects_empty_and_out_of_range_lists(model, eval_set):
    with pytest.raises(ContractError):
        sweep_report(model, eval_set, [])
    with pytest.raises(ContractError):
        sweep_report(model, eval_set, [1.5])


def test_iteration_allocation_groups(model, eval_set):
    results = evaluate(model, eval_set, 0.5, mode="fixed", t_fixed=4, t_test=4)
    allocation = iteration_allocation(results, 4)

    assert allocation["group"].tolist() == ["all", "easy", "hard"]
    assert (allocation["entered_percent"] == 100.0).all()

    ranked = iteration_allocation(results, 8, labels=["hard", "easy", "hard"])
    assert ranked.set_index("group").loc["hard", "n"] == 2
    assert ranked.set_index("group").loc["all", "entered_percent"] == pytest.approx(50.0)
