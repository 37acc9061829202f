"""Tests for the baseline quantizers and the evaluation metrics."""
from __future__ import annotations

import math

import numpy as np
import pytest

from kvqbench.baselines import topk_mixed, uniform4
from kvqbench.errors import ConfigError
from kvqbench.metrics import (
    ATTENTION_HEADS,
    ATTENTION_HEAD_DIM,
    ATTENTION_TOKENS,
    CellMetrics,
    evaluate_trace,
    max_abs_err,
    mse,
    outlier_fraction,
    sqnr_db,
    toy_attention_delta,
)
from kvqbench.profiler import profile
from kvqbench.quant import GroupLabel
from kvqbench.trace import KvKind, SyntheticSpec, generate_synthetic_trace


def fp16_grid(values) -> np.ndarray:
    return np.asarray(np.float16(values), dtype=np.float64)


# ---------------------------------------------------------------------------
# uniform4
# ---------------------------------------------------------------------------


def test_uniform4_worked_example():
    result = uniform4(np.array([0.0, 0.4, 1.0, 0.6]))
    # range [0, 1], sigma 15: codes 0, 6, 15, 9
    assert result.values == pytest.approx([0.0, 0.4, 1.0, 0.6], rel=1e-12)
    assert result.total_bits == 4 * 4 + 32
    assert result.effective_bits == 12.0
    assert not result.exact_mask.any()


def test_uniform4_error_bound():
    rng = np.random.default_rng(7)
    x = fp16_grid(rng.standard_normal(256))
    result = uniform4(x)
    lo = float(np.float32(np.float16(x.min())))
    hi = float(np.float32(np.float16(x.max())))
    bound = 0.5 * (hi - lo) / 15 + np.spacing(np.float32(max(abs(lo), abs(hi))))
    assert np.max(np.abs(result.values - x)) <= bound


def test_uniform4_constant_vector():
    result = uniform4(np.full(64, 2.5))
    assert np.all(result.values == 2.5)
    assert result.total_bits == 4 * 64 + 32


# ---------------------------------------------------------------------------
# topk_mixed
# ---------------------------------------------------------------------------


def test_topk_worked_example():
    x = np.array([10.0, -8.0, 0.5, 0.3, 0.1, -0.2, 0.05, -0.02])
    result = topk_mixed(x, keep_fraction=0.25)
    assert list(result.exact_mask) == [True, True] + [False] * 6
    assert result.values[0] == 10.0
    assert result.values[1] == -8.0
    assert result.total_bits == 23 * 2 + 4 * 6 + 32
    # inliers quantized against their own [-0.2, 0.5] range
    inliers = x[2:]
    assert np.max(np.abs(result.values[2:] - inliers)) <= 0.5 * 0.7 / 15 + 1e-4


def test_topk_kept_positions_are_lossless():
    rng = np.random.default_rng(11)
    x = fp16_grid(rng.standard_normal(512) * 4)
    result = topk_mixed(x, keep_fraction=0.1)
    assert result.exact_mask.sum() == 51  # round(0.1 * 512)
    assert np.all(result.values[result.exact_mask] == x[result.exact_mask])


def test_topk_tie_keeps_lower_index():
    result = topk_mixed(np.array([1.0, -1.0, 1.0, 0.1]), keep_fraction=0.5)
    assert list(result.exact_mask) == [True, True, False, False]


def test_topk_extreme_fractions():
    rng = np.random.default_rng(3)
    x = fp16_grid(rng.standard_normal(64))
    none_kept = topk_mixed(x, keep_fraction=0.0)
    base = uniform4(x)
    assert np.array_equal(none_kept.values, base.values)
    assert none_kept.total_bits == base.total_bits
    all_kept = topk_mixed(x, keep_fraction=1.0)
    assert np.array_equal(all_kept.values, x)
    assert all_kept.total_bits == 23 * 64 + 32


def test_baseline_validation():
    with pytest.raises(ConfigError):
        uniform4(np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        uniform4(np.array([1.0, np.nan]))
    with pytest.raises(ConfigError):
        uniform4(np.array([]))
    with pytest.raises(ConfigError):
        topk_mixed(np.ones(8), keep_fraction=1.5)


# ---------------------------------------------------------------------------
# Elementwise metrics
# ---------------------------------------------------------------------------


def test_elementwise_worked_example():
    x = np.array([3.0, 4.0])
    x_hat = np.array([3.0, 5.0])
    assert mse(x, x_hat) == 0.5
    assert max_abs_err(x, x_hat) == 1.0
    assert sqnr_db(x, x_hat) == pytest.approx(10 * math.log10(25.0), rel=1e-12)


def test_sqnr_guards():
    x = np.array([1.0, 2.0])
    assert sqnr_db(x, x) == math.inf
    assert sqnr_db(np.zeros(2), np.array([0.0, 0.1])) == -math.inf


def test_outlier_fraction_counts_all_three_sparse_groups():
    labels = np.array(
        [
            GroupLabel.OUTER_LOW,
            GroupLabel.MIDDLE_LOW,
            GroupLabel.INNER,
            GroupLabel.MIDDLE_HIGH,
            GroupLabel.OUTER_HIGH,
        ],
        dtype=np.int8,
    )
    assert outlier_fraction(labels) == pytest.approx(3 / 5)


def test_cell_metrics_validation():
    kwargs = dict(
        layer=0,
        kind="key",
        method="oaken",
        mse=0.1,
        max_abs_err=0.5,
        sqnr_db=20.0,
        outlier_fraction=0.1,
        effective_bits=4.8,
    )
    CellMetrics(**kwargs)
    with pytest.raises(ConfigError):
        CellMetrics(**{**kwargs, "mse": math.inf})
    with pytest.raises(ConfigError):
        CellMetrics(**{**kwargs, "outlier_fraction": 1.5})


# ---------------------------------------------------------------------------
# Toy attention sensitivity
# ---------------------------------------------------------------------------


def _attention_block(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    width = ATTENTION_HEADS * ATTENTION_HEAD_DIM
    return rng.standard_normal((ATTENTION_TOKENS, width))


def test_attention_identity_is_zero():
    k = _attention_block(0)
    v = _attention_block(1)
    check = toy_attention_delta(k, k.copy(), v, v.copy())
    assert check.score_delta == 0.0
    assert check.output_delta == 0.0


def test_attention_key_perturbation_moves_scores():
    k = _attention_block(0)
    v = _attention_block(1)
    k_hat = k.copy()
    k_hat[5, :64] += 3.0
    check = toy_attention_delta(k, k_hat, v, v)
    assert check.score_delta > 0.0
    assert check.output_delta > 0.0
    again = toy_attention_delta(k, k_hat, v, v)
    assert again == check  # fixed query seed


def test_attention_value_perturbation_moves_only_outputs():
    k = _attention_block(0)
    v = _attention_block(1)
    v_hat = v.copy()
    v_hat[17] += 1.0
    check = toy_attention_delta(k, k, v, v_hat)
    assert check.score_delta == 0.0
    assert check.output_delta > 0.0


def test_attention_shape_validation():
    k = _attention_block(0)
    with pytest.raises(ConfigError):
        toy_attention_delta(k, k, k[:64], k[:64])


# ---------------------------------------------------------------------------
# Trace evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_setup():
    spec = SyntheticSpec(
        num_layers=2,
        num_kv_heads=8,
        head_dim=64,
        num_tokens=130,
        outlier_channels=(3, 100, 297),
        outlier_multiplier=8.0,
    )
    trace = generate_synthetic_trace(spec, seed=42)
    return trace, profile(trace, runs=2)


def test_evaluate_trace_rows(eval_setup):
    trace, prof = eval_setup
    report = evaluate_trace(trace, prof)
    assert len(report.cells) == 2 * 2 * 3
    assert report.trace_digest == trace.content_digest()
    keys = {(r.layer, r.kind, r.method) for r in report.cells}
    assert (0, "key", "oaken") in keys
    assert (1, "value", "topk_mixed") in keys

    u4 = report.cell(0, "key", "uniform4")
    assert u4.effective_bits == 4 + 32 / 512
    assert u4.outlier_fraction == 0.0
    tk = report.cell(0, "key", "topk_mixed")
    assert tk.effective_bits == (23 * 51 + 4 * 461 + 32) / 512
    grouped = report.cell(0, "key", "oaken")
    assert 4.5 < grouped.effective_bits < 5.5
    assert 0.0 < grouped.outlier_fraction < 0.25


def test_evaluate_trace_grouped_beats_uniform(eval_setup):
    trace, prof = eval_setup
    report = evaluate_trace(trace, prof)
    wins = 0
    cells = [(layer, kind.value) for layer, kind in trace.cells()]
    for layer, kind in cells:
        if (
            report.cell(layer, kind, "oaken").mse
            <= report.cell(layer, kind, "uniform4").mse
        ):
            wins += 1
    # magnified channels stretch the single uniform range
    assert wins >= len(cells) - 1
    assert report.cell(0, "key", "topk_mixed").max_abs_err < report.cell(
        0, "key", "uniform4"
    ).max_abs_err


def test_evaluate_trace_attention_sensitivity(eval_setup):
    trace, prof = eval_setup
    report = evaluate_trace(trace, prof)
    assert set(report.attention) == {"oaken", "uniform4", "topk_mixed"}
    for check in report.attention.values():
        assert math.isfinite(check.score_delta)
        assert check.score_delta >= 0.0
    assert (
        report.attention["oaken"].score_delta
        < report.attention["uniform4"].score_delta
    )


def test_evaluate_trace_skips_attention_on_small_traces():
    spec = SyntheticSpec(
        num_layers=1, num_kv_heads=2, head_dim=64, num_tokens=16
    )
    trace = generate_synthetic_trace(spec, seed=1)
    report = evaluate_trace(trace, profile(trace, runs=2))
    assert report.attention == {}
    assert len(report.cells) == 1 * 2 * 3


def test_report_cell_lookup_missing(eval_setup):
    trace, prof = eval_setup
    report = evaluate_trace(trace, prof)
    with pytest.raises(KeyError):
        report.cell(9, "key", "oaken")
