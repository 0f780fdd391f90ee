"""Reference-weighted attention merge, checked against a loop-based oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest

from sgscore.attnmerge import (
    KernelShapeError,
    MergeInputs,
    attention,
    kernel_self_check,
    merged_attention,
    row_softmax,
)


def oracle_attention(query, keys, values):
    """Plain-loop scaled dot-product attention; no vectorized shortcuts."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    n, d = q.shape
    m = k.shape[0]
    out = np.zeros((n, v.shape[1]), dtype=np.float64)
    for i in range(n):
        logits = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(m)]
        top = max(logits)
        weights = [math.exp(val - top) for val in logits]
        total = sum(weights)
        for j in range(m):
            w = weights[j] / total
            for c in range(v.shape[1]):
                out[i, c] += w * v[j, c]
    return out


def oracle_merged(inputs: MergeInputs):
    base = oracle_attention(inputs.query, inputs.prompt_keys, inputs.prompt_values)
    term0 = oracle_attention(inputs.query, inputs.i0_keys, inputs.i0_values)
    term1 = oracle_attention(inputs.query, inputs.i1_keys, inputs.i1_values)
    return base + inputs.lambda0 * term0 + inputs.lambda1 * term1


def build_inputs(rng, n=4, d=4, d_v=3, m_p=5, m_0=3, m_1=2, lambda0=0.5, lambda1=0.5):
    def mat(rows, cols):
        return rng.standard_normal((rows, cols))

    return MergeInputs(
        query=mat(n, d),
        prompt_keys=mat(m_p, d),
        prompt_values=mat(m_p, d_v),
        i0_keys=mat(m_0, d),
        i0_values=mat(m_0, d_v),
        i1_keys=mat(m_1, d),
        i1_values=mat(m_1, d_v),
        lambda0=lambda0,
        lambda1=lambda1,
    )


def test_attention_matches_oracle_small_shapes():
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        d = int(rng.integers(1, 9))
        d_v = int(rng.integers(1, 9))
        q = rng.standard_normal((n, d))
        k = rng.standard_normal((m, d))
        v = rng.standard_normal((m, d_v))
        got = attention(q, k, v)
        want = oracle_attention(q, k, v)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_merged_matches_oracle_small_shapes():
    rng = np.random.default_rng(11)
    for _ in range(30):
        inputs = build_inputs(
            rng,
            n=int(rng.integers(1, 9)),
            d=int(rng.integers(1, 9)),
            d_v=int(rng.integers(1, 9)),
            m_p=int(rng.integers(1, 9)),
            m_0=int(rng.integers(1, 9)),
            m_1=int(rng.integers(1, 9)),
            lambda0=float(rng.uniform(0, 2)),
            lambda1=float(rng.uniform(0, 2)),
        )
        got = merged_attention(inputs)
        want = oracle_merged(inputs)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_single_key_returns_value_row():
    q = np.array([[3.0, -1.0]])
    k = np.array([[0.5, 0.5]])
    v = np.array([[7.0, 8.0, 9.0]])
    assert np.array_equal(attention(q, k, v), v)


def test_zero_query_averages_values():
    q = np.zeros((2, 3))
    k = np.arange(12.0).reshape(4, 3)
    v = np.arange(8.0).reshape(4, 2)
    got = attention(q, k, v)
    want = np.tile(v.mean(axis=0), (2, 1))
    assert np.max(np.abs(got - want)) <= 1e-12


def test_row_softmax_sums_to_one():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((6, 5)) * 50
    probs = row_softmax(logits)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9
    assert np.all(probs >= 0)


def test_row_softmax_shift_invariant():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((3, 4))
    shifted = logits + 1000.0
    assert np.max(np.abs(row_softmax(logits) - row_softmax(shifted))) <= 1e-12


def test_row_softmax_handles_large_logits():
    logits = np.array([[1000.0, 1000.0, -1000.0]])
    probs = row_softmax(logits)
    assert np.isfinite(probs).all()
    assert probs[0, 0] == pytest.approx(0.5)


def test_zero_weights_bit_exact():
    rng = np.random.default_rng(5)
    inputs = build_inputs(rng, lambda0=0.0, lambda1=0.0)
    merged = merged_attention(inputs)
    base = attention(inputs.query, inputs.prompt_keys, inputs.prompt_values)
    assert np.array_equal(merged, base)


def test_single_zero_weight_drops_that_term():
    rng = np.random.default_rng(6)
    inputs = build_inputs(rng, lambda0=0.0, lambda1=0.75)
    base = attention(inputs.query, inputs.prompt_keys, inputs.prompt_values)
    term1 = attention(inputs.query, inputs.i1_keys, inputs.i1_values)
    assert np.array_equal(merged_attention(inputs), base + 0.75 * term1)


def test_merged_is_affine_in_weights():
    rng = np.random.default_rng(8)
    base_inputs = build_inputs(rng, lambda0=0.0, lambda1=0.0)

    def with_weights(l0, l1):
        return MergeInputs(
            query=base_inputs.query,
            prompt_keys=base_inputs.prompt_keys,
            prompt_values=base_inputs.prompt_values,
            i0_keys=base_inputs.i0_keys,
            i0_values=base_inputs.i0_values,
            i1_keys=base_inputs.i1_keys,
            i1_values=base_inputs.i1_values,
            lambda0=l0,
            lambda1=l1,
        )

    z00 = merged_attention(with_weights(0.0, 0.0))
    z10 = merged_attention(with_weights(1.0, 0.0))
    z01 = merged_attention(with_weights(0.0, 1.0))
    z_mix = merged_attention(with_weights(0.3, 0.9))
    want = z00 + 0.3 * (z10 - z00) + 0.9 * (z01 - z00)
    assert np.max(np.abs(z_mix - want)) <= 1e-12


def test_weight_gradient_matches_finite_difference():
    rng = np.random.default_rng(9)
    inputs = build_inputs(rng, lambda0=0.5, lambda1=0.5)
    # The merge is affine in lambda0, so dZ/dlambda0 is the i0 attention term.
    analytic = attention(inputs.query, inputs.i0_keys, inputs.i0_values)
    eps = 1e-5

    def at(l0):
        return merged_attention(
            MergeInputs(
                query=inputs.query,
                prompt_keys=inputs.prompt_keys,
                prompt_values=inputs.prompt_values,
                i0_keys=inputs.i0_keys,
                i0_values=inputs.i0_values,
                i1_keys=inputs.i1_keys,
                i1_values=inputs.i1_values,
                lambda0=l0,
                lambda1=inputs.lambda1,
            )
        )

    numeric = (at(0.5 + eps) - at(0.5 - eps)) / (2 * eps)
    scale = np.maximum(np.abs(analytic), 1.0)
    assert np.max(np.abs(numeric - analytic) / scale) <= 1e-6


def test_merged_output_shape():
    rng = np.random.default_rng(10)
    inputs = build_inputs(rng, n=6, d_v=4)
    assert merged_attention(inputs).shape == (6, 4)
    assert merged_attention(inputs).dtype == np.float64


@pytest.mark.parametrize(
    "mutation",
    [
        {"query": np.zeros((0, 4))},
        {"query": np.zeros(4)},
        {"prompt_keys": np.zeros((5, 3))},
        {"prompt_values": np.zeros((4, 3))},
        {"i1_values": np.zeros((2, 99))},
        {"lambda0": -0.1},
        {"lambda1": float("nan")},
    ],
)
def test_shape_and_weight_validation(mutation):
    rng = np.random.default_rng(12)
    fields = dict(
        query=rng.standard_normal((4, 4)),
        prompt_keys=rng.standard_normal((5, 4)),
        prompt_values=rng.standard_normal((5, 3)),
        i0_keys=rng.standard_normal((3, 4)),
        i0_values=rng.standard_normal((3, 3)),
        i1_keys=rng.standard_normal((2, 4)),
        i1_values=rng.standard_normal((2, 3)),
        lambda0=0.5,
        lambda1=0.5,
    )
    fields.update(mutation)
    with pytest.raises(KernelShapeError):
        MergeInputs(**fields)


def test_attention_rejects_nonfinite():
    with pytest.raises(KernelShapeError):
        attention(np.array([[float("inf")]]), np.ones((1, 1)), np.ones((1, 1)))


def test_kernel_self_check_passes():
    report = kernel_self_check(seed=0)
    assert report["ok"] is True
    assert report["zero_weight_bit_exact"] is True
    for key in ("attention_abs_err", "merged_abs_err", "softmax_rowsum_abs_err"):
        assert report[key] <= report["tolerance"]


def test_kernel_self_check_deterministic():
    assert kernel_self_check(seed=123) == kernel_self_check(seed=123)
