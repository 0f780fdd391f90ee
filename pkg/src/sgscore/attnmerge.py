"""Reference kernel for attention merged over prompt and two image streams.

The merged output for a query block Q is

    Z = Attn(Q, K_p, V_p) + l0 * Attn(Q, K_i0, V_i0) + l1 * Attn(Q, K_i1, V_i1)

where (K_p, V_p) come from the text prompt and the other two pairs from
the previous image and the reference image.  All math is float64 numpy;
this module is the ground truth the tests compare against naive loop
implementations, and the semantics a generation backend must honor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class KernelShapeError(ValueError):
    """Raised when query/key/value arrays cannot be combined."""


def _as_matrix(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise KernelShapeError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.size == 0:
        raise KernelShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise KernelShapeError(f"{name} must contain only finite values")
    return arr


def row_softmax(x) -> np.ndarray:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    arr = np.asarray(x, dtype=np.float64)
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def attention(query, keys, values) -> np.ndarray:
    """Scaled dot-product attention softmax(QK^T / sqrt(d)) V.

    query is (n, d), keys is (m, d), values is (m, d_v); the result is
    (n, d_v).  Scores are scaled by 1/sqrt(d) before the softmax.
    """
    q = _as_matrix("query", query)
    k = _as_matrix("keys", keys)
    v = _as_matrix("values", values)
    if q.shape[1] != k.shape[1]:
        raise KernelShapeError(
            f"query dim {q.shape[1]} does not match key dim {k.shape[1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise KernelShapeError(f"{k.shape[0]} keys paired with {v.shape[0]} values")
    scale = 1.0 / math.sqrt(q.shape[1])
    return row_softmax(q @ k.T * scale) @ v


@dataclass(frozen=True)
class MergeInputs:
    """Query plus key/value pairs for the prompt and two image streams."""

    query: np.ndarray
    prompt_keys: np.ndarray
    prompt_values: np.ndarray
    i0_keys: np.ndarray
    i0_values: np.ndarray
    i1_keys: np.ndarray
    i1_values: np.ndarray
    lambda0: float = 0.5
    lambda1: float = 0.5

    def __post_init__(self) -> None:
        q = _as_matrix("query", self.query)
        d = q.shape[1]
        dv = None
        for name, keys, values in (
            ("prompt", self.prompt_keys, self.prompt_values),
            ("i0", self.i0_keys, self.i0_values),
            ("i1", self.i1_keys, self.i1_values),
        ):
            k = _as_matrix(f"{name}_keys", keys)
            v = _as_matrix(f"{name}_values", values)
            if k.shape[1] != d:
                raise KernelShapeError(
                    f"{name}_keys dim {k.shape[1]} does not match query dim {d}"
                )
            if k.shape[0] != v.shape[0]:
                raise KernelShapeError(
                    f"{name}: {k.shape[0]} keys paired with {v.shape[0]} values"
                )
            if dv is None:
                dv = v.shape[1]
            elif v.shape[1] != dv:
                raise KernelShapeError(
                    f"{name}_values dim {v.shape[1]} does not match prompt dim {dv}"
                )
        for name, weight in (("lambda0", self.lambda0), ("lambda1", self.lambda1)):
            if not math.isfinite(weight) or weight < 0:
                raise KernelShapeError(f"{name} must be finite and >= 0, got {weight}")


def merged_attention(inputs: MergeInputs) -> np.ndarray:
    """Prompt attention plus weighted attention over both image streams.

    Zero-weight streams are skipped entirely, so with lambda0 = lambda1 = 0
    the result is bit-identical to plain prompt attention.
    """
    out = attention(inputs.query, inputs.prompt_keys, inputs.prompt_values)
    if inputs.lambda0 != 0.0:
        out = out + inputs.lambda0 * attention(
            inputs.query, inputs.i0_keys, inputs.i0_values
        )
    if inputs.lambda1 != 0.0:
        out = out + inputs.lambda1 * attention(
            inputs.query, inputs.i1_keys, inputs.i1_values
        )
    return out


def kernel_self_check(seed: int = 0) -> dict:
    """Compare the vectorised kernel against naive per-element loops.

    Returns a report with the worst absolute deviations; ``ok`` is True
    when every check is within 1e-9 and the zero-weight merge is
    bit-identical to plain attention.
    """
    rng = np.random.default_rng(seed)
    n, m, d, dv = 5, 7, 4, 3
    q = rng.standard_normal((n, d))
    k = rng.standard_normal((m, d))
    v = rng.standard_normal((m, dv))

    attn_err = float(np.max(np.abs(attention(q, k, v) - _naive_attention(q, k, v))))

    # Adding a per-row constant to the logits must not move the softmax.
    logits = rng.standard_normal((n, m)) * 10.0
    shift = rng.standard_normal((n, 1)) * 100.0
    shift_err = float(np.max(np.abs(row_softmax(logits + shift) - row_softmax(logits))))

    inputs = MergeInputs(
        query=q,
        prompt_keys=k,
        prompt_values=v,
        i0_keys=rng.standard_normal((6, d)),
        i0_values=rng.standard_normal((6, dv)),
        i1_keys=rng.standard_normal((4, d)),
        i1_values=rng.standard_normal((4, dv)),
        lambda0=0.5,
        lambda1=0.25,
    )
    want_merged = (
        _naive_attention(q, k, v)
        + inputs.lambda0 * _naive_attention(q, inputs.i0_keys, inputs.i0_values)
        + inputs.lambda1 * _naive_attention(q, inputs.i1_keys, inputs.i1_values)
    )
    merge_err = float(np.max(np.abs(merged_attention(inputs) - want_merged)))

    zero = MergeInputs(
        query=q,
        prompt_keys=k,
        prompt_values=v,
        i0_keys=inputs.i0_keys,
        i0_values=inputs.i0_values,
        i1_keys=inputs.i1_keys,
        i1_values=inputs.i1_values,
        lambda0=0.0,
        lambda1=0.0,
    )
    zero_exact = bool(np.array_equal(merged_attention(zero), attention(q, k, v)))

    rows = row_softmax(rng.standard_normal((n, m)) * 50.0)
    rowsum_err = float(np.max(np.abs(rows.sum(axis=-1) - 1.0)))

    tol = 1e-9
    report = {
        "attention_abs_err": attn_err,
        "softmax_shift_abs_err": shift_err,
        "merged_abs_err": merge_err,
        "softmax_rowsum_abs_err": rowsum_err,
        "zero_weight_bit_exact": zero_exact,
        "tolerance": tol,
        "seed": seed,
    }
    report["ok"] = (
        attn_err <= tol
        and shift_err <= tol
        and merge_err <= tol
        and rowsum_err <= tol
        and zero_exact
    )
    return report


def _naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Loop form of scaled dot-product attention, for self-checks."""
    n, d = q.shape
    m, dv = v.shape
    out = np.zeros((n, dv))
    for i in range(n):
        scores = np.empty(m)
        for j in range(m):
            scores[j] = float(np.dot(q[i], k[j])) / math.sqrt(d)
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        for j in range(m):
            out[i] += weights[j] * v[j]
    return out
