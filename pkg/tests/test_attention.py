import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semimpute.attention import (
    AttentionParams,
    attention_forward,
    init_params,
    refine,
    softmax_rows,
)
from semimpute.dataset import Dataset, VariableSpec
from semimpute.errors import InputError

MASK64 = (1 << 64) - 1

# e / (1 + e) to full double precision, checked against mpmath once.
SIGMOID_1 = 0.7310585786300049


def _reference_uniform_stream(seed, count, lo, hi):
    """Transcription of the SplitMix64 + 53-bit-float uniform draw."""
    state = seed & MASK64
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        u = z ^ (z >> 31)
        f = (u >> 11) * (1.0 / (1 << 53))
        out.append(lo + (hi - lo) * f)
    return np.array(out)


def test_softmax_two_entry_oracle():
    got = softmax_rows(np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(
        got, [[1.0 - SIGMOID_1, SIGMOID_1]], rtol=0, atol=1e-15
    )


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 9)) * 30.0
    a = softmax_rows(z)
    np.testing.assert_allclose(a.sum(axis=1), np.ones(6), atol=1e-12)
    assert (a > 0).all()
    shifted = softmax_rows(z + 123.456)
    np.testing.assert_allclose(a, shifted, atol=1e-12)


def test_softmax_handles_large_magnitudes():
    a = softmax_rows(np.array([[1000.0, 1001.0], [-1000.0, -999.0]]))
    assert np.isfinite(a).all()
    np.testing.assert_allclose(a[0], a[1], atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(InputError):
        softmax_rows(np.array([[0.0, np.inf]]))
    with pytest.raises(InputError):
        softmax_rows(np.array([[np.nan, 0.0]]))


def test_forward_two_row_worked_example():
    # x = [[0], [1]] with identity projections: scores are [[0,0],[0,1]],
    # so row 0 averages and row 1 weights by softmax([0, 1]).
    x = np.array([[0.0], [1.0]])
    p = AttentionParams(wq=np.eye(1), wk=np.eye(1), wv=np.eye(1))
    output, weights = attention_forward(x, p)
    np.testing.assert_allclose(
        weights,
        [[0.5, 0.5], [1.0 - SIGMOID_1, SIGMOID_1]],
        atol=1e-15,
    )
    np.testing.assert_allclose(output, [[0.5], [SIGMOID_1]], atol=1e-15)


def test_forward_weights_are_row_stochastic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 5))
    p = init_params(5, seed=11)
    output, weights = attention_forward(x, p)
    assert weights.shape == (40, 40)
    np.testing.assert_allclose(weights.sum(axis=1), np.ones(40), atol=1e-10)
    assert output.shape == x.shape


def test_forward_output_inside_value_hull():
    # Each output row is a convex combination of the value-projected rows.
    rng = np.random.default_rng(4)
    x = rng.normal(size=(25, 4))
    p = init_params(4, seed=2)
    output, _ = attention_forward(x, p)
    v = x @ p.wv
    lo = v.min(axis=0) - 1e-12
    hi = v.max(axis=0) + 1e-12
    assert (output >= lo).all() and (output <= hi).all()


def test_forward_is_row_permutation_equivariant():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(17, 3))
    p = init_params(3, seed=8)
    perm = rng.permutation(17)
    base, _ = attention_forward(x, p)
    permuted, _ = attention_forward(x[perm], p)
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_forward_blocked_rows_match_unblocked():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(23, 4))
    p = init_params(4, seed=1)
    full_out, full_w = attention_forward(x, p)
    block_out, block_w = attention_forward(x, p, block_rows=7)
    np.testing.assert_array_equal(full_out, block_out)
    np.testing.assert_array_equal(full_w, block_w)


def test_forward_rejects_mismatched_width():
    p = init_params(3, seed=0)
    with pytest.raises(InputError):
        attention_forward(np.zeros((4, 2)), p)


@given(
    hnp.arrays(
        np.float64,
        st.tuples(st.integers(2, 8), st.integers(1, 4)),
        elements=st.floats(-50, 50),
    )
)
@settings(max_examples=40, deadline=None)
def test_forward_output_always_finite(x):
    p = init_params(x.shape[1], seed=13)
    output, weights = attention_forward(x, p)
    assert np.isfinite(output).all()
    assert np.isfinite(weights).all()


def test_init_matches_reference_draw_order():
    d, k, seed = 3, 2, 42
    bound = 1.0 / np.sqrt(d)
    stream = _reference_uniform_stream(seed, d * k + d * k + d * d, -bound, bound)
    p = init_params(d, seed, k=k)
    np.testing.assert_array_equal(p.wq, stream[: d * k].reshape(d, k))
    np.testing.assert_array_equal(p.wk, stream[d * k : 2 * d * k].reshape(d, k))
    np.testing.assert_array_equal(p.wv, stream[2 * d * k :].reshape(d, d))


def test_init_defaults_k_to_d_and_respects_bound():
    p = init_params(4, seed=0)
    assert p.wq.shape == (4, 4) and p.wk.shape == (4, 4) and p.wv.shape == (4, 4)
    bound = 0.5
    for m in (p.wq, p.wk, p.wv):
        assert (np.abs(m) <= bound).all()
    assert p.d == 4 and p.dk == 4


def test_init_is_deterministic_per_seed():
    a = init_params(5, seed=77)
    b = init_params(5, seed=77)
    c = init_params(5, seed=78)
    np.testing.assert_array_equal(a.wq, b.wq)
    np.testing.assert_array_equal(a.wv, b.wv)
    assert not np.array_equal(a.wq, c.wq)


def test_init_rejects_bad_d():
    with pytest.raises(InputError):
        init_params(0, seed=0)


def test_params_validate_shapes():
    with pytest.raises(InputError):
        AttentionParams(wq=np.zeros((3, 2)), wk=np.zeros((3, 3)), wv=np.zeros((3, 3)))
    with pytest.raises(InputError):
        AttentionParams(wq=np.zeros((3, 2)), wk=np.zeros((3, 2)), wv=np.zeros((3, 2)))
    with pytest.raises(InputError):
        AttentionParams(wq=np.zeros((3, 0)), wk=np.zeros((3, 0)), wv=np.zeros((3, 3)))


def _filled_dataset(values):
    values = np.asarray(values, dtype=np.float64)
    return Dataset(
        values=values,
        mask=np.ones_like(values, dtype=bool),
        specs=tuple(
            VariableSpec(f"v{j}", "continuous") for j in range(values.shape[1])
        ),
    )


def test_refine_keeps_observed_cells_bit_identical():
    rng = np.random.default_rng(9)
    values = rng.normal(size=(30, 3))
    ds = _filled_dataset(values)
    provenance = np.zeros((30, 3), dtype=bool)
    provenance[::4, 1] = True
    p = init_params(3, seed=21)
    refined = refine(ds, p, provenance)
    same = refined.values[~provenance] == values[~provenance]
    assert same.all()
    output, _ = attention_forward(values, p)
    np.testing.assert_array_equal(refined.values[provenance], output[provenance])


def test_refine_rejects_shape_mismatch():
    ds = _filled_dataset(np.zeros((4, 2)))
    p = init_params(2, seed=0)
    with pytest.raises(InputError):
        refine(ds, p, np.zeros((3, 2), dtype=bool))
