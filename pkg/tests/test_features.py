import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resourcenet.data import make_triplet
from resourcenet.features import (EOS, INPUT_DIM, METRICS, PC_A, PC_B, TARGET_DIM, DataError, MetricVector,
                                  Normalizer, as_trace, build_target, completion_channel, eos_feature,
                                  make_example, pcf, stack_inputs)


def labelled(prefix, n, d=1):
    """Rows whose values encode their label, e.g. a3 -> 3, b2 -> 20."""
    scale = 1 if prefix == "a" else 10
    return np.arange(1, n + 1, dtype=float)[:, None] * scale * np.ones((1, d))


def test_stack_same_start():
    a, b = labelled("a", 4), labelled("b", 2)
    out = stack_inputs(a, b, 0, with_pcf=False)
    np.testing.assert_array_equal(out, [[1, 10], [2, 20], [3, 0], [4, 0]])


def test_stack_with_delay():
    out = stack_inputs(labelled("a", 3), labelled("b", 1), 2, with_pcf=False)
    np.testing.assert_array_equal(out, [[1, 0], [2, 0], [3, 10]])


def test_stack_equal_lengths_no_padding():
    out = stack_inputs(labelled("a", 3), labelled("b", 3), 0, with_pcf=False)
    assert np.all(out != 0)


def test_stack_pcf_columns():
    out = stack_inputs(labelled("a", 4, 9), labelled("b", 2, 9), 1)
    assert out.shape == (4, INPUT_DIM)
    np.testing.assert_array_equal(out[:, -2], [25, 50, 75, 100])
    np.testing.assert_array_equal(out[:, -1], [0, 50, 100, 0])


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 12))
def test_stack_length_and_padding(la, lb, delay):
    a, b = labelled("a", la), labelled("b", lb)
    out = stack_inputs(a, b, delay, with_pcf=False)
    assert out.shape[0] == max(la, delay + lb)
    assert not out[la:, 0].any()
    assert not out[:delay, 1].any() and not out[delay + lb:, 1].any()
    np.testing.assert_array_equal(out[delay:delay + lb, 1], b[:, 0])


def test_stack_negative_delay():
    with pytest.raises(ValueError):
        stack_inputs(labelled("a", 2), labelled("b", 2), -1)


def test_pcf_examples():
    np.testing.assert_array_equal(pcf(100), np.arange(1, 101))
    p = pcf(300)
    np.testing.assert_allclose(p[:3], [1 / 3, 2 / 3, 1.0], rtol=1e-15)
    assert p[-1] == 100.0
    np.testing.assert_array_equal(pcf(4), [25, 50, 75, 100])
    with pytest.raises(ValueError):
        pcf(0)


@given(st.integers(1, 5000))
def test_pcf_properties(n):
    p = pcf(n)
    assert p[-1] == 100.0
    assert np.all(np.diff(p) > 0)


def test_eos_examples():
    np.testing.assert_array_equal(eos_feature(3), [0, 0, 1])
    np.testing.assert_array_equal(eos_feature(1), [1])
    assert all(eos_feature(n).sum() == 1 for n in range(1, 20))
    with pytest.raises(ValueError):
        eos_feature(0)


def _ab(T):
    return np.ones((T, 9))


def test_target_examples():
    t = build_target(_ab(4), 4, 4)
    np.testing.assert_array_equal(t[:, PC_A], pcf(4))
    np.testing.assert_array_equal(t[:, PC_B], pcf(4))
    np.testing.assert_array_equal(t[:, EOS], [0, 0, 0, 1])
    t = build_target(_ab(4), 2, 4)
    np.testing.assert_array_equal(t[:, PC_A], [50, 100, 100, 100])
    t = build_target(_ab(1), 1, 1)
    assert t.shape == (1, TARGET_DIM)
    assert (t[0, EOS], t[0, PC_A], t[0, PC_B]) == (1, 100, 100)


def test_target_errors():
    with pytest.raises(DataError):
        build_target(_ab(3), None, 3)
    with pytest.raises(DataError):
        build_target(_ab(3), 4, 3)
    with pytest.raises(DataError):
        completion_channel(0, 3)


@given(st.integers(1, 40), st.data())
def test_target_invariants(T, data):
    ca = data.draw(st.integers(1, T))
    cb = data.draw(st.integers(1, T))
    t = build_target(_ab(T), ca, cb)
    for ch in (PC_A, PC_B):
        assert np.all(np.diff(t[:, ch]) >= 0)
        assert t[:, ch].max() == 100.0
    assert t[-1, EOS] == 1 and t[:, EOS].sum() == 1
    assert t[ca - 1, PC_A] == 100.0


def test_metric_vector():
    v = MetricVector(cpu=10, ram=5)
    assert v.to_array().shape == (9,)
    assert MetricVector.from_array(v.to_array()) == v
    with pytest.raises(ValueError):
        MetricVector(cpu=-1)
    with pytest.raises(DataError):
        as_trace(np.zeros((0, 9)))
    with pytest.raises(DataError):
        as_trace(np.zeros((3, 8)))


def test_normalizer_examples():
    lo, hi = np.zeros(9), np.full(9, 200.0)
    hi[3] = 0.0  # constant feature
    norm = Normalizer(lo, hi)
    row = np.full((1, 9), 50.0)
    out = norm.apply(row)
    assert out[0, 0] == 0.25
    assert out[0, 3] == 0.0
    with pytest.raises(ValueError):
        Normalizer.fit([])
    with pytest.raises(ValueError):
        Normalizer(np.ones(9), np.zeros(9))


@given(st.integers(0, 10_000))
def test_normalizer_roundtrip(seed):
    rng = np.random.default_rng(seed)
    traces = [rng.uniform(0, 10 ** rng.uniform(0, 10), size=(rng.integers(1, 8), 9)) for _ in range(3)]
    norm = Normalizer.fit(traces)
    for t in traces:
        z = norm.apply(t)
        assert np.all((z >= 0) & (z <= 1))
        np.testing.assert_allclose(norm.invert(z), t, rtol=1e-9, atol=1e-9 * norm.span.max())
    back = Normalizer.from_dict(norm.to_dict())
    np.testing.assert_array_equal(back.lo, norm.lo)
    np.testing.assert_array_equal(back.hi, norm.hi)


def test_target_scaling():
    norm = Normalizer(np.zeros(9), np.full(9, 2.0))
    raw = build_target(np.ones((4, 9)), 2, 4)
    scaled = norm.apply_target(raw)
    np.testing.assert_array_equal(scaled[:, :9], 0.5)
    np.testing.assert_array_equal(scaled[:, PC_A], [0.5, 1, 1, 1])
    np.testing.assert_array_equal(scaled[:, EOS], raw[:, EOS])
    np.testing.assert_allclose(norm.invert_target(scaled), raw, rtol=1e-15)


def test_make_example_in_unit_range():
    rng = np.random.default_rng(0)
    a = rng.uniform(1, 50, size=(6, 9))
    b = rng.uniform(1, 50, size=(4, 9))
    t = make_triplet("a", a, "b", b, 0.5)
    norm = Normalizer.fit([t.a, t.b, t.colocated])
    ex = make_example(t, norm)
    assert ex.inputs.shape == (7, INPUT_DIM)  # max(6, 3 + 4)
    assert ex.target.shape == (t.colocated.shape[0], TARGET_DIM)
    assert np.all((ex.inputs >= 0) & (ex.inputs <= 1))
    assert np.all((ex.target >= 0) & (ex.target <= 1 + 1e-12))
    assert ex.x == 6 and ex.delay == 3
    assert len(METRICS) == 9
