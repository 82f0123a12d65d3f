import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from hexform.errors import DidNotConverge, InvalidSpec
from hexform.estimator import (
    SoftmaxEstimator, cubic_mass, estimate_softmax, estimator_mse, train_estimator,
)
from hexform.tensor import Tensor, op_trace

rows16 = hnp.arrays(np.float64, (16,), elements=st.floats(-3, 3, allow_subnormal=False))


def test_cubic_mass_oracle():
    x = np.array([2.0, 2.0])
    assert cubic_mass(Tensor(x)).item() == 16.0
    # below -2 the cube is negative and ReLU clips it
    assert cubic_mass(Tensor(np.array([-4.0, 0.0]))).item() == 1.0


def test_equal_entries_get_equal_outputs(quick_estimator):
    est = SoftmaxEstimator.init(2, 0)
    out = estimate_softmax(Tensor(np.array([2.0, 2.0])), est).data
    assert out[0] == out[1]
    ref = 2.0 * est.reciprocal(Tensor(np.array([[16.0]]))).item()
    assert out[0] == pytest.approx(ref, rel=1e-15)


@given(steps=hnp.arrays(np.int64, (16,), elements=st.integers(-12, 12)), perm=st.permutations(range(16)))
def test_permutation_equivariance_exact_on_dyadic_rows(steps, perm, quick_estimator):
    # multiples of 1/4 make every cube exact, so the row sum is order-free
    row = steps / 4.0
    perm = np.array(perm)
    a = estimate_softmax(Tensor(row[perm]), quick_estimator).data
    b = estimate_softmax(Tensor(row), quick_estimator).data[perm]
    np.testing.assert_array_equal(a, b)


@given(row=rows16, perm=st.permutations(range(16)))
def test_permutation_equivariance_to_rounding(row, perm, quick_estimator):
    perm = np.array(perm)
    a = estimate_softmax(Tensor(row[perm]), quick_estimator).data
    b = estimate_softmax(Tensor(row), quick_estimator).data[perm]
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


@given(row=rows16)
def test_output_is_row_times_shared_factor(row, quick_estimator):
    out = estimate_softmax(Tensor(row), quick_estimator).data
    nz = np.abs(row) > 1e-200
    if nz.sum() > 1:
        ratio = out[nz] / row[nz]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_only_he_primitives(quick_estimator):
    with op_trace() as tr:
        estimate_softmax(Tensor(np.zeros((3, 16))), quick_estimator)
    assert tr.primitives <= {"add", "mul", "relu"}


def test_dim_precondition():
    with pytest.raises(InvalidSpec):
        SoftmaxEstimator.init(1)
    with pytest.raises(InvalidSpec):
        train_estimator(1, steps=1)


def test_training_reduces_error_and_generalises():
    rows = np.random.default_rng(9).uniform(-3, 3, (2000, 16))
    before = estimator_mse(SoftmaxEstimator.init(16, 0), rows)
    est, rep = train_estimator(16, 0, steps=1500, strict=False)
    assert estimator_mse(est, rows) < before
    assert rep.steps == 1500
    assert rep.heldout_mse <= 10 * rep.train_mse


def test_strict_mode_carries_estimator():
    with pytest.raises(DidNotConverge) as info:
        train_estimator(16, 0, steps=20, tolerance=1e-12)
    assert isinstance(info.value.estimator, SoftmaxEstimator)
    assert info.value.report.steps == 20
    assert not info.value.report.converged


def test_training_is_deterministic():
    a, _ = train_estimator(8, 3, steps=50, strict=False)
    b, _ = train_estimator(8, 3, steps=50, strict=False)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_out_of_distribution_entry_hurts(quick_estimator):
    rng = np.random.default_rng(4)
    rows = rng.uniform(-3, 3, (500, 16))
    ood = rows.copy()
    ood[:, -1] = -30.0
    assert estimator_mse(quick_estimator, ood) >= 10 * estimator_mse(quick_estimator, rows)


def test_mask_magnitude_degrades_masked_rows(quick_estimator):
    rng = np.random.default_rng(5)
    base = rng.uniform(-3, 3, (300, 16))
    errs = []
    for mv in (-3.0, -30.0):
        rows = base.copy()
        rows[:, 10:] += mv
        errs.append(estimator_mse(quick_estimator, rows))
    assert errs[1] > errs[0]


def test_copy_is_independent():
    est = SoftmaxEstimator.init(4, 0)
    c = est.copy(frozen=False)
    c.params["w1"].data = c.params["w1"].data + 1
    assert not np.array_equal(c.params["w1"].data, est.params["w1"].data)
    assert est.frozen and not c.frozen
