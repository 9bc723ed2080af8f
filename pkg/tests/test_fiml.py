import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semimpute.dataset import Dataset, VariableSpec
from semimpute.errors import InputError, NumericalError
from semimpute.fiml import (
    EmConfig,
    MvnParams,
    conditional_impute,
    em_fit,
    loglik_observed,
)
from semimpute.missingness import apply_mcar

STD_NORMAL_LL_AT_MEAN = -0.9189385332046727  # -log(2*pi)/2


def _dataset(values, mask=None):
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones_like(values, dtype=bool) if mask is None else np.asarray(mask, bool)
    specs = tuple(VariableSpec(f"v{j}", "continuous") for j in range(values.shape[1]))
    return Dataset(values=values, mask=mask, specs=specs)


def test_mvn_params_requires_symmetry():
    with pytest.raises(InputError):
        MvnParams(mu=np.zeros(2), sigma=np.array([[1.0, 0.5], [0.2, 1.0]]))


def test_loglik_standard_normal_at_mean():
    params = MvnParams(mu=np.zeros(1), sigma=np.eye(1))
    ds = _dataset([[0.0]])
    assert loglik_observed(params, ds) == pytest.approx(STD_NORMAL_LL_AT_MEAN, abs=1e-12)


def test_loglik_sums_over_observed_patterns():
    params = MvnParams(mu=np.zeros(2), sigma=np.eye(2))
    ds = _dataset([[0.0, 0.0], [0.0, 0.0]], mask=[[True, True], [True, False]])
    # Three observed standard-normal cells at the mean.
    assert loglik_observed(params, ds) == pytest.approx(3 * STD_NORMAL_LL_AT_MEAN, abs=1e-10)


def test_complete_data_converges_in_one_iteration():
    rng = np.random.default_rng(0)
    ds = _dataset(rng.standard_normal((200, 3)))
    res = em_fit(ds)
    assert res.iterations == 1
    # The fit equals the closed-form ML estimate.
    assert np.allclose(res.params.mu, ds.values.mean(axis=0))
    assert np.allclose(res.params.sigma, np.cov(ds.values, rowvar=False, bias=True))


def test_em_recovers_correlation_under_mcar(make_mvn):
    truth = make_mvn(3, n=2000, rho=0.8)
    masked, _ = apply_mcar(truth, 0.3, seed=11)
    res = em_fit(masked)
    rho = res.params.sigma[0, 1] / np.sqrt(res.params.sigma[0, 0] * res.params.sigma[1, 1])
    assert abs(rho - 0.8) < 0.05


def test_em_fixed_point(make_mvn):
    truth = make_mvn(4, n=500)
    masked, _ = apply_mcar(truth, 0.3, seed=12)
    cfg = EmConfig(tol=1e-12, max_iter=2000)
    res = em_fit(masked, cfg)
    again = em_fit(masked, cfg, init=res.params)
    assert np.max(np.abs(again.params.mu - res.params.mu)) < 1e-6
    assert np.max(np.abs(again.params.sigma - res.params.sigma)) < 1e-6


def test_em_warns_on_fully_missing_rows():
    values = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 1.0], [2.0, 2.0]])
    mask = np.array([[True, True], [False, False], [True, True], [True, True]])
    res = em_fit(_dataset(values, mask))
    assert any("missing" in w for w in res.warnings)


def test_em_rejects_insufficient_rows():
    with pytest.raises(InputError):
        em_fit(_dataset([[1.0, 2.0]]))


def test_conditional_impute_reproduces_observed_cells(make_mvn):
    truth = make_mvn(5, n=300)
    masked, _ = apply_mcar(truth, 0.25, seed=21)
    res = em_fit(masked)
    filled, provenance = conditional_impute(res.params, masked)
    assert np.array_equal(provenance, ~masked.mask)
    assert np.array_equal(filled.values[masked.mask], masked.values[masked.mask])
    assert np.array_equal(filled.mask, masked.mask)  # mask itself unchanged


def test_conditional_impute_bivariate_regression():
    # With unit variances, imputing x2 from x1 is mu2 + rho*(x1 - mu1).
    rho = 0.8
    params = MvnParams(mu=np.zeros(2), sigma=np.array([[1.0, rho], [rho, 1.0]]))
    ds = _dataset([[1.5, 0.0]], mask=[[True, False]])
    filled, _ = conditional_impute(params, ds)
    assert filled.values[0, 1] == pytest.approx(rho * 1.5, abs=1e-12)


def test_conditional_impute_fully_missing_row_gets_mean():
    params = MvnParams(mu=np.array([2.0, -1.0]), sigma=np.eye(2))
    ds = _dataset([[0.0, 0.0]], mask=[[False, False]])
    filled, _ = conditional_impute(params, ds)
    assert np.allclose(filled.values[0], [2.0, -1.0])


def test_singular_sigma_raises_after_ridge_retry():
    params = MvnParams(mu=np.zeros(2), sigma=np.array([[1.0, 1.0], [1.0, 1.0]]))
    ds = _dataset([[1.0, 0.0]], mask=[[True, False]])
    # Perfectly singular 1x1 observed block is fine; force a bad 2x2 via loglik.
    bad = MvnParams(mu=np.zeros(2), sigma=np.array([[-1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(NumericalError):
        loglik_observed(bad, _dataset([[1.0, 1.0]]))
    # The merely-singular case is rescued by the ridge.
    filled, _ = conditional_impute(params, ds)
    assert np.isfinite(filled.values).all()


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=15, deadline=None)
def test_em_monotonicity_holds_on_random_problems(seed):
    # em_fit asserts per-iteration loglik increase internally; this runs the
    # assertion across many random missingness draws.
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 5))
    n = int(rng.integers(30, 80))
    a = rng.standard_normal((d, d))
    cov = a @ a.T + 0.5 * np.eye(d)
    values = rng.multivariate_normal(rng.standard_normal(d), cov, size=n)
    ds = _dataset(values)
    masked, _ = apply_mcar(ds, float(rng.uniform(0.05, 0.4)), seed=seed)
    res = em_fit(masked)
    assert np.isfinite(res.loglik)
