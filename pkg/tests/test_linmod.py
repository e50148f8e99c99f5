import types
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.linear_model import Lasso

from poisonlab.data import Dataset
from poisonlab.exceptions import ConvergenceWarning, DataError
from poisonlab.linmod import (GramStats, LinearModel, Regularizer, accuracy, classify, critical_lambda, fit,
                              kkt_residual, load_model, predict, reg_subgradient, save_model)


def ridge_closed_form(X, y, lam):
    """Solve the uncentered augmented normal equations for (w, b)."""
    n, d = X.shape
    A = np.zeros((d + 1, d + 1))
    A[:d, :d] = X.T @ X / n + lam * np.eye(d)
    A[:d, d] = A[d, :d] = X.mean(axis=0)
    A[d, d] = 1.0
    rhs = np.append(X.T @ y / n, y.mean())
    sol = np.linalg.solve(A, rhs)
    return sol[:d], sol[d]


def random_problem(rng, n=None, d=None):
    n = n or int(rng.integers(5, 200))
    d = d or int(rng.integers(1, 20))
    X = rng.normal(size=(n, d)) * rng.uniform(0.2, 3.0, size=d) + rng.normal(size=d)
    y = np.sign(X @ rng.normal(size=d) + 0.5 * rng.normal(size=n))
    y[y == 0] = 1.0
    return X, y


def fitted(w, b, **kw):
    m = LinearModel(**kw)
    m.coef_, m.intercept_ = np.asarray(w, dtype=float), float(b)
    m.n_features_in_ = m.coef_.size
    m.classes_ = np.array([-1.0, 1.0])
    return m


class TestRegularizer:
    def test_mix_weights(self):
        assert (Regularizer("lasso").l1, Regularizer("lasso").l2) == (1.0, 0.0)
        assert (Regularizer("ridge").l1, Regularizer("ridge").l2) == (0.0, 1.0)
        assert Regularizer("elastic_net", 0.3).l1 == 0.3

    def test_value(self):
        w = np.array([1.0, -2.0])
        assert Regularizer("lasso").value(w) == 3.0
        assert Regularizer("ridge").value(w) == 2.5
        assert Regularizer("elastic_net", 0.5).value(w) == pytest.approx(2.75)

    @pytest.mark.parametrize("kind,rho", [("l0", 0.5), ("lasso", 1.5), ("elastic_net", -0.1)])
    def test_invalid(self, kind, rho):
        with pytest.raises(ValueError):
            Regularizer(kind, rho)


class TestFit:
    def test_ridge_matches_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            X, y = random_problem(rng)
            lam = float(rng.uniform(0.01, 1.0))
            m = LinearModel(lam=lam, reg="ridge").fit(X, y)
            w, b = ridge_closed_form(X, y, lam)
            scale = np.linalg.norm(np.append(w, b))
            assert np.linalg.norm(np.append(m.coef_ - w, m.intercept_ - b)) <= 1e-6 * scale

    def test_lasso_above_critical_lambda_is_zero(self):
        rng = np.random.default_rng(1)
        X, y = random_problem(rng, 50, 6)
        lam = critical_lambda(X, y)
        m = LinearModel(lam=lam * 1.0001).fit(X, y)
        assert np.all(m.coef_ == 0.0)
        assert m.intercept_ == pytest.approx(y.mean(), abs=1e-15)
        below = LinearModel(lam=lam * 0.99).fit(X, y)
        assert np.any(below.coef_ != 0.0)

    def test_elastic_net_rho_one_is_lasso(self):
        X, y = random_problem(np.random.default_rng(2), 80, 8)
        a = LinearModel(lam=0.05).fit(X, y)
        b = LinearModel(lam=0.05, reg="elastic_net", rho=1.0).fit(X, y)
        np.testing.assert_allclose(a.coef_, b.coef_, atol=1e-8)

    def test_lasso_agrees_with_sklearn(self):
        X, y = random_problem(np.random.default_rng(3), 120, 10)
        ours = LinearModel(lam=0.05, tol=1e-12).fit(X, y)
        ref = Lasso(alpha=0.05, tol=1e-14, max_iter=100_000).fit(X, y)
        np.testing.assert_allclose(ours.coef_, ref.coef_, atol=1e-7)
        assert ours.intercept_ == pytest.approx(ref.intercept_, abs=1e-7)

    def test_bias_is_not_penalized(self):
        X = np.zeros((4, 1))
        y = np.array([1.0, 1.0, 1.0, -1.0])
        m = LinearModel(lam=100.0, reg="ridge").fit(X, y)
        assert m.intercept_ == pytest.approx(0.5)

    def test_non_convergence_is_reported(self):
        X, y = random_problem(np.random.default_rng(4), 60, 10)
        with pytest.warns(ConvergenceWarning):
            m = LinearModel(lam=1e-3, max_iter=1).fit(X, y)
        assert not m.converged_ and m.n_iter_ == 1
        assert m.coef_.shape == (10,)

    def test_objective_non_increasing_over_sweeps(self):
        X, y = random_problem(np.random.default_rng(5), 100, 12)
        for reg in ("lasso", "ridge", "elastic_net"):
            values = []
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                for k in range(1, 15):
                    values.append(LinearModel(lam=0.02, reg=reg, max_iter=k).fit(X, y).objective(X, y))
            assert np.all(np.diff(values) <= 1e-14)

    def test_warm_start_reaches_same_solution(self):
        X, y = random_problem(np.random.default_rng(6), 80, 5)
        m = LinearModel(lam=0.05, warm_start=True).fit(X, y)
        cold = m.coef_.copy()
        m.fit(X, y)
        np.testing.assert_allclose(m.coef_, cold, atol=1e-8)
        assert m.n_iter_ == 1

    @pytest.mark.parametrize("params", [{"lam": -1.0}, {"tol": 0.0}, {"max_iter": 0}, {"reg": "l0"}])
    def test_invalid_params(self, params):
        with pytest.raises(ValueError):
            LinearModel(**params).fit(np.ones((3, 1)), [1.0, -1.0, 1.0])

    def test_bad_labels(self):
        with pytest.raises(DataError):
            LinearModel().fit(np.ones((2, 1)), [0.0, 1.0])

    def test_sklearn_clone(self):
        m = LinearModel(lam=0.3, reg="ridge")
        assert clone(m).get_params() == m.get_params()

    def test_functional_fit(self):
        X, y = random_problem(np.random.default_rng(7), 30, 3)
        d = Dataset(X, y, ("a", "b", "c"))
        m = fit(d, lam=0.1, reg="ridge")
        assert m.reg == "ridge" and 0.0 <= accuracy(m, d) <= 1.0


@given(st.integers(0, 10_000), st.sampled_from(["lasso", "ridge", "elastic_net"]),
       st.floats(1e-3, 0.5))
def test_kkt_conditions(seed, reg, lam):
    rng = np.random.default_rng(seed)
    X, y = random_problem(rng, int(rng.integers(5, 60)), int(rng.integers(1, 8)))
    tol = 1e-8
    m = LinearModel(lam=lam, reg=reg, tol=tol).fit(X, y)
    r = kkt_residual(m, X, y)
    assert r["active"] <= 10 * tol
    assert r["inactive"] <= 10 * tol
    assert r["bias"] <= 10 * tol


class TestPredict:
    def test_zero_weights(self):
        m = fitted([0.0, 0.0], 0.3)
        assert predict(m, [5.0, -7.0]) == pytest.approx(0.3)
        assert classify(m, [5.0, -7.0]) == 1.0

    def test_tie_goes_positive(self):
        m = fitted([1.0, -1.0], 0.0)
        assert predict(m, [2.0, 2.0]) == 0.0
        assert classify(m, [2.0, 2.0]) == 1.0
        assert m.predict([[2.0, 2.0]])[0] == 1.0

    def test_negative(self):
        m = fitted([1.0, 0.0], -1.0)
        assert predict(m, [0.5, 9.0]) == pytest.approx(-0.5)
        assert classify(m, [0.5, 9.0]) == -1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            predict(fitted([1.0, 0.0], 0.0), [1.0])

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            LinearModel().predict([[1.0]])


class TestAccuracy:
    def test_all_correct(self):
        d = Dataset(np.array([[1.0], [-1.0]]), [1.0, -1.0], ("x",))
        assert accuracy(fitted([1.0], 0.0), d) == 1.0

    def test_flip_symmetry(self):
        X, y = random_problem(np.random.default_rng(8), 41, 3)
        m = LinearModel(lam=0.1).fit(X, y)
        a = accuracy(m, Dataset(X, y, ("a", "b", "c")))
        b = accuracy(m, Dataset(X, -y, ("a", "b", "c")))
        assert a + b == pytest.approx(1.0)

    def test_empty(self):
        empty = types.SimpleNamespace(n=0)
        with pytest.raises(DataError):
            accuracy(fitted([1.0], 0.0), empty)


class TestSubgradient:
    def test_lasso(self):
        assert reg_subgradient(fitted([0.5, 0.0, -2.0], 0, reg="lasso")).tolist() == [1.0, 0.0, -1.0]

    def test_ridge(self):
        assert reg_subgradient(fitted([0.5, 0.0, -2.0], 0, reg="ridge")).tolist() == [0.5, 0.0, -2.0]

    def test_elastic_net(self):
        np.testing.assert_allclose(reg_subgradient(fitted([2.0, 0.0], 0, reg="elastic_net", rho=0.5)), [1.5, 0.0])


class TestGramStats:
    def test_incremental_matches_batch(self):
        X, y = random_problem(np.random.default_rng(9), 20, 4)
        st_ = GramStats.from_data(X[:-1], y[:-1]).add(X[-1], y[-1])
        ref = GramStats.from_data(X, y)
        np.testing.assert_allclose(st_.sxx, ref.sxx)
        np.testing.assert_allclose(st_.sxy, ref.sxy)
        back = ref.copy().add(X[-1], y[-1], weight=-1.0)
        assert back.n == 19

    def test_loss_matches_direct(self):
        X, y = random_problem(np.random.default_rng(10), 25, 3)
        w, b = np.array([0.3, -0.2, 0.1]), 0.4
        direct = 0.5 * np.mean((X @ w + b - y) ** 2)
        assert GramStats.from_data(X, y).loss(w, b) == pytest.approx(direct, rel=1e-12)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        X, y = random_problem(np.random.default_rng(11), 30, 4)
        m = LinearModel(lam=0.2, reg="elastic_net", rho=0.3).fit(X, y)
        save_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert set(m.to_dict()) == {"w", "b", "lambda", "kind", "rho"}
        np.testing.assert_array_equal(back.predict(X), m.predict(X))
        assert back.to_dict() == m.to_dict()
