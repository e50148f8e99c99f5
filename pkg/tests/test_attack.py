import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from poisonlab.attack import (AttackConfig, FeasibleDomain, PenaltyTerm, PoisoningAttack, attacker_objective,
                              implicit_gradients, nearest_distance, objective_gradient, penalty_gradient,
                              penalty_value, poison, project)
from poisonlab.data import Dataset, gen_gaussian_toy, toy_config
from poisonlab.exceptions import ConvergenceWarning, DataError
from poisonlab.linmod import LinearModel


def toy(seed=0, n_per_class=10, d=2, spread=1.0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-1.0, spread, size=(n_per_class, d)), rng.normal(1.0, spread, size=(n_per_class, d))])
    y = np.repeat([-1.0, 1.0], n_per_class)
    return Dataset(X, y, tuple(f"x{j}" for j in range(d)))


def refit(ref, x, y_c, lam, reg, tol=1e-13):
    X = np.vstack([ref.features, x])
    y = np.append(ref.labels, y_c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return LinearModel(lam=lam, reg=reg, tol=tol, max_iter=200_000).fit(X, y)


def fd_gradient(ref, x, y_c, lam, reg, h=1e-5):
    """Central differences of W under refitting; also reports whether the active set moved."""
    g = np.zeros_like(x)
    base = refit(ref, x, y_c, lam, reg).coef_ != 0
    stable = True
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        mp, mm = refit(ref, x + e, y_c, lam, reg), refit(ref, x - e, y_c, lam, reg)
        stable &= np.array_equal(mp.coef_ != 0, base) and np.array_equal(mm.coef_ != 0, base)
        g[k] = (attacker_objective(ref, mp) - attacker_objective(ref, mm)) / (2 * h)
    return g, stable


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestAttackerObjective:
    def test_zero_model(self):
        d = toy()
        m = LinearModel(lam=0.1)
        m.coef_, m.intercept_, m.n_features_in_ = np.zeros(2), 0.0, 2
        assert attacker_objective(d, m) == pytest.approx(0.5)

    def test_perfect_interpolation(self):
        d = Dataset(np.array([[1.0], [-1.0]]), [1.0, -1.0], ("x",))
        m = LinearModel(lam=0.0, reg="ridge").fit(d.features, d.labels)
        assert attacker_objective(d, m) == pytest.approx(0.0, abs=1e-20)

    def test_term_by_term(self):
        d = gen_gaussian_toy(toy_config(4))
        m = refit(d, np.array([1.0, 1.0]), -1.0, 0.1, "lasso")
        total = 0.0
        for x, y in zip(d.features, d.labels):
            total += 0.5 * (float(np.dot(m.coef_, x)) + m.intercept_ - y) ** 2
        total = total / d.n + 0.1 * sum(abs(v) for v in m.coef_)
        assert attacker_objective(d, m) == pytest.approx(total, rel=1e-12, abs=1e-15)

    def test_tuple_reference(self):
        d = toy()
        m = refit(d, np.zeros(2), 1.0, 0.1, "ridge")
        assert attacker_objective((d.features, d.labels), m) == attacker_objective(d, m)


class TestImplicitGradients:
    def test_hand_solved_ridge(self):
        ref = Dataset(np.array([[0.0]]), [1.0], ("x",))
        lam, a = 0.5, 1.0
        m = refit(ref, np.array([a]), -1.0, lam, "ridge")
        assert m.coef_[0] == pytest.approx(-2 * a / (a * a + 4 * lam), abs=1e-12)
        ig = implicit_gradients(m, (np.array([[0.0], [a]]), np.array([1.0, -1.0])), [a], -1.0)
        assert ig.dw[0, 0] == pytest.approx(-2.0 / 9.0, abs=1e-12)
        assert ig.db[0] == pytest.approx(4.0 / 9.0, abs=1e-12)
        assert not ig.singular

    @pytest.mark.parametrize("reg", ["ridge", "lasso", "elastic_net"])
    def test_parameter_sensitivities_match_refits(self, reg):
        rng = np.random.default_rng(7)
        ref = toy(3, 12, 3)
        x = rng.normal(size=3)
        m = refit(ref, x, 1.0, 0.05, reg)
        train = (np.vstack([ref.features, x]), np.append(ref.labels, 1.0))
        ig = implicit_gradients(m, train, x, 1.0)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            mp, mm = refit(ref, x + e, 1.0, 0.05, reg), refit(ref, x - e, 1.0, 0.05, reg)
            if not np.array_equal(mp.coef_ != 0, mm.coef_ != 0):
                continue
            np.testing.assert_allclose(ig.dw[:, k], (mp.coef_ - mm.coef_) / (2 * h), atol=1e-6)
            assert ig.db[k] == pytest.approx((mp.intercept_ - mm.intercept_) / (2 * h), abs=1e-6)

    def test_duplicated_existing_point(self):
        ref = toy(5, 8, 2)
        x = ref.features[3].copy()
        m = refit(ref, x, ref.labels[3], 0.1, "ridge")
        g = objective_gradient(AttackConfig(reference=ref, initial_points=[x], labels=[ref.labels[3]], lam=0.1,
                                            reg="ridge", tol=1e-13, max_iter=200_000), [x], 0)
        fd, _ = fd_gradient(ref, x, ref.labels[3], 0.1, "ridge")
        assert rel_err(g, fd) < 1e-4
        assert np.any(implicit_gradients(m, (np.vstack([ref.features, x]), np.append(ref.labels, ref.labels[3])),
                                         x, ref.labels[3]).dw != 0.0)

    def test_singular_system_falls_back(self):
        X = np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0], [3.0, 3.0]])
        y = np.array([1.0, -1.0, 1.0, -1.0])
        m = LinearModel(lam=0.0, reg="ridge").fit(X, y)
        ig = implicit_gradients(m, (X, y), X[-1], -1.0)
        assert ig.singular
        assert np.all(np.isfinite(ig.dw))


class TestObjectiveGradient:
    def test_matches_finite_differences_ridge(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            d = int(rng.integers(1, 5))
            ref = toy(trial, int(rng.integers(5, 15)), d, spread=float(rng.uniform(0.5, 2.0)))
            x = rng.normal(size=d) * 2
            y_c = float(rng.choice([-1.0, 1.0]))
            lam = float(rng.uniform(0.01, 0.5))
            cfg = AttackConfig(reference=ref, initial_points=[x], labels=[y_c], lam=lam, reg="ridge", tol=1e-13,
                               max_iter=200_000)
            g = objective_gradient(cfg, [x], 0)
            fd, _ = fd_gradient(ref, x, y_c, lam, "ridge")
            assert rel_err(g, fd) < 1e-4, trial

    def test_all_residuals_zero_gives_zero(self):
        ref = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), [1.0, -1.0], ("a", "b"))
        x = np.array([0.0, 1.0])
        cfg = AttackConfig(reference=ref, initial_points=[x], labels=[1.0], lam=0.0, reg="ridge")
        np.testing.assert_allclose(objective_gradient(cfg, [x], 0), 0.0, atol=1e-12)

    def test_two_points(self):
        ref = toy(2, 10, 2)
        pts = np.array([[0.5, -0.2], [-0.3, 1.1]])
        cfg = AttackConfig(reference=ref, q=2, initial_points=pts, labels=[1.0, -1.0], lam=0.1, reg="ridge",
                           tol=1e-13, max_iter=200_000)
        g = objective_gradient(cfg, pts, 1)
        h = 1e-5
        fd = np.zeros(2)
        for k in range(2):
            vals = []
            for s in (h, -h):
                p = pts.copy()
                p[1, k] += s
                m = LinearModel(lam=0.1, reg="ridge", tol=1e-13, max_iter=200_000).fit(
                    np.vstack([ref.features, p]), np.append(ref.labels, [1.0, -1.0]))
                vals.append(attacker_objective(ref, m))
            fd[k] = (vals[0] - vals[1]) / (2 * h)
        assert rel_err(g, fd) < 1e-4


class TestPenalty:
    ref = Dataset(np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]), [1.0, -1.0, 1.0], ("a", "b"))

    def test_inside_threshold(self):
        assert penalty_value(PenaltyTerm("distance_threshold", d_att=1.0), [0.4, 0.0], self.ref) == 0.0

    def test_outside_threshold(self):
        assert penalty_value(PenaltyTerm("distance_threshold", d_att=1.0), [-1.7, 0.0], self.ref) == np.inf

    def test_none(self):
        assert penalty_value(PenaltyTerm(), [9.0, 9.0], self.ref) == 0.0
        assert np.all(penalty_gradient(PenaltyTerm(), [9.0, 9.0], self.ref) == 0.0)

    def test_coincides_with_kth_neighbor(self):
        pen = PenaltyTerm("knn_power", phi=1.0, k=2, P=2.0)
        # from (3, 0): distances 0, 3, 5, so the second neighbor is (0, 0)
        assert penalty_value(pen, [0.0, 0.0], self.ref) == pytest.approx(9.0)
        assert penalty_value(PenaltyTerm("knn_power", k=1), [3.0, 0.0], self.ref) == 0.0

    def test_quadratic_gradient(self):
        pen = PenaltyTerm("knn_power", k=1, P=2.0)
        x = np.array([0.5, -0.25])
        np.testing.assert_array_equal(penalty_gradient(pen, x, self.ref), 2 * x)

    def test_singular_gradient_flagged(self):
        g, flag = penalty_gradient(PenaltyTerm("knn_power", k=1, P=1.0), [3.0, 0.0], self.ref, return_flag=True)
        assert flag and np.all(g == 0.0)

    def test_k_too_large(self):
        with pytest.raises(DataError):
            penalty_value(PenaltyTerm("knn_power", k=4), [0.0, 0.0], self.ref)

    def test_empty_reference(self):
        with pytest.raises(DataError):
            nearest_distance([0.0], np.zeros((0, 1)))

    def test_tie_breaks_to_smallest_index(self):
        ref = np.array([[1.0, 0.0], [-1.0, 0.0]])
        g = penalty_gradient(PenaltyTerm("knn_power", k=1, P=2.0), [0.0, 0.0], ref)
        np.testing.assert_array_equal(g, [-2.0, 0.0])

    @given(arrays(np.float64, 2, elements=st.floats(-5, 5)), st.integers(1, 3), st.floats(1.0, 4.0))
    def test_gradient_matches_finite_differences(self, x, k, P):
        pen = PenaltyTerm("knn_power", phi=1.0, k=k, P=P)
        R = self.ref.features
        dist = np.sort(np.linalg.norm(R - x, axis=1))
        h = 1e-6
        # stay away from neighbor switches and the singular point
        assume(dist[k - 1] > 1e-2)
        if k > 1:
            assume(dist[k - 1] - dist[k - 2] > 1e-3)
        if k < 3:
            assume(dist[k] - dist[k - 1] > 1e-3)
        fd = np.array([(penalty_value(pen, x + h * e, R) - penalty_value(pen, x - h * e, R)) / (2 * h)
                       for e in np.eye(2)])
        g = penalty_gradient(pen, x, R)
        assert np.all(np.abs(g - fd) <= 1e-6 * max(1.0, np.abs(fd).max()))

    @pytest.mark.parametrize("kw", [{"kind": "x"}, {"kind": "distance_threshold", "d_att": -1.0},
                                    {"kind": "knn_power", "k": 0}, {"kind": "knn_power", "P": 0.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PenaltyTerm(**kw)


class TestProject:
    box = FeasibleDomain.box(2, 0.0, 10.0)

    def test_interior(self):
        np.testing.assert_array_equal(project(self.box, [3.0, 4.0]), [3.0, 4.0])

    def test_clip(self):
        np.testing.assert_array_equal(project(self.box, [12.0, -3.0]), [10.0, 0.0])

    @given(arrays(np.float64, 2, elements=st.floats(-1e6, 1e6)))
    def test_idempotent_and_inside(self, x):
        p = project(self.box, x)
        np.testing.assert_array_equal(project(self.box, p), p)
        assert self.box.contains(p)

    def test_bad_box(self):
        with pytest.raises(ValueError):
            FeasibleDomain([1.0], [0.0])

    def test_from_data_margin(self):
        dom = FeasibleDomain.from_data(np.array([[0.0], [10.0]]), margin=0.1)
        assert dom.lower[0] == -1.0 and dom.upper[0] == 11.0
        assert dom.on_border([11.0]) and not dom.on_border([5.0])


class TestPoison:
    def _cfg(self, **kw):
        base = dict(reference=gen_gaussian_toy(toy_config(1)), q=1, lam=0.1, steps=30, seed=3)
        base.update(kw)
        return AttackConfig(**base)

    def test_zero_steps(self):
        cfg = self._cfg(steps=0)
        tr = poison(cfg)
        np.testing.assert_array_equal(tr.final_points, cfg.resolved_initial_points())
        assert tr.positions.shape == (1, 1, 2)

    def test_trace_shape_and_containment(self):
        cfg = self._cfg(q=2, steps=25, step_size=0.5)
        tr = poison(cfg)
        assert tr.positions.shape == (26, 2, 2)
        assert tr.objective.shape == (26,)
        dom = cfg.resolved_domain()
        assert all(dom.contains(p) for p in tr.positions.reshape(-1, 2))

    def test_initial_labels_are_flipped(self):
        cfg = self._cfg(q=3)
        idx = cfg._init_draw()
        np.testing.assert_array_equal(cfg.resolved_labels(), -cfg.reference.labels[idx])
        np.testing.assert_array_equal(cfg.resolved_initial_points(), cfg.reference.features[idx])

    def test_distance_threshold_holds(self):
        for d_att in (0.0, 0.3, 1.0, 2.5):
            cfg = self._cfg(penalty=PenaltyTerm("distance_threshold", d_att=d_att), step_size=0.2, steps=60,
                            domain=FeasibleDomain.box(2, -30, 30))
            tr = poison(cfg)
            for p in tr.positions.reshape(-1, 2):
                assert nearest_distance(p, cfg.reference) <= d_att + 1e-12

    def test_zero_penalty_paths_are_identical(self):
        a = poison(self._cfg())
        b = poison(self._cfg(penalty=PenaltyTerm("knn_power", phi=0.0, k=2)))
        c = poison(self._cfg(penalty=PenaltyTerm("distance_threshold", d_att=1e9)))
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.positions, c.positions)
        np.testing.assert_array_equal(a.objective, c.objective)

    def test_ridge_small_steps_mostly_ascend(self):
        increases = total = 0
        for s in range(5):
            tr = poison(AttackConfig(reference=gen_gaussian_toy(toy_config(s)), lam=0.1, reg="ridge",
                                     step_size=0.05, steps=60, seed=s))
            diffs = np.diff(tr.objective)
            increases += int(np.sum(diffs >= -1e-12))
            total += diffs.size
        assert increases >= 0.95 * total

    def test_lambda_001_ends_on_border(self):
        cfg = self._cfg(lam=0.01, steps=400, step_size=0.05)
        tr = poison(cfg)
        assert cfg.resolved_domain().on_border(tr.final_points[0])
        assert tr.objective[-1] > tr.objective[0]

    @pytest.mark.parametrize("seed", range(4))
    def test_knn_penalty_stalls_inside(self, seed):
        # phi is in squared data units; 0.02 is the toy-scale counterpart of the stalling weight
        cfg = self._cfg(reference=gen_gaussian_toy(toy_config(seed)), lam=0.01, steps=400, step_size=0.05,
                        penalty=PenaltyTerm("knn_power", phi=0.02, k=3, P=2.0))
        tr = poison(cfg)
        assert not cfg.resolved_domain().on_border(tr.final_points[0], atol=1e-3)
        tail = tr.positions[-100:, 0]
        assert np.ptp(tail, axis=0).max() <= 2 * cfg.step_size

    def test_deterministic(self):
        a, b = poison(self._cfg(q=2)), poison(self._cfg(q=2))
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_initial_point_outside_domain(self):
        with pytest.raises(ValueError):
            poison(self._cfg(initial_points=[[100.0, 0.0]], labels=[1.0]))

    @pytest.mark.parametrize("kw", [{"step_size": 0.0}, {"step_size": 1.5}, {"steps": -1}, {"q": 0},
                                    {"knowledge": "none"}, {"q": 1000}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            self._cfg(**kw)

    def test_surrogate_knowledge(self):
        surrogate = gen_gaussian_toy(toy_config(99))
        tr = poison(self._cfg(reference=surrogate, knowledge="surrogate"))
        assert tr.config["knowledge"] == "surrogate"

    def test_trace_outputs(self, tmp_path):
        tr = poison(self._cfg(q=2, steps=3))
        tr.to_csv(tmp_path / "trace.csv")
        tr.to_json(tmp_path / "trace.json")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "t,c,x1,x2,W,W_penalized,grad_norm,rejected"
        assert len(lines) == 1 + 4 * 2
        assert tr.summary()["steps"] == 3


class TestEstimator:
    def test_fit_transform(self):
        d = gen_gaussian_toy(toy_config(2))
        att = PoisoningAttack(n_points=2, n_steps=5, random_state=1).fit(d.features, d.labels)
        X, y = att.transform(d.features, d.labels)
        assert X.shape == (d.n + 2, 2) and y.shape == (d.n + 2,)
        assert att.attack_points_.shape == (2, 2)

    def test_bounds(self):
        d = gen_gaussian_toy(toy_config(2))
        att = PoisoningAttack(n_steps=50, step_size=0.5, bounds=(-3.0, 3.0)).fit(d.features, d.labels)
        assert np.all(np.abs(att.trace_.positions) <= 3.0)
        assert np.any(np.abs(np.abs(att.attack_points_) - 3.0) < 1e-9)
