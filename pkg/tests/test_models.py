import numpy as np
import pytest
from scipy.optimize import minimize

from stabledyn.diffcore import Network, init_network
from stabledyn.models import Hyper, StableDynamicsModel, projection_shift

from conftest import SMALL_WIDTHS, jitter_params, make_model


def constant_network(in_dim, out_dim, value, out_activation="identity"):
    """Single affine layer with zero weights: output is the constant bias."""
    return Network([np.zeros((out_dim, in_dim))],
                   [np.full(out_dim, float(value))], [out_activation])


class TestHyper:
    def test_beta_default_rule(self, vdp_system):
        hp = Hyper.for_system(vdp_system)
        assert hp.beta == pytest.approx(5.0 / 5.0)
        hp2 = Hyper(u_lim=[2.0, 10.0], x_lb=[-1, -1], x_ub=[1, 1])
        assert hp2.beta == pytest.approx(0.5)

    def test_explicit_beta_kept(self, vdp_system):
        hp = Hyper.for_system(vdp_system, beta=3.0)
        assert hp.beta == 3.0

    @pytest.mark.parametrize("kw", [
        {"alpha": 0.0}, {"eps_pd": -1.0}, {"eps_proj": 0.0}, {"d": 0.0},
        {"u_lim": [-1.0]}, {"v_cap": 0.0},
    ])
    def test_invalid_rejected(self, kw):
        base = dict(u_lim=[5.0], x_lb=[-1.0, -1.0], x_ub=[1.0, 1.0])
        base.update(kw)
        with pytest.raises(ValueError):
            Hyper(**base)

    def test_box_must_order(self):
        with pytest.raises(ValueError):
            Hyper(u_lim=[1.0], x_lb=[1.0, -1.0], x_ub=[1.0, 1.0])

    def test_dict_roundtrip(self, vdp_hyper):
        again = Hyper.from_dict(vdp_hyper.to_dict())
        assert again.to_dict() == vdp_hyper.to_dict()


class TestController:
    def test_zero_network_zero_control(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=1)
        gu = model.nets["gu"]
        gu.weights[-1][:] = 0.0
        model.invalidate_cache()
        X = np.random.default_rng(0).uniform(-1, 1, (20, 2))
        assert np.array_equal(model.controller(X), np.zeros((20, 1)))

    def test_zero_limit_zero_control(self, vdp_system):
        hp = Hyper.for_system(vdp_system, u_lim=[0.0])
        model = make_model(hp, seed=1)
        X = np.random.default_rng(0).uniform(-1, 1, (20, 2))
        assert np.array_equal(model.controller(X), np.zeros((20, 1)))

    def test_strictly_inside_box(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=2)
        X = np.random.default_rng(1).uniform(-1.3, 1.3, (5000, 2))
        u = model.controller(X)
        assert np.all(np.abs(u) < 5.0)

    def test_single_vector_form(self, small_model):
        u = small_model.controller(np.array([0.2, 0.1]))
        assert u.shape == (1,)


class TestNominal:
    def test_equilibrium_exact(self, vdp_hyper):
        for seed in range(5):
            model = make_model(vdp_hyper, seed=seed)
            u0 = model.controller(np.zeros(2))
            assert np.array_equal(model.nominal(np.zeros(2), u0), np.zeros(2))

    def test_constant_network_gives_zero_everywhere(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=3)
        model.nets["gf"] = constant_network(3, 2, 1.7)
        model.layout = None  # rebuilt below
        model = StableDynamicsModel(model.nets, vdp_hyper)
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, (50, 2))
        U = rng.uniform(-5, 5, (50, 1))
        assert np.array_equal(model.nominal(X, U), np.zeros((50, 2)))

    def test_shift_is_reevaluated_gf(self, small_model, vdp_hyper):
        # nominal(x,u) + g_f(0, u*(0)) reproduces the raw network value
        from stabledyn.diffcore import forward
        model = small_model
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, (20, 2))
        U = rng.uniform(-5, 5, (20, 1))
        u0 = model.controller(np.zeros(2))
        gf0 = forward(model.nets["gf"], np.concatenate((np.zeros(2), u0)))
        raw = forward(model.nets["gf"], np.hstack((X, U)))
        assert np.allclose(model.nominal(X, U) + gf0, raw, rtol=1e-13, atol=1e-15)


class TestLyapunov:
    def test_origin_value_and_gradient_zero(self, vdp_hyper):
        for seed in range(5):
            model = make_model(vdp_hyper, seed=seed)
            assert model.lyapunov(np.zeros(2)) == 0.0
            assert np.array_equal(model.lyapunov_grad(np.zeros(2)), np.zeros(2))

    def test_constant_gv_reduces_to_quadratic(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=4)
        model.nets["gv"] = constant_network(2, 1, 0.33, out_activation="tanh")
        model = StableDynamicsModel(model.nets, vdp_hyper)
        X = np.random.default_rng(4).uniform(-1.3, 1.3, (100, 2))
        v = model.lyapunov(X)
        q = vdp_hyper.eps_pd * np.sum(X * X, axis=1)
        assert np.allclose(v, q, rtol=0, atol=1e-15)
        assert np.allclose(model.lyapunov_grad(X), 2 * vdp_hyper.eps_pd * X,
                           rtol=0, atol=1e-15)

    def test_quadratic_floor_sweep(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=5)
        X = np.random.default_rng(5).uniform(-1.3, 1.3, (10000, 2))
        v = model.lyapunov(X)
        floor = vdp_hyper.eps_pd * np.sum(X * X, axis=1)
        assert np.all(v >= floor - 1e-15)

    def test_gradient_matches_finite_differences(self, small_model):
        rng = np.random.default_rng(6)
        model = jitter_params(small_model, rng)
        h = 1e-6
        for _ in range(20):
            x = rng.uniform(-1.2, 1.2, 2)
            g = model.lyapunov_grad(x)
            fd = np.array([
                (model.lyapunov(x + h * e) - model.lyapunov(x - h * e)) / (2 * h)
                for e in np.eye(2)])
            assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


class TestProjection:
    def test_hand_computed_correction(self):
        # grad V = (0,1), V = 1, alpha = 1, fhat(x, u*(x)) = (0, 2):
        # residual = 3, shift = (0, 3), projected derivative (0, -1)
        grad_v = np.array([[0.0, 1.0]])
        fhat = np.array([[0.0, 2.0]])
        v = np.array([[1.0]])
        shift = projection_shift(grad_v, fhat, v, alpha=1.0, eps_proj=1e-3)
        assert np.array_equal(shift, [[0.0, 3.0]])
        fstar = fhat - shift
        assert np.array_equal(fstar, [[0.0, -1.0]])
        assert float(np.sum(grad_v * fstar)) == -1.0  # equals -alpha V

    def test_inactive_when_decrease_already_holds(self, vdp_hyper):
        # quadratic V with a linear nominal fhat = (-3 x1, +x2): the residual
        # -2.5 x1^2 + 1.5 x2^2 changes sign across the box
        model = make_model(vdp_hyper, seed=7)
        model.nets["gv"] = constant_network(2, 1, 0.0, out_activation="tanh")
        model.nets["gf"] = Network(
            [np.array([[-3.0, 0.0, 0.0], [0.0, 1.0, 0.0]])],
            [np.zeros(2)], ["identity"])
        model = StableDynamicsModel(model.nets, vdp_hyper)
        rng = np.random.default_rng(7)
        X = rng.uniform(-1.3, 1.3, (4000, 2))
        pieces = model.eval_pieces(X)
        inactive = pieces["resid"][:, 0] <= 0.0
        assert np.any(inactive) and not np.all(inactive)
        assert np.array_equal(pieces["fstar_star"][inactive],
                              pieces["fhat_star"][inactive])

    def test_origin_passthrough_for_any_control(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=8)
        for u in (np.array([0.0]), np.array([3.3]), np.array([-4.9])):
            fhat = model.nominal(np.zeros(2), u)
            fstar = model.project(np.zeros(2), u)
            assert np.array_equal(fstar, fhat)

    def test_shift_shared_across_controls(self, small_model):
        # the correction depends on u only through u*(x)
        model = small_model
        rng = np.random.default_rng(8)
        X = rng.uniform(-1.3, 1.3, (30, 2))
        u1 = rng.uniform(-5, 5, (30, 1))
        u2 = rng.uniform(-5, 5, (30, 1))
        d1 = model.nominal(X, u1) - model.project(X, u1)
        d2 = model.nominal(X, u2) - model.project(X, u2)
        assert np.allclose(d1, d2, rtol=0, atol=1e-14)

    def test_decrease_property_sweep(self, vdp_hyper):
        model = make_model(vdp_hyper, seed=9, small=False)
        rng = np.random.default_rng(9)
        X = rng.uniform(-1.3, 1.3, (10000, 2))
        pieces = model.eval_pieces(X)
        gn2 = np.sum(pieces["grad_v"] ** 2, axis=1)
        ok = gn2 >= vdp_hyper.eps_proj
        lhs = np.sum(pieces["grad_v"] * pieces["fstar_star"], axis=1)
        rhs = -vdp_hyper.alpha * pieces["v"][:, 0]
        assert np.all(lhs[ok] <= rhs[ok] + 1e-9)

    def test_minimality_against_qp_solver(self, vdp_hyper):
        # closed-form distance r/||g|| vs a generic constrained least-norm solve
        rng = np.random.default_rng(10)
        checked = 0
        while checked < 100:
            n = rng.integers(2, 5)
            g = rng.normal(size=n)
            fhat = rng.normal(size=n) * 3
            v = float(rng.uniform(0.1, 2.0))
            alpha = 1.0
            r = float(g @ fhat + alpha * v)
            if r <= 1e-3 or g @ g < 1e-3:
                continue
            shift = projection_shift(g[None, :], fhat[None, :], np.array([[v]]),
                                     alpha, 1e-3)[0]
            dist = np.linalg.norm(shift)
            assert dist == pytest.approx(r / np.linalg.norm(g), abs=1e-10)

            feasible0 = -(r + 0.1) * g / (g @ g)
            res = minimize(
                lambda df: df @ df, feasible0, method="SLSQP",
                constraints=[{"type": "ineq",
                              "fun": lambda df: -(g @ (fhat + df) + alpha * v)}],
                options={"maxiter": 200, "ftol": 1e-12})
            assert res.success
            assert dist == pytest.approx(np.linalg.norm(res.x), abs=1e-4)
            checked += 1

    def test_nonfinite_input_rejected(self, small_model):
        with pytest.raises(ValueError):
            small_model.project(np.array([np.nan, 0.0]), np.array([0.0]))


class TestClosedLoop:
    def test_origin_is_equilibrium(self, vdp_hyper):
        for seed in range(10):
            model = make_model(vdp_hyper, seed=seed)
            assert np.linalg.norm(model.closed_loop(np.zeros(2))) == 0.0

    def test_matches_project_of_controller(self, small_model):
        X = np.random.default_rng(11).uniform(-1.3, 1.3, (40, 2))
        u = small_model.controller(X)
        assert np.array_equal(small_model.closed_loop(X),
                              small_model.project(X, u))

    def test_ablation_returns_nominal(self, small_model):
        X = np.random.default_rng(12).uniform(-1.3, 1.3, (40, 2))
        u = small_model.controller(X)
        assert np.array_equal(small_model.closed_loop(X, ablate_projection=True),
                              small_model.nominal(X, u))


class TestAffineMode:
    @pytest.fixture
    def affine_two_input(self):
        hp = Hyper(u_lim=[5.0, 5.0], x_lb=[-1.0, -1.0], x_ub=[1.0, 1.0])
        return make_model(hp, seed=13, mode="affine")

    def test_bang_bang_signs(self):
        # coefficient row (1, -2) with u_lim (5, 5) -> controls (-5, +5)
        coeff = np.array([[1.0, -2.0]])
        u = -np.sign(coeff) * np.array([5.0, 5.0])
        assert np.array_equal(u, [[-5.0, 5.0]])

    def test_sign_zero_gives_zero_component(self, affine_two_input):
        model = affine_two_input
        # force the Lyapunov gradient to vanish: constant gv leaves only the
        # quadratic part, which is zero at the origin
        coeff = model.eval_pieces(np.zeros(2))["coeff"]
        assert np.array_equal(coeff, np.zeros((1, 2)))
        assert np.array_equal(model.affine_controller(np.zeros(2)), np.zeros(2))

    def test_matches_grid_argmin(self, affine_two_input):
        model = affine_two_input
        hp = model.hyper
        rng = np.random.default_rng(14)
        X = rng.uniform(hp.x_lb, hp.x_ub, (200, 2))
        pieces = model.eval_pieces(X)
        coeff, u_star = pieces["coeff"], pieces["u_star"]
        grid = np.linspace(-5.0, 5.0, 21)
        uu, vv = np.meshgrid(grid, grid, indexing="ij")
        candidates = np.column_stack((uu.ravel(), vv.ravel()))
        for i in range(len(X)):
            vals = candidates @ coeff[i]
            best = vals.min()
            attained = float(coeff[i] @ u_star[i])
            assert attained == pytest.approx(best, abs=1e-12)

    def test_affinity_identity(self, affine_two_input):
        model = affine_two_input
        rng = np.random.default_rng(15)
        X = rng.uniform(-1, 1, (30, 2))
        u1 = rng.uniform(-5, 5, (30, 2))
        u2 = rng.uniform(-5, 5, (30, 2))
        lhs = (model.nominal(X, u1 + u2) - model.nominal(X, u1)
               - model.nominal(X, u2) + model.nominal(X, np.zeros((30, 2))))
        assert np.max(np.abs(lhs)) <= 1e-12

    def test_equilibrium_shift(self, affine_two_input):
        model = affine_two_input
        u0 = model.affine_controller(np.zeros(2))
        assert np.linalg.norm(model.affine_nominal(np.zeros(2), u0)) <= 1e-12

    def test_projection_preserves_decrease(self):
        hp = Hyper(u_lim=[3.0], x_lb=[-1.0, -1.0], x_ub=[1.0, 1.0])
        model = make_model(hp, seed=16, mode="affine")
        X = np.random.default_rng(16).uniform(-1, 1, (5000, 2))
        pieces = model.eval_pieces(X)
        gn2 = np.sum(pieces["grad_v"] ** 2, axis=1)
        ok = gn2 >= hp.eps_proj
        lhs = np.sum(pieces["grad_v"] * pieces["fstar_star"], axis=1)
        assert np.all(lhs[ok] <= -hp.alpha * pieces["v"][:, 0][ok] + 1e-9)

    def test_general_methods_guarded(self, small_model):
        with pytest.raises(ValueError):
            small_model.affine_controller(np.zeros(2))
        with pytest.raises(ValueError):
            small_model.affine_parts(np.zeros(2))


class TestParams:
    def test_roundtrip_and_cache_invalidation(self, small_model):
        x = np.array([0.4, -0.2])
        before = small_model.closed_loop(x)
        theta = small_model.get_params()
        small_model.set_params(theta * 1.01)
        changed = small_model.closed_loop(x)
        assert not np.array_equal(before, changed)
        small_model.set_params(theta)
        assert np.array_equal(small_model.closed_loop(x), before)

    def test_mode_net_names_enforced(self, vdp_hyper):
        nets = {"gf": init_network([3, 4, 2], "tanh", 0),
                "gv": init_network([2, 4, 1], "smoothed_relu", 1, out_activation="tanh"),
                "gu": init_network([2, 4, 1], "tanh", 2, out_activation="tanh")}
        with pytest.raises(ValueError):  # wrong order
            StableDynamicsModel(nets, vdp_hyper)
