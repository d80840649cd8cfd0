import numpy as np
import pytest

from nlreg import datagen
from nlreg.core import NonlinearScalarFunction, ProblemInstance
from nlreg.funcs import get_function
from nlreg.theory import (MeanValueDiagonal, certified_run, mean_value_diag,
                          mu_constants, omega_membership, oracle_W)

from conftest import make_instance, normalize_columns


class TestMeanValueDiag:
    def test_identity_gives_ones(self, rng):
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        mv = mean_value_diag(a, b, get_function("identity"))
        assert np.allclose(mv.entries, 1.0, atol=1e-12)

    def test_equal_points_use_derivative(self, rng):
        a = rng.standard_normal(5)
        f = get_function("2x+cos(x)")
        mv = mean_value_diag(a, a.copy(), f)
        assert np.array_equal(mv.entries, f.derivative(a))

    def test_hand_value(self):
        f = get_function("2x+cos(x)")
        mv = mean_value_diag(np.array([np.pi]), np.array([0.0]), f)
        assert mv.entries[0] == pytest.approx((2 * np.pi - 2) / np.pi, rel=1e-12)

    def test_divided_difference_identity(self, rng):
        # entries reproduce f(a)-f(b) = entry*(a-b) to near machine precision
        f = get_function("10x+cos(3x)")
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        e = mean_value_diag(a, b, f).entries
        resid = f.value(a) - f.value(b) - e * (a - b)
        assert np.abs(resid).max() < 1e-12


class TestOracleW:
    def test_identity_reduces_to_A(self):
        p = make_instance(8, 12, f_id="identity", seed=70, s=3)
        f = get_function("identity")
        W = oracle_W(np.zeros(p.n), p, f, beta=1.0, gamma=1.0)
        assert np.allclose(W, p.A, atol=1e-14)

    def test_membership_random_instance(self, rng):
        p = make_instance(8, 12, seed=71, s=2)
        f = get_function("2x+cos(x)")
        x_t = 0.3 * rng.standard_normal(p.n)
        for beta, gamma in ((1.0, 1.0), (0.7, 0.4)):
            W = oracle_W(x_t, p, f, beta, gamma)
            diag_err, cross = omega_membership(W, x_t, p, f, beta, gamma)
            assert diag_err <= 1e-10
            assert cross < 1.0

    def test_orthonormal_columns_zero_cross(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((4, 2)))
        x_true = np.array([1.0, -0.5])
        f = get_function("2x+cos(x)")
        p = ProblemInstance(A=Q, x_star=x_true, epsilon=np.zeros(4),
                            y=f.value(Q @ x_true))
        W = oracle_W(np.zeros(2), p, f, 1.0, 1.0)
        _, cross = omega_membership(W, np.zeros(2), p, f, 1.0, 1.0)
        assert cross < 1e-12

    def test_vanishing_derivative_rejected(self):
        # f(x) = x^2 has f'(0) = 0: hypothesis violated at x_t = 0
        sq = NonlinearScalarFunction(
            id="square", value=lambda x: np.asarray(x) ** 2,
            derivative=lambda x: 2 * np.asarray(x, dtype=float),
            second_derivative=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0),
            derivative_sup=20.0, derivative_inf=0.0)
        p = make_instance(6, 10, f_id="identity", seed=72, s=2)
        with pytest.raises(ValueError, match="singular"):
            oracle_W(np.zeros(p.n), p, sq, 1.0, 1.0)


class TestMuConstants:
    def test_brute_force_oracle(self, rng):
        p = make_instance(8, 12, seed=73, s=2)
        f = get_function("2x+cos(x)")
        x_t = 0.2 * rng.standard_normal(p.n)
        beta, gamma = 0.9, 0.6
        W = rng.standard_normal(p.A.shape)
        mu1, mu2 = mu_constants(W, x_t, p, f, beta, gamma)
        d1 = f.derivative(p.A @ x_t)
        d2 = mean_value_diag(p.A @ p.x_star, p.A @ x_t, f).entries
        best1 = 0.0
        for i in range(p.n):
            for j in range(p.n):
                if i != j:
                    val = abs(beta * gamma * float(W[:, i] @ (d1 * d2 * p.A[:, j])))
                    best1 = max(best1, val)
        best2 = max(float(np.abs(beta * gamma * W[:, i] * d1).sum()) for i in range(p.n))
        assert mu1 == pytest.approx(best1, rel=1e-12)
        assert mu2 == pytest.approx(best2, rel=1e-12)

    def test_oracle_w_gives_coherence(self):
        p = make_instance(8, 12, f_id="identity", seed=74, s=2)
        f = get_function("identity")
        mu1, _ = mu_constants(p.A, np.zeros(p.n), p, f, 1.0, 1.0)
        G = np.abs(p.A.T @ p.A)
        np.fill_diagonal(G, 0.0)
        assert mu1 == pytest.approx(G.max(), rel=1e-12)

    def test_orthonormal_mu1_zero(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((5, 3)))
        x_true = np.array([0.5, 0.0, -1.0])
        p = ProblemInstance(A=Q, x_star=x_true, epsilon=np.zeros(5), y=Q @ x_true)
        f = get_function("identity")
        mu1, _ = mu_constants(Q, np.zeros(3), p, f, 1.0, 1.0)
        assert mu1 < 1e-12


class TestCertifiedRun:
    def test_noiseless_support_and_bound(self):
        p = make_instance(10, 20, seed=75, s=2)
        f = get_function("2x+cos(x)")
        cert = certified_run(p, f, 20)
        assert cert.support_ok_all()
        assert cert.bound_ok_all()
        assert cert.sigma == 0.0

    def test_noiseless_bound_is_pure_geometric(self):
        p = make_instance(10, 20, seed=76, s=2)
        cert = certified_run(p, get_function("2x+cos(x)"), 10)
        for row in cert.rows:
            assert row.bound == pytest.approx(cert.s * cert.c_x * cert.q ** row.t, rel=1e-12)

    def test_initial_error_below_bound(self):
        p = make_instance(10, 20, seed=77, s=2)
        cert = certified_run(p, get_function("2x+cos(x)"), 5)
        assert cert.rows[0].err_l2 == pytest.approx(float(np.linalg.norm(p.x_star)))
        assert cert.rows[0].err_l2 <= cert.rows[0].bound

    def test_linear_rate_in_regime(self):
        # s=1 keeps q = mu1 < 1; the error contracts at least at rate q every
        # step, and a run long enough for q^T to clear the target converges
        import math
        for seed in range(85, 95):
            p = make_instance(10, 20, seed=seed, s=1)
            probe = certified_run(p, get_function("2x+cos(x)"), 1)
            assert probe.regime_ok
            T = max(20, min(4000, math.ceil(
                math.log(1e-7 / (probe.s * probe.c_x)) / math.log(probe.q))))
            cert = certified_run(p, get_function("2x+cos(x)"), T)
            errs = cert.errors()
            assert errs[-1] < 1e-6
            ratios = errs[1:] / np.maximum(errs[:-1], 1e-300)
            # per-step contraction is q up to the theta float-guard terms
            allow = cert.q * (1 + 1e-9) + cert.meta["theta_abs_guard"] / np.maximum(errs[:-1], 1e-300)
            assert np.all(ratios <= allow)

    def test_noisy_bound_holds(self):
        for seed in (78, 79, 80):
            p = make_instance(10, 20, seed=seed, snr_db=18.0, s=2)
            f = get_function("2x+cos(x)")
            assert float(np.abs(p.epsilon).sum()) > 0
            cert = certified_run(p, f, 20)
            assert cert.support_ok_all()
            assert cert.bound_ok_all()
            assert cert.sigma == pytest.approx(float(np.abs(p.epsilon).sum()))

    def test_certificate_csv_and_summary(self, tmp_path):
        p = make_instance(10, 20, seed=81, s=2)
        cert = certified_run(p, get_function("2x+cos(x)"), 8)
        cert.write_csv(tmp_path / "cert.csv")
        lines = (tmp_path / "cert.csv").read_text().splitlines()
        assert lines[0] == "t,mu1,mu2,theta,err,bound,support_ok"
        assert len(lines) == 10
        cert.write_summary(tmp_path / "cert.json")
        import json
        summary = json.loads((tmp_path / "cert.json").read_text())
        assert {"q", "c_eps", "regime_ok", "support_ok_all"} <= set(summary)

    def test_omega_membership_many_instances(self, rng):
        # constructive witness on 100 random small instances
        f = get_function("2x+cos(x)")
        for k in range(100):
            p = make_instance(8, 12, seed=300 + k, s=2)
            x_t = 0.3 * rng.standard_normal(p.n)
            W = oracle_W(x_t, p, f, 1.0, 1.0)
            diag_err, cross = omega_membership(W, x_t, p, f, 1.0, 1.0)
            assert diag_err <= 1e-10
            assert cross < 1.0
