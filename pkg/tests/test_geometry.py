import numpy as np
import pytest

from torusjet.errors import ChartDomainError, DegenerateFormError, TamingError
from torusjet.geometry import (GeometryContext, TwoFormField,
                               compatible_almost_complex, constant_two_form,
                               moser_darboux, rescaled_distance,
                               standard_J_field, standard_J_matrix,
                               standard_omega_field, standard_omega_matrix)


def random_constant_form(n, scale, rng):
    dim = 2 * n
    E = rng.standard_normal((dim, dim))
    E = E - E.T
    E *= scale / np.linalg.norm(E, 2)
    return constant_two_form(n, standard_omega_matrix(n) + E), E


def perturbed_form_x1(n, eps=0.05):
    """omega0 with the dx1^dy1 block scaled by (1 + eps*x1); closed."""
    base = standard_omega_matrix(n)

    def ev(pts):
        M = np.broadcast_to(base, (pts.shape[0],) + base.shape).copy()
        f = 1 + eps * pts[:, 0]
        M[:, 0, 1] = f
        M[:, 1, 0] = -f
        return M

    def jac(pts):
        out = np.zeros((pts.shape[0],) + base.shape + (2 * n,))
        out[:, 0, 1, 0] = eps
        out[:, 1, 0, 0] = -eps
        return out

    return TwoFormField(n=n, evaluator=ev, jacobian=jac)


class TestGeometryContext:
    def test_omega0_antisymmetric_unit_determinant(self):
        for n in (1, 2):
            M = standard_omega_matrix(n)
            assert np.allclose(M, -M.T)
            assert np.isclose(np.linalg.det(M), 1.0)

    def test_J0_squares_to_minus_identity_and_isometry(self):
        for n in (1, 2):
            J = standard_J_matrix(n)
            assert np.allclose(J @ J, -np.eye(2 * n))
            assert np.allclose(J.T @ J, np.eye(2 * n))

    def test_compatibility_of_standard_pair(self):
        for n in (1, 2):
            O = standard_omega_matrix(n)
            J = standard_J_matrix(n)
            # g(u, v) = omega0(u, J0 v) is the flat metric
            assert np.allclose(O @ J, -np.eye(2 * n) @ np.eye(2 * n) * -1.0)
            assert np.allclose(O @ J, np.eye(2 * n))

    def test_metric_rescale(self):
        ctx = GeometryContext(n=1, k=4)
        x, y = np.zeros(2), np.array([0.3, 0.1])
        flat = np.linalg.norm(y)
        assert np.isclose(rescaled_distance(x, y, ctx), np.sqrt(ctx.c_k) * flat)

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            GeometryContext(n=3, k=1)
        with pytest.raises(ValueError):
            GeometryContext(n=1, k=0)


class TestRescaledDistance:
    def test_zero(self):
        ctx = GeometryContext(n=1, k=3)
        assert rescaled_distance([0.2, 0.7], [0.2, 0.7], ctx) == 0.0

    def test_forced_by_c_k(self):
        ctx = GeometryContext(n=1, k=1)
        d = rescaled_distance([0, 0], [0.5, 0], ctx)
        assert np.isclose(d, np.sqrt(2 * np.pi) * 0.5)
        assert np.isclose(d, 1.2533, atol=1e-4)

    def test_lattice_wrap(self):
        ctx = GeometryContext(n=1, k=4)
        d = rescaled_distance([0, 0], [0.9, 0], ctx)
        assert np.isclose(d, np.sqrt(8 * np.pi) * 0.1)
        assert np.isclose(d, 0.5013, atol=1e-4)

    def test_metric_axioms_on_random_triples(self):
        ctx = GeometryContext(n=2, k=2)
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b, c = rng.uniform(0, 1, (3, 4))
            dab = rescaled_distance(a, b, ctx)
            assert np.isclose(dab, rescaled_distance(b, a, ctx))
            assert dab <= rescaled_distance(a, c, ctx) + rescaled_distance(c, b, ctx) + 1e-12


class TestCompatibleAlmostComplex:
    def test_standard_pair_is_fixed_point(self):
        for n in (1, 2):
            pts = np.random.default_rng(0).uniform(0, 1, (6, 2 * n))
            J = compatible_almost_complex(standard_omega_field(n),
                                          standard_J_field(n), pts)
            assert J.metadata["max_deviation"] == 0.0
            assert J.square_residual(pts) <= 1e-12

    def test_first_frame_step_is_J_e1(self):
        # with omega = omega0 the first pair is (e1, J0 e1) and the returned
        # structure maps e1 to J0 e1 exactly
        n = 2
        pts = np.zeros((1, 4))
        J = compatible_almost_complex(standard_omega_field(n),
                                      standard_J_field(n), pts)
        e1 = np.array([1.0, 0, 0, 0])
        assert np.allclose(J(pts)[0] @ e1, standard_J_matrix(n) @ e1)

    def test_perturbed_form_n2(self):
        n = 2
        E = np.zeros((4, 4))
        E[0, 2] = 0.05
        E[2, 0] = -0.05  # 0.05 dx1 ^ dx2
        omega = constant_two_form(n, standard_omega_matrix(n) + E)
        pts = np.random.default_rng(1).uniform(0, 1, (10, 4))
        J = compatible_almost_complex(omega, standard_J_field(n), pts)
        assert J.square_residual(pts) <= 1e-10
        assert J.metadata["max_deviation"] <= 0.5
        # compatibility identities at random probes
        Jm = J(pts)
        Om = omega(pts)
        assert np.max(np.abs(np.einsum("nai,nab,nbj->nij", Jm, Om, Jm) - Om)) <= 1e-10
        v = np.random.default_rng(2).standard_normal((10, 4))
        pos = np.einsum("ni,nij,nj->n", v, Om, np.einsum("nij,nj->ni", Jm, v))
        assert np.all(pos > 0)

    def test_compatibility_identities_random_forms(self):
        rng = np.random.default_rng(7)
        for n in (1, 2):
            for _ in range(25):
                omega, E = random_constant_form(n, rng.uniform(0.01, 0.1), rng)
                pts = rng.uniform(0, 1, (3, 2 * n))
                J = compatible_almost_complex(omega, standard_J_field(n), pts, rng=rng)
                assert J.square_residual(pts) <= 1e-10
                Jm = J(pts)
                Om = omega(pts)
                assert np.max(np.abs(
                    np.einsum("nai,nab,nbj->nij", Jm, Om, Jm) - Om)) <= 1e-10

    def test_taming_failure_rejected(self):
        n = 1
        omega = constant_two_form(n, -standard_omega_matrix(n))
        pts = np.zeros((1, 2))
        with pytest.raises(TamingError):
            compatible_almost_complex(omega, standard_J_field(n), pts)

    def test_degenerate_form_rejected(self):
        n = 2
        M = standard_omega_matrix(n)
        M2 = M.copy()
        M2[2:, 2:] = 0.0  # kills the second block
        with pytest.raises((DegenerateFormError, TamingError)):
            compatible_almost_complex(constant_two_form(n, M2),
                                      standard_J_field(n), np.zeros((1, 4)))


class TestMoserDarboux:
    def test_identity_form_gives_identity_chart(self):
        chart = moser_darboux(standard_omega_field(1), np.zeros(2), 0.5, 0.05)
        assert chart.residual <= 1e-14
        pts = np.random.default_rng(0).uniform(-0.3, 0.3, (10, 2))
        assert np.max(np.abs(chart.inverse(pts) - pts)) <= 1e-14

    def test_perturbed_form_residual(self):
        omega1 = perturbed_form_x1(1)
        ax = np.linspace(-0.5, 0.5, 50)
        gx, gy = np.meshgrid(ax, ax)
        val = np.stack([gx.ravel(), gy.ravel()], 1)
        val = val[np.linalg.norm(val, axis=1) <= 0.5]
        chart = moser_darboux(omega1, np.zeros(2), 0.5, 0.01, validation_points=val)
        assert chart.residual <= 1e-6
        pts = np.random.default_rng(1).uniform(-0.3, 0.3, (10, 2))
        assert chart.roundtrip_defect(pts) <= 1e-8

    def test_rk4_order(self):
        # residual ratio across one step halving sits in the 4th-order window
        base = standard_omega_matrix(1)

        def ev(pts):
            M = np.broadcast_to(base, (pts.shape[0], 2, 2)).copy()
            f = 1 + 0.4 * np.sin(2 * np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1])
            M[:, 0, 1] = f
            M[:, 1, 0] = -f
            return M

        def jac(pts):
            out = np.zeros((pts.shape[0], 2, 2, 2))
            dfx = 0.8 * np.pi * np.cos(2 * np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1])
            dfy = -0.4 * np.pi * np.sin(2 * np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])
            out[:, 0, 1, 0] = dfx; out[:, 1, 0, 0] = -dfx
            out[:, 0, 1, 1] = dfy; out[:, 1, 0, 1] = -dfy
            return out

        omega1 = TwoFormField(n=1, evaluator=ev, jacobian=jac)
        rng = np.random.default_rng(5)
        val = rng.uniform(-0.5, 0.5, (80, 2))
        val = val[np.linalg.norm(val, axis=1) <= 0.5]
        r1 = moser_darboux(omega1, np.zeros(2), 0.5, 0.2, validation_points=val).residual
        r2 = moser_darboux(omega1, np.zeros(2), 0.5, 0.1, validation_points=val).residual
        assert 8.0 <= r1 / r2 <= 32.0

    def test_degenerate_interpolant_rejected(self):
        bad = constant_two_form(1, -standard_omega_matrix(1))
        with pytest.raises(DegenerateFormError, match="interpolant degenerate"):
            moser_darboux(bad, np.zeros(2), 0.5, 0.05)

    def test_alpha_vanishes_at_center(self):
        # the chart fixes its center
        omega1 = perturbed_form_x1(1)
        chart = moser_darboux(omega1, np.zeros(2), 0.5, 0.02)
        assert np.max(np.abs(chart.inverse(np.zeros((1, 2))))) <= 1e-12

    def test_n2_perturbed_form(self):
        omega1 = perturbed_form_x1(2)
        rng = np.random.default_rng(2)
        val = rng.uniform(-0.5, 0.5, (200, 4))
        val = val[np.linalg.norm(val, axis=1) <= 0.5]
        chart = moser_darboux(omega1, np.zeros(4), 0.5, 0.02, validation_points=val)
        assert chart.residual <= 1e-6

    def test_closedness_residual(self):
        omega1 = perturbed_form_x1(2)
        pts = np.random.default_rng(0).uniform(-0.4, 0.4, (10, 4))
        assert omega1.closedness_residual(pts) <= 1e-10
