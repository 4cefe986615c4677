import numpy as np
import pytest

from torusjet.bundle import (BundleSpec, automorphy_factor, curvature_residual,
                             normal_order, transport_loop, word_terms)
from torusjet.geometry import GeometryContext
from torusjet.sections import (SectionField, antiholomorphic_part,
                               covariant_derivative, evaluate,
                               make_monomial_section, make_reference_section)
from torusjet.bundle import transport_segment


def spec_nk(n, k, m1=1):
    return BundleSpec(GeometryContext(n=n, k=k), m_plus_1=m1)


class TestAutomorphy:
    def test_zero_vector_gives_one(self):
        spec = spec_nk(1, 4)
        z = np.array([0.3 + 0.7j])
        assert automorphy_factor(np.array([0j]), z, spec) == 1.0 + 0j

    def test_cocycle_identity(self):
        rng = np.random.default_rng(7)
        for k in (1, 3, 4):
            spec = spec_nk(1, k)
            worst = 0.0
            for _ in range(60):
                lam = rng.integers(-3, 4, 2) @ np.array([1, 1j])
                mu = rng.integers(-3, 4, 2) @ np.array([1, 1j])
                z = rng.uniform(-1, 1, 2) @ np.array([1, 1j])
                lhs = automorphy_factor(np.array([lam + mu]), np.array([z]), spec)
                rhs = (automorphy_factor(np.array([lam]), np.array([z + mu]), spec)
                       * automorphy_factor(np.array([mu]), np.array([z]), spec))
                worst = max(worst, abs(lhs - rhs))
            assert worst <= 1e-12

    def test_unit_modulus(self):
        spec = spec_nk(2, 2)
        lam = np.array([2 - 1j, 3 + 2j])
        z = np.array([0.3 + 0.1j, -0.4 + 0.9j])
        assert abs(abs(automorphy_factor(lam, z, spec)) - 1.0) <= 1e-14

    def test_rejects_non_lattice_vector(self):
        spec = spec_nk(1, 1)
        with pytest.raises(ValueError):
            automorphy_factor(np.array([0.5 + 0j]), np.array([0j]), spec)

    def test_norm_periodicity_of_sections(self):
        spec = spec_nk(1, 4)
        s = make_reference_section([0.37, 0.61], 0, spec)
        ctx = spec.ctx
        rng = np.random.default_rng(1)
        for _ in range(10):
            z = rng.uniform(0, 1, 2)
            lam = rng.integers(-2, 3, 2).astype(float)
            v0 = evaluate(s, z)[0]
            v1 = evaluate(s, z + lam)[0]
            e = automorphy_factor(ctx.to_complex(lam), ctx.to_complex(z), spec)
            assert abs(v1 - e * v0) <= 1e-12
            assert abs(abs(v1) - abs(v0)) <= 1e-12


class TestHolonomy:
    def test_loop_phase_matches_curvature(self):
        spec = spec_nk(1, 4)
        x = np.array([0.2 + 0.3j])
        h = 0.05
        hol = transport_loop(x, np.array([1.0 + 0j]), np.array([1j]), h, spec)
        # F = -i c_k omega0: holonomy exp(-F h^2) = exp(i c_k h^2) for the
        # (x, y)-ordered loop; the clockwise loop gives exp(-i c_k h^2)
        assert abs(hol - np.exp(1j * spec.c_k * h ** 2)) <= 1e-10
        hol_cw = transport_loop(x, np.array([1j]), np.array([1.0 + 0j]), h, spec)
        assert abs(hol_cw - np.exp(-1j * spec.c_k * h ** 2)) <= 1e-10

    def test_numeric_transport_converges_cubically(self):
        # midpoint-substep transport differs from the exact one by O(h^3)
        spec = spec_nk(1, 2)
        x = np.array([0.4 + 0.1j])
        errs = []
        for h in (0.2, 0.1, 0.05):
            exact = transport_loop(x, np.array([1 + 0j]), np.array([1j]), h, spec)
            # with exact segment integrals the substep count cannot matter
            sub = transport_loop(x, np.array([1 + 0j]), np.array([1j]), h, spec,
                                 substeps=3)
            errs.append(abs(exact - sub))
        assert max(errs) <= 1e-12

    def test_curvature_residual(self):
        for n, k in ((1, 1), (1, 4), (2, 2)):
            spec = spec_nk(n, k)
            x = np.random.default_rng(0).uniform(0, 1, 2 * n)
            assert curvature_residual(spec, x) <= 1e-10


class TestWordCalculus:
    def test_commutator_normal_ordering(self):
        c_k = 8 * np.pi
        # Db D = D Db - c_k/2 on matching indices
        out = dict()
        for a, b, c in normal_order((("Db", 0), ("D", 0)), c_k):
            out[(a, b)] = c
        assert np.isclose(out[((0,), (0,))], 1.0)
        assert np.isclose(out[((), ())], -c_k / 2.0)

    def test_gaussian_words(self):
        # D^a applied to the bare Gaussian gives (-c_k/2)^a wbar^a G
        c_k = 2 * np.pi
        terms = dict(word_terms((("D", 0), ("D", 0)), (0,), c_k, 1))
        assert np.isclose(terms[((0,), (2,), 0, 0)], (c_k / 2) ** 2)

    def test_dbar_annihilates_gaussian(self):
        c_k = 2 * np.pi
        terms = dict(word_terms(((("Db", 0))[0:0] or ("Db", 0),), (0,), c_k, 1))
        # only cutoff-derivative terms survive
        assert all(d >= 1 for (_, _, _, d) in terms)


class TestCovariantDerivative:
    def test_atom_gradient_vanishes_at_center(self):
        spec = spec_nk(1, 4)
        s = make_reference_section([0.5, 0.5], 0, spec)
        cd = covariant_derivative(s, np.array([0.5, 0.5]), 1)
        assert np.max(np.abs(cd)) <= 1e-10

    def test_value_at_gk_distance_two(self):
        # forced by exp(-(1/4) 2^2); uncut atom at k = 16 so neither cutoff
        # nor translates perturb the profile
        spec = spec_nk(1, 16)
        s = make_reference_section([0.5, 0.5], 0, spec, cutoff=False)
        d = 2.0 / np.sqrt(spec.c_k)
        v = covariant_derivative(s, np.array([0.5 + d, 0.5]), 0)
        assert abs(abs(v[0]) - np.exp(-1.0)) <= 1e-6

    def test_against_transport_finite_differences(self):
        spec = spec_nk(1, 4)
        rng = np.random.default_rng(0)
        s = make_reference_section([0.5, 0.5], 0, spec)
        s = s.with_atoms(make_monomial_section([0.3, 0.7], (1,), 0, spec).atoms)
        s = s.with_atoms(make_monomial_section([0.8, 0.2], (2,), 0, spec).atoms)
        ctx = spec.ctx
        x = np.array([0.45, 0.55])
        h_gk = 1e-3
        hg = h_gk / np.sqrt(spec.c_k)

        def transported(pt):
            t = transport_segment(ctx.to_complex(pt), ctx.to_complex(x), spec)
            return t * evaluate(s, pt)[0]

        cd1 = covariant_derivative(s, x, 1)
        for i, v in enumerate(np.eye(2)):
            fd = (transported(x + hg * v) - transported(x - hg * v)) / (2 * h_gk)
            assert abs(cd1[0, i] - fd) / abs(fd) <= 1e-5

        cd2 = covariant_derivative(s, x, 2)
        for i in range(2):
            for j in range(2):
                u, v = np.eye(2)[i], np.eye(2)[j]
                acc = 0.0

                def T(a, b):
                    return transport_segment(ctx.to_complex(a), ctx.to_complex(b), spec)

                for su in (1, -1):
                    for sv in (1, -1):
                        pt = x + hg * (su * u + sv * v)
                        mid = x + hg * su * u
                        acc += su * sv * T(pt, mid) * T(mid, x) * evaluate(s, pt)[0]
                fd = acc / (4 * h_gk ** 2)
                assert abs(cd2[0, i, j] - fd) <= 2e-5 * max(1.0, abs(fd))

    def test_leibniz_linearity(self):
        spec = spec_nk(1, 4)
        a = make_reference_section([0.2, 0.3], 0, spec)
        b = make_monomial_section([0.6, 0.7], (1,), 0, spec)
        x = np.array([0.4, 0.5])
        for order in (0, 1, 2):
            da = covariant_derivative(a, x, order)
            db = covariant_derivative(b, x, order)
            dsum = covariant_derivative(a + b, x, order)
            assert np.allclose(dsum, da + db, atol=1e-14)
            dscaled = covariant_derivative(a.scaled(2.5 - 1j), x, order)
            assert np.allclose(dscaled, (2.5 - 1j) * da, atol=1e-14)

    def test_order_cap(self):
        spec = spec_nk(1, 1)
        s = make_reference_section([0.5, 0.5], 0, spec)
        with pytest.raises(ValueError):
            covariant_derivative(s, np.array([0.5, 0.5]), 4)


class TestAntiholomorphicPart:
    def test_uncut_atom_is_holomorphic(self):
        spec = spec_nk(1, 4)
        s = make_reference_section([0.5, 0.5], 0, spec, cutoff=False)
        for x in ([0.52, 0.48], [0.1, 0.9]):
            assert np.max(np.abs(antiholomorphic_part(s, np.array(x), 0))) <= 1e-12

    def test_cut_atom_inside_plateau(self):
        spec = spec_nk(1, 4)
        s = make_reference_section([0.5, 0.5], 0, spec)
        # well inside R1 the cutoff is constant 1
        assert np.max(np.abs(antiholomorphic_part(s, np.array([0.52, 0.5]), 0))) <= 1e-12

    def test_periodized_uncut_atom_tail_bound(self):
        spec = spec_nk(1, 4)
        s = make_reference_section([0.5, 0.5], 0, spec, cutoff=False)
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(30):
            x = rng.uniform(0, 1, 2)
            worst = max(worst, float(np.max(np.abs(antiholomorphic_part(s, x, 0)))))
        assert worst <= 1e-6  # only lattice-tail / roundoff contributions

    def test_cutoff_ramp_support(self):
        spec = spec_nk(1, 4)
        s = make_reference_section([0.5, 0.5], 0, spec)
        r1 = spec.c_k ** (1 / 6)
        d_in = 0.5 * r1 / np.sqrt(spec.c_k)
        d_mid = 1.5 * r1 / np.sqrt(spec.c_k)
        inside = np.max(np.abs(antiholomorphic_part(s, np.array([0.5 + d_in, 0.5]), 0)))
        annulus = np.max(np.abs(antiholomorphic_part(s, np.array([0.5 + d_mid, 0.5]), 0)))
        assert inside <= 1e-12
        assert annulus > 1e-3
