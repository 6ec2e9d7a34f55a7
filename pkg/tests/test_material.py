import pytest
import numpy as np
from e2tfa.exceptions import InvalidInputError
from e2tfa.material import (
    PhaseProps,
    PhaseState,
    damage_omega,
    elastic_constants,
    return_map,
    tangent_check,
    update,
    update_batch,
)
from e2tfa.voigt import SymTensor2, deviatoric_and_eq, principal_values

PLANE = (0, 1, 3)


class TestPhaseProps:
    def test_from_dict(self, matrix, fiber):
        assert matrix.E == 2670.0
        assert matrix.plasticity_enabled and matrix.damage_enabled
        assert not fiber.plasticity_enabled and not fiber.damage_enabled
        assert PhaseProps.from_dict(matrix.to_dict()) == matrix

    def test_unknown_key(self):
        with pytest.raises(InvalidInputError) as exc:
            PhaseProps.from_dict({"elastic_modulus": 1.0, "poissons_ratio": 0.2, "colour": 1})
        assert exc.value.details["key"] == "colour"

    def test_validation(self, matrix):
        with pytest.raises(InvalidInputError):
            matrix._replace(kappa_D=0.04).validate()
        with pytest.raises(InvalidInputError):
            matrix._replace(nu=0.5).validate()
        with pytest.raises(InvalidInputError):
            matrix._replace(sigma_y=-1.0).validate()

    def test_models(self, matrix, fiber):
        m1 = matrix.with_model("model-1")
        assert m1.damage_enabled and not m1.plasticity_enabled
        m2 = matrix.with_model("model-2")
        assert m2.plasticity_enabled and not m2.damage_enabled
        assert not matrix.with_model("elastic").plasticity_enabled
        # no parameters, nothing to switch on
        assert fiber.with_model("model-3") == fiber
        with pytest.raises(InvalidInputError):
            matrix.with_model("model-4")


class TestDamageLaw:
    def test_end_points(self, matrix):
        assert damage_omega(0.0, matrix) == 0.0
        assert damage_omega(0.009, matrix) == 0.0
        assert damage_omega(0.0315, matrix) == 1.0
        assert damage_omega(0.1, matrix) == 1.0
        with pytest.raises(InvalidInputError):
            damage_omega(-1.0, matrix)

    def test_linear_softening(self, matrix):
        kappa = np.linspace(0.009, 0.0315, 11)
        nominal = (1 - damage_omega(kappa, matrix)) * kappa
        expected = 0.009 * (0.0315 - kappa) / (0.0315 - 0.009)
        assert np.allclose(nominal, expected, atol=1e-15)
        assert np.all(np.diff(damage_omega(kappa, matrix)) > 0)


class TestReturnMap:
    def test_consistency(self, matrix):
        eps = SymTensor2.strain(0.02, -0.01, -0.005, 0.01, 0.0, 0.004)
        eps_e, dzeta, r_new, _ = return_map(eps, 0.0, matrix)
        L = elastic_constants(matrix.E, matrix.nu).L
        _, q = deviatoric_and_eq(L @ eps_e.v)
        assert dzeta > 0
        assert r_new == dzeta
        assert q == pytest.approx(matrix.sigma_y + matrix.R_inf * r_new, rel=1e-10)
        # volumetric part is elastic
        assert eps_e.v[:3].sum() == pytest.approx(eps.v[:3].sum(), abs=1e-15)

    def test_elastic_trial(self, matrix):
        eps = SymTensor2.strain(0.001, 0, 0, 0, 0, 0)
        eps_e, dzeta, r_new, Lep = return_map(eps, 0.0, matrix)
        assert dzeta == 0.0 and r_new == 0.0
        assert eps_e == eps
        assert np.array_equal(Lep.m, elastic_constants(matrix.E, matrix.nu).L)

    def test_needs_plasticity(self, fiber):
        with pytest.raises(InvalidInputError):
            return_map(SymTensor2.strain(0, 0, 0, 0, 0, 0), 0.0, fiber)


class TestUpdate:
    def test_elastic(self, fiber):
        eps = np.array([0.001, -0.002, 0.0005, 0.001, 0.0, -0.0003])
        res = update(PhaseState.initial(), eps, fiber)
        L = elastic_constants(fiber.E, fiber.nu).L
        assert np.allclose(res.stress, L @ eps, rtol=1e-14)
        assert np.allclose(res.mu, 0.0, atol=1e-15)
        assert np.allclose(res.dmu_deps, 0.0, atol=1e-14)
        assert res.dissipation == 0.0

    def test_damage_only(self, matrix):
        p = matrix.with_model("model-1")
        eps = np.array([0.02, 0, 0, 0, 0, 0])
        res = update(PhaseState.initial(), eps, p)
        omega = damage_omega(0.02, p)
        L = elastic_constants(p.E, p.nu).L
        assert res.new_state.omega == pytest.approx(omega)
        assert np.allclose(res.stress, (1 - omega) * L @ eps)
        # mu = eps - L^-1 sigma = omega eps
        assert np.allclose(res.mu, omega * eps, atol=1e-15)
        assert res.dissipation > 0

    def test_full_damage(self, matrix):
        eps = np.array([0.04, -0.01, 0.0, 0.01, 0.0, 0.0])
        res = update(PhaseState.initial(), eps, matrix, PLANE)
        assert res.new_state.omega == 1.0
        assert np.array_equal(res.stress, np.zeros(6))
        assert np.array_equal(res.dsig_deps, np.zeros((6, 6)))
        assert np.allclose(res.mu[list(PLANE)], eps[list(PLANE)])
        assert res.mu[2] == 0.0

    def test_unloading_keeps_damage(self, matrix):
        p = matrix.with_model("model-1")
        loaded = update(PhaseState.initial(), np.array([0.02, 0, 0, 0, 0, 0]), p)
        unloaded = update(loaded.new_state, np.array([0.01, 0, 0, 0, 0, 0]), p)
        assert unloaded.new_state.omega == loaded.new_state.omega
        assert unloaded.new_state.kappa == loaded.new_state.kappa
        L = elastic_constants(p.E, p.nu).L
        # secant unloading, no tangent contribution from the damage law
        assert np.allclose(unloaded.dsig_deps, (1 - loaded.new_state.omega) * L)

    def test_rejects_non_finite(self, matrix):
        with pytest.raises(InvalidInputError):
            update(PhaseState.initial(), np.array([np.inf, 0, 0, 0, 0, 0]), matrix)

    def test_batch_matches_single(self, matrix):
        rng = np.random.default_rng(11)
        eps = rng.uniform(-0.02, 0.02, size=(5, 6))
        batch = update_batch(PhaseState.initial(5), eps, matrix)
        for k in range(5):
            single = update(PhaseState.initial(), eps[k], matrix)
            assert np.allclose(batch.stress[k], single.stress, rtol=1e-13, atol=1e-12)
            assert np.allclose(batch.mu[k], single.mu, rtol=1e-13, atol=1e-16)

    def test_monotone_history(self, matrix):
        state = PhaseState.initial()
        path = np.concatenate(
            [np.linspace(0, 0.025, 20), np.linspace(0.025, -0.01, 20), np.linspace(-0.01, 0.03, 20)]
        )
        for e in path:
            res = update(state, np.array([e, -0.3 * e, -0.3 * e, 0.2 * e, 0, 0]), matrix)
            new = res.new_state
            assert new.omega >= state.omega
            assert new.r >= state.r
            assert new.kappa >= state.kappa
            assert new.eps_p_eq >= state.eps_p_eq
            assert res.dissipation >= -1e-12
            state = new


class TestTangents:
    @pytest.mark.parametrize(
        "eps",
        [
            # plastic, below damage initiation
            [0.004, -0.008, 0.002, 0.012, 0.001, 0.0005],
            # damaging and plastic
            [0.014, -0.003, -0.002, 0.003, 0.001, 0.0015],
            # damaging, elastic
            [0.012, 0.002, -0.001, 0.001, 0.0, 0.0],
        ],
    )
    def test_full_tangents(self, matrix, eps):
        assert tangent_check(PhaseState.initial(), np.array(eps), matrix) < 1e-5

    def test_plane_tangents(self, matrix):
        eps = np.array([0.015, -0.004, 0.0, 0.003, 0.0, 0.0])
        assert tangent_check(PhaseState.initial(), eps, matrix, active=PLANE) < 1e-5

    def test_from_loaded_state(self, matrix):
        rng = np.random.default_rng(5)
        start = np.array([0.011, -0.003, -0.002, 0.002, 0, 0])
        state = update(PhaseState.initial(), start, matrix).new_state
        for _ in range(10):
            eps = np.array([0.013, -0.003, -0.002, 0.002, 0, 0]) + rng.uniform(-5e-4, 5e-4, 6)
            assert tangent_check(state, eps, matrix) < 1e-5

    @pytest.mark.parametrize("active", [(0, 1, 2, 3, 4, 5), PLANE])
    def test_random_smooth_states(self, matrix, active):
        """Loaded states away from the damage threshold, the yield surface and repeated principal strains"""
        rng = np.random.default_rng(13)
        L = elastic_constants(matrix.E, matrix.nu).L
        margin = 1e-5
        checked = 0
        for _ in range(1000):
            if checked == 50:
                break
            start = np.zeros(6)
            start[list(active)] = rng.uniform(-0.015, 0.015, len(active))
            state = update(PhaseState.initial(), start, matrix, active).new_state
            eps = start.copy()
            eps[list(active)] += rng.uniform(-0.003, 0.003, len(active))
            if state.omega >= 1.0:
                continue
            principal = principal_values(eps)
            kinks = [0.0, state.kappa, matrix.kappa_D, matrix.kappa_F, principal[1]]
            if min(abs(principal[0] - k) for k in kinks) < margin:
                continue
            _, q = deviatoric_and_eq(L @ (eps - state.eps_p))
            if abs(q - matrix.sigma_y - matrix.R_inf * state.r) < 0.05:
                continue
            assert tangent_check(state, eps, matrix, active=active) < 1e-5
            checked += 1
        assert checked == 50

    def test_step_range(self, matrix):
        with pytest.raises(InvalidInputError):
            tangent_check(PhaseState.initial(), np.zeros(6), matrix, h=1e-3)
