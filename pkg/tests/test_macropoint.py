import pytest
import numpy as np
from e2tfa.exceptions import ConvergenceError, InvalidInputError
from e2tfa.macropoint import (
    DEFECT_HEADER,
    LoadHistory,
    Tolerances,
    defect_row,
    iter_history,
    leg_increments,
    macro_tangent,
    macro_tangent_fd,
    partition_props,
    record_header,
    record_row,
    run_history,
)
from e2tfa.material import PhaseState, elastic_constants, update
from e2tfa.voigt import deviatoric_and_eq

PLANE = [0, 1, 3]


def strain_history(*targets, substeps=10, control="strain"):
    return LoadHistory.build([{"target": t, "substeps": substeps} for t in targets], control)


def final_state(pp, props, history, tol=Tolerances()):
    for _, state in iter_history(pp, props, history, tol):
        pass
    return state


class TestLoadHistory:
    def test_uniaxial(self):
        h = strain_history([0.01, 0, 0, 0, 0, 0], control="uniaxial-12")
        assert h.mask.tolist() == [False, False, False, True, False, False]
        assert strain_history([0.01, 0, 0, 0, 0, 0]).mask.all()

    def test_invalid(self):
        for control in ["uniaxial-44", "stress", 3, ["stress"] * 6, ["strain"] * 5]:
            with pytest.raises(InvalidInputError):
                strain_history([0.01, 0, 0, 0, 0, 0], control=control)
        with pytest.raises(InvalidInputError):
            strain_history([0.01, 0, 0])
        with pytest.raises(InvalidInputError):
            strain_history([0.01, 0, 0, 0, 0, 0], substeps=0)
        with pytest.raises(InvalidInputError):
            strain_history([np.nan, 0, 0, 0, 0, 0])
        with pytest.raises(InvalidInputError):
            LoadHistory.build([], "strain")

    def test_increments(self):
        h = strain_history([0.01, 0.002, 0, 0, 0, 0], [-0.004, 0, 0, 0, 0, 0], substeps=4)
        steps = list(leg_increments(np.zeros(6), h))
        assert [leg for leg, _ in steps] == [0] * 4 + [1] * 4
        total = sum(d for _, d in steps[:4])
        assert np.allclose(total, [0.01, 0.002, 0, 0, 0, 0])
        assert np.allclose(total + sum(d for _, d in steps[4:]), [-0.004, 0, 0, 0, 0, 0])

    def test_increments_skip_stress_components(self):
        h = strain_history([0.01, 0.5, 0, 0, 0, 0], substeps=2, control="uniaxial-11")
        for _, d in leg_increments(np.zeros(6), h):
            assert d.tolist() == [0.005, 0, 0, 0, 0, 0]

    def test_missing_phase(self, pp2d, matrix):
        with pytest.raises(InvalidInputError):
            partition_props(pp2d, {"matrix": matrix})


class TestHomogeneousPoint:
    def test_matches_material_update(self, homogeneous3d, matrix):
        history = strain_history(
            [0.015, -0.004, -0.003, 0.006, 0.001, 0.002], [0.004, 0, 0, 0, 0, 0], substeps=15
        )
        state = PhaseState.initial()
        eps = np.zeros(6)
        for rec, (_, d) in zip(
            run_history(homogeneous3d, [matrix], history), leg_increments(eps, history)
        ):
            eps = eps + d
            res = update(state, eps, matrix)
            state = res.new_state
            assert np.allclose(rec.sigma_o, res.stress, rtol=1e-10, atol=1e-10)
            assert np.allclose(rec.mu_bar[0], res.mu, rtol=1e-10, atol=1e-14)
            assert rec.omega[0] == state.omega
            assert rec.stress_defect < 1e-10

    def test_uniaxial_damage_to_failure(self, homogeneous2d, matrix):
        p = matrix.with_model("model-1")
        history = strain_history([0.04, 0, 0, 0, 0, 0], substeps=100, control="uniaxial-11")
        records = run_history(homogeneous2d, [p], history)
        sig = np.array([rec.sigma_o for rec in records])
        peak = sig[:, 0].max()
        assert peak > 0
        for rec in records:
            assert abs(rec.sigma_o[1]) <= 1e-6 * np.linalg.norm(rec.sigma_o) + 1e-9
            assert abs(rec.sigma_o[3]) <= 1e-6 * np.linalg.norm(rec.sigma_o) + 1e-9
        first = records[0]
        # plane strain Poisson contraction before damage starts
        assert first.eps_o[1] == pytest.approx(-0.3 / 0.7 * first.eps_o[0], rel=1e-5)
        last = records[-1]
        assert last.omega[0] == 1.0
        assert np.abs(last.sigma_o).max() < 1e-4 * peak
        assert np.allclose(last.mu_bar[0, PLANE], last.eps_bar[0, PLANE], atol=1e-12)

    def test_damage_cycle_unloads_to_zero(self, homogeneous2d, matrix):
        p = matrix.with_model("model-1")
        history = strain_history([0.02, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0])
        state = final_state(homogeneous2d, [p], history)
        assert 0 < state.phase_states[0].omega < 1
        assert np.allclose(state.sigma_o, 0, atol=1e-10)
        assert np.allclose(state.mu_bar, 0, atol=1e-14)

    def test_plastic_cycle_leaves_eigenstrain(self, homogeneous3d, matrix):
        p = matrix.with_model("model-2")
        history = strain_history([0.03, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0])
        state = final_state(homogeneous3d, [p], history)
        assert state.phase_states[0].r > 0
        assert np.abs(state.sigma_o).max() > 1.0
        assert np.allclose(state.mu_bar[0], state.phase_states[0].eps_p, atol=1e-12)


class TestTwoPhasePoint:
    def test_damage_onset(self, pp2d, phases, matrix):
        props = partition_props(pp2d, phases)
        records = run_history(pp2d, props, strain_history([0.03, 0, 0, 0, 0, 0], substeps=60))
        n = next(k for k, rec in enumerate(records) if rec.omega[1] > 0)
        assert n > 0
        assert records[n - 1].kappa[1] <= matrix.kappa_D < records[n].kappa[1]
        assert any(rec.eps_p_eq[1] > 0 for rec in records)
        # the elastic fiber never degrades
        assert all(rec.omega[0] == 0 and rec.r[0] == 0 for rec in records)

    def test_history_invariants(self, pp2d, phases):
        props = partition_props(pp2d, phases)
        history = strain_history([0.03, 0.004, 0, 0.006, 0, 0], [0.01, 0, 0, 0, 0, 0], substeps=30)
        records = run_history(pp2d, props, history)
        omega = np.array([rec.omega for rec in records])
        dissipation = np.array([rec.dissipation for rec in records])
        assert np.all(np.diff(omega, axis=0) >= 0)
        assert np.all(np.diff(dissipation) >= -1e-12 * dissipation.max())
        assert max(rec.total_residual for rec in records) < 1e-6
        again = run_history(pp2d, props, history)
        for a, b in zip(records, again):
            assert np.array_equal(a.sigma_o, b.sigma_o)

    def test_macro_tangent(self, pp2d, phases):
        props = partition_props(pp2d, {k: p.with_model("model-2") for k, p in phases.items()})
        tol = Tolerances(newton_atol=1e-14, newton_rtol=1e-13)
        state = final_state(
            pp2d, props, strain_history([0.015, 0.002, 0, 0.004, 0, 0], substeps=15), tol
        )
        assert state.phase_states[1].r > 0
        T = macro_tangent(state, pp2d, props, tol)
        T_fd = macro_tangent_fd(state, pp2d, props, tol)
        assert np.abs(T - T_fd).max() < 1e-4 * np.abs(T).max()
        # yielding matrix softens the response below the elastic one
        assert T[0, 0] < pp2d.Lbar[0, 0]

    def test_uniaxial_damage_to_failure(self, pp2d, phases):
        props = partition_props(pp2d, {k: p.with_model("model-1") for k, p in phases.items()})
        history = strain_history([0.08, 0, 0, 0, 0, 0], substeps=160, control="uniaxial-11")
        records = run_history(pp2d, props, history)
        peak = max(rec.sigma_o[0] for rec in records)
        assert peak > 0
        last = records[-1]
        assert last.omega[1] == 1.0
        assert last.omega[0] == 0.0
        assert abs(last.sigma_o[0]) < 1e-4 * peak
        mu, eps = last.mu_bar[1, PLANE], last.eps_bar[1, PLANE]
        assert np.abs(mu - eps).max() <= 1e-6 * np.abs(eps).max()

    def test_damage_cycle_unloads_to_zero(self, pp2d, phases):
        props = partition_props(pp2d, {k: p.with_model("model-1") for k, p in phases.items()})
        state = final_state(pp2d, props, strain_history([0.012, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0]))
        assert 0 < state.phase_states[1].omega < 1
        assert np.allclose(state.mu_bar, 0, atol=1e-8)
        assert np.allclose(state.sigma_o, 0, atol=1e-8)
        assert np.allclose(state.sigma_bar, 0, atol=1e-8)

    def test_plastic_cycle_reverses_stress(self, pp2d, phases):
        props = partition_props(pp2d, {k: p.with_model("model-2") for k, p in phases.items()})
        history = strain_history(
            [0.03, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0], substeps=30, control="uniaxial-11"
        )
        pairs = list(iter_history(pp2d, props, history))
        unloading = [rec for rec, _ in pairs[30:]]
        assert unloading[0].sigma_o[0] > 0
        assert unloading[-1].sigma_o[0] < 0
        k = next(k for k, rec in enumerate(unloading) if rec.sigma_o[0] < 0)
        before, after = unloading[k - 1], unloading[k]
        t = before.sigma_o[0] / (before.sigma_o[0] - after.sigma_o[0])
        crossing = before.eps_o[0] + t * (after.eps_o[0] - before.eps_o[0])
        assert crossing > 1e-4
        # without damage the eigenstrain is the plastic strain seen through the plane compliance
        state = pairs[-1][1]
        eps_p = state.phase_states[1].eps_p
        L = elastic_constants(props[1].E, props[1].nu).L
        rest = [2, 4, 5]
        expected = eps_p[PLANE] + np.linalg.solve(
            L[np.ix_(PLANE, PLANE)], L[np.ix_(PLANE, rest)] @ eps_p[rest]
        )
        assert np.allclose(state.mu_bar[1, PLANE], expected, atol=1e-10)
        assert np.allclose(state.mu_bar[0], 0, atol=1e-14)

    def test_eigenstrain_onset(self, pp2d, phases, matrix):
        props = partition_props(pp2d, phases)
        history = strain_history([0.03, 0, 0, 0, 0, 0], substeps=60)
        pairs = list(iter_history(pp2d, props, history))
        records = [rec for rec, _ in pairs]
        damage = next(k for k, rec in enumerate(records) if rec.omega[1] > 0)
        yielding = next(k for k, rec in enumerate(records) if rec.r[1] > 0)
        onset = min(damage, yielding)
        assert onset > 1
        for rec in records[:onset]:
            assert np.linalg.norm(rec.mu_bar) <= 1e-12 * np.linalg.norm(rec.eps_bar)
        later = records[onset + 1]
        assert np.linalg.norm(later.mu_bar[1]) > 1e-8 * np.linalg.norm(later.eps_bar[1])
        assert records[damage - 1].kappa[1] <= matrix.kappa_D < records[damage].kappa[1]

        L = elastic_constants(matrix.E, matrix.nu).L

        def eq_stress(state):
            ps = state.phase_states[1]
            return deviatoric_and_eq(L @ (state.eps_bar[1] - ps.eps_p))[1]

        assert all(eq_stress(state) <= matrix.sigma_y * (1 + 1e-10) for _, state in pairs[:yielding])
        first = pairs[yielding][1]
        assert eq_stress(first) == pytest.approx(
            matrix.sigma_y + matrix.R_inf * first.phase_states[1].r, rel=1e-8
        )

        def rate(k):
            d_mu = records[k].mu_bar[1] - records[k - 1].mu_bar[1]
            d_eps = records[k].eps_o - records[k - 1].eps_o
            return np.linalg.norm(d_mu) / np.linalg.norm(d_eps)

        # damage adds to the eigenstrain rate of the matrix
        assert rate(damage + 2) > rate(damage - 1)

    def test_convergence_failure(self, pp2d, phases):
        props = partition_props(pp2d, phases)
        tol = Tolerances(max_iter=0, max_bisections=2)
        with pytest.raises(ConvergenceError) as exc:
            run_history(pp2d, props, strain_history([0.02, 0, 0, 0, 0, 0], substeps=1), tol)
        assert exc.value.details["step"] == 1
        assert exc.value.code == "convergence"


def test_rows(pp2d, phases):
    props = partition_props(pp2d, phases)
    records = run_history(pp2d, props, strain_history([0.001, 0, 0, 0, 0, 0], substeps=2))
    header = record_header(pp2d.M)
    assert header[:2] == ["step", "eps_o_11"]
    assert "p2_mu_12" in header
    for rec in records:
        assert len(record_row(rec)) == len(header)
        assert len(defect_row(rec)) == len(DEFECT_HEADER)
    assert records[-1].eps_o[0] == pytest.approx(0.001)
