"""
Fully resolved nonlinear solve of the unit cell, used as the reference for
the reduced model. Every Gauss point carries its own material state and the
periodic fluctuation is found by Newton iterations on the assembled residual.
Stress-controlled macro components enter as extra unknowns whose equations
are the vanishing volume-averaged stresses.
"""

import logging
from typing import Any, Dict, Iterable, List, NamedTuple, Sequence, Tuple, Union
import numpy as np
import scipy.integrate
import scipy.sparse
import scipy.sparse.linalg
from e2tfa.exceptions import ConvergenceError, InvalidInputError
from e2tfa.macropoint import HistoryRecord, LoadHistory, Tolerances, leg_increments
from e2tfa.material import OMEGA_FULL, PhaseProps, PhaseState, elastic_constants, update_batch
from e2tfa.rvefe import (
    PHASE_NAMES,
    ElementOps,
    PeriodicDofs,
    RveMesh,
    assemble_stiffness,
    assemble_vector,
    element_ops,
    expand_fluctuation,
    periodic_dofs,
)
from e2tfa.util import CsvTable
from e2tfa.voigt import COMPONENT_NAMES, active_components

log = logging.getLogger(__name__)

# Dimensionless. Fully damaged points add this multiple of their own phase
# stiffness L (MPa) to the iteration matrix only, the residual stays exact
RESIDUAL_STIFFNESS_FRACTION = 1e-8
FIELD_HEADER = ["elem", "omega", "eps_p_eq"] + ["sig_" + c for c in COMPONENT_NAMES]


class DnsState(NamedTuple):
    u: np.ndarray
    eps_o: np.ndarray
    points: PhaseState
    stress: np.ndarray
    mu: np.ndarray
    strain: np.ndarray
    iterations: int = 0
    bisections: int = 0
    residual: float = 0.0
    dissipation: float = 0.0


class CompareMetrics(NamedTuple):
    max_rel_dev: float
    rms_rel_dev: float
    peak_ratio: float
    energy_ratio: float


class _Cell(NamedTuple):
    """Mesh operators and the Gauss point grouping by phase"""

    mesh: RveMesh
    ops: ElementOps
    dofs: PeriodicDofs
    active: Tuple[int, ...]
    groups: Dict[int, np.ndarray]
    point_weight: np.ndarray
    props: Dict[int, PhaseProps]


def _cell(mesh: RveMesh, phase_props: Dict[str, PhaseProps]) -> _Cell:
    ops = element_ops(mesh)
    n_gp = len(ops.weights)
    groups = {}
    props = {}
    for phase in np.unique(mesh.elem_phase):
        name = PHASE_NAMES[phase]
        if name not in phase_props:
            raise InvalidInputError("No properties for phase", phase=name)
        elems = np.flatnonzero(mesh.elem_phase == phase)
        groups[int(phase)] = (elems[:, None] * n_gp + np.arange(n_gp)).ravel()
        props[int(phase)] = phase_props[name]
    weight = np.tile(ops.weights, mesh.n_elems)
    return _Cell(
        mesh, ops, periodic_dofs(mesh), active_components(mesh.dim), groups, weight, props
    )


def initial_state(mesh: RveMesh) -> DnsState:
    n_pts = mesh.n_elems * (2 ** mesh.dim)
    dofs = periodic_dofs(mesh)
    return DnsState(
        u=np.zeros(dofs.n_free),
        eps_o=np.zeros(6),
        points=PhaseState.initial(n_pts),
        stress=np.zeros((n_pts, 6)),
        mu=np.zeros((n_pts, 6)),
        strain=np.zeros((n_pts, 6)),
    )


def _point_strains(cell: _Cell, u: np.ndarray, eps_o: np.ndarray) -> np.ndarray:
    u_e = expand_fluctuation(u, cell.dofs)[cell.dofs.elem_dofs]
    local = np.einsum("gij,ej->egi", cell.ops.B, u_e)
    return (eps_o + local).reshape(-1, 6)


def _evaluate(cell: _Cell, points: PhaseState, strain: np.ndarray) -> Tuple[Any, ...]:
    n_pts = strain.shape[0]
    stress = np.zeros((n_pts, 6))
    mu = np.zeros((n_pts, 6))
    tangent = np.zeros((n_pts, 6, 6))
    dissipation = np.zeros(n_pts)
    new_points = points
    for phase, idx in cell.groups.items():
        p = cell.props[phase]
        res = update_batch(points.take(idx), strain[idx], p, cell.active)
        stress[idx] = res.stress
        mu[idx] = res.mu
        tangent[idx] = res.dsig_deps
        broken = idx[res.new_state.omega >= OMEGA_FULL]
        tangent[broken] += RESIDUAL_STIFFNESS_FRACTION * elastic_constants(p.E, p.nu).L
        dissipation[idx] = res.dissipation
        new_points = new_points.put(idx, res.new_state)
    return stress, mu, tangent, dissipation, new_points


class _Residual(NamedTuple):
    strain: np.ndarray
    stress: np.ndarray
    mu: np.ndarray
    tangent: np.ndarray
    dissipation: np.ndarray
    points: PhaseState
    r_u: np.ndarray
    r_f: np.ndarray
    scale: float
    sig_norm: float

    @property
    def norm(self) -> float:
        # the cell has unit volume, so both parts are forces on the same scale
        return float(np.hypot(np.linalg.norm(self.r_u), np.linalg.norm(self.r_f)))


def _residual(
    cell: _Cell, state: DnsState, u: np.ndarray, eps_o: np.ndarray, free: List[int]
) -> _Residual:
    mesh, ops, dofs = cell.mesh, cell.ops, cell.dofs
    strain = _point_strains(cell, u, eps_o)
    stress, mu, tangent, dissipation, points = _evaluate(cell, state.points, strain)
    sig_e = stress.reshape(mesh.n_elems, len(ops.weights), 6)
    fe = np.einsum("gij,egi,g->egj", ops.B, sig_e, ops.weights)
    sig_avg = cell.point_weight @ stress
    return _Residual(
        strain=strain,
        stress=stress,
        mu=mu,
        tangent=tangent,
        dissipation=dissipation,
        points=points,
        r_u=assemble_vector(fe.sum(axis=1), dofs),
        r_f=sig_avg[free],
        scale=float(np.linalg.norm(assemble_vector(np.abs(fe).sum(axis=1), dofs))),
        sig_norm=float(np.linalg.norm(sig_avg[list(cell.active)])),
    )


def _correction(cell: _Cell, res: _Residual, free: List[int], it: int) -> np.ndarray:
    """Newton correction of the fluctuation and of the free macro strains"""
    mesh, ops, dofs = cell.mesh, cell.ops, cell.dofs
    D = res.tangent.reshape(mesh.n_elems, len(ops.weights), 6, 6)
    K = assemble_stiffness(ops, dofs, D)
    rhs = -res.r_u
    if free:
        Df = D[:, :, :, free]
        K_uf = assemble_vector(np.einsum("gik,egij,g->ekj", ops.B, Df, ops.weights), dofs)
        K_fu_e = np.einsum("egij,gjk,g->eik", D[:, :, free, :], ops.B, ops.weights)
        K_fu = assemble_vector(np.transpose(K_fu_e, (0, 2, 1)), dofs).T
        K_ff = np.einsum("p,pij->ij", cell.point_weight, res.tangent[:, free][:, :, free])
        K = scipy.sparse.bmat(
            [
                [K, scipy.sparse.csc_matrix(K_uf)],
                [scipy.sparse.csc_matrix(K_fu), scipy.sparse.csc_matrix(K_ff)],
            ]
        )
        rhs = np.concatenate([-res.r_u, -res.r_f])
    try:
        delta = scipy.sparse.linalg.splu(scipy.sparse.csc_matrix(K)).solve(rhs)
    except RuntimeError as exc:
        raise ConvergenceError("Singular cell tangent", iterations=it) from exc
    if not np.all(np.isfinite(delta)):
        raise ConvergenceError("Non-finite cell correction", iterations=it)
    return delta


def _increment(
    cell: _Cell,
    state: DnsState,
    d_eps_o: np.ndarray,
    free: List[int],
    tol: Tolerances,
) -> DnsState:
    n_free = cell.dofs.n_free
    u = state.u.copy()
    eps_o = state.eps_o + d_eps_o
    res = _residual(cell, state, u, eps_o, free)
    it = 0
    while True:
        norm_u = np.linalg.norm(res.r_u)
        norm_f = np.linalg.norm(res.r_f)
        log.debug("DNS iteration %d: |r_u|=%.3e |r_f|=%.3e", it, norm_u, norm_f)
        done_u = norm_u < tol.dns_rtol * res.scale + tol.newton_atol
        done_f = norm_f < tol.mixed_rtol * res.sig_norm + tol.mixed_atol
        if done_u and done_f:
            break
        if it >= tol.max_iter:
            raise ConvergenceError(
                "Cell equilibrium did not converge", iterations=it, residual=float(norm_u)
            )
        delta = _correction(cell, res, free, it)
        alpha = 1.0
        for k in range(tol.line_search + 1):
            u_try = u + alpha * delta[:n_free]
            eps_try = eps_o.copy()
            eps_try[free] += alpha * delta[n_free:]
            trial = _residual(cell, state, u_try, eps_try, free)
            if trial.norm < res.norm or k == tol.line_search:
                break
            alpha *= 0.5
        u, eps_o, res = u_try, eps_try, trial
        it += 1
        if alpha < 1.0:
            log.debug("DNS line search took step %.3g", alpha)
    return DnsState(
        u=u,
        eps_o=eps_o,
        points=res.points,
        stress=res.stress,
        mu=res.mu,
        strain=res.strain,
        iterations=it,
        residual=float(np.linalg.norm(res.r_u)),
        dissipation=state.dissipation + float(cell.point_weight @ res.dissipation),
    )


def _step(
    cell: _Cell,
    state: DnsState,
    d_eps_o: np.ndarray,
    free: List[int],
    tol: Tolerances,
    depth: int = 0,
) -> DnsState:
    try:
        return _increment(cell, state, d_eps_o, free, tol)._replace(bisections=depth)
    except ConvergenceError as exc:
        if depth >= tol.max_bisections:
            raise ConvergenceError("Cell increment failed after bisection", depth=depth) from exc
        log.debug("Bisecting cell increment at depth %d: %s", depth + 1, exc)
        half = _step(cell, state, 0.5 * d_eps_o, free, tol, depth + 1)
        return _step(cell, half, 0.5 * d_eps_o, free, tol, depth + 1)


def _record(n: int, cell: _Cell, state: DnsState) -> HistoryRecord:
    mesh = cell.mesh
    M = mesh.n_partitions
    n_gp = len(cell.ops.weights)
    part = np.repeat(mesh.elem_partition, n_gp)
    w = cell.point_weight
    vol = np.bincount(part, weights=w, minlength=M)

    def average(field: np.ndarray) -> np.ndarray:
        out = np.zeros((M,) + field.shape[1:])
        np.add.at(out, part, field * w.reshape((-1,) + (1,) * (field.ndim - 1)))
        return out / vol.reshape((-1,) + (1,) * (field.ndim - 1))

    a = list(cell.active)
    sigma_o = np.zeros(6)
    sigma_o[a] = (w @ state.stress)[a]
    sigma_bar = np.zeros((M, 6))
    sigma_bar[:, a] = average(state.stress)[:, a]
    pts = state.points
    return HistoryRecord(
        step=n,
        eps_o=state.eps_o.copy(),
        sigma_o=sigma_o,
        omega=average(pts.omega),
        r=average(pts.r),
        eps_p_eq=average(pts.eps_p_eq),
        kappa=average(pts.kappa),
        mu_bar=average(state.mu),
        eps_bar=average(state.strain),
        sigma_bar=sigma_bar,
        residual=state.residual,
        iterations=state.iterations,
        bisections=state.bisections,
        dissipation=state.dissipation,
    )


def dns_run(
    mesh: RveMesh,
    phase_props: Dict[str, PhaseProps],
    history: LoadHistory,
    tol: Tolerances = Tolerances(),
) -> Tuple[List[HistoryRecord], DnsState]:
    """
    Drives the cell through the history. Records hold volume averages over
    the cell and over each partition so they line up with the reduced model
    """
    cell = _cell(mesh, phase_props)
    mask = history.mask
    free = [k for k in cell.active if not mask[k]]
    state = initial_state(mesh)
    records = []
    for n, (_, d) in enumerate(leg_increments(state.eps_o, history), start=1):
        d = np.where(np.isin(np.arange(6), cell.active), d, 0.0)
        try:
            state = _step(cell, state, d, free, tol)
        except ConvergenceError as exc:
            exc.details["step"] = n
            raise
        records.append(_record(n, cell, state))
    log.info("Cell history finished after %d steps", len(records))
    return records, state


def element_field_rows(mesh: RveMesh, state: DnsState) -> Iterable[List[Any]]:
    """Element averages of damage, equivalent plastic strain and stress"""
    n_gp = 2 ** mesh.dim
    omega = state.points.omega.reshape(mesh.n_elems, n_gp).mean(axis=1)
    eq = state.points.eps_p_eq.reshape(mesh.n_elems, n_gp).mean(axis=1)
    sig = state.stress.reshape(mesh.n_elems, n_gp, 6).mean(axis=1)
    for e in range(mesh.n_elems):
        yield [e, omega[e], eq[e]] + sig[e].tolist()


def _component_index(component: Union[int, str]) -> int:
    if isinstance(component, str):
        if component not in COMPONENT_NAMES:
            raise InvalidInputError("Unknown component", component=component)
        return COMPONENT_NAMES.index(component)
    if not 0 <= component < 6:
        raise InvalidInputError("Component index out of range", component=component)
    return int(component)


def curve(
    source: Union[Sequence[HistoryRecord], CsvTable], component: Union[int, str]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Macro strain and stress of one component, from records or a history CSV,
    starting at the unloaded state
    """
    k = _component_index(component)
    if isinstance(source, CsvTable):
        name = COMPONENT_NAMES[k]
        strain = np.concatenate([[0.0], source.column("eps_o_" + name)])
        stress = np.concatenate([[0.0], source.column("sig_o_" + name)])
        return strain, stress
    strain = np.array([0.0] + [rec.eps_o[k] for rec in source])
    stress = np.array([0.0] + [rec.sigma_o[k] for rec in source])
    return strain, stress


def _path_length(strain: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.abs(np.diff(strain)))])


def compare(
    tfa: Union[Sequence[HistoryRecord], CsvTable],
    dns: Union[Sequence[HistoryRecord], CsvTable],
    component: Union[int, str] = "11",
) -> CompareMetrics:
    """
    Resamples both stress curves on the cumulative applied strain path and
    reports relative deviations, the peak ratio and the ratio of the work
    done along the common part of the path
    """
    x_t, y_t = curve(tfa, component)
    x_d, y_d = curve(dns, component)
    s_t, s_d = _path_length(x_t), _path_length(x_d)
    lo, hi = max(s_t[0], s_d[0]), min(s_t[-1], s_d[-1])
    if len(x_t) < 2 or len(x_d) < 2 or hi <= lo:
        raise InvalidInputError(
            "Strain ranges do not overlap", tfa_range=float(s_t[-1]), dns_range=float(s_d[-1])
        )
    s = np.unique(np.concatenate([s_t, s_d]))
    s = s[(s >= lo) & (s <= hi)]
    yt = np.interp(s, s_t, y_t)
    yd = np.interp(s, s_d, y_d)
    xs = np.interp(s, s_d, x_d)
    scale = max(np.abs(yd).max(), 1e-300)
    dev = np.abs(yt - yd) / scale
    peak_d = np.abs(yd).max()
    work_t = scipy.integrate.trapezoid(yt, xs)
    work_d = scipy.integrate.trapezoid(yd, xs)
    if work_d == 0.0:
        energy_ratio = 1.0 if work_t == 0.0 else float("inf")
    else:
        energy_ratio = float(work_t / work_d)
    return CompareMetrics(
        max_rel_dev=float(dev.max()),
        rms_rel_dev=float(np.sqrt(np.mean(dev ** 2))),
        peak_ratio=float(np.abs(yt).max() / peak_d) if peak_d > 0 else 1.0,
        energy_ratio=energy_ratio,
    )
