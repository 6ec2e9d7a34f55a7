"""
Solution stage: one homogenized material point driven through a macro strain
history. Each increment solves the reduced system

    R^i = d_eps^i - E^i : d_eps_o - sum_j S^ij : d_mu^j(eps^j) = 0

for the partition strain increments by Newton-Raphson, with the eigenstrain
tangents from the material update. The macro stress is the volume average of
the partition stresses, sigma_o = sum_i v^i sigma^i. The closed form
Lbar : eps_o + sum_i Mbar^i : mu^i is kept as a consistency defect.
"""

import logging
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple
import numpy as np
from e2tfa import influence
from e2tfa.exceptions import ConvergenceError, InvalidInputError
from e2tfa.influence import PreprocessData
from e2tfa.material import PhaseProps, PhaseState, update
from e2tfa.rvefe import PHASE_NAMES
from e2tfa.voigt import COMPONENT_NAMES

log = logging.getLogger(__name__)

STRAIN = "strain"
STRESS = "stress"
TANGENT_MAX_CONDITION = 1e12


class Tolerances(NamedTuple):
    newton_atol: float = 1e-12
    newton_rtol: float = 1e-8
    max_iter: int = 50
    max_bisections: int = 10
    mixed_rtol: float = 1e-6
    mixed_atol: float = 1e-9
    dns_rtol: float = 1e-8
    line_search: int = 8


class Leg(NamedTuple):
    target: np.ndarray
    substeps: int = 100


class LoadHistory(NamedTuple):
    legs: Tuple[Leg, ...]
    control: Tuple[str, ...] = (STRAIN,) * 6

    @property
    def mask(self) -> np.ndarray:
        """True for strain-controlled components"""
        return np.array([c == STRAIN for c in self.control])

    def validate(self) -> "LoadHistory":
        if len(self.control) != 6 or any(c not in (STRAIN, STRESS) for c in self.control):
            raise InvalidInputError("Control needs 6 entries of strain/stress", control=self.control)
        if not self.mask.any():
            raise InvalidInputError("At least one component must be strain-controlled")
        if not self.legs:
            raise InvalidInputError("History has no legs")
        for leg in self.legs:
            if np.shape(leg.target) != (6,) or not np.all(np.isfinite(leg.target)):
                raise InvalidInputError("Leg target needs 6 finite components")
            if leg.substeps < 1:
                raise InvalidInputError("Leg needs at least one substep", substeps=leg.substeps)
        return self

    @classmethod
    def build(cls, legs: Sequence[Dict[str, Any]], control: Any) -> "LoadHistory":
        """control is "strain", "uniaxial-<ij>" or a list of six strain/stress flags"""
        if control == STRAIN:
            flags = (STRAIN,) * 6
        elif isinstance(control, str) and control.startswith("uniaxial-"):
            name = control[len("uniaxial-") :]
            if name not in COMPONENT_NAMES:
                raise InvalidInputError("Unknown uniaxial component", control=control)
            k = COMPONENT_NAMES.index(name)
            flags = tuple(STRAIN if i == k else STRESS for i in range(6))
        elif isinstance(control, (list, tuple)):
            flags = tuple(str(c) for c in control)
        else:
            raise InvalidInputError("Unknown control", control=control)
        parsed = tuple(
            Leg(np.array(leg["target"], dtype=float), int(leg.get("substeps", 100))) for leg in legs
        )
        return cls(parsed, flags).validate()


class PointState(NamedTuple):
    eps_o: np.ndarray
    sigma_o: np.ndarray
    eps_bar: np.ndarray
    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    phase_states: Tuple[PhaseState, ...]
    dmu: np.ndarray
    dsig: np.ndarray
    d_eps_o: np.ndarray
    prev: Optional["PointState"] = None
    iterations: int = 0
    bisections: int = 0
    residual: float = 0.0
    dissipation: float = 0.0


class HistoryRecord(NamedTuple):
    step: int
    eps_o: np.ndarray
    sigma_o: np.ndarray
    omega: np.ndarray
    r: np.ndarray
    eps_p_eq: np.ndarray
    kappa: np.ndarray
    mu_bar: np.ndarray
    eps_bar: np.ndarray
    sigma_bar: np.ndarray
    residual: float = 0.0
    total_residual: float = 0.0
    stress_defect: float = 0.0
    iterations: int = 0
    bisections: int = 0
    dissipation: float = 0.0


def partition_props(pp: PreprocessData, phases: Dict[str, PhaseProps]) -> List[PhaseProps]:
    props = []
    for i in range(pp.M):
        name = PHASE_NAMES[pp.partition_phase[i]]
        if name not in phases:
            raise InvalidInputError("No properties for phase", phase=name, partition=i)
        props.append(phases[name])
    return props


def initial_state(pp: PreprocessData) -> PointState:
    M = pp.M
    return PointState(
        eps_o=np.zeros(6),
        sigma_o=np.zeros(6),
        eps_bar=np.zeros((M, 6)),
        mu_bar=np.zeros((M, 6)),
        sigma_bar=np.zeros((M, 6)),
        phase_states=tuple(PhaseState.initial() for _ in range(M)),
        dmu=np.zeros((M, 6, 6)),
        dsig=np.stack([pp.partition_L(i) for i in range(M)]),
        d_eps_o=np.zeros(6),
    )


def _plane(pp: PreprocessData, v: np.ndarray) -> np.ndarray:
    """Drops components the cell does not carry"""
    out = np.zeros(6)
    a = list(pp.active)
    out[a] = np.asarray(v, dtype=float)[a]
    return out


def _solve_increment(
    state: PointState,
    d_eps_o: np.ndarray,
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    tol: Tolerances,
) -> PointState:
    a = list(pp.active)
    n, M = len(a), pp.M
    Eb, Sb = pp.block(pp.Ebar), pp.block(pp.Sbar)
    de = d_eps_o[a]
    forcing = np.einsum("ijk,k->ij", Eb, de)

    def evaluate(x: np.ndarray) -> Tuple[np.ndarray, list]:
        results = []
        for i in range(M):
            eps = state.eps_bar[i].copy()
            eps[a] += x[i]
            results.append(update(state.phase_states[i], eps, props[i], a))
        dmu = np.stack([res.mu[a] - state.mu_bar[i, a] for i, res in enumerate(results)])
        return x - forcing - np.einsum("ijkl,jl->ik", Sb, dmu), results

    x = forcing.copy()
    R, results = evaluate(x)
    threshold = tol.newton_atol + tol.newton_rtol * np.linalg.norm(de)
    norm = np.linalg.norm(R)
    it = 0
    while norm >= threshold:
        if it >= tol.max_iter:
            raise ConvergenceError(
                "Reduced system did not converge", iterations=it, residual=float(norm)
            )
        J = np.zeros((M * n, M * n))
        for i in range(M):
            for j in range(M):
                block = -Sb[i, j] @ results[j].dmu_deps[np.ix_(a, a)]
                if i == j:
                    block += np.eye(n)
                J[i * n : (i + 1) * n, j * n : (j + 1) * n] = block
        try:
            dx = np.linalg.solve(J, -R.ravel()).reshape(M, n)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("Singular reduced Jacobian", iterations=it) from exc
        alpha = 1.0
        for k in range(tol.line_search + 1):
            R_new, results_new = evaluate(x + alpha * dx)
            norm_new = np.linalg.norm(R_new)
            if norm_new < norm or k == tol.line_search:
                break
            alpha *= 0.5
        x = x + alpha * dx
        R, results, norm = R_new, results_new, norm_new
        it += 1
        log.debug("Newton iteration %d: |R|=%.3e (step %.3g)", it, norm, alpha)

    eps_bar = state.eps_bar.copy()
    eps_bar[:, a] += x
    mu_bar = np.stack([res.mu for res in results])
    sigma_bar = np.zeros((M, 6))
    sigma_bar[:, a] = np.stack([res.stress[a] for res in results])
    dmu = np.stack([res.dmu_deps for res in results])
    dsig = np.stack([res.dsig_deps for res in results])
    eps_o = state.eps_o + d_eps_o
    dissipation = float(sum(v * res.dissipation for v, res in zip(pp.v_f, results)))
    return PointState(
        eps_o=eps_o,
        sigma_o=np.einsum("i,ij->j", pp.v_f, sigma_bar),
        eps_bar=eps_bar,
        mu_bar=mu_bar,
        sigma_bar=sigma_bar,
        phase_states=tuple(res.new_state for res in results),
        dmu=dmu,
        dsig=dsig,
        d_eps_o=d_eps_o,
        prev=state._replace(prev=None),
        iterations=it,
        bisections=0,
        residual=float(norm),
        dissipation=state.dissipation + dissipation,
    )


def step(
    state: PointState,
    d_eps_o: np.ndarray,
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    tol: Tolerances = Tolerances(),
    depth: int = 0,
) -> PointState:
    """
    One strain-controlled increment. A failed Newton solve is retried as two
    half increments, down to max_bisections levels
    """
    d_eps_o = _plane(pp, d_eps_o)
    try:
        return _solve_increment(state, d_eps_o, pp, props, tol)._replace(bisections=depth)
    except ConvergenceError as exc:
        if depth >= tol.max_bisections:
            raise ConvergenceError(
                "Increment failed after bisection",
                depth=depth,
                eps_o=str(state.eps_o.tolist()),
            ) from exc
        log.debug("Bisecting increment at depth %d: %s", depth + 1, exc)
        half = step(state, 0.5 * d_eps_o, pp, props, tol, depth + 1)
        return step(half, 0.5 * d_eps_o, pp, props, tol, depth + 1)


def macro_tangent_fd(
    state: PointState,
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    tol: Tolerances = Tolerances(),
    h: float = 1e-7,
) -> np.ndarray:
    """Central differences of the last increment with respect to the macro strain"""
    start = state.prev if state.prev is not None else state
    d = state.d_eps_o if state.prev is not None else np.zeros(6)
    T = np.zeros((6, 6))
    for k in pp.active:
        e = np.zeros(6)
        e[k] = h
        plus = _solve_increment(start, d + e, pp, props, tol)
        minus = _solve_increment(start, d - e, pp, props, tol)
        T[:, k] = (plus.sigma_o - minus.sigma_o) / (2.0 * h)
    return T


def macro_tangent(
    state: PointState,
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    tol: Tolerances = Tolerances(),
) -> np.ndarray:
    """
    Consistent d sigma_o / d eps_o at a converged state. Linearizing the
    reduced system gives (I - S A) X = E with A = d mu / d eps per partition,
    then T = sum_i v^i D^i X^i with D = d sigma / d eps
    """
    a = list(pp.active)
    n, M = len(a), pp.M
    Eb, Sb = pp.block(pp.Ebar), pp.block(pp.Sbar)
    A = pp.block(state.dmu)
    J = np.zeros((M * n, M * n))
    for i in range(M):
        for j in range(M):
            J[i * n : (i + 1) * n, j * n : (j + 1) * n] = (np.eye(n) if i == j else 0.0) - Sb[
                i, j
            ] @ A[j]
    T = np.zeros((6, 6))
    try:
        if np.linalg.cond(J) > TANGENT_MAX_CONDITION:
            raise np.linalg.LinAlgError("ill-conditioned")
        X = np.linalg.solve(J, Eb.reshape(M * n, n)).reshape(M, n, n)
    except np.linalg.LinAlgError:
        log.warning("Reduced tangent system is singular, using finite differences")
        return macro_tangent_fd(state, pp, props, tol)
    T[np.ix_(a, a)] = np.einsum("i,ijk,ikl->jl", pp.v_f, pp.block(state.dsig), X)
    return T


def _free_correction(T: np.ndarray, rhs: np.ndarray, free: List[int]) -> np.ndarray:
    Tff = T[np.ix_(free, free)]
    sol, *_ = np.linalg.lstsq(Tff, rhs, rcond=None)
    return sol


def mixed_control_step(
    state: PointState,
    d_target: np.ndarray,
    mask: np.ndarray,
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    tol: Tolerances = Tolerances(),
    depth: int = 0,
) -> PointState:
    """
    Increment with the strain-controlled components of d_target prescribed and
    the remaining active components found so that their macro stress vanishes
    """
    a = list(pp.active)
    free = [k for k in a if not mask[k]]
    ctrl = [k for k in a if mask[k]]
    if not ctrl:
        raise InvalidInputError("At least one component must be strain-controlled")
    d = np.zeros(6)
    d[ctrl] = np.asarray(d_target)[ctrl]
    if not free:
        return step(state, d, pp, props, tol)

    try:
        T = macro_tangent(state, pp, props, tol)
        d[free] = _free_correction(
            T, -(state.sigma_o[free] + T[np.ix_(free, ctrl)] @ d[ctrl]), free
        )
        for it in range(tol.max_iter):
            new = step(state, d, pp, props, tol)
            s_free = new.sigma_o[free]
            if np.linalg.norm(s_free) < tol.mixed_rtol * np.linalg.norm(new.sigma_o) + tol.mixed_atol:
                log.debug("Mixed control converged in %d outer iterations", it + 1)
                return new
            T = macro_tangent(new, pp, props, tol)
            d[free] -= _free_correction(T, s_free, free)
        raise ConvergenceError(
            "Mixed control did not converge",
            iterations=tol.max_iter,
            residual=float(np.linalg.norm(s_free)),
        )
    except ConvergenceError as exc:
        if depth >= tol.max_bisections:
            raise ConvergenceError("Mixed control failed after bisection", depth=depth) from exc
        log.debug("Bisecting mixed increment at depth %d: %s", depth + 1, exc)
        half = mixed_control_step(state, 0.5 * np.asarray(d_target), mask, pp, props, tol, depth + 1)
        return mixed_control_step(half, 0.5 * np.asarray(d_target), mask, pp, props, tol, depth + 1)


def make_record(n: int, state: PointState, pp: PreprocessData) -> HistoryRecord:
    ps = state.phase_states
    total = state.eps_bar - influence.partition_strains(pp, state.eps_o, state.mu_bar)
    total_residual = np.linalg.norm(total) / max(np.linalg.norm(state.eps_bar), 1e-300)
    closed = influence.macro_stress(pp, state.eps_o, state.mu_bar)
    scale = max(np.linalg.norm(state.sigma_o), np.linalg.norm(pp.Lbar @ state.eps_o), 1e-300)
    defect = np.linalg.norm(closed - state.sigma_o) / scale
    return HistoryRecord(
        step=n,
        eps_o=state.eps_o.copy(),
        sigma_o=state.sigma_o.copy(),
        omega=np.array([float(s.omega) for s in ps]),
        r=np.array([float(s.r) for s in ps]),
        eps_p_eq=np.array([float(s.eps_p_eq) for s in ps]),
        kappa=np.array([float(s.kappa) for s in ps]),
        mu_bar=state.mu_bar.copy(),
        eps_bar=state.eps_bar.copy(),
        sigma_bar=state.sigma_bar.copy(),
        residual=state.residual,
        total_residual=float(total_residual),
        stress_defect=float(defect),
        iterations=state.iterations,
        bisections=state.bisections,
        dissipation=state.dissipation,
    )


def leg_increments(eps_o: np.ndarray, history: LoadHistory) -> Iterator[Tuple[int, np.ndarray]]:
    """Yields (leg index, increment) for every substep, controlled components only"""
    mask = history.mask
    current = np.where(mask, eps_o, 0.0)
    for k, leg in enumerate(history.legs):
        target = np.where(mask, leg.target, 0.0)
        d = (target - current) / leg.substeps
        for _ in range(leg.substeps):
            yield k, d
        current = target


def iter_history(
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    history: LoadHistory,
    tol: Tolerances = Tolerances(),
) -> Iterator[Tuple[HistoryRecord, PointState]]:
    state = initial_state(pp)
    mask = history.mask
    mixed = not mask[list(pp.active)].all()
    last_leg = -1
    for n, (leg, d) in enumerate(leg_increments(state.eps_o, history), start=1):
        try:
            if mixed:
                state = mixed_control_step(state, d, mask, pp, props, tol)
            else:
                state = step(state, d, pp, props, tol)
        except ConvergenceError as exc:
            exc.details["step"] = n
            raise
        if leg != last_leg and last_leg >= 0:
            log.info("History leg %d finished at step %d", last_leg + 1, n - 1)
        last_leg = leg
        yield make_record(n, state, pp), state
    log.info("History finished after %d steps", n)


def run_history(
    pp: PreprocessData,
    props: Sequence[PhaseProps],
    history: LoadHistory,
    tol: Tolerances = Tolerances(),
) -> List[HistoryRecord]:
    return [record for record, _ in iter_history(pp, props, history, tol)]


def record_header(M: int) -> List[str]:
    header = ["step"]
    header += ["eps_o_" + c for c in COMPONENT_NAMES]
    header += ["sig_o_" + c for c in COMPONENT_NAMES]
    for i in range(M):
        p = "p{}_".format(i + 1)
        header += [p + "omega", p + "r", p + "eps_p_eq"]
        header += [p + "mu_" + c for c in COMPONENT_NAMES]
        header += [p + "eps_" + c for c in COMPONENT_NAMES]
    return header


def record_row(rec: HistoryRecord) -> List[Any]:
    row: List[Any] = [rec.step] + rec.eps_o.tolist() + rec.sigma_o.tolist()
    for i in range(len(rec.omega)):
        row += [rec.omega[i], rec.r[i], rec.eps_p_eq[i]]
        row += rec.mu_bar[i].tolist() + rec.eps_bar[i].tolist()
    return row


DEFECT_HEADER = [
    "step",
    "residual",
    "total_residual",
    "stress_defect",
    "iterations",
    "bisections",
    "dissipation",
]


def defect_row(rec: HistoryRecord) -> List[Any]:
    return [
        rec.step,
        rec.residual,
        rec.total_residual,
        rec.stress_defect,
        rec.iterations,
        rec.bisections,
        rec.dissipation,
    ]
