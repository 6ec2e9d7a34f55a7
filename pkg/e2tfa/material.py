"""
Pointwise constitutive update of one phase: J2 plasticity with linear isotropic
hardening in effective stress space, isotropic damage with linear softening and
extraction of the eigenstrain mu = eps - L^-1 : sigma that lumps both.

All updates are written for a batch of points (leading axis) so the same code
drives a single material point and every Gauss point of a direct simulation.
"""

import functools
import logging
import math
from typing import Any, Dict, NamedTuple, Optional, Sequence, Tuple
import numpy as np
from e2tfa.exceptions import InvalidInputError
from e2tfa.voigt import (
    SymTensor2,
    Tensor4,
    active_components,
    deviatoric_projector,
    iso_elasticity,
)

log = logging.getLogger(__name__)

MODELS = ("elastic", "model-1", "model-2", "model-3")
ALL_COMPONENTS: Tuple[int, ...] = active_components(3)
YIELD_RTOL = 1e-12
OMEGA_FULL = 1.0 - 1e-14

PROPS_KEYS = {
    "elastic_modulus": "E",
    "poissons_ratio": "nu",
    "yield_strength": "sigma_y",
    "hardening_modulus": "R_inf",
    "damage_initiation_strain": "kappa_D",
    "damage_failure_strain": "kappa_F",
    "plasticity": "plasticity_enabled",
    "damage": "damage_enabled",
}


class PhaseProps(NamedTuple):
    """Elastic, plastic and damage parameters of one micro-constituent"""

    E: float
    nu: float
    sigma_y: Optional[float] = None
    R_inf: float = 0.0
    kappa_D: Optional[float] = None
    kappa_F: Optional[float] = None
    plasticity_enabled: bool = False
    damage_enabled: bool = False

    def validate(self) -> "PhaseProps":
        if not self.E > 0:
            raise InvalidInputError("Elastic modulus must be positive", E=self.E)
        if not -1.0 < self.nu < 0.5:
            raise InvalidInputError("Poisson's ratio must lie in (-1, 0.5)", nu=self.nu)
        if self.plasticity_enabled:
            if self.sigma_y is None or not self.sigma_y > 0:
                raise InvalidInputError(
                    "Plasticity needs a positive yield strength", sigma_y=self.sigma_y
                )
            G = self.E / (2.0 * (1.0 + self.nu))
            if not 3.0 * G + self.R_inf > 0:
                raise InvalidInputError(
                    "Softening plasticity is not supported", R_inf=self.R_inf
                )
        if self.damage_enabled:
            if self.kappa_D is None or self.kappa_F is None:
                raise InvalidInputError("Damage needs initiation and failure strains")
            if not 0 < self.kappa_D < self.kappa_F:
                raise InvalidInputError(
                    "Damage strains must satisfy 0 < kappa_D < kappa_F",
                    kappa_D=self.kappa_D,
                    kappa_F=self.kappa_F,
                )
        return self

    @property
    def can_yield(self) -> bool:
        return self.sigma_y is not None

    @property
    def can_damage(self) -> bool:
        return self.kappa_D is not None and self.kappa_F is not None

    def with_model(self, model: str) -> "PhaseProps":
        """
        Switches plasticity and damage on the way the named model does,
        but only for a phase that carries the corresponding parameters
        """
        if model not in MODELS:
            raise InvalidInputError("Unknown model", model=model, known=", ".join(MODELS))
        damage = model in ("model-1", "model-3") and self.can_damage
        plasticity = model in ("model-2", "model-3") and self.can_yield
        return self._replace(plasticity_enabled=plasticity, damage_enabled=damage)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "PhaseProps":
        """Builds props from snake_case keys named after material data sheet rows"""
        kwargs = {}
        for key, value in d.items():
            if key not in PROPS_KEYS:
                raise InvalidInputError("Unknown phase property", key=key)
            kwargs[PROPS_KEYS[key]] = value
        if "E" not in kwargs or "nu" not in kwargs:
            raise InvalidInputError("Phase needs elastic_modulus and poissons_ratio")
        if "plasticity_enabled" not in kwargs:
            kwargs["plasticity_enabled"] = kwargs.get("sigma_y") is not None
        if "damage_enabled" not in kwargs:
            kwargs["damage_enabled"] = (
                kwargs.get("kappa_D") is not None and kwargs.get("kappa_F") is not None
            )
        return cls(**kwargs).validate()

    def to_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, attr) for key, attr in PROPS_KEYS.items()}


class ElasticConstants(NamedTuple):
    L: np.ndarray
    Linv: np.ndarray
    G: float
    K: float


@functools.lru_cache(maxsize=64)
def elastic_constants(E: float, nu: float) -> ElasticConstants:
    L = iso_elasticity(E, nu).m
    Linv = np.linalg.inv(L)
    L.setflags(write=False)
    Linv.setflags(write=False)
    return ElasticConstants(L, Linv, E / (2.0 * (1.0 + nu)), E / (3.0 * (1.0 - 2.0 * nu)))


@functools.lru_cache(maxsize=64)
def _reduced_compliance(E: float, nu: float, active: Tuple[int, ...]) -> np.ndarray:
    L = elastic_constants(E, nu).L
    inv = np.linalg.inv(L[np.ix_(active, active)])
    inv.setflags(write=False)
    return inv


class PhaseState(NamedTuple):
    """
    History variables of one point or of a batch of points (leading axis).
    eps_p is the effective plastic strain (engineering shears), r the hardening
    variable, eps_p_eq the nominal equivalent plastic strain, omega the damage
    and kappa the history maximum of the max principal strain
    """

    eps_p: np.ndarray
    r: np.ndarray
    eps_p_eq: np.ndarray
    omega: np.ndarray
    kappa: np.ndarray

    @classmethod
    def initial(cls, n: Optional[int] = None) -> "PhaseState":
        shape: Tuple[int, ...] = () if n is None else (n,)
        return cls(
            np.zeros(shape + (6,)),
            np.zeros(shape),
            np.zeros(shape),
            np.zeros(shape),
            np.zeros(shape),
        )

    def take(self, index: Any) -> "PhaseState":
        return PhaseState(*(field[index] for field in self))

    def put(self, index: Any, other: "PhaseState") -> "PhaseState":
        """Returns a copy with points at index replaced by other"""
        fields = []
        for mine, theirs in zip(self, other):
            new = mine.copy()
            new[index] = theirs
            fields.append(new)
        return PhaseState(*fields)


class UpdateResult(NamedTuple):
    stress: np.ndarray
    stress_eff: np.ndarray
    mu: np.ndarray
    new_state: PhaseState
    dsig_deps: np.ndarray
    dmu_deps: np.ndarray
    dzeta: np.ndarray
    dissipation: np.ndarray


class ReturnMapResult(NamedTuple):
    eps_e: np.ndarray
    dzeta: np.ndarray
    r_new: np.ndarray
    Lep: np.ndarray
    flow: np.ndarray


def damage_omega(kappa: Any, p: PhaseProps) -> Any:
    """
    Linear-softening damage law. Nominal uniaxial stress (1 - omega) E kappa
    drops affinely from E kappa_D at kappa_D to zero at kappa_F
    """
    kappa = np.asarray(kappa, dtype=float)
    if kappa.ndim == 0 and kappa < 0:
        raise InvalidInputError("kappa must be nonnegative", kappa=float(kappa))
    kD, kF = p.kappa_D, p.kappa_F
    with np.errstate(divide="ignore", invalid="ignore"):
        omega = kF * (kappa - kD) / (kappa * (kF - kD))
    omega = np.where(kappa <= kD, 0.0, np.clip(omega, 0.0, 1.0))
    omega = np.where(kappa >= kF, 1.0, omega)
    return float(omega) if omega.ndim == 0 else omega


def _damage_slope(kappa: np.ndarray, p: PhaseProps) -> np.ndarray:
    kD, kF = p.kappa_D, p.kappa_F
    inside = (kappa > kD) & (kappa < kF)
    safe = np.where(inside, kappa, 1.0)
    return np.where(inside, kF * kD / ((kF - kD) * safe * safe), 0.0)


def _principal_max_batch(eps: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    m = np.empty(eps.shape[:-1] + (3, 3))
    m[..., 0, 0] = eps[..., 0]
    m[..., 1, 1] = eps[..., 1]
    m[..., 2, 2] = eps[..., 2]
    m[..., 0, 1] = m[..., 1, 0] = 0.5 * eps[..., 3]
    m[..., 1, 2] = m[..., 2, 1] = 0.5 * eps[..., 4]
    m[..., 0, 2] = m[..., 2, 0] = 0.5 * eps[..., 5]
    values, vectors = np.linalg.eigh(m)
    n = vectors[..., :, -1]
    grad = np.stack(
        [
            n[..., 0] * n[..., 0],
            n[..., 1] * n[..., 1],
            n[..., 2] * n[..., 2],
            n[..., 0] * n[..., 1],
            n[..., 1] * n[..., 2],
            n[..., 0] * n[..., 2],
        ],
        axis=-1,
    )
    return values[..., -1], grad


def _radial_return(
    eps_e_trial: np.ndarray, r: np.ndarray, p: PhaseProps, ec: ElasticConstants
) -> ReturnMapResult:
    n_pts = eps_e_trial.shape[0]
    G, K, H = ec.G, ec.K, p.R_inf
    sig = eps_e_trial @ ec.L.T
    dev = sig.copy()
    dev[:, :3] -= sig[:, :3].mean(axis=1, keepdims=True)
    s_norm = np.sqrt((dev[:, :3] ** 2).sum(axis=1) + 2.0 * (dev[:, 3:] ** 2).sum(axis=1))
    q_trial = math.sqrt(1.5) * s_norm
    f_trial = q_trial - (p.sigma_y + H * r)
    plastic = f_trial > YIELD_RTOL * p.sigma_y
    dzeta = np.where(plastic, f_trial / (3.0 * G + H), 0.0)

    n_hat = dev / np.where(s_norm > 0, s_norm, 1.0)[:, None]
    flow = math.sqrt(1.5) * n_hat
    flow[:, 3:] *= 2.0
    eps_e = eps_e_trial - dzeta[:, None] * flow

    Lep = np.broadcast_to(ec.L, (n_pts, 6, 6)).copy()
    if np.any(plastic):
        q = q_trial[plastic]
        dz = dzeta[plastic]
        nn = np.einsum("pi,pj->pij", n_hat[plastic], n_hat[plastic])
        ones = np.zeros(6)
        ones[:3] = 1.0
        a = 2.0 * G * (1.0 - 3.0 * G * dz / q)
        b = 6.0 * G * G * (dz / q - 1.0 / (3.0 * G + H))
        Lep[plastic] = (
            a[:, None, None] * deviatoric_projector()
            + b[:, None, None] * nn
            + K * np.outer(ones, ones)
        )
    return ReturnMapResult(eps_e, dzeta, r + dzeta, Lep, flow)


def return_map(
    eps_e_trial: SymTensor2, r: float, p: PhaseProps
) -> Tuple[SymTensor2, float, float, Tensor4]:
    """
    Radial return in effective stress space. Returns the elastic strain,
    the plastic multiplier increment, the new hardening variable and the
    consistent elastoplastic tangent
    """
    if not p.plasticity_enabled:
        raise InvalidInputError("Return map called for a phase without plasticity")
    if r < 0:
        raise InvalidInputError("Hardening variable must be nonnegative", r=r)
    ec = elastic_constants(p.E, p.nu)
    v = eps_e_trial.v if isinstance(eps_e_trial, SymTensor2) else eps_e_trial
    res = _radial_return(np.asarray(v, dtype=float)[None, :], np.array([float(r)]), p, ec)
    return (
        SymTensor2(res.eps_e[0]),
        float(res.dzeta[0]),
        float(res.r_new[0]),
        Tensor4(res.Lep[0]),
    )


def dissipation_increment(
    stress_eff: np.ndarray,
    flow: np.ndarray,
    dzeta: np.ndarray,
    r_new: np.ndarray,
    eps_e: np.ndarray,
    omega_old: np.ndarray,
    omega_new: np.ndarray,
    p: PhaseProps,
) -> np.ndarray:
    """
    sigma : d eps_p - R dr + Y d omega over one step. The nominal plastic strain
    increment dzeta / (1 - omega_old) n is paired with the nominal stress at the
    same damage level, R = R_inf r and Y = eps_e : L : eps_e / 2 with undamaged L
    """
    ec = elastic_constants(p.E, p.nu)
    plastic = dzeta * ((stress_eff * flow).sum(axis=-1) - p.R_inf * r_new)
    plastic = np.where(1.0 - omega_old > 1.0 - OMEGA_FULL, plastic, 0.0)
    Y = 0.5 * ((eps_e @ ec.L.T) * eps_e).sum(axis=-1)
    return plastic + Y * (omega_new - omega_old)


def update_batch(
    state: PhaseState,
    eps: np.ndarray,
    p: PhaseProps,
    active: Sequence[int] = ALL_COMPONENTS,
) -> UpdateResult:
    """
    Operator split update of a batch of points. eps has shape (n, 6).
    The eigenstrain and its tangent are formed on the active components with
    the reduced compliance (L_aa)^-1, which is the full compliance in 3D
    """
    eps = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(eps)):
        raise InvalidInputError("Non-finite strain passed to the material update")
    n_pts = eps.shape[0]
    ec = elastic_constants(p.E, p.nu)
    eps_e_trial = eps - state.eps_p

    if p.plasticity_enabled:
        ret = _radial_return(eps_e_trial, state.r, p, ec)
        assert np.all(ret.dzeta >= 0)
    else:
        ret = ReturnMapResult(
            eps_e_trial,
            np.zeros(n_pts),
            state.r.copy(),
            np.broadcast_to(ec.L, (n_pts, 6, 6)).copy(),
            np.zeros((n_pts, 6)),
        )
    eps_p = eps - ret.eps_e
    stress_eff = ret.eps_e @ ec.L.T

    kappa_trial, grad = _principal_max_batch(eps)
    kappa = np.maximum(state.kappa, np.maximum(kappa_trial, 0.0))
    if p.damage_enabled:
        omega = np.maximum(state.omega, damage_omega(kappa, p))
        loading = kappa_trial > state.kappa
        slope = np.where(loading, _damage_slope(kappa, p), 0.0)
    else:
        omega = state.omega.copy()
        slope = np.zeros(n_pts)

    stress = (1.0 - omega)[:, None] * stress_eff
    dsig = (1.0 - omega)[:, None, None] * ret.Lep - np.einsum(
        "pi,pj->pij", stress_eff, slope[:, None] * grad
    )
    full = omega >= OMEGA_FULL
    dsig[full] = 0.0
    stress[full] = 0.0

    a = tuple(active)
    compliance = _reduced_compliance(p.E, p.nu, a)
    mu = np.zeros((n_pts, 6))
    mu[:, a] = eps[:, a] - stress[:, a] @ compliance.T
    dmu = np.zeros((n_pts, 6, 6))
    ix = np.ix_(range(n_pts), a, a)
    dmu[ix] = np.eye(len(a)) - np.einsum("ij,pjk->pik", compliance, dsig[ix])

    with np.errstate(divide="ignore", invalid="ignore"):
        eq_increment = np.where(
            1.0 - state.omega > 1.0 - OMEGA_FULL, ret.dzeta / (1.0 - state.omega), 0.0
        )
    new_state = PhaseState(eps_p, ret.r_new, state.eps_p_eq + eq_increment, omega, kappa)
    dissipation = dissipation_increment(
        stress_eff, ret.flow, ret.dzeta, ret.r_new, ret.eps_e, state.omega, omega, p
    )
    return UpdateResult(stress, stress_eff, mu, new_state, dsig, dmu, ret.dzeta, dissipation)


def update(
    state: PhaseState,
    eps_total: Any,
    p: PhaseProps,
    active: Sequence[int] = ALL_COMPONENTS,
) -> UpdateResult:
    """Update of a single point. Arrays of the result drop the batch axis"""
    v = eps_total.v if isinstance(eps_total, SymTensor2) else eps_total
    batch = PhaseState(*(np.asarray(field)[None, ...] for field in state))
    res = update_batch(batch, np.asarray(v, dtype=float)[None, :], p, active)
    return UpdateResult(
        res.stress[0],
        res.stress_eff[0],
        res.mu[0],
        res.new_state.take(0),
        res.dsig_deps[0],
        res.dmu_deps[0],
        res.dzeta[0],
        res.dissipation[0],
    )


def tangent_check(
    state: PhaseState,
    eps: Any,
    p: PhaseProps,
    h: float = 1e-7,
    active: Sequence[int] = ALL_COMPONENTS,
) -> float:
    """
    Worst relative mismatch between the analytic tangents and central
    finite differences of update() over the active strain components
    """
    if not 1e-8 <= h <= 1e-4:
        raise InvalidInputError("Perturbation must lie in [1e-8, 1e-4]", h=h)
    v = np.asarray(eps.v if isinstance(eps, SymTensor2) else eps, dtype=float)
    ref = update(state, v, p, active)
    a = list(active)
    fd_sig = np.zeros((6, 6))
    fd_mu = np.zeros((6, 6))
    for k in a:
        step = np.zeros(6)
        step[k] = h
        plus = update(state, v + step, p, active)
        minus = update(state, v - step, p, active)
        fd_sig[:, k] = (plus.stress - minus.stress) / (2.0 * h)
        fd_mu[:, k] = (plus.mu - minus.mu) / (2.0 * h)
    worst = 0.0
    for fd, analytic in ((fd_sig, ref.dsig_deps), (fd_mu, ref.dmu_deps)):
        A = analytic[np.ix_(a, a)]
        scale = max(np.abs(A).max(), 1e-300)
        worst = max(worst, float(np.abs(fd[np.ix_(a, a)] - A).max() / scale))
    log.debug("Tangent check with h=%g: worst relative error %.3e", h, worst)
    return worst
