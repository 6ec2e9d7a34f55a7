"""
Voigt-form algebra of symmetric second-order and fourth-order tensors.

Components are ordered (11, 22, 33, 12, 23, 13). Strain-like tensors store
engineering shears (gamma = 2 eps_offdiag), stress-like tensors store plain
shear values, so that the energy pairing is a plain dot product. Fourth-order
tensors are dense 6x6 matrices acting on Voigt vectors in this convention.
"""

import logging
from typing import NamedTuple, Tuple, Union
import numpy as np
from e2tfa.exceptions import InvalidInputError, SingularTensorError

log = logging.getLogger(__name__)

STRAIN = "strain"
STRESS = "stress"

# Voigt index -> (row, col) of the 3x3 tensor
VOIGT_PAIRS: Tuple[Tuple[int, int], ...] = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))
COMPONENT_NAMES: Tuple[str, ...] = ("11", "22", "33", "12", "23", "13")

MAX_CONDITION = 1e12
INVERSE_RTOL = 1e-10


class SymTensor2(NamedTuple):
    """Symmetric second-order tensor in Voigt form"""

    v: np.ndarray
    kind: str = STRAIN

    @classmethod
    def strain(cls, *components: float) -> "SymTensor2":
        return cls(_checked_components(components), STRAIN)

    @classmethod
    def stress(cls, *components: float) -> "SymTensor2":
        return cls(_checked_components(components), STRESS)

    def to_matrix(self) -> np.ndarray:
        return to_matrix(self.v, self.kind)

    @classmethod
    def from_matrix(cls, m: np.ndarray, kind: str = STRAIN) -> "SymTensor2":
        return cls(from_matrix(m, kind), kind)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymTensor2):
            return NotImplemented
        return self.kind == other.kind and bool(np.array_equal(self.v, other.v))

    def __hash__(self) -> int:
        return hash((self.kind, self.v.tobytes()))


class Tensor4(NamedTuple):
    """Fourth-order tensor as a 6x6 matrix"""

    m: np.ndarray

    def __matmul__(self, other: "Tensor4") -> "Tensor4":  # type: ignore[override]
        return t4_compose(self, other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor4):
            return NotImplemented
        return bool(np.array_equal(self.m, other.m))

    def __hash__(self) -> int:
        return hash(self.m.tobytes())


VecLike = Union[SymTensor2, np.ndarray]
MatLike = Union[Tensor4, np.ndarray]


def _checked_components(components: Tuple[float, ...]) -> np.ndarray:
    v = np.array(components, dtype=float).reshape(-1)
    if v.shape != (6,):
        raise InvalidInputError("Voigt tensor needs 6 components", got=v.size)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("Voigt tensor has non-finite components")
    return v


def _vec(x: VecLike) -> np.ndarray:
    return np.asarray(x.v if isinstance(x, SymTensor2) else x, dtype=float)


def _mat(a: MatLike) -> np.ndarray:
    return np.asarray(a.m if isinstance(a, Tensor4) else a, dtype=float)


def active_components(dim: int) -> Tuple[int, ...]:
    """Voigt indices carried by a plane-strain (2D) or a 3D cell"""
    if dim == 2:
        return (0, 1, 3)
    if dim == 3:
        return (0, 1, 2, 3, 4, 5)
    raise InvalidInputError("Cell dimension must be 2 or 3", dim=dim)


def identity() -> np.ndarray:
    """Identity on Voigt vectors (maps engineering strain onto itself)"""
    return np.eye(6)


def unit_strain(k: int) -> np.ndarray:
    e = np.zeros(6)
    e[k] = 1.0
    return e


def to_matrix(v: np.ndarray, kind: str = STRAIN) -> np.ndarray:
    """Rebuild the 3x3 tensor. Engineering shears are halved for strain-like tensors"""
    v = np.asarray(v, dtype=float)
    shear = 0.5 if kind == STRAIN else 1.0
    return np.array(
        [
            [v[0], shear * v[3], shear * v[5]],
            [shear * v[3], v[1], shear * v[4]],
            [shear * v[5], shear * v[4], v[2]],
        ]
    )


def from_matrix(m: np.ndarray, kind: str = STRAIN) -> np.ndarray:
    shear = 2.0 if kind == STRAIN else 1.0
    m = np.asarray(m, dtype=float)
    return np.array([m[i, j] * (1.0 if i == j else shear) for i, j in VOIGT_PAIRS])


def energy_pairing(stress: VecLike, strain: VecLike) -> float:
    """sigma:eps, exact as a plain dot product under the engineering-shear convention"""
    return float(np.dot(_vec(stress), _vec(strain)))


def iso_elasticity(E: float, nu: float) -> Tensor4:
    """Isotropic elasticity tensor from Young's modulus and Poisson's ratio"""
    if not E > 0:
        raise InvalidInputError("Elastic modulus must be positive", E=E)
    if not -1.0 < nu < 0.5:
        raise InvalidInputError("Poisson's ratio must lie in (-1, 0.5)", nu=nu)
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    G = E / (2.0 * (1.0 + nu))
    m = np.zeros((6, 6))
    m[:3, :3] = lam
    m[[0, 1, 2], [0, 1, 2]] = lam + 2.0 * G
    m[[3, 4, 5], [3, 4, 5]] = G
    return Tensor4(m)


def deviatoric_projector() -> np.ndarray:
    """
    Deviatoric projector in the engineering convention, maps a strain-like
    vector to the stress-like representation of its deviator times 1/2 on shears
    """
    p = np.diag([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])
    p[:3, :3] -= 1.0 / 3.0
    return p


def principal_values(t: VecLike) -> np.ndarray:
    """Principal values of a strain-like tensor sorted descending"""
    return np.linalg.eigvalsh(to_matrix(_vec(t), STRAIN))[::-1]


def principal_max(t: VecLike) -> Tuple[float, np.ndarray]:
    """
    Max principal value of a strain-like tensor and its gradient with
    respect to the Voigt components (n_i n_j, engineering shears weighted by 1/2
    twice, which cancels the doubled contribution of the symmetric pair)
    """
    values, vectors = np.linalg.eigh(to_matrix(_vec(t), STRAIN))
    n = vectors[:, -1]
    grad = np.array(
        [n[0] * n[0], n[1] * n[1], n[2] * n[2], n[0] * n[1], n[1] * n[2], n[0] * n[2]]
    )
    return float(values[-1]), grad


def deviatoric_and_eq(s: VecLike) -> Tuple[SymTensor2, float]:
    """Deviator of a stress-like tensor and the von Mises equivalent stress"""
    v = _vec(s)
    dev = v.copy()
    dev[:3] -= v[:3].mean()
    norm2 = float(np.dot(dev[:3], dev[:3]) + 2.0 * np.dot(dev[3:], dev[3:]))
    return SymTensor2(dev, STRESS), float(np.sqrt(1.5 * norm2))


def t4_apply(A: MatLike, x: VecLike) -> SymTensor2:
    """Apply a 6x6 tensor. Constitutive tensors turn strain-like input into stress-like output"""
    kind = x.kind if isinstance(x, SymTensor2) else STRAIN
    return SymTensor2(_mat(A) @ _vec(x), kind)


def t4_compose(A: MatLike, B: MatLike) -> Tensor4:
    return Tensor4(_mat(A) @ _mat(B))


def t4_inverse(A: MatLike) -> Tensor4:
    m = _mat(A)
    cond = float(np.linalg.cond(m))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularTensorError("Tensor4 is singular or ill-conditioned", condition=cond)
    inv = np.linalg.inv(m)
    defect = np.abs(m @ inv - np.eye(m.shape[0])).sum(axis=1).max()
    scale = np.abs(m).sum(axis=1).max()
    if defect > INVERSE_RTOL * max(scale, 1.0):
        raise SingularTensorError(
            "Tensor4 inverse is inaccurate", condition=cond, defect=float(defect)
        )
    return Tensor4(inv)


def is_spd(m: np.ndarray, rtol: float = 1e-12) -> bool:
    """True if the symmetric part of m is positive definite"""
    m = np.asarray(m, dtype=float)
    sym = 0.5 * (m + m.T)
    eig = np.linalg.eigvalsh(sym)
    return bool(eig[0] > rtol * max(abs(eig[-1]), 1e-300))
