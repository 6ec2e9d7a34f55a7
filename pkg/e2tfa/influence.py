"""
Preprocessing: elastic influence tensors from the unit macro strain solves,
their partition averages, the homogenized stiffness and the eigen influence
tensors that drive the reduced model.

Plane-strain (2D) data is stored as 6x6 tensors. The active block (11, 22, 12)
holds the computed values, the out-of-plane block is padded (identity for the
influence tensors, the volume average of the phase stiffness for the
homogenized one) and the cross blocks are zero.
"""

import logging
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple
import numpy as np
from e2tfa import VERSION
from e2tfa.exceptions import InvariantError, PreprocessFileError, SingularTensorError
from e2tfa.rvefe import (
    MATRIX,
    PHASE_NAMES,
    RveMesh,
    check_partitions,
    element_tangents,
    solve_cases,
)
from e2tfa.util import read_json, write_json
from e2tfa.voigt import active_components, is_spd

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SBAR_INDEX_ORDERS = ("as_printed", "discussion")
DEFAULT_SBAR_ORDER = "discussion"
UNITY_ATOL = 1e-8
VF_ATOL = 1e-12
ASYMMETRY_RTOL = 1e-6
CONSTRUCTION_RTOL = 1e-10


class PreprocessData(NamedTuple):
    dim: int
    v_f: np.ndarray
    partition_phase: Tuple[int, ...]
    Ebar: np.ndarray
    Sbar: np.ndarray
    Lbar: np.ndarray
    Mbar: np.ndarray
    phase_L: Dict[str, np.ndarray]
    mesh_hash: str = ""
    resolution: Tuple[int, int] = (0, 0)
    sbar_index_order: str = DEFAULT_SBAR_ORDER

    @property
    def M(self) -> int:
        return len(self.v_f)

    @property
    def active(self) -> Tuple[int, ...]:
        return active_components(self.dim)

    def partition_L(self, i: int) -> np.ndarray:
        return self.phase_L[PHASE_NAMES[self.partition_phase[i]]]

    def block(self, m: np.ndarray) -> np.ndarray:
        """Active block of a 6x6 tensor or of a stack of them"""
        a = list(self.active)
        return m[..., a, :][..., :, a]


class FullDamageReport(NamedTuple):
    stress_ratio: float
    residual: float
    eps_bar: np.ndarray
    mu_bar: np.ndarray
    closed_form_ratio: float = 0.0


def _pad_plane(m: np.ndarray, dim: int, fill: Optional[np.ndarray] = None) -> np.ndarray:
    """Zeroes the cross blocks of a plane-strain tensor, fills the out-of-plane block"""
    if dim == 3:
        return m
    a = list(active_components(2))
    rest = [k for k in range(6) if k not in a]
    out = np.zeros_like(m)
    out[np.ix_(a, a)] = m[np.ix_(a, a)]
    out[np.ix_(rest, rest)] = np.eye(len(rest)) if fill is None else fill[np.ix_(rest, rest)]
    return out


def elastic_influence(
    mesh: RveMesh, phase_L: Dict[int, np.ndarray], max_workers: int = 1
) -> np.ndarray:
    """
    Per-element influence tensor E(y): column k is the element strain under the
    unit macro strain case k
    """
    check_partitions(mesh)
    E = np.zeros((mesh.n_elems, 6, 6))
    if mesh.dim == 2:
        E[:, [2, 4, 5], [2, 4, 5]] = 1.0
    for field in solve_cases(mesh, phase_L, max_workers=max_workers):
        E[:, :, field.case.component] = field.strain
    return E


def reduce_E(E: np.ndarray, mesh: RveMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Volume-weighted partition averages of E(y) and partition volume fractions"""
    check_partitions(mesh)
    M = mesh.n_partitions
    Ebar = np.zeros((M, 6, 6))
    vol = mesh.elem_volume
    for i in range(M):
        sel = mesh.elem_partition == i
        Ebar[i] = np.einsum("e,eij->ij", vol[sel], E[sel]) / vol[sel].sum()
    if mesh.dim == 2:
        Ebar = np.stack([_pad_plane(m, 2) for m in Ebar])
    return Ebar, mesh.partition_volume_fractions()


def homogenize_L(E: np.ndarray, mesh: RveMesh, phase_L: Dict[int, np.ndarray]) -> np.ndarray:
    """Volume average of L(y) : E(y), symmetrized"""
    Le = element_tangents(mesh, phase_L)
    w = mesh.elem_volume / mesh.elem_volume.sum()
    Lbar = np.einsum("e,eij,ejk->ik", w, Le, E)
    if mesh.dim == 2:
        Lbar = _pad_plane(Lbar, 2, fill=np.einsum("e,eij->ij", w, Le))
    a = active_components(mesh.dim)
    act = Lbar[np.ix_(a, a)]
    asym = np.abs(act - act.T).max() / np.abs(act).max()
    if asym > ASYMMETRY_RTOL:
        raise InvariantError(
            "Homogenized stiffness is not symmetric, the cell solve is broken",
            invariant="Lbar-symmetry",
            defect=float(asym),
        )
    log.debug("Homogenized stiffness asymmetry before symmetrizing: %.3e", asym)
    return 0.5 * (Lbar + Lbar.T)


def compute_M(
    Ebar: np.ndarray, v_f: np.ndarray, partition_L: Sequence[np.ndarray], dim: int
) -> np.ndarray:
    """Homogenized eigen tensors M^i = -v^i L^i : E^i"""
    Mbar = np.stack([-v * L @ E for v, L, E in zip(v_f, partition_L, Ebar)])
    if dim == 2:
        Mbar = np.stack(
            [_pad_plane(m, 2, fill=-v * L) for m, v, L in zip(Mbar, v_f, partition_L)]
        )
    return Mbar


def compute_S(Ebar: np.ndarray, v_f: np.ndarray, order: str = DEFAULT_SBAR_ORDER) -> np.ndarray:
    """
    Eigen influence tensors. as_printed: S^ij = delta_ij I - v^i E^j,
    discussion: S^ij = delta_ij I - v^j E^i
    """
    if order not in SBAR_INDEX_ORDERS:
        raise InvariantError(
            "Unknown eigen influence index order",
            invariant="sbar_index_order",
            order=order,
        )
    M = len(v_f)
    S = np.zeros((M, M, 6, 6))
    for i in range(M):
        for j in range(M):
            if order == "as_printed":
                S[i, j] = -v_f[i] * Ebar[j]
            else:
                S[i, j] = -v_f[j] * Ebar[i]
            if i == j:
                S[i, j] += np.eye(6)
    return S


def preprocess(
    mesh: RveMesh,
    phase_L: Dict[str, np.ndarray],
    sbar_index_order: str = DEFAULT_SBAR_ORDER,
    max_workers: int = 1,
) -> PreprocessData:
    """Builds every preprocessing tensor for the mesh"""
    by_id = {
        p: np.asarray(phase_L[name], dtype=float)
        for p, name in enumerate(PHASE_NAMES)
        if name in phase_L
    }
    E = elastic_influence(mesh, by_id, max_workers=max_workers)
    Ebar, v_f = reduce_E(E, mesh)
    Lbar = homogenize_L(E, mesh, by_id)
    partition_L = [by_id[p] for p in mesh.partition_phase]
    pp = PreprocessData(
        dim=mesh.dim,
        v_f=v_f,
        partition_phase=tuple(mesh.partition_phase),
        Ebar=Ebar,
        Sbar=compute_S(Ebar, v_f, sbar_index_order),
        Lbar=Lbar,
        Mbar=compute_M(Ebar, v_f, partition_L, mesh.dim),
        phase_L={PHASE_NAMES[p]: L for p, L in by_id.items()},
        mesh_hash=mesh.hash(),
        resolution=(mesh.n_divisions, mesh.n_layers),
        sbar_index_order=sbar_index_order,
    )
    validate(pp)
    log.info("Preprocessed %d partitions on %dD mesh %s", pp.M, pp.dim, pp.mesh_hash)
    return pp


def homogeneous_preprocess(
    L: np.ndarray, dim: int, sbar_index_order: str = DEFAULT_SBAR_ORDER
) -> PreprocessData:
    """Single-partition data of a homogeneous cell, no mesh needed"""
    L = np.asarray(L, dtype=float)
    Lbar = _pad_plane(L, dim, fill=L)
    return PreprocessData(
        dim=dim,
        v_f=np.ones(1),
        partition_phase=(MATRIX,),
        Ebar=np.eye(6)[None],
        Sbar=np.zeros((1, 1, 6, 6)),
        Lbar=Lbar,
        Mbar=-Lbar[None],
        phase_L={PHASE_NAMES[MATRIX]: L},
        sbar_index_order=sbar_index_order,
    )


def validate(pp: PreprocessData) -> None:
    a = pp.active
    if abs(pp.v_f.sum() - 1.0) > VF_ATOL or np.any(pp.v_f <= 0):
        raise InvariantError(
            "Partition volume fractions must be positive and sum to one",
            invariant="volume-fractions",
            defect=float(abs(pp.v_f.sum() - 1.0)),
        )
    unity = np.einsum("i,ijk->jk", pp.v_f, pp.block(pp.Ebar)) - np.eye(len(a))
    if np.abs(unity).max() >= UNITY_ATOL:
        raise InvariantError(
            "Influence tensors violate the partition of unity",
            invariant="partition-of-unity",
            defect=float(np.abs(unity).max()),
        )
    Lb = pp.block(pp.Lbar)
    if not np.allclose(Lb, Lb.T, rtol=0, atol=ASYMMETRY_RTOL * np.abs(Lb).max()) or not is_spd(Lb):
        raise InvariantError("Homogenized stiffness is not SPD", invariant="Lbar-spd")
    for i in range(pp.M):
        expected = -pp.v_f[i] * pp.partition_L(i) @ pp.Ebar[i]
        defect = np.abs(pp.block(pp.Mbar[i]) - pp.block(expected)).max()
        if defect > CONSTRUCTION_RTOL * max(np.abs(expected).max(), 1.0):
            raise InvariantError(
                "Eigen tensor does not match its construction",
                invariant="Mbar",
                partition=i,
                defect=float(defect),
            )
    expected_S = compute_S(pp.Ebar, pp.v_f, pp.sbar_index_order)
    if np.abs(pp.block(pp.Sbar) - pp.block(expected_S)).max() > CONSTRUCTION_RTOL:
        raise InvariantError("Eigen influence tensors do not match", invariant="Sbar")


def check_mesh(pp: PreprocessData, mesh: RveMesh) -> bool:
    if pp.mesh_hash and pp.mesh_hash != mesh.hash():
        log.warning(
            "Preprocessing data was built on mesh %s, combined with mesh %s",
            pp.mesh_hash,
            mesh.hash(),
        )
        return False
    return True


def macro_stress(pp: PreprocessData, eps_o: np.ndarray, mu_bar: np.ndarray) -> np.ndarray:
    """sigma_o = Lbar : eps_o + sum_i Mbar^i : mu^i, zero outside the active components"""
    a = list(pp.active)
    out = np.zeros(6)
    out[a] = pp.block(pp.Lbar) @ np.asarray(eps_o)[a] + np.einsum(
        "ijk,ik->j", pp.block(pp.Mbar), np.asarray(mu_bar)[:, a]
    )
    return out


def partition_strains(pp: PreprocessData, eps_o: np.ndarray, mu_bar: np.ndarray) -> np.ndarray:
    """eps^i = E^i : eps_o + sum_j S^ij : mu^j"""
    a = list(pp.active)
    out = np.zeros((pp.M, 6))
    out[:, a] = np.einsum("ijk,k->ij", pp.block(pp.Ebar), np.asarray(eps_o)[a]) + np.einsum(
        "ijkl,jl->ik", pp.block(pp.Sbar), np.asarray(mu_bar)[:, a]
    )
    return out


def partition_stresses(pp: PreprocessData, eps_bar: np.ndarray, mu_bar: np.ndarray) -> np.ndarray:
    """sigma^i = L^i : (eps^i - mu^i)"""
    a = list(pp.active)
    out = np.zeros((pp.M, 6))
    for i in range(pp.M):
        out[i, a] = pp.block(pp.partition_L(i)) @ (eps_bar[i, a] - mu_bar[i, a])
    return out


def stress_averaging_defect(pp: PreprocessData, eps_o: np.ndarray, mu_bar: np.ndarray) -> float:
    """Relative gap between the volume average of partition stresses and the macro stress"""
    sig_o = macro_stress(pp, eps_o, mu_bar)
    sig_parts = partition_stresses(pp, partition_strains(pp, eps_o, mu_bar), mu_bar)
    avg = np.einsum("i,ij->j", pp.v_f, sig_parts)
    return float(np.linalg.norm(avg - sig_o) / max(np.linalg.norm(sig_o), 1e-300))


def levin_eigenstrain(pp: PreprocessData, mu_bar: np.ndarray) -> np.ndarray:
    """Macro eigenstrain mu_o with sum_i Mbar^i : mu^i = -Lbar : mu_o"""
    a = list(pp.active)
    out = np.zeros(6)
    rhs = np.einsum("ijk,ik->j", pp.block(pp.Mbar), np.asarray(mu_bar)[:, a])
    out[a] = -np.linalg.solve(pp.block(pp.Lbar), rhs)
    return out


def full_damage_defect(
    pp: PreprocessData, eps_o: np.ndarray, damaged: Optional[Sequence[bool]] = None
) -> FullDamageReport:
    """
    Fixed point mu^i = eps^i on the damaged partitions (mu = 0 elsewhere)
    solved in the least-squares sense. Reports the volume-averaged partition
    stress relative to Lbar : eps_o, the same ratio for the closed-form macro
    stress and the residual of the fixed-point system
    """
    a = list(pp.active)
    n = len(a)
    if damaged is None:
        damaged = [True] * pp.M
    D = [i for i in range(pp.M) if damaged[i]]
    Eb, Sb = pp.block(pp.Ebar), pp.block(pp.Sbar)
    e = np.asarray(eps_o, dtype=float)[a]
    A = np.zeros((len(D) * n, len(D) * n))
    rhs = np.zeros(len(D) * n)
    for r, i in enumerate(D):
        rhs[r * n : (r + 1) * n] = Eb[i] @ e
        for c, j in enumerate(D):
            A[r * n : (r + 1) * n, c * n : (c + 1) * n] = (np.eye(n) if i == j else 0.0) - Sb[i, j]
    x, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    residual = float(np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))
    mu_bar = np.zeros((pp.M, 6))
    for r, i in enumerate(D):
        mu_bar[i, a] = x[r * n : (r + 1) * n]
    eps_bar = partition_strains(pp, np.asarray(eps_o, dtype=float), mu_bar)
    avg = pp.v_f @ partition_stresses(pp, eps_bar, mu_bar)
    closed = macro_stress(pp, eps_o, mu_bar)
    ref = max(np.linalg.norm(pp.block(pp.Lbar) @ e), 1e-300)
    return FullDamageReport(
        float(np.linalg.norm(avg) / ref),
        residual,
        eps_bar,
        mu_bar,
        float(np.linalg.norm(closed) / ref),
    )


def voigt_reuss_bounds(pp: PreprocessData) -> Tuple[np.ndarray, np.ndarray]:
    """Reuss and Voigt stiffness bounds on the active block"""
    blocks = [pp.block(pp.partition_L(i)) for i in range(pp.M)]
    voigt = sum(v * L for v, L in zip(pp.v_f, blocks))
    reuss = np.linalg.inv(sum(v * np.linalg.inv(L) for v, L in zip(pp.v_f, blocks)))
    return reuss, voigt


def check_bounds(pp: PreprocessData, rtol: float = 1e-9) -> None:
    reuss, voigt = voigt_reuss_bounds(pp)
    Lb = pp.block(pp.Lbar)
    scale = np.abs(voigt).max()
    low = np.linalg.eigvalsh(0.5 * ((Lb - reuss) + (Lb - reuss).T)).min()
    high = np.linalg.eigvalsh(0.5 * ((voigt - Lb) + (voigt - Lb).T)).min()
    if low < -rtol * scale or high < -rtol * scale:
        raise InvariantError(
            "Homogenized stiffness outside the Voigt-Reuss bounds",
            invariant="bounds",
            reuss_gap=float(low),
            voigt_gap=float(high),
        )


def engineering_constants(Lbar: np.ndarray, dim: int) -> Dict[str, float]:
    """
    Moduli and Poisson's ratios from the compliance of the active block.
    3D results also carry the fiber-frame names, the fiber axis being x3
    """
    a = list(active_components(dim))
    try:
        C = np.linalg.inv(np.asarray(Lbar)[np.ix_(a, a)])
    except np.linalg.LinAlgError as exc:
        raise SingularTensorError("Homogenized stiffness is singular") from exc
    if dim == 2:
        plane = {
            "E_1": 1.0 / C[0, 0],
            "E_2": 1.0 / C[1, 1],
            "nu_12": -C[1, 0] / C[0, 0],
            "G_12": 1.0 / C[2, 2],
        }
        return {key: float(value) for key, value in plane.items()}
    out = {
        "E_1": 1.0 / C[0, 0],
        "E_2": 1.0 / C[1, 1],
        "E_3": 1.0 / C[2, 2],
        "nu_12": -C[1, 0] / C[0, 0],
        "nu_13": -C[2, 0] / C[0, 0],
        "nu_23": -C[2, 1] / C[1, 1],
        "G_12": 1.0 / C[3, 3],
        "G_23": 1.0 / C[4, 4],
        "G_13": 1.0 / C[5, 5],
    }
    out.update(
        {
            "E_axial": out["E_3"],
            "E_transverse": out["E_1"],
            "nu_axial": -C[0, 2] / C[2, 2],
            "G_axial": out["G_13"],
            "G_transverse": out["G_12"],
        }
    )
    return {key: float(value) for key, value in out.items()}


def to_dict(pp: PreprocessData, config_hash: str = "") -> Dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "tool": "e2tfa " + VERSION,
        "config_hash": config_hash,
        "dim": pp.dim,
        "M": pp.M,
        "v_f": pp.v_f.tolist(),
        "partition_phase": list(pp.partition_phase),
        "Ebar": pp.Ebar.tolist(),
        "Sbar": pp.Sbar.tolist(),
        "Lbar": pp.Lbar.tolist(),
        "Mbar": pp.Mbar.tolist(),
        "phase_L": {name: L.tolist() for name, L in pp.phase_L.items()},
        "mesh_hash": pp.mesh_hash,
        "resolution": list(pp.resolution),
        "sbar_index_order": pp.sbar_index_order,
    }


def from_dict(doc: Dict[str, Any]) -> PreprocessData:
    if doc.get("version") != FORMAT_VERSION:
        raise PreprocessFileError(
            "Unsupported preprocessing file version",
            version=doc.get("version"),
            expected=FORMAT_VERSION,
        )
    try:
        M = int(doc["M"])
        pp = PreprocessData(
            dim=int(doc["dim"]),
            v_f=np.array(doc["v_f"], dtype=float),
            partition_phase=tuple(int(p) for p in doc["partition_phase"]),
            Ebar=np.array(doc["Ebar"], dtype=float).reshape(M, 6, 6),
            Sbar=np.array(doc["Sbar"], dtype=float).reshape(M, M, 6, 6),
            Lbar=np.array(doc["Lbar"], dtype=float).reshape(6, 6),
            Mbar=np.array(doc["Mbar"], dtype=float).reshape(M, 6, 6),
            phase_L={
                name: np.array(L, dtype=float).reshape(6, 6)
                for name, L in doc["phase_L"].items()
            },
            mesh_hash=str(doc.get("mesh_hash", "")),
            resolution=tuple(doc.get("resolution", (0, 0))),  # type: ignore
            sbar_index_order=str(doc.get("sbar_index_order", DEFAULT_SBAR_ORDER)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PreprocessFileError("Malformed preprocessing data") from exc
    if len(pp.v_f) != M or len(pp.partition_phase) != M:
        raise PreprocessFileError("Partition count mismatch", M=M, v_f=len(pp.v_f))
    for i in range(M):
        if PHASE_NAMES[pp.partition_phase[i]] not in pp.phase_L:
            raise PreprocessFileError("No elasticity stored for partition phase", partition=i)
    try:
        validate(pp)
    except InvariantError as exc:
        raise PreprocessFileError("Preprocessing data fails validation") from exc
    return pp


def save(pp: PreprocessData, path: str, config_hash: str = "") -> None:
    write_json(path, to_dict(pp, config_hash))


def load(path: str) -> PreprocessData:
    pp = from_dict(read_json(path))
    log.info("Loaded preprocessing data with %d partitions from %s", pp.M, path)
    return pp


def summary_rows(pp: PreprocessData) -> List[List[Any]]:
    rows = []
    for i in range(pp.M):
        Eb = pp.block(pp.Ebar[i])
        rows.append([i, PHASE_NAMES[pp.partition_phase[i]], pp.v_f[i]] + np.diag(Eb).tolist())
    return rows
