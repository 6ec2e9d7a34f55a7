"""
Linear finite elements on the periodic unit cell.

The cell [0,1]^dim is meshed with a structured grid of bilinear quads
(plane strain) or trilinear hexes. Phases are assigned by element centroid:
fiber inside the centered circle (2D) or the cylinder along x3 (3D) of
radius sqrt(v_f / pi). The displacement is split into the affine part
eps_o . y and a periodic fluctuation, and periodicity is enforced by
master-slave elimination: every node maps to the master with the same grid
index modulo n. One master node is pinned to remove rigid translation.
"""

import concurrent.futures
import logging
import math
import threading
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from e2tfa.exceptions import InvalidInputError, MeshError, SolverError
from e2tfa.util import array_hash, read_json, write_json
from e2tfa.voigt import active_components, unit_strain

log = logging.getLogger(__name__)

FIBER = 0
MATRIX = 1
PHASE_NAMES = ("fiber", "matrix")
PARTITION_SCHEMES = ("per-phase", "radial-bands")
VF_TOLERANCE = 0.02
MIN_DIVISIONS = 8
MESH_FORMAT_VERSION = 1
SOLVE_RTOL = 1e-10


class RveMesh(NamedTuple):
    dim: int
    n_divisions: int
    n_layers: int
    nodes: np.ndarray
    elems: np.ndarray
    elem_phase: np.ndarray
    elem_partition: np.ndarray
    elem_volume: np.ndarray
    fiber_radius: float
    v_f_target: float
    partition_phase: Tuple[int, ...]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    @property
    def n_partitions(self) -> int:
        return len(self.partition_phase)

    @property
    def v_f(self) -> float:
        """Achieved fiber volume fraction"""
        return float(self.elem_volume[self.elem_phase == FIBER].sum() / self.elem_volume.sum())

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        if self.dim == 2:
            return (self.n_divisions, self.n_divisions)
        return (self.n_divisions, self.n_divisions, self.n_layers)

    def partition_volume_fractions(self) -> np.ndarray:
        vol = np.bincount(
            self.elem_partition, weights=self.elem_volume, minlength=self.n_partitions
        )
        return vol / self.elem_volume.sum()

    def hash(self) -> str:
        header = "{}:{}:{}".format(self.dim, self.n_divisions, self.n_layers)
        return array_hash(
            self.elem_phase.astype(np.int8),
            self.elem_partition.astype(np.int32),
            prefix=header,
        )


class LoadCase(NamedTuple):
    case_id: int
    component: int
    macro_strain: np.ndarray


class ElemStrainField(NamedTuple):
    case: LoadCase
    strain: np.ndarray
    fluctuation: np.ndarray


class ElementOps(NamedTuple):
    """Operators shared by every element of a structured grid"""

    B: np.ndarray
    weights: np.ndarray
    B_centroid: np.ndarray
    volume: float


class PeriodicDofs(NamedTuple):
    """
    elem_dofs holds full nodal DOFs per element, reduced maps a full DOF to
    its unknown index or -1 for the pinned master node
    """

    elem_dofs: np.ndarray
    reduced: np.ndarray
    n_free: int
    master: np.ndarray


def load_cases(dim: int) -> List[LoadCase]:
    return [
        LoadCase(i + 1, k, unit_strain(k)) for i, k in enumerate(active_components(dim))
    ]


def _grid_nodes(dim: int, n: int, n_layers: int) -> Tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(0.0, 1.0, n + 1)
    if dim == 2:
        y, x = np.meshgrid(xs, xs, indexing="ij")
        nodes = np.column_stack([x.ravel(), y.ravel()])
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        i, j = i.ravel(), j.ravel()

        def nid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
            return a + (n + 1) * b

        elems = np.column_stack([nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)])
        return nodes, elems
    zs = np.linspace(0.0, 1.0, n_layers + 1)
    z, y, x = np.meshgrid(zs, xs, xs, indexing="ij")
    nodes = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    k, j, i = np.meshgrid(np.arange(n_layers), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()

    def nid3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
        return a + (n + 1) * (b + (n + 1) * c)

    elems = np.column_stack(
        [
            nid3(i, j, k),
            nid3(i + 1, j, k),
            nid3(i + 1, j + 1, k),
            nid3(i, j + 1, k),
            nid3(i, j, k + 1),
            nid3(i + 1, j, k + 1),
            nid3(i + 1, j + 1, k + 1),
            nid3(i, j + 1, k + 1),
        ]
    )
    return nodes, elems


def _band_edges(lo: float, hi: float, count: int) -> np.ndarray:
    return np.linspace(lo, hi, count + 1)


def generate_mesh(
    dim: int,
    n_divisions: int,
    v_f_target: float,
    partition_scheme: str = "per-phase",
    n_layers: Optional[int] = None,
    bands: Tuple[int, int] = (2, 3),
) -> RveMesh:
    """
    Structured unit-cell mesh with fiber/matrix phases and phase-pure partitions.
    Partitions are numbered fiber first, then matrix, inner bands first
    """
    active_components(dim)
    if n_divisions < MIN_DIVISIONS:
        raise InvalidInputError(
            "Mesh needs at least {} divisions".format(MIN_DIVISIONS), n_divisions=n_divisions
        )
    if not 0.0 <= v_f_target < 0.7:
        raise InvalidInputError("Fiber volume fraction must lie in [0, 0.7)", v_f=v_f_target)
    if partition_scheme not in PARTITION_SCHEMES:
        raise InvalidInputError(
            "Unknown partition scheme",
            scheme=partition_scheme,
            known=", ".join(PARTITION_SCHEMES),
        )
    if dim == 2:
        n_layers = 1
    elif n_layers is None:
        n_layers = n_divisions
    if n_layers < 1:
        raise InvalidInputError("n_layers must be positive", n_layers=n_layers)

    nodes, elems = _grid_nodes(dim, n_divisions, n_layers)
    centroids = nodes[elems].mean(axis=1)
    dist = np.hypot(centroids[:, 0] - 0.5, centroids[:, 1] - 0.5)
    radius = math.sqrt(v_f_target / math.pi)
    elem_phase = np.where(dist < radius, FIBER, MATRIX).astype(np.int64)
    elem_volume = np.full(elems.shape[0], 1.0 / elems.shape[0])

    if partition_scheme == "per-phase":
        labels = np.where(elem_phase == FIBER, 0, 1)
    else:
        n_fiber, n_matrix = bands
        if n_fiber < 1 or n_matrix < 1:
            raise InvalidInputError("Band counts must be positive", bands=list(bands))
        fiber_band = np.clip(
            np.searchsorted(_band_edges(0.0, radius, n_fiber), dist, side="right") - 1,
            0,
            n_fiber - 1,
        )
        matrix_band = np.clip(
            np.searchsorted(_band_edges(radius, math.sqrt(0.5), n_matrix), dist, side="right")
            - 1,
            0,
            n_matrix - 1,
        )
        labels = np.where(elem_phase == FIBER, fiber_band, n_fiber + matrix_band)

    # renumber used labels contiguously, dropping empty partitions
    used, elem_partition = np.unique(labels, return_inverse=True)
    partition_phase = tuple(
        int(elem_phase[elem_partition == i][0]) for i in range(len(used))
    )
    mesh = RveMesh(
        dim=dim,
        n_divisions=n_divisions,
        n_layers=n_layers,
        nodes=nodes,
        elems=elems,
        elem_phase=elem_phase,
        elem_partition=elem_partition.astype(np.int64),
        elem_volume=elem_volume,
        fiber_radius=radius,
        v_f_target=v_f_target,
        partition_phase=partition_phase,
    )
    if abs(mesh.v_f - v_f_target) > VF_TOLERANCE:
        raise MeshError(
            "Achieved fiber volume fraction drifts from the target, use a finer mesh",
            v_f_target=v_f_target,
            v_f=mesh.v_f,
            n_divisions=n_divisions,
        )
    log.info(
        "Generated %dD mesh: %d elements, %d partitions, v_f=%.4f (target %.4f)",
        dim,
        mesh.n_elems,
        mesh.n_partitions,
        mesh.v_f,
        v_f_target,
    )
    return mesh


def check_partitions(mesh: RveMesh) -> None:
    for i, phase in enumerate(mesh.partition_phase):
        members = mesh.elem_partition == i
        if not members.any():
            raise MeshError("Partition is empty", partition=i)
        if np.any(mesh.elem_phase[members] != phase):
            raise MeshError("Partition spans two phases", partition=i)


def _shape_gradients(dim: int, xi: np.ndarray) -> np.ndarray:
    """dN/dxi of the bilinear/trilinear element at reference point xi"""
    if dim == 2:
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    else:
        signs = np.array(
            [
                [-1, -1, -1],
                [1, -1, -1],
                [1, 1, -1],
                [-1, 1, -1],
                [-1, -1, 1],
                [1, -1, 1],
                [1, 1, 1],
                [-1, 1, 1],
            ],
            dtype=float,
        )
    grads = np.empty_like(signs)
    for a in range(dim):
        others = [b for b in range(dim) if b != a]
        factor = signs[:, a] / 2.0 ** dim
        for b in others:
            factor = factor * (1.0 + signs[:, b] * xi[b])
        grads[:, a] = factor
    return grads


def _strain_displacement(dim: int, dN_dx: np.ndarray) -> np.ndarray:
    """6 x (n_nodes*dim) B matrix in engineering-shear Voigt order"""
    n_nodes = dN_dx.shape[0]
    B = np.zeros((6, n_nodes * dim))
    for a in range(n_nodes):
        gx = dN_dx[a]
        c = a * dim
        B[0, c] = gx[0]
        B[1, c + 1] = gx[1]
        B[3, c] = gx[1]
        B[3, c + 1] = gx[0]
        if dim == 3:
            B[2, c + 2] = gx[2]
            B[4, c + 1] = gx[2]
            B[4, c + 2] = gx[1]
            B[5, c] = gx[2]
            B[5, c + 2] = gx[0]
    return B


def element_ops(mesh: RveMesh) -> ElementOps:
    """Full Gauss integration operators; every element of the grid is the same box"""
    dim = mesh.dim
    h = np.array([1.0 / mesh.n_divisions] * 2 + ([1.0 / mesh.n_layers] if dim == 3 else []))
    jac_inv = 1.0 / (h / 2.0)
    det = float(np.prod(h / 2.0))
    g = 1.0 / math.sqrt(3.0)
    points = np.array(np.meshgrid(*([[-g, g]] * dim), indexing="ij")).reshape(dim, -1).T
    B = np.stack([_strain_displacement(dim, _shape_gradients(dim, xi) * jac_inv) for xi in points])
    weights = np.full(points.shape[0], det)
    B_centroid = _strain_displacement(dim, _shape_gradients(dim, np.zeros(dim)) * jac_inv)
    return ElementOps(B, weights, B_centroid, float(np.prod(h)))


def periodic_dofs(mesh: RveMesh) -> PeriodicDofs:
    n = mesh.n_divisions
    dim = mesh.dim
    if dim == 2:
        idx = np.arange((n + 1) ** 2)
        i, j = idx % (n + 1), idx // (n + 1)
        master = (i % n) + n * (j % n)
        n_master = n * n
    else:
        nz = mesh.n_layers
        idx = np.arange((n + 1) ** 2 * (nz + 1))
        i = idx % (n + 1)
        j = (idx // (n + 1)) % (n + 1)
        k = idx // ((n + 1) ** 2)
        master = (i % n) + n * ((j % n) + n * (k % nz))
        n_master = n * n * nz
    master_dofs = np.arange(n_master * dim).reshape(n_master, dim)
    # master node 0 pinned, remaining unknowns shifted down
    reduced_master = master_dofs - dim
    reduced_master[0] = -1
    reduced = reduced_master[master].ravel()
    elem_dofs = (mesh.elems[:, :, None] * dim + np.arange(dim)).reshape(mesh.n_elems, -1)
    return PeriodicDofs(elem_dofs, reduced, (n_master - 1) * dim, master)


def check_periodic_pairing(mesh: RveMesh) -> None:
    """Every node must sit an integer lattice vector away from its master"""
    dofs = periodic_dofs(mesh)
    _, first = np.unique(dofs.master, return_index=True)
    shift = mesh.nodes - mesh.nodes[first[dofs.master]]
    bad = np.abs(shift - np.round(shift)) > 1e-12
    if bad.any():
        node = int(np.argwhere(bad.any(axis=1))[0, 0])
        axis = int(np.argwhere(bad[node])[0, 0])
        raise MeshError(
            "Periodic pairing broken",
            face="x{}".format(axis + 1),
            node=node,
        )


def _assemble(
    ke: np.ndarray, dofs: PeriodicDofs, shape: Tuple[int, int]
) -> scipy.sparse.csc_matrix:
    red = dofs.reduced[dofs.elem_dofs]
    rows = np.broadcast_to(red[:, :, None], ke.shape)
    cols = np.broadcast_to(red[:, None, :], ke.shape)
    mask = (rows >= 0) & (cols >= 0)
    return scipy.sparse.coo_matrix(
        (ke[mask], (rows[mask], cols[mask])), shape=shape
    ).tocsc()


def assemble_vector(fe: np.ndarray, dofs: PeriodicDofs) -> np.ndarray:
    """Sums element vectors (n_elems, n_dofs_e[, k]) into reduced unknowns"""
    red = dofs.reduced[dofs.elem_dofs].ravel()
    flat = fe.reshape((red.size,) + fe.shape[2:])
    mask = red >= 0
    out = np.zeros((dofs.n_free,) + fe.shape[2:])
    np.add.at(out, red[mask], flat[mask])
    return out


def assemble_stiffness(
    ops: ElementOps, dofs: PeriodicDofs, elem_tangent: np.ndarray
) -> scipy.sparse.csc_matrix:
    """
    elem_tangent is (n_elems, 6, 6) for one tangent per element or
    (n_elems, n_gauss, 6, 6) for one per Gauss point
    """
    subscripts = "gik,eij,gjl,g->ekl" if elem_tangent.ndim == 3 else "gik,egij,gjl,g->ekl"
    ke = np.einsum(subscripts, ops.B, elem_tangent, ops.B, ops.weights, optimize=True)
    return _assemble(ke, dofs, (dofs.n_free, dofs.n_free))


def expand_fluctuation(u_red: np.ndarray, dofs: PeriodicDofs) -> np.ndarray:
    """Full nodal fluctuation from the reduced unknowns (pinned DOFs are zero)"""
    padded = np.concatenate([u_red, np.zeros((1,) + u_red.shape[1:])])
    return padded[dofs.reduced]


def assemble_solve(K: scipy.sparse.spmatrix, f: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve with a relative residual check"""
    try:
        factor = scipy.sparse.linalg.splu(scipy.sparse.csc_matrix(K))
    except RuntimeError as exc:
        raise SolverError(
            "Sparse factorization failed", n=K.shape[0], nnz=int(K.nnz)
        ) from exc
    return solve_factored(factor, K, f)


def solve_factored(
    factor: scipy.sparse.linalg.SuperLU, K: scipy.sparse.spmatrix, f: np.ndarray
) -> np.ndarray:
    u = factor.solve(np.asarray(f, dtype=float))
    res = np.linalg.norm(K @ u - f)
    scale = np.linalg.norm(f)
    if not np.all(np.isfinite(u)) or res > SOLVE_RTOL * max(scale, 1e-300) and res > 1e-14:
        diag = np.abs(factor.U.diagonal())
        raise SolverError(
            "Linear solve residual too large",
            residual=float(res),
            rhs=float(scale),
            min_pivot=float(diag.min()) if diag.size else 0.0,
            max_pivot=float(diag.max()) if diag.size else 0.0,
        )
    return u


def element_tangents(mesh: RveMesh, phase_L: Dict[int, np.ndarray]) -> np.ndarray:
    missing = set(np.unique(mesh.elem_phase)) - set(phase_L)
    if missing:
        raise InvalidInputError("No elasticity for phases", phases=sorted(int(m) for m in missing))
    stack = np.zeros((len(PHASE_NAMES), 6, 6))
    for phase, L in phase_L.items():
        stack[phase] = L
    return stack[mesh.elem_phase]


def solve_cases(
    mesh: RveMesh,
    phase_L: Dict[int, np.ndarray],
    cases: Optional[Sequence[LoadCase]] = None,
    max_workers: int = 1,
) -> List[ElemStrainField]:
    """
    Solves the unit macro strain load cases with one factorization of the
    periodic stiffness. Returns the total strain at every element centroid
    """
    if cases is None:
        cases = load_cases(mesh.dim)
    ops = element_ops(mesh)
    dofs = periodic_dofs(mesh)
    Le = element_tangents(mesh, phase_L)
    K = assemble_stiffness(ops, dofs, Le)
    try:
        factor = scipy.sparse.linalg.splu(K)
    except RuntimeError as exc:
        raise SolverError(
            "Periodic stiffness is singular, check pairing of opposite faces",
            n=K.shape[0],
        ) from exc
    log.debug("Factorized periodic stiffness: %d unknowns, %d nonzeros", K.shape[0], K.nnz)
    # SuperLU objects are not safe to share between threads
    solve_lock = threading.Lock()

    def solve_one(case: LoadCase) -> ElemStrainField:
        sig = Le @ case.macro_strain
        fe = -np.einsum("gij,ei,g->ej", ops.B, sig, ops.weights)
        rhs = assemble_vector(fe, dofs)
        with solve_lock:
            u = solve_factored(factor, K, rhs)
        u_full = expand_fluctuation(u, dofs)
        strain = case.macro_strain + u_full[dofs.elem_dofs] @ ops.B_centroid.T
        log.info("Solved load case %d (unit strain component %d)", case.case_id, case.component)
        return ElemStrainField(case, strain, u_full)

    if max_workers <= 1 or len(cases) == 1:
        return [solve_one(case) for case in cases]
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as exe:
        return list(exe.map(solve_one, cases))


def solve_case(
    mesh: RveMesh, phase_L: Dict[int, np.ndarray], lc: LoadCase
) -> ElemStrainField:
    return solve_cases(mesh, phase_L, [lc])[0]


def phase_averages(mesh: RveMesh, field: np.ndarray) -> Dict[int, np.ndarray]:
    """Volume average of a per-element field over each phase present"""
    out = {}
    for phase in np.unique(mesh.elem_phase):
        sel = mesh.elem_phase == phase
        w = mesh.elem_volume[sel]
        out[int(phase)] = (field[sel] * w[:, None]).sum(axis=0) / w.sum()
    return out


def save_mesh(mesh: RveMesh, path: str, extra: Optional[Dict] = None) -> None:
    doc = {
        "format": MESH_FORMAT_VERSION,
        "dim": mesh.dim,
        "n_divisions": mesh.n_divisions,
        "n_layers": mesh.n_layers,
        "v_f_target": mesh.v_f_target,
        "fiber_radius": mesh.fiber_radius,
        "nodes": mesh.nodes.tolist(),
        "elems": mesh.elems.tolist(),
        "elem_phase": mesh.elem_phase.tolist(),
        "elem_partition": mesh.elem_partition.tolist(),
        "partition_phase": list(mesh.partition_phase),
        "mesh_hash": mesh.hash(),
    }
    if extra:
        doc.update(extra)
    write_json(path, doc)


def load_mesh(path: str) -> RveMesh:
    doc = read_json(path)
    try:
        if doc["format"] != MESH_FORMAT_VERSION:
            raise MeshError("Unsupported mesh file format", format=doc["format"], path=path)
        elems = np.array(doc["elems"], dtype=np.int64)
        mesh = RveMesh(
            dim=int(doc["dim"]),
            n_divisions=int(doc["n_divisions"]),
            n_layers=int(doc["n_layers"]),
            nodes=np.array(doc["nodes"], dtype=float),
            elems=elems,
            elem_phase=np.array(doc["elem_phase"], dtype=np.int64),
            elem_partition=np.array(doc["elem_partition"], dtype=np.int64),
            elem_volume=np.full(elems.shape[0], 1.0 / elems.shape[0]),
            fiber_radius=float(doc["fiber_radius"]),
            v_f_target=float(doc["v_f_target"]),
            partition_phase=tuple(int(p) for p in doc["partition_phase"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError("Malformed mesh file", path=path) from exc
    expected_nodes, expected_elems = _grid_nodes(mesh.dim, mesh.n_divisions, mesh.n_layers)
    if mesh.elems.shape != expected_elems.shape or np.any(mesh.elems != expected_elems):
        raise MeshError("Mesh file is not a structured grid", path=path)
    check_partitions(mesh)
    check_periodic_pairing(mesh)
    if doc.get("mesh_hash") not in (None, mesh.hash()):
        raise MeshError("Mesh hash mismatch", path=path, stored=doc["mesh_hash"])
    log.info("Loaded %dD mesh with %d elements from %s", mesh.dim, mesh.n_elems, path)
    return mesh
