"""
Updated-Lagrangian finite elements on linear tetrahedra with a Newton driver.

Each tet has a single integration point whose Cauchy stress and spatial
tangent (Mandel form) come from a constitutive provider: any object with

``evaluate(Fs) -> MaterialResponse``, ``snapshot()`` and ``restore(snap)``.

The tangent is ``K = sum_e v_e (B^T C B + G_e (x) I)`` where ``G_e`` holds the
initial-stress products ``grad N_a . sigma . grad N_b``; the residual is
``f_int - f_ext`` with ``f_int = sum_e v_e B^T sigma``. Degrees of freedom are
numbered free first, so Dirichlet rows and columns form a trailing block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .batch import MaterialResponse, NeoHookean, SubstituteMaterial
from .network import FiberCollapseError
from .relax import RelaxDivergenceError
from .stiffness import MicroscaleConvergenceError
from .tensors import SQRT2, KinematicsError, to_mandel

log = logging.getLogger(__name__)

# Kuhn split of a hex: every tet follows one axis permutation from corner 0 to 7
_KUHN = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


class MeshError(ValueError):
    """Invalid mesh or mesh file."""


class BcError(ValueError):
    """Ill-posed boundary conditions."""


class ElementInversionError(RuntimeError):
    def __init__(self, elements):
        self.elements = list(elements)
        super().__init__(f"inverted elements {self.elements[:10]}")


class LinearSolveError(RuntimeError):
    """Indefinite, singular or non-converging linear system."""


class MacroConvergenceError(RuntimeError):
    """Newton failed even at the smallest allowed load step."""

    def __init__(self, message: str, load: float, history=None):
        self.load = load
        self.history = history
        super().__init__(message)


# --- mesh ----------------------------------------------------------------

@dataclass
class MacroMesh:
    """Linear tetrahedral mesh in its reference configuration.

    ``node_sets`` map names to node ids; ``face_sets`` map names to (K, 3)
    triangles used for tractions.
    """

    coords: np.ndarray
    tets: np.ndarray
    regions: np.ndarray | None = None
    node_sets: dict[str, np.ndarray] = field(default_factory=dict)
    face_sets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if self.regions is None:
            self.regions = np.zeros(len(self.tets), dtype=np.int64)
        self.regions = np.asarray(self.regions, dtype=np.int64)
        if len(self.regions) != len(self.tets):
            raise MeshError("one region tag per tet required")
        n = len(self.coords)
        if len(self.tets) == 0:
            raise MeshError("mesh has no elements")
        if self.tets.min() < 0 or self.tets.max() >= n:
            raise MeshError("tet node index out of range")
        self.node_sets = {k: np.asarray(v, dtype=np.int64) for k, v in self.node_sets.items()}
        self.face_sets = {k: np.asarray(v, dtype=np.int64).reshape(-1, 3)
                          for k, v in self.face_sets.items()}
        for name, ids in list(self.node_sets.items()) + list(self.face_sets.items()):
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise MeshError(f"set {name!r} has node index out of range")
        bad = np.flatnonzero(tet_volumes(self.coords, self.tets) <= 0.0)
        if bad.size:
            raise MeshError(f"non-positive reference volume in tets {bad[:10].tolist()}")

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_elements(self) -> int:
        return len(self.tets)

    @property
    def n_dof(self) -> int:
        return 3 * self.n_nodes


def tet_volumes(coords: np.ndarray, tets: np.ndarray) -> np.ndarray:
    x = np.asarray(coords)[tets]
    D = x[:, 1:] - x[:, :1]
    return np.linalg.det(D) / 6.0


def box_mesh(lengths=(1.0, 1.0, 1.0), divisions=(1, 1, 1), origin=(0.0, 0.0, 0.0)) -> MacroMesh:
    """Structured box of hexes, each split into six tets.

    Node sets ``xmin ... zmax`` and matching face sets are defined, plus
    ``origin`` (the node at the box origin) and ``boundary`` (all surface
    nodes).
    """
    L = np.asarray(lengths, dtype=float)
    nd = np.asarray(divisions, dtype=np.int64)
    if np.any(nd < 1) or np.any(L <= 0):
        raise MeshError("box needs positive lengths and divisions")
    axes = [np.linspace(0.0, L[k], nd[k] + 1) + origin[k] for k in range(3)]
    gi, gj, gk = np.meshgrid(*[np.arange(n + 1) for n in nd], indexing="ij")
    idx = np.arange(gi.size).reshape(gi.shape)
    coords = np.column_stack([axes[0][gi.ravel()], axes[1][gj.ravel()], axes[2][gk.ravel()]])

    tets = []
    for i in range(nd[0]):
        for j in range(nd[1]):
            for k in range(nd[2]):
                base = np.array([i, j, k])
                for perm in _KUHN:
                    p = base.copy()
                    vs = [idx[tuple(p)]]
                    for ax in perm:
                        p[ax] += 1
                        vs.append(idx[tuple(p)])
                    tets.append(vs)
    tets = np.array(tets, dtype=np.int64)
    neg = tet_volumes(coords, tets) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]

    node_sets, face_sets = {}, {}
    for ax, name in enumerate("xyz"):
        for side, val in (("min", origin[ax]), ("max", origin[ax] + L[ax])):
            on = np.isclose(coords[:, ax], val)
            node_sets[f"{name}{side}"] = np.flatnonzero(on)
            faces = [f for t in tets for f in (t[[0, 1, 2]], t[[0, 1, 3]], t[[0, 2, 3]], t[[1, 2, 3]])
                     if on[f].all()]
            face_sets[f"{name}{side}"] = np.array(faces, dtype=np.int64).reshape(-1, 3)
    node_sets["origin"] = np.flatnonzero(np.all(np.isclose(coords, origin), axis=1))
    mesh = MacroMesh(coords, tets, None, node_sets, face_sets)
    mesh.node_sets["boundary"] = boundary_node_set(mesh)
    return mesh


def write_mesh(mesh: MacroMesh, path) -> None:
    """Plain-text mesh: ``nodes``, ``tets``, ``nodeset`` and ``faceset`` blocks."""
    out = [f"nodes {mesh.n_nodes}"]
    out += ["%.17g %.17g %.17g" % tuple(x) for x in mesh.coords]
    out.append(f"tets {mesh.n_elements}")
    out += ["%d %d %d %d %d" % (*t, r) for t, r in zip(mesh.tets, mesh.regions)]
    for name, ids in mesh.node_sets.items():
        out.append(f"nodeset {name} {len(ids)}")
        out += [str(i) for i in ids]
    for name, tri in mesh.face_sets.items():
        out.append(f"faceset {name} {len(tri)}")
        out += ["%d %d %d" % tuple(f) for f in tri]
    Path(path).write_text("\n".join(out) + "\n")


def read_mesh(path) -> MacroMesh:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MeshError(f"cannot read mesh {path}: {exc}") from exc
    rows = [(k + 1, ln.split()) for k, ln in enumerate(lines)]
    rows = [(k, r) for k, r in rows if r and not r[0].startswith("#")]
    pos = 0

    def take(count, width, kind, k0):
        nonlocal pos
        block = rows[pos:pos + count]
        if len(block) < count:
            raise MeshError(f"{path}:{k0}: block ends early")
        out = np.empty((count, width), dtype=kind)
        for n, (k, r) in enumerate(block):
            if len(r) != width:
                raise MeshError(f"{path}:{k}: expected {width} values")
            try:
                out[n] = [kind(t) for t in r]
            except ValueError:
                raise MeshError(f"{path}:{k}: cannot parse {' '.join(r)!r}") from None
        pos += count
        return out

    coords, tets, regions, nsets, fsets = None, None, None, {}, {}
    while pos < len(rows):
        k, head = rows[pos]
        pos += 1
        try:
            if head[0] == "nodes" and len(head) == 2:
                coords = take(int(head[1]), 3, float, k)
            elif head[0] == "tets" and len(head) == 2:
                t = take(int(head[1]), 5, int, k)
                tets, regions = t[:, :4], t[:, 4]
            elif head[0] == "nodeset" and len(head) == 3:
                nsets[head[1]] = take(int(head[2]), 1, int, k).ravel()
            elif head[0] == "faceset" and len(head) == 3:
                fsets[head[1]] = take(int(head[2]), 3, int, k)
            else:
                raise MeshError(f"{path}:{k}: unknown section {' '.join(head)!r}")
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"{path}:{k}: {exc}") from None
    if coords is None or tets is None:
        raise MeshError(f"{path}: missing nodes or tets section")
    if not np.all(np.isfinite(coords)):
        raise MeshError(f"{path}: non-finite coordinates")
    return MacroMesh(coords, tets, regions, nsets, fsets)


# --- boundary conditions -------------------------------------------------

@dataclass(frozen=True)
class DirichletBc:
    """Prescribed displacement ``load * values[axis]`` on the nodes of a set.

    A value is either a scalar or one entry per node of the set.
    """

    node_set: str
    values: dict

    def __post_init__(self):
        if not self.values or any(a not in (0, 1, 2) for a in self.values):
            raise BcError(f"Dirichlet condition on {self.node_set!r} needs axes in 0..2")


@dataclass(frozen=True)
class NeumannBc:
    """Dead traction ``load * traction`` (force per reference area) on a face set."""

    face_set: str
    traction: tuple[float, float, float]


@dataclass
class DofMap:
    """Free-first numbering; ``perm[k]`` is the natural DOF stored at slot ``k``."""

    perm: np.ndarray
    slot: np.ndarray
    n_free: int
    fixed_values: np.ndarray

    @property
    def fixed(self) -> np.ndarray:
        return self.perm[self.n_free:]

    @property
    def free(self) -> np.ndarray:
        return self.perm[:self.n_free]


def build_dofmap(mesh: MacroMesh, bcs) -> DofMap:
    """Number DOFs free first and collect the full-load Dirichlet values."""
    prescribed: dict[int, float] = {}
    for bc in bcs:
        if not isinstance(bc, DirichletBc):
            continue
        if bc.node_set not in mesh.node_sets:
            raise BcError(f"unknown node set {bc.node_set!r}")
        ids = mesh.node_sets[bc.node_set]
        for axis, vals in bc.values.items():
            try:
                vals = np.broadcast_to(np.asarray(vals, dtype=float), (len(ids),))
            except ValueError:
                raise BcError(f"values on {bc.node_set!r} axis {axis} do not match "
                              f"the {len(ids)} nodes of the set") from None
            for node, val in zip(ids, vals):
                dof = 3 * int(node) + int(axis)
                if dof in prescribed and prescribed[dof] != float(val):
                    raise BcError(f"conflicting Dirichlet values on node {node} axis {axis}")
                prescribed[dof] = float(val)
    for bc in bcs:
        if isinstance(bc, NeumannBc) and bc.face_set not in mesh.face_sets:
            raise BcError(f"unknown face set {bc.face_set!r}")
    if len(prescribed) < 6:
        raise BcError("fewer than 6 constrained DOFs cannot remove rigid body motion")
    fixed = np.array(sorted(prescribed), dtype=np.int64)
    is_fixed = np.zeros(mesh.n_dof, dtype=bool)
    is_fixed[fixed] = True
    perm = np.concatenate([np.flatnonzero(~is_fixed), fixed])
    slot = np.empty_like(perm)
    slot[perm] = np.arange(len(perm))
    return DofMap(perm, slot, int((~is_fixed).sum()),
                  np.array([prescribed[d] for d in fixed]))


def affine_dirichlet(mesh: MacroMesh, F: np.ndarray, node_set: str) -> DirichletBc:
    """Dirichlet data ``u = (F - I) X`` on every node of ``node_set``."""
    X = mesh.coords[mesh.node_sets[node_set]]
    u = X @ (np.asarray(F, dtype=float) - np.eye(3)).T
    return DirichletBc(node_set, {0: u[:, 0], 1: u[:, 1], 2: u[:, 2]})


def boundary_node_set(mesh: MacroMesh) -> np.ndarray:
    """Nodes on boundary faces (faces used by exactly one tet)."""
    faces = np.sort(mesh.tets[:, [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]].reshape(-1, 3), axis=1)
    uniq, count = np.unique(faces, axis=0, return_counts=True)
    return np.unique(uniq[count == 1])


def external_forces(mesh: MacroMesh, bcs, load: float) -> np.ndarray:
    """Natural-order nodal forces from dead tractions."""
    f = np.zeros((mesh.n_nodes, 3))
    for bc in bcs:
        if not isinstance(bc, NeumannBc):
            continue
        tri = mesh.face_sets[bc.face_set]
        x = mesh.coords[tri]
        area = 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)
        share = np.outer(area / 3.0, np.asarray(bc.traction, dtype=float)) * load
        for c in range(3):
            np.add.at(f, tri[:, c], share)
    return f.reshape(-1)


# --- element kernels -----------------------------------------------------

def shape_gradients(x: np.ndarray):
    """Gradients (E, 4, 3) of the linear shape functions and volumes (E,).

    ``x`` holds the (E, 4, 3) vertex coordinates.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    x = x.reshape(-1, 4, 3)
    D = x[:, 1:] - x[:, :1]
    det = np.linalg.det(D)
    bad = np.flatnonzero(~(det > 0.0))
    if bad.size:
        raise ElementInversionError(bad)
    g = np.empty((len(x), 4, 3))
    g[:, 1:] = np.transpose(np.linalg.inv(D), (0, 2, 1))
    g[:, 0] = -g[:, 1:].sum(axis=1)
    vol = det / 6.0
    return (g[0], vol[0]) if squeeze else (g, vol)


def b_matrix(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Mandel strain-displacement operator (6 x 12) of one tet and its volume.

    ``B @ v`` is the Mandel vector of ``sym(grad v)`` for nodal values
    ``v`` ordered node by node.
    """
    g, vol = shape_gradients(x)
    return _b_from_gradients(g[None])[0], float(vol)


def _b_from_gradients(g: np.ndarray) -> np.ndarray:
    E = len(g)
    B = np.zeros((E, 6, 12))
    r = 1.0 / SQRT2
    for a in range(4):
        dx, dy, dz = g[:, a, 0], g[:, a, 1], g[:, a, 2]
        c = 3 * a
        B[:, 0, c] = dx
        B[:, 1, c + 1] = dy
        B[:, 2, c + 2] = dz
        B[:, 3, c + 1], B[:, 3, c + 2] = r * dz, r * dy
        B[:, 4, c], B[:, 4, c + 2] = r * dz, r * dx
        B[:, 5, c], B[:, 5, c + 1] = r * dy, r * dx
    return B


def deformation_gradients(mesh: MacroMesh, u: np.ndarray) -> np.ndarray:
    """Total ``F = dx/dX`` of every element for natural-order displacements ``u``."""
    g0, _ = shape_gradients(mesh.coords[mesh.tets])
    x = (mesh.coords + np.asarray(u).reshape(-1, 3))[mesh.tets]
    return np.einsum("eai,eaj->eij", x, g0)


@dataclass
class Assembly:
    """Tangent ``K`` and vectors in free-first numbering."""

    K: sp.csr_matrix
    f_int: np.ndarray
    f_ext: np.ndarray
    n_free: int

    @property
    def R(self) -> np.ndarray:
        return self.f_int - self.f_ext

    @property
    def K_ff(self):
        return self.K[:self.n_free, :self.n_free]

    @property
    def K_fd(self):
        return self.K[:self.n_free, self.n_free:]


def assemble(mesh: MacroMesh, u: np.ndarray, dofmap: DofMap, response: MaterialResponse,
             f_ext: np.ndarray | None = None) -> Assembly:
    """Assemble tangent and forces at the current configuration ``X + u``.

    ``f_ext`` is a natural-order vector (zero if omitted).
    """
    sigma = np.asarray(response.sigma, dtype=float)
    C = np.asarray(response.C, dtype=float)
    E = mesh.n_elements
    if sigma.shape != (E, 3, 3) or C.shape != (E, 6, 6):
        raise ValueError("need one (sigma, C) pair per element")
    bad = np.flatnonzero(~(np.isfinite(sigma).all(axis=(1, 2)) & np.isfinite(C).all(axis=(1, 2))))
    if bad.size:
        raise ValueError(f"non-finite material response in element {int(bad[0])}")
    x = (mesh.coords + np.asarray(u).reshape(-1, 3))[mesh.tets]
    g, vol = shape_gradients(x)
    B = _b_from_gradients(g)
    s6 = np.array([to_mandel(s) for s in sigma])
    fe = vol[:, None] * np.einsum("eij,ei->ej", B, s6)
    Km = vol[:, None, None] * np.einsum("eia,eij,ejb->eab", B, C, B)
    G = vol[:, None, None] * np.einsum("eai,eij,ebj->eab", g, sigma, g)
    Ke = Km + np.einsum("eab,ij->eaibj", G, np.eye(3)).reshape(E, 12, 12)

    dofs = dofmap.slot[(3 * mesh.tets[:, :, None] + np.arange(3)).reshape(E, 12)]
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = mesh.n_dof
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    f = np.zeros(n)
    np.add.at(f, dofs.ravel(), fe.ravel())
    fx = np.zeros(n) if f_ext is None else np.asarray(f_ext, dtype=float)[dofmap.perm]
    return Assembly(K, f, fx, dofmap.n_free)


# --- linear solver -------------------------------------------------------

def linear_solve(K, r: np.ndarray, *, tol: float = 1e-10, direct_max: int = 500,
                 max_iter: int | None = None) -> np.ndarray:
    """Solve ``K x = r`` for symmetric positive definite ``K``.

    Dense Cholesky below ``direct_max`` unknowns, Jacobi-preconditioned
    conjugate gradients above.

    Raises
    ------
    LinearSolveError
        On a non-positive pivot or curvature, or if CG does not reach ``tol``.
    """
    r = np.asarray(r, dtype=float)
    n = len(r)
    if n == 0:
        return np.zeros(0)
    if n < direct_max:
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
        try:
            c, low = scipy.linalg.cho_factor(Kd, lower=True)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveError(f"matrix is not positive definite: {exc}") from None
        piv = np.abs(np.diag(c)) ** 2
        if piv.min() <= 1e-12 * np.abs(np.diag(Kd)).max():
            raise LinearSolveError("matrix is singular to working precision")
        return scipy.linalg.cho_solve((c, low), r)
    return _pcg(sp.csr_matrix(K), r, tol, max_iter or 10 * n)


def _pcg(K, b, tol, max_iter):
    d = K.diagonal()
    if np.any(d <= 0.0):
        raise LinearSolveError("non-positive diagonal entry; matrix is indefinite")
    x = np.zeros_like(b)
    r = b.copy()
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return x
    z = r / d
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        q = K @ p
        curv = p @ q
        if not curv > 0.0:
            raise LinearSolveError("non-positive curvature; matrix is indefinite")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * q
        if np.linalg.norm(r) <= tol * nb:
            return x
        z = r / d
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise LinearSolveError(f"CG did not converge in {max_iter} iterations")


def direct_solve(K, r: np.ndarray) -> np.ndarray:
    """Sparse LU solve of ``K x = r``; no definiteness required.

    Raises
    ------
    LinearSolveError
        If ``K`` is singular.
    """
    r = np.asarray(r, dtype=float)
    if len(r) == 0:
        return np.zeros(0)
    try:
        lu = spla.splu(sp.csc_matrix(K))
    except RuntimeError as exc:
        raise LinearSolveError(f"direct solve failed: {exc}") from None
    x = lu.solve(r)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("direct solve produced non-finite values")
    return x


def _solve(K, r, cfg) -> np.ndarray:
    # indefinite tangents (e.g. lateral instability of a soft network) fall
    # back to LU instead of failing the increment outright
    try:
        return linear_solve(K, r, tol=cfg.linear_tol, direct_max=cfg.direct_max)
    except LinearSolveError as exc:
        log.debug("%s; falling back to LU", exc)
        return direct_solve(K, r)


# --- Newton driver -------------------------------------------------------

@dataclass(frozen=True)
class NewtonConfig:
    """``tol`` is relative to ``max(|f_int|, |f_ext|)``; ``atol`` is absolute."""

    tol: float = 1e-8
    atol: float = 1e-12
    max_iter: int = 15
    n_steps: int = 1
    min_step: float = 1.0 / 256
    linear_tol: float = 1e-10
    direct_max: int = 500

    def __post_init__(self):
        if not (self.tol > 0 and self.atol > 0 and self.linear_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.n_steps < 1:
            raise ValueError("max_iter and n_steps must be >= 1")
        if not 0.0 < self.min_step <= 1.0:
            raise ValueError("min_step must be in (0, 1]")


@dataclass
class Increment:
    load: float
    u: np.ndarray
    F: np.ndarray
    sigma: np.ndarray
    reactions: dict
    iterations: int
    residuals: list
    extras: dict = field(default_factory=dict)


@dataclass
class MacroSolution:
    mesh: MacroMesh
    increments: list[Increment]
    bisections: int = 0

    @property
    def u(self) -> np.ndarray:
        return self.increments[-1].u


class _StepFailed(Exception):
    pass


def newton_solve(mesh: MacroMesh, bcs, material, cfg: NewtonConfig | None = None, *,
                 initial=None, callback=None) -> MacroSolution:
    """Incremental Newton solution of the quasi-static problem.

    The load factor goes from 0 to 1 in ``cfg.n_steps`` increments; a failed
    increment is retried with half the step down to ``cfg.min_step``. The
    first predictor uses ``initial`` (a provider, by default a neo-Hookean
    substitute) evaluated at ``F = I``.
    ``callback(increment)`` is called after each converged increment.

    Raises
    ------
    MacroConvergenceError
        If the step cannot be reduced further.
    """
    cfg = cfg or NewtonConfig()
    dm = build_dofmap(mesh, bcs)
    u = np.zeros(mesh.n_dof)
    initial = initial or SubstituteMaterial(NeoHookean())
    eye = np.broadcast_to(np.eye(3), (mesh.n_elements, 3, 3))
    asm = assemble(mesh, u, dm, initial.evaluate(eye), external_forces(mesh, bcs, 0.0))
    asm.f_int[:] = 0.0
    sol = MacroSolution(mesh, [])

    load, step = 0.0, 1.0 / cfg.n_steps
    while load < 1.0 - 1e-14:
        target = min(1.0, load + step)
        snap = material.snapshot()
        try:
            u_new, asm_new, inc = _increment(mesh, bcs, dm, material, cfg, u, asm, target)
        except _StepFailed as exc:
            material.restore(snap)
            step *= 0.5
            sol.bisections += 1
            log.info("increment to load %.6g failed (%s); step -> %.3g", target, exc, step)
            if step < cfg.min_step * (1.0 - 1e-12):
                raise MacroConvergenceError(
                    f"no convergence at load {target:.6g} with minimum step: {exc}",
                    target, sol) from None
            continue
        u, asm, load = u_new, asm_new, target
        sol.increments.append(inc)
        if callback is not None:
            callback(inc)
        if inc.iterations <= 3 and step < 1.0 / cfg.n_steps:
            step = min(2.0 * step, 1.0 / cfg.n_steps)
    if not sol.increments:
        raise MacroConvergenceError("no increments", 0.0, sol)
    return sol


def _increment(mesh, bcs, dm, material, cfg, u_conv, asm_conv, load):
    nf = dm.n_free
    u = u_conv.copy()
    f_ext = external_forces(mesh, bcs, load)
    du_d = load * dm.fixed_values - u_conv[dm.fixed]
    u[dm.fixed] = load * dm.fixed_values
    rhs = f_ext[dm.free] - asm_conv.f_int[:nf] - asm_conv.K_fd @ du_d
    try:
        u[dm.free] += _solve(asm_conv.K_ff, rhs, cfg)
    except LinearSolveError as exc:
        raise _StepFailed(f"predictor: {exc}") from None

    residuals = []
    for it in range(1, cfg.max_iter + 1):
        try:
            F = deformation_gradients(mesh, u)
            resp = material.evaluate(F)
            asm = assemble(mesh, u, dm, resp, f_ext)
        except (ElementInversionError, KinematicsError, MicroscaleConvergenceError,
                FiberCollapseError, RelaxDivergenceError, ValueError) as exc:
            raise _StepFailed(f"iteration {it}: {exc}") from None
        R = asm.R[:nf]
        ref = max(np.linalg.norm(asm.f_int), np.linalg.norm(asm.f_ext))
        rn = float(np.linalg.norm(R))
        residuals.append((rn, ref))
        log.debug("load %.6g iteration %d residual %.3e (ref %.3e)", load, it, rn, ref)
        if not np.isfinite(rn):
            raise _StepFailed(f"iteration {it}: non-finite residual")
        if rn <= max(cfg.tol * ref, cfg.atol):
            reactions = _reactions(mesh, dm, asm)
            inc = Increment(load=load, u=u.copy(), F=F, sigma=np.array(resp.sigma),
                            reactions=reactions, iterations=it, residuals=residuals,
                            extras=dict(resp.extras))
            return u, asm, inc
        try:
            u[dm.free] -= _solve(asm.K_ff, R, cfg)
        except LinearSolveError as exc:
            raise _StepFailed(f"iteration {it}: {exc}") from None
    raise _StepFailed(f"no convergence in {cfg.max_iter} iterations "
                      f"(residual {residuals[-1][0]:.3e})")


def _reactions(mesh: MacroMesh, dm: DofMap, asm: Assembly) -> dict:
    """Net internal force on every node set (natural-order sum)."""
    f = np.empty(mesh.n_dof)
    f[dm.perm] = asm.f_int - asm.f_ext
    f = f.reshape(-1, 3)
    return {name: f[ids].sum(axis=0) for name, ids in mesh.node_sets.items()}


def convergence_order(residuals) -> float:
    """``log r_k / log r_{k-1}`` of the last two relative residuals below 1."""
    rel = [r / ref for r, ref in residuals if ref > 0 and 0 < r / ref < 1]
    if len(rel) < 2:
        return float("nan")
    return float(np.log(rel[-1]) / np.log(rel[-2]))
