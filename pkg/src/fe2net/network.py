"""
Fiber-network RVE domain.

A :class:`FiberNetwork` is an immutable truss network inside an axis-aligned
RVE box centred at the origin. Nodes lying on a box face are boundary nodes;
they receive the affine boundary condition ``u = (F - I) X``.

Solver-facing vectors are stored *packed*: nodes are reordered so that
interior (free) nodes come first and boundary (fixed) nodes form a contiguous
tail block, and each node contributes three consecutive DOFs. The mapping is
held by :class:`DofLayout`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .tensors import check_deformation_gradient

TOL_BOUNDARY = 1e-6
COLLAPSE_RATIO = 1e-8


class NetworkError(ValueError):
    """Invalid network topology or geometry."""


class NetworkFormatError(NetworkError):
    """Malformed network file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


class FiberCollapseError(RuntimeError):
    """A fiber shrank to (near) zero length."""


@dataclass(frozen=True)
class RveBox:
    """Axis-aligned box ``[-h, h]`` per axis, centred at the origin."""

    half_extent: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        h = tuple(float(x) for x in self.half_extent)
        if len(h) != 3 or min(h) <= 0.0:
            raise NetworkError(f"invalid box half extents {self.half_extent}")
        object.__setattr__(self, "half_extent", h)

    @property
    def h(self) -> np.ndarray:
        return np.array(self.half_extent)

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.h))

    def on_face(self, coords: np.ndarray, tol: float = TOL_BOUNDARY) -> np.ndarray:
        d = self.h - np.abs(np.asarray(coords, dtype=float))
        return np.any(d <= tol, axis=-1)


@dataclass(frozen=True)
class FiberLaw:
    """Axial force-stretch law of a fiber, ``N = EA * g(stretch)``.

    ``kind="linear"``: ``g = stretch - 1``.
    ``kind="exponential"``: ``g = (exp(B (stretch - 1)) - 1) / B`` with
    ``B = nonlinearity``; strain stiffening, same tangent as the linear law at
    ``stretch = 1``.
    With ``buckling=True`` fibers carry no compressive force.
    """

    kind: str = "linear"
    nonlinearity: float = 0.0
    buckling: bool = False

    def __post_init__(self):
        if self.kind not in ("linear", "exponential"):
            raise ValueError(f"unknown fiber law {self.kind!r}")
        if self.kind == "exponential" and not self.nonlinearity > 0.0:
            raise ValueError("exponential law needs nonlinearity > 0")

    @property
    def code(self) -> int:
        return 0 if self.kind == "linear" else 1

    def g(self, stretch):
        s = np.asarray(stretch, dtype=float) - 1.0
        if self.kind == "linear":
            out = s
        else:
            out = np.expm1(self.nonlinearity * s) / self.nonlinearity
        if self.buckling:
            out = np.where(s < 0.0, 0.0, out)
        return out

    def dg(self, stretch):
        s = np.asarray(stretch, dtype=float) - 1.0
        if self.kind == "linear":
            out = np.ones_like(s)
        else:
            out = np.exp(self.nonlinearity * s)
        if self.buckling:
            out = np.where(s < 0.0, 0.0, out)
        return out

    def energy(self, stretch):
        """Strain energy per unit ``EA * L0``."""
        s = np.asarray(stretch, dtype=float) - 1.0
        if self.kind == "linear":
            out = 0.5 * s * s
        else:
            B = self.nonlinearity
            out = (np.expm1(B * s) / B - s) / B
        if self.buckling:
            out = np.where(s < 0.0, 0.0, out)
        return out

    def force(self, stretch, EA):
        return np.asarray(EA) * self.g(stretch)


@dataclass(frozen=True)
class DofLayout:
    """Free-then-fixed node ordering of one network.

    ``order[p]`` is the original node id stored at packed node slot ``p``;
    ``rank`` is its inverse. The first ``n_free_nodes`` slots hold interior
    nodes, the rest boundary nodes.
    """

    order: np.ndarray
    rank: np.ndarray
    n_free_nodes: int

    @property
    def n_nodes(self) -> int:
        return len(self.order)

    @property
    def n_free(self) -> int:
        return 3 * self.n_free_nodes

    @property
    def n_dof(self) -> int:
        return 3 * len(self.order)

    def to_packed(self, nodal: np.ndarray) -> np.ndarray:
        """(N, 3) natural-order array -> flat packed vector."""
        return np.asarray(nodal, dtype=float)[self.order].reshape(-1)

    def to_natural(self, packed: np.ndarray) -> np.ndarray:
        """Flat packed vector -> (N, 3) array in original node order."""
        return np.asarray(packed, dtype=float).reshape(-1, 3)[self.rank]


@dataclass(frozen=True, eq=False)
class FiberNetwork:
    """Truss network inside an RVE box. Immutable after construction."""

    node_coords: np.ndarray
    fibers: np.ndarray
    fiber_area: np.ndarray
    fiber_modulus: np.ndarray
    box: RveBox = field(default_factory=RveBox)
    tol_bnd: float = TOL_BOUNDARY

    def __post_init__(self):
        X = np.array(self.node_coords, dtype=float).reshape(-1, 3)
        fib = np.array(self.fibers, dtype=np.int64).reshape(-1, 2)
        M = len(fib)
        area = np.broadcast_to(np.asarray(self.fiber_area, dtype=float), (M,)).copy()
        mod = np.broadcast_to(np.asarray(self.fiber_modulus, dtype=float), (M,)).copy()
        for name, arr in (("node_coords", X), ("fiber_area", area), ("fiber_modulus", mod)):
            if not np.all(np.isfinite(arr)):
                raise NetworkError(f"{name} has non-finite values")
            arr.flags.writeable = False
        if M == 0:
            raise NetworkError("network has no fibers")
        if fib.min() < 0 or fib.max() >= len(X):
            raise NetworkError("fiber node index out of range")
        if np.any(fib[:, 0] == fib[:, 1]):
            raise NetworkError("fiber connects a node to itself")
        key = np.sort(fib, axis=1)
        if len(np.unique(key, axis=0)) != M:
            raise NetworkError("duplicate fibers")
        if np.any(area <= 0.0) or np.any(mod <= 0.0):
            raise NetworkError("fiber area and modulus must be positive")
        if np.any(np.abs(X) > self.box.h + self.tol_bnd):
            raise NetworkError("node outside the RVE box")
        fib.flags.writeable = False
        for name, arr in (("node_coords", X), ("fibers", fib),
                          ("fiber_area", area), ("fiber_modulus", mod)):
            object.__setattr__(self, name, arr)
        if not np.any(self.is_boundary):
            raise NetworkError("no node lies on the RVE boundary")
        if np.any(self.rest_lengths <= 0.0):
            raise NetworkError("zero-length fiber")

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def n_fibers(self) -> int:
        return len(self.fibers)

    @cached_property
    def is_boundary(self) -> np.ndarray:
        return self.box.on_face(self.node_coords, self.tol_bnd)

    @cached_property
    def boundary_node_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_boundary)

    @cached_property
    def rest_lengths(self) -> np.ndarray:
        d = self.node_coords[self.fibers[:, 1]] - self.node_coords[self.fibers[:, 0]]
        return np.linalg.norm(d, axis=1)

    @cached_property
    def EA(self) -> np.ndarray:
        return self.fiber_area * self.fiber_modulus

    @cached_property
    def layout(self) -> DofLayout:
        interior = np.flatnonzero(~self.is_boundary)
        order = np.concatenate([interior, self.boundary_node_ids])
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        return DofLayout(order=order, rank=rank, n_free_nodes=len(interior))

    @cached_property
    def packed_fibers(self) -> np.ndarray:
        """Fiber connectivity in packed node slots."""
        return self.layout.rank[self.fibers]

    @cached_property
    def packed_coords(self) -> np.ndarray:
        return self.node_coords[self.layout.order]


@dataclass
class RveState:
    """Packed solver state of one RVE (free DOFs first, fixed DOFs last).

    ``u``, ``v``, ``a``, ``f_int`` and ``f_damp`` are flat vectors of length
    ``3 N``; ``m`` is the diagonal mass. ``F`` is the deformation gradient whose
    affine boundary values are held in the fixed block.
    """

    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    f_int: np.ndarray
    f_damp: np.ndarray
    m: np.ndarray
    n_free: int
    F: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: float = 0.0
    n: int = 0
    converged: bool = False

    @classmethod
    def zeros(cls, net: FiberNetwork, m: np.ndarray | None = None) -> "RveState":
        n = net.layout.n_dof
        z = np.zeros(n)
        if m is None:
            m = np.ones(n)
        return cls(u=z.copy(), v=z.copy(), a=z.copy(), f_int=z.copy(),
                   f_damp=z.copy(), m=np.asarray(m, dtype=float).copy(),
                   n_free=net.layout.n_free)

    def copy(self) -> "RveState":
        return dataclasses.replace(
            self, u=self.u.copy(), v=self.v.copy(), a=self.a.copy(),
            f_int=self.f_int.copy(), f_damp=self.f_damp.copy(), m=self.m.copy(),
            F=np.array(self.F, dtype=float))

    @property
    def free(self) -> slice:
        return slice(0, self.n_free)

    @property
    def fixed(self) -> slice:
        return slice(self.n_free, None)


# --- operations ----------------------------------------------------------

def affine_boundary_displacement(net: FiberNetwork, F: np.ndarray) -> np.ndarray:
    """Packed fixed-block displacement ``(F - I) X`` of the boundary nodes."""
    check_deformation_gradient(F)
    Xb = net.packed_coords[net.layout.n_free_nodes:]
    return (Xb @ (np.asarray(F, dtype=float) - np.eye(3)).T).reshape(-1)


def apply_affine_bc(net: FiberNetwork, F: np.ndarray, state: RveState) -> RveState:
    """Return a copy of ``state`` with affine boundary displacements for ``F``.

    Interior displacements are left untouched; fixed-block velocities and
    accelerations are zeroed.
    """
    out = state.copy()
    out.u[out.fixed] = affine_boundary_displacement(net, F)
    out.v[out.fixed] = 0.0
    out.a[out.fixed] = 0.0
    out.F = np.array(F, dtype=float)
    out.converged = False
    return out


def fiber_kinematics(net: FiberNetwork, u: np.ndarray):
    """Current fiber axis vectors, lengths and stretches for packed ``u``."""
    x = net.packed_coords + np.asarray(u, dtype=float).reshape(-1, 3)
    pf = net.packed_fibers
    d = x[pf[:, 1]] - x[pf[:, 0]]
    length = np.linalg.norm(d, axis=1)
    return d, length, length / net.rest_lengths


def internal_forces(net: FiberNetwork, law: FiberLaw, u: np.ndarray) -> np.ndarray:
    """Packed internal force vector, including contributions on fixed DOFs."""
    d, length, stretch = fiber_kinematics(net, u)
    if np.any(length <= COLLAPSE_RATIO * net.rest_lengths):
        bad = int(np.argmax(length <= COLLAPSE_RATIO * net.rest_lengths))
        raise FiberCollapseError(f"fiber {bad} collapsed")
    N = law.force(stretch, net.EA)
    fvec = (N / length)[:, None] * d
    pf = net.packed_fibers
    n = net.n_nodes
    f = np.zeros((n, 3))
    for k in range(3):
        f[:, k] = (np.bincount(pf[:, 1], weights=fvec[:, k], minlength=n)
                   - np.bincount(pf[:, 0], weights=fvec[:, k], minlength=n))
    return f.reshape(-1)


def strain_energy(net: FiberNetwork, law: FiberLaw, u: np.ndarray) -> float:
    _, _, stretch = fiber_kinematics(net, u)
    return float(np.sum(net.EA * net.rest_lengths * law.energy(stretch)))


def lumped_mass(net: FiberNetwork, density_scale: float = 1.0) -> np.ndarray:
    """Row-sum lumped mass, packed, three equal entries per node.

    Each fiber deposits half of ``density_scale * L0 * A`` on each end node.
    """
    if not density_scale > 0.0:
        raise ValueError("density_scale must be positive")
    half = 0.5 * density_scale * net.rest_lengths * net.fiber_area
    pf = net.packed_fibers
    mn = (np.bincount(pf[:, 0], weights=half, minlength=net.n_nodes)
          + np.bincount(pf[:, 1], weights=half, minlength=net.n_nodes))
    if np.any(mn <= 0.0):
        bad = net.layout.order[np.flatnonzero(mn <= 0.0)[0]]
        raise NetworkError(f"node {bad} has no incident fiber (singular mass)")
    return np.repeat(mn, 3)


def boundary_moment(net: FiberNetwork, state: RveState) -> np.ndarray:
    """Unsymmetrized ``sum_b r_b (x) x_b`` over boundary nodes."""
    nf = net.layout.n_free_nodes
    x = (net.packed_coords + state.u.reshape(-1, 3))[nf:]
    r = state.f_int.reshape(-1, 3)[nf:]
    return r.T @ x


def homogenized_stress(net: FiberNetwork, state: RveState, F: np.ndarray | None = None,
                       box: RveBox | None = None, *, return_asymmetry: bool = False):
    """Cauchy stress from the boundary reactions of a converged state.

    ``sigma_ij = sum_b r_i x_j / (J V)`` with ``r`` the reaction (internal force
    on fixed DOFs) and ``x`` the deformed boundary position. The symmetric
    part is returned; with ``return_asymmetry`` the relative skew part
    ``|s - s^T| / |s|`` is returned as well.
    """
    if not state.converged:
        raise RuntimeError("homogenized_stress needs a converged state")
    F = state.F if F is None else F
    box = net.box if box is None else box
    J = check_deformation_gradient(F)
    s = boundary_moment(net, state) / (J * box.volume)
    sigma = 0.5 * (s + s.T)
    if not return_asymmetry:
        return sigma
    ns = np.linalg.norm(s)
    asym = float(np.linalg.norm(s - s.T) / ns) if ns > 0 else 0.0
    return sigma, asym


def fiber_sum_stress(net: FiberNetwork, law: FiberLaw, state: RveState,
                     F: np.ndarray | None = None, box: RveBox | None = None) -> np.ndarray:
    """Volume-sum form ``sum_f N l (d (x) d) / (J V)`` of the homogenized stress."""
    F = state.F if F is None else F
    box = net.box if box is None else box
    J = check_deformation_gradient(F)
    d, length, stretch = fiber_kinematics(net, state.u)
    N = law.force(stretch, net.EA)
    w = N / length
    return (d.T * w) @ d / (J * box.volume)


def fiber_directions(net: FiberNetwork, u: np.ndarray | None = None):
    """Unit fiber directions and lengths in the current (or reference) state."""
    if u is None:
        u = np.zeros(net.layout.n_dof)
    d, length, _ = fiber_kinematics(net, u)
    return d / length[:, None], length


def orientation_P2(net: FiberNetwork, state: RveState | None = None,
                   ref_dir=(1.0, 0.0, 0.0)) -> float:
    """Length-weighted second Legendre orientation parameter.

    ``P2 = <3 cos^2(theta) - 1> / 2`` with ``theta`` the angle between each
    current fiber axis and ``ref_dir``; 1 for full alignment, -1/2 for fibers
    perpendicular to ``ref_dir``.
    """
    e = np.asarray(ref_dir, dtype=float)
    e = e / np.linalg.norm(e)
    n, length = fiber_directions(net, None if state is None else state.u)
    return p2_of_directions(n, length, e)


def p2_of_directions(n: np.ndarray, weights=None, ref_dir=(1.0, 0.0, 0.0)) -> float:
    e = np.asarray(ref_dir, dtype=float)
    e = e / np.linalg.norm(e)
    c = np.clip(np.asarray(n) @ e, -1.0, 1.0)
    w = np.ones(len(c)) if weights is None else np.asarray(weights, dtype=float)
    p2 = float(np.sum(w * (1.5 * c * c - 0.5)) / np.sum(w))
    return min(1.0, max(-0.5, p2))


# --- generation ----------------------------------------------------------

@dataclass(frozen=True)
class NetworkSpec:
    """Parameters of the random network generator.

    Nodes are scattered uniformly (a ``boundary_fraction`` share on the box
    faces), fibers are drawn from the Delaunay edges of the node cloud.
    ``alignment`` biases the draw toward edges parallel (> 0) or
    perpendicular (< 0) to ``axis``: edge weight ``exp(alignment * cos^2)``.
    """

    n_nodes: int = 50
    n_fibers: int = 150
    boundary_fraction: float = 0.3
    alignment: float = 0.0
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    min_degree: int = 3
    area: float = 1.0
    modulus: float = 1.0
    half_extent: tuple[float, float, float] = (0.5, 0.5, 0.5)
    interior_margin: float = 0.02


def _random_face_points(rng, n, h):
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    axes = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-h, h, size=(n, 3))
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axes] = sign * h[axes]
    return pts


def _delaunay_edges(points):
    tri = Delaunay(points, qhull_options="QJ Qbb Qc")
    s = tri.simplices
    pairs = np.concatenate([s[:, [i, j]] for i in range(4) for j in range(i + 1, 4)])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def generate_network(spec: NetworkSpec, seed: int) -> FiberNetwork:
    """Deterministic random network with exactly ``n_nodes`` and ``n_fibers``."""
    if spec.n_nodes < 5 or spec.n_fibers <= 0:
        raise NetworkError("need at least 5 nodes and one fiber")
    rng = np.random.default_rng(seed)
    h = np.asarray(spec.half_extent, dtype=float)
    n_b = int(round(spec.boundary_fraction * spec.n_nodes))
    if n_b < 1:
        raise NetworkError("generator spec yields no boundary nodes")
    n_i = spec.n_nodes - n_b
    inner = h * (1.0 - spec.interior_margin)
    pts = np.concatenate([rng.uniform(-inner, inner, size=(n_i, 3)),
                          _random_face_points(rng, n_b, h)])
    boundary = np.zeros(spec.n_nodes, dtype=bool)
    boundary[n_i:] = True

    edges = _delaunay_edges(pts)
    edges = edges[~(boundary[edges[:, 0]] & boundary[edges[:, 1]])]
    d = pts[edges[:, 1]] - pts[edges[:, 0]]
    axis = np.asarray(spec.axis, dtype=float)
    cos2 = (d @ (axis / np.linalg.norm(axis))) ** 2 / np.einsum("ij,ij->i", d, d)
    weight = np.exp(spec.alignment * cos2)
    if len(edges) < spec.n_fibers:
        raise NetworkError(f"only {len(edges)} candidate edges for {spec.n_fibers} fibers")

    chosen = np.zeros(len(edges), dtype=bool)
    degree = np.zeros(spec.n_nodes, dtype=np.int64)
    incident = [[] for _ in range(spec.n_nodes)]
    for e, (a, b) in enumerate(edges):
        incident[a].append(e)
        incident[b].append(e)
    need = np.where(boundary, 1, spec.min_degree)
    for node in rng.permutation(spec.n_nodes):
        while degree[node] < need[node]:
            cand = [e for e in incident[node] if not chosen[e]]
            if not cand:
                break
            w = weight[cand]
            e = cand[rng.choice(len(cand), p=w / w.sum())]
            chosen[e] = True
            degree[edges[e]] += 1
    n_chosen = int(chosen.sum())
    if n_chosen > spec.n_fibers:
        raise NetworkError(
            f"{spec.n_fibers} fibers cannot give every node its minimum degree "
            f"({n_chosen} needed)")
    rest = np.flatnonzero(~chosen)
    extra = spec.n_fibers - n_chosen
    if extra:
        w = weight[rest]
        pick = rng.choice(rest, size=extra, replace=False, p=w / w.sum())
        chosen[pick] = True
    fibers = edges[np.flatnonzero(chosen)]
    used = np.zeros(spec.n_nodes, dtype=bool)
    used[fibers.ravel()] = True
    if not used.all():
        raise NetworkError("generated network has isolated nodes")
    M = len(fibers)
    return FiberNetwork(pts, fibers, np.full(M, spec.area), np.full(M, spec.modulus),
                        box=RveBox(tuple(h)))


# --- file format ---------------------------------------------------------

def write_network(net: FiberNetwork, path) -> None:
    """Write ``N M``, then N lines ``x y z`` and M lines ``i j area modulus``."""
    lines = [f"{net.n_nodes} {net.n_fibers}"]
    lines += ["%.17g %.17g %.17g" % tuple(x) for x in net.node_coords]
    lines += ["%d %d %.17g %.17g" % (i, j, a, m) for (i, j), a, m in
              zip(net.fibers, net.fiber_area, net.fiber_modulus)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_network(path, box: RveBox | None = None) -> FiberNetwork:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkFormatError(f"cannot read network file: {exc}", path=path) from exc
    rows = [(k + 1, ln.split()) for k, ln in enumerate(text.splitlines())]
    rows = [(k, r) for k, r in rows if r and not r[0].startswith("#")]
    if not rows:
        raise NetworkFormatError("empty file", path=path)

    def number(tok, k, kind=float):
        try:
            val = kind(tok)
        except ValueError:
            raise NetworkFormatError(f"cannot parse {tok!r}", k, path) from None
        if kind is float and not np.isfinite(val):
            raise NetworkFormatError(f"non-finite value {tok!r}", k, path)
        return val

    k, head = rows[0]
    if len(head) != 2:
        raise NetworkFormatError("header must be 'N M'", k, path)
    N, M = number(head[0], k, int), number(head[1], k, int)
    if N <= 0 or M <= 0:
        raise NetworkFormatError("N and M must be positive", k, path)
    if len(rows) < 1 + N + M:
        raise NetworkFormatError(f"expected {N} nodes and {M} fibers, file too short",
                                 rows[-1][0], path)
    X = np.empty((N, 3))
    for n, (k, r) in enumerate(rows[1:1 + N]):
        if len(r) != 3:
            raise NetworkFormatError("node line needs 3 coordinates", k, path)
        X[n] = [number(t, k) for t in r]
    fib = np.empty((M, 2), dtype=np.int64)
    area = np.empty(M)
    mod = np.empty(M)
    for n, (k, r) in enumerate(rows[1 + N:1 + N + M]):
        if len(r) != 4:
            raise NetworkFormatError("fiber line needs 'i j area modulus'", k, path)
        i, j = number(r[0], k, int), number(r[1], k, int)
        if not (0 <= i < N and 0 <= j < N):
            raise NetworkFormatError(f"node index out of range 0..{N - 1}", k, path)
        fib[n] = i, j
        area[n], mod[n] = number(r[2], k), number(r[3], k)
    if len(rows) > 1 + N + M:
        raise NetworkFormatError("trailing data after fiber block", rows[1 + N + M][0], path)
    try:
        return FiberNetwork(X, fib, area, mod, box=box or RveBox())
    except NetworkError as exc:
        raise NetworkFormatError(str(exc), path=path) from exc
