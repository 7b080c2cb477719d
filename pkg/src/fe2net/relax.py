"""
Damped explicit dynamic relaxation of fiber-network RVEs.

The static equilibrium of an RVE under affine boundary conditions is found by
integrating a fictitious, mass-proportionally damped dynamical system with the
two-step central difference scheme until the free-DOF force residual drops
below ``tol * max(|reaction|, floor)``, never below double-precision
round-off of the fiber forces.

:func:`implicit_solve` is a Newton direct-stiffness solver kept as an
independent verification oracle; it fails on floppy networks, which is the
reason relaxation is the production path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .network import (FiberCollapseError, FiberLaw, FiberNetwork, RveState,
                      affine_boundary_displacement, fiber_kinematics,
                      internal_forces, lumped_mass)
from .tensors import check_deformation_gradient

FORCE_FLOOR = 1e-12
#: residuals below this multiple of EA are round-off, never demanded
ROUNDOFF_FLOOR = 1e-13


class RelaxDivergenceError(RuntimeError):
    """Non-finite values appeared during relaxation."""

    def __init__(self, iteration: int, index: int | None = None):
        self.iteration = iteration
        self.index = index
        where = "" if index is None else f" (RVE {index})"
        super().__init__(f"relaxation diverged at iteration {iteration}{where}")


class OracleInapplicableError(RuntimeError):
    """The implicit oracle met a singular tangent (floppy network)."""


@dataclass(frozen=True)
class RelaxConfig:
    """Dynamic relaxation settings.

    ``damping`` is the mass-proportional viscous coefficient ``c`` (1/time).
    Masses are fictitious: lumped fiber masses are rescaled so that the
    heaviest node weighs ``density_scale``. The residual tolerance is relative,
    ``tol * max(|reaction|, FORCE_FLOOR * max EA)``, bounded below by
    ``ROUNDOFF_FLOOR * max EA``.
    """

    damping: float = 2.0
    tol: float = 1e-10
    max_iter: int = 200_000
    dt_safety: float = 0.9
    density_scale: float = 1.0
    energy_check: bool = False

    def __post_init__(self):
        if self.damping < 0.0:
            raise ValueError("damping must be >= 0")
        if not self.tol > 0.0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.dt_safety <= 1.0:
            raise ValueError("dt_safety must be in (0, 1]")
        if not self.density_scale > 0.0:
            raise ValueError("density_scale must be > 0")


@dataclass
class RelaxReport:
    iterations: int
    residual: float
    tolerance: float
    kinetic_fraction: float
    converged: bool
    dt: float = 0.0
    energy_error: float = 0.0
    energy_trace: np.ndarray | None = field(default=None, repr=False)


def fictitious_mass(net: FiberNetwork, density_scale: float = 1.0) -> np.ndarray:
    """Packed lumped mass scaled so the heaviest node has ``density_scale``."""
    m = lumped_mass(net, 1.0)
    return m * (density_scale / m.max())


def stable_dt(net: FiberNetwork, law: FiberLaw, mass: np.ndarray, s: float = 1.0,
              stretch: np.ndarray | None = None) -> float:
    """CFL-limited time step ``s * min_f L0 / c_wave``.

    ``c_wave = sqrt(k L0 / m_red)`` with ``k = EA * g'(stretch)`` (stretch 1
    unless given per fiber) and ``m_red`` the reduced mass of the fiber's end
    nodes.
    """
    L0 = net.rest_lengths
    if np.any(L0 <= 0.0):
        raise ValueError("zero-length fiber")
    mn = np.asarray(mass, dtype=float).reshape(-1, 3)[:, 0]
    if np.any(mn <= 0.0):
        raise ValueError("mass must be positive")
    pf = net.packed_fibers
    mi, mj = mn[pf[:, 0]], mn[pf[:, 1]]
    m_red = mi * mj / (mi + mj)
    lam = np.ones(net.n_fibers) if stretch is None else np.maximum(np.asarray(stretch), 1.0)
    k = net.EA * law.dg(lam)
    c_wave = np.sqrt(k * L0 / m_red)
    return float(s * np.min(L0 / c_wave))


@dataclass
class RelaxJob:
    """One relaxation problem: network, target F and optional warm interior."""

    net: FiberNetwork
    F: np.ndarray
    warm_u: np.ndarray | None = None


def _estimate_stretch(net: FiberNetwork, F: np.ndarray, u: np.ndarray) -> np.ndarray:
    d0 = net.node_coords[net.fibers[:, 1]] - net.node_coords[net.fibers[:, 0]]
    affine = np.linalg.norm(d0 @ np.asarray(F).T, axis=1) / net.rest_lengths
    _, _, current = fiber_kinematics(net, u)
    return np.maximum(affine, current)


def _initial_u(job: RelaxJob) -> np.ndarray:
    net = job.net
    nf = net.layout.n_free
    u = np.zeros(net.layout.n_dof)
    if job.warm_u is not None:
        w = np.asarray(job.warm_u, dtype=float)
        if w.shape != u.shape:
            raise ValueError(f"warm state has {w.size} DOFs, network has {u.size}")
        u[:nf] = w[:nf]
    u[nf:] = affine_boundary_displacement(net, job.F)
    return u


def relax_many(jobs: list[RelaxJob], law: FiberLaw, cfg: RelaxConfig, *,
               workers: int = 1,
               raise_on_divergence: bool = True) -> list[tuple[RveState, RelaxReport]]:
    """Relax a list of RVEs packed into contiguous arrays.

    With ``workers > 1`` the RVEs are pulled one at a time from a shared
    queue by a thread pool. Each RVE is still advanced by a single thread, so
    the result for every job is bitwise identical to relaxing it alone.
    """
    n = len(jobs)
    if n == 0:
        return []
    nodes = np.array([j.net.n_nodes for j in jobs])
    fibs = np.array([j.net.n_fibers for j in jobs])
    node_off = np.concatenate([[0], np.cumsum(nodes)]).astype(np.int64)
    fib_off = np.concatenate([[0], np.cumsum(fibs)]).astype(np.int64)
    X = np.concatenate([j.net.packed_coords for j in jobs])
    fib = np.concatenate([j.net.packed_fibers for j in jobs]).astype(np.int64)
    EA = np.concatenate([j.net.EA for j in jobs])
    L0 = np.concatenate([j.net.rest_lengths for j in jobs])
    nfree = np.array([j.net.layout.n_free_nodes for j in jobs], dtype=np.int64)

    masses, us, dts = [], [], np.empty(n)
    for r, job in enumerate(jobs):
        check_deformation_gradient(job.F)
        m = fictitious_mass(job.net, cfg.density_scale)
        u0 = _initial_u(job)
        dts[r] = stable_dt(job.net, law, m, cfg.dt_safety,
                           _estimate_stretch(job.net, job.F, u0))
        masses.append(m)
        us.append(u0)
    m_all = np.concatenate([m.reshape(-1, 3)[:, 0] for m in masses])
    u = np.concatenate(us).reshape(-1, 3)
    v = np.zeros_like(u)
    a = np.zeros_like(u)
    f = np.zeros_like(u)
    fd = np.zeros_like(u)
    ones = np.ones(n)
    kind = np.full(n, law.code, dtype=np.int64)
    B = np.full(n, law.nonlinearity if law.kind == "exponential" else 1.0)
    buck = np.full(n, law.buckling)
    c = cfg.damping * ones
    tol = cfg.tol * ones
    floor = np.array([FORCE_FLOOR * j.net.EA.max() for j in jobs])
    noise = np.array([ROUNDOFF_FLOOR * j.net.EA.max() for j in jobs])
    n_max = np.full(n, cfg.max_iter, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    resid = np.zeros(n)
    eps = np.zeros(n)
    kin = np.zeros(n)
    status = np.zeros(n, dtype=np.int64)
    eerr = np.zeros(n)
    trace = np.full((n, cfg.max_iter + 1 if cfg.energy_check else 0), np.nan)

    args = (X, u, v, a, f, fd, m_all, node_off, nfree, fib, fib_off, EA, L0,
            kind, B, buck, dts, c, tol, floor, noise, n_max, cfg.energy_check,
            iters, resid, eps, kin, status, eerr, trace)
    if workers <= 1 or n == 1:
        _kernels.relax_range(0, n, *args)
    else:
        with ThreadPoolExecutor(max_workers=min(workers, n)) as pool:
            list(pool.map(lambda r: _kernels.relax_range(r, r + 1, *args), range(n)))

    out = []
    for r, job in enumerate(jobs):
        if status[r] == _kernels.NON_FINITE and raise_on_divergence:
            raise RelaxDivergenceError(int(iters[r]), r if n > 1 else None)
        if status[r] == _kernels.COLLAPSE:
            raise FiberCollapseError(
                f"fiber collapse at relaxation iteration {int(iters[r])}")
        sl = slice(node_off[r], node_off[r + 1])
        converged = status[r] == _kernels.CONVERGED
        state = RveState(
            u=u[sl].reshape(-1).copy(), v=v[sl].reshape(-1).copy(),
            a=a[sl].reshape(-1).copy(), f_int=f[sl].reshape(-1).copy(),
            f_damp=fd[sl].reshape(-1).copy(), m=masses[r],
            n_free=job.net.layout.n_free, F=np.array(job.F, dtype=float),
            t=float(iters[r] * dts[r]), n=int(iters[r]), converged=bool(converged))
        tr = None
        if cfg.energy_check:
            tr = trace[r, :int(iters[r]) + 1].copy()
        report = RelaxReport(iterations=int(iters[r]), residual=float(resid[r]),
                             tolerance=float(eps[r]), kinetic_fraction=float(kin[r]),
                             converged=bool(converged), dt=float(dts[r]),
                             energy_error=float(eerr[r]), energy_trace=tr)
        out.append((state, report))
    return out


def relax_solve(net: FiberNetwork, law: FiberLaw, F: np.ndarray,
                cfg: RelaxConfig | None = None,
                warm: RveState | np.ndarray | None = None) -> tuple[RveState, RelaxReport]:
    """Relax one RVE to static equilibrium under the affine boundary condition of ``F``.

    Interior displacements start from ``warm`` (zero if omitted), velocities
    from zero. Non-convergence within ``max_iter`` is reported, not raised.

    Raises
    ------
    RelaxDivergenceError
        If the state becomes non-finite.
    """
    cfg = cfg or RelaxConfig()
    warm_u = warm.u if isinstance(warm, RveState) else warm
    return relax_many([RelaxJob(net, np.asarray(F, dtype=float), warm_u)], law, cfg)[0]


def free_residual(net: FiberNetwork, law: FiberLaw, state: RveState) -> float:
    """Independent recomputation of the free-DOF force residual of a state."""
    f = internal_forces(net, law, state.u)
    return float(np.linalg.norm(f[:state.n_free]))


# --- implicit oracle -----------------------------------------------------

def tangent_stiffness(net: FiberNetwork, law: FiberLaw, u: np.ndarray) -> np.ndarray:
    """Dense packed truss tangent (material + geometric)."""
    d, length, stretch = fiber_kinematics(net, u)
    n = d / length[:, None]
    N = law.force(stretch, net.EA)
    kax = net.EA * law.dg(stretch) / net.rest_lengths
    kg = N / length
    ndof = net.layout.n_dof
    K = np.zeros((ndof, ndof))
    eye = np.eye(3)
    for (i, j), nn, ka, kgeo in zip(net.packed_fibers, n, kax, kg):
        k = ka * np.outer(nn, nn) + kgeo * (eye - np.outer(nn, nn))
        si, sj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
        K[si, si] += k
        K[sj, sj] += k
        K[si, sj] -= k
        K[sj, si] -= k
    return K


def implicit_solve(net: FiberNetwork, law: FiberLaw, F: np.ndarray, *, tol: float = 1e-12,
                   max_iter: int = 50, load_steps: int = 1,
                   rcond: float = 1e-10) -> RveState:
    """Newton direct-stiffness solution of the static truss problem.

    Verification oracle only. The boundary displacement is applied in
    ``load_steps`` equal increments.

    Raises
    ------
    OracleInapplicableError
        If the free-free tangent is singular or Newton fails to converge.
    """
    check_deformation_gradient(F)
    F = np.asarray(F, dtype=float)
    nf = net.layout.n_free
    u = np.zeros(net.layout.n_dof)
    ub = affine_boundary_displacement(net, F)
    floor = FORCE_FLOOR * net.EA.max()
    total_iter = 0
    for step in range(1, load_steps + 1):
        u[nf:] = ub * (step / load_steps)
        for it in range(max_iter + 1):
            f = internal_forces(net, law, u)
            R = np.linalg.norm(f[:nf])
            if R <= max(tol * max(np.linalg.norm(f[nf:]), floor), ROUNDOFF_FLOOR * net.EA.max()):
                break
            if it == max_iter:
                raise OracleInapplicableError(
                    f"Newton did not converge in {max_iter} iterations")
            K = tangent_stiffness(net, law, u)[:nf, :nf]
            w = np.linalg.eigvalsh(0.5 * (K + K.T))
            if w.min() <= rcond * max(abs(w).max(), floor):
                raise OracleInapplicableError(
                    f"singular tangent (min eigenvalue {w.min():.3e})")
            u[:nf] -= np.linalg.solve(K, f[:nf])
            total_iter += 1
    f = internal_forces(net, law, u)
    z = np.zeros_like(u)
    return RveState(u=u, v=z.copy(), a=z.copy(), f_int=f, f_damp=z.copy(),
                    m=np.ones_like(u), n_free=nf, F=F.copy(), n=total_iter,
                    converged=True)
