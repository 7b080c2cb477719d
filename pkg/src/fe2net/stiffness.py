"""
Homogenized stress and tangent stiffness of a fiber-network RVE.

The network is always solved at the right stretch ``U`` of ``F = R U``; the
second Piola-Kirchhoff stress is rotation invariant, so the rotation is
reapplied afterwards. The material tangent ``A = dPi/dE`` comes from six
forward-difference probes in stretch space,

    P[:, q] = (Pi(U + h T_q) - Pi(U)) / h,

followed by the Mandel-form solve ``(M T)^T A^T = P^T`` with ``M = dE/dU``.
One response therefore costs exactly seven relaxations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import (FiberLaw, FiberNetwork, RveState, fiber_directions,
                      homogenized_stress, p2_of_directions)
from .relax import RelaxConfig, RelaxJob, RelaxReport, relax_many
from .tensors import (PROBE_MATRIX, check_deformation_gradient, from_mandel,
                      mandel_M_of_U, polar_decompose, pull_back_stress,
                      push_forward_stiffness, push_forward_stress, to_mandel)


class MicroscaleConvergenceError(RuntimeError):
    """An RVE relaxation did not converge."""

    def __init__(self, message: str, points=()):
        self.points = list(points)
        super().__init__(message)


class StiffnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class StiffnessConfig:
    """``h`` is the probe size relative to ``|U|_F``."""

    h: float = 1e-5
    reuse_warm: bool = True
    ref_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.h < 1e-2:
            raise ValueError("h must lie in (0, 1e-2)")


@dataclass
class ConstitutiveResult:
    sigma: np.ndarray
    C: np.ndarray
    A: np.ndarray
    pk2: np.ndarray
    state: RveState
    reports: list[RelaxReport] = field(repr=False)
    p2: float = 0.0

    @property
    def n_solves(self) -> int:
        return len(self.reports)

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.reports)


def probe_stretches(U: np.ndarray, h: float) -> list[np.ndarray]:
    """The six perturbed stretch tensors ``U + h T_q``."""
    return [U + h * from_mandel(PROBE_MATRIX[:, q]) for q in range(6)]


def tangent_from_probes(pk2_base: np.ndarray, pk2_probes, U: np.ndarray,
                        h: float) -> np.ndarray:
    """Material tangent ``A`` (Mandel 6x6) from the six probe stresses."""
    P = np.column_stack([(to_mandel(p) - to_mandel(pk2_base)) / h for p in pk2_probes])
    MT = mandel_M_of_U(U) @ PROBE_MATRIX
    if np.linalg.cond(MT) > 1e12:
        raise StiffnessError("degenerate stretch: M T is singular")
    return np.linalg.solve(MT.T, P.T).T


def tangent_by_probing(pk2_of_U: Callable[[np.ndarray], np.ndarray], U: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    """Probe-based tangent for any stress function of the stretch tensor."""
    ha = h * np.linalg.norm(U)
    return tangent_from_probes(pk2_of_U(U), [pk2_of_U(Up) for Up in probe_stretches(U, ha)],
                               U, ha)


def _pk2_from_state(net: FiberNetwork, state: RveState, U: np.ndarray) -> np.ndarray:
    return pull_back_stress(homogenized_stress(net, state, U), U)


def respond_many(items, law: FiberLaw, relax_cfg: RelaxConfig,
                 stiff_cfg: StiffnessConfig, workers: int = 1) -> list[ConstitutiveResult]:
    """Constitutive responses of several RVEs, each ``(net, F, warm_u)``.

    All base solves run as one packed batch, then all probe solves. Each
    result equals the one obtained for its item alone.

    Raises
    ------
    MicroscaleConvergenceError
        Listing every item whose base or probe solve did not converge.
    """
    items = list(items)
    polar = []
    for _, F, _ in items:
        check_deformation_gradient(F)
        polar.append(polar_decompose(F))
    base = relax_many([RelaxJob(net, U, warm) for (net, _, warm), (_, U) in zip(items, polar)],
                      law, relax_cfg, workers=workers)
    bad = [k for k, (_, rep) in enumerate(base) if not rep.converged]
    if bad:
        raise MicroscaleConvergenceError(
            f"base relaxation did not converge at points {bad}", bad)

    probe_jobs = []
    hs = []
    for (net, _, warm), (_, U), (state, _) in zip(items, polar, base):
        ha = stiff_cfg.h * np.linalg.norm(U)
        hs.append(ha)
        start = state.u if stiff_cfg.reuse_warm else warm
        probe_jobs += [RelaxJob(net, Up, start) for Up in probe_stretches(U, ha)]
    probes = relax_many(probe_jobs, law, relax_cfg, workers=workers)
    failed = {k: [q for q in range(6) if not probes[6 * k + q][1].converged]
              for k in range(len(items))}
    failed = {k: qs for k, qs in failed.items() if qs}
    if failed:
        where = "; ".join(f"point {k} directions {qs}" for k, qs in failed.items())
        raise MicroscaleConvergenceError(f"probe relaxation did not converge: {where}",
                                         list(failed))

    out = []
    for k, ((net, F, _), (R, U), (state, rep)) in enumerate(zip(items, polar, base)):
        mine = probes[6 * k:6 * k + 6]
        pk2 = _pk2_from_state(net, state, U)
        pk2_p = [_pk2_from_state(net, s, s.F) for s, _ in mine]
        A = tangent_from_probes(pk2, pk2_p, U, hs[k])
        n, length = fiber_directions(net, state.u)
        p2 = p2_of_directions(n @ R.T, length, stiff_cfg.ref_dir)
        out.append(ConstitutiveResult(
            sigma=push_forward_stress(pk2, F), C=push_forward_stiffness(A, F), A=A,
            pk2=pk2, state=state, reports=[rep] + [r for _, r in mine], p2=p2))
    return out


def constitutive_response(net: FiberNetwork, law: FiberLaw, F: np.ndarray,
                          relax_cfg: RelaxConfig | None = None,
                          stiff_cfg: StiffnessConfig | None = None,
                          warm: RveState | np.ndarray | None = None) -> ConstitutiveResult:
    """Cauchy stress and spatial tangent (Mandel) of one RVE at ``F``."""
    warm_u = warm.u if isinstance(warm, RveState) else warm
    return respond_many([(net, np.asarray(F, dtype=float), warm_u)], law,
                        relax_cfg or RelaxConfig(), stiff_cfg or StiffnessConfig())[0]


def second_pk_stress(net: FiberNetwork, law: FiberLaw, F: np.ndarray,
                     relax_cfg: RelaxConfig | None = None, *, drop_rotation: bool = True,
                     warm=None) -> np.ndarray:
    """Homogenized second Piola-Kirchhoff stress at ``F``.

    By default the network is solved at ``U``; with ``drop_rotation=False``
    it is solved at ``F`` itself and the Cauchy stress pulled back, which is
    the direct check of rotation invariance.
    """
    relax_cfg = relax_cfg or RelaxConfig()
    F = np.asarray(F, dtype=float)
    G = polar_decompose(F)[1] if drop_rotation else F
    warm_u = warm.u if isinstance(warm, RveState) else warm
    state, rep = relax_many([RelaxJob(net, G, warm_u)], law, relax_cfg)[0]
    if not rep.converged:
        raise MicroscaleConvergenceError("relaxation did not converge", [0])
    return pull_back_stress(homogenized_stress(net, state, G), G)


def material_stiffness_A(net: FiberNetwork, law: FiberLaw, F: np.ndarray,
                         relax_cfg: RelaxConfig | None = None,
                         stiff_cfg: StiffnessConfig | None = None, warm=None) -> np.ndarray:
    """Material tangent ``dPi/dE`` in Mandel form."""
    return constitutive_response(net, law, F, relax_cfg, stiff_cfg, warm).A
