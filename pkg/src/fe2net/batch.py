"""
Batched RVE management and the constitutive providers used by the macro solver.

Every macroscale integration point owns one RVE instance drawn from an
:class:`RveLibrary`. Their warm interior displacements live in one contiguous
:class:`PackedStates` buffer addressed through row offsets, so that a view of
one RVE never aliases another. :func:`batch_response` evaluates all points in
one call; results are bitwise identical to evaluating the points one by one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import (FiberLaw, FiberNetwork, NetworkError, orientation_P2,
                      read_network)
from .relax import RelaxConfig, RelaxReport
from .stiffness import (ConstitutiveResult, MicroscaleConvergenceError,
                        StiffnessConfig, respond_many)
from .tensors import (check_deformation_gradient, pull_back_stiffness, to_mandel)

POLICIES = ("random", "region", "explicit")


class LibraryError(ValueError):
    """Invalid RVE library, manifest or assignment."""


# --- packed storage ------------------------------------------------------

@dataclass
class PackedStates:
    """Warm states of many RVEs in contiguous arrays.

    RVE ``i`` occupies ``u[offsets[i]:offsets[i + 1]]`` (packed DOF order,
    free block first); ``f`` holds the matching internal forces of the last
    converged solve.
    """

    offsets: np.ndarray
    u: np.ndarray
    f: np.ndarray
    n_free: np.ndarray

    @classmethod
    def for_networks(cls, nets: list[FiberNetwork]) -> "PackedStates":
        sizes = np.array([n.layout.n_dof for n in nets], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        total = int(offsets[-1])
        return cls(offsets=offsets, u=np.zeros(total), f=np.zeros(total),
                   n_free=np.array([n.layout.n_free for n in nets], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def view(self, i: int, which: str = "u") -> np.ndarray:
        """Writable view of one RVE's slice of ``u`` or ``f``."""
        return getattr(self, which)[self.offsets[i]:self.offsets[i + 1]]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.u.copy(), self.f.copy()

    def restore(self, snap) -> None:
        self.u[:], self.f[:] = snap


# --- library -------------------------------------------------------------

@dataclass
class RveLibrary:
    """Networks to draw RVEs from, plus the rule that assigns them to points.

    ``policy`` is ``"random"`` (seeded uniform draw), ``"region"`` (entry
    looked up from the element region tag in ``region_map``) or
    ``"explicit"`` (``explicit[k]`` is the entry of point ``k``).
    """

    networks: list[FiberNetwork]
    policy: str = "random"
    region_map: dict[int, int] = field(default_factory=dict)
    explicit: list[int] | None = None
    paths: list[str] | None = None

    def __post_init__(self):
        if not self.networks:
            raise LibraryError("RVE library is empty")
        if self.policy not in POLICIES:
            raise LibraryError(f"unknown assignment policy {self.policy!r}")
        bad = [e for e in list(self.region_map.values()) + list(self.explicit or [])
               if not 0 <= e < len(self.networks)]
        if bad:
            raise LibraryError(f"library entry {bad[0]} out of range 0..{len(self) - 1}")

    def __len__(self) -> int:
        return len(self.networks)

    def assign(self, regions, seed: int) -> np.ndarray:
        """Library entry of every point; deterministic in ``(policy, seed)``."""
        regions = np.asarray(regions, dtype=np.int64)
        n = len(regions)
        if self.policy == "random":
            return np.random.default_rng(seed).integers(0, len(self), size=n)
        if self.policy == "region":
            missing = sorted(set(regions.tolist()) - set(self.region_map))
            if missing:
                raise LibraryError(f"no library entry mapped for region {missing[0]}")
            return np.array([self.region_map[r] for r in regions], dtype=np.int64)
        if self.explicit is None or len(self.explicit) != n:
            raise LibraryError(f"explicit assignment needs exactly {n} entries")
        return np.asarray(self.explicit, dtype=np.int64)

    @classmethod
    def from_manifest(cls, path) -> "RveLibrary":
        """Load a manifest; network paths are relative to the manifest.

        One directive per line::

            network <path>
            policy random|region|explicit
            region <tag> <entry>
            point <entry>

        ``point`` lines give the explicit per-point entries in order.
        """
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise LibraryError(f"cannot read manifest {path}: {exc}") from exc
        nets, paths, region_map, points = [], [], {}, []
        policy = "random"
        for k, line in enumerate(lines, start=1):
            tok = line.split("#", 1)[0].split()
            if not tok:
                continue
            key, args = tok[0], tok[1:]
            try:
                if key == "network" and len(args) == 1:
                    p = (path.parent / args[0])
                    try:
                        nets.append(read_network(p))
                    except NetworkError as exc:
                        raise LibraryError(f"library entry {p}: {exc}") from exc
                    paths.append(args[0])
                elif key == "policy" and len(args) == 1:
                    policy = args[0]
                elif key == "region" and len(args) == 2:
                    region_map[int(args[0])] = int(args[1])
                elif key == "point" and len(args) == 1:
                    points.append(int(args[0]))
                else:
                    raise LibraryError(f"{path}:{k}: cannot parse {line.strip()!r}")
            except ValueError as exc:
                if isinstance(exc, LibraryError):
                    raise
                raise LibraryError(f"{path}:{k}: {exc}") from None
        return cls(nets, policy, region_map, points or None, paths)

    def write_manifest(self, path) -> None:
        if self.paths is None:
            raise LibraryError("library has no file paths to write")
        out = [f"policy {self.policy}"]
        out += [f"network {p}" for p in self.paths]
        out += [f"region {r} {e}" for r, e in sorted(self.region_map.items())]
        out += [f"point {e}" for e in self.explicit or []]
        Path(path).write_text("\n".join(out) + "\n")


# --- batch ---------------------------------------------------------------

@dataclass
class RveBatch:
    """RVE instances of all integration points with their warm states."""

    library: RveLibrary
    assignment: np.ndarray
    states: PackedStates

    def __len__(self) -> int:
        return len(self.assignment)

    def network(self, k: int) -> FiberNetwork:
        return self.library.networks[self.assignment[k]]

    def reference_p2(self, ref_dir=(1.0, 0.0, 0.0)) -> np.ndarray:
        return np.array([orientation_P2(self.network(k), None, ref_dir)
                         for k in range(len(self))])


@dataclass
class BatchResult:
    sigma: np.ndarray
    C: np.ndarray
    p2: np.ndarray
    reports: list[list[RelaxReport]]
    results: list[ConstitutiveResult] = field(repr=False, default_factory=list)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([sum(r.iterations for r in reps) for reps in self.reports])


def init_batch(mesh, library: RveLibrary, seed: int) -> RveBatch:
    """One RVE per integration point (one per tet) of ``mesh``.

    ``mesh`` may be a mesh with a ``regions`` array or the region array itself.
    """
    regions = getattr(mesh, "regions", mesh)
    assignment = library.assign(regions, seed)
    nets = [library.networks[e] for e in assignment]
    return RveBatch(library, assignment, PackedStates.for_networks(nets))


def batch_response(batch: RveBatch, F_per_point, law: FiberLaw,
                   relax_cfg: RelaxConfig | None = None,
                   stiff_cfg: StiffnessConfig | None = None, *,
                   workers: int = 1, update: bool = True) -> BatchResult:
    """Cauchy stress and spatial tangent of every point.

    Warm states are read from and, when every point converged and ``update``
    is set, written back to ``batch.states``.

    Raises
    ------
    MicroscaleConvergenceError
        Listing the ids of all non-converged points; states are untouched.
    """
    Fs = [np.asarray(F, dtype=float) for F in F_per_point]
    if len(Fs) != len(batch):
        raise ValueError(f"expected {len(batch)} deformation gradients, got {len(Fs)}")
    items = [(batch.network(k), F, batch.states.view(k)) for k, F in enumerate(Fs)]
    res = respond_many(items, law, relax_cfg or RelaxConfig(),
                       stiff_cfg or StiffnessConfig(), workers=workers)
    if update:
        for k, r in enumerate(res):
            batch.states.view(k)[:] = r.state.u
            batch.states.view(k, "f")[:] = r.state.f_int
    return BatchResult(sigma=np.array([r.sigma for r in res]),
                       C=np.array([r.C for r in res]),
                       p2=np.array([r.p2 for r in res]),
                       reports=[r.reports for r in res], results=res)


# --- analytic substitute -------------------------------------------------

@dataclass(frozen=True)
class NeoHookean:
    """Compressible neo-Hookean parameters: shear modulus and Lame constant."""

    mu: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not (self.mu > 0.0 and self.lam > 0.0):
            raise ValueError("neo-Hookean parameters must be positive")


_I6 = to_mandel(np.eye(3))


def substitute_pk2(F: np.ndarray, params: NeoHookean = NeoHookean()) -> np.ndarray:
    """``S = mu (I - C^-1) + lam ln J C^-1`` with ``C = F^T F``."""
    J = check_deformation_gradient(F)
    Ci = np.linalg.inv(F.T @ F)
    return params.mu * (np.eye(3) - Ci) + params.lam * np.log(J) * Ci


def substitute_response(F: np.ndarray, params: NeoHookean = NeoHookean()):
    """Cauchy stress and spatial tangent (Mandel) of the neo-Hookean law.

    ``sigma = (mu (b - I) + lam ln J I) / J`` and
    ``c = (lam I(x)I + 2 (mu - lam ln J) II) / J``.
    """
    F = np.asarray(F, dtype=float)
    J = check_deformation_gradient(F)
    lnJ = np.log(J)
    b = F @ F.T
    sigma = (params.mu * (b - np.eye(3)) + params.lam * lnJ * np.eye(3)) / J
    C = (params.lam * np.outer(_I6, _I6) + 2.0 * (params.mu - params.lam * lnJ) * np.eye(6)) / J
    return sigma, C


def substitute_A(F: np.ndarray, params: NeoHookean = NeoHookean()) -> np.ndarray:
    """Material tangent ``dS/dE`` of the neo-Hookean law (Mandel)."""
    return pull_back_stiffness(substitute_response(F, params)[1], F)


# --- providers -----------------------------------------------------------

@dataclass
class MaterialResponse:
    sigma: np.ndarray
    C: np.ndarray
    extras: dict = field(default_factory=dict)


class SubstituteMaterial:
    """Closed-form provider; stateless."""

    def __init__(self, params: NeoHookean = NeoHookean()):
        self.params = params

    def evaluate(self, Fs) -> MaterialResponse:
        out = [substitute_response(F, self.params) for F in Fs]
        return MaterialResponse(np.array([s for s, _ in out]), np.array([c for _, c in out]))

    def snapshot(self):
        return None

    def restore(self, snap) -> None:
        pass


class NetworkMaterial:
    """Provider backed by one fiber-network RVE per integration point."""

    def __init__(self, batch: RveBatch, law: FiberLaw,
                 relax_cfg: RelaxConfig | None = None,
                 stiff_cfg: StiffnessConfig | None = None, workers: int = 1):
        self.batch = batch
        self.law = law
        self.relax_cfg = relax_cfg or RelaxConfig()
        self.stiff_cfg = stiff_cfg or StiffnessConfig()
        self.workers = workers
        self.n_evaluations = 0

    def evaluate(self, Fs) -> MaterialResponse:
        res = batch_response(self.batch, Fs, self.law, self.relax_cfg, self.stiff_cfg,
                             workers=self.workers)
        self.n_evaluations += 1
        return MaterialResponse(res.sigma, res.C,
                                {"p2": res.p2, "relax_iterations": res.iterations})

    def snapshot(self):
        return self.batch.states.snapshot()

    def restore(self, snap) -> None:
        self.batch.states.restore(snap)


__all__ = [
    "BatchResult", "LibraryError", "MaterialResponse", "MicroscaleConvergenceError",
    "NeoHookean", "NetworkMaterial", "PackedStates", "RveBatch", "RveLibrary",
    "SubstituteMaterial", "batch_response", "init_batch", "substitute_A",
    "substitute_pk2", "substitute_response",
]
