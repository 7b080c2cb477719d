"""
Small dense tensor kinematics and Mandel-notation utilities.

Mandel component order is (11, 22, 33, 23, 13, 12); the last three
components of a 6-vector carry a sqrt(2) weight so that the Euclidean
inner product of two packed vectors equals the double contraction of the
underlying symmetric tensors. A 6x6 Mandel matrix represents a 4th-order
tensor with both minor symmetries.

All functions are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

SQRT2 = np.sqrt(2.0)

#: index pairs of the Mandel components, in wire order
MANDEL_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
MANDEL_WEIGHTS = np.array([1.0, 1.0, 1.0, SQRT2, SQRT2, SQRT2])
MANDEL_LABELS = ("11", "22", "33", "23", "13", "12")


class KinematicsError(ValueError):
    """Raised for deformation gradients that are singular or reflecting."""


def check_deformation_gradient(F: np.ndarray) -> float:
    """Validate a 3x3 deformation gradient and return its Jacobian."""
    F = np.asarray(F, dtype=float)
    if F.shape != (3, 3):
        raise KinematicsError(f"deformation gradient must be 3x3, got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise KinematicsError("deformation gradient has non-finite entries")
    J = float(np.linalg.det(F))
    if not J > 0.0:
        raise KinematicsError(f"det F = {J:.6g} is not positive")
    return J


# --- packing -------------------------------------------------------------

def to_mandel(S: np.ndarray) -> np.ndarray:
    """Pack a symmetric 3x3 tensor into a Mandel 6-vector.

    The tensor is symmetrized before packing, so a slightly asymmetric input
    is projected onto its symmetric part.
    """
    S = np.asarray(S, dtype=float)
    return np.array([
        S[0, 0], S[1, 1], S[2, 2],
        SQRT2 * 0.5 * (S[1, 2] + S[2, 1]),
        SQRT2 * 0.5 * (S[0, 2] + S[2, 0]),
        SQRT2 * 0.5 * (S[0, 1] + S[1, 0]),
    ])


def from_mandel(v: np.ndarray) -> np.ndarray:
    """Unpack a Mandel 6-vector into a symmetric 3x3 tensor."""
    v = np.asarray(v, dtype=float)
    s23, s13, s12 = v[3] / SQRT2, v[4] / SQRT2, v[5] / SQRT2
    return np.array([
        [v[0], s12, s13],
        [s12, v[1], s23],
        [s13, s23, v[2]],
    ])


def to_mandel66(A: np.ndarray) -> np.ndarray:
    """Pack a 4th-order tensor with both minor symmetries into 6x6 Mandel form."""
    A = np.asarray(A, dtype=float)
    m = np.empty((6, 6))
    for I, (i, j) in enumerate(MANDEL_PAIRS):
        for J, (k, l) in enumerate(MANDEL_PAIRS):
            m[I, J] = MANDEL_WEIGHTS[I] * MANDEL_WEIGHTS[J] * A[i, j, k, l]
    return m


def from_mandel66(m: np.ndarray) -> np.ndarray:
    """Unpack a 6x6 Mandel matrix into a minor-symmetric 4th-order tensor."""
    m = np.asarray(m, dtype=float)
    A = np.empty((3, 3, 3, 3))
    for I, (i, j) in enumerate(MANDEL_PAIRS):
        for J, (k, l) in enumerate(MANDEL_PAIRS):
            a = m[I, J] / (MANDEL_WEIGHTS[I] * MANDEL_WEIGHTS[J])
            A[i, j, k, l] = A[j, i, k, l] = A[i, j, l, k] = A[j, i, l, k] = a
    return A


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


# --- kinematics ----------------------------------------------------------

def polar_decompose(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right polar decomposition ``F = R @ U``.

    ``U`` is obtained from the eigendecomposition of ``F.T @ F`` and
    ``R = F @ inv(U)``.

    Raises
    ------
    KinematicsError
        If ``det F <= 0``.
    """
    F = np.asarray(F, dtype=float)
    check_deformation_gradient(F)
    lam2, V = np.linalg.eigh(F.T @ F)
    lam = np.sqrt(lam2)
    U = (V * lam) @ V.T
    U = sym(U)
    R = F @ ((V / lam) @ V.T)
    return R, U


def green_lagrange(F: np.ndarray) -> np.ndarray:
    """Green-Lagrange strain ``E = (F^T F - I) / 2``."""
    F = np.asarray(F, dtype=float)
    return sym(0.5 * (F.T @ F - np.eye(3)))


def stretch_from_green_lagrange(E: np.ndarray) -> np.ndarray:
    """Right stretch tensor ``U = sqrt(2E + I)``."""
    C = 2.0 * sym(np.asarray(E, dtype=float)) + np.eye(3)
    lam2, V = np.linalg.eigh(C)
    if lam2.min() <= 0.0:
        raise KinematicsError("2E + I is not positive definite")
    return sym((V * np.sqrt(lam2)) @ V.T)


def mandel_M_of_U(U: np.ndarray) -> np.ndarray:
    """Mandel matrix of ``dE/dU`` for ``E = (U U - I) / 2``.

    Closed-form 6x6 entries; the matrix is symmetric.
    """
    U = np.asarray(U, dtype=float)
    u11, u22, u33 = U[0, 0], U[1, 1], U[2, 2]
    u23, u13, u12 = U[1, 2], U[0, 2], U[0, 1]
    r = SQRT2
    return 0.5 * np.array([
        [2 * u11, 0.0, 0.0, 0.0, r * u13, r * u12],
        [0.0, 2 * u22, 0.0, r * u23, 0.0, r * u12],
        [0.0, 0.0, 2 * u33, r * u23, r * u13, 0.0],
        [0.0, r * u23, r * u23, u22 + u33, u12, u13],
        [r * u13, 0.0, r * u13, u12, u11 + u33, u23],
        [r * u12, r * u12, 0.0, u13, u23, u11 + u22],
    ])


#: probing directions, one per column, in Mandel form
PROBE_MATRIX = 0.5 * np.array([
    [1.0, 0.0, 0.0, 0.0, SQRT2, SQRT2],
    [0.0, 1.0, 0.0, SQRT2, 0.0, SQRT2],
    [0.0, 0.0, 1.0, SQRT2, SQRT2, 0.0],
    [0.0, 0.0, 0.0, 2.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 2.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 2.0],
])


def probing_directions() -> list[np.ndarray]:
    """The six stretch-space probing directions as symmetric 3x3 tensors.

    Each is a column of :data:`PROBE_MATRIX` unpacked from Mandel form. All
    six are positive semi-definite, so ``U + h*T`` stays positive definite
    for any SPD ``U`` and ``h > 0``.
    """
    return [from_mandel(PROBE_MATRIX[:, q]) for q in range(6)]


def _congruence_matrix(F: np.ndarray) -> np.ndarray:
    """Mandel matrix Q with ``to_mandel(F S F^T) == Q @ to_mandel(S)``."""
    Q = np.empty((6, 6))
    for J in range(6):
        e = np.zeros(6)
        e[J] = 1.0
        S = from_mandel(e)
        Q[:, J] = to_mandel(F @ S @ F.T)
    return Q


def push_forward_stiffness(A: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Spatial tangent ``C_mnpq = F_mi F_nj A_ijrs F_pr F_qs / J`` in Mandel form."""
    J = check_deformation_gradient(F)
    Q = _congruence_matrix(np.asarray(F, dtype=float))
    return (Q @ np.asarray(A, dtype=float) @ Q.T) / J


def pull_back_stiffness(C: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Inverse of :func:`push_forward_stiffness`."""
    J = check_deformation_gradient(F)
    Qi = _congruence_matrix(np.linalg.inv(np.asarray(F, dtype=float)))
    return J * (Qi @ np.asarray(C, dtype=float) @ Qi.T)


def push_forward_stress(S: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Cauchy stress from second Piola-Kirchhoff stress, ``F S F^T / J``."""
    J = check_deformation_gradient(F)
    F = np.asarray(F, dtype=float)
    return sym(F @ np.asarray(S, dtype=float) @ F.T / J)


def pull_back_stress(sigma: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Second Piola-Kirchhoff stress from Cauchy stress, ``J F^-1 sigma F^-T``."""
    J = check_deformation_gradient(F)
    Fi = np.linalg.inv(np.asarray(F, dtype=float))
    return sym(J * Fi @ np.asarray(sigma, dtype=float) @ Fi.T)


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians about ``axis`` (Rodrigues formula)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
