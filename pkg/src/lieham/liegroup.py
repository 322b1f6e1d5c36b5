"""Matrix Lie group kernel for SO(2), SO(3), SE(2) and SE(3).

Elements are plain numpy arrays in homogeneous matrix form. Algebra vectors
use the ordering ``[v; w]`` for the special Euclidean groups. Momenta in
vector form pair with twists through the ordinary dot product; in matrix
form they pair through ``tr(a^T b)`` (see :func:`momentum_to_matrix`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUPS = ("SO2", "SO3", "SE2", "SE3")
MATRIX_SIZE = {"SO2": 2, "SO3": 3, "SE2": 3, "SE3": 4}
ALGEBRA_DIM = {"SO2": 1, "SO3": 3, "SE2": 3, "SE3": 6}

TOL_GROUP = 1e-9
TOL_ANGLE = 1e-9
# below this margin from -1 the trace formula loses the rotation axis
_NEAR_PI_TRACE = 1e-6


class GroupError(ValueError):
    """Matrix is not a valid element of the requested group."""


class CutLocusError(ValueError):
    """Logarithm requested at a rotation angle of pi."""


def _check_group(group: str) -> None:
    if group not in GROUPS:
        raise ValueError(f"unknown group {group!r}, expected one of {GROUPS}")


def rotation_part(g: np.ndarray, group: str) -> np.ndarray:
    return g if group in ("SO2", "SO3") else g[:-1, :-1]


def translation_part(g: np.ndarray, group: str) -> np.ndarray:
    if group in ("SO2", "SO3"):
        return np.zeros(0)
    return g[:-1, -1]


def from_parts(R: np.ndarray, p: np.ndarray | None, group: str) -> np.ndarray:
    _check_group(group)
    if group in ("SO2", "SO3"):
        return np.array(R, dtype=float)
    n = MATRIX_SIZE[group]
    g = np.eye(n)
    g[:-1, :-1] = R
    g[:-1, -1] = p
    return g


def validate(g: np.ndarray, group: str, tol: float = TOL_GROUP) -> np.ndarray:
    """Return ``g`` as a float array or raise :class:`GroupError`."""
    _check_group(group)
    g = np.asarray(g, dtype=float)
    n = MATRIX_SIZE[group]
    if g.shape != (n, n):
        raise GroupError(f"{group} element must be {n}x{n}, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise GroupError("non-finite entries")
    R = rotation_part(g, group)
    if np.max(np.abs(R.T @ R - np.eye(R.shape[0]))) > tol:
        raise GroupError("rotation block is not orthogonal")
    if np.linalg.det(R) <= 0:
        raise GroupError("rotation block has non-positive determinant")
    if group in ("SE2", "SE3"):
        last = np.zeros(n)
        last[-1] = 1.0
        if np.max(np.abs(g[-1] - last)) > tol:
            raise GroupError("bottom row must be [0, ..., 0, 1]")
    return g


@dataclass(frozen=True)
class GroupElement:
    group: str
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", validate(self.matrix, self.group))

    @property
    def R(self) -> np.ndarray:
        return rotation_part(self.matrix, self.group)

    @property
    def p(self) -> np.ndarray:
        return translation_part(self.matrix, self.group)

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        if other.group != self.group:
            raise ValueError("cannot compose elements of different groups")
        return GroupElement(self.group, self.matrix @ other.matrix)

    def inverse(self) -> "GroupElement":
        return GroupElement(self.group, inverse(self.matrix, self.group))


# ---------------------------------------------------------------- hat / vee

def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def unskew(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def hat(xi: np.ndarray, group: str) -> np.ndarray:
    _check_group(group)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (ALGEBRA_DIM[group],):
        raise ValueError(f"{group} algebra vector must have {ALGEBRA_DIM[group]} entries")
    if group == "SO2":
        return xi[0] * _J2
    if group == "SO3":
        return skew(xi)
    n = MATRIX_SIZE[group]
    X = np.zeros((n, n))
    if group == "SE2":
        X[:2, :2] = xi[2] * _J2
        X[:2, 2] = xi[:2]
    else:
        X[:3, :3] = skew(xi[3:])
        X[:3, 3] = xi[:3]
    return X


def vee(X: np.ndarray, group: str) -> np.ndarray:
    _check_group(group)
    X = np.asarray(X, dtype=float)
    if group == "SO2":
        return np.array([X[1, 0]])
    if group == "SO3":
        return unskew(X)
    if group == "SE2":
        return np.array([X[0, 2], X[1, 2], X[1, 0]])
    return np.concatenate([X[:3, 3], unskew(X[:3, :3])])


# ---------------------------------------------------------------- exp / log

def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """Return sin(t)/t, (1-cos t)/t^2 and (t - sin t)/t^3 with series near 0."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1 - t2 / 6 + t2 * t2 / 120, 0.5 - t2 / 24 + t2 * t2 / 720, 1 / 6 - t2 / 120 + t2 * t2 / 5040
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1 - c) / theta**2, (theta - s) / theta**3


def so3_exp(w: np.ndarray) -> np.ndarray:
    W = skew(w)
    a, b, _ = _so3_coeffs(float(np.linalg.norm(w)))
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    axis_sin = 0.5 * unskew(R - R.T)
    cos_t = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = float(np.arctan2(np.linalg.norm(axis_sin), cos_t))
    if np.pi - theta < TOL_ANGLE:
        raise CutLocusError("rotation angle is pi; logarithm is not unique")
    if tr > -1.0 + _NEAR_PI_TRACE:
        a, _, _ = _so3_coeffs(theta)
        return axis_sin / a
    # near pi: recover the axis from the symmetric part, n n^T = (S - cI)/(1 - c)
    S = 0.5 * (R + R.T)
    nn = (S - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(nn)))
    n = nn[:, k] / np.sqrt(nn[k, k])
    n /= np.linalg.norm(n)
    if n @ axis_sin < 0:
        n = -n
    return theta * n


def _se3_V(w: np.ndarray) -> np.ndarray:
    W = skew(w)
    _, b, c = _so3_coeffs(float(np.linalg.norm(w)))
    return np.eye(3) + b * W + c * (W @ W)


def _se2_V(w: float) -> np.ndarray:
    if abs(w) < 1e-4:
        a = 1 - w * w / 6 + w**4 / 120
        b = w / 2 - w**3 / 24 + w**5 / 720
    else:
        a = np.sin(w) / w
        b = (1 - np.cos(w)) / w
    return np.array([[a, -b], [b, a]])


def _rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def exp_map(xi: np.ndarray, group: str) -> np.ndarray:
    _check_group(group)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if group == "SO2":
        return _rot2(xi[0])
    if group == "SO3":
        return so3_exp(xi)
    if group == "SE2":
        return from_parts(_rot2(xi[2]), _se2_V(xi[2]) @ xi[:2], "SE2")
    w = xi[3:]
    return from_parts(so3_exp(w), _se3_V(w) @ xi[:3], "SE3")


def _so2_angle(R: np.ndarray) -> float:
    theta = float(np.arctan2(R[1, 0], R[0, 0]))
    if np.pi - abs(theta) < TOL_ANGLE:
        raise CutLocusError("rotation angle is pi; logarithm is not unique")
    return theta


def log_map(g: np.ndarray, group: str) -> np.ndarray:
    """Principal logarithm as an algebra vector.

    Raises :class:`CutLocusError` when the rotation angle is within
    ``TOL_ANGLE`` of pi.
    """
    _check_group(group)
    g = np.asarray(g, dtype=float)
    if group == "SO2":
        return np.array([_so2_angle(g)])
    if group == "SO3":
        return so3_log(g)
    if group == "SE2":
        th = _so2_angle(g[:2, :2])
        return np.concatenate([np.linalg.solve(_se2_V(th), g[:2, 2]), [th]])
    w = so3_log(g[:3, :3])
    return np.concatenate([np.linalg.solve(_se3_V(w), g[:3, 3]), w])


def inverse(g: np.ndarray, group: str) -> np.ndarray:
    _check_group(group)
    if group in ("SO2", "SO3"):
        return np.asarray(g).T.copy()
    R, p = rotation_part(g, group), translation_part(g, group)
    return from_parts(R.T, -R.T @ p, group)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def group_error(q: np.ndarray, q_star: np.ndarray, group: str) -> np.ndarray:
    """Left-invariant error ``(q*)^-1 q``; the identity iff ``q == q*``."""
    return inverse(q_star, group) @ q


# ---------------------------------------------------------------- dual space

def pairing(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.trace(np.asarray(a).T @ np.asarray(b)))


def project_dual(A: np.ndarray, group: str) -> np.ndarray:
    """Orthogonal projection (under the trace pairing) onto the dual algebra."""
    _check_group(group)
    A = np.asarray(A, dtype=float)
    if group in ("SO2", "SO3"):
        return 0.5 * (A - A.T)
    out = np.zeros_like(A)
    blk = A[:-1, :-1]
    out[:-1, :-1] = 0.5 * (blk - blk.T)
    out[:-1, -1] = A[:-1, -1]
    return out


def coad_star_matrix(xi: np.ndarray, p: np.ndarray, group: str) -> np.ndarray:
    """Coadjoint action in matrix form, ``P(xi^T p - p xi^T)``."""
    return project_dual(xi.T @ p - p @ xi.T, group)


def dual_left_translate(q: np.ndarray, eta: np.ndarray, group: str) -> np.ndarray:
    """Pull a covector ``eta`` at ``q`` back to the dual algebra: ``P(q^T eta)``."""
    return project_dual(np.asarray(q).T @ eta, group)


def momentum_to_matrix(p: np.ndarray, group: str) -> np.ndarray:
    """Embed a momentum vector so that ``pairing(P, hat(xi)) == p @ xi``."""
    _check_group(group)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if group == "SO2":
        return 0.5 * p[0] * _J2
    if group == "SO3":
        return 0.5 * skew(p)
    n = MATRIX_SIZE[group]
    P = np.zeros((n, n))
    if group == "SE2":
        P[:2, :2] = 0.5 * p[2] * _J2
        P[:2, 2] = p[:2]
    else:
        P[:3, :3] = 0.5 * skew(p[3:])
        P[:3, 3] = p[:3]
    return P


def matrix_to_momentum(P: np.ndarray, group: str) -> np.ndarray:
    return 2.0 * vee(P, group) if group in ("SO2", "SO3") else _se_momentum(P, group)


def _se_momentum(P: np.ndarray, group: str) -> np.ndarray:
    v = vee(P, group)
    k = P.shape[0] - 1
    return np.concatenate([v[:k], 2.0 * v[k:]])


def coad_star(zeta: np.ndarray, p: np.ndarray, group: str) -> np.ndarray:
    """Coadjoint action in vector form.

    For SE(3) with ``zeta = [v; w]`` and ``p = [p_v; p_w]`` this is
    ``[p_v x w; p_w x w + p_v x v]``.
    """
    _check_group(group)
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if group == "SO2":
        return np.zeros(1)
    if group == "SO3":
        return np.cross(p, zeta)
    if group == "SE3":
        v, w = zeta[:3], zeta[3:]
        pv, pw = p[:3], p[3:]
        return np.concatenate([np.cross(pv, w), np.cross(pw, w) + np.cross(pv, v)])
    v, w = zeta[:2], zeta[2]
    pv = p[:2]
    return np.array([pv[1] * w, -pv[0] * w, pv[0] * v[1] - pv[1] * v[0]])
