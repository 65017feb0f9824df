"""Kronecker-structured linear algebra for factored precision matrices.

This module provides the operations shared by every learner in the package:
materializing and rearranging Kronecker products, three nearest-Kronecker
approximations to a sum of two Kronecker products (scaled-additive, minimal
Frobenius error, minimal KL divergence), Gaussian KL metrics between
precision matrices, and regularized inverses of factored precisions.

Conventions:
  - vec() is column-wise vectorization, and (X (x) Y)[m*i+k, m*j+l] = X[i,j] Y[k,l]
    for X of size n x n and Y of size m x m.
  - All factors are symmetric PSD; every returned factor is re-symmetrized as
    (M + M^T)/2 to stop floating-point drift from breaking PSD checks downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

Array = np.ndarray

# Eigenvalues below EIG_FLOOR * lambda_max are clamped before inverting;
# near-singular activity covariances occur routinely with dead ReLU units.
EIG_FLOOR = 1e-12

# Hard cap on the side length of any materialized Kronecker product.
MAX_MATERIALIZED_DIM = 4096


def symmetrize(m: Array) -> Array:
    """(M + M^T)/2."""
    return 0.5 * (m + m.T)


def vec(m: Array) -> Array:
    """Column-wise vectorization."""
    return np.asarray(m).reshape(-1, order="F")


@dataclass(frozen=True)
class KronFactorPair:
    """A PSD matrix represented as left (x) right by its two symmetric factors.

    `left` is the n x n input-side factor and `right` the m x m output-side
    factor; the represented matrix acts on column-vectorized (m x n) blocks.
    """

    left: Array
    right: Array

    def __post_init__(self):
        for name in ("left", "right"):
            f = getattr(self, name)
            if f.ndim != 2 or f.shape[0] != f.shape[1]:
                raise ValueError(f"{name} factor must be square, got {f.shape}")

    @property
    def n(self) -> int:
        return self.left.shape[0]

    @property
    def m(self) -> int:
        return self.right.shape[0]

    @property
    def dim(self) -> int:
        return self.n * self.m

    def scale(self, c: float) -> "KronFactorPair":
        """The pair representing c * (left (x) right), c >= 0."""
        if c < 0:
            raise ValueError("scale factor must be nonnegative")
        return KronFactorPair(self.left * c, self.right)


def validate_factor_pair(pair: KronFactorPair, rtol: float = 1e-10) -> None:
    """Check both factors are symmetric (relative tol) and PSD (min eig >= -1e-8 max)."""
    for name, f in (("left", pair.left), ("right", pair.right)):
        scale = max(np.abs(f).max(), 1.0)
        if np.abs(f - f.T).max() > rtol * scale:
            raise ValueError(f"{name} factor is not symmetric to within {rtol} relative")
        w = np.linalg.eigvalsh(symmetrize(f))
        if w[0] < -1e-8 * max(w[-1], 0.0):
            raise ValueError(f"{name} factor is not PSD (min eig {w[0]:.3e})")


def materialize_kron(pair: KronFactorPair) -> Array:
    """Dense (nm) x (nm) matrix for left (x) right.

    Guarded by MAX_MATERIALIZED_DIM to catch accidental materialization of
    production-sized precisions.
    """
    if pair.dim > MAX_MATERIALIZED_DIM:
        raise ValueError(
            f"refusing to materialize a {pair.dim} x {pair.dim} Kronecker product "
            f"(limit {MAX_MATERIALIZED_DIM})"
        )
    return np.kron(pair.left, pair.right)


def rearrange(z: Array, n: int, m: int) -> Array:
    """Rearrangement operator R mapping (nm x nm) to (n^2 x m^2).

    Satisfies R(A (x) B) = vec(A) vec(B)^T exactly, so a sum of two Kronecker
    products rearranges to a rank-2 matrix.
    """
    z = np.asarray(z)
    if z.shape != (n * m, n * m):
        raise ValueError(f"expected shape {(n * m, n * m)}, got {z.shape}")
    return z.reshape(n, m, n, m).transpose(2, 0, 3, 1).reshape(n * n, m * m)


def inverse_rearrange(r: Array, n: int, m: int) -> Array:
    """Inverse of `rearrange`: maps (n^2 x m^2) back to (nm x nm)."""
    r = np.asarray(r)
    if r.shape != (n * n, m * m):
        raise ValueError(f"expected shape {(n * n, m * m)}, got {r.shape}")
    return r.reshape(n, n, m, m).transpose(1, 3, 0, 2).reshape(n * m, n * m)


def _floored_eigh(m: Array) -> tuple[Array, Array]:
    """Eigendecomposition of a symmetric matrix with eigenvalues clamped from below."""
    w, v = np.linalg.eigh(symmetrize(m))
    floor = EIG_FLOOR * max(w[-1], 0.0)
    if floor <= 0.0:
        raise np.linalg.LinAlgError("matrix has no positive eigenvalues")
    return np.maximum(w, floor), v


def spd_inverse(m: Array) -> Array:
    """Inverse via symmetric eigendecomposition with a relative eigenvalue floor."""
    w, v = _floored_eigh(m)
    return symmetrize((v / w) @ v.T)


def spd_logdet(m: Array) -> float:
    """log-determinant via symmetric eigendecomposition with the same floor."""
    w, _ = _floored_eigh(m)
    return float(np.sum(np.log(w)))


def _check_spd(m: Array, name: str) -> Array:
    m = symmetrize(np.asarray(m, dtype=float))
    w = np.linalg.eigvalsh(m)
    if w[0] <= 0.0:
        raise np.linalg.LinAlgError(f"{name} is singular or indefinite (min eig {w[0]:.3e})")
    return m


def full_kl_precision(lam1: Array, lam2: Array) -> float:
    """KL divergence between zero-mean Gaussians given by precisions lam1, lam2.

    Returns (log|lam1| - log|lam2| + Tr(lam1^-1 lam2) - d) / 2, the divergence
    from N(0, lam1^-1) to N(0, lam2^-1). Nonnegative for SPD inputs.
    """
    lam1 = _check_spd(lam1, "lam1")
    lam2 = _check_spd(lam2, "lam2")
    d = lam1.shape[0]
    if lam2.shape[0] != d:
        raise ValueError("precision matrices must share a dimension")
    w, v = _floored_eigh(lam1)
    trace_term = float(np.sum(((v / w) @ v.T) * lam2))
    sign2, logdet2 = np.linalg.slogdet(lam2)
    return 0.5 * (float(np.sum(np.log(w))) - logdet2 + trace_term - d)


def scaled_kl(lam1: Array, lam2: Array) -> float:
    """KL between zero-mean Gaussians, minimized over a rescaling c*lam1, c > 0.

    Equals (log(|lam1|/|lam2|) + d*log(Tr(lam1^-1 lam2)/d)) / 2 and is invariant
    to any positive rescaling of lam1, which makes it the right metric for
    comparing preconditioners that only matter up to learning-rate scale.
    """
    lam1 = _check_spd(lam1, "lam1")
    lam2 = _check_spd(lam2, "lam2")
    d = lam1.shape[0]
    if lam2.shape[0] != d:
        raise ValueError("precision matrices must share a dimension")
    w, v = _floored_eigh(lam1)
    trace_term = float(np.sum(((v / w) @ v.T) * lam2))
    sign2, logdet2 = np.linalg.slogdet(lam2)
    return 0.5 * (float(np.sum(np.log(w))) - logdet2 + d * np.log(trace_term / d))


def _as_psd_inputs(*mats: Array) -> tuple[Array, ...]:
    return tuple(symmetrize(np.asarray(m, dtype=float)) for m in mats)


def scaled_additive_sum(a: Array, b: Array, c: Array, d: Array) -> KronFactorPair:
    """Approximate a (x) b + c (x) d by (a + pi*c) (x) (b + d/pi).

    pi minimizes the trace-norm bound on the residual pi^-1 a (x) d + pi c (x) b,
    giving pi = sqrt(Tr(a) Tr(d) / (Tr(b) Tr(c))).
    """
    a, b, c, d = _as_psd_inputs(a, b, c, d)
    tra, trb, trc, trd = (float(np.trace(x)) for x in (a, b, c, d))
    if min(tra, trb, trc, trd) <= 0.0:
        raise ValueError("scaled-additive approximation requires positive traces")
    pi = np.sqrt(tra * trd / (trb * trc))
    return KronFactorPair(symmetrize(a + pi * c), symmetrize(b + d / pi))


def naive_factor_sum(a: Array, b: Array, c: Array, d: Array) -> KronFactorPair:
    """The unweighted factor sum (a + c) (x) (b + d), the crudest baseline."""
    a, b, c, d = _as_psd_inputs(a, b, c, d)
    return KronFactorPair(symmetrize(a + c), symmetrize(b + d))


def mse_sum(a: Array, b: Array, c: Array, d: Array) -> KronFactorPair:
    """Kronecker product minimizing Frobenius error to a (x) b + c (x) d.

    Under the rearrangement operator the target becomes the rank-2 matrix
    vec(a) vec(b)^T + vec(c) vec(d)^T, whose best rank-1 approximation is found
    from an SVD of a 2 x m^2 matrix after projecting onto an orthogonal basis
    of [vec(a), vec(c)] - no n^2 x m^2 matrix is ever formed. Factors are
    symmetrized, and both are negated if needed so that Tr(left) > 0.
    """
    a, b, c, d = _as_psd_inputs(a, b, c, d)
    n, m = a.shape[0], b.shape[0]
    av, bv, cv, dv = vec(a), vec(b), vec(c), vec(d)
    left_norm = np.linalg.norm(av) + np.linalg.norm(cv)
    right_norm = np.linalg.norm(bv) + np.linalg.norm(dv)
    if left_norm == 0.0 or right_norm == 0.0:
        raise ValueError("mse_sum is undefined for an all-zero sum")
    q, _ = np.linalg.qr(np.stack([av, cv], axis=1))
    h = np.outer(q.T @ av, bv) + np.outer(q.T @ cv, dv)
    u, s, vt = np.linalg.svd(h, full_matrices=False)
    x = np.sqrt(s[0]) * (q @ u[:, 0])
    y = np.sqrt(s[0]) * vt[0]
    left = symmetrize(x.reshape(n, n, order="F"))
    right = symmetrize(y.reshape(m, m, order="F"))
    if np.trace(left) < 0.0:
        left, right = -left, -right
    return KronFactorPair(left, right)


def _pencil_eigvals(num: Array, den: Array) -> Array:
    """Generalized eigenvalues of num v = w den v for PSD num and PD den.

    `den` gets a relative jitter if it is numerically singular.
    """
    try:
        w = scipy.linalg.eigh(num, den, eigvals_only=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        jitter = EIG_FLOOR * max(float(np.trace(den)) / den.shape[0], 1e-300)
        w = scipy.linalg.eigh(num, den + jitter * np.eye(den.shape[0]), eigvals_only=True)
    return np.maximum(w, 0.0)


def kl_sum(
    a: Array,
    b: Array,
    c: Array,
    d: Array,
    damping: float = 0.3,
    max_iters: int = 200,
    tol: float = 1e-9,
) -> KronFactorPair:
    """Kronecker product X (x) Y minimizing the Gaussian KL to a (x) b + c (x) d.

    Minimizes KL(N(0, (X (x) Y)^-1) || N(0, (a (x) b + c (x) d)^-1)) by damped
    fixed-point iteration on the self-consistency conditions

        X = (Tr(b Y^-1) a + Tr(d Y^-1) c) / m
        Y = (Tr(a X^-1) b + Tr(c X^-1) d) / n,

    initialized at the scaled-additive approximation. Because every iterate
    stays in span{a, c} (x) span{b, d}, the iteration runs on four scalar
    coefficients after one generalized eigendecomposition per side, and each
    iterate's KL is tracked in closed form. The best iterate seen is returned,
    so the result never has higher KL than the scaled-additive initialization.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    a, b, c, d = _as_psd_inputs(a, b, c, d)
    n, m = a.shape[0], b.shape[0]

    # X = p*a + q*c and Y = r*b + s*d throughout. Generalized eigenvalues turn
    # every trace and log-determinant into an O(n + m) expression.
    lam = _pencil_eigvals(c, a)
    mu = _pencil_eigvals(d, b)
    logdet_a = spd_logdet(a)
    logdet_b = spd_logdet(b)

    def x_stats(p: float, q: float) -> tuple[float, float, float]:
        den = p + q * lam
        return float(np.sum(1.0 / den)), float(np.sum(lam / den)), logdet_a + float(
            np.sum(np.log(den))
        )

    def y_stats(r: float, s: float) -> tuple[float, float, float]:
        den = r + s * mu
        return float(np.sum(1.0 / den)), float(np.sum(mu / den)), logdet_b + float(
            np.sum(np.log(den))
        )

    def objective(p: float, q: float, r: float, s: float) -> float:
        # Twice the KL up to an additive constant (the target's log-determinant).
        tr_a, tr_c, logdet_x = x_stats(p, q)
        tr_b, tr_d, logdet_y = y_stats(r, s)
        return m * logdet_x + n * logdet_y + tr_a * tr_b + tr_c * tr_d

    tra, trb, trc, trd = (float(np.trace(x)) for x in (a, b, c, d))
    pi0 = np.sqrt(tra * trd / (trb * trc))
    p, q, r, s = 1.0, pi0, 1.0, 1.0 / pi0

    best = (p, q, r, s)
    best_obj = objective(*best)
    prev_obj = best_obj
    for _ in range(max_iters):
        tr_a_xinv, tr_c_xinv, _ = x_stats(p, q)
        tr_b_yinv, tr_d_yinv, _ = y_stats(r, s)
        p_new = (1.0 - damping) * p + (damping / m) * tr_b_yinv
        q_new = (1.0 - damping) * q + (damping / m) * tr_d_yinv
        r_new = (1.0 - damping) * r + (damping / n) * tr_a_xinv
        s_new = (1.0 - damping) * s + (damping / n) * tr_c_xinv
        p, q, r, s = p_new, q_new, r_new, s_new
        obj = objective(p, q, r, s)
        if obj < best_obj:
            best_obj = obj
            best = (p, q, r, s)
        if abs(prev_obj - obj) < tol:
            break
        prev_obj = obj

    p, q, r, s = best
    return KronFactorPair(symmetrize(p * a + q * c), symmetrize(r * b + s * d))


def kl_sum_pairs(x: KronFactorPair, y: KronFactorPair, **kwargs) -> KronFactorPair:
    """kl_sum applied to two factor pairs."""
    return kl_sum(x.left, x.right, y.left, y.right, **kwargs)


def regularized_kf_inverse(prior: KronFactorPair, alpha: float) -> tuple[Array, Array]:
    """Inverse factors of the prior precision, stabilized by alpha^2 I.

    Approximates (A (x) G + alpha^2 I)^-1 by first folding alpha*I (x) alpha*I
    into the factors with kl_sum, then inverting each factor:
    returns (P_L, P_R) = (G_tilde^-1, A_tilde^-1), both SPD. With alpha = 0 the
    factors are inverted directly.
    """
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    if alpha == 0.0:
        return spd_inverse(prior.right), spd_inverse(prior.left)
    eye_n = alpha * np.eye(prior.n)
    eye_m = alpha * np.eye(prior.m)
    folded = kl_sum(prior.left, prior.right, eye_n, eye_m)
    return spd_inverse(folded.right), spd_inverse(folded.left)
