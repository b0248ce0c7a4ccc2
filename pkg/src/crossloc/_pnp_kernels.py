"""Compiled per-problem EPnP and RANSAC scoring kernels.

Everything here works on a single small problem at a time; numba removes the
per-call overhead that dominates numpy on 4x4 and 12x12 systems. Public
wrappers live in :mod:`crossloc.pose`.
"""
import numpy as np
from numba import njit

GAUSS_NEWTON_ITERS = 10
COLLINEAR_TOL = 1e-10
PLANAR_TOL = 1e-14
NEAR_PLANAR_SEED = 1e-2
Z_MIN = 1e-6

STATUS_OK = 0
STATUS_DEGENERATE = 1
STATUS_BEHIND = 2


def _quartic_constraints():
    """Index tuples (p, q, r, s) with b_p b_q = b_r b_s (same quartic monomial)."""
    b4 = [(i, j) for i in range(4) for j in range(i, 4)]
    groups = {}
    for p in range(10):
        for q in range(p, 10):
            groups.setdefault(tuple(sorted(b4[p] + b4[q])), []).append((p, q))
    return np.array([m[0] + o for m in groups.values() for o in m[1:]], dtype=np.int64)


# b_ij = beta_i beta_j (i <= j), flattened in row order
_B4_I = np.array([i for i in range(4) for j in range(i, 4)], dtype=np.int64)
_B4_J = np.array([j for i in range(4) for j in range(i, 4)], dtype=np.int64)
_B4_INDEX = np.array([[[(i, j) for i in range(4) for j in range(i, 4)].index((min(a, c), max(a, c)))
                       for c in range(4)] for a in range(4)], dtype=np.int64)
_QUARTIC = _quartic_constraints()


@njit(cache=True)
def _gsolve(A, b):
    """Gaussian elimination with partial pivoting; returns (x, ok)."""
    n = A.shape[0]
    M = A.copy()
    x = b.copy()
    for k in range(n):
        p = k
        best = abs(M[k, k])
        for i in range(k + 1, n):
            if abs(M[i, k]) > best:
                best = abs(M[i, k])
                p = i
        if best == 0.0 or not np.isfinite(best):
            return x, False
        if p != k:
            for j in range(n):
                tmp = M[k, j]
                M[k, j] = M[p, j]
                M[p, j] = tmp
            tmp = x[k]
            x[k] = x[p]
            x[p] = tmp
        for i in range(k + 1, n):
            f = M[i, k] / M[k, k]
            if f != 0.0:
                for j in range(k, n):
                    M[i, j] -= f * M[k, j]
                x[i] -= f * x[k]
    for k in range(n - 1, -1, -1):
        s = x[k]
        for j in range(k + 1, n):
            s -= M[k, j] * x[j]
        x[k] = s / M[k, k]
    return x, True


@njit(cache=True)
def _lstsq_normal(A, b, ridge):
    """Least squares via normal equations with a relative ridge."""
    AtA = A.T @ A
    m = AtA.shape[0]
    scale = 0.0
    for i in range(m):
        scale += AtA[i, i]
    scale = scale / m if scale > 0 else 1.0
    for i in range(m):
        AtA[i, i] += ridge * scale
    return _gsolve(AtA, A.T @ b)


@njit(cache=True)
def _sym_eig(A):
    """Cyclic Jacobi eigen-decomposition of a small symmetric matrix.

    Returns eigenvalues ascending and the matching eigenvectors as columns.
    """
    n = A.shape[0]
    a = A.copy()
    v = np.eye(n)
    for _ in range(50):
        off = 0.0
        scale = 0.0
        for i in range(n):
            scale += a[i, i] * a[i, i]
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if off <= 1e-30 * scale or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k, p], a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p, k], a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k, p], v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    order = np.argsort(w)
    return w[order], v[:, order]


@njit(cache=True)
def _orthonormalize_columns(A):
    """Modified Gram-Schmidt (two passes) on the columns of A."""
    m, n = A.shape
    Q = A.copy()
    for _ in range(2):
        for k in range(n):
            for j in range(k):
                d = 0.0
                for i in range(m):
                    d += Q[i, j] * Q[i, k]
                for i in range(m):
                    Q[i, k] -= d * Q[i, j]
            norm = 0.0
            for i in range(m):
                norm += Q[i, k] * Q[i, k]
            norm = np.sqrt(norm)
            if norm > 0:
                for i in range(m):
                    Q[i, k] /= norm
    return Q


@njit(cache=True)
def _horn(A, B):
    """Rotation/translation with ``B ~ R A + t`` from unit-quaternion alignment."""
    m = A.shape[0]
    ma = np.zeros(3)
    mb = np.zeros(3)
    for i in range(m):
        ma += A[i]
        mb += B[i]
    ma /= m
    mb /= m
    S = np.zeros((3, 3))
    for i in range(m):
        for r in range(3):
            for c in range(3):
                S[r, c] += (A[i, r] - ma[r]) * (B[i, c] - mb[c])
    N = np.empty((4, 4))
    N[0, 0] = S[0, 0] + S[1, 1] + S[2, 2]
    N[0, 1] = N[1, 0] = S[1, 2] - S[2, 1]
    N[0, 2] = N[2, 0] = S[2, 0] - S[0, 2]
    N[0, 3] = N[3, 0] = S[0, 1] - S[1, 0]
    N[1, 1] = S[0, 0] - S[1, 1] - S[2, 2]
    N[1, 2] = N[2, 1] = S[0, 1] + S[1, 0]
    N[1, 3] = N[3, 1] = S[2, 0] + S[0, 2]
    N[2, 2] = -S[0, 0] + S[1, 1] - S[2, 2]
    N[2, 3] = N[3, 2] = S[1, 2] + S[2, 1]
    N[3, 3] = -S[0, 0] - S[1, 1] + S[2, 2]
    _, vec = _sym_eig(N)
    w, x, y, z = vec[0, 3], vec[1, 3], vec[2, 3], vec[3, 3]
    R = np.empty((3, 3))
    R[0, 0] = w * w + x * x - y * y - z * z
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = w * w - x * x + y * y - z * z
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = w * w - x * x - y * y + z * z
    t = mb - R @ ma
    return R, t


@njit(cache=True)
def _mean_reproj(Pw, xn, R, t, fx, fy):
    """Mean pixel reprojection error; inf if any point is behind the camera."""
    n = Pw.shape[0]
    total = 0.0
    for i in range(n):
        X = R[0, 0] * Pw[i, 0] + R[0, 1] * Pw[i, 1] + R[0, 2] * Pw[i, 2] + t[0]
        Y = R[1, 0] * Pw[i, 0] + R[1, 1] * Pw[i, 1] + R[1, 2] * Pw[i, 2] + t[1]
        Z = R[2, 0] * Pw[i, 0] + R[2, 1] * Pw[i, 1] + R[2, 2] * Pw[i, 2] + t[2]
        if not Z > Z_MIN:
            return np.inf
        dx = (X / Z - xn[i, 0]) * fx
        dy = (Y / Z - xn[i, 1]) * fy
        total += np.sqrt(dx * dx + dy * dy)
    return total / n


@njit(cache=True)
def _residuals(beta, Q, rho, Qb, r):
    """Fill ``Qb = Q beta`` and the distance residuals ``r``; returns the cost."""
    P, nk = Q.shape[0], Q.shape[1]
    cost = 0.0
    for p in range(P):
        acc = 0.0
        for i in range(nk):
            s = 0.0
            for j in range(nk):
                s += Q[p, i, j] * beta[j]
            Qb[p, i] = s
            acc += s * beta[i]
        r[p] = acc - rho[p]
        cost += r[p] * r[p]
    return cost


@njit(cache=True)
def _gauss_newton(beta0, Q, rho, iters):
    """Refine betas on the squared control-point distance residuals.

    Each step is halved until the cost drops (at most three times), which
    keeps ill-conditioned near-planar problems from diverging. Stops early
    once the cost is at rounding level.
    """
    P, nk = Q.shape[0], Q.shape[1]
    beta = beta0.copy()
    trial = np.empty(nk)
    Qb = np.empty((P, nk))
    r = np.empty(P)
    Qt = np.empty((P, nk))
    rt = np.empty(P)
    JtJ = np.empty((nk, nk))
    Jtr = np.empty(nk)
    floor = 0.0
    for p in range(P):
        floor += rho[p] * rho[p]
    floor *= 1e-28
    cost = _residuals(beta, Q, rho, Qb, r)
    for _ in range(iters):
        if cost <= floor:
            break
        for i in range(nk):
            Jtr[i] = 0.0
            for j in range(nk):
                JtJ[i, j] = 0.0
        for p in range(P):
            for i in range(nk):
                Jtr[i] -= 2.0 * Qb[p, i] * r[p]
                for j in range(nk):
                    JtJ[i, j] += 4.0 * Qb[p, i] * Qb[p, j]
        step, ok = _ridge_solve(JtJ, Jtr)
        if not ok:
            break
        frac = 1.0
        moved = False
        for _ in range(4):
            for i in range(nk):
                trial[i] = beta[i] + frac * step[i]
            c = _residuals(trial, Q, rho, Qt, rt)
            if c < cost:
                beta[:] = trial
                Qb[:, :] = Qt
                r[:] = rt
                cost = c
                moved = True
                break
            frac *= 0.5
        if not moved:
            break
    return beta


@njit(cache=True)
def _ridge_solve(A, b):
    """Solve with a tiny relative ridge; ok is False on failure or non-finite output."""
    m = A.shape[0]
    scale = 0.0
    for i in range(m):
        scale += A[i, i]
    scale = scale / m if scale > 0 else 1.0
    Ar = A.copy()
    for i in range(m):
        Ar[i, i] += 1e-14 * scale
    x, ok = _gsolve(Ar, b)
    if ok:
        for i in range(m):
            if not np.isfinite(x[i]):
                ok = False
    return x, ok


@njit(cache=True)
def _householder(A):
    """Householder QR of an (m, n) matrix, m >= n.

    Returns the reflectors as columns of V (unit vectors, zero above the
    diagonal) and the upper-triangular R (n, n).
    """
    m, n = A.shape
    R = A.copy()
    V = np.zeros((m, n))
    for k in range(n):
        norm = 0.0
        for i in range(k, m):
            norm += R[i, k] * R[i, k]
        norm = np.sqrt(norm)
        if norm == 0.0:
            continue
        alpha = -norm if R[k, k] >= 0 else norm
        vnorm = 0.0
        for i in range(k, m):
            V[i, k] = R[i, k]
        V[k, k] -= alpha
        for i in range(k, m):
            vnorm += V[i, k] * V[i, k]
        vnorm = np.sqrt(vnorm)
        if vnorm == 0.0:
            continue
        for i in range(k, m):
            V[i, k] /= vnorm
        for j in range(k, n):
            d = 0.0
            for i in range(k, m):
                d += V[i, k] * R[i, j]
            for i in range(k, m):
                R[i, j] -= 2.0 * V[i, k] * d
    return V, R[:n].copy()


@njit(cache=True)
def _apply_qt(V, b):
    """Q^T b for the reflectors of :func:`_householder`."""
    x = b.copy()
    m, n = V.shape
    for k in range(n):
        d = 0.0
        for i in range(k, m):
            d += V[i, k] * x[i]
        for i in range(k, m):
            x[i] -= 2.0 * V[i, k] * d
    return x


@njit(cache=True)
def _apply_q(V, b):
    """Q b for the reflectors of :func:`_householder`."""
    x = b.copy()
    m, n = V.shape
    for k in range(n - 1, -1, -1):
        d = 0.0
        for i in range(k, m):
            d += V[i, k] * x[i]
        for i in range(k, m):
            x[i] -= 2.0 * V[i, k] * d
    return x


@njit(cache=True)
def _lstsq_qr(A, b):
    """Least squares via Householder QR and back substitution (rank-guarded)."""
    V, R = _householder(A)
    y = _apply_qt(V, b)
    m = R.shape[1]
    x = np.zeros(m)
    big = 0.0
    for k in range(m):
        big = max(big, abs(R[k, k]))
    tol = 1e-13 * big
    for k in range(m - 1, -1, -1):
        if abs(R[k, k]) <= tol:
            continue
        s = y[k]
        for j in range(k + 1, m):
            s -= R[k, j] * x[j]
        x[k] = s / R[k, k]
    return x


@njit(cache=True)
def _relinearized_betas(Q, rho, b4i, b4j, b4index, quartic):
    """Four-vector case by relinearization.

    The six distance equations are linear in the ten products b_ij; their
    solution family ``b0 + N lam`` is pinned down by requiring the products to
    be mutually consistent (b_ij b_kl = b_ik b_jl), treating the terms of
    degree two in ``lam`` as extra linear unknowns.
    """
    P = Q.shape[0]
    L = np.empty((P, 10))
    for p in range(P):
        for m in range(10):
            i, j = b4i[m], b4j[m]
            L[p, m] = Q[p, i, j] * (1.0 if i == j else 2.0)
    # L^T = Q R: the last four columns of Q span the null space of L and the
    # minimum-norm solution is Q[:, :6] R^-T rho
    V, R = _householder(L.T.copy())
    y = np.zeros(10)
    for k in range(P):
        s = rho[k]
        for j in range(k):
            s -= R[j, k] * y[j]
        y[k] = s / R[k, k] if R[k, k] != 0.0 else 0.0
    b0 = _apply_q(V, y)
    N = np.empty((10, 4))
    for k in range(4):
        e = np.zeros(10)
        e[6 + k] = 1.0
        N[:, k] = _apply_q(V, e)
    nc = quartic.shape[0]
    A = np.zeros((nc, 14))
    rhs = np.empty(nc)
    for c in range(nc):
        p, q, r, s = quartic[c, 0], quartic[c, 1], quartic[c, 2], quartic[c, 3]
        rhs[c] = -(b0[p] * b0[q] - b0[r] * b0[s])
        for k in range(4):
            A[c, k] = b0[p] * N[q, k] + b0[q] * N[p, k] - b0[r] * N[s, k] - b0[s] * N[r, k]
        col = 4
        for k in range(4):
            for m in range(k, 4):
                if k == m:
                    A[c, col] = N[p, k] * N[q, k] - N[r, k] * N[s, k]
                else:
                    A[c, col] = (N[p, k] * N[q, m] + N[p, m] * N[q, k]
                                 - N[r, k] * N[s, m] - N[r, m] * N[s, k])
                col += 1
    z = _lstsq_qr(A, rhs)
    b = b0 + N @ z[:4]
    lead = 0
    for i in range(1, 4):
        if abs(b[b4index[i, i]]) > abs(b[b4index[lead, lead]]):
            lead = i
    bl = np.sqrt(abs(b[b4index[lead, lead]]))
    beta = np.zeros(4)
    if bl > 1e-300:
        for i in range(4):
            beta[i] = b[b4index[lead, i]] / bl
    beta[lead] = bl
    return beta


@njit(cache=True)
def _initial_betas(Q, rho, nk, nc, b4i, b4j, b4index, quartic):
    """Beta guesses for the N = 1, 2, 3 cases plus the relinearized four-vector case."""
    P = Q.shape[0]
    n_init = 4 if nc == 4 else 2
    out = np.zeros((n_init, nk))
    # N = 1
    num = 0.0
    den = 0.0
    for p in range(P):
        d = np.sqrt(max(Q[p, 0, 0], 0.0))
        num += d * np.sqrt(rho[p])
        den += d * d
    out[0, 0] = num / max(den, 1e-300)
    # N = 2: b11, b12, b22
    L = np.empty((P, 3))
    for p in range(P):
        L[p, 0] = Q[p, 0, 0]
        L[p, 1] = 2 * Q[p, 0, 1]
        L[p, 2] = Q[p, 1, 1]
    s, ok = _lstsq_normal(L, rho, 1e-14)
    if ok:
        out[1, 0] = np.sqrt(abs(s[0]))
        out[1, 1] = np.sqrt(abs(s[2])) * (-1.0 if s[1] * np.sign(s[0]) < 0 else 1.0)
    if nc == 4:
        # N = 3: b11, b12, b13, b22, b23, b33
        L = np.empty((P, 6))
        for p in range(P):
            L[p, 0] = Q[p, 0, 0]
            L[p, 1] = 2 * Q[p, 0, 1]
            L[p, 2] = 2 * Q[p, 0, 2]
            L[p, 3] = Q[p, 1, 1]
            L[p, 4] = 2 * Q[p, 1, 2]
            L[p, 5] = Q[p, 2, 2]
        s, ok = _lstsq_normal(L, rho, 1e-14)
        if ok:
            b1 = np.sqrt(abs(s[0]))
            out[2, 0] = b1
            if b1 > 1e-300:
                out[2, 1] = s[1] / b1
                out[2, 2] = s[2] / b1
            else:
                out[2, 1] = np.sqrt(abs(s[3]))
                out[2, 2] = np.sqrt(abs(s[5]))
        out[3] = _relinearized_betas(Q, rho, b4i, b4j, b4index, quartic)
    return out


@njit(cache=True)
def _epnp_nc(Pw, xn, fx, fy, nc, c0, lam, V, seed_R, seed_t, seed_only,
             b4i, b4j, b4index, quartic):
    """EPnP with ``nc`` control points (4, or 3 for planar sets).

    ``lam`` and the rows of ``V`` are the point-cloud principal variances and
    axes, largest first.

    Returns (R, t, mean pixel error); the error is inf if nothing worked.
    """
    n = Pw.shape[0]
    na = nc - 1
    Cw = np.empty((nc, 3))
    Cw[0] = c0
    alphas = np.empty((n, nc))
    for k in range(na):
        s = np.sqrt(max(lam[k], 1e-300))
        axis = V[k]
        Cw[k + 1] = c0 + s * axis
        for i in range(n):
            alphas[i, k + 1] = ((Pw[i, 0] - c0[0]) * axis[0] + (Pw[i, 1] - c0[1]) * axis[1]
                                + (Pw[i, 2] - c0[2]) * axis[2]) / s
    for i in range(n):
        alphas[i, 0] = 1.0 - np.sum(alphas[i, 1:])

    nk = 4 if nc == 4 else 2
    kernel = np.empty((3 * nc, nk))
    explicit = False
    if nc == 4 and n == 4:
        # minimal case: Cc = A^-1 diag(d) m spans the exact 4-dim null space
        Ainv = np.empty((4, 4))
        explicit = True
        for i in range(4):
            e = np.zeros(4)
            e[i] = 1.0
            col, ok = _gsolve(alphas, e)
            if not ok:
                explicit = False
                break
            Ainv[:, i] = col
        if explicit:
            for i in range(4):
                for c in range(4):
                    kernel[3 * c, i] = Ainv[c, i] * xn[i, 0]
                    kernel[3 * c + 1, i] = Ainv[c, i] * xn[i, 1]
                    kernel[3 * c + 2, i] = Ainv[c, i]
            kernel = _orthonormalize_columns(kernel)
    if not explicit:
        M = np.zeros((2 * n, 3 * nc))
        for i in range(n):
            for j in range(nc):
                a = alphas[i, j]
                M[2 * i, 3 * j] = a
                M[2 * i, 3 * j + 2] = -a * xn[i, 0]
                M[2 * i + 1, 3 * j + 1] = a
                M[2 * i + 1, 3 * j + 2] = -a * xn[i, 1]
        _, E = np.linalg.eigh(M.T @ M)
        kernel = E[:, :nk].copy()

    P = nc * (nc - 1) // 2
    rho = np.empty(P)
    Q = np.zeros((P, nk, nk))
    p = 0
    for a in range(nc):
        for b in range(a + 1, nc):
            d = Cw[a] - Cw[b]
            rho[p] = d @ d
            for i in range(nk):
                for j in range(nk):
                    acc = 0.0
                    for x in range(3):
                        acc += (kernel[3 * a + x, i] - kernel[3 * b + x, i]) * \
                               (kernel[3 * a + x, j] - kernel[3 * b + x, j])
                    Q[p, i, j] = acc
            p += 1

    if seed_only:
        inits = np.zeros((1, nk))
        for c in range(nc):
            Cc0 = seed_R @ Cw[c] + seed_t
            for k in range(nk):
                for x in range(3):
                    inits[0, k] += kernel[3 * c + x, k] * Cc0[x]
    else:
        inits = _initial_betas(Q, rho, nk, nc, b4i, b4j, b4index, quartic)

    best_R = np.eye(3)
    best_t = np.zeros(3)
    best_err = np.inf
    for m in range(inits.shape[0]):
        beta = _gauss_newton(inits[m], Q, rho, GAUSS_NEWTON_ITERS)
        Cc = (kernel @ beta).reshape(nc, 3)
        mean_depth = 0.0
        for i in range(n):
            for c in range(nc):
                mean_depth += alphas[i, c] * Cc[c, 2]
        if mean_depth < 0:
            Cc = -Cc
        R, t = _horn(Cw, Cc)
        if R[2] @ c0 + t[2] <= 0:
            R, t = _horn(Cw, -Cc)
        err = _mean_reproj(Pw, xn, R, t, fx, fy)
        if err < best_err:
            best_R, best_t, best_err = R, t, err
    return best_R, best_t, best_err


@njit(cache=True)
def epnp_single(Pw, xn, fx, fy, b4i, b4j, b4index, quartic):
    """Solve one problem; returns (R, t, mean pixel error, status)."""
    n = Pw.shape[0]
    c0 = np.zeros(3)
    for i in range(n):
        c0 += Pw[i]
    c0 /= n
    D = Pw - c0
    w, E = _sym_eig(D.T @ D / n)
    lam = w[::-1].copy()
    V = E[:, ::-1].T.copy()  # rows are principal axes, largest first
    if not lam[1] > COLLINEAR_TOL * lam[0]:
        return np.eye(3), np.zeros(3), np.inf, STATUS_DEGENERATE
    dummy_R = np.eye(3)
    dummy_t = np.zeros(3)
    if not lam[2] > PLANAR_TOL * lam[0]:
        R, t, err = _epnp_nc(Pw, xn, fx, fy, 3, c0, lam, V, dummy_R, dummy_t, False,
                             b4i, b4j, b4index, quartic)
    else:
        R, t, err = _epnp_nc(Pw, xn, fx, fy, 4, c0, lam, V, dummy_R, dummy_t, False,
                             b4i, b4j, b4index, quartic)
        if lam[2] < NEAR_PLANAR_SEED * lam[0]:
            # thin sets: the in-plane solution is an extra start for the full solve
            Rs, ts, es = _epnp_nc(Pw, xn, fx, fy, 3, c0, lam, V, dummy_R, dummy_t, False,
                                  b4i, b4j, b4index, quartic)
            if np.isfinite(es):
                R2, t2, e2 = _epnp_nc(Pw, xn, fx, fy, 4, c0, lam, V, Rs, ts, True,
                                      b4i, b4j, b4index, quartic)
                if e2 < err:
                    R, t, err = R2, t2, e2
    ok = np.isfinite(err)
    for i in range(3):
        ok = ok and np.isfinite(t[i])
        for j in range(3):
            ok = ok and np.isfinite(R[i, j])
    if not ok:
        return np.eye(3), np.zeros(3), np.inf, STATUS_BEHIND
    return R, t, err, STATUS_OK


@njit(cache=True)
def best_candidate_errors(R, t, uv, pts, counts, fx, fy, cx, cy):
    """Per hypothesis: min pixel error over its candidates and the argmin."""
    H = pts.shape[0]
    errs = np.full(H, np.inf)
    arg = np.zeros(H, dtype=np.int64)
    for h in range(H):
        for k in range(counts[h]):
            X = R[0, 0] * pts[h, k, 0] + R[0, 1] * pts[h, k, 1] + R[0, 2] * pts[h, k, 2] + t[0]
            Y = R[1, 0] * pts[h, k, 0] + R[1, 1] * pts[h, k, 1] + R[1, 2] * pts[h, k, 2] + t[1]
            Z = R[2, 0] * pts[h, k, 0] + R[2, 1] * pts[h, k, 1] + R[2, 2] * pts[h, k, 2] + t[2]
            if not Z > Z_MIN:
                continue
            du = fx * X / Z + cx - uv[h, 0]
            dv = fy * Y / Z + cy - uv[h, 1]
            e = np.sqrt(du * du + dv * dv)
            if e < errs[h]:
                errs[h] = e
                arg[h] = k
    return errs, arg


@njit(cache=True)
def ransac_block(sel, cand, pts, counts, uv, xn, fx, fy, cx, cy, thr, b4i, b4j, b4index, quartic):
    """Fit and score every minimal sample of one block.

    Returns per-iteration rotations, translations, inlier counts, mean inlier
    errors and solver status.
    """
    n_iter = sel.shape[0]
    Rs = np.zeros((n_iter, 3, 3))
    ts = np.zeros((n_iter, 3))
    n_in = np.zeros(n_iter, dtype=np.int64)
    mean_err = np.full(n_iter, np.inf)
    status = np.zeros(n_iter, dtype=np.int64)
    Pw = np.empty((4, 3))
    x = np.empty((4, 2))
    for it in range(n_iter):
        for j in range(4):
            h = sel[it, j]
            Pw[j] = pts[h, cand[it, j]]
            x[j] = xn[h]
        R, t, _, st = epnp_single(Pw, x, fx, fy, b4i, b4j, b4index, quartic)
        status[it] = st
        if st != STATUS_OK:
            continue
        Rs[it] = R
        ts[it] = t
        errs, _ = best_candidate_errors(R, t, uv, pts, counts, fx, fy, cx, cy)
        cnt = 0
        tot = 0.0
        for h in range(errs.shape[0]):
            if errs[h] < thr:
                cnt += 1
                tot += errs[h]
        n_in[it] = cnt
        if cnt > 0:
            mean_err[it] = tot / cnt
    return Rs, ts, n_in, mean_err, status


def solve(Pw, xn, fx, fy):
    return epnp_single(np.ascontiguousarray(Pw, dtype=np.float64), np.ascontiguousarray(xn, dtype=np.float64),
                       float(fx), float(fy), _B4_I, _B4_J, _B4_INDEX, _QUARTIC)


def score(R, t, uv, pts, counts, fx, fy, cx, cy):
    return best_candidate_errors(np.ascontiguousarray(R), np.ascontiguousarray(t), uv, pts, counts,
                                 float(fx), float(fy), float(cx), float(cy))


def run_block(sel, cand, pts, counts, uv, xn, fx, fy, cx, cy, thr):
    return ransac_block(sel, cand, pts, counts, uv, xn, float(fx), float(fy), float(cx), float(cy),
                        float(thr), _B4_I, _B4_J, _B4_INDEX, _QUARTIC)
