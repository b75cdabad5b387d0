"""Dense float64 kernels shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Products go through :func:`matmul`, which accumulates in a
fixed inner-index order so results are bit-stable across BLAS builds and can
be counted by :class:`MaddCounter`.
"""
from __future__ import annotations

import io
import math
from contextlib import contextmanager

import numpy as np

EPS = 1e-12
MAX_SWEEPS = 60

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConvergenceError(RuntimeError):
    """Jacobi iteration did not converge within the sweep budget."""

    def __init__(self, residual, sweeps):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(relative off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


def as_matrix(m, name="matrix") -> np.ndarray:
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(m, name="matrix"):
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return m


# -- multiply-add accounting ------------------------------------------------

_counters: list[MaddCounter] = []


class MaddCounter:
    """Context manager tallying multiply-adds issued through this module.

    >>> with MaddCounter() as c:
    ...     _ = matmul(np.ones((2, 3)), np.ones((3, 4)))
    >>> c.total
    24
    """

    def __init__(self):
        self.total = 0
        self.by_tag: dict[str, int] = {}

    def add(self, n, tag):
        self.total += n
        self.by_tag[tag] = self.by_tag.get(tag, 0) + n

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


def _record(n, tag):
    for c in _counters:
        c.add(int(n), tag)


@contextmanager
def tagged(tag):
    """Attribute multiply-adds issued inside the block to ``tag``."""
    global _current_tag
    prev = _current_tag
    _current_tag = tag
    try:
        yield
    finally:
        _current_tag = prev


_current_tag = "untagged"


# -- products ---------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` accumulated left to right over the inner index.

    Each output entry equals ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``
    evaluated in float64 without fused multiply-add, i.e. exactly what a
    scalar triple loop produces.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    n, k = a.shape
    m = b.shape[1]
    _record(n * k * m, _current_tag)
    out = np.zeros((n, m))
    if k == 0:
        return out
    tmp = np.empty((n, m))
    np.multiply(a[:, 0:1], b[0:1, :], out=out)
    for j in range(1, k):
        np.multiply(a[:, j:j + 1], b[j:j + 1, :], out=tmp)
        out += tmp
    return out


def stacked_matvec(w, v) -> np.ndarray:
    """Per-slice matrix-vector product: ``out[e] = w[e] @ v[e]``.

    ``w`` has shape (E, p, q) and ``v`` shape (E, q); accumulation order is the
    same as :func:`matmul`.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w.ndim != 3 or v.ndim != 2 or w.shape[0] != v.shape[0] or w.shape[2] != v.shape[1]:
        raise ShapeError(f"cannot apply stack {w.shape} to vectors {v.shape}")
    e, p, q = w.shape
    _record(e * p * q, _current_tag)
    out = np.zeros((e, p))
    if q == 0:
        return out
    tmp = np.empty((e, p))
    np.multiply(w[:, :, 0], v[:, 0:1], out=out)
    for j in range(1, q):
        np.multiply(w[:, :, j], v[:, j:j + 1], out=tmp)
        out += tmp
    return out


# -- elementwise / row operations --------------------------------------------

def softmax_axis(m, axis) -> np.ndarray:
    """Stable softmax. ``axis`` is ``"over_cols"`` (rows sum to 1) or
    ``"over_rows"`` (columns sum to 1); numpy axis integers 1/0 also work."""
    if axis in ("over_cols", 1):
        ax = 1
    elif axis in ("over_rows", 0):
        ax = 0
    else:
        raise ValueError(f"unknown softmax axis {axis!r}")
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=ax, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=ax, keepdims=True)


def row_norms(m) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def l2_normalize_rows(m, epsilon=EPS) -> np.ndarray:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m = np.asarray(m, dtype=np.float64)
    return m / np.maximum(row_norms(m), epsilon)[:, None]


def l2_normalize_rows_backward(m, grad, epsilon=EPS) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize_rows` at ``m``."""
    norms = row_norms(m)
    safe = norms > epsilon
    denom = np.where(safe, norms, epsilon)[:, None]
    y = m / denom
    radial = np.where(safe, np.einsum("ij,ij->i", y, grad), 0.0)[:, None]
    return (grad - y * radial) / denom


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GeLU; scalar in, scalar out, array in, array out."""
    if np.isscalar(x):
        return 0.5 * x * (1.0 + math.tanh(_GELU_C * (x + 0.044715 * x ** 3)))
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


# -- SVD --------------------------------------------------------------------

def _round_robin(n):
    """Pairings for a cyclic tournament: n-1 rounds of disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        half = size // 2
        pairs = [(players[i], players[size - 1 - i]) for i in range(half)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs], dtype=np.intp),
                       np.array([q for _, q in pairs], dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off_residual(a):
    g = a.T @ a
    total = np.linalg.norm(g)
    if total == 0.0:
        return 0.0
    off = g - np.diag(np.diag(g))
    return np.linalg.norm(off) / total


def jacobi_svd(m, max_sweeps=MAX_SWEEPS):
    """One-sided Jacobi SVD.

    Returns ``(s, u, v)`` with ``s`` descending, ``u`` of shape (rows, k),
    ``v`` of shape (cols, k) where ``k = min(rows, cols)``, and
    ``m ~= u @ diag(s) @ v.T``. Wide inputs are handled by transposing.
    """
    a = as_matrix(m).copy()
    check_finite(a)
    if a.shape[0] < a.shape[1]:
        s, u, v = jacobi_svd(a.T, max_sweeps=max_sweeps)
        return s, v, u
    rows, cols = a.shape
    v = np.eye(cols)
    rounds = _round_robin(cols) if cols > 1 else []
    pair_tol = np.finfo(float).eps * rows

    converged = cols <= 1
    sweeps = 0
    while not converged:
        if sweeps >= max_sweeps:
            raise ConvergenceError(_off_residual(a), sweeps)
        sweeps += 1
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > pair_tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p].copy(), a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p].copy(), v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        # per-pair test is stricter than the global one; keeps small columns orthogonal
        converged = not rotated

    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros((rows, cols))
    floor = (sigma[0] if cols else 0.0) * rows * np.finfo(float).eps
    keep = sigma > floor
    u[:, keep] = a[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not keep.all():
        u = _complete_basis(u, keep)
    return sigma, u, v


def _complete_basis(u, keep):
    """Fill the columns of ``u`` not flagged in ``keep`` with an orthonormal
    complement of the flagged ones."""
    rows = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(keep)]
    fill = []
    for j in range(rows):
        if len(fill) == int((~keep).sum()):
            break
        cand = np.zeros(rows)
        cand[j] = 1.0
        for _ in range(2):
            for b in basis + fill:
                cand = cand - (b @ cand) * b
        n = np.linalg.norm(cand)
        if n > 1e-8:
            fill.append(cand / n)
    out = u.copy()
    out[:, ~keep] = np.array(fill).T
    return out


# -- RNG --------------------------------------------------------------------

def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based splitmix64 generator.

    Output ``i`` is ``mix(seed + (i + 1) * golden)``, so draws can be produced
    in vectorized blocks with no dependence on block size.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.state = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def next_u64(self, n) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.state + idx * _GOLDEN)

    def uniform(self, n) -> np.ndarray:
        """n draws from (0, 1]."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)

    def normal(self, shape, std=1.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (z[:n] * std).reshape(shape)

    def spawn(self, *keys) -> "Rng":
        """Independent child stream keyed by integers."""
        h = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            for k in keys:
                h = _mix64(h ^ (np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
        return Rng(int(h))


# -- CSV --------------------------------------------------------------------

def matrix_to_csv(m) -> str:
    m = as_matrix(m)
    buf = io.StringIO()
    buf.write(f"{m.shape[0]},{m.shape[1]}\n")
    for row in m:
        buf.write(",".join(f"{x:.17g}" for x in row))
        buf.write("\n")
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    lines = text.strip("\n").split("\n")
    try:
        rows, cols = (int(x) for x in lines[0].split(","))
        body = lines[1:1 + rows]
        data = [[float(x) for x in line.split(",")] if cols else [] for line in body]
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed matrix CSV: {exc}") from None
    m = np.array(data, dtype=np.float64).reshape(rows, cols)
    if len(body) != rows or any(len(r) != cols for r in data):
        raise ValueError(f"matrix CSV body does not match header {rows},{cols}")
    return m


def save_matrix(path, m):
    with open(path, "w") as fh:
        fh.write(matrix_to_csv(m))


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return matrix_from_csv(fh.read())
