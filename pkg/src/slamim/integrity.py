"""Protection levels from the linearised estimator: test statistic, noncentrality
threshold, worst-case failure slope and the resulting bound."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .core import position_selector

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-12
CKC_TOL = 1e-3


class RegularizationError(np.linalg.LinAlgError):
    def __init__(self, msg, condition):
        super().__init__(f"{msg} (condition estimate {condition:.3e})")
        self.condition = condition


class BisectionError(RuntimeError):
    pass


@dataclass
class LinearizedSystem:
    """Whitened measurement Jacobian C (n x l), diagonal weights W and the
    estimation matrix K = V C^T W with V = (C^T W C + beta diag(C^T C))^-1."""

    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    K: np.ndarray
    beta: float
    residual: np.ndarray | None = None
    groups: dict = field(default_factory=dict)
    ckc_error: float = 0.0

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def l(self):
        return self.C.shape[1]

    @property
    def k(self):
        return self.n - self.l


def linearize(C, W, beta=0.0, residual=None, groups=None) -> LinearizedSystem:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError("C must be a matrix")
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        W = np.diag(W)
    if W.shape != (C.shape[0],):
        raise ValueError("weights must match the rows of C")
    CtW = C.T * W
    N = CtW @ C + beta * np.diag(np.einsum("ij,ij->j", C, C))
    cond = np.linalg.cond(N)
    if not np.isfinite(cond) or cond > 1e15:
        raise RegularizationError("normal matrix is singular", cond)
    V = np.linalg.inv(N)
    V = 0.5 * (V + V.T)
    K = V @ CtW
    # CKC ~ C holds once beta is small at convergence
    nC = np.linalg.norm(C)
    err = float(np.linalg.norm(C @ (K @ C) - C) / nC) if nC > 0 else 0.0
    if err > CKC_TOL:
        log.debug("CKC deviates from C by %.2e (relative)", err)
    return LinearizedSystem(C=C, W=W, V=V, K=K, beta=beta,
                            residual=None if residual is None else np.asarray(residual, float),
                            groups=groups or {}, ckc_error=err)


def test_statistic(residuals) -> float:
    r = np.asarray(residuals, dtype=float).ravel()
    return float(r @ r)


@dataclass(frozen=True)
class IntegrityBudget:
    p_fa: float
    p_md: float
    k: int
    chi2_threshold: float
    lambda_th: float

    @classmethod
    def from_rates(cls, p_fa, p_md, k) -> "IntegrityBudget":
        thr, lam = solve_lambda_th(p_fa, p_md, k)
        return cls(p_fa, p_md, int(k), thr, lam)


@lru_cache(maxsize=512)
def solve_lambda_th(p_fa: float, p_md: float, k: int, rtol: float = 1e-9):
    """(chi2 threshold, lambda_th) for a false-alarm / missed-detection budget.

    lambda_th is the noncentrality at which the noncentral chi-square CDF at
    the detection threshold equals p_md, found by bisection.
    """
    if not (0 < p_fa < 1 and 0 < p_md < 1):
        raise ValueError("probabilities must lie in (0, 1)")
    if k < 1:
        raise ValueError("need at least one degree of freedom")
    thr = float(stats.chi2.ppf(1.0 - p_fa, k))
    if stats.chi2.cdf(thr, k) <= p_md:
        raise BisectionError("p_md >= 1 - p_fa leaves no positive noncentrality")

    def md(lam):
        return float(stats.ncx2.cdf(thr, k, lam))

    lo, hi = 0.0, max(1.0, float(k))
    for _ in range(200):
        if md(hi) <= p_md:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise BisectionError("could not bracket lambda_th")
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        if md(mid) <= p_md:
            hi = mid
        else:
            lo = mid
        if hi - lo <= rtol * hi:
            return thr, hi
    raise BisectionError("bisection did not converge")


def _inv_sqrt_psd(M):
    M = 0.5 * (M + M.T)
    w, U = np.linalg.eigh(M)
    scale = max(float(w.max()), 0.0)
    keep = w > max(EIG_FLOOR, EIG_FLOOR * scale)
    if not np.all(keep):
        log.info("fault subspace rank %d of %d; using pseudo-inverse square root",
                 int(keep.sum()), len(w))
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / np.sqrt(w[keep])
    return (U * inv) @ U.T


def slope_matrices(sys: LinearizedSystem, rows, alpha=None):
    """(m_eps, M_zeta) for the fault rows ``rows``.

    m_eps = B^T K^T alpha^T (n_b x 3); M_zeta = (B^T (I-CK)^T (I-CK) B)^(-1/2).
    """
    rows = np.asarray(rows, dtype=int)
    alpha = position_selector(sys.l) if alpha is None else alpha
    m_eps = (alpha @ sys.K[:, rows]).T
    # (I - CK) B without forming the n x n matrix
    R = -sys.C @ sys.K[:, rows]
    R[rows, np.arange(len(rows))] += 1.0
    M_zeta = _inv_sqrt_psd(R.T @ R)
    return m_eps, M_zeta


def failure_slope(sys: LinearizedSystem, mode, alpha=None) -> float:
    """Worst-case squared failure slope for a binary fault mode."""
    mode = np.asarray(mode)
    if mode.shape != (sys.n,):
        raise ValueError(f"fault mode must have length n={sys.n}")
    rows = np.flatnonzero(mode)
    if rows.size == 0:
        return 0.0
    m_eps, M_zeta = slope_matrices(sys, rows, alpha)
    G = M_zeta @ m_eps
    return float(max(np.linalg.eigvalsh(G.T @ G).max(), 0.0))


def worst_slope_exhaustive(sys: LinearizedSystem, candidates, max_faults=2, alpha=None):
    """Largest slope over every mode with up to ``max_faults`` of ``candidates``.

    Only meant for small problems; the count grows combinatorially.
    """
    candidates = list(candidates)
    if len(candidates) > 20:
        raise ValueError("exhaustive mode search limited to 20 candidate rows")
    best, best_rows = 0.0, ()
    for r in range(1, max_faults + 1):
        for rows in itertools.combinations(candidates, r):
            mode = np.zeros(sys.n, dtype=int)
            mode[list(rows)] = 1
            g2 = failure_slope(sys, mode, alpha)
            if g2 > best:
                best, best_rows = g2, rows
    return best, best_rows


def protection_level(slope2: float, lambda_th: float) -> float:
    if slope2 < 0:
        raise ValueError("slope2 must be non-negative")
    if lambda_th <= 0:
        raise ValueError("lambda_th must be positive")
    return float(np.sqrt(lambda_th * slope2))


@dataclass
class IntegrityReport:
    epoch: float
    zeta: float
    chi2_threshold: float
    lambda_th: float
    slope2: float
    pl: float
    n_b: int
    k: int
    mode: np.ndarray = field(repr=False, default=None)

    @property
    def alarm(self) -> bool:
        return self.zeta > self.chi2_threshold


def evaluate(sys: LinearizedSystem, mode, p_fa, p_md, epoch=0.0) -> IntegrityReport:
    """Full monitor for one epoch: zeta, budget, worst-case slope and PL."""
    if sys.residual is None:
        raise ValueError("linearized system carries no residual")
    k = sys.k
    if k < 1:
        raise ValueError("no redundancy (k < 1)")
    thr, lam = solve_lambda_th(float(p_fa), float(p_md), int(k))
    g2 = failure_slope(sys, mode)
    return IntegrityReport(epoch=epoch, zeta=test_statistic(sys.residual), chi2_threshold=thr,
                           lambda_th=lam, slope2=g2, pl=protection_level(g2, lam),
                           n_b=int(np.count_nonzero(mode)), k=k, mode=np.asarray(mode))
