"""Prediction-sorted decile portfolios.

Five within-decile weighting schemes:

* ``EW``  equal weights
* ``VW``  market-cap weights
* ``UW``  minimum predictive variance ``min w' S w`` over the simplex
* ``PW``  level-adjusted predictions normalized to one
* ``PUW`` ``max w' s - gamma/2 w' S w`` over the simplex

The two quadratic programs share one solver: accelerated projected gradient
on the probability simplex followed by an active-set polish that solves the
KKT system on the detected support exactly.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ._validation import as_vector, check_square_symmetric
from .exceptions import ConvergenceError, UndefinedMetricError
from .metrics import decile_labels

__all__ = [
    "project_simplex",
    "kkt_residual",
    "solve_simplex_qp",
    "assign_deciles",
    "ew_weights",
    "vw_weights",
    "uw_weights",
    "level_adjusted",
    "pw_weights",
    "puw_weights",
    "uw_objective",
    "puw_objective",
    "StrategyStats",
    "annualized_stats",
    "build_portfolios",
    "PortfolioBook",
    "STRATEGIES",
]

logger = logging.getLogger(__name__)

STRATEGIES = ("EW", "VW", "UW", "PW", "PUW")
N_DECILES = 10
MONTHS_PER_YEAR = 12


# -- simplex QP -------------------------------------------------------------------

def project_simplex(v):
    """Euclidean projection onto ``{w >= 0, sum w = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, n + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def kkt_residual(w, grad):
    """Projected-gradient residual ``max|w - P(w - grad)|``; zero iff w is optimal."""
    return float(np.max(np.abs(w - project_simplex(w - grad))))


def _polish(Q, c, w, tol):
    """Active-set refinement from the support of ``w``."""
    n = w.size
    support = w > 1e-12 * max(1.0, w.max())
    for _ in range(4 * n + 10):
        S = np.flatnonzero(support)
        k = S.size
        A = np.zeros((k + 1, k + 1))
        A[:k, :k] = Q[np.ix_(S, S)]
        A[:k, k] = 1.0
        A[k, :k] = 1.0
        b = np.concatenate([-c[S], [1.0]])
        sol = np.linalg.lstsq(A, b, rcond=None)[0]
        wS = sol[:k]
        if np.any(wS < 0):
            # step from the current feasible point toward wS until a weight hits zero
            cur = w[S]
            d = wS - cur
            neg = d < 0
            steps = np.where(neg, cur / np.where(neg, -d, 1.0), np.inf)
            t = min(1.0, steps.min())
            cand = np.zeros(n)
            cand[S] = np.maximum(cur + t * d, 0.0)
            cand /= cand.sum()
            w = cand
            support = w > 0
            support[S[np.argmin(steps)]] = False
            if not support.any():
                return None
            continue
        cand = np.zeros(n)
        cand[S] = wS
        cand /= cand.sum()
        g = Q @ cand + c
        lam = np.mean(g[S])
        off = np.flatnonzero(~support)
        viol = lam - g[off]
        if off.size and viol.max() > tol:
            w = cand
            support = support.copy()
            support[off[np.argmax(viol)]] = True
            continue
        return cand
    return None


def solve_simplex_qp(Q, c=None, tol=1e-10, max_iter=100_000, w0=None):
    """Minimize ``1/2 w'Qw + c'w`` over the simplex for PSD ``Q``.

    Returns ``(w, residual)``; raises ConvergenceError if the KKT residual
    cannot be driven below ``100 * tol``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    n = Q.shape[0]
    c = np.zeros(n) if c is None else np.asarray(c, dtype=np.float64)
    if n == 1:
        return np.ones(1), 0.0
    obj = lambda w: 0.5 * w @ Q @ w + c @ w
    L = float(np.linalg.norm(Q, 2))
    # any step works for a linear objective; 1 keeps iterates well scaled
    step = 1.0 / L if L > 0 else 1.0
    w = np.full(n, 1.0 / n) if w0 is None else project_simplex(w0)
    y, t = w.copy(), 1.0
    f_w = obj(w)
    res = np.inf
    restarted = False
    for it in range(max_iter):
        w_next = project_simplex(y - step * (Q @ y + c))
        f_next = obj(w_next)
        if f_next > f_w:
            if restarted:
                # a plain projected-gradient step cannot improve: numerically optimal
                break
            y, t = w.copy(), 1.0
            restarted = True
            continue
        restarted = False
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_next + ((t - 1.0) / t_next) * (w_next - w)
        w, t, f_w = w_next, t_next, f_next
        if it % 20 == 0:
            res = kkt_residual(w, Q @ w + c)
            if res < tol * 1e-2:
                break
    polished = _polish(Q, c, w, tol * 1e-2)
    if polished is not None:
        res_p = kkt_residual(polished, Q @ polished + c)
        if res_p <= res or obj(polished) <= obj(w):
            w, res = polished, res_p
    res = kkt_residual(w, Q @ w + c)
    if res > 100 * tol:
        raise ConvergenceError("simplex QP did not converge", residual=res)
    return w, res


# -- weighting schemes ---------------------------------------------------------------

def assign_deciles(predictions):
    """Decile labels 1..10 by ascending prediction (see ``metrics.decile_labels``)."""
    return decile_labels(as_vector(predictions, "predictions"))


def ew_weights(n):
    if n < 1:
        raise ValueError("decile is empty")
    return np.full(n, 1.0 / n)


def vw_weights(market_caps):
    caps = as_vector(market_caps, "market_caps")
    if np.any(caps <= 0):
        raise ValueError("market caps must be positive")
    return caps / caps.sum()


def _decile_cov(Sigma, diagonal):
    S = check_square_symmetric(Sigma)
    if diagonal:
        return np.diag(np.diag(S))
    return S


def uw_weights(Sigma, diagonal=False, tol=1e-10):
    """Minimum ``w' Sigma w`` over the simplex."""
    S = _decile_cov(Sigma, diagonal)
    if diagonal and np.all(np.diag(S) > 0):
        inv = 1.0 / np.diag(S)
        return inv / inv.sum()
    w, _ = solve_simplex_qp(2.0 * S, tol=tol)
    return w


def level_adjusted(predictions, top):
    r = as_vector(predictions, "predictions")
    return r - r.min() if top else r.max() - r


def pw_weights(predictions, top):
    """Level-adjusted prediction weights; equal weights when all adjustments vanish."""
    s = level_adjusted(predictions, top)
    total = s.sum()
    if total <= 0:
        logger.info("pw_weights: constant predictions in decile, using equal weights")
        return ew_weights(s.size)
    return s / total


def puw_weights(s_hat, Sigma, gamma=1.0, diagonal=False, tol=1e-10):
    """Maximize ``w' s_hat - gamma/2 w' Sigma w`` over the simplex."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    s = as_vector(s_hat, "s_hat")
    S = _decile_cov(Sigma, diagonal)
    w, _ = solve_simplex_qp(gamma * S, -s, tol=tol)
    return w


def uw_objective(w, Sigma):
    return float(w @ Sigma @ w)


def puw_objective(w, s_hat, Sigma, gamma=1.0):
    return float(w @ s_hat - 0.5 * gamma * (w @ Sigma @ w))


# -- monthly construction --------------------------------------------------------------

def build_portfolios(predictions, market_caps, Sigma=None, var=None, gamma=1.0, diagonal=False):
    """All five strategies for one month's cross-section.

    ``Sigma`` is the full predictive covariance; when absent, ``var`` (its
    diagonal) is used and the programs run in diagonal mode.

    Returns ``{strategy: {decile: (indices, weights)}}``.
    """
    r_hat = as_vector(predictions, "predictions")
    caps = as_vector(market_caps, "market_caps")
    if Sigma is None:
        if var is None:
            raise ValueError("need Sigma or var")
        diagonal = True
    labels = assign_deciles(r_hat)
    book = {s: {} for s in STRATEGIES}
    for dec in range(1, N_DECILES + 1):
        idx = np.flatnonzero(labels == dec)
        if idx.size == 0:
            continue
        if Sigma is not None:
            sub = Sigma[np.ix_(idx, idx)]
            sub = 0.5 * (sub + sub.T)
        else:
            sub = np.diag(np.asarray(var, dtype=np.float64)[idx])
        top = dec > N_DECILES // 2
        s_hat = level_adjusted(r_hat[idx], top)
        book["EW"][dec] = (idx, ew_weights(idx.size))
        book["VW"][dec] = (idx, vw_weights(caps[idx]))
        book["UW"][dec] = (idx, uw_weights(sub, diagonal=diagonal))
        book["PW"][dec] = (idx, pw_weights(r_hat[idx], top))
        book["PUW"][dec] = (idx, puw_weights(s_hat, sub, gamma=gamma, diagonal=diagonal))
    return book


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class StrategyStats:
    mean: float
    sd: float
    sharpe: float
    cumulative_log: np.ndarray


def annualized_stats(simple_returns, log_returns=None):
    """Annualized mean (x12), SD (x sqrt 12, ddof=1) and Sharpe of monthly returns."""
    r = as_vector(simple_returns, "simple_returns")
    if r.size < 2:
        raise UndefinedMetricError("need at least two months for a standard deviation")
    mean = MONTHS_PER_YEAR * r.mean()
    sd = np.sqrt(MONTHS_PER_YEAR) * r.std(ddof=1)
    # a constant series can leave rounding residue in the SD
    if np.ptp(r) == 0 or not sd > 0:
        raise UndefinedMetricError("zero-variance return series has no Sharpe ratio")
    lr = np.log1p(r) if log_returns is None else as_vector(log_returns, "log_returns")
    return StrategyStats(mean=float(mean), sd=float(sd), sharpe=float(mean / sd),
                         cumulative_log=np.cumsum(lr))


class PortfolioBook:
    """Accumulates monthly decile portfolios and their realized returns."""

    def __init__(self, gamma=1.0, diagonal=False):
        self.gamma = gamma
        self.diagonal = diagonal
        self._weights = []
        self._returns = []

    def add_month(self, month, asset_ids, predictions, market_caps, realized_log, realized_simple,
                  Sigma=None, var=None):
        book = build_portfolios(predictions, market_caps, Sigma=Sigma, var=var,
                                gamma=self.gamma, diagonal=self.diagonal)
        return self.add_book(month, asset_ids, book, predictions, realized_log, realized_simple)

    def add_book(self, month, asset_ids, book, predictions, realized_log, realized_simple):
        """Record an already built month (output of ``build_portfolios``)."""
        r_hat = np.asarray(predictions, dtype=np.float64)
        realized_log = np.asarray(realized_log, dtype=np.float64)
        realized_simple = np.asarray(realized_simple, dtype=np.float64)
        for strat in STRATEGIES:
            for dec, (idx, w) in sorted(book[strat].items()):
                self._weights.append(pd.DataFrame({
                    "month": month, "strategy": strat, "decile": dec,
                    "asset_id": np.asarray(asset_ids)[idx], "weight": w,
                }))
                self._returns.append({
                    "month": month, "strategy": strat, "decile": dec,
                    "predicted": float(w @ r_hat[idx]),
                    "realized_log": float(w @ realized_log[idx]),
                    "realized_simple": float(w @ realized_simple[idx]),
                })
        return book

    def weights_frame(self):
        if not self._weights:
            return pd.DataFrame(columns=["month", "strategy", "decile", "asset_id", "weight"])
        return pd.concat(self._weights, ignore_index=True)

    def returns_frame(self):
        return pd.DataFrame(self._returns, columns=["month", "strategy", "decile", "predicted",
                                                    "realized_log", "realized_simple"])

    @staticmethod
    def from_returns(frame, gamma=1.0, diagonal=False):
        book = PortfolioBook(gamma, diagonal)
        book._returns = frame.to_dict("records")
        return book

    def _series(self, strat, leg):
        df = self.returns_frame()
        df = df[df.strategy == strat].pivot(index="month", columns="decile")
        hi, lo = df.columns.get_level_values("decile").max(), df.columns.get_level_values("decile").min()
        if leg == "D10":
            return df[("realized_simple", hi)], df[("realized_log", hi)]
        if leg == "D1":
            return df[("realized_simple", lo)], df[("realized_log", lo)]
        return (df[("realized_simple", hi)] - df[("realized_simple", lo)],
                df[("realized_log", hi)] - df[("realized_log", lo)])

    def stats(self):
        """Table of annualized mean/SD/Sharpe for D10, D1 and long-short per strategy."""
        rows = []
        for leg in ("D10", "D1", "LS"):
            for strat in STRATEGIES:
                simple, log = self._series(strat, leg)
                try:
                    st = annualized_stats(simple.to_numpy(), log.to_numpy())
                    rows.append({"portfolio": leg, "strategy": strat, "mean": st.mean,
                                 "sd": st.sd, "sharpe": st.sharpe})
                except UndefinedMetricError as exc:
                    logger.warning("%s %s: %s", strat, leg, exc)
                    rows.append({"portfolio": leg, "strategy": strat, "mean": np.nan,
                                 "sd": np.nan, "sharpe": np.nan})
        return pd.DataFrame(rows)

    def cumulative(self):
        frames = []
        for strat in STRATEGIES:
            for leg in ("D10", "D1", "LS"):
                _, log = self._series(strat, leg)
                frames.append(pd.DataFrame({"month": log.index, "strategy": strat, "portfolio": leg,
                                            "cumulative_log_return": np.cumsum(log.to_numpy())}))
        return pd.concat(frames, ignore_index=True)

    def decile_r2(self):
        """Pooled R^2 of portfolio-level predictions per decile, plus the 'All' row."""
        df = self.returns_frame()
        rows = []
        for strat in STRATEGIES:
            sub = df[df.strategy == strat]
            for dec, g in sub.groupby("decile"):
                rows.append({"decile": f"D{dec}", "strategy": strat,
                             "r2_pool": _pooled_r2(g.realized_log, g.predicted)})
            rows.append({"decile": "All", "strategy": strat,
                         "r2_pool": _pooled_r2(sub.realized_log, sub.predicted)})
        return pd.DataFrame(rows).pivot(index="decile", columns="strategy", values="r2_pool") \
            .reindex([f"D{d}" for d in range(1, N_DECILES + 1)] + ["All"])[list(STRATEGIES)]

    def mean_decile_returns(self, strategy="EW"):
        df = self.returns_frame()
        return df[df.strategy == strategy].groupby("decile")["realized_simple"].mean()


def _pooled_r2(realized, predicted):
    realized = np.asarray(realized, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    den = np.sum(realized**2)
    if den == 0:
        return np.nan
    return float(1.0 - np.sum((realized - predicted) ** 2) / den)
