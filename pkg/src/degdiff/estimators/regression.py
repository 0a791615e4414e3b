"""Least-squares polynomial regression for conditional expectations."""

import itertools
import warnings

import numpy as np
from scipy.stats import chi2

RIDGE = 1e-10
DEFAULT_DEGREE = 3


class RankDeficiencyWarning(UserWarning):
    pass


def monomial_exponents(k, degree):
    """All exponent tuples of total degree <= ``degree`` in k variables, constant first."""
    out = []
    for deg in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(k), deg):
            e = [0] * k
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return out


class RegressionModel:
    """Polynomial least-squares fit of (possibly vector) targets on a state.

    Features are centred and scaled before building monomials; columns
    with zero spread are dropped, so a degenerate (constant) state leaves
    only the intercept.
    """

    def __init__(self, degree=DEFAULT_DEGREE):
        self.degree = int(degree)

    def _design(self, X):
        Z = (X[:, self.active] - self.center) / self.scale
        cols = [np.prod(Z ** np.array(e), axis=1) for e in self.exponents]
        return np.stack(cols, axis=1)

    def fit(self, X, Y):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(Y, dtype=float)
        self.vector_target = Y.ndim > 1
        Y2 = Y.reshape(len(Y), -1)
        spread = X.std(axis=0)
        self.active = np.flatnonzero(spread > 1e-12 * (1.0 + np.abs(X.mean(axis=0))))
        self.center = X[:, self.active].mean(axis=0)
        self.scale = spread[self.active]
        self.exponents = monomial_exponents(len(self.active), self.degree)
        p = len(self.exponents)
        if len(X) < 10 * p:
            raise ValueError(f"need at least {10 * p} samples for {p} basis functions, got {len(X)}")
        A = self._design(X)
        gram = A.T @ A
        self.rank = int(np.linalg.matrix_rank(A))
        self.condition = float(np.linalg.cond(A))
        self.regularized = self.rank < p
        if self.regularized:
            warnings.warn(f"design has rank {self.rank} < {p}; using ridge {RIDGE}",
                          RankDeficiencyWarning, stacklevel=2)
            gram = gram + RIDGE * np.trace(gram) / p * np.eye(p)
            coef = np.linalg.solve(gram, A.T @ Y2)
        else:
            coef = np.linalg.lstsq(A, Y2, rcond=None)[0]
        self.coef = coef
        self.residuals = Y2 - A @ coef
        self.n = len(X)
        self._bread = np.linalg.pinv(gram)
        self._design_cache = A
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        out = self._design(X) @ self.coef
        return out if self.vector_target else out[:, 0]

    def covariance(self, target=0, other=None):
        """Heteroskedasticity-robust (HC0) covariance of the coefficients.

        With ``other`` given, the cross-covariance between the coefficients
        of two targets.
        """
        A = self._design_cache
        e = self.residuals[:, target]
        e2 = e if other is None else self.residuals[:, other]
        meat = (A * (e * e2)[:, None]).T @ A
        return self._bread @ meat @ self._bread

    def prediction_variance(self, X, target=0, other=None):
        """phi(x)^T Cov(beta_target, beta_other) phi(x) at each row of X."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        phi = self._design(X)
        return np.einsum("si,ij,sj->s", phi, self.covariance(target, other), phi)

    def wald(self, target=0, skip_intercept=False):
        """Wald statistic for all coefficients being zero, with its degrees of freedom."""
        b = self.coef[:, target]
        C = self.covariance(target)
        if skip_intercept:
            b, C = b[1:], C[1:, 1:]
        stat = float(b @ np.linalg.pinv(C) @ b) if len(b) else 0.0
        return stat, len(b)

    def diagnostics(self):
        return {"degree": self.degree, "basis": len(self.exponents), "rank": self.rank,
                "condition": self.condition, "regularized": self.regularized, "n": self.n}


def cond_exp_regression(features, targets, degree=DEFAULT_DEGREE):
    """Fit E[target | feature] by polynomial least squares; returns a RegressionModel."""
    return RegressionModel(degree).fit(features, targets)


def chi2_quantile(p, k):
    return float(chi2.ppf(p, k)) if k > 0 else 0.0
