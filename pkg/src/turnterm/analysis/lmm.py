"""REML fitting of linear mixed models with nested random intercepts.

Covariance of the response is ``sigma2 * H`` with
``H = I + theta_u * Z_u Z_u' + theta_o * Z_o Z_o'`` where ``u`` indexes the
inner units (e.g. sample within show) and ``o`` the outer groups (shows).
Because the units are nested, ``H^-1`` and ``log|H|`` have closed forms
per group (Woodbury twice), so each deviance evaluation costs
O(n_units * p^2) after a single pass over the data.

The profiled REML deviance is minimised over the relative standard
deviations ``phi = sqrt(theta) >= 0`` with bounded Nelder-Mead, then
refined with Newton steps on its analytic score.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

from ..errors import (
    EmptyRecords,
    MaxIterationsExceeded,
    NonNestedGrouping,
    RankDeficientDesign,
)

Z95 = float(norm.ppf(0.975))


@dataclass
class RemlResult:
    beta: np.ndarray
    cov_beta: np.ndarray
    sigma2: float
    theta: dict
    variances: dict
    deviance: float
    converged: bool
    n_iter: int
    message: str = ""


class NestedReml:
    """Sufficient statistics and REML deviance for nested random intercepts.

    ``units`` labels the innermost random factor for every row. ``outer``
    (optional) labels a grouping that must contain each unit entirely.
    """

    def __init__(self, y, X, units, outer=None, unit_name="group", outer_name="outer"):
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError("y must be 1-D with one row of X per observation")
        if y.size == 0:
            raise EmptyRecords("no observations to fit")
        self.n, self.p = X.shape
        if self.n <= self.p:
            raise RankDeficientDesign(f"{self.n} observations for {self.p} fixed effects")
        self.unit_name, self.outer_name = unit_name, outer_name
        self.X, self.y = X, y

        u_levels, u_idx = np.unique(np.asarray(units), return_inverse=True)
        self.n_units = len(u_levels)
        ind = sps.csr_matrix((np.ones(self.n), (u_idx, np.arange(self.n))), shape=(self.n_units, self.n))
        self.m = np.asarray(ind.sum(axis=1)).ravel()
        self.Xs = np.asarray(ind @ X)
        self.ys = np.asarray(ind @ y).ravel()
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)

        self.has_outer = outer is not None
        if self.has_outer:
            outer = np.asarray(outer)
            o_levels, o_idx = np.unique(outer, return_inverse=True)
            unit_outer = np.full(self.n_units, -1)
            unit_outer[u_idx] = o_idx
            if np.any(unit_outer[u_idx] != o_idx):
                raise NonNestedGrouping(f"some {unit_name} levels occur in more than one {outer_name}")
            self.n_outer = len(o_levels)
            self.outer_ind = sps.csr_matrix(
                (np.ones(self.n_units), (unit_outer, np.arange(self.n_units))), shape=(self.n_outer, self.n_units)
            )

        evals = np.linalg.eigvalsh(self.XtX)
        if evals[0] <= 1e-10 * max(evals[-1], 1.0):
            raise RankDeficientDesign(f"fixed-effects design is rank deficient (min eigenvalue {evals[0]:.3g})")

    @property
    def n_theta(self) -> int:
        return 2 if self.has_outer else 1

    def _weighted(self, theta):
        tu = theta[0]
        denom = 1.0 + tu * self.m
        c = tu / denom
        w = 1.0 / denom
        A = self.XtX - (self.Xs * c[:, None]).T @ self.Xs
        b = self.Xty - self.Xs.T @ (c * self.ys)
        q = self.yty - float(c @ (self.ys * self.ys))
        logdet = float(np.sum(np.log(denom)))
        if self.has_outer and theta[1] > 0:
            to = theta[1]
            S = self.outer_ind @ (self.m * w)
            d = to / (1.0 + to * S)
            WX = self.outer_ind @ (self.Xs * w[:, None])
            Wy = self.outer_ind @ (self.ys * w)
            A = A - (WX * d[:, None]).T @ WX
            b = b - WX.T @ (d * Wy)
            q = q - float(d @ (Wy * Wy))
            logdet += float(np.sum(np.log1p(to * S)))
        return A, b, q, logdet

    def solve(self, theta):
        """(beta, rss_H, A, logdet_H) at fixed variance ratios."""
        A, b, q, logdet = self._weighted(theta)
        cf = cho_factor(A, lower=True)
        beta = cho_solve(cf, b)
        rss = max(q - float(b @ beta), 0.0)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        return beta, rss, cf, logdet, logdet_a

    def _hinv_blocks(self, theta):
        """Per-unit weights (w, c) and per-outer (d, S) defining H^-1."""
        tu = theta[0]
        w = 1.0 / (1.0 + tu * self.m)
        c = tu * w
        if self.has_outer:
            S = self.outer_ind @ (self.m * w)
            d = theta[1] / (1.0 + theta[1] * S)
        else:
            S = d = None
        return w, c, S, d

    def gradient(self, theta) -> np.ndarray:
        """Analytic derivative of the profiled REML deviance w.r.t. the variance ratios."""
        theta = np.asarray(theta, dtype=np.float64)
        beta, rss, cf, _, _ = self.solve(theta)
        dof = self.n - self.p
        w, c, S, d = self._hinv_blocks(theta)
        # unit sums of the residual and of X
        R = self.ys - self.Xs @ beta
        Vs = np.column_stack([R, self.Xs])
        if self.has_outer:
            Wg = self.outer_ind @ (Vs * w[:, None])
            d_unit = self.outer_ind.T @ d
            Wg_unit = self.outer_ind.T @ Wg
            zu = w[:, None] * (Vs - (d_unit * self.m)[:, None] * Wg_unit)
            zo = Wg / (1.0 + theta[1] * S)[:, None]
        else:
            zu = w[:, None] * Vs
        grads = []
        blocks = [(zu, self._trace_units(theta, w, S, d))]
        if self.has_outer:
            blocks.append((zo, float(np.sum(S / (1.0 + theta[1] * S)))))
        for z, tr_h in blocks:
            zr, zx = z[:, 0], z[:, 1:]
            g_rss = -dof * float(zr @ zr) / rss
            g_a = -float(np.trace(cho_solve(cf, zx.T @ zx)))
            grads.append(g_rss + tr_h + g_a)
        return np.array(grads)

    def _trace_units(self, theta, w, S, d):
        tr = float(np.sum(w * self.m))
        if self.has_outer:
            d_unit = self.outer_ind.T @ d
            tr -= float(np.sum(d_unit * (w * self.m) ** 2))
        return tr

    def deviance(self, theta) -> float:
        """-2 * restricted log-likelihood with sigma2 profiled out."""
        _, rss, _, logdet, logdet_a = self.solve(theta)
        dof = self.n - self.p
        if rss <= 0.0:
            return -np.inf
        return dof * np.log(2 * np.pi * rss / dof) + dof + logdet + logdet_a

    def ols_rss(self) -> float:
        beta = np.linalg.solve(self.XtX, self.Xty)
        return max(self.yty - float(self.Xty @ beta), 0.0), beta

    def fit(self, fixed_theta: Optional[Sequence[float]] = None, rel_tol: float = 1e-8,
            max_iter: int = 20_000, max_restarts: int = 8) -> RemlResult:
        dof = self.n - self.p
        rss0, beta0 = self.ols_rss()
        if rss0 <= 1e-24 * max(self.yty, 1.0):
            # response lies in the column space of X: every variance is zero
            theta = np.zeros(self.n_theta)
            return self._result(theta, beta0, 0.0, np.zeros((self.p, self.p)), -np.inf, True, 0, "exact fit")
        if fixed_theta is not None:
            theta = np.asarray(fixed_theta, dtype=np.float64)
            if theta.shape != (self.n_theta,) or np.any(theta < 0):
                raise ValueError(f"fixed_theta must be {self.n_theta} non-negative ratios")
            return self._finish(theta, True, 0, "variance ratios fixed")

        def f(phi):
            return self.deviance(np.asarray(phi) ** 2)

        bounds = [(0.0, None)] * self.n_theta
        phi = np.ones(self.n_theta) * 0.5
        prev = f(phi)
        n_iter = 0
        converged = False
        for _ in range(max_restarts):
            res = minimize(
                f, phi, method="Nelder-Mead", bounds=bounds,
                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": max_iter, "maxfev": 4 * max_iter,
                         "initial_simplex": _simplex(phi)},
            )
            n_iter += int(res.nit)
            phi = np.clip(res.x, 0.0, None)
            cur = float(res.fun)
            if abs(prev - cur) <= rel_tol * max(abs(cur), 1.0):
                converged = True
                break
            prev = cur
        if not converged:
            raise MaxIterationsExceeded(
                "REML optimisation did not converge",
                diagnostics={"phi": phi.tolist(), "deviance": prev, "iterations": n_iter},
            )
        phi = self._snap_to_boundary(phi, f)
        theta = self._polish(phi ** 2)
        return self._finish(theta, converged, n_iter, "converged")

    def _polish(self, theta, steps: int = 30):
        """Newton steps on the analytic score for the interior components.

        The simplex search stalls where the deviance is flat to rounding; the
        score still resolves the optimum there.
        """
        free = np.flatnonzero(theta > 0)
        if free.size == 0:
            return theta
        # near the optimum the deviance is flat to rounding, so steps are judged by the
        # score norm; the deviance only guards against leaving the basin
        cur = theta.copy()
        start_dev = self.deviance(cur)
        g = self.gradient(cur)[free]
        best, best_g = cur.copy(), float(np.linalg.norm(g))
        for _ in range(steps):
            hess = np.empty((free.size, free.size))
            for j, k in enumerate(free):
                h = 1e-5 * max(cur[k], 1e-4)
                up, dn = cur.copy(), cur.copy()
                up[k] += h
                dn[k] -= min(h, cur[k])
                hess[:, j] = (self.gradient(up)[free] - self.gradient(dn)[free]) / (up[k] - dn[k])
            try:
                step = np.linalg.solve(0.5 * (hess + hess.T), g)
            except np.linalg.LinAlgError:
                break
            nxt = cur.copy()
            nxt[free] = cur[free] - step
            if np.any(nxt[free] <= 0):
                break
            if self.deviance(nxt) > start_dev + 1e-9 * max(abs(start_dev), 1.0):
                break
            cur = nxt
            g = self.gradient(cur)[free]
            gn = float(np.linalg.norm(g))
            if gn < best_g:
                best, best_g = cur.copy(), gn
            if np.all(np.abs(step) <= 1e-14 * (1.0 + np.abs(cur[free]))):
                break
        return best

    def _snap_to_boundary(self, phi, f):
        best = f(phi)
        for k in range(len(phi)):
            if phi[k] == 0.0:
                continue
            trial = phi.copy()
            trial[k] = 0.0
            val = f(trial)
            if val <= best:
                phi, best = trial, val
        return phi

    def _finish(self, theta, converged, n_iter, message):
        beta, rss, cf, logdet, logdet_a = self.solve(theta)
        dof = self.n - self.p
        sigma2 = rss / dof
        cov = sigma2 * cho_solve(cf, np.eye(self.p))
        dev = self.deviance(theta)
        return self._result(theta, beta, sigma2, cov, dev, converged, n_iter, message)

    def _result(self, theta, beta, sigma2, cov, dev, converged, n_iter, message):
        theta_d = {self.unit_name: float(theta[0])}
        variances = {self.unit_name: float(theta[0] * sigma2)}
        if self.has_outer:
            theta_d[self.outer_name] = float(theta[1])
            variances[self.outer_name] = float(theta[1] * sigma2)
        variances["residual"] = float(sigma2)
        return RemlResult(np.asarray(beta), 0.5 * (cov + cov.T), float(sigma2), theta_d, variances,
                          float(dev), converged, n_iter, message)


def _simplex(x0):
    k = len(x0)
    pts = [x0]
    for i in range(k):
        e = x0.copy()
        e[i] = e[i] + max(0.25 * abs(e[i]), 0.05)
        pts.append(e)
    return np.array(pts)


def fit_reml(y, X, groups, outer=None, fixed_theta=None, rel_tol: float = 1e-8) -> RemlResult:
    """Fit ``y ~ X + (1 | groups)`` or, with ``outer``, ``(1 | outer/groups)``."""
    return NestedReml(y, X, groups, outer).fit(fixed_theta=fixed_theta, rel_tol=rel_tol)


# --- the accuracy model: correct ~ model * (test + train) + (1 | show/sample) -------------


REFERENCE_NOTE = "treatment coding; reference level = alphabetically first level of each factor"


@dataclass
class MixedModelSpec:
    response: str = "correct"
    model_col: str = "architecture"
    test_col: str = "test_setting"
    train_col: str = "train_setting"
    outer_col: str = "show_id"
    inner_col: str = "sample_id"
    fixed_theta: Optional[tuple] = None


@dataclass
class MixedModelFit:
    coef_names: list
    beta: list
    cov_beta: list
    variances: dict
    theta: dict
    reml_loglik: float
    deviance: float
    converged: bool
    n_iter: int
    message: str
    levels: dict
    coding: str
    n_obs: int
    n_groups: dict
    cells: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, path) -> "MixedModelFit":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        data.pop("_meta", None)
        return cls(**data)

    def cell_vector(self, model: str, test: str, train: str) -> np.ndarray:
        return design_row(self.levels, model, test, train)

    def cell_mean(self, model, test, train):
        L = self.cell_vector(model, test, train)
        beta = np.asarray(self.beta)
        cov = np.asarray(self.cov_beta)
        est = float(L @ beta)
        se = float(np.sqrt(max(L @ cov @ L, 0.0)))
        return est, se


def coef_names(levels: dict) -> list:
    m, te, tr = (levels[k][1:] for k in ("model", "test", "train"))
    names = ["(Intercept)"]
    names += [f"model[T.{a}]" for a in m]
    names += [f"test[T.{a}]" for a in te]
    names += [f"train[T.{a}]" for a in tr]
    names += [f"model[T.{a}]:test[T.{b}]" for a, b in itertools.product(m, te)]
    names += [f"model[T.{a}]:train[T.{b}]" for a, b in itertools.product(m, tr)]
    return names


def _dummies(values, levels):
    values = np.asarray(values)
    return np.stack([(values == lv).astype(np.float64) for lv in levels[1:]], axis=1) if len(levels) > 1 \
        else np.zeros((len(values), 0))


def design_matrix(levels: dict, model, test, train) -> np.ndarray:
    M = _dummies(model, levels["model"])
    Te = _dummies(test, levels["test"])
    Tr = _dummies(train, levels["train"])
    n = M.shape[0]
    cols = [np.ones((n, 1)), M, Te, Tr]
    if M.shape[1] and Te.shape[1]:
        cols.append((M[:, :, None] * Te[:, None, :]).reshape(n, -1))
    if M.shape[1] and Tr.shape[1]:
        cols.append((M[:, :, None] * Tr[:, None, :]).reshape(n, -1))
    return np.hstack(cols)


def design_row(levels, model, test, train) -> np.ndarray:
    return design_matrix(levels, [model], [test], [train])[0]


def _columns(records, spec: MixedModelSpec):
    import pandas as pd

    if isinstance(records, pd.DataFrame):
        df = records
    else:
        df = pd.DataFrame([r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in records])
    if len(df) == 0:
        raise EmptyRecords("no prediction records to fit")
    return df


def fit_lmm(records, spec: MixedModelSpec = MixedModelSpec()) -> MixedModelFit:
    """Fit ``correct ~ model * (test + train) + (1 | show/sample)`` by REML.

    Factors with a single observed level contribute no columns.
    """
    df = _columns(records, spec)
    levels = {
        "model": sorted(df[spec.model_col].astype(str).unique()),
        "test": sorted(df[spec.test_col].astype(str).unique()),
        "train": sorted(df[spec.train_col].astype(str).unique()),
    }
    X = design_matrix(levels, df[spec.model_col].astype(str).values, df[spec.test_col].astype(str).values,
                      df[spec.train_col].astype(str).values)
    y = df[spec.response].astype(float).values
    outer = df[spec.outer_col].astype(str).values
    # "sample within show": the unit is the (show, sample) pair
    inner = np.char.add(np.char.add(outer.astype(str), "\x1f"), df[spec.inner_col].astype(str).values.astype(str))
    sample_shows = df.groupby(spec.inner_col)[spec.outer_col].nunique()
    if (sample_shows > 1).any():
        raise NonNestedGrouping(f"samples appear under several shows: {list(sample_shows[sample_shows > 1].index[:3])}")
    problem = NestedReml(y, X, inner, outer, unit_name="sample:show", outer_name="show")
    res = problem.fit(fixed_theta=spec.fixed_theta)
    fit = MixedModelFit(
        coef_names=coef_names(levels),
        beta=res.beta.tolist(),
        cov_beta=res.cov_beta.tolist(),
        variances=res.variances,
        theta=res.theta,
        reml_loglik=-0.5 * res.deviance,
        deviance=res.deviance,
        converged=res.converged,
        n_iter=res.n_iter,
        message=res.message,
        levels=levels,
        coding=REFERENCE_NOTE,
        n_obs=problem.n,
        n_groups={"show": problem.n_outer, "sample:show": problem.n_units},
    )
    observed = df[[spec.model_col, spec.test_col, spec.train_col]].astype(str).drop_duplicates()
    for a, te, tr in sorted(map(tuple, observed.values)):
        est, se = fit.cell_mean(a, te, tr)
        fit.cells.append({"architecture": a, "test": te, "train": tr, "mean": est, "se": se,
                          "ci_low": est - Z95 * se, "ci_high": est + Z95 * se})
    return fit
