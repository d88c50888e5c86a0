"""Pairwise architecture contrasts on fitted cell means, Bonferroni-adjusted."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from ..errors import UnconvergedFit
from .lmm import MixedModelFit


@dataclass
class ContrastResult:
    arch_i: str
    arch_j: str
    test: str
    train: str
    estimate: float
    se: float
    z: float
    p_raw: float
    p_adjusted: float
    m: int

    def to_dict(self):
        return asdict(self)


def bonferroni(p_raw: float, m: int) -> float:
    return min(1.0, m * p_raw)


def posthoc_contrasts(fit: MixedModelFit, test: str, train: str, architectures=None) -> list[ContrastResult]:
    """All architecture pairs at one (test, train) cell; Wald z test, m = C(k, 2)."""
    if not fit.converged:
        raise UnconvergedFit("post-hoc contrasts need a converged fit")
    archs = list(architectures or fit.levels["model"])
    pairs = list(itertools.combinations(archs, 2))
    m = len(pairs)
    beta = np.asarray(fit.beta)
    cov = np.asarray(fit.cov_beta)
    out = []
    for a, b in pairs:
        L = fit.cell_vector(a, test, train) - fit.cell_vector(b, test, train)
        est = float(L @ beta)
        se = float(np.sqrt(max(L @ cov @ L, 0.0)))
        if se > 0:
            z = est / se
            p = float(2.0 * norm.sf(abs(z)))
        else:
            z = 0.0 if est == 0 else np.copysign(np.inf, est)
            p = 1.0 if est == 0 else 0.0
        out.append(ContrastResult(a, b, test, train, est, se, float(z), p, bonferroni(p, m), m))
    return out


def all_posthoc(fit: MixedModelFit) -> list[ContrastResult]:
    out = []
    for test in fit.levels["test"]:
        for train in fit.levels["train"]:
            out.extend(posthoc_contrasts(fit, test, train))
    return out
