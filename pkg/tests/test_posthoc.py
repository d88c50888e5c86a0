import numpy as np
import pandas as pd
import pytest

from turnterm.analysis.lmm import fit_lmm
from turnterm.analysis.posthoc import all_posthoc, bonferroni, posthoc_contrasts
from turnterm.errors import UnconvergedFit

ARCHS = ("AF", "AO", "EF", "LF", "TO")


def _records(seed, twins=("AO", "EF")):
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(5):
        for i in range(8):
            for te in ("3s_auto", "ref_auto", "ref_man"):
                for tr in ("3s_auto", "ref_auto", "ref_man"):
                    shared = int(rng.random() < 0.8)
                    for a in ARCHS:
                        c = shared if a in twins else int(rng.random() < 0.5 + 0.08 * ARCHS.index(a))
                        rows.append(dict(sample_id=f"s{k}-{i}", show_id=f"h{k}", architecture=a,
                                         test_setting=te, train_setting=tr, correct=c))
    return pd.DataFrame(rows)


def test_bonferroni_examples():
    assert bonferroni(0.004, 10) == pytest.approx(0.04, abs=1e-15)
    assert bonferroni(0.2, 10) == 1.0
    assert bonferroni(0.0, 10) == 0.0


@pytest.fixture(scope="module")
def fit():
    return fit_lmm(_records(0))


def test_family_of_ten(fit):
    res = posthoc_contrasts(fit, "ref_man", "ref_man")
    assert len(res) == 10
    for c in res:
        assert c.m == 10
        assert c.p_adjusted == min(1.0, 10 * c.p_raw)
        assert c.p_adjusted >= c.p_raw
    assert len(all_posthoc(fit)) == 90


def test_identical_predictions_give_zero_contrast(fit):
    for te in fit.levels["test"]:
        for tr in fit.levels["train"]:
            c = next(c for c in posthoc_contrasts(fit, te, tr) if {c.arch_i, c.arch_j} == {"AO", "EF"})
            assert abs(c.estimate) < 1e-10
            assert c.p_adjusted == 1.0


def test_estimate_is_difference_of_cell_means(fit):
    c = posthoc_contrasts(fit, "3s_auto", "ref_auto")[0]
    diff = fit.cell_mean(c.arch_i, "3s_auto", "ref_auto")[0] - fit.cell_mean(c.arch_j, "3s_auto", "ref_auto")[0]
    assert c.estimate == pytest.approx(diff, abs=1e-12)


def test_unconverged_fit_rejected(fit):
    import dataclasses

    bad = dataclasses.replace(fit, converged=False)
    with pytest.raises(UnconvergedFit):
        posthoc_contrasts(bad, "ref_man", "ref_man")
