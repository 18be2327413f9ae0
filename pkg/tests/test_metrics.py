import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainparc.errors import AllZeroDifferences, BothEmpty, LengthMismatch, ZeroBaseline
from brainparc.metrics import (
    annual_pct_change,
    bland_altman,
    dsc,
    icv,
    mann_whitney_u,
    midranks,
    region_report,
    vs,
    wilcoxon_signed_rank,
)
from brainparc.nifti import LabelVolume
from brainparc.toy import phantom_tree


def _count(pred, truth, region):
    y = t = both = 0
    for p, q in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        y += p == region
        t += q == region
        both += p == region and q == region
    return y, t, both


def test_dsc_vs_examples():
    a = np.zeros(16, dtype=int)
    b = np.zeros(16, dtype=int)
    a[:8] = 1
    b[4:12] = 1
    assert dsc(a, b, 1) == 0.5 and vs(a, b, 1) == 1.0
    assert dsc(a, a, 1) == 1.0
    c = np.zeros(16, dtype=int)
    c[8:16] = 1
    assert dsc(a, c, 1) == 0.0 and vs(a, c, 1) == 1.0
    y = np.zeros(8, dtype=int)
    t = np.zeros(8, dtype=int)
    y[:6] = 2
    t[:2] = 2
    assert vs(y, t, 2) == 0.5
    with pytest.raises(BothEmpty):
        dsc(y, t, 9)
    with pytest.raises(BothEmpty):
        vs(y, t, 9)


def test_dsc_vs_brute_force(rng):
    for _ in range(50):
        p = rng.integers(0, 3, size=(4, 4, 4))
        q = rng.integers(0, 3, size=(4, 4, 4))
        for r in (1, 2):
            ny, nt, both = _count(p, q, r)
            if ny + nt == 0:
                continue
            assert dsc(p, q, r) == 2 * both / (ny + nt)
            assert vs(p, q, r) == 1 - abs(ny - nt) / (ny + nt)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), fill=st.floats(0.01, 0.9))
def test_vs_dominates_dsc_and_symmetry(seed, fill):
    r = np.random.default_rng(seed)
    p = (r.random((5, 5, 5)) < fill).astype(int)
    q = (r.random((5, 5, 5)) < fill).astype(int)
    if p.sum() + q.sum() == 0:
        return
    assert vs(p, q, 1) >= dsc(p, q, 1)
    assert dsc(p, q, 1) == dsc(q, p, 1) and vs(p, q, 1) == vs(q, p, 1)


def test_midranks():
    assert midranks([3, 1, 4, 1, 5]).tolist() == [3.0, 1.5, 4.0, 1.5, 5.0]
    assert midranks([2, 2, 2]).tolist() == [2.0, 2.0, 2.0]


def _brute_wilcoxon_p(d):
    """Two-sided exact p by listing every sign assignment of the absolute ranks."""
    ranks = midranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    stats = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product([0, 1], repeat=len(d))]
    stats = np.array(stats)
    lower = np.mean(stats <= w_plus + 1e-9)
    upper = np.mean(stats >= w_plus - 1e-9)
    return min(1.0, 2 * min(lower, upper))


def test_wilcoxon_examples():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert r.statistic == 0 and r.exact and np.isclose(r.pvalue, 0.0625, atol=1e-12)
    with pytest.raises(AllZeroDifferences):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        wilcoxon_signed_rank([1, 2, 3], [1, 2])


def test_wilcoxon_brute_force_and_antisymmetry(rng):
    for n in range(5, 11):
        x = np.round(rng.normal(size=n), 1)
        y = np.round(rng.normal(size=n), 1)
        d = (x - y)[(x - y) != 0]
        if len(d) < 5:
            continue
        r = wilcoxon_signed_rank(x, y)
        assert np.isclose(r.pvalue, _brute_wilcoxon_p(d), atol=1e-12)
        assert r.pvalue == wilcoxon_signed_rank(y, x).pvalue


def test_wilcoxon_matches_scipy_normal():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=30), rng.normal(0.4, 1, size=30)
    ours = wilcoxon_signed_rank(x, y)
    ref = stats.wilcoxon(x, y, correction=True, method="approx")
    assert not ours.exact
    assert np.isclose(ours.statistic, ref.statistic) and np.isclose(ours.pvalue, ref.pvalue, rtol=1e-9)


def test_mann_whitney_examples():
    r = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert r.statistic == 0 and r.exact and np.isclose(r.pvalue, 0.1, atol=1e-12)
    assert mann_whitney_u([4, 5, 6], [1, 2, 3]).pvalue == r.pvalue
    assert mann_whitney_u([1, 2, 3], [3, 2, 1]).pvalue == 1.0


def test_mann_whitney_matches_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=5), rng.normal(1, 1, size=6)
    ref = stats.mannwhitneyu(x, y, method="exact")
    ours = mann_whitney_u(x, y)
    assert ours.statistic == ref.statistic and np.isclose(ours.pvalue, ref.pvalue)
    x, y = rng.normal(size=20), np.round(rng.normal(0.5, 1, size=25), 1)
    ref = stats.mannwhitneyu(x, y, method="asymptotic", use_continuity=True)
    ours = mann_whitney_u(x, y)
    assert ours.statistic == ref.statistic and np.isclose(ours.pvalue, ref.pvalue, rtol=1e-9)


def test_exact_and_normal_agree_at_boundary(rng):
    for _ in range(30):
        x = rng.normal(size=12)
        y = rng.normal(size=12) + rng.uniform(0, 1)
        assert abs(wilcoxon_signed_rank(x, y, exact=True).pvalue - wilcoxon_signed_rank(x, y, exact=False).pvalue) < 0.02
        a, b = x[:6], y[:6]
        assert abs(mann_whitney_u(a, b, exact=True).pvalue - mann_whitney_u(a, b, exact=False).pvalue) < 0.02


def test_bland_altman_examples(tmp_path):
    b = np.array([3.0, 5.0, 8.0])
    r = bland_altman(b + 2.5, b)
    assert r.mean_diff == 2.5 and r.sd_diff == 0 and r.loa_low == r.loa_high == 2.5
    r = bland_altman([1.0, 3.0], [2.0, 2.0])
    assert r.mean_diff == 0 and np.isclose(r.sd_diff, np.sqrt(2))
    assert np.isclose(r.loa_high, 1.96 * np.sqrt(2)) and np.isclose(r.loa_low, -1.96 * np.sqrt(2))
    r.write_points(tmp_path / "ba.tsv")
    lines = (tmp_path / "ba.tsv").read_text().splitlines()
    assert lines[0] == "mean\tdifference" and len(lines) == 3
    with pytest.raises(LengthMismatch):
        bland_altman([1.0], [2.0])
    with pytest.raises(LengthMismatch):
        bland_altman([1.0, 2.0], [2.0])


def test_icv_and_change():
    lab = np.zeros((20, 10, 10), dtype=np.int32)
    assert icv(lab) == 0.0
    lab[:10] = 3
    assert icv(lab) == 1000.0
    assert np.isclose(icv(lab, spacing=(1, 1, 1.2)), 1200.0)
    assert np.isclose(icv(LabelVolume.from_array(lab, spacing=(1, 1, 1.2))), 1200.0)
    assert annual_pct_change(100, 100, 3) == 0
    assert annual_pct_change(100, 90, 2) == -5
    with pytest.raises(ZeroBaseline):
        annual_pct_change(0, 10, 1)


def test_icv_additive(rng):
    lab = rng.integers(0, 5, size=(6, 6, 6))
    parts = [icv(np.where(lab == r, r, 0)) for r in range(1, 5)]
    assert icv(lab) == sum(parts)


def test_region_report(tmp_path, rng):
    tree = phantom_tree()
    truth = rng.choice([0, 1, 3, 4], size=(6, 6, 6))
    rep = region_report(truth, truth, tree)
    assert all(r.dsc == 1 and r.vs == 1 for r in rep.rows)
    assert rep.summary["dsc_mean"] == 1 and rep.summary["dsc_sd"] == 0
    assert rep.undefined == [5]
    pred = np.where(truth == 3, 4, truth)
    rep = region_report(pred, truth, tree)
    assert sorted(r.region for r in rep.rows if r.dsc < 1) == [3, 4]
    rep = region_report(pred, truth, tree, regions=[1, 4])
    assert [r.region for r in rep.rows] == [1, 4]
    rep.to_tsv(tmp_path / "r.tsv")
    assert (tmp_path / "r.tsv").read_text().splitlines()[0].split("\t")[:4] == ["region", "name", "dsc", "vs"]
    assert json.loads(rep.to_json())["summary"]["regions"] == 2
